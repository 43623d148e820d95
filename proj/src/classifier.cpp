#include "invreg/classifier.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "invreg/rng.hpp"

namespace invreg {

void Architecture::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw std::invalid_argument("architecture: empty input shape");
  if (classes < 2) throw std::invalid_argument("architecture: need at least two classes");
  std::size_t h = height, w = width;
  for (auto c : conv_widths) {
    if (c == 0) throw std::invalid_argument("architecture: zero-width conv layer");
    h /= 2;
    w /= 2;
    if (h == 0 || w == 0) throw std::invalid_argument("architecture: input too small for the pooling stages");
  }
  for (auto d : dense_widths) {
    if (d == 0) throw std::invalid_argument("architecture: zero-width dense layer");
  }
}

std::string Architecture::describe() const {
  std::ostringstream os;
  os << "input " << height << "x" << width << "x" << channels;
  for (auto c : conv_widths) os << " | conv" << c << "-relu-pool";
  for (auto d : dense_widths) os << " | dense" << d << "-relu";
  os << " | dense" << classes;
  return os.str();
}

Normalization Normalization::identity(std::size_t channels) {
  return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

Classifier Classifier::create(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  Classifier model;
  model.arch_ = arch;
  model.norm_ = Normalization::identity(arch.channels);

  const SeedStream init = SeedStream(seed).named("init");
  auto add = [&](std::string name, Shape shape, double fan_in, double gain = 2.0) {
    const std::size_t index = model.params_.size();
    std::vector<double> v(shape_numel(shape), 0.0);
    if (fan_in > 0.0) {
      Rng rng(init.child(index));
      const double sd = std::sqrt(gain / fan_in);
      for (auto& x : v) x = sd * rng.normal();
    }
    model.params_.emplace_back(std::move(shape), std::move(v), true);
    model.names_.push_back(std::move(name));
  };

  std::size_t cin = arch.channels, h = arch.height, w = arch.width;
  for (std::size_t i = 0; i < arch.conv_widths.size(); ++i) {
    const auto cout = arch.conv_widths[i];
    add("conv" + std::to_string(i + 1) + ".weight", {3, 3, cin, cout}, 9.0 * static_cast<double>(cin));
    add("conv" + std::to_string(i + 1) + ".bias", {cout}, 0.0);
    cin = cout;
    h /= 2;
    w /= 2;
  }
  std::size_t in = h * w * cin;
  std::vector<std::size_t> outs = arch.dense_widths;
  outs.push_back(arch.classes);
  for (std::size_t i = 0; i < outs.size(); ++i) {
    // The linear head has no ReLU after it, so it gets unit gain.
    const double gain = i + 1 == outs.size() ? 1.0 : 2.0;
    add("dense" + std::to_string(i + 1) + ".weight", {in, outs[i]}, static_cast<double>(in), gain);
    add("dense" + std::to_string(i + 1) + ".bias", {outs[i]}, 0.0);
    in = outs[i];
  }
  return model;
}

void Classifier::set_normalization(Normalization norm) {
  if (norm.mean.size() != arch_.channels || norm.stddev.size() != arch_.channels) {
    throw std::invalid_argument("normalization: channel count mismatch");
  }
  for (double s : norm.stddev) {
    if (!(s > 0.0)) throw std::invalid_argument("normalization: standard deviations must be positive");
  }
  norm_ = std::move(norm);
}

std::size_t Classifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

Tensor Classifier::logits(Tape& tape, const Tensor& images, bool track_params) const {
  Tensor x = images;
  if (x.rank() == 3) x = ad::reshape(tape, x, {1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() != 4 || x.dim(1) != arch_.height || x.dim(2) != arch_.width || x.dim(3) != arch_.channels) {
    throw ShapeError("logits", images.shape(),
                     Shape{arch_.height, arch_.width, arch_.channels});
  }
  const std::size_t n = x.dim(0);

  std::vector<double> inv_std(arch_.channels);
  for (std::size_t c = 0; c < arch_.channels; ++c) inv_std[c] = 1.0 / norm_.stddev[c];
  x = ad::sub(tape, x, Tensor({arch_.channels}, norm_.mean));
  x = ad::mul(tape, x, Tensor({arch_.channels}, std::move(inv_std)));

  auto param = [&](std::size_t i) { return track_params ? params_[i] : params_[i].detach(); };
  std::size_t pi = 0;
  for (std::size_t i = 0; i < arch_.conv_widths.size(); ++i) {
    x = ad::conv2d(tape, x, param(pi), param(pi + 1));
    x = ad::relu(tape, x);
    x = ad::max_pool2x2(tape, x);
    pi += 2;
  }
  x = ad::reshape(tape, x, {n, x.numel() / n});
  const std::size_t dense_layers = arch_.dense_widths.size() + 1;
  for (std::size_t i = 0; i < dense_layers; ++i) {
    x = ad::add(tape, ad::matmul(tape, x, param(pi)), param(pi + 1));
    if (i + 1 < dense_layers) x = ad::relu(tape, x);
    pi += 2;
  }
  return x;
}

Tensor Classifier::logits(const Tensor& images) const {
  Tape tape(Tape::Mode::Inference);
  return logits(tape, images, false);
}

void Classifier::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Classifier Classifier::clone() const {
  Classifier copy;
  copy.arch_ = arch_;
  copy.norm_ = norm_;
  copy.names_ = names_;
  for (const auto& p : params_) {
    Tensor c = p.clone();
    c.set_requires_grad(p.requires_grad());
    copy.params_.push_back(std::move(c));
  }
  return copy;
}

void Classifier::round_to_storage_precision() {
  for (auto& p : params_) {
    for (auto& v : p.mutable_values()) v = static_cast<double>(static_cast<float>(v));
  }
  for (auto& v : norm_.mean) v = static_cast<double>(static_cast<float>(v));
  for (auto& v : norm_.stddev) v = static_cast<double>(static_cast<float>(v));
}

// ---------------------------------------------------------------------------

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  std::vector<double> v(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw std::out_of_range("one_hot: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
    v[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor({labels.size(), classes}, std::move(v));
}

namespace {
Tensor as_rows(Tape& tape, const Tensor& t) {
  return t.rank() == 1 ? ad::reshape(tape, t, {1, t.dim(0)}) : t;
}
}  // namespace

Tensor cross_entropy_rows(Tape& tape, const Tensor& logits, const Tensor& targets) {
  const Tensor l = as_rows(tape, logits);
  const Tensor y = as_rows(tape, targets);
  if (l.shape() != y.shape()) throw ShapeError("cross_entropy", logits.shape(), targets.shape());
  return ad::scale(tape, ad::sum_last(tape, ad::mul(tape, ad::log_softmax(tape, l), y)), -1.0);
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, const Tensor& targets) {
  return ad::mean(tape, cross_entropy_rows(tape, logits, targets));
}

Tensor kl_div_rows(Tape& tape, const Tensor& logits_a, const Tensor& logits_b) {
  const Tensor a = as_rows(tape, logits_a);
  const Tensor b = as_rows(tape, logits_b);
  if (a.shape() != b.shape()) throw ShapeError("kl_div", logits_a.shape(), logits_b.shape());
  const Tensor la = ad::log_softmax(tape, a);
  const Tensor lb = ad::log_softmax(tape, b);
  return ad::sum_last(tape, ad::mul(tape, ad::exp(tape, la), ad::sub(tape, la, lb)));
}

Tensor kl_div(Tape& tape, const Tensor& logits_a, const Tensor& logits_b) {
  return ad::mean(tape, kl_div_rows(tape, logits_a, logits_b));
}

Tensor l2_logit_dist_rows(Tape& tape, const Tensor& logits_a, const Tensor& logits_b) {
  const Tensor a = as_rows(tape, logits_a);
  const Tensor b = as_rows(tape, logits_b);
  if (a.shape() != b.shape()) throw ShapeError("l2_logit_dist", logits_a.shape(), logits_b.shape());
  const Tensor d = ad::sub(tape, a, b);
  return ad::sum_last(tape, ad::mul(tape, d, d));
}

Tensor l2_logit_dist(Tape& tape, const Tensor& logits_a, const Tensor& logits_b) {
  return ad::mean(tape, l2_logit_dist_rows(tape, logits_a, logits_b));
}

int argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return static_cast<int>(best);
}

std::vector<int> predict(const Tensor& logits) {
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = argmax(logits.values().subspan(r * k, k));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[4] = {'S', 'P', 'T', 'R'};

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f32(const char* what) { return static_cast<double>(std::bit_cast<float>(u32(what))); }
  void raw(char* out, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool exhausted() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                            std::to_string(pos_));
    }
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Classifier& model, const std::filesystem::path& path) {
  const auto& arch = model.architecture();
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(arch.height));
  w.u32(static_cast<std::uint32_t>(arch.width));
  w.u32(static_cast<std::uint32_t>(arch.channels));
  w.u32(static_cast<std::uint32_t>(arch.conv_widths.size()));
  for (auto c : arch.conv_widths) w.u32(static_cast<std::uint32_t>(c));
  w.u32(static_cast<std::uint32_t>(arch.dense_widths.size()));
  for (auto d : arch.dense_widths) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(arch.classes));
  for (double m : model.normalization().mean) w.f32(m);
  for (double s : model.normalization().stddev) w.f32(s);
  for (const auto& p : model.parameters()) {
    for (double v : p.values()) w.f32(v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
}

Classifier load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  ByteReader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic): " + path.string());
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Architecture arch;
  arch.height = r.u32("height");
  arch.width = r.u32("width");
  arch.channels = r.u32("channels");
  const auto n_conv = r.u32("conv layer count");
  if (n_conv > 64) throw CheckpointError("implausible conv layer count " + std::to_string(n_conv));
  arch.conv_widths.resize(n_conv);
  for (auto& c : arch.conv_widths) c = r.u32("conv width");
  const auto n_dense = r.u32("dense layer count");
  if (n_dense > 64) throw CheckpointError("implausible dense layer count " + std::to_string(n_dense));
  arch.dense_widths.resize(n_dense);
  for (auto& d : arch.dense_widths) d = r.u32("dense width");
  arch.classes = r.u32("class count");
  try {
    arch.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid architecture in checkpoint: ") + e.what());
  }

  Classifier model = Classifier::create(arch, 0);
  Normalization norm;
  norm.mean.resize(arch.channels);
  norm.stddev.resize(arch.channels);
  for (auto& m : norm.mean) m = r.f32("normalization mean");
  for (auto& s : norm.stddev) s = r.f32("normalization stddev");
  try {
    model.set_normalization(std::move(norm));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid normalization in checkpoint: ") + e.what());
  }

  std::size_t expected = model.parameter_count() * 4;
  if (r.remaining() < expected) {
    throw CheckpointError("checkpoint truncated: " + std::to_string(r.remaining()) + " parameter bytes, expected " +
                          std::to_string(expected));
  }
  for (auto& p : model.parameters()) {
    for (auto& v : p.mutable_values()) v = r.f32("parameters");
  }
  if (!r.exhausted()) {
    throw CheckpointError("checkpoint has " + std::to_string(r.remaining()) +
                          " trailing bytes; parameter shapes do not match the descriptor");
  }
  return model;
}

Classifier load_checkpoint(const std::filesystem::path& path, const Architecture& expected) {
  Classifier model = load_checkpoint(path);
  const auto& got = model.architecture();
  if (got.classes != expected.classes) {
    throw CheckpointError("checkpoint has " + std::to_string(got.classes) + " classes but " +
                          std::to_string(expected.classes) + " were expected");
  }
  if (!(got == expected)) {
    throw CheckpointError("checkpoint architecture (" + got.describe() + ") does not match expected (" +
                          expected.describe() + ")");
  }
  return model;
}

}  // namespace invreg
