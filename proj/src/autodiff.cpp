#include "invreg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "gemm.hpp"

namespace invreg {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

ShapeError::ShapeError(std::string_view op, const Shape& a, const Shape& b)
    : std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_to_string(a) +
                            " and " + shape_to_string(b)),
      op_(op) {}

ShapeError::ShapeError(std::string_view op, const Shape& a, std::string_view detail)
    : std::invalid_argument(std::string(op) + ": invalid shape " + shape_to_string(a) + " (" +
                            std::string(detail) + ")"),
      op_(op) {}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor", shape,
                     "holds " + std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->values = std::make_shared<std::vector<double>>(std::move(values));
  impl->requires_grad = requires_grad;
  impl_ = std::move(impl);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("dim", s, "axis " + std::to_string(axis) + " out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().values->size(); }

std::span<const double> Tensor::values() const& { return *impl().values; }
std::span<double> Tensor::mutable_values() & { return *impl().values; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item", shape(), "expected exactly one element");
  return (*impl().values)[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  impl().requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl().leaf; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const double> Tensor::grad() const& { return impl().grad; }

std::span<double> Tensor::grad_buffer() const {
  auto& im = impl();
  if (im.grad.empty()) im.grad.assign(im.values->size(), 0.0);
  return im.grad;
}

void Tensor::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = shape();
  impl->values = this->impl().values;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return Tensor(shape(), std::vector<double>(values().begin(), values().end())); }

bool Tensor::same_storage(const Tensor& other) const {
  return defined() && other.defined() && impl().values == other.impl().values;
}

// ---------------------------------------------------------------------------
// Tape

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor Tape::make_output(Shape shape, std::vector<double> values, bool recorded) const {
  Tensor out(std::move(shape), std::move(values), recorded);
  out.impl().leaf = !recorded;
  return out;
}

void Tape::record(std::string_view op, Tensor output, Adjoint adjoint) {
  entries_.push_back(Entry{std::string(op), std::move(output), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward", loss.defined() ? loss.shape() : Shape{}, "loss must be a scalar");
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not depend on any tensor requiring gradients");
  }
  for (auto& e : entries_) e.output.impl().grad.clear();

  Tensor root = loss;
  if (root.is_leaf()) {
    root.grad_buffer()[0] += 1.0;
    return;
  }
  const auto produced = std::any_of(entries_.begin(), entries_.end(),
                                    [&](const Entry& e) { return e.output.same_storage(loss); });
  if (!produced) throw std::invalid_argument("backward: loss was not produced through this tape");
  root.grad_buffer()[0] = 1.0;

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const auto& g = it->output.impl().grad;
    if (g.empty()) continue;
    it->adjoint(g);
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace ad {
namespace {

enum class Broadcast { Same, LastAxis };

Broadcast check_binary(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return Broadcast::LastAxis;
  throw ShapeError(op, a.shape(), b.shape());
}

void accumulate(const Tensor& t, std::span<const double> g, double factor = 1.0) {
  auto buf = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += factor * g[i];
}

// Bias-style gradient: fold rows of g onto the last axis.
void accumulate_folded(const Tensor& t, std::span<const double> g) {
  auto buf = t.grad_buffer();
  const std::size_t k = buf.size();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i % k] += g[i];
}

template <class Fn>
Tensor binary(Tape& tape, std::string_view op, const Tensor& a, const Tensor& b, Fn fn) {
  const auto mode = check_binary(op, a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  if (mode == Broadcast::Same) {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fn(av[i], bv[i]);
  } else {
    const std::size_t k = bv.size();
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fn(av[i], bv[i % k]);
  }
  return tape.make_output(a.shape(), std::move(out), tape.should_record({&a, &b}));
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  Tensor out = binary(tape, "add", a, b, [](double x, double y) { return x + y; });
  if (out.requires_grad()) {
    tape.record("add", out, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) accumulate(a, g);
      if (b.requires_grad()) {
        if (a.shape() == b.shape()) accumulate(b, g);
        else accumulate_folded(b, g);
      }
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  Tensor out = binary(tape, "sub", a, b, [](double x, double y) { return x - y; });
  if (out.requires_grad()) {
    tape.record("sub", out, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) accumulate(a, g);
      if (b.requires_grad()) {
        if (a.shape() == b.shape()) {
          accumulate(b, g, -1.0);
        } else {
          std::vector<double> neg(g.begin(), g.end());
          for (auto& v : neg) v = -v;
          accumulate_folded(b, neg);
        }
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  Tensor out = binary(tape, "mul", a, b, [](double x, double y) { return x * y; });
  if (out.requires_grad()) {
    tape.record("mul", out, [a, b](std::span<const double> g) mutable {
      const auto av = a.values();
      const auto bv = b.values();
      const std::size_t k = bv.size();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % k];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % k] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = factor * av[i];
  Tensor result = tape.make_output(a.shape(), std::move(out), tape.should_record({&a}));
  if (result.requires_grad()) {
    tape.record("scale", result, [a, factor](std::span<const double> g) mutable {
      accumulate(a, g, factor);
    });
  }
  return result;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m);
  detail::gemm(n, k, m, a.values().data(), k, b.values().data(), m, out.data(), m);
  Tensor result = tape.make_output({n, m}, std::move(out), tape.should_record({&a, &b}));
  if (result.requires_grad()) {
    tape.record("matmul", result, [a, b, n, k, m](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        const auto bt = detail::transpose(b.values().data(), k, m);
        detail::gemm(n, m, k, g.data(), m, bt.data(), k, a.grad_buffer().data(), k, nullptr, true);
      }
      if (b.requires_grad()) {
        detail::gemm_at_accumulate(k, n, m, a.values().data(), k, g.data(), m, b.grad_buffer().data(), m);
      }
    });
  }
  return result;
}

namespace {

struct ConvGeometry {
  std::size_t H, W, CI, KH, KW, CO;
  long ph, pw;
  std::size_t patch() const { return KH * KW * CI; }
  std::size_t pixels() const { return H * W; }

  // Output columns [x_lo, x_hi) whose tap kx lands inside the image.
  std::pair<std::size_t, std::size_t> valid_x(std::size_t kx) const {
    const long off = static_cast<long>(kx) - pw, w = static_cast<long>(W);
    return {static_cast<std::size_t>(std::clamp(-off, 0L, w)), static_cast<std::size_t>(std::clamp(w - off, 0L, w))};
  }

  /// Transposed patch matrix of one image: [KH*KW*CI, H*W], zeros outside the image.
  void im2col_t(const double* img, double* cols) const {
    const std::size_t px = pixels();
    for (std::size_t ky = 0; ky < KH; ++ky) {
      for (std::size_t kx = 0; kx < KW; ++kx) {
        const auto [lo, hi] = valid_x(kx);
        const long off = static_cast<long>(kx) - pw;
        for (std::size_t c = 0; c < CI; ++c) {
          double* plane = cols + ((ky * KW + kx) * CI + c) * px;
          for (std::size_t y = 0; y < H; ++y) {
            double* dst = plane + y * W;
            const long iy = static_cast<long>(y + ky) - ph;
            if (iy < 0 || iy >= static_cast<long>(H)) {
              for (std::size_t x = 0; x < W; ++x) dst[x] = 0.0;
              continue;
            }
            const double* src = img + static_cast<std::size_t>(iy) * W * CI + c;
            for (std::size_t x = 0; x < lo; ++x) dst[x] = 0.0;
            for (std::size_t x = lo; x < hi; ++x) dst[x] = src[static_cast<std::size_t>(static_cast<long>(x) + off) * CI];
            for (std::size_t x = hi; x < W; ++x) dst[x] = 0.0;
          }
        }
      }
    }
  }

  /// Scatter-adds a transposed patch-matrix gradient back onto one image.
  void col2im_t(const double* cols, double* img) const {
    const std::size_t px = pixels();
    for (std::size_t ky = 0; ky < KH; ++ky) {
      for (std::size_t kx = 0; kx < KW; ++kx) {
        const auto [lo, hi] = valid_x(kx);
        const long off = static_cast<long>(kx) - pw;
        for (std::size_t c = 0; c < CI; ++c) {
          const double* plane = cols + ((ky * KW + kx) * CI + c) * px;
          for (std::size_t y = 0; y < H; ++y) {
            const long iy = static_cast<long>(y + ky) - ph;
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            const double* src = plane + y * W;
            double* dst = img + static_cast<std::size_t>(iy) * W * CI + c;
            for (std::size_t x = lo; x < hi; ++x) dst[static_cast<std::size_t>(static_cast<long>(x) + off) * CI] += src[x];
          }
        }
      }
    }
  }
};

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 4) throw ShapeError("conv2d", input.shape(), "input must be NHWC");
  if (weight.rank() != 4 || weight.dim(2) != input.dim(3) || weight.dim(0) % 2 == 0 ||
      weight.dim(1) % 2 == 0) {
    throw ShapeError("conv2d", input.shape(), weight.shape());
  }
  const std::size_t N = input.dim(0);
  const ConvGeometry G{input.dim(1),  input.dim(2),  input.dim(3),
                       weight.dim(0), weight.dim(1), weight.dim(3),
                       static_cast<long>(weight.dim(0) / 2), static_cast<long>(weight.dim(1) / 2)};
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != G.CO)) throw ShapeError("conv2d", weight.shape(), bias.shape());

  const std::size_t px = G.pixels(), in_px = px * G.CI, out_px = px * G.CO, pk = G.patch();
  const double* in = input.values().data();
  const double* w = weight.values().data();
  const double* b = bias.defined() ? bias.values().data() : nullptr;
  std::vector<double> out(N * out_px);
  std::vector<double> cols(pk * px);
  for (std::size_t n = 0; n < N; ++n) {
    G.im2col_t(in + n * in_px, cols.data());
    detail::gemm_strided(px, pk, G.CO, {cols.data(), 1, px}, w, G.CO, out.data() + n * out_px, G.CO, b, false);
  }

  Tensor result = tape.make_output({N, G.H, G.W, G.CO}, std::move(out), tape.should_record({&input, &weight, &bias}));
  if (result.requires_grad()) {
    tape.record("conv2d", result, [input, weight, bias, N, G](std::span<const double> g) mutable {
      const std::size_t px = G.pixels(), in_px = px * G.CI, out_px = px * G.CO, pk = G.patch();
      const double* in = input.values().data();
      const bool need_in = input.requires_grad();
      const bool need_w = weight.requires_grad();
      if (bias.defined() && bias.requires_grad()) accumulate_folded(bias, g);
      std::vector<double> cols(pk * px);
      double* gin = need_in ? input.grad_buffer().data() : nullptr;
      double* gw = need_w ? weight.grad_buffer().data() : nullptr;
      const double* wv = weight.values().data();
      for (std::size_t n = 0; n < N; ++n) {
        const double* gn = g.data() + n * out_px;
        if (need_w) {
          G.im2col_t(in + n * in_px, cols.data());
          detail::gemm(pk, px, G.CO, cols.data(), px, gn, G.CO, gw, G.CO, nullptr, true);
        }
        if (need_in) {
          const auto gt = detail::transpose(gn, px, G.CO);
          detail::gemm(pk, G.CO, px, wv, G.CO, gt.data(), px, cols.data(), px);
          G.col2im_t(cols.data(), gin + n * in_px);
        }
      }
    });
  }
  return result;
}

Tensor relu(Tape& tape, const Tensor& a) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  Tensor result = tape.make_output(a.shape(), std::move(out), tape.should_record({&a}));
  if (result.requires_grad()) {
    tape.record("relu", result, [a](std::span<const double> g) mutable {
      const auto av = a.values();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av[i] > 0.0) ga[i] += g[i];
      }
    });
  }
  return result;
}

Tensor exp(Tape& tape, const Tensor& a) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  Tensor result = tape.make_output(a.shape(), std::move(out), tape.should_record({&a}));
  if (result.requires_grad()) {
    Tensor saved = result.detach();
    tape.record("exp", result, [a, saved](std::span<const double> g) mutable {
      const auto ev = saved.values();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ev[i];
    });
  }
  return result;
}

Tensor max_pool2x2(Tape& tape, const Tensor& input) {
  if (input.rank() != 4) throw ShapeError("max_pool2x2", input.shape(), "input must be NHWC");
  const std::size_t N = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
  const std::size_t OH = H / 2, OW = W / 2;
  if (OH == 0 || OW == 0) throw ShapeError("max_pool2x2", input.shape(), "spatial extent below 2");
  const double* in = input.values().data();
  std::vector<double> out(N * OH * OW * C);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        for (std::size_t c = 0; c < C; ++c) {
          std::size_t best = ((n * H + 2 * oy) * W + 2 * ox) * C + c;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((n * H + 2 * oy + dy) * W + 2 * ox + dx) * C + c;
              if (in[idx] > in[best]) best = idx;
            }
          }
          const std::size_t o = ((n * OH + oy) * OW + ox) * C + c;
          out[o] = in[best];
          argmax[o] = best;
        }
      }
    }
  }
  Tensor result = tape.make_output({N, OH, OW, C}, std::move(out), tape.should_record({&input}));
  if (result.requires_grad()) {
    tape.record("max_pool2x2", result, [input, argmax = std::move(argmax)](std::span<const double> g) mutable {
      auto gi = input.grad_buffer();
      for (std::size_t o = 0; o < g.size(); ++o) gi[argmax[o]] += g[o];
    });
  }
  return result;
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  Tensor result = tape.make_output(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()),
                                   tape.should_record({&a}));
  if (result.requires_grad()) {
    tape.record("reshape", result, [a](std::span<const double> g) mutable { accumulate(a, g); });
  }
  return result;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor result = tape.make_output({}, {s}, tape.should_record({&a}));
  if (result.requires_grad()) {
    tape.record("sum", result, [a](std::span<const double> g) mutable {
      for (auto& v : a.grad_buffer()) v += g[0];
    });
  }
  return result;
}

Tensor sum_last(Tape& tape, const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("sum_last", a.shape(), "needs at least one axis");
  const std::size_t k = a.shape().back();
  const std::size_t rows = k == 0 ? 0 : a.numel() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  const auto av = a.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += av[r * k + j];
    out[r] = s;
  }
  Tensor result = tape.make_output(std::move(out_shape), std::move(out), tape.should_record({&a}));
  if (result.requires_grad()) {
    tape.record("sum_last", result, [a, k](std::span<const double> g) mutable {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i / k];
    });
  }
  return result;
}

Tensor mean(Tape& tape, const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean", a.shape(), "empty tensor");
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor result = tape.make_output({}, {s / n}, tape.should_record({&a}));
  if (result.requires_grad()) {
    tape.record("mean", result, [a, n](std::span<const double> g) mutable {
      for (auto& v : a.grad_buffer()) v += g[0] / n;
    });
  }
  return result;
}

Tensor log_softmax(Tape& tape, const Tensor& logits) {
  if (logits.rank() == 0 || logits.shape().back() == 0) throw ShapeError("log_softmax", logits.shape(), "needs a nonempty last axis");
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  const auto lv = logits.values();
  std::vector<double> out(lv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = lv.data() + r * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const double ls = std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = (row[j] - m) - ls;
  }
  Tensor result = tape.make_output(logits.shape(), std::move(out), tape.should_record({&logits}));
  if (result.requires_grad()) {
    Tensor saved = result.detach();
    tape.record("log_softmax", result, [logits, saved, k, rows](std::span<const double> g) mutable {
      const auto ls = saved.values();
      auto gl = logits.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < k; ++j) gs += g[r * k + j];
        for (std::size_t j = 0; j < k; ++j) gl[r * k + j] += g[r * k + j] - std::exp(ls[r * k + j]) * gs;
      }
    });
  }
  return result;
}

}  // namespace ad

// ---------------------------------------------------------------------------

FiniteDifferenceResult finite_difference_check(const TapeFunction& f, const Tensor& x, double step,
                                               double kink_tolerance) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  FiniteDifferenceResult result;

  Tensor xg = x.clone();
  xg.set_requires_grad(true);
  {
    Tape tape;
    Tensor loss = f(tape, xg);
    tape.backward(loss);
  }
  result.analytic.assign(xg.grad().begin(), xg.grad().end());

  auto eval = [&](const Tensor& point) {
    Tape tape(Tape::Mode::Inference);
    const double v = f(tape, point).item();
    if (!std::isfinite(v)) throw std::domain_error("finite_difference_check: non-finite function value");
    return v;
  };

  Tensor probe = x.clone();
  const double f0 = eval(probe);
  auto pv = probe.mutable_values();
  result.numeric.resize(pv.size());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double orig = pv[i];
    pv[i] = orig + step;
    const double fp = eval(probe);
    pv[i] = orig - step;
    const double fm = eval(probe);
    pv[i] = orig;

    const double central = (fp - fm) / (2.0 * step);
    result.numeric[i] = central;
    const double forward = (fp - f0) / step;
    const double backward = (f0 - fm) / step;
    if (std::abs(forward - backward) > kink_tolerance * (std::abs(forward) + std::abs(backward)) + 1e-7) {
      result.unreliable.push_back(i);
      continue;
    }
    const double err = std::abs(result.analytic[i] - central) / (std::abs(central) + 1e-12);
    result.max_relative_error = std::max(result.max_relative_error, err);
    ++result.checked;
  }
  return result;
}

}  // namespace invreg
