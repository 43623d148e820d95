#include "invreg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <numbers>
#include <sstream>

#include "invreg/rng.hpp"
#include "invreg/spatial_transform.hpp"

namespace invreg {

std::span<const double> Dataset::image_values(std::size_t i) const {
  return std::span<const double>(pixels).subspan(i * image_size(), image_size());
}

Tensor Dataset::image(std::size_t i) const {
  const auto v = image_values(i);
  return Tensor({height, width, channels}, std::vector<double>(v.begin(), v.end()));
}

Tensor Dataset::images(std::span<const std::size_t> indices) const {
  std::vector<double> v;
  v.reserve(indices.size() * image_size());
  for (auto i : indices) {
    const auto img = image_values(i);
    v.insert(v.end(), img.begin(), img.end());
  }
  return Tensor({indices.size(), height, width, channels}, std::move(v));
}

Tensor Dataset::all_images() const { return Tensor({size(), height, width, channels}, pixels); }

std::vector<int> Dataset::labels_at(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d = *this;
  d.pixels.clear();
  d.labels.clear();
  for (auto i : indices) {
    const auto img = image_values(i);
    d.pixels.insert(d.pixels.end(), img.begin(), img.end());
    d.labels.push_back(labels.at(i));
  }
  return d;
}

void Dataset::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw std::invalid_argument("dataset: empty image shape");
  if (pixels.size() != labels.size() * image_size()) throw std::invalid_argument("dataset: pixel count does not match labels");
  for (double v : pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("dataset: pixel outside [0,1]");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw std::invalid_argument("dataset: label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
  if (b.size() < off + 4) throw IdxError("truncated IDX header in " + path.string());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setfill('0');
  os.width(8);
  os << v;
  return os.str();
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t classes, Split split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const auto img_magic = be32(img, 0, images_path);
  if (img_magic != kIdxImageMagic) {
    throw IdxError("bad image magic " + hex(img_magic) + " in " + images_path.string() + " (expected 0x00000803)");
  }
  const auto lab_magic = be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelMagic) {
    throw IdxError("bad label magic " + hex(lab_magic) + " in " + labels_path.string() + " (expected 0x00000801)");
  }
  const std::size_t n = be32(img, 4, images_path);
  const std::size_t h = be32(img, 8, images_path);
  const std::size_t w = be32(img, 12, images_path);
  const std::size_t n_labels = be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw IdxError("image/label count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) +
                   " labels");
  }
  if (img.size() != 16 + n * h * w) {
    throw IdxError((img.size() < 16 + n * h * w ? "truncated" : "oversized") + std::string(" image file ") +
                   images_path.string() + ": " + std::to_string(img.size() - 16) + " pixel bytes, expected " +
                   std::to_string(n * h * w));
  }
  if (lab.size() != 8 + n) {
    throw IdxError((lab.size() < 8 + n ? "truncated" : "oversized") + std::string(" label file ") +
                   labels_path.string() + ": " + std::to_string(lab.size() - 8) + " labels, expected " +
                   std::to_string(n));
  }

  Dataset d;
  d.height = h;
  d.width = w;
  d.channels = 1;
  d.split = split;
  d.pixels.resize(n * h * w);
  for (std::size_t i = 0; i < d.pixels.size(); ++i) d.pixels[i] = static_cast<double>(img[16 + i]) / 255.0;
  d.labels.resize(n);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = classes ? classes : static_cast<std::size_t>(max_label + 1);
  for (int l : d.labels) {
    if (static_cast<std::size_t>(l) >= d.classes) {
      throw IdxError("label " + std::to_string(l) + " outside [0, " + std::to_string(d.classes) + ")");
    }
  }
  return d;
}

void write_idx(const Dataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  if (data.channels != 1) throw IdxError("IDX export supports single-channel datasets only");
  std::ofstream img(images_path, std::ios::binary | std::ios::trunc);
  if (!img) throw IdxError("cannot write " + images_path.string());
  put_be32(img, kIdxImageMagic);
  put_be32(img, static_cast<std::uint32_t>(data.size()));
  put_be32(img, static_cast<std::uint32_t>(data.height));
  put_be32(img, static_cast<std::uint32_t>(data.width));
  std::vector<char> bytes(data.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(data.pixels[i], 0.0, 1.0) * 255.0)));
  }
  img.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));

  std::ofstream lab(labels_path, std::ios::binary | std::ios::trunc);
  if (!lab) throw IdxError("cannot write " + labels_path.string());
  put_be32(lab, kIdxLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) {
    if (l < 0 || l > 255) throw IdxError("label " + std::to_string(l) + " does not fit in a byte");
    lab.put(static_cast<char>(l));
  }
  if (!img || !lab) throw IdxError("failed writing IDX files");
}

// ---------------------------------------------------------------------------
// Glyphs

std::vector<GlyphShape> GlyphSpec::default_shapes() {
  return {
      {0.30, 0.30, 28.0, 0.0},
      {0.38, 0.24, 28.0, 0.0},
      {0.24, 0.38, 28.0, 0.0},
      {0.36, 0.36, 28.0, 0.55},
  };
}

namespace {

constexpr int kSuper = 4;

bool inside(const GlyphShape& g, double u, double v) {
  // (u, v): offsets from the center in units of the image size, v pointing up.
  const double e = (u * u) / (g.semi_x * g.semi_x) + (v * v) / (g.semi_y * g.semi_y);
  if (e > 1.0) return false;
  if (v > 0.0) {
    const double angle_from_up = std::atan2(std::abs(u), v) * 180.0 / std::numbers::pi;
    if (angle_from_up < g.notch_half_deg && std::sqrt(e) >= g.notch_inner) return false;
  }
  return true;
}

double distance(std::span<const double> a, std::span<const double> b, double cutoff) {
  double s = 0.0;
  const double cut2 = cutoff * cutoff;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
    if (s > cut2) return std::sqrt(s);
  }
  return std::sqrt(s);
}

std::vector<double> angle_grid(double half_range_deg, double step_deg) {
  std::vector<double> out;
  const int n = static_cast<int>(std::ceil(half_range_deg / step_deg));
  for (int i = -n; i <= n; ++i) out.push_back(std::clamp(i * step_deg, -half_range_deg, half_range_deg));
  return out;
}

// Renders image-coordinate pixels [x0, x0+wn) x [y0, y0+hn) of an n x n glyph
// image, so integer shifts of one render are crops of a larger window.
std::vector<double> render_window(const GlyphShape& g, std::size_t n, double angle_deg, long x0, long y0,
                                  std::size_t wn, std::size_t hn) {
  const double size = static_cast<double>(n);
  const double c = (size - 1.0) / 2.0;
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  std::vector<double> img(wn * hn, 0.0);
  for (std::size_t y = 0; y < hn; ++y) {
    for (std::size_t x = 0; x < wn; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = static_cast<double>(x0 + static_cast<long>(x)) + (sx + 0.5) / kSuper - 0.5 - c;
          const double py = static_cast<double>(y0 + static_cast<long>(y)) + (sy + 0.5) / kSuper - 0.5 - c;
          // Undo a counter-clockwise (on screen) rotation; screen y points down.
          const double u = ca * px - sa * py;
          const double v = -(sa * px + ca * py);
          if (inside(g, u / size, v / size)) ++hits;
        }
      }
      img[y * wn + x] = static_cast<double>(hits) / (kSuper * kSuper);
    }
  }
  return img;
}

/// A glyph rendered with a margin; crop(dx, dy) equals render_glyph(..., dx, dy).
struct Canvas {
  std::size_t n;
  int margin;
  std::vector<double> pixels;

  Canvas(const GlyphShape& g, std::size_t size, double angle_deg, int m)
      : n(size), margin(m),
        pixels(render_window(g, size, angle_deg, -m, -m, size + 2 * static_cast<std::size_t>(m),
                             size + 2 * static_cast<std::size_t>(m))) {}

  void crop(int dx, int dy, std::vector<double>& out) const {
    const std::size_t wide = n + 2 * static_cast<std::size_t>(margin);
    out.resize(n * n);
    for (std::size_t y = 0; y < n; ++y) {
      const std::size_t row = static_cast<std::size_t>(static_cast<long>(y) - dy + margin);
      const std::size_t col = static_cast<std::size_t>(margin - dx);
      std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(row * wide + col), n,
                  out.begin() + static_cast<std::ptrdiff_t>(y * n));
    }
  }
};

}  // namespace

std::vector<double> render_glyph(const GlyphSpec& spec, std::size_t cls, double angle_deg, int shift_x, int shift_y) {
  return render_window(spec.shapes.at(cls), spec.size, angle_deg, -shift_x, -shift_y, spec.size, spec.size);
}

SeparationReport min_class_separation(const GlyphSpec& spec) {
  const double reach = spec.inherent_rot_deg + spec.search_rot_deg;
  const int shift = static_cast<int>(std::ceil(2.0 * spec.search_trans_px));
  SeparationReport best{std::numeric_limits<double>::infinity(), 0, 0, 0.0};
  const auto angles = angle_grid(2.0 * reach, 2.5);
  std::vector<std::vector<double>> refs;
  for (std::size_t a = 0; a < spec.classes(); ++a) refs.push_back(render_glyph(spec, a, 0.0));
  std::vector<double> other;
  for (std::size_t b = 1; b < spec.classes(); ++b) {
    for (double ang : angles) {
      const Canvas canvas(spec.shapes[b], spec.size, ang, shift);
      for (int dy = -shift; dy <= shift; ++dy) {
        for (int dx = -shift; dx <= shift; ++dx) {
          canvas.crop(dx, dy, other);
          for (std::size_t a = 0; a < b; ++a) {
            const double d = distance(refs[a], other, best.min_distance);
            if (d < best.min_distance) best = {d, a, b, ang};
          }
        }
      }
    }
  }
  return best;
}

Dataset gen_glyphs(const GlyphSpec& spec, std::size_t n_per_class, std::uint64_t seed, Split split) {
  if (spec.classes() < 2) throw std::invalid_argument("gen_glyphs: need at least two glyph classes");
  if (spec.size < 4) throw std::invalid_argument("gen_glyphs: image size below 4");
  const auto sep = min_class_separation(spec);
  if (!(sep.min_distance > spec.min_separation)) {
    std::ostringstream os;
    os << "glyph classes " << sep.class_a << " and " << sep.class_b << " collide at relative rotation "
       << sep.angle_deg << " deg (distance " << sep.min_distance << " <= " << spec.min_separation << ")";
    throw GlyphSeparationError(os.str());
  }

  Dataset d;
  d.height = d.width = spec.size;
  d.channels = 1;
  d.classes = spec.classes();
  d.split = split;
  const std::size_t total = n_per_class * spec.classes();
  d.pixels.reserve(total * spec.size * spec.size);
  d.labels.reserve(total);
  const SeedStream stream = SeedStream(seed).named(split == Split::Train ? "data/train" : "data/test");
  for (std::size_t i = 0; i < total; ++i) {
    Rng rng(stream.child(i));
    const std::size_t cls = i % spec.classes();
    const double angle = rng.uniform(-spec.inherent_rot_deg, spec.inherent_rot_deg);
    auto img = render_glyph(spec, cls, angle);
    for (auto& v : img) {
      v = std::clamp(v + rng.uniform(-spec.noise, spec.noise), 0.0, 1.0);
      v = std::round(v * 255.0) / 255.0;
    }
    d.pixels.insert(d.pixels.end(), img.begin(), img.end());
    d.labels.push_back(static_cast<int>(cls));
  }
  return d;
}

void check_label_invariance(const GlyphSpec& spec, const Dataset& data, std::size_t samples) {
  const double reach = spec.inherent_rot_deg + spec.search_rot_deg;
  const int shift = static_cast<int>(std::ceil(spec.search_trans_px));
  const auto angles = angle_grid(reach, 2.5);

  struct Template {
    std::vector<double> pixels;
    int label;
  };
  std::vector<Template> templates;
  for (std::size_t cls = 0; cls < spec.classes(); ++cls) {
    for (double ang : angles) {
      const Canvas canvas(spec.shapes[cls], spec.size, ang, shift);
      for (int dy = -shift; dy <= shift; ++dy) {
        for (int dx = -shift; dx <= shift; ++dx) {
          Template t{{}, static_cast<int>(cls)};
          canvas.crop(dx, dy, t.pixels);
          templates.push_back(std::move(t));
        }
      }
    }
  }

  const auto set = build_search_set(spec.search_rot_deg, spec.search_trans_px, data.width, data.height);
  const auto h = set.half_range();
  std::vector<TransformParams> probes{TransformParams::identity()};
  for (int corner = 0; corner < 8; ++corner) {
    probes.push_back({(corner & 1 ? 1 : -1) * h.tx, (corner & 2 ? 1 : -1) * h.ty, (corner & 4 ? 1 : -1) * h.theta});
  }

  const std::size_t stride = std::max<std::size_t>(1, data.size() / std::max<std::size_t>(1, samples));
  for (std::size_t s = 0, i = 0; s < samples && i < data.size(); ++s, i += stride) {
    for (const auto& delta : probes) {
      Tape tape(Tape::Mode::Inference);
      const Tensor params({3}, {delta.tx, delta.ty, delta.theta});
      const Tensor warped = warp(tape, data.image(i), params, PaddingMode::constant(0.0));
      double best = std::numeric_limits<double>::infinity();
      int label = -1;
      for (const auto& t : templates) {
        const double dist = distance(warped.values(), t.pixels, best);
        if (dist < best) {
          best = dist;
          label = t.label;
        }
      }
      if (label != data.labels[i]) {
        std::ostringstream os;
        os << "sample " << i << " (class " << data.labels[i] << ") is nearest to class " << label
           << " under transform (" << delta.tx << ", " << delta.ty << ", " << delta.theta << ")";
        throw GlyphSeparationError(os.str());
      }
    }
  }
}

// ---------------------------------------------------------------------------

Normalization compute_normalization(const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("compute_normalization: empty dataset");
  const std::size_t c = data.channels;
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  for (std::size_t i = 0; i < data.pixels.size(); ++i) sum[i % c] += data.pixels[i];
  const double count = static_cast<double>(data.pixels.size() / c);
  Normalization norm;
  norm.mean.resize(c);
  norm.stddev.resize(c);
  for (std::size_t ch = 0; ch < c; ++ch) norm.mean[ch] = sum[ch] / count;
  for (std::size_t i = 0; i < data.pixels.size(); ++i) {
    const double d = data.pixels[i] - norm.mean[i % c];
    sq[i % c] += d * d;
  }
  for (std::size_t ch = 0; ch < c; ++ch) norm.stddev[ch] = std::max(std::sqrt(sq[ch] / count), 1e-6);
  return norm;
}

Dataset normalize(const Dataset& data, const Normalization& norm) {
  Dataset out = data;
  const std::size_t c = data.channels;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = (out.pixels[i] - norm.mean[i % c]) / norm.stddev[i % c];
  }
  return out;
}

Dataset denormalize(const Dataset& data, const Normalization& norm) {
  Dataset out = data;
  const std::size_t c = data.channels;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = out.pixels[i] * norm.stddev[i % c] + norm.mean[i % c];
  }
  return out;
}

}  // namespace invreg
