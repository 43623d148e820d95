#include "invreg/spatial_transform.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace invreg {

bool TransformParams::is_finite() const {
  return std::isfinite(tx) && std::isfinite(ty) && std::isfinite(theta);
}

SearchSet::SearchSet(TransformParams half_range) : half_(half_range) {
  if (!half_.is_finite() || half_.tx < 0.0 || half_.ty < 0.0 || half_.theta < 0.0) {
    throw std::invalid_argument("SearchSet: half range must be finite and nonnegative");
  }
}

bool SearchSet::contains(const TransformParams& d) const {
  return std::abs(d.tx) <= half_.tx && std::abs(d.ty) <= half_.ty && std::abs(d.theta) <= half_.theta;
}

TransformParams SearchSet::project(const TransformParams& d) const {
  return {std::clamp(d.tx, -half_.tx, half_.tx), std::clamp(d.ty, -half_.ty, half_.ty),
          std::clamp(d.theta, -half_.theta, half_.theta)};
}

TransformParams SearchSet::sample(Rng& rng) const {
  const double tx = rng.uniform(-half_.tx, half_.tx);
  const double ty = rng.uniform(-half_.ty, half_.ty);
  const double th = rng.uniform(-half_.theta, half_.theta);
  return project({tx, ty, th});
}

SearchSet build_search_set(double max_rot_deg, double max_trans_px, std::size_t width, std::size_t height) {
  if (max_rot_deg < 0.0 || max_trans_px < 0.0) throw std::invalid_argument("build_search_set: negative range");
  if (width == 0 || height == 0) throw std::invalid_argument("build_search_set: empty image");
  return SearchSet({max_trans_px / static_cast<double>(width), max_trans_px / static_cast<double>(height),
                    max_rot_deg * std::numbers::pi / 180.0});
}

PaddingMode PaddingMode::constant(double fill) {
  if (!std::isfinite(fill)) throw std::invalid_argument("PaddingMode: fill must be finite");
  return {Kind::Constant, fill};
}

Matrix3 coord_matrix(const TransformParams& d, std::size_t width, std::size_t height) {
  const double c = std::cos(d.theta), s = std::sin(d.theta);
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double txp = d.tx * static_cast<double>(width);
  const double typ = d.ty * static_cast<double>(height);
  // p -> R (p - center) + center + t, with R = [[c, s], [-s, c]] in (x, y-down) coordinates.
  return {{{c, s, cx - c * cx - s * cy + txp}, {-s, c, cy + s * cx - c * cy + typ}, {0.0, 0.0, 1.0}}};
}

namespace {

constexpr double kSnap = 1e-9;

double snap(double v) {
  const double r = std::nearbyint(v);
  return std::abs(v - r) < kSnap ? r : v;
}

// Resolves a source index under the padding rule; -1 means "use the fill value".
long resolve(long i, long n, PaddingMode::Kind kind) {
  if (i >= 0 && i < n) return i;
  if (kind == PaddingMode::Kind::Constant) return -1;
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  long m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

struct Taps {
  long idx[4];  // resolved flat pixel offsets (without channel), -1 for fill
  double wt[4];
  double fx, fy;
  double dx, dy;  // output coordinate relative to the translated center
  double sin_t, cos_t;
};

// Everything needed to recompute the sampling pattern; copyable into adjoints.
struct WarpKernel {
  std::size_t n, h, w, c;
  bool shared_params;
  PaddingMode pad;

  Taps taps(const double* params, std::size_t img, std::size_t y, std::size_t x) const {
    const double* p = params + (shared_params ? 0 : 3 * img);
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    Taps t{};
    t.cos_t = std::cos(p[2]);
    t.sin_t = std::sin(p[2]);
    t.dx = static_cast<double>(x) - p[0] * static_cast<double>(w) - cx;
    t.dy = static_cast<double>(y) - p[1] * static_cast<double>(h) - cy;
    const double sx = snap(t.cos_t * t.dx - t.sin_t * t.dy + cx);
    const double sy = snap(t.sin_t * t.dx + t.cos_t * t.dy + cy);
    const double x0f = std::floor(sx), y0f = std::floor(sy);
    t.fx = sx - x0f;
    t.fy = sy - y0f;
    const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
    const long lw = static_cast<long>(w), lh = static_cast<long>(h);
    const long xs[2] = {resolve(x0, lw, pad.kind), resolve(x0 + 1, lw, pad.kind)};
    const long ys[2] = {resolve(y0, lh, pad.kind), resolve(y0 + 1, lh, pad.kind)};
    // Tap order: (x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1).
    for (int k = 0; k < 4; ++k) {
      const long xi = xs[k & 1], yi = ys[k >> 1];
      t.idx[k] = (xi < 0 || yi < 0) ? -1 : static_cast<long>(img * h * w) + yi * lw + xi;
    }
    t.wt[0] = (1.0 - t.fx) * (1.0 - t.fy);
    t.wt[1] = t.fx * (1.0 - t.fy);
    t.wt[2] = (1.0 - t.fx) * t.fy;
    t.wt[3] = t.fx * t.fy;
    return t;
  }

  double value(const double* image, const Taps& t, int k, std::size_t ch) const {
    return t.idx[k] < 0 ? pad.fill : image[static_cast<std::size_t>(t.idx[k]) * c + ch];
  }
};

}  // namespace

Tensor warp(Tape& tape, const Tensor& images, const Tensor& params, PaddingMode pad) {
  WarpKernel K{};
  K.pad = pad;
  if (images.rank() == 3) {
    K.n = 1, K.h = images.dim(0), K.w = images.dim(1), K.c = images.dim(2);
  } else if (images.rank() == 4) {
    K.n = images.dim(0), K.h = images.dim(1), K.w = images.dim(2), K.c = images.dim(3);
  } else {
    throw ShapeError("warp", images.shape(), "expected [H,W,C] or [N,H,W,C]");
  }
  if (K.h == 0 || K.w == 0) throw ShapeError("warp", images.shape(), "degenerate image");
  K.shared_params = params.rank() == 1 && params.dim(0) == 3;
  if (!K.shared_params && !(params.rank() == 2 && params.dim(1) == 3 && params.dim(0) == K.n)) {
    throw ShapeError("warp", images.shape(), params.shape());
  }

  const double* pv = params.values().data();
  const double* iv = images.values().data();
  std::vector<double> out(images.numel());
  for (std::size_t n = 0; n < K.n; ++n) {
    for (std::size_t y = 0; y < K.h; ++y) {
      for (std::size_t x = 0; x < K.w; ++x) {
        const Taps t = K.taps(pv, n, y, x);
        double* o = out.data() + ((n * K.h + y) * K.w + x) * K.c;
        for (std::size_t ch = 0; ch < K.c; ++ch) {
          double v = 0.0;
          for (int k = 0; k < 4; ++k) {
            if (t.wt[k] != 0.0) v += t.wt[k] * K.value(iv, t, k, ch);
          }
          o[ch] = v;
        }
      }
    }
  }

  Tensor result = tape.make_output(images.shape(), std::move(out), tape.should_record({&images, &params}));
  if (!result.requires_grad()) return result;

  tape.record("warp", result, [images, params, K](std::span<const double> grad) mutable {
    const bool need_img = images.requires_grad();
    const bool need_par = params.requires_grad();
    const double* pv = params.values().data();
    const double* iv = images.values().data();
    double* gi = need_img ? images.grad_buffer().data() : nullptr;
    double* gp = need_par ? params.grad_buffer().data() : nullptr;
    const double W = static_cast<double>(K.w), H = static_cast<double>(K.h);
    for (std::size_t n = 0; n < K.n; ++n) {
      double acc_tx = 0.0, acc_ty = 0.0, acc_th = 0.0;
      for (std::size_t y = 0; y < K.h; ++y) {
        for (std::size_t x = 0; x < K.w; ++x) {
          const Taps t = K.taps(pv, n, y, x);
          const double* go = grad.data() + ((n * K.h + y) * K.w + x) * K.c;
          double d_sx = 0.0, d_sy = 0.0;
          for (std::size_t ch = 0; ch < K.c; ++ch) {
            if (need_img) {
              for (int k = 0; k < 4; ++k) {
                if (t.wt[k] != 0.0 && t.idx[k] >= 0) gi[static_cast<std::size_t>(t.idx[k]) * K.c + ch] += t.wt[k] * go[ch];
              }
            }
            if (need_par) {
              const double v00 = K.value(iv, t, 0, ch), v10 = K.value(iv, t, 1, ch);
              const double v01 = K.value(iv, t, 2, ch), v11 = K.value(iv, t, 3, ch);
              d_sx += go[ch] * ((1.0 - t.fy) * (v10 - v00) + t.fy * (v11 - v01));
              d_sy += go[ch] * ((1.0 - t.fx) * (v01 - v00) + t.fx * (v11 - v10));
            }
          }
          if (need_par) {
            const double c = t.cos_t, s = t.sin_t;
            acc_tx += d_sx * (-c * W) + d_sy * (-s * W);
            acc_ty += d_sx * (s * H) + d_sy * (-c * H);
            acc_th += d_sx * (-s * t.dx - c * t.dy) + d_sy * (c * t.dx - s * t.dy);
          }
        }
      }
      if (need_par) {
        double* p = gp + (K.shared_params ? 0 : 3 * n);
        p[0] += acc_tx;
        p[1] += acc_ty;
        p[2] += acc_th;
      }
    }
  });
  return result;
}

Tensor params_tensor(std::span<const TransformParams> deltas, bool requires_grad) {
  std::vector<double> v;
  v.reserve(deltas.size() * 3);
  for (const auto& d : deltas) {
    v.push_back(d.tx);
    v.push_back(d.ty);
    v.push_back(d.theta);
  }
  return Tensor({deltas.size(), 3}, std::move(v), requires_grad);
}

Tensor warp_batch(const Tensor& images, std::span<const TransformParams> deltas, PaddingMode pad) {
  Tape tape(Tape::Mode::Inference);
  return warp(tape, images, params_tensor(deltas), pad);
}

Tensor flip_horizontal(const Tensor& images) {
  std::size_t n, h, w, c;
  if (images.rank() == 3) {
    n = 1, h = images.dim(0), w = images.dim(1), c = images.dim(2);
  } else if (images.rank() == 4) {
    n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  } else {
    throw ShapeError("flip_horizontal", images.shape(), "expected [H,W,C] or [N,H,W,C]");
  }
  const auto iv = images.values();
  std::vector<double> out(iv.size());
  for (std::size_t b = 0; b < n * h; ++b) {
    for (std::size_t x = 0; x < w; ++x) {
      const double* src = iv.data() + (b * w + (w - 1 - x)) * c;
      std::copy(src, src + c, out.begin() + static_cast<std::ptrdiff_t>((b * w + x) * c));
    }
  }
  return Tensor(images.shape(), std::move(out));
}

}  // namespace invreg
