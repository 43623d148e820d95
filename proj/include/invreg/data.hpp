#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "invreg/autodiff.hpp"
#include "invreg/classifier.hpp"

namespace invreg {

enum class Split { Train, Test };

/// Images in [0,1], stored NHWC, with integer labels in [0, classes).
struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::size_t classes = 0;
  std::vector<double> pixels;
  std::vector<int> labels;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width * channels; }
  std::span<const double> image_values(std::size_t i) const;

  Tensor image(std::size_t i) const;                           // [H,W,C]
  Tensor images(std::span<const std::size_t> indices) const;   // [n,H,W,C]
  Tensor all_images() const;
  std::vector<int> labels_at(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;

  /// Throws std::invalid_argument when sizes, pixel range or labels are inconsistent.
  void validate() const;
};

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image file (u8, N x H x W) and matching label file. `classes`
/// of 0 infers max(label)+1.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t classes = 0, Split split = Split::Train);

/// Pixels are stored as round(255 * v); single-channel datasets only.
void write_idx(const Dataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

// ---------------------------------------------------------------------------
// Synthetic notched-ellipse glyphs.

struct GlyphShape {
  double semi_x;          // fraction of image size
  double semi_y;          // fraction of image size
  double notch_half_deg;  // half-angle of the wedge cut at the top
  double notch_inner;     // wedge starts at this fraction of the radius (0 = center)
};

struct GlyphSpec {
  std::vector<GlyphShape> shapes = default_shapes();
  std::size_t size = 24;
  double inherent_rot_deg = 15.0;  // per-sample rotation drawn from [-r, r]
  double noise = 0.02;             // additive uniform noise amplitude
  double search_rot_deg = 30.0;    // search set used by the separation checks
  double search_trans_px = 3.0;
  double min_separation = 0.5;     // minimal L2 pixel distance between classes

  std::size_t classes() const { return shapes.size(); }
  static std::vector<GlyphShape> default_shapes();
};

class GlyphSeparationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Noise-free glyph of class `cls` rotated by `angle_deg`, shifted by integer pixels.
std::vector<double> render_glyph(const GlyphSpec& spec, std::size_t cls, double angle_deg, int shift_x = 0,
                                 int shift_y = 0);

/// Smallest L2 distance between renders of two classes over all relative
/// rotations and shifts reachable inside the inherent range plus the search set.
struct SeparationReport {
  double min_distance;
  std::size_t class_a, class_b;
  double angle_deg;
};
SeparationReport min_class_separation(const GlyphSpec& spec);

/// Balanced dataset (labels cycle through classes). Pixels are quantized to
/// multiples of 1/255 so that IDX export is lossless.
Dataset gen_glyphs(const GlyphSpec& spec, std::size_t n_per_class, std::uint64_t seed, Split split = Split::Train);

/// Checks on a subsample that the nearest-glyph label of every search-set
/// corner warp equals the sample's label. Throws GlyphSeparationError.
void check_label_invariance(const GlyphSpec& spec, const Dataset& data, std::size_t samples = 4);

// ---------------------------------------------------------------------------

/// Per-channel mean/std over all pixels, std floored at 1e-6.
Normalization compute_normalization(const Dataset& data);
Dataset normalize(const Dataset& data, const Normalization& norm);
Dataset denormalize(const Dataset& data, const Normalization& norm);

}  // namespace invreg
