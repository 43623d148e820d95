#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "invreg/autodiff.hpp"

namespace invreg {

/// conv(3x3)-relu-pool blocks followed by relu dense layers and a linear head.
struct Architecture {
  std::size_t height = 24;
  std::size_t width = 24;
  std::size_t channels = 1;
  std::vector<std::size_t> conv_widths{8, 16};
  std::vector<std::size_t> dense_widths{64};
  std::size_t classes = 4;

  void validate() const;
  std::string describe() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Per-channel input standardization applied inside the classifier, so callers
/// always pass raw [0,1] pixels.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Normalization identity(std::size_t channels);
};

class Classifier {
 public:
  /// He-style (fan-in) Gaussian init from `seed` (unit gain for the linear head); biases start at zero.
  static Classifier create(const Architecture& arch, std::uint64_t seed);

  const Architecture& architecture() const { return arch_; }
  std::size_t classes() const { return arch_.classes; }

  /// Logits [N, classes] for images [N,H,W,C] (or [H,W,C] -> [1, classes]).
  /// With track_params=false the parameters are treated as constants, which is
  /// what attacks use when they only need input gradients.
  Tensor logits(Tape& tape, const Tensor& images, bool track_params = true) const;

  /// Inference-only logits.
  Tensor logits(const Tensor& images) const;

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  std::size_t parameter_count() const;

  const Normalization& normalization() const { return norm_; }
  void set_normalization(Normalization norm);

  void zero_grad();
  /// Deep copy of all parameters (independent storage).
  Classifier clone() const;
  /// Rounds parameters and normalization to the checkpoint's 32-bit storage precision.
  void round_to_storage_precision();

 private:
  Architecture arch_;
  Normalization norm_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

// ---------------------------------------------------------------------------
// Losses over logits. Row variants return one value per example ([N]).

Tensor one_hot(std::span<const int> labels, std::size_t classes);

/// -sum_c y_c log_softmax(logits)_c per row; `targets` are label distributions [N,p].
Tensor cross_entropy_rows(Tape& tape, const Tensor& logits, const Tensor& targets);
Tensor cross_entropy(Tape& tape, const Tensor& logits, const Tensor& targets);

/// D_KL(softmax(a) || softmax(b)) per row.
Tensor kl_div_rows(Tape& tape, const Tensor& logits_a, const Tensor& logits_b);
Tensor kl_div(Tape& tape, const Tensor& logits_a, const Tensor& logits_b);

/// ||a - b||_2^2 per row.
Tensor l2_logit_dist_rows(Tape& tape, const Tensor& logits_a, const Tensor& logits_b);
Tensor l2_logit_dist(Tape& tape, const Tensor& logits_a, const Tensor& logits_b);

/// Argmax per row, ties to the lowest index.
std::vector<int> predict(const Tensor& logits);
int argmax(std::span<const double> row);

// ---------------------------------------------------------------------------
// Checkpoints: "SPTR" magic, u32 version, architecture descriptor,
// normalization, then little-endian f32 parameters in declaration order.

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Classifier& model, const std::filesystem::path& path);
Classifier load_checkpoint(const std::filesystem::path& path);
/// Also verifies that the stored architecture matches `expected`.
Classifier load_checkpoint(const std::filesystem::path& path, const Architecture& expected);

}  // namespace invreg
