#pragma once

// Grid-search evaluation attack and the training-time defenses (random,
// worst-of-k, spatial PGD) over rotation + translation parameters.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "invreg/classifier.hpp"
#include "invreg/data.hpp"
#include "invreg/rng.hpp"
#include "invreg/spatial_transform.hpp"

namespace invreg {

struct DefenseSpec {
  enum class Kind { Rnd, WoK, SPGD };
  Kind kind = Kind::WoK;
  std::size_t k = 10;
  std::size_t steps = 5;
  TransformParams step_sizes{0.03, 0.03, 0.3};

  static DefenseSpec rnd() { return {Kind::Rnd, 1, 5, {0.03, 0.03, 0.3}}; }
  static DefenseSpec wok(std::size_t k) { return {Kind::WoK, k, 5, {0.03, 0.03, 0.3}}; }
  static DefenseSpec spgd(std::size_t steps = 5, TransformParams sizes = {0.03, 0.03, 0.3}) {
    return {Kind::SPGD, 1, steps, sizes};
  }
  /// Number of random candidates a sampling defense draws (Rnd draws one).
  std::size_t samples() const { return kind == Kind::Rnd ? 1 : k; }
  std::string to_string() const;  // "rnd", "wo10", "spgd" or "spgd7"
  friend bool operator==(const DefenseSpec&, const DefenseSpec&) = default;
};

/// Function maximized by a defense.
enum class SearchObjective { CE, L2, KL };
std::string to_string(SearchObjective objective);

// Per-row objectives on plain logits, used by the searches.
double ce_value(std::span<const double> logits, int label);
double l2_value(std::span<const double> logits, std::span<const double> clean);
double kl_value(std::span<const double> logits, std::span<const double> clean);
double objective_value(SearchObjective objective, std::span<const double> logits, int label,
                       std::span<const double> clean);

struct AdversarialPoint {
  TransformParams delta;
  double value = 0.0;
};

/// Everything a search needs besides the example itself.
struct SearchContext {
  const Classifier* model = nullptr;
  SearchSet set;
  PaddingMode pad = PaddingMode::constant(0.0);
};

/// Logits of `image` ([H,W,C]) warped by each candidate, row-major [K, p].
std::vector<double> candidate_logits(const Classifier& model, const Tensor& image,
                                     std::span<const TransformParams> candidates, PaddingMode pad);

/// Identity followed by `k` uniform draws from S taken from `stream`.
std::vector<TransformParams> wok_candidates(const SearchSet& set, std::size_t k, const SeedStream& stream);

/// Worst-of-k for several objectives over one shared candidate list; the
/// returned points follow the order of `objectives`. Ties keep the earliest candidate.
std::vector<AdversarialPoint> worst_of_k(const SearchContext& ctx, const Tensor& image, int label,
                                         std::span<const SearchObjective> objectives, std::size_t k,
                                         const SeedStream& stream);
AdversarialPoint worst_of_k(const SearchContext& ctx, const Tensor& image, int label, SearchObjective objective,
                            std::size_t k, const SeedStream& stream);

/// Objective value and its gradient with respect to the transform parameters.
struct ObjectiveGradient {
  double value = 0.0;
  TransformParams grad;
};
ObjectiveGradient objective_gradient(const SearchContext& ctx, const Tensor& image, int label,
                                     std::span<const double> clean_logits, SearchObjective objective,
                                     const TransformParams& delta);

/// Signed-gradient ascent from a uniform start, projected onto S after each
/// step; returns the best iterate seen (the start included).
AdversarialPoint spgd(const SearchContext& ctx, const Tensor& image, int label, SearchObjective objective,
                      std::size_t steps, const TransformParams& step_sizes, const SeedStream& stream);

/// Dispatches on the defense kind.
std::vector<AdversarialPoint> defend(const SearchContext& ctx, const DefenseSpec& defense, const Tensor& image,
                                     int label, std::span<const SearchObjective> objectives,
                                     const SeedStream& stream);

// ---------------------------------------------------------------------------
// Grid attack

/// Evenly spaced grid over S, endpoints included; a dimension with one point holds only 0.
struct GridSpec {
  std::size_t n_tx = 5;
  std::size_t n_ty = 5;
  std::size_t n_rot = 31;
  SearchSet set;

  std::size_t size() const { return n_tx * n_ty * n_rot; }
  /// Flat index = (i_tx * n_ty + i_ty) * n_rot + i_rot.
  TransformParams at(std::size_t index) const;
  std::vector<TransformParams> points() const;
  std::string to_string() const;  // "5x5x31"

  /// Parses "AxBxC" (case-insensitive x); throws std::invalid_argument.
  static GridSpec parse(const std::string& text, const SearchSet& set);
};

/// linspace(-h, h, n); n == 1 gives {0}.
std::vector<double> grid_axis(double half, std::size_t n);

struct ExampleResult {
  std::size_t index = 0;
  int label = 0;
  bool natural_correct = false;
  bool grid_correct = false;
  TransformParams worst_delta;
  double worst_loss = 0.0;
  std::size_t evaluated = 0;
};

struct AttackReport {
  std::string grid;  // e.g. "5x5x31" or "5x5x31+10x10x75"
  std::size_t candidates_per_example = 0;
  std::vector<ExampleResult> examples;
  double natural_accuracy = 0.0;
  double grid_accuracy = 0.0;
};

struct AttackOptions {
  PaddingMode pad = PaddingMode::constant(0.0);
  bool early_stop = false;  // stop an example's sweep at its first misclassification
  std::size_t threads = 1;
  std::size_t chunk = 128;  // candidates per forward pass
};

/// Grid-correct iff every candidate of every grid is classified correctly. The
/// worst transform is the misclassified candidate of maximal loss, otherwise the
/// maximal-loss candidate; ties keep the earliest (grids in order, then index).
AttackReport grid_attack(const Classifier& model, const Dataset& data, std::span<const GridSpec> grids,
                         const AttackOptions& options = {});
AttackReport grid_attack(const Classifier& model, const Dataset& data, const GridSpec& grid,
                         const AttackOptions& options = {});

/// Accuracy when every example is attacked by CE-objective S-PGD with its own stream.
AttackReport spgd_attack(const Classifier& model, const Dataset& data, const SearchSet& set, std::size_t steps,
                         const TransformParams& step_sizes, std::uint64_t seed, const AttackOptions& options = {});

/// bitmap[e][a] = 1 iff example e rotated by the a-th angle of
/// linspace(-theta*, theta*, n_angles) is misclassified.
std::vector<std::vector<std::uint8_t>> per_angle_map(const Classifier& model, const Dataset& data,
                                                     std::size_t n_angles, const SearchSet& set,
                                                     const AttackOptions& options = {});

void write_report_json(const AttackReport& report, const std::filesystem::path& path);
void write_report_csv(const AttackReport& report, const std::filesystem::path& path);
void write_angle_map_csv(const std::vector<std::vector<std::uint8_t>>& bitmap, std::span<const double> angles_deg,
                         const std::filesystem::path& path);

}  // namespace invreg
