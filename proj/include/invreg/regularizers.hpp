#pragma once

// Invariance-inducing regularizers and the composed training objectives,
// named REG(batch,def) as in "KL(rob,wo10)".

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "invreg/attacks.hpp"
#include "invreg/classifier.hpp"

namespace invreg {

enum class RegKind { AT, L2, KL, ALP, KLC, HDA };
enum class Semimetric { L2, KL };
enum class BatchMode { Nat, Rob, Mix };

struct RegularizerKind {
  RegKind kind = RegKind::AT;
  Semimetric h = Semimetric::L2;  // HDA only
  std::size_t draws = 1;          // HDA only

  std::string to_string() const;  // "AT", "KLC", "HDA-KLx4", ...
  friend bool operator==(const RegularizerKind&, const RegularizerKind&) = default;
};

std::string to_string(BatchMode mode);

struct RegularizedObjective {
  RegularizerKind reg;
  double lambda = 0.0;
  BatchMode batch = BatchMode::Rob;
  DefenseSpec defense = DefenseSpec::wok(10);
  /// L2/KL take their point from the CE search instead of a search of their own.
  bool share_adv_point = false;

  /// REG(batch,def), without lambda.
  std::string to_string() const;
  void validate() const;
  friend bool operator==(const RegularizedObjective&, const RegularizedObjective&) = default;
};

class ObjectiveParseError : public std::invalid_argument {
 public:
  ObjectiveParseError(const std::string& text, std::size_t position, const std::string& message);
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

/// Grammar (case-insensitive, spaces ignored):
///   REG '(' batch ',' def ')'
///   REG   := AT | L2 | KL | ALP | KLC | KL-C | HDA ['-' (L2|KL)] ['x' N]
///   batch := nat | rob | mix
///   def   := rnd | wo N | spgd [N]
RegularizedObjective parse_objective(const std::string& text, double lambda = 0.0);

/// Which searches an objective needs per example and step.
struct SearchPlan {
  bool ce = false;   // CE-maximizing point (loss term of rob/mix, AT/ALP/KLC regularizers)
  bool reg = false;  // point maximizing the L2/KL regularizer itself
  std::size_t random_draws = 0;  // HDA uniform draws
};
SearchPlan plan_searches(const RegularizedObjective& objective);

/// Adversarial transforms for one example, filled according to the plan.
struct AdversarialSet {
  std::optional<TransformParams> ce;
  std::optional<TransformParams> reg;
  std::vector<TransformParams> draws;
};

/// Searches (and HDA draws) for one example. An objective that needs nothing
/// yields an empty set. Degenerate search sets give the identity.
AdversarialSet find_adversarial(const RegularizedObjective& objective, const SearchContext& ctx,
                                const Tensor& image, int label, const SeedStream& stream);

/// Single adversarial point for `search` under `defense`.
AdversarialPoint adversarial_point(const SearchContext& ctx, const Tensor& image, int label,
                                   SearchObjective search, const DefenseSpec& defense, const SeedStream& stream);

/// Per-example regularizer values [N] given clean logits and the logits at the
/// adversarial point(s) of the kind (HDA: one tensor per draw, averaged).
Tensor reg_value_rows(Tape& tape, const RegularizerKind& kind, const Tensor& clean_logits,
                      std::span<const Tensor> adv_logits, std::span<const int> labels);
Tensor reg_value(Tape& tape, const RegularizerKind& kind, const Tensor& clean_logits,
                 std::span<const Tensor> adv_logits, std::span<const int> labels);

struct ComposedLoss {
  Tensor total;
  double ce_term = 0.0;
  double reg_term = 0.0;
};

/// nat: mean CE(x) + lambda*R; rob: mean CE(x_adv) + lambda*R;
/// mix: (mean CE(x) + mean CE(x_adv))/2 + lambda*R. With lambda = 0 the
/// regularizer is evaluated for reporting only and never enters the graph.
ComposedLoss composed_loss(Tape& tape, const RegularizedObjective& objective, const Classifier& model,
                           const Tensor& images, std::span<const int> labels,
                           std::span<const AdversarialSet> adversarial, PaddingMode pad);

}  // namespace invreg
