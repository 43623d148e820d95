#pragma once

// Minibatch momentum SGD over a RegularizedObjective.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "invreg/classifier.hpp"
#include "invreg/data.hpp"
#include "invreg/regularizers.hpp"

namespace invreg {

/// Std: flip (p = 1/2) and integer shifts of up to 4 px. StdStar: Std plus a
/// uniform rotation from the search set. FlipOnly: flips only.
enum class Augmentation { Std, StdStar, FlipOnly, None };
std::string to_string(Augmentation aug);
Augmentation parse_augmentation(const std::string& text);

struct TrainConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0002;
  std::size_t iterations = 3000;
  std::size_t batch_size = 64;  // unique original images per step
  RegularizedObjective objective;
  Augmentation augmentation = Augmentation::Std;
  double max_rot_deg = 30.0;
  double max_trans_px = 3.0;
  int aug_shift_px = 4;
  PaddingMode pad = PaddingMode::constant(0.0);
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  /// 80000 iterations, batch 64, the default optimizer constants.
  static TrainConfig full_scale();
  void validate() const;
  /// Defended objectives (adversarial batch or lambda != 0) only flip.
  Augmentation effective_augmentation() const;
  bool defended() const;
};

/// lr0 before T/2, lr0/10 from step floor(T/2), lr0/100 from step floor(3T/4).
double learning_rate(const TrainConfig& config, std::size_t step);

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::size_t step, const std::string& what_name, const std::string& detail);
  std::size_t step() const { return step_; }
  const std::string& name() const { return name_; }

 private:
  std::size_t step_;
  std::string name_;
};

/// v <- momentum*v + g + wd*theta; theta <- theta - lr*v, for every parameter.
/// Throws NonFiniteError (before touching anything) if a gradient is not finite.
void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity,
              std::span<const std::string> names, double lr, double momentum, double weight_decay,
              std::size_t step = 0);

/// Augments a batch [N,H,W,C]; image i draws from stream.child(i).
Tensor standard_augment(const Tensor& images, Augmentation mode, const SearchSet& set, const SeedStream& stream,
                        int shift_px = 4, PaddingMode pad = PaddingMode::constant(0.0));

struct TrainLogRow {
  std::size_t step = 0;
  double lr = 0.0;
  double total_loss = 0.0;
  double ce_term = 0.0;
  double reg_term = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  Classifier model;
  std::vector<TrainLogRow> log;
};

/// Non-finite loss; carries the parameters from before the failing step.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, Classifier last_good, std::vector<TrainLogRow> log);
  std::size_t step() const { return step_; }
  const Classifier& last_good() const { return last_good_; }
  const std::vector<TrainLogRow>& log() const { return log_; }

 private:
  std::size_t step_;
  Classifier last_good_;
  std::vector<TrainLogRow> log_;
};

/// Sets the model's normalization from `data`, then runs config.iterations steps.
TrainResult train(const TrainConfig& config, const Dataset& data, Classifier model);

/// step,lr,total_loss,ce_term,reg_term,wall_ms
void write_log_csv(std::span<const TrainLogRow> log, const std::filesystem::path& path, bool with_wall = true);

}  // namespace invreg
