#include "invreg/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "invreg/parallel.hpp"

namespace invreg {

std::string to_string(Augmentation aug) {
  switch (aug) {
    case Augmentation::Std:
      return "std";
    case Augmentation::StdStar:
      return "std*";
    case Augmentation::FlipOnly:
      return "flip-only";
    case Augmentation::None:
      return "none";
  }
  return "?";
}

Augmentation parse_augmentation(const std::string& text) {
  if (text == "std") return Augmentation::Std;
  if (text == "std*" || text == "stdstar") return Augmentation::StdStar;
  if (text == "flip-only" || text == "flip") return Augmentation::FlipOnly;
  if (text == "none") return Augmentation::None;
  throw std::invalid_argument("unknown augmentation '" + text + "' (expected std, std*, flip-only or none)");
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.iterations = 80000;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw std::invalid_argument("train: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw std::invalid_argument("train: weight decay must be nonnegative");
  if (iterations == 0) throw std::invalid_argument("train: iterations must be positive");
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  if (max_rot_deg < 0.0 || max_trans_px < 0.0) throw std::invalid_argument("train: search ranges must be nonnegative");
  if (aug_shift_px < 0) throw std::invalid_argument("train: augmentation shift must be nonnegative");
  objective.validate();
}

bool TrainConfig::defended() const { return objective.batch != BatchMode::Nat || objective.lambda != 0.0; }

Augmentation TrainConfig::effective_augmentation() const {
  if (defended() && augmentation != Augmentation::None) return Augmentation::FlipOnly;
  return augmentation;
}

double learning_rate(const TrainConfig& config, std::size_t step) {
  const std::size_t t = config.iterations;
  if (step >= 3 * t / 4) return config.lr0 / 100.0;
  if (step >= t / 2) return config.lr0 / 10.0;
  return config.lr0;
}

NonFiniteError::NonFiniteError(std::size_t step, const std::string& what_name, const std::string& detail)
    : std::runtime_error("non-finite " + detail + " at step " + std::to_string(step) + " in parameter " + what_name),
      step_(step),
      name_(what_name) {}

void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity,
              std::span<const std::string> names, double lr, double momentum, double weight_decay,
              std::size_t step) {
  if (velocity.size() != params.size()) velocity.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = i < names.size() ? names[i] : "#" + std::to_string(i);
    if (!params[i].has_grad()) continue;
    for (double g : params[i].grad()) {
      if (!std::isfinite(g)) throw NonFiniteError(step, name, "gradient");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_values();
    auto& v = velocity[i];
    if (v.size() != theta.size()) v.assign(theta.size(), 0.0);
    const auto g = params[i].has_grad() ? params[i].grad() : std::span<const double>();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      v[j] = momentum * v[j] + (g.empty() ? 0.0 : g[j]) + weight_decay * theta[j];
      theta[j] -= lr * v[j];
    }
  }
}

Tensor standard_augment(const Tensor& images, Augmentation mode, const SearchSet& set, const SeedStream& stream,
                        int shift_px, PaddingMode pad) {
  if (images.rank() != 4) throw ShapeError("standard_augment", images.shape(), "expected [N,H,W,C]");
  if (mode == Augmentation::None) return images;
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  const std::size_t per = h * w * c;
  std::vector<double> out(images.values().begin(), images.values().end());
  std::vector<TransformParams> deltas(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(stream.child(i));
    if (rng.bernoulli(0.5)) {
      const Tensor one({h, w, c}, std::vector<double>(out.begin() + static_cast<std::ptrdiff_t>(i * per),
                                                      out.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
      const Tensor flipped = flip_horizontal(one);
      std::copy(flipped.values().begin(), flipped.values().end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    if (mode == Augmentation::Std || mode == Augmentation::StdStar) {
      deltas[i].tx = static_cast<double>(rng.uniform_int(-shift_px, shift_px)) / static_cast<double>(w);
      deltas[i].ty = static_cast<double>(rng.uniform_int(-shift_px, shift_px)) / static_cast<double>(h);
    }
    if (mode == Augmentation::StdStar) {
      const double r = set.half_range().theta;
      deltas[i].theta = rng.uniform(-r, r);
    }
  }
  Tensor flipped(images.shape(), std::move(out));
  if (mode == Augmentation::FlipOnly) return flipped;
  return warp_batch(flipped, deltas, pad);
}

TrainingDiverged::TrainingDiverged(std::size_t step, Classifier last_good, std::vector<TrainLogRow> log)
    : std::runtime_error("training diverged (non-finite loss) at step " + std::to_string(step)),
      step_(step),
      last_good_(std::move(last_good)),
      log_(std::move(log)) {}

namespace {

/// Unique-image batches: walks seeded permutations of the dataset epoch by epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, const SeedStream& stream) : n_(n), stream_(stream) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t batch) {
    const std::size_t b = std::min(batch, n_);
    if (pos_ + b > n_) {
      ++epoch_;
      reshuffle();
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + b));
    pos_ += b;
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(stream_.child(epoch_));
    for (std::size_t i = n_; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i - 1)));
      std::swap(order_[i - 1], order_[j]);
    }
    pos_ = 0;
  }

  std::size_t n_;
  SeedStream stream_;
  std::size_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& data, Classifier model) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  const auto& arch = model.architecture();
  if (arch.height != data.height || arch.width != data.width || arch.channels != data.channels) {
    throw std::invalid_argument("train: model input " + arch.describe() + " does not match the data");
  }
  if (arch.classes != data.classes) throw std::invalid_argument("train: class count mismatch");
  model.set_normalization(compute_normalization(data));

  const SearchSet set = build_search_set(config.max_rot_deg, config.max_trans_px, data.width, data.height);
  const SeedStream root(config.seed);
  BatchSampler sampler(data.size(), root.named("batches"));
  const Augmentation aug = config.effective_augmentation();
  const SearchPlan plan = plan_searches(config.objective);
  const bool searches = plan.ce || plan.reg || plan.random_draws > 0;

  std::vector<std::vector<double>> velocity;
  std::vector<TrainLogRow> log;
  log.reserve(config.iterations);
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t step = 0; step < config.iterations; ++step) {
    const auto idx = sampler.next(config.batch_size);
    const auto labels = data.labels_at(idx);
    const Tensor images = standard_augment(data.images(idx), aug, set, root.named("augmentation").child(step),
                                           config.aug_shift_px, config.pad);

    std::vector<AdversarialSet> adv(idx.size());
    if (searches) {
      const SearchContext ctx{&model, set, config.pad};
      const SeedStream defense = root.named("defense").child(step);
      const std::size_t per = images.numel() / idx.size();
      const Shape one{images.dim(1), images.dim(2), images.dim(3)};
      parallel_for(idx.size(), config.threads, [&](std::size_t i) {
        const auto v = images.values().subspan(i * per, per);
        const Tensor image(one, std::vector<double>(v.begin(), v.end()));
        adv[i] = find_adversarial(config.objective, ctx, image, labels[i], defense.child(i));
      });
    }

    model.zero_grad();
    Tape tape;
    const ComposedLoss loss = composed_loss(tape, config.objective, model, images, labels, adv, config.pad);
    const double total = loss.total.item();
    if (!std::isfinite(total)) throw TrainingDiverged(step, model.clone(), log);
    const double lr = learning_rate(config, step);
    Classifier before = model.clone();
    tape.backward(loss.total);
    try {
      sgd_step(model.parameters(), velocity, model.parameter_names(), lr, config.momentum, config.weight_decay, step);
    } catch (const NonFiniteError&) {
      throw TrainingDiverged(step, std::move(before), log);
    }
    // Finite gradients can still overflow once scaled by the step size.
    for (const auto& p : model.parameters()) {
      for (double v : p.values()) {
        if (!std::isfinite(v)) throw TrainingDiverged(step, std::move(before), log);
      }
    }
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    log.push_back({step, lr, total, loss.ce_term, loss.reg_term, ms});
  }
  return {std::move(model), std::move(log)};
}

void write_log_csv(std::span<const TrainLogRow> log, const std::filesystem::path& path, bool with_wall) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,lr,total_loss,ce_term,reg_term" << (with_wall ? ",wall_ms" : "") << '\n';
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g", r.step, r.lr, r.total_loss, r.ce_term, r.reg_term);
    out << buf;
    if (with_wall) {
      std::snprintf(buf, sizeof buf, ",%.3f", r.wall_ms);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace invreg
