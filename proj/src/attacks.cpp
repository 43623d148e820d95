#include "invreg/attacks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

#include "invreg/parallel.hpp"

namespace invreg {

std::string DefenseSpec::to_string() const {
  switch (kind) {
    case Kind::Rnd:
      return "rnd";
    case Kind::WoK:
      return "wo" + std::to_string(k);
    case Kind::SPGD:
      return steps == 5 ? "spgd" : "spgd" + std::to_string(steps);
  }
  return "?";
}

std::string to_string(SearchObjective objective) {
  switch (objective) {
    case SearchObjective::CE:
      return "ce";
    case SearchObjective::L2:
      return "l2";
    case SearchObjective::KL:
      return "kl";
  }
  return "?";
}

namespace {

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

double ce_value(std::span<const double> logits, int label) {
  return log_sum_exp(logits) - logits[static_cast<std::size_t>(label)];
}

double l2_value(std::span<const double> logits, std::span<const double> clean) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += (logits[i] - clean[i]) * (logits[i] - clean[i]);
  return s;
}

double kl_value(std::span<const double> logits, std::span<const double> clean) {
  const double za = log_sum_exp(logits), zb = log_sum_exp(clean);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double la = logits[i] - za, lb = clean[i] - zb;
    s += std::exp(la) * (la - lb);
  }
  return s;
}

double objective_value(SearchObjective objective, std::span<const double> logits, int label,
                       std::span<const double> clean) {
  switch (objective) {
    case SearchObjective::CE:
      return ce_value(logits, label);
    case SearchObjective::L2:
      return l2_value(logits, clean);
    case SearchObjective::KL:
      return kl_value(logits, clean);
  }
  return 0.0;
}

std::vector<double> candidate_logits(const Classifier& model, const Tensor& image,
                                     std::span<const TransformParams> candidates, PaddingMode pad) {
  if (image.rank() != 3) throw ShapeError("candidate_logits", image.shape(), "expected [H,W,C]");
  const auto src = image.values();
  std::vector<double> copies;
  copies.reserve(src.size() * candidates.size());
  for (std::size_t k = 0; k < candidates.size(); ++k) copies.insert(copies.end(), src.begin(), src.end());
  const Tensor batch({candidates.size(), image.dim(0), image.dim(1), image.dim(2)}, std::move(copies));
  const Tensor out = model.logits(warp_batch(batch, candidates, pad));
  const auto v = out.values();
  return {v.begin(), v.end()};
}

std::vector<TransformParams> wok_candidates(const SearchSet& set, std::size_t k, const SeedStream& stream) {
  Rng rng(stream);
  std::vector<TransformParams> out{TransformParams::identity()};
  for (std::size_t i = 0; i < k; ++i) out.push_back(set.sample(rng));
  return out;
}

namespace {

std::vector<double> clean_logits_of(const Classifier& model, const Tensor& image) {
  const Tensor logits = model.logits(image);
  return {logits.values().begin(), logits.values().end()};
}

bool needs_clean(std::span<const SearchObjective> objectives) {
  return std::any_of(objectives.begin(), objectives.end(), [](auto o) { return o != SearchObjective::CE; });
}

}  // namespace

std::vector<AdversarialPoint> worst_of_k(const SearchContext& ctx, const Tensor& image, int label,
                                         std::span<const SearchObjective> objectives, std::size_t k,
                                         const SeedStream& stream) {
  if (k == 0) throw std::invalid_argument("worst_of_k: k must be positive");
  const auto cands = wok_candidates(ctx.set, k, stream);
  const auto logits = candidate_logits(*ctx.model, image, cands, ctx.pad);
  const std::size_t p = ctx.model->classes();
  const std::span<const double> all(logits);
  // The identity is candidate 0, so its logits double as the clean logits.
  const auto clean = all.subspan(0, p);
  std::vector<AdversarialPoint> best(objectives.size());
  for (std::size_t o = 0; o < objectives.size(); ++o) {
    for (std::size_t c = 0; c < cands.size(); ++c) {
      const double v = objective_value(objectives[o], all.subspan(c * p, p), label, clean);
      if (c == 0 || v > best[o].value) best[o] = {cands[c], v};
    }
  }
  return best;
}

AdversarialPoint worst_of_k(const SearchContext& ctx, const Tensor& image, int label, SearchObjective objective,
                            std::size_t k, const SeedStream& stream) {
  const SearchObjective objs[] = {objective};
  return worst_of_k(ctx, image, label, objs, k, stream).front();
}

namespace {

struct Evaluation {
  double value = 0.0;
  TransformParams grad;
  std::vector<double> logits;
};

Evaluation evaluate_with_grad(const SearchContext& ctx, const Tensor& image, int label,
                              std::span<const double> clean_logits, SearchObjective objective,
                              const TransformParams& delta) {
  Tape tape;
  const Tensor params({3}, {delta.tx, delta.ty, delta.theta}, true);
  const Tensor warped = warp(tape, image, params, ctx.pad);
  const Tensor logits = ctx.model->logits(tape, warped, false);
  const std::size_t p = ctx.model->classes();
  Tensor value;
  switch (objective) {
    case SearchObjective::CE: {
      const int labels[] = {label};
      value = cross_entropy(tape, logits, one_hot(labels, p));
      break;
    }
    case SearchObjective::L2:
      value = l2_logit_dist(tape, logits, Tensor({1, p}, {clean_logits.begin(), clean_logits.end()}));
      break;
    case SearchObjective::KL:
      value = kl_div(tape, logits, Tensor({1, p}, {clean_logits.begin(), clean_logits.end()}));
      break;
  }
  Evaluation e;
  e.value = value.item();
  if (value.requires_grad()) {
    tape.backward(value);
    e.grad = TransformParams::from_array(params.grad());
  }
  const auto lv = logits.values();
  e.logits.assign(lv.begin(), lv.end());
  return e;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct SpgdTrace {
  AdversarialPoint best;
  std::vector<std::vector<double>> logits;  // per evaluated iterate
};

SpgdTrace spgd_trace(const SearchContext& ctx, const Tensor& image, int label, std::span<const double> clean,
                     SearchObjective objective, std::size_t steps, const TransformParams& sizes,
                     const SeedStream& stream) {
  Rng rng(stream);
  TransformParams delta = ctx.set.sample(rng);
  SpgdTrace trace;
  for (std::size_t s = 0; s <= steps; ++s) {
    const Evaluation e = evaluate_with_grad(ctx, image, label, clean, objective, delta);
    if (s == 0 || e.value > trace.best.value) trace.best = {delta, e.value};
    trace.logits.push_back(e.logits);
    if (s == steps) break;
    delta = ctx.set.project({delta.tx + sizes.tx * sign(e.grad.tx), delta.ty + sizes.ty * sign(e.grad.ty),
                             delta.theta + sizes.theta * sign(e.grad.theta)});
  }
  return trace;
}

}  // namespace

ObjectiveGradient objective_gradient(const SearchContext& ctx, const Tensor& image, int label,
                                     std::span<const double> clean_logits, SearchObjective objective,
                                     const TransformParams& delta) {
  const Evaluation e = evaluate_with_grad(ctx, image, label, clean_logits, objective, delta);
  return {e.value, e.grad};
}

AdversarialPoint spgd(const SearchContext& ctx, const Tensor& image, int label, SearchObjective objective,
                      std::size_t steps, const TransformParams& step_sizes, const SeedStream& stream) {
  std::vector<double> clean;
  if (objective != SearchObjective::CE) clean = clean_logits_of(*ctx.model, image);
  return spgd_trace(ctx, image, label, clean, objective, steps, step_sizes, stream).best;
}

std::vector<AdversarialPoint> defend(const SearchContext& ctx, const DefenseSpec& defense, const Tensor& image,
                                     int label, std::span<const SearchObjective> objectives,
                                     const SeedStream& stream) {
  if (defense.kind != DefenseSpec::Kind::SPGD) {
    return worst_of_k(ctx, image, label, objectives, defense.samples(), stream);
  }
  std::vector<double> clean;
  if (needs_clean(objectives)) clean = clean_logits_of(*ctx.model, image);
  std::vector<AdversarialPoint> out;
  for (auto objective : objectives) {
    out.push_back(spgd_trace(ctx, image, label, clean, objective, defense.steps, defense.step_sizes, stream).best);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> grid_axis(double half, std::size_t n) {
  if (n == 0) throw std::invalid_argument("grid_axis: empty axis");
  if (n == 1) return {0.0};
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = -half + 2.0 * half * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  out.back() = half;
  // Odd axes hit zero exactly.
  if (n % 2 == 1) out[n / 2] = 0.0;
  return out;
}

TransformParams GridSpec::at(std::size_t index) const {
  if (index >= size()) throw std::out_of_range("GridSpec::at: index outside grid");
  const std::size_t ir = index % n_rot;
  const std::size_t iy = (index / n_rot) % n_ty;
  const std::size_t ix = index / (n_rot * n_ty);
  const auto& h = set.half_range();
  return {grid_axis(h.tx, n_tx)[ix], grid_axis(h.ty, n_ty)[iy], grid_axis(h.theta, n_rot)[ir]};
}

std::vector<TransformParams> GridSpec::points() const {
  const auto& h = set.half_range();
  const auto ax = grid_axis(h.tx, n_tx), ay = grid_axis(h.ty, n_ty), ar = grid_axis(h.theta, n_rot);
  std::vector<TransformParams> out;
  out.reserve(size());
  for (double x : ax)
    for (double y : ay)
      for (double r : ar) out.push_back({x, y, r});
  return out;
}

std::string GridSpec::to_string() const {
  return std::to_string(n_tx) + "x" + std::to_string(n_ty) + "x" + std::to_string(n_rot);
}

GridSpec GridSpec::parse(const std::string& text, const SearchSet& set) {
  std::size_t vals[3];
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    std::size_t start = pos;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
    if (pos == start) throw std::invalid_argument("grid '" + text + "': expected a count at position " + std::to_string(pos));
    vals[i] = std::stoul(text.substr(start, pos - start));
    if (vals[i] == 0) throw std::invalid_argument("grid '" + text + "': counts must be positive");
    if (i < 2) {
      if (pos >= text.size() || (text[pos] != 'x' && text[pos] != 'X')) {
        throw std::invalid_argument("grid '" + text + "': expected 'x' at position " + std::to_string(pos));
      }
      ++pos;
    }
  }
  if (pos != text.size()) throw std::invalid_argument("grid '" + text + "': trailing characters at position " + std::to_string(pos));
  return {vals[0], vals[1], vals[2], set};
}

namespace {

void finish(AttackReport& report) {
  std::size_t nat = 0, grid = 0;
  for (const auto& e : report.examples) {
    nat += e.natural_correct;
    grid += e.grid_correct;
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, report.examples.size()));
  report.natural_accuracy = static_cast<double>(nat) / n;
  report.grid_accuracy = static_cast<double>(grid) / n;
}

}  // namespace

AttackReport grid_attack(const Classifier& model, const Dataset& data, std::span<const GridSpec> grids,
                         const AttackOptions& options) {
  if (grids.empty()) throw std::invalid_argument("grid_attack: no grid");
  std::vector<TransformParams> cands;
  AttackReport report;
  for (const auto& g : grids) {
    if (g.size() == 0) throw std::invalid_argument("grid_attack: empty grid");
    const auto pts = g.points();
    cands.insert(cands.end(), pts.begin(), pts.end());
    report.grid += (report.grid.empty() ? "" : "+") + g.to_string();
  }
  report.candidates_per_example = cands.size();
  report.examples.resize(data.size());
  const std::size_t p = model.classes();
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk);

  parallel_for(data.size(), options.threads, [&](std::size_t i) {
    ExampleResult r;
    r.index = i;
    r.label = data.labels[i];
    const Tensor image = data.image(i);
    const Tensor clean = model.logits(image);
    r.natural_correct = argmax(clean.values()) == r.label;
    bool any_wrong = false;
    double best_wrong = -std::numeric_limits<double>::infinity();
    double best_all = -std::numeric_limits<double>::infinity();
    TransformParams wrong_delta, all_delta;
    for (std::size_t start = 0; start < cands.size(); start += chunk) {
      const std::size_t n = std::min(chunk, cands.size() - start);
      const auto logits = candidate_logits(model, image, std::span(cands).subspan(start, n), options.pad);
      for (std::size_t c = 0; c < n; ++c) {
        const std::span<const double> row(logits.data() + c * p, p);
        const double loss = ce_value(row, r.label);
        const bool wrong = argmax(row) != r.label;
        if (loss > best_all) best_all = loss, all_delta = cands[start + c];
        if (wrong && loss > best_wrong) best_wrong = loss, wrong_delta = cands[start + c];
        any_wrong = any_wrong || wrong;
      }
      r.evaluated = start + n;
      if (options.early_stop && any_wrong) break;
    }
    r.grid_correct = !any_wrong;
    r.worst_delta = any_wrong ? wrong_delta : all_delta;
    r.worst_loss = any_wrong ? best_wrong : best_all;
    report.examples[i] = r;
  });
  finish(report);
  return report;
}

AttackReport grid_attack(const Classifier& model, const Dataset& data, const GridSpec& grid,
                         const AttackOptions& options) {
  return grid_attack(model, data, std::span<const GridSpec>(&grid, 1), options);
}

AttackReport spgd_attack(const Classifier& model, const Dataset& data, const SearchSet& set, std::size_t steps,
                         const TransformParams& step_sizes, std::uint64_t seed, const AttackOptions& options) {
  AttackReport report;
  report.grid = "spgd" + std::to_string(steps);
  report.candidates_per_example = steps + 1;
  report.examples.resize(data.size());
  const SearchContext ctx{&model, set, options.pad};
  const SeedStream stream = SeedStream(seed).named("attack");
  parallel_for(data.size(), options.threads, [&](std::size_t i) {
    ExampleResult r;
    r.index = i;
    r.label = data.labels[i];
    const Tensor image = data.image(i);
    const Tensor clean = model.logits(image);
    r.natural_correct = argmax(clean.values()) == r.label;
    const auto trace = spgd_trace(ctx, image, r.label, {}, SearchObjective::CE, steps, step_sizes, stream.child(i));
    // The attacker wins with any misclassified iterate, the identity included.
    bool correct = r.natural_correct;
    for (const auto& l : trace.logits) correct = correct && argmax(l) == r.label;
    r.grid_correct = correct;
    r.worst_delta = trace.best.delta;
    r.worst_loss = trace.best.value;
    r.evaluated = trace.logits.size();
    report.examples[i] = r;
  });
  finish(report);
  return report;
}

std::vector<std::vector<std::uint8_t>> per_angle_map(const Classifier& model, const Dataset& data,
                                                     std::size_t n_angles, const SearchSet& set,
                                                     const AttackOptions& options) {
  if (n_angles == 0) throw std::invalid_argument("per_angle_map: n_angles must be positive");
  std::vector<TransformParams> cands;
  for (double a : grid_axis(set.half_range().theta, n_angles)) cands.push_back({0.0, 0.0, a});
  std::vector<std::vector<std::uint8_t>> bitmap(data.size());
  const std::size_t p = model.classes();
  parallel_for(data.size(), options.threads, [&](std::size_t i) {
    const auto logits = candidate_logits(model, data.image(i), cands, options.pad);
    auto& row = bitmap[i];
    row.resize(cands.size());
    for (std::size_t a = 0; a < cands.size(); ++a) {
      row[a] = argmax(std::span<const double>(logits.data() + a * p, p)) != data.labels[i];
    }
  });
  return bitmap;
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_report_json(const AttackReport& report, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["grid"] = report.grid;
  j["candidates_per_example"] = report.candidates_per_example;
  j["examples_count"] = report.examples.size();
  j["natural_accuracy"] = report.natural_accuracy;
  j["grid_accuracy"] = report.grid_accuracy;
  auto& rows = j["examples"] = nlohmann::ordered_json::array();
  for (const auto& e : report.examples) {
    rows.push_back({{"index", e.index},
                    {"label", e.label},
                    {"nat_correct", e.natural_correct},
                    {"grid_correct", e.grid_correct},
                    {"worst_tx", e.worst_delta.tx},
                    {"worst_ty", e.worst_delta.ty},
                    {"worst_theta_deg", e.worst_delta.theta * kDeg},
                    {"worst_loss", e.worst_loss},
                    {"evaluated", e.evaluated}});
  }
  open_out(path) << j.dump(2) << "\n";
}

void write_report_csv(const AttackReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "index,nat_correct,grid_correct,worst_tx,worst_ty,worst_theta_deg,worst_loss\n";
  for (const auto& e : report.examples) {
    out << e.index << ',' << int{e.natural_correct} << ',' << int{e.grid_correct} << ',' << fmt(e.worst_delta.tx)
        << ',' << fmt(e.worst_delta.ty) << ',' << fmt(e.worst_delta.theta * kDeg) << ',' << fmt(e.worst_loss) << '\n';
  }
}

void write_angle_map_csv(const std::vector<std::vector<std::uint8_t>>& bitmap, std::span<const double> angles_deg,
                         const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "index";
  for (double a : angles_deg) out << ',' << fmt(a);
  out << '\n';
  for (std::size_t i = 0; i < bitmap.size(); ++i) {
    out << i;
    for (auto b : bitmap[i]) out << ',' << int{b};
    out << '\n';
  }
}

}  // namespace invreg
