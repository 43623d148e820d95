#include "invreg/theory_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "invreg/rng.hpp"

namespace invreg {

std::size_t TabularProblem::cells() const {
  return cell.empty() ? 0 : *std::max_element(cell.begin(), cell.end()) + 1;
}

std::vector<std::vector<std::size_t>> TabularProblem::cell_members() const {
  std::vector<std::vector<std::size_t>> out(cells());
  for (std::size_t i = 0; i < cell.size(); ++i) out[cell[i]].push_back(i);
  return out;
}

void TabularProblem::validate() const {
  if (classes < 2) throw std::invalid_argument("tabular problem: need at least two classes");
  if (cell.empty()) throw std::invalid_argument("tabular problem: no points");
  if (marginal.size() != cell.size() || conditional.size() != cell.size()) {
    throw std::invalid_argument("tabular problem: cell, marginal and conditional sizes differ");
  }
  for (const auto& members : cell_members()) {
    if (members.empty()) throw std::invalid_argument("tabular problem: cell indices must be contiguous from 0");
  }
  double total = 0.0;
  for (double m : marginal) {
    if (!(m >= 0.0) || !std::isfinite(m)) throw std::invalid_argument("tabular problem: negative or non-finite marginal");
    total += m;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("tabular problem: marginals must sum to 1");
  for (const auto& row : conditional) {
    if (row.size() != classes) throw std::invalid_argument("tabular problem: conditional row has the wrong length");
    double s = 0.0;
    for (double q : row) {
      if (!(q >= 0.0) || !std::isfinite(q)) throw std::invalid_argument("tabular problem: negative conditional");
      s += q;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("tabular problem: conditional rows must sum to 1");
  }
}

bool TabularProblem::conditionally_independent(double eps) const {
  for (const auto& members : cell_members()) {
    for (auto i : members) {
      for (std::size_t c = 0; c < classes; ++c) {
        if (std::abs(conditional[i][c] - conditional[members.front()][c]) > eps) return false;
      }
    }
  }
  return true;
}

bool TabularProblem::deterministic_cell(std::size_t c) const {
  for (std::size_t i = 0; i < cell.size(); ++i) {
    if (cell[i] != c) continue;
    if (std::none_of(conditional[i].begin(), conditional[i].end(), [](double q) { return q == 1.0; })) return false;
  }
  return true;
}

std::uint64_t TabularProblem::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t dims[2] = {classes, cell.size()};
  mix(dims, sizeof dims);
  for (std::size_t i = 0; i < cell.size(); ++i) {
    const std::uint64_t c = cell[i];
    mix(&c, sizeof c);
    mix(&marginal[i], sizeof(double));
    mix(conditional[i].data(), conditional[i].size() * sizeof(double));
  }
  return h;
}

namespace {

std::vector<double> random_distribution(Rng& rng, std::size_t p, double deterministic_probability) {
  std::vector<double> q(p, 0.0);
  if (rng.bernoulli(deterministic_probability)) {
    q[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(p) - 1))] = 1.0;
    return q;
  }
  double s = 0.0;
  for (auto& v : q) s += (v = 0.05 + rng.uniform());
  for (auto& v : q) v /= s;
  return q;
}

}  // namespace

TabularProblem random_problem(std::uint64_t seed, const RandomProblemOptions& options) {
  Rng rng(SeedStream(seed).named("tabular"));
  TabularProblem p;
  p.classes = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long>(options.min_classes), static_cast<long>(options.max_classes)));
  const auto k = static_cast<std::size_t>(rng.uniform_int(1, static_cast<long>(options.max_cells)));
  const auto m = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long>(std::min(k, options.max_points)), static_cast<long>(options.max_points)));
  const std::size_t cells = std::min(k, m);
  for (std::size_t i = 0; i < m; ++i) {
    p.cell.push_back(i < cells ? i : static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(cells) - 1)));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    p.marginal.push_back(0.05 + rng.uniform());
    s += p.marginal.back();
  }
  for (auto& v : p.marginal) v /= s;
  std::vector<std::vector<double>> per_cell;
  for (std::size_t c = 0; c < cells; ++c) per_cell.push_back(random_distribution(rng, p.classes, options.deterministic_probability));
  for (std::size_t i = 0; i < m; ++i) {
    p.conditional.push_back(options.conditionally_independent
                                ? per_cell[p.cell[i]]
                                : random_distribution(rng, p.classes, options.deterministic_probability));
  }
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------

namespace {

double lse(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

double ce(std::span<const double> f, std::size_t c) { return lse(f) - f[c]; }

/// Per cell and class: total weight sum_{x in cell} P(x) P(c|x).
std::vector<std::vector<double>> cell_weights(const TabularProblem& p) {
  std::vector<std::vector<double>> w(p.cells(), std::vector<double>(p.classes, 0.0));
  for (std::size_t i = 0; i < p.points(); ++i) {
    for (std::size_t c = 0; c < p.classes; ++c) w[p.cell[i]][c] += p.marginal[i] * p.conditional[i][c];
  }
  return w;
}

void check_shapes(const TabularProblem& p, const TabularPredictor& f) {
  if (f.classes != p.classes || f.logits.size() != p.points() * p.classes) {
    throw std::invalid_argument("tabular predictor does not match the problem");
  }
}

}  // namespace

double natural_loss(const TabularProblem& problem, const TabularPredictor& f) {
  check_shapes(problem, f);
  double total = 0.0;
  for (std::size_t i = 0; i < problem.points(); ++i) {
    for (std::size_t c = 0; c < problem.classes; ++c) {
      if (problem.conditional[i][c] != 0.0) total += problem.marginal[i] * problem.conditional[i][c] * ce(f.row(i), c);
    }
  }
  return total;
}

double robust_loss(const TabularProblem& problem, const TabularPredictor& f) {
  check_shapes(problem, f);
  const auto members = problem.cell_members();
  double total = 0.0;
  for (std::size_t i = 0; i < problem.points(); ++i) {
    for (std::size_t c = 0; c < problem.classes; ++c) {
      if (problem.conditional[i][c] == 0.0) continue;
      double worst = -std::numeric_limits<double>::infinity();
      for (auto j : members[problem.cell[i]]) worst = std::max(worst, ce(f.row(j), c));
      total += problem.marginal[i] * problem.conditional[i][c] * worst;
    }
  }
  return total;
}

double invariance_violation(const TabularProblem& problem, const TabularPredictor& f,
                            std::optional<std::size_t> only_cell) {
  check_shapes(problem, f);
  const std::size_t p = problem.classes;
  auto centered = [&](std::size_t i) {
    const auto r = f.row(i);
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(p);
    std::vector<double> out(r.begin(), r.end());
    for (auto& v : out) v -= mean;
    return out;
  };
  double worst = 0.0;
  const auto members = problem.cell_members();
  for (std::size_t c = 0; c < members.size(); ++c) {
    if (only_cell && *only_cell != c) continue;
    for (std::size_t a = 0; a < members[c].size(); ++a) {
      const auto fa = centered(members[c][a]);
      for (std::size_t b = a + 1; b < members[c].size(); ++b) {
        const auto fb = centered(members[c][b]);
        for (std::size_t k = 0; k < p; ++k) worst = std::max(worst, std::abs(fa[k] - fb[k]));
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Descent

namespace {

class SmoothedObjective {
 public:
  SmoothedObjective(const TabularProblem& p, LossKind kind)
      : p_(p), kind_(kind), members_(p.cell_members()), w_(cell_weights(p)) {}

  void set_temperature(double t) { t_ = t; }

  /// Value and gradient at logits x.
  double eval(std::span<const double> x, std::vector<double>* grad) const {
    const std::size_t np = p_.classes;
    if (grad) grad->assign(x.size(), 0.0);
    std::vector<double> soft(np);
    auto softmax = [&](std::size_t i) {
      const auto r = x.subspan(i * np, np);
      const double z = lse(r);
      for (std::size_t k = 0; k < np; ++k) soft[k] = std::exp(r[k] - z);
    };
    double total = 0.0;
    if (kind_ == LossKind::Natural) {
      for (std::size_t i = 0; i < p_.points(); ++i) {
        const auto r = x.subspan(i * np, np);
        const double z = lse(r);
        for (std::size_t c = 0; c < np; ++c) {
          const double q = p_.marginal[i] * p_.conditional[i][c];
          if (q != 0.0) total += q * (z - r[c]);
        }
        if (grad) {
          softmax(i);
          for (std::size_t k = 0; k < np; ++k) (*grad)[i * np + k] += p_.marginal[i] * (soft[k] - p_.conditional[i][k]);
        }
      }
      return total;
    }
    for (std::size_t cell = 0; cell < members_.size(); ++cell) {
      const auto& mem = members_[cell];
      std::vector<double> a(mem.size()), pi(mem.size());
      for (std::size_t c = 0; c < np; ++c) {
        const double wc = w_[cell][c];
        if (wc == 0.0) continue;
        for (std::size_t j = 0; j < mem.size(); ++j) a[j] = ce(x.subspan(mem[j] * np, np), c);
        // Temperature-smoothed max; equal values give equal weights.
        const double amax = *std::max_element(a.begin(), a.end());
        double s = 0.0;
        for (std::size_t j = 0; j < mem.size(); ++j) s += (pi[j] = std::exp((a[j] - amax) / t_));
        total += wc * (amax + t_ * std::log(s));
        if (!grad) continue;
        for (std::size_t j = 0; j < mem.size(); ++j) {
          softmax(mem[j]);
          const double coef = wc * pi[j] / s;
          for (std::size_t k = 0; k < np; ++k) (*grad)[mem[j] * np + k] += coef * (soft[k] - (k == c ? 1.0 : 0.0));
        }
      }
    }
    return total;
  }

 private:
  const TabularProblem& p_;
  LossKind kind_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<std::vector<double>> w_;
  double t_ = 1.0;
};

double clampbox(double v) { return std::clamp(v, -kLogitBox, kLogitBox); }

double projected_gradient_norm(std::span<const double> x, std::span<const double> g) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - clampbox(x[i] - g[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

struct DescentState {
  std::vector<double> x;
  bool converged = false;
  double pg = 0.0;
  std::size_t iterations = 0;
};

/// Projected gradient with Barzilai-Borwein trial steps and Armijo backtracking.
void descend(const SmoothedObjective& obj, DescentState& st, double tol, std::size_t max_iter) {
  std::vector<double> g, g_new, x_new(st.x.size());
  double f = obj.eval(st.x, &g);
  double alpha = 1.0;
  st.converged = false;
  for (std::size_t it = 0; it < max_iter; ++it) {
    st.pg = projected_gradient_norm(st.x, g);
    if (st.pg < tol) {
      st.converged = true;
      return;
    }
    ++st.iterations;
    bool accepted = false;
    double f_new = 0.0;
    for (int halving = 0; halving < 80; ++halving) {
      double decrease = 0.0;
      for (std::size_t i = 0; i < st.x.size(); ++i) {
        x_new[i] = clampbox(st.x[i] - alpha * g[i]);
        decrease += g[i] * (x_new[i] - st.x[i]);
      }
      f_new = obj.eval(x_new, nullptr);
      if (f_new <= f + 1e-4 * decrease) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      // Rounding floor reached before the tolerance.
      st.pg = projected_gradient_norm(st.x, g);
      return;
    }
    obj.eval(x_new, &g_new);
    double ss = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < st.x.size(); ++i) {
      const double s = x_new[i] - st.x[i], y = g_new[i] - g[i];
      ss += s * s;
      sy += s * y;
    }
    alpha = sy > 0.0 ? std::clamp(ss / sy, 1e-10, 1e10) : 1.0;
    st.x.swap(x_new);
    g.swap(g_new);
    f = f_new;
  }
  st.pg = projected_gradient_norm(st.x, g);
}

// ---------------------------------------------------------------------------
// Brute force

/// Logit vectors on the grid, one per shift class: first entry 0, others in
/// [-2B, 2B] with range at most 2B (so a shift fits the box [-B, B]).
std::vector<std::vector<double>> grid_vectors(std::size_t p) {
  const long span = static_cast<long>(std::lround(2.0 * kLogitBox / kGridStep));
  std::vector<std::vector<double>> out;
  std::vector<long> idx(p, 0);
  std::vector<long> free(p - 1, -span);
  for (;;) {
    long lo = 0, hi = 0;
    for (long v : free) lo = std::min(lo, v), hi = std::max(hi, v);
    if (hi - lo <= span) {
      std::vector<double> v(p, 0.0);
      for (std::size_t k = 1; k < p; ++k) v[k] = static_cast<double>(free[k - 1]) * kGridStep;
      // Shift into the box so the predictor is feasible as stored.
      const double shift = -(static_cast<double>(lo + hi) * kGridStep) / 2.0;
      for (auto& e : v) e += shift;
      out.push_back(std::move(v));
    }
    std::size_t k = 0;
    while (k < free.size() && ++free[k] > span) free[k++] = -span;
    if (k == free.size()) break;
  }
  return out;
}

MinimizeResult brute(const TabularProblem& problem, LossKind kind) {
  const std::size_t np = problem.classes;
  if (problem.points() * np > kBruteMaxFree) {
    throw std::invalid_argument("brute force limited to " + std::to_string(kBruteMaxFree) + " free logits, problem has " +
                                std::to_string(problem.points() * np));
  }
  const auto grid = grid_vectors(np);
  std::vector<double> table(grid.size() * np);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    for (std::size_t c = 0; c < np; ++c) table[g * np + c] = ce(grid[g], c);
  }
  MinimizeResult r;
  r.f.classes = np;
  r.f.logits.assign(problem.points() * np, 0.0);
  r.converged = true;
  auto assign = [&](std::size_t point, std::size_t g) {
    std::copy(grid[g].begin(), grid[g].end(), r.f.logits.begin() + static_cast<std::ptrdiff_t>(point * np));
  };

  if (kind == LossKind::Natural) {
    for (std::size_t i = 0; i < problem.points(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t g = 0; g < grid.size(); ++g) {
        double v = 0.0;
        for (std::size_t c = 0; c < np; ++c) v += problem.conditional[i][c] * table[g * np + c];
        if (v < best) best = v, arg = g;
        ++r.iterations;
      }
      assign(i, arg);
    }
  } else {
    const auto w = cell_weights(problem);
    const auto members = problem.cell_members();
    for (std::size_t cell = 0; cell < members.size(); ++cell) {
      const std::size_t s = members[cell].size();
      // The cell's robust loss is symmetric in its points' logits, so
      // nondecreasing index tuples cover every value.
      std::vector<std::size_t> t(s, 0), best_t(s, 0);
      double best = std::numeric_limits<double>::infinity();
      for (;;) {
        double v = 0.0;
        for (std::size_t c = 0; c < np; ++c) {
          if (w[cell][c] == 0.0) continue;
          double worst = table[t[0] * np + c];
          for (std::size_t j = 1; j < s; ++j) worst = std::max(worst, table[t[j] * np + c]);
          v += w[cell][c] * worst;
        }
        if (v < best) best = v, best_t = t;
        ++r.iterations;
        std::size_t k = s;
        while (k > 0 && t[k - 1] == grid.size() - 1) --k;
        if (k == 0) break;
        ++t[k - 1];
        for (std::size_t j = k; j < s; ++j) t[j] = t[k - 1];
      }
      for (std::size_t j = 0; j < s; ++j) assign(members[cell][j], best_t[j]);
    }
  }
  r.loss = kind == LossKind::Robust ? robust_loss(problem, r.f) : natural_loss(problem, r.f);
  return r;
}

}  // namespace

MinimizeResult minimize(const TabularProblem& problem, LossKind loss, Method method, const MinimizeOptions& options) {
  problem.validate();
  if (method == Method::Brute) return brute(problem, loss);

  SmoothedObjective obj(problem, loss);
  DescentState st;
  st.x.assign(problem.points() * problem.classes, 0.0);
  if (options.start_spread > 0.0) {
    Rng rng(SeedStream(problem.hash()).named("descent-start"));
    for (auto& v : st.x) v = clampbox(rng.uniform(-options.start_spread, options.start_spread));
  }
  if (loss == LossKind::Natural) {
    descend(obj, st, options.gradient_tolerance, options.max_iterations);
  } else {
    const double temps[] = {1.0, 0.1, 0.01, 0.001};
    for (double t : temps) {
      obj.set_temperature(t);
      descend(obj, st, t == 0.001 ? options.gradient_tolerance : 1e-6, options.max_iterations);
    }
  }
  MinimizeResult r;
  r.f.classes = problem.classes;
  r.f.logits = st.x;
  r.converged = st.converged;
  r.gradient_norm = st.pg;
  r.iterations = st.iterations;
  r.loss = loss == LossKind::Robust ? robust_loss(problem, r.f) : natural_loss(problem, r.f);
  return r;
}

MinimizeResult minimize_robust(const TabularProblem& problem, Method method, const MinimizeOptions& options) {
  return minimize(problem, LossKind::Robust, method, options);
}

MinimizeResult minimize_natural(const TabularProblem& problem, Method method, const MinimizeOptions& options) {
  return minimize(problem, LossKind::Natural, method, options);
}

// ---------------------------------------------------------------------------

std::string to_string(CertificateStatus status) {
  switch (status) {
    case CertificateStatus::Pass:
      return "pass";
    case CertificateStatus::Fail:
      return "fail";
    case CertificateStatus::Refused:
      return "refused";
    case CertificateStatus::Inconclusive:
      return "inconclusive";
  }
  return "?";
}

std::string Certificate::to_json() const {
  char hash[19];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(problem_hash));
  nlohmann::ordered_json j;
  j["theorem"] = theorem;
  j["status"] = to_string(status);
  j["problem_hash"] = hash;
  j["tolerance"] = tolerance;
  j["invariance_violation"] = invariance_violation;
  j["descent_loss"] = descent_loss;
  j["brute_loss"] = brute_loss ? nlohmann::ordered_json(*brute_loss) : nlohmann::ordered_json(nullptr);
  j["natural_gap"] = natural_gap;
  j["converse_violation"] = converse_violation ? nlohmann::ordered_json(*converse_violation) : nlohmann::ordered_json(nullptr);
  j["note"] = note;
  return j.dump();
}

Certificate check_theorem1(const TabularProblem& problem, double tol) {
  problem.validate();
  Certificate cert;
  cert.theorem = 1;
  cert.problem_hash = problem.hash();
  cert.tolerance = tol;
  const auto d = minimize_robust(problem, Method::Descent);
  cert.descent_loss = d.loss;
  cert.invariance_violation = invariance_violation(problem, d.f);
  if (!d.converged) {
    cert.status = CertificateStatus::Inconclusive;
    cert.note = "descent stopped at projected gradient norm " + std::to_string(d.gradient_norm);
    return cert;
  }
  bool ok = cert.invariance_violation < tol;
  if (problem.points() * problem.classes <= kBruteMaxFree) {
    const auto b = minimize_robust(problem, Method::Brute);
    cert.brute_loss = b.loss;
    ok = ok && d.loss <= b.loss + tol;
    // The grid oracle can only lose by its resolution.
    if (b.loss > d.loss + kGridStep) {
      ok = false;
      cert.note = "brute-force oracle further from descent than the grid resolution allows";
    }
  }
  cert.status = ok ? CertificateStatus::Pass : CertificateStatus::Fail;
  return cert;
}

Certificate check_theorem2(const TabularProblem& problem, double tol) {
  problem.validate();
  Certificate cert;
  cert.theorem = 2;
  cert.problem_hash = problem.hash();
  cert.tolerance = tol;
  if (!problem.conditionally_independent()) {
    cert.status = CertificateStatus::Refused;
    cert.note = "labels are not conditionally independent of the point given its cell";
    return cert;
  }
  const auto r = minimize_robust(problem, Method::Descent);
  const auto n = minimize_natural(problem, Method::Descent);
  cert.descent_loss = r.loss;
  cert.invariance_violation = invariance_violation(problem, r.f);
  cert.natural_gap = natural_loss(problem, r.f) - n.loss;
  if (!r.converged || !n.converged) {
    cert.status = CertificateStatus::Inconclusive;
    cert.note = "descent did not reach the gradient tolerance";
    return cert;
  }
  bool ok = cert.natural_gap < tol && cert.natural_gap > -tol;
  double converse = 0.0;
  bool any = false;
  for (std::size_t c = 0; c < problem.cells(); ++c) {
    if (!problem.deterministic_cell(c)) continue;
    any = true;
    converse = std::max(converse, invariance_violation(problem, n.f, c));
  }
  if (any) {
    cert.converse_violation = converse;
    ok = ok && converse < tol;
  }
  cert.status = ok ? CertificateStatus::Pass : CertificateStatus::Fail;
  return cert;
}

}  // namespace invreg
