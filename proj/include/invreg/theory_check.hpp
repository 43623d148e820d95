#pragma once

// Finite, exactly solvable instances of the robust-vs-natural loss framework:
// a finite support partitioned into transformation sets, free logits per
// point, exact losses, a descent minimizer and a brute-force grid oracle.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace invreg {

struct TabularProblem {
  std::size_t classes = 2;
  std::vector<std::size_t> cell;                 // cell index of each point
  std::vector<double> marginal;                  // P(x_i)
  std::vector<std::vector<double>> conditional;  // P(Y | x_i), one row per point

  std::size_t points() const { return cell.size(); }
  std::size_t cells() const;
  std::vector<std::vector<std::size_t>> cell_members() const;
  /// Throws std::invalid_argument on malformed input.
  void validate() const;
  /// P(Y|x) identical (within eps) for all points of every cell.
  bool conditionally_independent(double eps = 1e-12) const;
  /// Every point has a one-hot conditional.
  bool deterministic_cell(std::size_t c) const;
  std::uint64_t hash() const;
};

struct RandomProblemOptions {
  std::size_t max_cells = 3;
  std::size_t max_points = 4;
  std::size_t min_classes = 2;
  std::size_t max_classes = 3;
  bool conditionally_independent = false;
  double deterministic_probability = 0.3;  // chance a label row (or cell) is one-hot
};
TabularProblem random_problem(std::uint64_t seed, const RandomProblemOptions& options = {});

struct TabularPredictor {
  std::size_t classes = 2;
  std::vector<double> logits;  // points x classes

  std::span<const double> row(std::size_t i) const { return std::span(logits).subspan(i * classes, classes); }
};

double natural_loss(const TabularProblem& problem, const TabularPredictor& f);
double robust_loss(const TabularProblem& problem, const TabularPredictor& f);

/// Largest sup-norm difference between mean-centered logits of two points in one cell.
double invariance_violation(const TabularProblem& problem, const TabularPredictor& f,
                            std::optional<std::size_t> only_cell = std::nullopt);

enum class Method { Descent, Brute };
enum class LossKind { Robust, Natural };

inline constexpr double kLogitBox = 5.0;
inline constexpr double kGridStep = 0.25;
inline constexpr std::size_t kBruteMaxFree = 8;

struct MinimizeOptions {
  double gradient_tolerance = 1e-7;
  std::size_t max_iterations = 50000;  // per temperature
  // Descent starts uniformly in [-s, s], seeded by the problem hash. Starting
  // at the origin would keep the points of a cell equal by symmetry alone.
  double start_spread = 2.0;
};

struct MinimizeResult {
  TabularPredictor f;
  double loss = 0.0;
  bool converged = false;
  double gradient_norm = 0.0;
  std::size_t iterations = 0;
};

/// Descent: projected gradient descent with backtracking over the logit box,
/// on a log-sum-exp smoothed max with decreasing temperature (1 .. 1e-3), run
/// until the projected gradient norm drops below the tolerance.
/// Brute: exhaustive search over logit vectors on the 0.25 grid; refuses
/// problems with more than 8 free logits.
MinimizeResult minimize(const TabularProblem& problem, LossKind loss, Method method,
                        const MinimizeOptions& options = {});
MinimizeResult minimize_robust(const TabularProblem& problem, Method method, const MinimizeOptions& options = {});
MinimizeResult minimize_natural(const TabularProblem& problem, Method method, const MinimizeOptions& options = {});

enum class CertificateStatus { Pass, Fail, Refused, Inconclusive };
std::string to_string(CertificateStatus status);

struct Certificate {
  int theorem = 1;
  CertificateStatus status = CertificateStatus::Inconclusive;
  std::uint64_t problem_hash = 0;
  double tolerance = 0.0;
  double invariance_violation = 0.0;
  double descent_loss = 0.0;
  std::optional<double> brute_loss;
  double natural_gap = 0.0;
  std::optional<double> converse_violation;  // natural minimizer on deterministic cells
  std::string note;

  std::string to_json() const;
};

/// Pass iff the descent minimizer of the robust loss is invariant within tol
/// and, when the brute oracle is feasible, not worse than it by more than tol.
Certificate check_theorem1(const TabularProblem& problem, double tol);

/// Refused unless conditionally independent. Pass iff the robust minimizer's
/// natural loss exceeds the natural minimum by less than tol; the converse
/// (natural minimizers are invariant) is checked on deterministic cells only.
Certificate check_theorem2(const TabularProblem& problem, double tol);

}  // namespace invreg
