#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a cheap handle onto shared storage. Operations take a Tape and
// append one entry per primitive application whenever the tape is recording
// and at least one input requires a gradient. Tape::backward replays the
// adjoints in reverse order of recording.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace invreg {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when an operation receives incompatible shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view op, const Shape& a, const Shape& b);
  ShapeError(std::string_view op, const Shape& a, std::string_view detail);

  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  // Spans point into shared storage, so they are not taken from temporaries.
  std::span<const double> values() const&;
  std::span<const double> values() const&& = delete;
  std::span<double> mutable_values() &;
  std::span<double> mutable_values() && = delete;
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const&;
  std::span<const double> grad() const&& = delete;
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<double> grad_buffer() const;
  void zero_grad();

  /// A handle sharing this tensor's values that never tracks gradients.
  Tensor detach() const;
  /// An independent deep copy of values (no gradient, leaf).
  Tensor clone() const;

  bool same_storage(const Tensor& other) const;

 private:
  friend class Tape;
  struct Impl {
    Shape shape;
    std::shared_ptr<std::vector<double>> values;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

/// Ordered record of primitive applications (one per forward pass).
class Tape {
 public:
  enum class Mode { Record, Inference };

  explicit Tape(Mode mode = Mode::Record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return mode_ == Mode::Record; }

  /// True when the op about to be applied to `inputs` must be recorded.
  bool should_record(std::initializer_list<const Tensor*> inputs) const;

  /// Creates the output tensor of an op. It requires a gradient iff the op is recorded.
  Tensor make_output(Shape shape, std::vector<double> values, bool recorded) const;

  using Adjoint = std::function<void(std::span<const double> output_grad)>;
  void record(std::string_view op, Tensor output, Adjoint adjoint);

  /// Populates gradients of every requires-grad ancestor of `loss`.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  std::string_view op_name(std::size_t i) const { return entries_.at(i).op; }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::string op;
    Tensor output;
    Adjoint adjoint;
  };
  Mode mode_;
  std::vector<Entry> entries_;
};

namespace ad {

// Elementwise binary ops accept either identical shapes or a rank-1 `b` whose
// length equals the last extent of `a` (broadcast along the last axis).
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);

/// [N,K] x [K,M] -> [N,M]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

/// NHWC convolution, stride 1, zero "same" padding. `weight` is [KH,KW,Cin,Cout]
/// with odd KH/KW; `bias` is [Cout] or undefined.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(Tape& tape, const Tensor& a);
Tensor exp(Tape& tape, const Tensor& a);

/// 2x2 max pooling with stride 2 over NHWC input; odd trailing rows/cols are dropped.
/// Ties resolve to the first element in row-major window order.
Tensor max_pool2x2(Tape& tape, const Tensor& input);

Tensor reshape(Tape& tape, const Tensor& a, Shape shape);

/// Sum of all elements -> scalar.
Tensor sum(Tape& tape, const Tensor& a);
/// Sum over the last axis: [..., K] -> [...].
Tensor sum_last(Tape& tape, const Tensor& a);
/// Mean of all elements -> scalar.
Tensor mean(Tape& tape, const Tensor& a);

/// Numerically stable log-softmax over the last axis.
Tensor log_softmax(Tape& tape, const Tensor& logits);

}  // namespace ad

struct FiniteDifferenceResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose one-sided slopes disagree (a kink lies inside the stencil).
  std::vector<std::size_t> unreliable;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Scalar function built from primitives on a fresh tape.
using TapeFunction = std::function<Tensor(Tape&, const Tensor&)>;

/// Compares the tape gradient of `f` at `x` with central differences.
/// Relative error per coordinate is |analytic - numeric| / (|numeric| + 1e-12).
FiniteDifferenceResult finite_difference_check(const TapeFunction& f, const Tensor& x,
                                               double step, double kink_tolerance = 1e-2);

}  // namespace invreg
