#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace crae {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation; zero-filled on allocation
  bool requires_grad = false;
  bool leaf = true;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense n-dimensional array of 64-bit reals, row-major. A Tensor is a cheap
/// shared handle; values are treated as immutable after construction except
/// for parameter updates applied between tapes.
class Tensor {
 public:
  Tensor() = default;

  /// Leaf constructor. Throws std::invalid_argument if product(shape) does
  /// not match values.size() or any value is non-finite. Leaves that require
  /// grad get a zero gradient buffer up front, so untouched leaves read back
  /// zero after backward.
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar_value(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->values.size(); }
  /// Extents for the common 2-D case.
  std::size_t rows() const;
  std::size_t cols() const;

  const std::vector<double>& values() const { return node_->values; }
  double scalar() const;  // numel() must be 1
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient read access; zero vector semantics for never-touched leaves are
  /// guaranteed by the eager allocation in the constructor.
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Same values, detached from gradient tracking.
  Tensor detach() const;

  // Mutable access for the optimizer, checkpoint loading and op backward
  // rules. Not for general use.
  std::vector<double>& mutable_values() { return node_->values; }
  std::vector<double>& grad_buffer() { return node_->ensure_grad(); }
  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

  friend Tensor make_op(Shape out_shape, std::vector<double> out_values,
                        std::vector<Tensor> inputs,
                        std::function<void(const std::vector<double>&, std::vector<Tensor>&)>
                            backward);

  std::shared_ptr<detail::TensorNode> node_;
};

/// Records one forward pass as an ordered list of backward steps. Creating a
/// Tape makes it the active recording target for this thread; destroying it
/// restores the previous one. The tape is rebuilt every forward pass, which
/// keeps data-dependent graph structure (per-class head selection) trivially
/// correct.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  /// Seeds d(loss)/d(loss) = 1 and replays the recorded steps exactly once in
  /// reverse order, accumulating gradients by sum over all paths. `loss` must
  /// be scalar.
  void backward(const Tensor& loss);

  std::size_t size() const { return steps_.size(); }

  // Internal: called by op constructors.
  void record(std::function<void()> backward_step);

 private:
  std::vector<std::function<void()>> steps_;
  Tape* previous_ = nullptr;
};

/// Op-author hook: wraps `out_values` in a tensor and, when a tape is active
/// and any input is tracked, records `backward`. The rule receives the output
/// gradient and the inputs and must accumulate into input.grad_buffer().
Tensor make_op(Shape out_shape, std::vector<double> out_values, std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>& out_grad,
                                  std::vector<Tensor>& inputs)>
                   backward);

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

/// out[i,j] = sum_k weight[j,k] * input[i,k] + bias[j].
/// weight: m*n, input: b*n, bias: m -> out: b*m.
Tensor affine(const Tensor& weight, const Tensor& input, const Tensor& bias);

Tensor relu(const Tensor& x);

/// Softmax over the last axis, computed with max-subtraction. Rows of the
/// result sum to 1 within 1e-12 for any finite input.
Tensor softmax(const Tensor& x);

/// Natural log, elementwise. Throws if any entry is not strictly positive.
Tensor log(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);

/// Mean over the batch of -sum_j target[i,j]*ln(pred[i,j]), with pred clamped
/// below at 1e-12 before the log. Both arguments are b*k matrices whose rows
/// must be probability vectors (nonnegative, sum 1 within 1e-6).
/// Differentiable w.r.t. pred, and w.r.t. target when target is tracked.
Tensor cross_entropy(const Tensor& pred, const Tensor& target);

constexpr double kProbEpsilon = 1e-12;

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// One momentum-SGD update: v <- momentum*v + grad; values <- values - lr*v.
/// Throws on size mismatch between values and grad.
void sgd_apply(std::vector<double>& values, const std::vector<double>& grad,
               std::vector<double>& velocity, double learning_rate, double momentum);

/// SGD with classical momentum; velocity persists across steps per parameter.
class SgdOptimizer {
 public:
  SgdOptimizer(double learning_rate, double momentum);

  /// Applies one update to every parameter from its accumulated gradient.
  void step(const std::vector<Tensor>& params);

 private:
  double learning_rate_;
  double momentum_;
  std::unordered_map<const detail::TensorNode*, std::vector<double>> velocity_;
};

void zero_grads(const std::vector<Tensor>& params);

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Compares the reverse-mode gradient of `fn` (scalar-valued) against central
/// differences at `point`, coordinate by coordinate, and returns the largest
/// relative error, |a-n| / max(|a|,|n|,1e-8). `fn` must be deterministic.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  const std::vector<Tensor>& point, double step = 1e-5);

}  // namespace crae
