#include "crae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

#ifdef CRAE_USE_CBLAS
#include <cblas.h>
#endif

namespace crae {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

namespace detail {

std::vector<double>& TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local Tape* g_active_tape = nullptr;

#ifdef CRAE_USE_CBLAS
void pin_blas_threads() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}
#endif

// out = x * W^T, x: b*n, w: m*n, out: b*m (row-major throughout).
void matmul_xwt(const double* x, const double* w, double* out, std::size_t b, std::size_t n,
                std::size_t m) {
#ifdef CRAE_USE_CBLAS
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(b), static_cast<int>(m),
              static_cast<int>(n), 1.0, x, static_cast<int>(n), w, static_cast<int>(n), 0.0, out,
              static_cast<int>(m));
#else
  for (std::size_t i = 0; i < b; ++i) {
    const double* xi = x + i * n;
    for (std::size_t j = 0; j < m; ++j) {
      const double* wj = w + j * n;
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += wj[k] * xi[k];
      out[i * m + j] = acc;
    }
  }
#endif
}

// dx += g * W, g: b*m, w: m*n, dx: b*n.
void matmul_acc_gw(const double* g, const double* w, double* dx, std::size_t b, std::size_t m,
                   std::size_t n) {
#ifdef CRAE_USE_CBLAS
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(b), static_cast<int>(n),
              static_cast<int>(m), 1.0, g, static_cast<int>(m), w, static_cast<int>(n), 1.0, dx,
              static_cast<int>(n));
#else
  for (std::size_t i = 0; i < b; ++i) {
    const double* gi = g + i * m;
    double* dxi = dx + i * n;
    for (std::size_t j = 0; j < m; ++j) {
      const double gij = gi[j];
      if (gij == 0.0) continue;
      const double* wj = w + j * n;
      for (std::size_t k = 0; k < n; ++k) dxi[k] += gij * wj[k];
    }
  }
#endif
}

// dw += g^T * x, g: b*m, x: b*n, dw: m*n.
void matmul_acc_gtx(const double* g, const double* x, double* dw, std::size_t b, std::size_t m,
                    std::size_t n) {
#ifdef CRAE_USE_CBLAS
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(b), 1.0, g, static_cast<int>(m), x, static_cast<int>(n), 1.0, dw,
              static_cast<int>(n));
#else
  for (std::size_t i = 0; i < b; ++i) {
    const double* gi = g + i * m;
    const double* xi = x + i * n;
    for (std::size_t j = 0; j < m; ++j) {
      const double gij = gi[j];
      if (gij == 0.0) continue;
      double* dwj = dw + j * n;
      for (std::size_t k = 0; k < n; ++k) dwj[k] += gij * xi[k];
    }
  }
#endif
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch between operands");
}

std::size_t last_dim(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("operation requires at least one axis");
  return shape.back();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("tensor: product of shape extents (" +
                                std::to_string(shape_numel(shape)) +
                                ") does not match value count (" + std::to_string(values.size()) +
                                ")");
  for (std::size_t d : shape)
    if (d == 0) throw std::invalid_argument("tensor: zero extent in shape");
  for (double v : values)
    if (!std::isfinite(v)) throw std::invalid_argument("tensor: non-finite input value");
  node_ = std::make_shared<detail::TensorNode>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
  node_->leaf = true;
  if (requires_grad) node_->ensure_grad();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar_value(double v) { return Tensor({1}, {v}); }

std::size_t Tensor::rows() const {
  return node_->shape.empty() ? 1 : node_->shape.front();
}

std::size_t Tensor::cols() const {
  if (node_->shape.size() < 2)
    throw std::invalid_argument("cols: tensor has fewer than two axes");
  std::size_t n = 1;
  for (std::size_t i = 1; i < node_->shape.size(); ++i) n *= node_->shape[i];
  return n;
}

double Tensor::scalar() const {
  if (numel() != 1) throw std::invalid_argument("scalar: tensor is not a scalar");
  return node_->values[0];
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(node_->shape, node_->values, /*requires_grad=*/false);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_step) {
  steps_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

Tensor make_op(Shape out_shape, std::vector<double> out_values, std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>&, std::vector<Tensor>&)> backward) {
  if (shape_numel(out_shape) != out_values.size())
    throw std::invalid_argument("make_op: output shape/value mismatch");
  bool tracked = false;
  for (const Tensor& in : inputs) tracked = tracked || (in.defined() && in.requires_grad());

  // Bypass the leaf constructor's finiteness scan; op outputs inherit
  // whatever the forward rule produced.
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(out_shape);
  node->values = std::move(out_values);
  Tensor out(std::move(node));

  Tape* tape = Tape::active();
  if (tape != nullptr && tracked) {
    out.node()->requires_grad = true;
    out.node()->leaf = false;
    auto out_node = out.node();
    tape->record([out_node, ins = std::move(inputs), rule = std::move(backward)]() mutable {
      if (out_node->grad.empty()) return;  // output not on any path from the loss
      rule(out_node->grad, ins);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor affine(const Tensor& weight, const Tensor& input, const Tensor& bias) {
  if (weight.shape().size() != 2 || input.shape().size() != 2 || bias.shape().size() != 1)
    throw std::invalid_argument("affine: weight must be 2-D, input 2-D, bias 1-D");
  const std::size_t m = weight.shape()[0];
  const std::size_t n = weight.shape()[1];
  const std::size_t b = input.shape()[0];
  if (input.shape()[1] != n)
    throw std::invalid_argument("affine: input width " + std::to_string(input.shape()[1]) +
                                " does not match weight width " + std::to_string(n));
  if (bias.shape()[0] != m)
    throw std::invalid_argument("affine: bias length does not match weight height");

  std::vector<double> out(b * m);
  matmul_xwt(input.values().data(), weight.values().data(), out.data(), b, n, m);
  for (std::size_t i = 0; i < b; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) row[j] += bias.values()[j];
  }

  return make_op(
      {b, m}, std::move(out), {weight, input, bias},
      [b, m, n](const std::vector<double>& g, std::vector<Tensor>& ins) {
        Tensor& w = ins[0];
        Tensor& x = ins[1];
        Tensor& bs = ins[2];
        if (w.requires_grad())
          matmul_acc_gtx(g.data(), x.values().data(), w.grad_buffer().data(), b, m, n);
        if (x.requires_grad())
          matmul_acc_gw(g.data(), w.values().data(), x.grad_buffer().data(), b, m, n);
        if (bs.requires_grad()) {
          auto& db = bs.grad_buffer();
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < m; ++j) db[j] += g[i * m + j];
        }
      });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values());
  for (double& v : out)
    if (v < 0.0) v = 0.0;
  return make_op(x.shape(), std::move(out), {x},
                 [](const std::vector<double>& g, std::vector<Tensor>& ins) {
                   Tensor& in = ins[0];
                   if (!in.requires_grad()) return;
                   auto& dx = in.grad_buffer();
                   const auto& v = in.values();
                   // Subgradient 0 at the kink.
                   for (std::size_t i = 0; i < g.size(); ++i)
                     if (v[i] > 0.0) dx[i] += g[i];
                 });
}

Tensor softmax(const Tensor& x) {
  const std::size_t k = last_dim(x.shape());
  const std::size_t rows = x.numel() / k;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = x.values().data() + i * k;
    double* o = out.data() + i * k;
    double mx = in[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, in[j]);
    if (!std::isfinite(mx)) throw std::invalid_argument("softmax: non-finite input");
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= sum;
  }
  return make_op({x.shape()}, std::move(out), {x},
                 [k, rows](const std::vector<double>& g, std::vector<Tensor>& ins) {
                   Tensor& in = ins[0];
                   if (!in.requires_grad()) return;
                   auto& dx = in.grad_buffer();
                   // Recompute the forward values row by row; cheaper than
                   // holding a second copy of every softmax output alive.
                   const auto& v = in.values();
                   std::vector<double> y(k);
                   for (std::size_t i = 0; i < rows; ++i) {
                     const double* row = v.data() + i * k;
                     double mx = row[0];
                     for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
                     double sum = 0.0;
                     for (std::size_t j = 0; j < k; ++j) {
                       y[j] = std::exp(row[j] - mx);
                       sum += y[j];
                     }
                     double dot = 0.0;
                     for (std::size_t j = 0; j < k; ++j) {
                       y[j] /= sum;
                       dot += g[i * k + j] * y[j];
                     }
                     for (std::size_t j = 0; j < k; ++j)
                       dx[i * k + j] += y[j] * (g[i * k + j] - dot);
                   }
                 });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x.values()[i] > 0.0))
      throw std::invalid_argument("log: input must be strictly positive");
    out[i] = std::log(x.values()[i]);
  }
  return make_op(x.shape(), std::move(out), {x},
                 [](const std::vector<double>& g, std::vector<Tensor>& ins) {
                   Tensor& in = ins[0];
                   if (!in.requires_grad()) return;
                   auto& dx = in.grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] / in.values()[i];
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [](const std::vector<double>& g, std::vector<Tensor>& ins) {
                   for (Tensor& in : ins) {
                     if (!in.requires_grad()) continue;
                     auto& d = in.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [](const std::vector<double>& g, std::vector<Tensor>& ins) {
                   Tensor& a = ins[0];
                   Tensor& b = ins[1];
                   if (a.requires_grad()) {
                     auto& da = a.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b.values()[i];
                   }
                   if (b.requires_grad()) {
                     auto& db = b.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a.values()[i];
                   }
                 });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.values()[i];
  return make_op(a.shape(), std::move(out), {a},
                 [c](const std::vector<double>& g, std::vector<Tensor>& ins) {
                   Tensor& in = ins[0];
                   if (!in.requires_grad()) return;
                   auto& d = in.grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
                 });
}

Tensor reduce_sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_op({1}, {acc}, {x}, [](const std::vector<double>& g, std::vector<Tensor>& ins) {
    Tensor& in = ins[0];
    if (!in.requires_grad()) return;
    auto& d = in.grad_buffer();
    for (double& v : d) v += g[0];
  });
}

Tensor reduce_mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return make_op({1}, {acc * inv}, {x},
                 [inv](const std::vector<double>& g, std::vector<Tensor>& ins) {
                   Tensor& in = ins[0];
                   if (!in.requires_grad()) return;
                   auto& d = in.grad_buffer();
                   for (double& v : d) v += g[0] * inv;
                 });
}

namespace {

void check_distribution_rows(const Tensor& t, const char* name) {
  const std::size_t k = last_dim(t.shape());
  const std::size_t rows = t.numel() / k;
  for (std::size_t i = 0; i < rows; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = t.values()[i * k + j];
      if (!(v >= 0.0))
        throw std::invalid_argument(std::string(name) + ": negative probability entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument(std::string(name) + ": row does not sum to 1");
  }
}

}  // namespace

Tensor cross_entropy(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "cross_entropy");
  check_distribution_rows(pred, "cross_entropy: pred");
  check_distribution_rows(target, "cross_entropy: target");
  const std::size_t k = last_dim(pred.shape());
  const std::size_t b = pred.numel() / k;
  double acc = 0.0;
  for (std::size_t i = 0; i < b * k; ++i)
    acc -= target.values()[i] * std::log(std::max(pred.values()[i], kProbEpsilon));
  const double inv_b = 1.0 / static_cast<double>(b);
  return make_op(
      {1}, {acc * inv_b}, {pred, target},
      [inv_b](const std::vector<double>& g, std::vector<Tensor>& ins) {
        Tensor& p = ins[0];
        Tensor& t = ins[1];
        const double g0 = g[0] * inv_b;
        if (p.requires_grad()) {
          auto& dp = p.grad_buffer();
          for (std::size_t i = 0; i < dp.size(); ++i) {
            const double pv = p.values()[i];
            if (pv >= kProbEpsilon) dp[i] -= g0 * t.values()[i] / pv;
            // Clamped entries sit on the flat part of max(p, eps).
          }
        }
        if (t.requires_grad()) {
          auto& dt = t.grad_buffer();
          for (std::size_t i = 0; i < dt.size(); ++i)
            dt[i] -= g0 * std::log(std::max(p.values()[i], kProbEpsilon));
        }
      });
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

void sgd_apply(std::vector<double>& values, const std::vector<double>& grad,
               std::vector<double>& velocity, double learning_rate, double momentum) {
  if (values.size() != grad.size())
    throw std::invalid_argument("sgd_apply: parameter/gradient size mismatch");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("sgd_apply: learning rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("sgd_apply: momentum must be in [0, 1)");
  if (velocity.empty()) velocity.assign(values.size(), 0.0);
  if (velocity.size() != values.size())
    throw std::invalid_argument("sgd_apply: velocity size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    values[i] -= learning_rate * velocity[i];
  }
}

SgdOptimizer::SgdOptimizer(double learning_rate, double momentum)
    : learning_rate_(learning_rate), momentum_(momentum) {
  if (!(learning_rate > 0.0))
    throw std::invalid_argument("SgdOptimizer: learning rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("SgdOptimizer: momentum must be in [0, 1)");
}

void SgdOptimizer::step(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    Tensor t = p;  // cheap handle copy for mutable access
    sgd_apply(t.mutable_values(), t.grad(), velocity_[t.node().get()], learning_rate_, momentum_);
  }
}

void zero_grads(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    Tensor t = p;
    t.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  const std::vector<Tensor>& point, double step) {
  // Fresh tracked leaves at the given point.
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const Tensor& p : point) leaves.emplace_back(p.shape(), p.values(), /*requires_grad=*/true);

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor out = fn(leaves);
    tape.backward(out);
  }
  analytic.reserve(leaves.size());
  for (const Tensor& l : leaves) analytic.push_back(l.grad());

  // Central differences on untracked copies.
  std::vector<Tensor> probe;
  probe.reserve(point.size());
  for (const Tensor& p : point) probe.emplace_back(p.shape(), p.values());

  double worst = 0.0;
  for (std::size_t li = 0; li < probe.size(); ++li) {
    auto& vals = probe[li].mutable_values();
    for (std::size_t c = 0; c < vals.size(); ++c) {
      const double saved = vals[c];
      vals[c] = saved + step;
      const double up = fn(probe).scalar();
      vals[c] = saved - step;
      const double down = fn(probe).scalar();
      vals[c] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double exact = analytic[li][c];
      const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(exact - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace crae
