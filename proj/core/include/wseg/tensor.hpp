#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wseg/errors.hpp"

namespace wseg {

class Tape;

// Dense rank-4 shape, (batch, channels, height, width). Weight tensors reuse
// the same four slots as (outC, inC, kH, kW).
struct Shape {
  std::int64_t b = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t numel() const { return b * c * h * w; }
  bool operator==(const Shape& o) const = default;
  std::string str() const;
};

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  const Tape* producer = nullptr;
};
}  // namespace detail

// Value-semantics handle over shared f64 storage. Cheap to copy; copies alias
// the same buffer. Values are immutable by convention once an op consumed the
// tensor; gradient accumulation and optimizer updates are the exceptions.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0, bool requires_grad = false);
  static Tensor from_vector(Shape s, std::vector<double> values, bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::int64_t numel() const { return d_->shape.numel(); }

  double* data() { return d_->values.data(); }
  const double* data() const { return d_->values.data(); }
  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }

  std::int64_t offset(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) const {
    const Shape& s = d_->shape;
    return ((b * s.c + c) * s.h + y) * s.w + x;
  }
  double& at(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) {
    return d_->values[static_cast<std::size_t>(offset(b, c, y, x))];
  }
  double at(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) const {
    return d_->values[static_cast<std::size_t>(offset(b, c, y, x))];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return !d_->grad.empty(); }
  // Allocates a zero-filled gradient buffer if absent.
  void ensure_grad();
  void zero_grad();
  double* grad() { return d_->grad.data(); }
  const double* grad() const { return d_->grad.data(); }
  std::vector<double>& grad_vec() { return d_->grad; }
  const std::vector<double>& grad_vec() const { return d_->grad; }

  const Tape* producer() const { return d_->producer; }

  bool all_finite() const;
  Tensor clone() const;

  std::shared_ptr<detail::TensorData> impl() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

// Integer label plane per batch element (semantic classes or instance ids).
struct LabelMap {
  std::int64_t batch = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::int32_t> v;

  LabelMap() = default;
  LabelMap(std::int64_t batch_, std::int64_t h_, std::int64_t w_, std::int32_t fill = 0)
      : batch(batch_), h(h_), w(w_), v(static_cast<std::size_t>(batch_ * h_ * w_), fill) {}
  std::int32_t& at(std::int64_t b, std::int64_t y, std::int64_t x) {
    return v[static_cast<std::size_t>((b * h + y) * w + x)];
  }
  std::int32_t at(std::int64_t b, std::int64_t y, std::int64_t x) const {
    return v[static_cast<std::size_t>((b * h + y) * w + x)];
  }
};

enum class Mode { kTrain, kEval };

// Linear record of executed operations. Recording order is execution order,
// which is a topological order by construction; replaying the backward rules
// in reverse visits each node exactly once. One tape per training thread.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<std::shared_ptr<detail::TensorData>> inputs;
    std::vector<std::shared_ptr<detail::TensorData>> outputs;
    std::function<void()> backward;
  };

  void record(const char* op, std::initializer_list<Tensor> inputs,
              std::initializer_list<Tensor> outputs, std::function<void()> backward);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Every
// requires_grad leaf reached from the loss receives its total derivative;
// constant leaves receive none.
void backward(const Tensor& loss, Tape& tape);

// ---------------------------------------------------------------------------
// Operations. Each takes an optional tape; passing nullptr evaluates forward
// only. An output requires grad iff a tape is given and any input does.
// ---------------------------------------------------------------------------

enum class ConvImpl { kAuto, kDirect, kGemm };

struct Conv2dOpts {
  int stride = 1;
  int dil_h = 1;
  int dil_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  ConvImpl impl = ConvImpl::kAuto;
};

// Cross-correlation. weight is (outC, inC, kH, kW); bias, when present, has
// outC elements laid out as (1, outC, 1, 1).
Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              const Conv2dOpts& opts, Tape* tape);

enum class ActKind { kRelu, kPRelu, kTanh };

// prelu_slopes is required for kPRelu, one slope per channel as (1, C, 1, 1),
// and ignored otherwise.
Tensor activation(const Tensor& x, ActKind kind, const Tensor* prelu_slopes, Tape* tape);
Tensor relu(const Tensor& x, Tape* tape);
Tensor prelu(const Tensor& x, const Tensor& slopes, Tape* tape);
Tensor tanh_act(const Tensor& x, Tape* tape);

// 2x2 stride-2 max pooling; ties resolve to the smallest flat index.
Tensor maxpool2x2(const Tensor& x, Tape* tape);

Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape);
Tensor residual_add(const Tensor& a, const Tensor& b, Tape* tape);

struct BnOpts {
  double momentum = 0.1;  // weight of the fresh batch statistic
  double eps = 1e-5;
};

// Train mode normalizes by batch statistics and updates running stats in
// place; eval mode normalizes by the running stats.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, Mode mode,
                   const BnOpts& opts, Tape* tape);

// Inverted dropout with a deterministic per-call seed. Identity in eval mode
// and for p == 0 (returns the input handle unchanged).
Tensor dropout(const Tensor& x, double p, Mode mode, std::uint64_t seed, Tape* tape);

// Reductions and elementwise helpers used by losses and tests.
Tensor sum(const Tensor& x, Tape* tape);                                   // -> (1,1,1,1)
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);                  // hadamard
Tensor add_scaled(const Tensor& a, const Tensor& b, double alpha, Tape* tape);  // a + alpha*b

// Mean over all pixels of -log softmax(logits)[target]. Targets must lie in
// [0, C).
Tensor softmax_cross_entropy(const Tensor& logits, const LabelMap& target, Tape* tape);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// A scalar-valued differentiable program over a fixed list of inputs.
using TensorProgram = std::function<Tensor(const std::vector<Tensor>&, Tape&)>;

// Central-difference check of every component of every requires_grad input.
// Returns max over components of |analytic - numeric| / max(1, |analytic|).
double grad_check(const TensorProgram& f, const std::vector<Tensor>& inputs, double epsilon);

// Same check restricted to a deterministic random subset of components per
// input, for programs too large to sweep exhaustively.
double grad_check_sampled(const TensorProgram& f, const std::vector<Tensor>& inputs,
                          double epsilon, std::int64_t max_components_per_input,
                          std::uint64_t seed);

// Convenience constructors.
Tensor zeros(Shape s, bool requires_grad = false);
Tensor full(Shape s, double v, bool requires_grad = false);

}  // namespace wseg
