#pragma once

// Dense float tensors with reverse-mode differentiation.
//
// A Tensor is a cheap shared handle. Operations producing a result from at
// least one tracked input record a GradNode on the result; backward() orders
// the reachable nodes into a tape and replays it in reverse.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bgadapt {

using Shape = std::vector<int>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorImpl;

struct GradNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads the output gradient and accumulates into the inputs' gradients.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GradNode> node;  // null for leaves

  void accumulate_grad(std::size_t i, float g);
  float* grad_buffer();  // allocates zeros on first use
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const float> values() const;
  // In-place access is reserved for parameter updates and construction.
  std::span<float> mutable_values();
  float item() const;
  float at(std::size_t i) const { return values()[i]; }

  // True when the tensor participates in gradient tracking (tracked leaf or
  // result of a tracked computation).
  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  // Deep copy of values; the copy is an untracked leaf.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Gradient recording is on by default; NoGradGuard disables it for the
// current thread within its scope (teacher forwards, evaluation).
bool grad_mode_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds a result tensor, attaching a grad node when any input is tracked
// and grad mode is on. Exposed for custom operations and test fixtures.
Tensor make_result(Shape shape, std::vector<float> values, const char* op,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward);

enum class LogGuard { kNone, kEpsilon };
inline constexpr double kLogEpsilon = 1e-12;

// Elementwise arithmetic. Operands must have identical shapes or one of them
// must hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);

Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
// min(x, 0); zero subgradient at x == 0.
Tensor clamp_nonpositive(const Tensor& a);
// max(x, 0); zero subgradient at x == 0.
Tensor hinge(const Tensor& a);
Tensor log(const Tensor& a, LogGuard guard = LogGuard::kNone);

// Cross-correlation of a C×H×W input with O×C×K×K weights.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1,
              int padding = 0);
Tensor maxpool2x2(const Tensor& input);
Tensor nearest_upsample2x(const Tensor& input);
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& input, int begin, int count);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Mean over entries where mask == 1. An all-zero mask yields 0 and sets
// *empty_mask when provided.
Tensor masked_mean(const Tensor& a, const Tensor& mask, bool* empty_mask = nullptr);

// Same values, no gradient flow.
Tensor detach(const Tensor& a);

// Accumulates d(loss)/d(t) into every tracked leaf t reachable from loss.
void backward(const Tensor& loss);

}  // namespace bgadapt
