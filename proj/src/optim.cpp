#include "bgadapt/optim.hpp"

#include <cmath>

#include "bgadapt/errors.hpp"

namespace bgadapt {

void sgd_update(std::span<float> param, std::span<const float> grad, std::span<float> velocity, double lr,
                double momentum, double weight_decay) {
  if (grad.size() != param.size() || velocity.size() != param.size()) {
    throw ShapeError("sgd_update: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double v = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    velocity[i] = static_cast<float>(v);
    param[i] = static_cast<float>(param[i] - lr * v);
  }
}

double poly_lr(double base_lr, long iter, long max_iter, double power) {
  if (max_iter <= 0) throw ConfigError("poly_lr: max_iter must be positive");
  if (iter < 0 || iter > max_iter) throw ConfigError("poly_lr: iter outside [0, max_iter]");
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

void SgdOptimizer::step(const std::vector<NamedParameter>& params, double lr) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    if (!t.requires_grad()) continue;
    auto& v = velocity_[p.name];
    if (v.size() != t.numel()) v.assign(t.numel(), 0.0f);
    std::vector<float> zeros;
    std::span<const float> g;
    if (t.has_grad()) {
      g = t.grad();
    } else {
      zeros.assign(t.numel(), 0.0f);
      g = zeros;
    }
    sgd_update(t.mutable_values(), g, v, lr, momentum_, weight_decay_);
  }
}

void SgdOptimizer::zero_grad(const std::vector<NamedParameter>& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace bgadapt
