#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "bgadapt/segnet.hpp"

namespace bgadapt {

/// v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v
void sgd_update(std::span<float> param, std::span<const float> grad, std::span<float> velocity, double lr,
                double momentum, double weight_decay);

/// base_lr * (1 - iter/max_iter)^power
double poly_lr(double base_lr, long iter, long max_iter, double power = 0.9);

/// Momentum SGD over named parameters. Parameters with gradient tracking
/// off are frozen and left untouched (no decay either).
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<NamedParameter>& params, double lr);
  static void zero_grad(const std::vector<NamedParameter>& params);

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, std::vector<float>> velocity_;
};

}  // namespace bgadapt
