#include "bgadapt/background_adaptation.hpp"

#include <algorithm>

#include "bgadapt/errors.hpp"

namespace bgadapt {

namespace {

void check_same_shape(const Tensor& ref, const Tensor& t, const char* op) {
  if (t.shape() != ref.shape()) {
    throw ShapeError(std::string(op) + ": residual " + shape_to_string(t.shape()) + " does not match background " +
                     shape_to_string(ref.shape()));
  }
}

// b1 plus every term (filtered where flagged), accumulated in double and
// rounded once. Exact double accumulation makes the result independent of
// term order for float inputs of comparable magnitude.
Tensor residual_sum(const Tensor& b1, const std::vector<Tensor>& terms, const std::vector<bool>& filtered) {
  const std::size_t n = b1.numel();
  std::vector<double> acc(b1.values().begin(), b1.values().end());
  for (std::size_t t = 0; t < terms.size(); ++t) {
    const auto v = terms[t].values();
    for (std::size_t k = 0; k < n; ++k) acc[k] += filtered[t] ? std::min(v[k], 0.0f) : v[k];
  }
  std::vector<float> out(acc.begin(), acc.end());
  std::vector<Tensor> inputs{b1};
  inputs.insert(inputs.end(), terms.begin(), terms.end());
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& t : inputs) impls.push_back(t.impl());
  return make_result(b1.shape(), std::move(out), "residual_sum", std::move(inputs),
                     [impls, filtered, n](const TensorImpl& o) {
                       for (std::size_t t = 0; t < impls.size(); ++t) {
                         TensorImpl& in = *impls[t];
                         if (!in.requires_grad) continue;
                         float* g = in.grad_buffer();
                         const bool filt = t > 0 && filtered[t - 1];
                         for (std::size_t k = 0; k < n; ++k) {
                           if (!filt || in.data[k] < 0.0f) g[k] += o.grad[k];
                         }
                       }
                     });
}

}  // namespace

Tensor filter_residual(const Tensor& adapt_channel) { return clamp_nonpositive(adapt_channel); }

Tensor aggregate_inference(const Tensor& b1, const std::vector<Tensor>& adapts) {
  for (const auto& a : adapts) check_same_shape(b1, a, "aggregate_inference");
  if (adapts.empty()) return b1;
  return residual_sum(b1, adapts, std::vector<bool>(adapts.size(), true));
}

Tensor aggregate_training(const Tensor& b1, const std::vector<Tensor>& old_adapts, const Tensor& current_adapt) {
  if (b1.requires_grad()) throw ContractError("aggregate_training: b1 must be detached");
  for (const auto& a : old_adapts) {
    if (a.requires_grad()) throw ContractError("aggregate_training: old adaptation channels must be detached");
  }
  for (const auto& a : old_adapts) check_same_shape(b1, a, "aggregate_training");
  check_same_shape(b1, current_adapt, "aggregate_training");
  std::vector<Tensor> terms = old_adapts;
  terms.push_back(current_adapt);
  std::vector<bool> filtered(terms.size(), true);
  filtered.back() = false;
  return residual_sum(b1, terms, filtered);
}

Tensor aggregate_background(const LogitBundle& bundle, AggregationMode mode, BackgroundScheme scheme) {
  if (bundle.steps.empty()) throw ContractError("aggregate_background: empty logit bundle");
  if (scheme == BackgroundScheme::kInitialOnly) return bundle.steps[0].adapt_channel;
  const bool apply_filter = scheme == BackgroundScheme::kFiltered;
  const std::size_t t = bundle.steps.size();
  if (mode == AggregationMode::kInference || t == 1) {
    if (mode == AggregationMode::kTraining) return bundle.steps[0].adapt_channel;
    const Tensor& b1 = bundle.steps[0].adapt_channel;
    if (t == 1) return b1;
    std::vector<Tensor> adapts;
    for (std::size_t i = 1; i < t; ++i) {
      check_same_shape(b1, bundle.steps[i].adapt_channel, "aggregate_background");
      adapts.push_back(bundle.steps[i].adapt_channel);
    }
    return residual_sum(b1, adapts, std::vector<bool>(adapts.size(), apply_filter));
  }
  const Tensor b1 = detach(bundle.steps[0].adapt_channel);
  std::vector<Tensor> old;
  for (std::size_t i = 1; i + 1 < t; ++i) old.push_back(detach(bundle.steps[i].adapt_channel));
  const Tensor& current = bundle.steps[t - 1].adapt_channel;
  if (apply_filter) return aggregate_training(b1, old, current);
  old.push_back(current);
  return residual_sum(b1, old, std::vector<bool>(old.size(), false));
}

}  // namespace bgadapt
