#pragma once

// Residual modeling of the background logit.
//
// The initial head's background logit b^1 is never retrained. Each later
// head i contributes an adaptation channel b^i whose positive part is
// filtered away, so the aggregated background can only be pushed down:
//
//   inference:  mu_b = b^1 + sum_{i=2..t}   min(b^i, 0)
//   training:   mu_b = b^1 + sum_{i=2..t-1} min(b^i, 0) + b^t
//
// During training the current residual enters unfiltered and is the only
// term carrying gradient; the caller passes b^1 and the older residuals
// detached.

#include <vector>

#include "bgadapt/segnet.hpp"
#include "bgadapt/tensor.hpp"

namespace bgadapt {

enum class AggregationMode { kInference, kTraining };

// kFiltered is the residual scheme above. kUnfiltered sums residuals raw;
// kInitialOnly ignores residuals entirely (single shared background
// classifier). The latter two exist for ablations.
enum class BackgroundScheme { kFiltered, kUnfiltered, kInitialOnly };

Tensor filter_residual(const Tensor& adapt_channel);

Tensor aggregate_inference(const Tensor& b1, const std::vector<Tensor>& adapts);

// Throws ContractError if b1 or any old residual is still tracked.
Tensor aggregate_training(const Tensor& b1, const std::vector<Tensor>& old_adapts, const Tensor& current_adapt);

// Convenience over a LogitBundle. For residual schemes, training mode
// detaches b^1 and the old residuals itself. kInitialOnly returns b^1 as is
// (tracked), since it is then the one background classifier being trained.
Tensor aggregate_background(const LogitBundle& bundle, AggregationMode mode,
                            BackgroundScheme scheme = BackgroundScheme::kFiltered);

}  // namespace bgadapt
