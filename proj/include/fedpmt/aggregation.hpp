#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fedpmt/error.hpp"
#include "fedpmt/masking.hpp"
#include "fedpmt/nn.hpp"

namespace fedpmt {

// Per-device, per-layer aggregation weights: A_k[l] = f_k[l] / sum_k f_k[l],
// zero where no device updates the layer. With `dataset_sizes` given, the
// weight is proportional to f_k[l] * |D_k| within each layer instead.
struct AggregationWeights {
  std::vector<std::vector<double>> per_device;
  std::vector<std::uint8_t> layer_has_updater;
};

inline AggregationWeights compute_weights(
    const std::vector<BpMask>& masks,
    std::optional<std::vector<std::size_t>> dataset_sizes = std::nullopt) {
  if (masks.empty()) throw Error("compute_weights: empty device set");
  const std::size_t layers = masks[0].bits.size();
  for (const auto& m : masks)
    if (m.bits.size() != layers) throw Error("compute_weights: mask length mismatch");
  if (dataset_sizes && dataset_sizes->size() != masks.size())
    throw Error("compute_weights: dataset size list mismatch");

  AggregationWeights w;
  w.per_device.assign(masks.size(), std::vector<double>(layers, 0.0));
  w.layer_has_updater.assign(layers, 0);
  for (std::size_t l = 0; l < layers; ++l) {
    double denom = 0.0;
    for (std::size_t k = 0; k < masks.size(); ++k) {
      const double share = dataset_sizes ? static_cast<double>((*dataset_sizes)[k]) : 1.0;
      if (masks[k].bits[l]) denom += share;
    }
    if (denom <= 0.0) continue;
    w.layer_has_updater[l] = 1;
    for (std::size_t k = 0; k < masks.size(); ++k) {
      const double share = dataset_sizes ? static_cast<double>((*dataset_sizes)[k]) : 1.0;
      if (masks[k].bits[l]) w.per_device[k][l] = share / denom;
    }
  }
  return w;
}

// Layer-wise weighted aggregation of device deltas: block l of the new global
// is old block l minus sum_k A_k[l] * delta_k[l], devices in ascending id
// order. Because the weights of an updated layer sum to 1, this is evaluated
// as the weighted average of the reconstructed local parameters
// sum_k A_k[l] * (old - delta_k); plain parameter averaging is then
// reproduced bit-for-bit when every weight is equal. Layers nobody updated
// keep their previous values.
inline LayerParams aggregate(
    const LayerParams& global, const std::vector<LayerGrads>& updates,
    const std::vector<BpMask>& masks,
    std::optional<std::vector<std::size_t>> dataset_sizes = std::nullopt) {
  if (updates.size() != masks.size())
    throw Error("aggregate: updates/masks size mismatch");
  const AggregationWeights w = compute_weights(masks, std::move(dataset_sizes));
  const std::size_t layers = global.blocks.size();
  for (const auto& u : updates) {
    if (u.blocks.size() != layers) throw Error("aggregate: update layout mismatch");
    for (std::size_t l = 0; l < layers; ++l)
      if (!u.blocks[l].weights.same_shape(global.blocks[l].weights))
        throw Error("aggregate: block " + std::to_string(l) + " shape mismatch");
  }

  LayerParams out = global;
  for (std::size_t l = 0; l < layers; ++l) {
    if (!w.layer_has_updater[l]) continue;
    auto& wt = out.blocks[l].weights.data;
    auto& bt = out.blocks[l].bias.data;
    std::fill(wt.begin(), wt.end(), 0.0);
    std::fill(bt.begin(), bt.end(), 0.0);
    for (std::size_t k = 0; k < updates.size(); ++k) {
      const double a = w.per_device[k][l];
      if (a == 0.0) continue;
      const auto& gw = global.blocks[l].weights.data;
      const auto& gb = global.blocks[l].bias.data;
      const auto& uw = updates[k].blocks[l].weights.data;
      const auto& ub = updates[k].blocks[l].bias.data;
      for (std::size_t i = 0; i < wt.size(); ++i) wt[i] += a * (gw[i] - uw[i]);
      for (std::size_t i = 0; i < bt.size(); ++i) bt[i] += a * (gb[i] - ub[i]);
    }
  }
  return out;
}

}  // namespace fedpmt
