#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include "fedpmt/data.hpp"
#include "fedpmt/error.hpp"
#include "fedpmt/nn.hpp"
#include "fedpmt/rng.hpp"

namespace fedpmt {

// Per-trainable-layer back-propagation mask, shallow-to-deep. The deepest bit
// (the classifier) is always set.
struct BpMask {
  std::vector<std::uint8_t> bits;

  std::size_t ones() const {
    std::size_t n = 0;
    for (auto b : bits) n += b ? 1 : 0;
    return n;
  }
  bool all_ones() const { return ones() == bits.size(); }
  bool is_suffix() const {
    bool seen_one = false;
    for (auto b : bits) {
      if (b)
        seen_one = true;
      else if (seen_one)
        return false;
    }
    return seen_one;
  }
};

inline BpMask suffix_mask(std::size_t num_layers, std::size_t deepest_count) {
  BpMask m;
  m.bits.assign(num_layers, 0);
  for (std::size_t i = num_layers - deepest_count; i < num_layers; ++i) m.bits[i] = 1;
  return m;
}

// The width menu: |I| masks of strictly increasing width, the last all-ones.
struct WidthMenu {
  std::vector<BpMask> masks;

  std::size_t num_widths() const { return masks.size(); }
  std::size_t num_layers() const { return masks.empty() ? 0 : masks[0].bits.size(); }
  const BpMask& full() const { return masks.back(); }
};

// Width i (1-based) back-propagates through the deepest layer_counts[i-1]
// layers. Default: width i covers the (L - I + i) deepest layers.
inline WidthMenu build_width_menu(
    std::size_t num_trainable_layers, std::size_t num_widths,
    std::optional<std::vector<std::size_t>> layer_counts = std::nullopt) {
  if (num_widths == 0 || num_widths > num_trainable_layers)
    throw Error("width menu size must be in [1, " +
                std::to_string(num_trainable_layers) + "], got " +
                std::to_string(num_widths));
  std::vector<std::size_t> counts;
  if (layer_counts) {
    counts = *layer_counts;
    if (counts.size() != num_widths)
      throw Error("layer_counts size must equal the number of widths");
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i] == 0 || (i > 0 && counts[i] <= counts[i - 1]))
        throw Error("layer_counts must be strictly increasing and positive");
    }
    if (counts.back() != num_trainable_layers)
      throw Error("largest width must cover all trainable layers");
  } else {
    for (std::size_t i = 1; i <= num_widths; ++i)
      counts.push_back(num_trainable_layers - num_widths + i);
  }
  WidthMenu menu;
  for (std::size_t c : counts) menu.masks.push_back(suffix_mask(num_trainable_layers, c));
  return menu;
}

// Layer-wise multiplication: block l of the result is a[l] times block l of b.
inline LayerParams layerwise_mul(const std::vector<double>& a, const LayerParams& b) {
  if (a.size() != b.blocks.size())
    throw Error("layerwise_mul: vector length " + std::to_string(a.size()) +
                " does not match block count " + std::to_string(b.blocks.size()));
  LayerParams out = b;
  for (std::size_t l = 0; l < a.size(); ++l) {
    for (double& v : out.blocks[l].weights.data) v *= a[l];
    for (double& v : out.blocks[l].bias.data) v *= a[l];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masked local update: `steps` masked mini-batch SGD steps from the global
// parameters. Mini-batches are drawn by a seeded shuffle without replacement,
// reshuffled each epoch; each batch is processed in ascending sample order.
// Returns the final local parameters and the cumulative delta
// (global - final), exactly zero on masked-off layers.
// ---------------------------------------------------------------------------

struct LocalUpdateResult {
  LayerGrads delta;
  LayerParams final_params;
};

inline LocalUpdateResult local_update(const ModelSpec& spec, const LayerParams& global,
                                      const Dataset& data,
                                      const std::vector<std::size_t>& indices,
                                      const BpMask& mask, double step_size,
                                      std::size_t num_steps, std::size_t batch_size,
                                      std::uint64_t rng_seed) {
  if (indices.empty()) throw Error("local_update: empty device dataset");
  if (num_steps == 0) throw Error("local_update: need at least one step");
  if (batch_size == 0 || batch_size > indices.size())
    throw Error("local_update: batch size must be in [1, " +
                std::to_string(indices.size()) + "]");
  if (mask.bits.size() != spec.trainable_count())
    throw Error("local_update: mask length mismatch");

  const std::size_t feat = data.feature_size();
  LayerParams params = global;
  Rng rng(rng_seed);
  std::vector<std::size_t> order = indices;
  rng.shuffle(order);
  std::size_t pos = 0;

  std::vector<std::size_t> batch;
  for (std::size_t step = 0; step < num_steps; ++step) {
    if (pos >= order.size()) {
      rng.shuffle(order);
      pos = 0;
    }
    const std::size_t take = std::min(batch_size, order.size() - pos);
    batch.assign(order.begin() + pos, order.begin() + pos + take);
    pos += take;
    std::sort(batch.begin(), batch.end());

    std::vector<std::size_t> bshape{take};
    for (auto s : spec.input_shape) bshape.push_back(s);
    Tensor bx = Tensor::zeros(bshape);
    std::vector<int> by(take);
    for (std::size_t i = 0; i < take; ++i) {
      const double* src = data.sample(batch[i]);
      std::copy(src, src + feat, &bx.data[i * feat]);
      by[i] = data.labels[batch[i]];
    }
    auto [loss, cache] = forward(spec, params, bx, by);
    (void)loss;
    LayerGrads grads = backward(spec, params, cache, mask.bits);
    for (std::size_t l = 0; l < params.blocks.size(); ++l) {
      if (!mask.bits[l]) continue;
      auto& pb = params.blocks[l];
      const auto& gb = grads.blocks[l];
      for (std::size_t i = 0; i < pb.weights.data.size(); ++i)
        pb.weights.data[i] -= step_size * gb.weights.data[i];
      for (std::size_t i = 0; i < pb.bias.data.size(); ++i)
        pb.bias.data[i] -= step_size * gb.bias.data[i];
    }
  }

  LocalUpdateResult res;
  res.delta = make_zero_grads(spec);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    if (!mask.bits[l]) continue;
    auto& db = res.delta.blocks[l];
    for (std::size_t i = 0; i < db.weights.data.size(); ++i)
      db.weights.data[i] = global.blocks[l].weights.data[i] - params.blocks[l].weights.data[i];
    for (std::size_t i = 0; i < db.bias.data.size(); ++i)
      db.bias.data[i] = global.blocks[l].bias.data[i] - params.blocks[l].bias.data[i];
  }
  for (std::size_t l = 0; l < res.delta.updated.size(); ++l)
    res.delta.updated[l] = mask.bits[l];
  res.final_params = std::move(params);
  return res;
}

}  // namespace fedpmt
