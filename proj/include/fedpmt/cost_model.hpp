#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "fedpmt/error.hpp"
#include "fedpmt/masking.hpp"
#include "fedpmt/nn.hpp"

namespace fedpmt {

using flop_t = unsigned long long;

// Weight-only FLOP counting. Forward cost of a dense layer is the matmul plus
// one activation term per output; backward cost is the four-term expression
// (error signal, signal matmul from the layer above, gradient matmul, weight
// update). Conv backward is twice conv forward; pooling and flatten are free.
//
// kConsistent multiplies every term that touches samples by the batch size.
// kTable reproduces the published table conventions instead: conv nets count
// conv layers per sample and drop the dense activation terms.
enum class CountingMode { kConsistent, kTable };

struct CostBreakdown {
  flop_t fp_total = 0;
  std::vector<flop_t> bp_per_layer;  // shallow-to-deep, one entry per trainable layer

  flop_t total_full() const {
    flop_t t = fp_total;
    for (flop_t b : bp_per_layer) t += b;
    return t;
  }
  flop_t total(const std::vector<std::uint8_t>& mask) const {
    if (mask.size() != bp_per_layer.size())
      throw Error("cost total: mask length mismatch");
    flop_t t = fp_total;
    for (std::size_t l = 0; l < mask.size(); ++l)
      if (mask[l]) t += bp_per_layer[l];
    return t;
  }
  double ratio_to_full(const std::vector<std::uint8_t>& mask) const {
    return static_cast<double>(total(mask)) / static_cast<double>(total_full());
  }
};

namespace costs {

inline flop_t dense_fp(flop_t n_out, flop_t n_in, flop_t batch, bool activation) {
  return n_out * n_in * batch + (activation ? n_out * batch : 0);
}
inline flop_t dense_bp_output(flop_t n_o, flop_t n_down, flop_t batch) {
  return n_o * batch + n_o * batch + n_o * batch * n_down + n_o * n_down;
}
inline flop_t dense_bp_hidden(flop_t n, flop_t n_up, flop_t n_down, flop_t batch) {
  return n * batch + n * n_up * batch + n * batch * n_down + n * n_down;
}
inline flop_t conv_fp(flop_t in_ch, flop_t out_ch, flop_t kernel, flop_t out_spatial,
                      flop_t batch) {
  return in_ch * kernel * kernel * out_ch * out_spatial * out_spatial * batch;
}

}  // namespace costs

// FP/BP counts for a plain dense stack given neuron counts n_0..n_L.
inline CostBreakdown flops_fcnn(const std::vector<std::size_t>& layer_sizes,
                                std::size_t batch) {
  if (layer_sizes.size() < 2) throw Error("flops_fcnn: need at least two layers");
  CostBreakdown cb;
  const std::size_t L = layer_sizes.size() - 1;
  for (std::size_t j = 1; j <= L; ++j)
    cb.fp_total += costs::dense_fp(layer_sizes[j], layer_sizes[j - 1], batch, true);
  for (std::size_t j = 1; j <= L; ++j) {
    if (j == L)
      cb.bp_per_layer.push_back(
          costs::dense_bp_output(layer_sizes[j], layer_sizes[j - 1], batch));
    else
      cb.bp_per_layer.push_back(costs::dense_bp_hidden(
          layer_sizes[j], layer_sizes[j + 1], layer_sizes[j - 1], batch));
  }
  return cb;
}

struct ConvCost {
  flop_t fp = 0, bp = 0;
};

inline ConvCost flops_conv(std::size_t in_channels, std::size_t out_channels,
                           std::size_t kernel, std::size_t out_spatial,
                           std::size_t batch) {
  ConvCost c;
  c.fp = costs::conv_fp(in_channels, out_channels, kernel, out_spatial, batch);
  c.bp = 2 * c.fp;
  return c;
}

// Per-mini-batch cost breakdown of an arbitrary model.
inline CostBreakdown model_cost(const ModelSpec& spec, std::size_t batch,
                                CountingMode mode) {
  const auto shapes = spec.layer_output_shapes();
  bool has_conv = false;
  for (const auto& l : spec.layers) has_conv |= std::holds_alternative<Conv2d>(l);
  const bool dense_activation = mode == CountingMode::kConsistent || !has_conv;
  const std::size_t conv_batch =
      (mode == CountingMode::kConsistent || !has_conv) ? batch : 1;

  // neuron count of each trainable layer's output, plus its input size
  std::vector<std::size_t> t_layer;  // layer indices of trainables
  for (std::size_t li = 0; li < spec.layers.size(); ++li)
    if (is_trainable(spec.layers[li])) t_layer.push_back(li);

  CostBreakdown cb;
  for (std::size_t t = 0; t < t_layer.size(); ++t) {
    const std::size_t li = t_layer[t];
    const Layer& l = spec.layers[li];
    if (const auto* c = std::get_if<Conv2d>(&l)) {
      const std::size_t m = shapes[li][1];
      const ConvCost cc =
          flops_conv(c->in_channels, c->out_channels, c->kernel, m, conv_batch);
      cb.fp_total += cc.fp;
      cb.bp_per_layer.push_back(cc.bp);
    } else {
      const auto& d = std::get<Dense>(l);
      cb.fp_total += costs::dense_fp(d.out, d.in, batch, dense_activation);
      if (t + 1 == t_layer.size()) {
        cb.bp_per_layer.push_back(costs::dense_bp_output(d.out, d.in, batch));
      } else {
        const std::size_t n_up = Tensor::element_count(shapes[t_layer[t + 1]]);
        cb.bp_per_layer.push_back(costs::dense_bp_hidden(d.out, n_up, d.in, batch));
      }
    }
  }
  return cb;
}

// Cost of one local round: full forward plus masked backward for every
// mini-batch, over E epochs of the device dataset.
inline flop_t flops_masked(const ModelSpec& spec, std::size_t batch,
                           const BpMask& mask, std::size_t epochs,
                           std::size_t dataset_size) {
  if (batch == 0 || dataset_size == 0) throw Error("flops_masked: empty batch/dataset");
  const std::size_t full_batches = dataset_size / batch;
  const std::size_t rem = dataset_size % batch;
  flop_t per_epoch = 0;
  if (full_batches > 0)
    per_epoch += static_cast<flop_t>(full_batches) *
                 model_cost(spec, batch, CountingMode::kConsistent).total(mask.bits);
  if (rem > 0)
    per_epoch += model_cost(spec, rem, CountingMode::kConsistent).total(mask.bits);
  return per_epoch * static_cast<flop_t>(epochs);
}

// Complexity ratio of every width in a menu, deepest-width last (== 1).
inline std::vector<double> width_ratios(const ModelSpec& spec, std::size_t batch,
                                        const WidthMenu& menu,
                                        CountingMode mode = CountingMode::kTable) {
  const CostBreakdown cb = model_cost(spec, batch, mode);
  std::vector<double> out;
  for (const auto& m : menu.masks) out.push_back(cb.ratio_to_full(m.bits));
  return out;
}

// ---------------------------------------------------------------------------
// Device compute-time model
// ---------------------------------------------------------------------------

struct DeviceProfile {
  std::size_t id = 0;
  double kappa = 1.0;  // CPU frequency as a fraction of the fastest tier
  std::size_t dataset_size = 0;
  std::size_t epochs = 1;
};

struct RoundTiming {
  std::vector<double> device_seconds;
  double round_seconds = 0.0;
};

// T_cmp per device = complexity_ratio(width) * base_full_time / kappa, where
// base_full_time is the full-model time of a kappa = 1 device. The round lasts
// as long as its slowest participant.
inline RoundTiming round_time(const std::vector<std::size_t>& width_by_device,
                              const std::vector<double>& ratios,
                              const std::vector<DeviceProfile>& profiles,
                              double base_full_time) {
  if (base_full_time <= 0.0) throw Error("round_time: base_full_time must be positive");
  if (width_by_device.size() != profiles.size())
    throw Error("round_time: assignment/profile size mismatch");
  RoundTiming t;
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    const std::size_t w = width_by_device[i];
    if (w >= ratios.size()) throw Error("round_time: width index out of range");
    if (profiles[i].kappa <= 0.0) throw Error("round_time: kappa must be positive");
    const double secs = ratios[w] * base_full_time / profiles[i].kappa;
    t.device_seconds.push_back(secs);
    t.round_seconds = std::max(t.round_seconds, secs);
  }
  return t;
}

struct DeadlineResult {
  std::vector<std::size_t> included;  // positions into the device list
  double round_seconds = 0.0;
  bool empty_round = false;
};

// Keep devices that finish by the deadline; the round lasts until the last
// included device finishes, or the full deadline if nobody makes it.
inline DeadlineResult apply_deadline(const std::vector<double>& device_seconds,
                                     double deadline) {
  if (deadline <= 0.0) throw Error("apply_deadline: deadline must be positive");
  DeadlineResult r;
  double max_in = 0.0;
  for (std::size_t i = 0; i < device_seconds.size(); ++i) {
    if (device_seconds[i] <= deadline) {
      r.included.push_back(i);
      max_in = std::max(max_in, device_seconds[i]);
    }
  }
  if (r.included.empty()) {
    r.empty_round = true;
    r.round_seconds = deadline;
  } else {
    r.round_seconds = std::min(deadline, max_in);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Federated-dropout cost matching
// ---------------------------------------------------------------------------

// Architecture with hidden widths shrunk to ceil(keep_rate * n); input and
// classifier dimensions are untouched. Conv hidden layers shrink by channels.
inline ModelSpec feddrop_arch(const ModelSpec& spec, double keep_rate) {
  if (keep_rate <= 0.0 || keep_rate > 1.0)
    throw Error("keep rate must be in (0, 1]");
  std::vector<std::size_t> t_layer;
  for (std::size_t li = 0; li < spec.layers.size(); ++li)
    if (is_trainable(spec.layers[li])) t_layer.push_back(li);

  ModelSpec out = spec;
  // shrink outputs of all trainables except the classifier
  for (std::size_t t = 0; t + 1 < t_layer.size(); ++t) {
    Layer& l = out.layers[t_layer[t]];
    if (auto* d = std::get_if<Dense>(&l)) {
      d->out = static_cast<std::size_t>(std::ceil(keep_rate * static_cast<double>(d->out)));
      if (d->out == 0) throw Error("keep rate empties a hidden layer");
    } else {
      auto& c = std::get<Conv2d>(l);
      c.out_channels =
          static_cast<std::size_t>(std::ceil(keep_rate * static_cast<double>(c.out_channels)));
      if (c.out_channels == 0) throw Error("keep rate empties a conv layer");
    }
  }
  // re-derive input dims along the chain
  std::vector<std::size_t> cur = out.input_shape;
  for (auto& l : out.layers) {
    if (auto* d = std::get_if<Dense>(&l)) {
      d->in = Tensor::element_count(cur);
      cur = {d->out};
    } else if (auto* c = std::get_if<Conv2d>(&l)) {
      c->in_channels = cur[0];
      const std::size_t oh = (cur[1] - c->kernel + 2 * c->padding) / c->stride + 1;
      const std::size_t ow = (cur[2] - c->kernel + 2 * c->padding) / c->stride + 1;
      cur = {c->out_channels, oh, ow};
    } else if (const auto* p = std::get_if<MaxPool2d>(&l)) {
      cur = {cur[0], cur[1] / p->window, cur[2] / p->window};
    } else if (std::holds_alternative<Flatten>(l)) {
      cur = {Tensor::element_count(cur)};
    }
  }
  out.validate();
  return out;
}

inline flop_t feddrop_cost(const ModelSpec& spec, std::size_t batch, double keep_rate,
                           CountingMode mode = CountingMode::kTable) {
  return model_cost(feddrop_arch(spec, keep_rate), batch, mode).total_full();
}

// Smallest keep rate (on the neuron lattice of the widest shrinkable layer)
// whose sub-model cost reaches the target.
inline double feddrop_match_rate(flop_t target_flops, const ModelSpec& spec,
                                 std::size_t batch,
                                 CountingMode mode = CountingMode::kTable) {
  std::size_t widest = 0;
  std::vector<std::size_t> t_layer;
  for (std::size_t li = 0; li < spec.layers.size(); ++li)
    if (is_trainable(spec.layers[li])) t_layer.push_back(li);
  for (std::size_t t = 0; t + 1 < t_layer.size(); ++t) {
    const Layer& l = spec.layers[t_layer[t]];
    if (const auto* d = std::get_if<Dense>(&l))
      widest = std::max(widest, d->out);
    else
      widest = std::max(widest, std::get<Conv2d>(l).out_channels);
  }
  if (widest == 0) throw Error("feddrop_match_rate: model has no hidden layers");

  const auto cost_at = [&](std::size_t k) {
    return feddrop_cost(spec, batch, static_cast<double>(k) / static_cast<double>(widest),
                        mode);
  };
  if (target_flops > cost_at(widest) || target_flops < cost_at(1))
    throw Error("feddrop_match_rate: target out of range");
  std::size_t lo = 1, hi = widest;  // invariant: cost_at(hi) >= target
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (cost_at(mid) >= target_flops)
      hi = mid;
    else
      lo = mid + 1;
  }
  return static_cast<double>(hi) / static_cast<double>(widest);
}

// ---------------------------------------------------------------------------
// Cost report: per-width totals, ratios and matched dropout rates for a model
// ---------------------------------------------------------------------------

struct CostReportRow {
  std::string label;
  flop_t flops = 0;
  double ratio = 0.0;         // vs the full-model total
  double feddrop_rate = 0.0;  // keep rate matching this width's budget
  flop_t feddrop_flops = 0;
};

struct CostReport {
  std::string arch;
  std::size_t batch = 0;
  flop_t full_flops = 0;
  std::vector<CostReportRow> rows;  // ascending width, full model last
};

inline CostReport cost_report(const std::string& arch_name, const ModelSpec& spec,
                              std::size_t batch, const WidthMenu& menu,
                              CountingMode mode = CountingMode::kTable) {
  const CostBreakdown cb = model_cost(spec, batch, mode);
  std::vector<std::string> names;
  std::size_t conv_i = 0, fc_i = 0;
  for (const auto& l : spec.layers) {
    if (std::holds_alternative<Conv2d>(l))
      names.push_back("conv" + std::to_string(++conv_i));
    else if (std::holds_alternative<Dense>(l))
      names.push_back("fc" + std::to_string(++fc_i));
  }

  CostReport rep;
  rep.arch = arch_name;
  rep.batch = batch;
  rep.full_flops = cb.total_full();
  for (const auto& mask : menu.masks) {
    CostReportRow row;
    row.label = "full";
    for (std::size_t l = 0; l < mask.bits.size(); ++l)
      if (!mask.bits[l]) row.label += " - " + names[l] + "(bp)";
    row.flops = cb.total(mask.bits);
    row.ratio = cb.ratio_to_full(mask.bits);
    if (mask.all_ones()) {
      row.feddrop_rate = 1.0;
      row.feddrop_flops = rep.full_flops;
    } else {
      row.feddrop_rate = feddrop_match_rate(row.flops, spec, batch, mode);
      row.feddrop_flops = feddrop_cost(spec, batch, row.feddrop_rate, mode);
    }
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace fedpmt
