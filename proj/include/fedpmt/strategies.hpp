#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "fedpmt/aggregation.hpp"
#include "fedpmt/cost_model.hpp"
#include "fedpmt/error.hpp"
#include "fedpmt/masking.hpp"
#include "fedpmt/nn.hpp"
#include "fedpmt/rng.hpp"

namespace fedpmt {

enum class Provenance { kServerAssigned, kDeviceChosen };

struct WidthAssignment {
  std::vector<std::size_t> width_by_device;  // width index into the menu, per profile
  Provenance provenance = Provenance::kServerAssigned;
  std::vector<std::uint8_t> flagged;  // floored at the smallest width
};

namespace detail {

// Rank-match compute tiers to widths: the fastest distinct tier trains the
// full model, each slower tier steps one width down, and tiers below the menu
// floor at the smallest width (flagged). Assignments depend only on the tier
// ladder, so the server (option I) and the devices themselves (option II)
// arrive at the same result.
inline WidthAssignment rank_assign(const std::vector<DeviceProfile>& profiles,
                                   const WidthMenu& menu, Provenance prov) {
  if (profiles.empty()) throw Error("assign widths: empty device set");
  std::set<double, std::greater<double>> ladder;
  for (const auto& p : profiles) {
    if (p.kappa <= 0.0) throw Error("assign widths: kappa must be positive");
    ladder.insert(p.kappa);
  }
  std::map<double, std::size_t> rank;  // 0 = fastest
  std::size_t r = 0;
  for (double k : ladder) rank[k] = r++;

  WidthAssignment a;
  a.provenance = prov;
  const std::size_t widths = menu.num_widths();
  for (const auto& p : profiles) {
    const std::size_t rk = rank[p.kappa];
    if (rk >= widths) {
      a.width_by_device.push_back(0);
      a.flagged.push_back(1);
    } else {
      a.width_by_device.push_back(widths - 1 - rk);
      a.flagged.push_back(0);
    }
  }
  return a;
}

}  // namespace detail

// Option I: the server knows every device's compute level and assigns widths.
inline WidthAssignment fedpmt_assign_option1(const std::vector<DeviceProfile>& profiles,
                                             const WidthMenu& menu) {
  return detail::rank_assign(profiles, menu, Provenance::kServerAssigned);
}

// Option II: the menu is broadcast and each device picks its own width; the
// chosen mask travels with the update.
inline WidthAssignment fedpmt_assign_option2(const std::vector<DeviceProfile>& profiles,
                                             const WidthMenu& menu) {
  return detail::rank_assign(profiles, menu, Provenance::kDeviceChosen);
}

// ---------------------------------------------------------------------------
// Federated dropout: random hidden neurons are removed per device, the
// shrunken model is trained in full, and deltas are scattered back. Supported
// for dense stacks; the input layer and the classifier are never dropped.
// ---------------------------------------------------------------------------

struct DropoutPlan {
  double keep_rate = 1.0;
  double rescale = 1.0;  // applied to weights whose input activations were dropped
  std::vector<std::vector<std::size_t>> kept;  // kept output neurons per trainable layer
};

struct FeddropSubmodel {
  ModelSpec spec;
  LayerParams params;
  DropoutPlan plan;
};

inline FeddropSubmodel feddrop_generate(const ModelSpec& spec, const LayerParams& global,
                                        double keep_rate, std::uint64_t rng_seed) {
  if (keep_rate <= 0.0 || keep_rate > 1.0)
    throw Error("feddrop_generate: keep rate must be in (0, 1]");
  for (const auto& l : spec.layers)
    if (std::holds_alternative<Conv2d>(l) || std::holds_alternative<MaxPool2d>(l))
      throw Error("feddrop_generate: only dense models are supported");

  std::vector<std::size_t> t_layer;
  for (std::size_t li = 0; li < spec.layers.size(); ++li)
    if (is_trainable(spec.layers[li])) t_layer.push_back(li);
  const std::size_t T = t_layer.size();

  DropoutPlan plan;
  plan.keep_rate = keep_rate;
  plan.rescale = 1.0 / keep_rate;
  plan.kept.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto& d = std::get<Dense>(spec.layers[t_layer[t]]);
    if (t + 1 == T) {  // classifier outputs are never dropped
      plan.kept[t].resize(d.out);
      for (std::size_t i = 0; i < d.out; ++i) plan.kept[t][i] = i;
    } else {
      const std::size_t keep = static_cast<std::size_t>(
          std::ceil(keep_rate * static_cast<double>(d.out)));
      Rng rng(derive_seed(rng_seed, 0xD80Fu, t));
      plan.kept[t] = rng.sample_without_replacement(d.out, keep);
      std::sort(plan.kept[t].begin(), plan.kept[t].end());
    }
  }

  FeddropSubmodel sub;
  sub.plan = plan;
  sub.spec = spec;
  std::size_t ti = 0;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    Layer& l = sub.spec.layers[li];
    if (auto* d = std::get_if<Dense>(&l)) {
      const std::size_t out = plan.kept[ti].size();
      const std::size_t in = ti == 0 ? d->in : plan.kept[ti - 1].size();
      d->in = in;
      d->out = out;
      ++ti;
    }
  }
  sub.spec.validate();

  sub.params = make_zero_params(sub.spec);
  for (std::size_t t = 0; t < T; ++t) {
    const auto& gfull = global.blocks[t];
    auto& gsub = sub.params.blocks[t];
    const std::size_t in_full = std::get<Dense>(spec.layers[t_layer[t]]).in;
    const double scale = t == 0 ? 1.0 : plan.rescale;
    for (std::size_t r = 0; r < plan.kept[t].size(); ++r) {
      const std::size_t row = plan.kept[t][r];
      gsub.bias.data[r] = gfull.bias.data[row];
      if (t == 0) {
        for (std::size_t c = 0; c < in_full; ++c)
          gsub.weights.data[r * in_full + c] = gfull.weights.data[row * in_full + c];
      } else {
        const auto& cols = plan.kept[t - 1];
        for (std::size_t c = 0; c < cols.size(); ++c)
          gsub.weights.data[r * cols.size() + c] =
              gfull.weights.data[row * in_full + cols[c]] * scale;
      }
    }
  }
  return sub;
}

struct FeddropUpdate {
  LayerGrads delta;  // in sub-model layout
  DropoutPlan plan;
};

// Every global parameter moves by the mean delta over the devices whose
// sub-model contained it; parameters in no sub-model stay put.
inline LayerParams feddrop_aggregate(const ModelSpec& spec, const LayerParams& global,
                                     const std::vector<FeddropUpdate>& updates) {
  std::vector<std::size_t> t_layer;
  for (std::size_t li = 0; li < spec.layers.size(); ++li)
    if (is_trainable(spec.layers[li])) t_layer.push_back(li);
  const std::size_t T = t_layer.size();

  LayerGrads acc = make_zero_grads(spec);
  LayerGrads cnt = make_zero_grads(spec);
  for (const auto& u : updates) {
    if (u.plan.kept.size() != T) throw Error("feddrop_aggregate: plan/model mismatch");
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t in_full = std::get<Dense>(spec.layers[t_layer[t]]).in;
      const auto& rows = u.plan.kept[t];
      const std::size_t sub_in =
          t == 0 ? in_full : u.plan.kept[t - 1].size();
      if (u.delta.blocks[t].weights.size() != rows.size() * sub_in)
        throw Error("feddrop_aggregate: delta layout mismatch at block " +
                    std::to_string(t));
      const double unscale = t == 0 ? 1.0 : 1.0 / u.plan.rescale;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        acc.blocks[t].bias.data[rows[r]] += u.delta.blocks[t].bias.data[r];
        cnt.blocks[t].bias.data[rows[r]] += 1.0;
        if (t == 0) {
          for (std::size_t c = 0; c < in_full; ++c) {
            acc.blocks[t].weights.data[rows[r] * in_full + c] +=
                u.delta.blocks[t].weights.data[r * in_full + c];
            cnt.blocks[t].weights.data[rows[r] * in_full + c] += 1.0;
          }
        } else {
          const auto& cols = u.plan.kept[t - 1];
          for (std::size_t c = 0; c < cols.size(); ++c) {
            acc.blocks[t].weights.data[rows[r] * in_full + cols[c]] +=
                u.delta.blocks[t].weights.data[r * cols.size() + c] * unscale;
            cnt.blocks[t].weights.data[rows[r] * in_full + cols[c]] += 1.0;
          }
        }
      }
    }
  }

  LayerParams out = global;
  for (std::size_t t = 0; t < T; ++t) {
    auto& w = out.blocks[t].weights.data;
    auto& b = out.blocks[t].bias.data;
    for (std::size_t i = 0; i < w.size(); ++i)
      if (cnt.blocks[t].weights.data[i] > 0.0)
        w[i] -= acc.blocks[t].weights.data[i] / cnt.blocks[t].weights.data[i];
    for (std::size_t i = 0; i < b.size(); ++i)
      if (cnt.blocks[t].bias.data[i] > 0.0)
        b[i] -= acc.blocks[t].bias.data[i] / cnt.blocks[t].bias.data[i];
  }
  return out;
}

}  // namespace fedpmt
