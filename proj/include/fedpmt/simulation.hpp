#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedpmt/aggregation.hpp"
#include "fedpmt/config.hpp"
#include "fedpmt/cost_model.hpp"
#include "fedpmt/data.hpp"
#include "fedpmt/masking.hpp"
#include "fedpmt/nn.hpp"
#include "fedpmt/strategies.hpp"

namespace fedpmt {

// ---------------------------------------------------------------------------
// Device sampling
// ---------------------------------------------------------------------------

// Uniform without replacement, deterministic under (seed, round); ids ascend.
inline std::vector<std::size_t> sample_devices(std::size_t total, std::size_t count,
                                               std::uint64_t round, std::uint64_t seed) {
  if (count > total) throw Error("sample_devices: |S| exceeds |K|");
  Rng rng(derive_seed(seed, 0x5E1Ec7u, round));
  auto ids = rng.sample_without_replacement(total, count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Stratified variant: an equal share from every tier group.
inline std::vector<std::size_t> sample_devices_stratified(
    const std::vector<std::vector<std::size_t>>& tier_groups, std::size_t count,
    std::uint64_t round, std::uint64_t seed) {
  if (tier_groups.empty() || count % tier_groups.size() != 0)
    throw Error("stratified sampling needs |S| divisible by the tier count");
  const std::size_t share = count / tier_groups.size();
  Rng rng(derive_seed(seed, 0x5E1Ec7u, round));
  std::vector<std::size_t> ids;
  for (const auto& group : tier_groups) {
    if (share > group.size())
      throw Error("stratified sampling: tier smaller than its share");
    for (std::size_t pos : rng.sample_without_replacement(group.size(), share))
      ids.push_back(group[pos]);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Per-tier selection counts, keyed by tier index.
inline std::vector<std::size_t> tier_balance(const std::vector<std::size_t>& selected,
                                             const std::vector<std::size_t>& tier_of,
                                             std::size_t num_tiers) {
  std::vector<std::size_t> counts(num_tiers, 0);
  for (std::size_t id : selected) {
    if (id >= tier_of.size()) throw Error("tier_balance: unknown device id");
    ++counts[tier_of[id]];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Experiment loop
// ---------------------------------------------------------------------------

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> selected;        // device ids, ascending
  std::vector<std::size_t> widths;          // width index per selected device
  std::vector<double> device_seconds;       // per selected device
  std::vector<std::size_t> included;        // positions into `selected`
  double round_seconds = 0.0;
  double cumulative_seconds = 0.0;
  bool empty_round = false;
  bool evaluated = false;
  double accuracy = 0.0;
  double loss = 0.0;
};

struct RunResult {
  ModelSpec spec;
  LayerParams params;
  std::vector<RoundRecord> records;
  std::vector<double> width_ratios_used;
  std::vector<double> feddrop_rates_used;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
};

inline std::optional<double> time_to_accuracy(const std::vector<RoundRecord>& records,
                                              double target) {
  for (const auto& r : records)
    if (r.evaluated && r.accuracy >= target) return r.cumulative_seconds;
  return std::nullopt;
}

inline RunResult run_experiment(const ExperimentConfig& cfg) {
  // data
  Dataset train, test;
  if (cfg.dataset_kind == "synthetic") {
    train = generate_synthetic(cfg.classes, cfg.dim, cfg.samples_per_class,
                               cfg.separation, cfg.data_seed, 0);
    test = generate_synthetic(cfg.classes, cfg.dim, cfg.test_samples_per_class,
                              cfg.separation, cfg.data_seed, 1);
  } else {
    train = load_idx(cfg.idx_images, cfg.idx_labels);
    test = load_idx(cfg.idx_test_images, cfg.idx_test_labels);
  }
  Partition part = cfg.partition_kind == "iid"
                       ? partition_iid(train, cfg.num_devices, cfg.per_device,
                                       cfg.data_seed)
                       : partition_noniid_2class(train, cfg.num_devices, cfg.per_device,
                                                 cfg.data_seed);

  // model
  ModelSpec spec = parse_model_arch(cfg.model_arch);
  if (Tensor::element_count(spec.input_shape) != train.feature_size())
    throw ConfigError("model input size does not match dataset features");
  LayerParams params = init_params(spec, derive_seed(cfg.seed, 0x1217u));

  // menu and per-width constants
  const std::size_t trainables = spec.trainable_count();
  WidthMenu menu = cfg.strategy == "fedavg"
                       ? build_width_menu(trainables, 1)
                       : build_width_menu(trainables, cfg.num_widths, cfg.layer_counts);
  std::vector<double> ratios =
      cfg.time_ratios ? *cfg.time_ratios
                      : width_ratios(spec, cfg.batch_size, menu, CountingMode::kTable);
  if (ratios.size() != menu.num_widths())
    throw ConfigError("time.ratios must have one entry per width");

  std::vector<double> drop_rates;
  if (cfg.strategy == "feddrop") {
    if (cfg.feddrop_rates) {
      drop_rates = *cfg.feddrop_rates;
      if (drop_rates.size() != menu.num_widths())
        throw ConfigError("feddrop.rates must have one entry per width");
    } else {
      const CostBreakdown cb = model_cost(spec, cfg.batch_size, CountingMode::kTable);
      for (std::size_t w = 0; w < menu.num_widths(); ++w) {
        if (w + 1 == menu.num_widths()) {
          drop_rates.push_back(1.0);
        } else {
          drop_rates.push_back(
              feddrop_match_rate(cb.total(menu.masks[w].bits), spec, cfg.batch_size));
        }
      }
    }
  }

  // device profiles and width assignment (fixed per device: kappa is static)
  std::vector<DeviceProfile> profiles;
  std::vector<std::size_t> tier_of(cfg.num_devices);
  std::vector<std::vector<std::size_t>> tier_groups(cfg.kappas.size());
  for (std::size_t d = 0; d < cfg.num_devices; ++d) {
    const std::size_t tier = d % cfg.kappas.size();
    profiles.push_back(DeviceProfile{d, cfg.kappas[tier], cfg.per_device,
                                     cfg.local_epochs});
    tier_of[d] = tier;
    tier_groups[tier].push_back(d);
  }
  WidthAssignment assignment =
      cfg.strategy == "fedavg"
          ? WidthAssignment{std::vector<std::size_t>(cfg.num_devices, 0),
                            Provenance::kServerAssigned,
                            std::vector<std::uint8_t>(cfg.num_devices, 0)}
          : (cfg.fedpmt_option == 2 ? fedpmt_assign_option2(profiles, menu)
                                    : fedpmt_assign_option1(profiles, menu));

  const std::size_t tau =
      cfg.local_steps ? *cfg.local_steps
                      : cfg.local_epochs * ((cfg.per_device + cfg.batch_size - 1) /
                                            cfg.batch_size);

  RunResult out;
  out.spec = spec;
  out.width_ratios_used = ratios;
  out.feddrop_rates_used = drop_rates;
  double cumulative = 0.0;

  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    RoundRecord rec;
    rec.round = t;
    rec.selected = cfg.stratified
                       ? sample_devices_stratified(tier_groups, cfg.sample_size, t,
                                                   cfg.seed)
                       : sample_devices(cfg.num_devices, cfg.sample_size, t, cfg.seed);
    for (std::size_t id : rec.selected)
      rec.widths.push_back(assignment.width_by_device[id]);

    std::vector<DeviceProfile> sel_profiles;
    for (std::size_t id : rec.selected) sel_profiles.push_back(profiles[id]);
    const RoundTiming timing =
        round_time(rec.widths, ratios, sel_profiles, cfg.base_full_time);
    rec.device_seconds = timing.device_seconds;

    if (cfg.deadline) {
      const DeadlineResult dl = apply_deadline(timing.device_seconds, *cfg.deadline);
      rec.included = dl.included;
      rec.round_seconds = dl.round_seconds;
      rec.empty_round = dl.empty_round;
    } else {
      for (std::size_t i = 0; i < rec.selected.size(); ++i) rec.included.push_back(i);
      rec.round_seconds = timing.round_seconds;
    }

    if (!rec.empty_round) {
      if (cfg.strategy == "feddrop") {
        std::vector<FeddropUpdate> updates;
        for (std::size_t pos : rec.included) {
          const std::size_t id = rec.selected[pos];
          const double rate = drop_rates[rec.widths[pos]];
          FeddropSubmodel sub = feddrop_generate(
              spec, params, rate, derive_seed(cfg.seed, 0xD80Fu, t, id));
          LocalUpdateResult lur =
              local_update(sub.spec, sub.params, train, part.device_indices[id],
                           menu.full(), cfg.eta, tau, cfg.batch_size,
                           derive_seed(cfg.seed, 0x10CA1u, t, id));
          updates.push_back(FeddropUpdate{std::move(lur.delta), std::move(sub.plan)});
        }
        params = feddrop_aggregate(spec, params, updates);
      } else {
        std::vector<LayerGrads> updates;
        std::vector<BpMask> masks;
        for (std::size_t pos : rec.included) {
          const std::size_t id = rec.selected[pos];
          const BpMask& mask = menu.masks[rec.widths[pos]];
          LocalUpdateResult lur =
              local_update(spec, params, train, part.device_indices[id], mask, cfg.eta,
                           tau, cfg.batch_size, derive_seed(cfg.seed, 0x10CA1u, t, id));
          updates.push_back(std::move(lur.delta));
          masks.push_back(mask);
        }
        params = aggregate(params, updates, masks);
      }
    }

    cumulative += rec.round_seconds;
    rec.cumulative_seconds = cumulative;

    if (cfg.eval_every > 0 && t % cfg.eval_every == 0) {
      const EvalResult er = evaluate_samples(
          spec, params, test.size(),
          [&](std::size_t i) { return std::make_pair(test.sample(i), test.labels[i]); });
      rec.evaluated = true;
      rec.accuracy = er.accuracy;
      rec.loss = er.mean_loss;
      out.final_accuracy = er.accuracy;
      out.final_loss = er.mean_loss;
    }
    out.records.push_back(std::move(rec));
  }
  out.params = std::move(params);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics persistence
// ---------------------------------------------------------------------------

inline std::string format_fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// One row per round; accuracy/loss cells are empty on rounds without an
// evaluation.
inline std::string metrics_csv(const std::vector<RoundRecord>& records) {
  std::string out =
      "round,cumulative_seconds,round_seconds,num_selected,num_included,accuracy,loss\n";
  for (const auto& r : records) {
    out += std::to_string(r.round) + "," + format_fixed6(r.cumulative_seconds) + "," +
           format_fixed6(r.round_seconds) + "," + std::to_string(r.selected.size()) +
           "," + std::to_string(r.included.size()) + ",";
    if (r.evaluated)
      out += format_fixed6(r.accuracy) + "," + format_fixed6(r.loss);
    else
      out += ",";
    out += "\n";
  }
  return out;
}

}  // namespace fedpmt
