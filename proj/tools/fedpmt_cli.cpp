// Command-line front end: `run` executes a federated experiment from a config
// file, `cost` prints per-width FLOP tables, `convex-lab` runs the quadratic
// convergence testbed.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "fedpmt/config.hpp"
#include "fedpmt/convex_lab.hpp"
#include "fedpmt/cost_model.hpp"
#include "fedpmt/simulation.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct BuiltinArch {
  std::string arch;
  std::size_t batch;
  std::size_t widths;
};

fedpmt::ModelSpec builtin_spec(const std::string& name, BuiltinArch& info) {
  if (name == "fcnn_mnist") {
    info = {"input:784,dense:784:400,relu,dense:400:300,relu,dense:300:200,relu,"
            "dense:200:100,relu,dense:100:10,softmax:10",
            12, 4};
  } else if (name == "cnn_mnist") {
    info = {"input:1:28:28,conv:1:8:5,relu,pool:2,conv:8:16:5,relu,pool:2,flatten,"
            "dense:256:128,relu,dense:128:10,softmax:10",
            12, 4};
  } else if (name == "cnn_cifar10") {
    info = {"input:3:32:32,conv:3:16:5,relu,pool:2,conv:16:32:5,relu,pool:2,flatten,"
            "dense:800:500,relu,dense:500:300,relu,dense:300:10,softmax:10",
            20, 5};
  } else {
    info = {name, 0, 0};  // treat as a literal layer list
  }
  return fedpmt::parse_model_arch(info.arch);
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw fedpmt::Error("cannot write " + p.string());
  f << content;
}

std::string report_text(const fedpmt::CostReport& rep) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "%s (batch %zu)\n", rep.arch.c_str(), rep.batch);
  out += buf;
  std::snprintf(buf, sizeof(buf), "  %-44s %14s %9s %12s %14s\n", "width", "flops",
                "ratio", "drop rate", "drop flops");
  out += buf;
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof(buf), "  %-44s %14llu %8.2f%% %12.4f %14llu\n",
                  r.label.c_str(), r.flops, 100.0 * r.ratio, r.feddrop_rate,
                  r.feddrop_flops);
    out += buf;
  }
  return out;
}

std::string report_csv(const std::vector<fedpmt::CostReport>& reps) {
  std::string out = "arch,batch,width_label,flops,ratio,feddrop_rate,feddrop_flops\n";
  char buf[256];
  for (const auto& rep : reps)
    for (const auto& r : rep.rows) {
      std::snprintf(buf, sizeof(buf), "%s,%zu,%s,%llu,%.6f,%.6f,%llu\n",
                    rep.arch.c_str(), rep.batch, r.label.c_str(), r.flops, r.ratio,
                    r.feddrop_rate, r.feddrop_flops);
      out += buf;
    }
  return out;
}

int cmd_cost(const std::string& arch, std::size_t batch, std::size_t widths,
             const std::string& out_dir) {
  std::vector<std::string> names;
  if (arch == "all")
    names = {"fcnn_mnist", "cnn_mnist", "cnn_cifar10"};
  else
    names = {arch};

  std::vector<fedpmt::CostReport> reports;
  for (const auto& name : names) {
    BuiltinArch info;
    fedpmt::ModelSpec spec = builtin_spec(name, info);
    const std::size_t b = batch ? batch : (info.batch ? info.batch : 1);
    const std::size_t w = widths ? widths : (info.widths ? info.widths : spec.trainable_count());
    fedpmt::WidthMenu menu = fedpmt::build_width_menu(spec.trainable_count(), w);
    reports.push_back(fedpmt::cost_report(name, spec, b, menu));
    std::cout << report_text(reports.back()) << "\n";
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "cost_report.csv", report_csv(reports));
    std::cout << "wrote " << (fs::path(out_dir) / "cost_report.csv").string() << "\n";
  }
  return 0;
}

int cmd_run(const std::string& config_path, std::uint64_t seed_override, bool has_seed,
            const std::string& out_dir) {
  fedpmt::ExperimentConfig cfg = fedpmt::load_config(config_path);
  if (has_seed) cfg.seed = seed_override;
  const fedpmt::RunResult res = fedpmt::run_experiment(cfg);

  json summary;
  summary["seed"] = cfg.seed;
  summary["strategy"] = cfg.strategy;
  summary["rounds"] = cfg.rounds;
  summary["final_accuracy"] = res.final_accuracy;
  summary["final_loss"] = res.final_loss;
  summary["width_ratios"] = res.width_ratios_used;
  if (!res.feddrop_rates_used.empty()) summary["feddrop_rates"] = res.feddrop_rates_used;
  json tta = json::object();
  for (double target : cfg.accuracy_targets) {
    const auto t = fedpmt::time_to_accuracy(res.records, target);
    tta[fedpmt::format_fixed6(target)] = t ? json(*t) : json(nullptr);
  }
  summary["time_to_accuracy"] = tta;
  json echo = json::object();
  for (const auto& [k, v] : cfg.raw) echo[k] = v;
  summary["config"] = echo;

  fs::create_directories(out_dir.empty() ? "." : out_dir);
  const fs::path dir = out_dir.empty() ? "." : out_dir;
  write_file(dir / "metrics.csv", fedpmt::metrics_csv(res.records));
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << "final accuracy " << fedpmt::format_fixed6(res.final_accuracy)
            << ", total simulated seconds "
            << fedpmt::format_fixed6(res.records.back().cumulative_seconds) << "\n"
            << "wrote " << (dir / "metrics.csv").string() << " and "
            << (dir / "summary.json").string() << "\n";
  return 0;
}

int cmd_convex(std::size_t dim, std::size_t blocks, std::size_t devices,
               std::size_t widths, std::size_t sample, double het, double eps,
               double lambda, std::size_t tau, std::size_t rounds, double noise,
               std::vector<std::uint64_t> seeds, std::size_t fit_lo, std::size_t fit_hi,
               const std::string& out_dir) {
  using namespace fedpmt;
  const QuadraticTask task = build_quadratic_task(devices, dim, blocks, het, 1234);
  const WidthMenu menu = build_width_menu(blocks, widths);
  const double lam_het = compute_lambda(task);
  const std::size_t s_count = sample == 0 ? devices : sample;
  std::vector<double> props(widths, 0.0);
  for (std::size_t i = 0; i < s_count; ++i) props[i % widths] += 1.0 / s_count;
  const PsiValue psi = compute_psi(props, s_count);

  json out;
  out["task"] = {{"dim", dim},       {"blocks", blocks},   {"devices", devices},
                 {"heterogeneity", het}, {"mu", task.mu},  {"lambda_het", lam_het},
                 {"psi_proof", psi.proof_form}, {"psi_statement", psi.statement_form}};
  json runs = json::array();
  if (!out_dir.empty()) fs::create_directories(out_dir);

  for (std::uint64_t seed : seeds) {
    ConvexRunConfig cfg;
    cfg.sample_size = s_count;
    cfg.eps = eps;
    cfg.lambda = lambda;
    cfg.tau = tau;
    cfg.rounds = rounds;
    cfg.seed = seed;
    cfg.gradient_noise_std = noise;
    cfg.fit_lo = fit_lo;
    cfg.fit_hi = fit_hi;
    const RateFit fit = run_convex_fedpmt(task, menu, cfg);

    double gamma1 = 0.0;
    for (std::size_t i = 0; i < dim; ++i) gamma1 += task.global_opt[i] * task.global_opt[i];
    const double smooth = estimate_smoothness(task);
    const double bound = theorem1_bound(
        gamma1, lambda, tau, std::sqrt(fit.max_grad_norm_sq), smooth, task.mu,
        noise * noise * static_cast<double>(dim), eps, psi.proof_form, widths, s_count,
        lam_het, rounds);

    json jr;
    jr["seed"] = seed;
    jr["slope"] = fit.slope;
    jr["intercept"] = fit.intercept;
    jr["final_gap"] = fit.gaps.back().second;
    jr["initial_gap"] = fit.gaps.front().second;
    jr["bound_at_T"] = bound;
    jr["bound_holds"] = fit.gaps.back().second <= bound;
    runs.push_back(jr);
    std::cout << "seed " << seed << ": slope " << fit.slope << ", final gap "
              << fit.gaps.back().second << ", bound at T " << bound << "\n";

    if (!out_dir.empty()) {
      std::string csv = "round,gap\n";
      char buf[64];
      for (const auto& [t, gap] : fit.gaps) {
        std::snprintf(buf, sizeof(buf), "%zu,%.12e\n", t, gap);
        csv += buf;
      }
      write_file(fs::path(out_dir) / ("convex_seed" + std::to_string(seed) + "_w" +
                                      std::to_string(widths) + ".csv"),
                 csv);
    }
  }
  out["runs"] = runs;
  if (!out_dir.empty())
    write_file(fs::path(out_dir) / "convex_summary.json", out.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic federated-learning simulator with layer-wise partial "
               "model training"};
  app.require_subcommand(1);

  // run
  std::string config_path, out_dir = "out";
  std::uint64_t seed = 0;
  auto* run = app.add_subcommand("run", "run an experiment from a config file");
  run->add_option("--config", config_path, "config file path")->required();
  auto* seed_opt = run->add_option("--seed", seed, "override the config seed");
  run->add_option("--out-dir", out_dir, "output directory");

  // cost
  std::string arch = "all";
  std::size_t batch = 0, widths = 0;
  std::string cost_out;
  auto* cost = app.add_subcommand("cost", "print per-width FLOP tables");
  cost->add_option("--arch", arch,
                   "fcnn_mnist | cnn_mnist | cnn_cifar10 | all | layer list");
  cost->add_option("--batch", batch, "mini-batch size (default per arch)");
  cost->add_option("--widths", widths, "menu size (default per arch)");
  cost->add_option("--out-dir", cost_out, "also write cost_report.csv here");

  // convex-lab
  std::size_t dim = 48, blocks = 3, devices = 10, cwidths = 3, sample = 6, tau = 1,
              rounds = 10000, fit_lo = 100, fit_hi = 10000;
  double het = 1.0, eps = 0.5, lambda = 20.0, noise = 0.0;
  std::vector<std::uint64_t> seeds = {1};
  std::string convex_out;
  auto* convex = app.add_subcommand("convex-lab", "quadratic convergence testbed");
  convex->add_option("--dim", dim, "parameter dimension");
  convex->add_option("--blocks", blocks, "number of layer blocks");
  convex->add_option("--devices", devices, "number of devices");
  convex->add_option("--widths", cwidths, "menu size over the blocks");
  convex->add_option("--sample", sample, "devices sampled per round (0 = all)");
  convex->add_option("--het", het, "device heterogeneity");
  convex->add_option("--eps", eps, "information-retention factor in the step size");
  convex->add_option("--lambda", lambda, "step-size offset");
  convex->add_option("--tau", tau, "local steps per round");
  convex->add_option("--rounds", rounds, "number of rounds");
  convex->add_option("--noise", noise, "gradient noise stddev");
  convex->add_option("--seeds", seeds, "seeds to run")->delimiter(',');
  convex->add_option("--fit-lo", fit_lo, "fit window start round");
  convex->add_option("--fit-hi", fit_hi, "fit window end round");
  convex->add_option("--out-dir", convex_out, "write gap CSVs and fit summary here");

  CLI11_PARSE(app, argc, argv);
  try {
    if (run->parsed()) return cmd_run(config_path, seed, seed_opt->count() > 0, out_dir);
    if (cost->parsed()) return cmd_cost(arch, batch, widths, cost_out);
    if (convex->parsed())
      return cmd_convex(dim, blocks, devices, cwidths, sample, het, eps, lambda, tau,
                        rounds, noise, seeds, fit_lo, fit_hi, convex_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
