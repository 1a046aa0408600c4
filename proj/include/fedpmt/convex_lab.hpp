#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "fedpmt/error.hpp"
#include "fedpmt/masking.hpp"
#include "fedpmt/rng.hpp"

namespace fedpmt {

// ---------------------------------------------------------------------------
// A strongly convex, block-structured testbed. Device k minimizes
// F_k(w) = 1/2 (w - w_k°)^T Q_k (w - w_k°) with Q_k = A_k^T A_k + mu I, so
// per-device optima are planted and the global optimum has a closed form.
// The parameter vector is split into `num_blocks` equal blocks that play the
// role of layers for masking.
// ---------------------------------------------------------------------------

namespace linalg {

// Cholesky solve for symmetric positive-definite systems, used for the
// closed-form global optimum.
inline std::vector<double> spd_solve(std::vector<double> a, std::vector<double> b,
                                     std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (d <= 0.0) throw Error("spd_solve: matrix not positive definite");
    const double ljj = std::sqrt(d);
    a[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / ljj;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {  // L y = b
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
    b[i] = s / a[i * n + i];
  }
  for (std::size_t ii = n; ii > 0; --ii) {  // L^T x = y
    const std::size_t i = ii - 1;
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
    b[i] = s / a[i * n + i];
  }
  return b;
}

}  // namespace linalg

struct QuadraticTask {
  std::size_t dim = 0;
  std::size_t num_devices = 0;
  std::size_t num_blocks = 0;
  double mu = 1.0;
  std::vector<std::vector<double>> q;           // per-device dim x dim, row-major
  std::vector<std::vector<double>> b;           // Q_k w_k°
  std::vector<std::vector<double>> device_opt;  // w_k° = argmin F_k
  std::vector<double> global_opt;               // argmin of the mean loss
  std::vector<std::size_t> block_offsets;       // num_blocks + 1 entries

  double device_loss(std::size_t k, const std::vector<double>& w) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      double qi = 0.0;
      for (std::size_t j = 0; j < dim; ++j)
        qi += q[k][i * dim + j] * (w[j] - device_opt[k][j]);
      acc += (w[i] - device_opt[k][i]) * qi;
    }
    return 0.5 * acc;
  }

  void device_grad(std::size_t k, const std::vector<double>& w,
                   std::vector<double>& out) const {
    out.assign(dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j)
        out[i] += q[k][i * dim + j] * (w[j] - device_opt[k][j]);
  }

  double global_loss(const std::vector<double>& w) const {
    double acc = 0.0;
    for (std::size_t k = 0; k < num_devices; ++k) acc += device_loss(k, w);
    return acc / static_cast<double>(num_devices);
  }

  double device_opt_value(std::size_t k) const { return device_loss(k, device_opt[k]); }
  double global_opt_value() const { return global_loss(global_opt); }
};

inline QuadraticTask build_quadratic_task(std::size_t num_devices, std::size_t dim,
                                          std::size_t num_blocks, double heterogeneity,
                                          std::uint64_t seed, double mu = 1.0) {
  if (num_devices == 0 || dim == 0 || num_blocks == 0 || dim % num_blocks != 0)
    throw Error("build_quadratic_task: dim must divide into num_blocks");
  if (mu <= 0.0) throw Error("build_quadratic_task: mu must be positive");
  QuadraticTask t;
  t.dim = dim;
  t.num_devices = num_devices;
  t.num_blocks = num_blocks;
  t.mu = mu;
  const std::size_t bs = dim / num_blocks;
  for (std::size_t i = 0; i <= num_blocks; ++i) t.block_offsets.push_back(i * bs);

  Rng rng(derive_seed(seed, 0xC0417u));
  std::vector<double> base(dim);
  for (auto& v : base) v = rng.normal();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<double> a(dim * dim);
  for (std::size_t k = 0; k < num_devices; ++k) {
    for (auto& v : a) v = rng.normal() * scale;
    std::vector<double> qk(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) {
        double s = 0.0;
        for (std::size_t r = 0; r < dim; ++r) s += a[r * dim + i] * a[r * dim + j];
        qk[i * dim + j] = s + (i == j ? mu : 0.0);
      }
    std::vector<double> wk(dim);
    for (std::size_t i = 0; i < dim; ++i) wk[i] = base[i] + heterogeneity * rng.normal();
    std::vector<double> bk(dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) bk[i] += qk[i * dim + j] * wk[j];
    t.q.push_back(std::move(qk));
    t.b.push_back(std::move(bk));
    t.device_opt.push_back(std::move(wk));
  }

  std::vector<double> qsum(dim * dim, 0.0), bsum(dim, 0.0);
  for (std::size_t k = 0; k < num_devices; ++k) {
    for (std::size_t i = 0; i < dim * dim; ++i) qsum[i] += t.q[k][i];
    for (std::size_t i = 0; i < dim; ++i) bsum[i] += t.b[k][i];
  }
  t.global_opt = linalg::spd_solve(std::move(qsum), std::move(bsum), dim);
  return t;
}

// Mean optimal-loss gap: Lambda = mean_k (F(w*) - F_k(w_k*)). Zero exactly
// when every device shares the same optimum.
inline double compute_lambda(const QuadraticTask& t) {
  const double fstar = t.global_opt_value();
  double acc = 0.0;
  for (std::size_t k = 0; k < t.num_devices; ++k)
    acc += fstar - t.device_opt_value(k);
  return acc / static_cast<double>(t.num_devices);
}

// ---------------------------------------------------------------------------
// Splitting constant psi. The statement form is sum_i 1 / (sum_{j>=i} p_j);
// the proof form carries |I||S| inside each term and is the one used in the
// convergence bound.
// ---------------------------------------------------------------------------

struct PsiValue {
  double proof_form = 0.0;
  double statement_form = 0.0;
};

inline PsiValue compute_psi(const std::vector<double>& width_proportions,
                            std::size_t num_selected) {
  const std::size_t widths = width_proportions.size();
  if (widths == 0) throw Error("compute_psi: empty proportions");
  double total = 0.0;
  for (double p : width_proportions) {
    if (p < 0.0) throw Error("compute_psi: negative proportion");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw Error("compute_psi: proportions must sum to 1");
  PsiValue psi;
  for (std::size_t i = 0; i < widths; ++i) {
    double tail = 0.0;
    for (std::size_t j = i; j < widths; ++j) tail += width_proportions[j];
    if (tail <= 0.0)
      throw Error("compute_psi: zero tail mass from width " + std::to_string(i + 1) +
                  " (no device trains the deepest widths)");
    psi.statement_form += 1.0 / tail;
    psi.proof_form +=
        static_cast<double>(widths) * static_cast<double>(num_selected) / tail;
  }
  return psi;
}

// Right-hand side of the convergence bound:
//   (1 / (T + lambda)) * ((lambda + 1) Gamma1 / 2 + 2 Delta / mu^2)
// with Delta = (8 (tau-1)^2 G^2 + 2 L (|I| psi + |S| + eps) Lambda
//               + 2 delta^2 psi) / eps^2.
inline double theorem1_bound(double gamma1, double lambda, std::size_t tau, double g,
                             double l_smooth, double mu, double delta_sq, double eps,
                             double psi, std::size_t num_widths,
                             std::size_t num_selected, double het_lambda,
                             std::size_t rounds) {
  if (eps <= 0.0 || eps > 1.0) throw Error("theorem1_bound: eps must be in (0, 1]");
  if (mu <= 0.0 || lambda <= 0.0) throw Error("theorem1_bound: mu, lambda must be positive");
  const double tau_term = 8.0 * std::pow(static_cast<double>(tau) - 1.0, 2.0) * g * g;
  const double het_term = 2.0 * l_smooth *
                          (static_cast<double>(num_widths) * psi +
                           static_cast<double>(num_selected) + eps) *
                          het_lambda;
  const double var_term = 2.0 * delta_sq * psi;
  const double delta_tilde = (tau_term + het_term + var_term) / (eps * eps);
  return (1.0 / (static_cast<double>(rounds) + lambda)) *
         ((lambda + 1.0) * gamma1 / 2.0 + 2.0 * delta_tilde / (mu * mu));
}

// ---------------------------------------------------------------------------
// Block-masked federated descent on the quadratic task
// ---------------------------------------------------------------------------

struct ConvexRunConfig {
  std::size_t sample_size = 0;      // |S|; 0 means all devices every round
  double eps = 0.5;                 // information-retention factor in the step size
  double lambda = 20.0;             // step-size offset
  std::size_t tau = 1;              // local steps per round
  std::size_t rounds = 10000;       // T
  std::uint64_t seed = 1;
  double gradient_noise_std = 0.0;  // per-coordinate noise on local gradients
  std::size_t fit_lo = 100;         // slope fit window, in rounds
  std::size_t fit_hi = 10000;
};

struct RateFit {
  std::vector<std::pair<std::size_t, double>> gaps;  // (round, F(w^t) - F*), round 0 = start
  double slope = 0.0;
  double intercept = 0.0;
  std::size_t fit_lo = 0, fit_hi = 0;
  double max_grad_norm_sq = 0.0;  // largest local gradient norm seen (G^2 estimate)
};

// Runs T rounds of block-masked federated descent with the diminishing step
// size eta_t = 2 / (mu eps (t + lambda)). Each round samples |S| devices and
// deals the menu widths across them evenly (shuffled). Throws DivergenceError
// if the gap grows tenfold over its starting value.
inline RateFit run_convex_fedpmt(const QuadraticTask& task, const WidthMenu& menu,
                                 const ConvexRunConfig& cfg) {
  if (menu.num_layers() != task.num_blocks)
    throw Error("run_convex_fedpmt: menu does not match task blocks");
  if (cfg.eps <= 0.0 || cfg.eps > 1.0) throw Error("run_convex_fedpmt: eps in (0, 1]");
  if (cfg.lambda <= 0.0) throw Error("run_convex_fedpmt: lambda must be positive");
  if (cfg.tau == 0) throw Error("run_convex_fedpmt: tau must be at least 1");
  const std::size_t s_count =
      cfg.sample_size == 0 ? task.num_devices : cfg.sample_size;
  if (s_count > task.num_devices) throw Error("run_convex_fedpmt: |S| exceeds devices");

  const std::size_t dim = task.dim;
  const std::size_t widths = menu.num_widths();
  std::vector<double> w(dim, 0.0);
  const double fstar = task.global_opt_value();

  RateFit fit;
  fit.fit_lo = cfg.fit_lo;
  fit.fit_hi = cfg.fit_hi;
  const double gap0 = task.global_loss(w) - fstar;
  fit.gaps.emplace_back(0, gap0);

  Rng rng(derive_seed(cfg.seed, 0xC0FEEu));
  std::vector<std::size_t> width_deck(s_count);
  for (std::size_t i = 0; i < s_count; ++i) width_deck[i] = i % widths;

  std::vector<double> grad(dim), local(dim), delta(dim), agg(dim);
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    const double eta = 2.0 / (task.mu * cfg.eps * (static_cast<double>(t) + cfg.lambda));
    const auto sel = rng.sample_without_replacement(task.num_devices, s_count);
    rng.shuffle(width_deck);

    std::vector<double> ones_per_block(task.num_blocks, 0.0);
    for (std::size_t i = 0; i < s_count; ++i) {
      const auto& mask = menu.masks[width_deck[i]];
      for (std::size_t blk = 0; blk < task.num_blocks; ++blk)
        ones_per_block[blk] += mask.bits[blk] ? 1.0 : 0.0;
    }

    std::fill(agg.begin(), agg.end(), 0.0);
    for (std::size_t i = 0; i < s_count; ++i) {
      const std::size_t k = sel[i];
      const auto& mask = menu.masks[width_deck[i]];
      local = w;
      for (std::size_t step = 0; step < cfg.tau; ++step) {
        task.device_grad(k, local, grad);
        if (cfg.gradient_noise_std > 0.0)
          for (double& g : grad) g += cfg.gradient_noise_std * rng.normal();
        double norm_sq = 0.0;
        for (double g : grad) norm_sq += g * g;
        fit.max_grad_norm_sq = std::max(fit.max_grad_norm_sq, norm_sq);
        for (std::size_t blk = 0; blk < task.num_blocks; ++blk) {
          if (!mask.bits[blk]) continue;
          for (std::size_t j = task.block_offsets[blk]; j < task.block_offsets[blk + 1];
               ++j)
            local[j] -= eta * grad[j];
        }
      }
      for (std::size_t blk = 0; blk < task.num_blocks; ++blk) {
        if (!mask.bits[blk] || ones_per_block[blk] <= 0.0) continue;
        const double a = 1.0 / ones_per_block[blk];
        for (std::size_t j = task.block_offsets[blk]; j < task.block_offsets[blk + 1];
             ++j)
          agg[j] += a * (w[j] - local[j]);
      }
    }
    for (std::size_t j = 0; j < dim; ++j) w[j] -= agg[j];

    const double gap = task.global_loss(w) - fstar;
    fit.gaps.emplace_back(t, gap);
    if (gap > 10.0 * gap0 && gap0 > 0.0)
      throw DivergenceError("convex run diverged at round " + std::to_string(t) +
                            " (gap " + std::to_string(gap) + " vs start " +
                            std::to_string(gap0) + "); reduce the step scale");
  }

  // Least-squares fit of log gap against log (t + lambda) over the window.
  // Rounds are first averaged within log-spaced bins so every decade carries
  // comparable weight in the fit.
  std::vector<double> xs, ys;
  for (const auto& [t, gap] : fit.gaps) {
    if (t < fit.fit_lo || t > fit.fit_hi || gap <= 0.0) continue;
    xs.push_back(std::log(static_cast<double>(t) + cfg.lambda));
    ys.push_back(std::log(gap));
  }
  if (xs.size() >= 2) {
    const std::size_t nbins = std::min<std::size_t>(40, xs.size());
    const double xmin = xs.front(), xmax = xs.back();
    std::vector<double> bx(nbins, 0.0), by(nbins, 0.0), bn(nbins, 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      std::size_t bin = xmax > xmin
                            ? static_cast<std::size_t>((xs[i] - xmin) / (xmax - xmin) *
                                                       static_cast<double>(nbins))
                            : 0;
      if (bin >= nbins) bin = nbins - 1;
      bx[bin] += xs[i];
      by[bin] += ys[i];
      bn[bin] += 1.0;
    }
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0, n = 0.0;
    for (std::size_t b = 0; b < nbins; ++b) {
      if (bn[b] == 0.0) continue;
      const double x = bx[b] / bn[b], y = by[b] / bn[b];
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
      n += 1.0;
    }
    if (n >= 2.0) {
      fit.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
      fit.intercept = (sy - fit.slope * sx) / n;
    }
  }
  return fit;
}

// Largest eigenvalue over the device Hessians (power iteration); the
// smoothness constant of the task.
inline double estimate_smoothness(const QuadraticTask& task, std::uint64_t seed = 7) {
  double lmax = 0.0;
  Rng rng(seed);
  std::vector<double> v(task.dim), nv(task.dim);
  for (std::size_t k = 0; k < task.num_devices; ++k) {
    for (auto& x : v) x = rng.normal();
    double eig = 0.0;
    for (int it = 0; it < 200; ++it) {
      for (std::size_t i = 0; i < task.dim; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < task.dim; ++j) s += task.q[k][i * task.dim + j] * v[j];
        nv[i] = s;
      }
      double norm = 0.0;
      for (double x : nv) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) break;
      for (std::size_t i = 0; i < task.dim; ++i) v[i] = nv[i] / norm;
      eig = norm;
    }
    lmax = std::max(lmax, eig);
  }
  return lmax;
}

}  // namespace fedpmt
