#pragma once

// Test-only reference implementations, written independently of the library
// internals: straight per-sample loops over dense stacks plus a central
// finite-difference gradient. Used as oracles, never by the library itself.

#include <cmath>
#include <vector>

#include "fedpmt/nn.hpp"

namespace oracle {

// Per-sample forward for dense/relu/flatten/softmax models; returns the mean
// cross-entropy over the batch.
inline double naive_loss(const fedpmt::ModelSpec& spec, const fedpmt::LayerParams& params,
                         const std::vector<std::vector<double>>& xs,
                         const std::vector<int>& ys) {
  double total = 0.0;
  for (std::size_t s = 0; s < xs.size(); ++s) {
    std::vector<double> act = xs[s];
    std::size_t block = 0;
    for (const auto& layer : spec.layers) {
      if (const auto* d = std::get_if<fedpmt::Dense>(&layer)) {
        std::vector<double> next(d->out, 0.0);
        for (std::size_t o = 0; o < d->out; ++o) {
          double acc = params.blocks[block].bias.data[o];
          for (std::size_t i = 0; i < d->in; ++i)
            acc += params.blocks[block].weights.data[o * d->in + i] * act[i];
          next[o] = acc;
        }
        act = next;
        ++block;
      } else if (std::holds_alternative<fedpmt::Relu>(layer)) {
        for (double& v : act) v = std::max(0.0, v);
      } else if (std::holds_alternative<fedpmt::Flatten>(layer)) {
        // dense oracle activations are already flat
      } else if (std::holds_alternative<fedpmt::SoftmaxXent>(layer)) {
        double mx = act[0];
        for (double v : act) mx = std::max(mx, v);
        double denom = 0.0;
        for (double v : act) denom += std::exp(v - mx);
        total += -(act[ys[s]] - mx - std::log(denom));
      } else {
        throw std::runtime_error("naive_loss: unsupported layer");
      }
    }
  }
  return total / static_cast<double>(xs.size());
}

inline std::pair<double, double> naive_evaluate(const fedpmt::ModelSpec& spec,
                                                const fedpmt::LayerParams& params,
                                                const fedpmt::Dataset& ds) {
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t s = 0; s < ds.size(); ++s) {
    std::vector<double> x(ds.sample(s), ds.sample(s) + ds.feature_size());
    std::vector<double> act = x;
    std::size_t block = 0;
    for (const auto& layer : spec.layers) {
      if (const auto* d = std::get_if<fedpmt::Dense>(&layer)) {
        std::vector<double> next(d->out, 0.0);
        for (std::size_t o = 0; o < d->out; ++o) {
          double acc = params.blocks[block].bias.data[o];
          for (std::size_t i = 0; i < d->in; ++i)
            acc += params.blocks[block].weights.data[o * d->in + i] * act[i];
          next[o] = acc;
        }
        act = next;
        ++block;
      } else if (std::holds_alternative<fedpmt::Relu>(layer)) {
        for (double& v : act) v = std::max(0.0, v);
      } else if (std::holds_alternative<fedpmt::SoftmaxXent>(layer)) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < act.size(); ++i)
          if (act[i] > act[best]) best = i;
        if (static_cast<int>(best) == ds.labels[s]) ++correct;
        double mx = act[0];
        for (double v : act) mx = std::max(mx, v);
        double denom = 0.0;
        for (double v : act) denom += std::exp(v - mx);
        loss_sum += -(act[ds.labels[s]] - mx - std::log(denom));
      }
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(ds.size()),
          loss_sum / static_cast<double>(ds.size())};
}

// Central finite differences of the batch loss with respect to every
// parameter, via the library's forward pass only.
inline fedpmt::LayerGrads fd_gradient(const fedpmt::ModelSpec& spec,
                                      fedpmt::LayerParams params,
                                      const fedpmt::Tensor& bx,
                                      const std::vector<int>& by, double h = 1e-5) {
  fedpmt::LayerGrads g = fedpmt::make_zero_grads(spec);
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    for (int part = 0; part < 2; ++part) {
      auto& vec = part == 0 ? params.blocks[b].weights.data : params.blocks[b].bias.data;
      auto& gvec = part == 0 ? g.blocks[b].weights.data : g.blocks[b].bias.data;
      for (std::size_t i = 0; i < vec.size(); ++i) {
        const double orig = vec[i];
        vec[i] = orig + h;
        const double lp = fedpmt::forward(spec, params, bx, by).first;
        vec[i] = orig - h;
        const double lm = fedpmt::forward(spec, params, bx, by).first;
        vec[i] = orig;
        gvec[i] = (lp - lm) / (2.0 * h);
      }
    }
    g.updated[b] = 1;
  }
  return g;
}

}  // namespace oracle
