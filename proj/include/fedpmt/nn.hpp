#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include "fedpmt/error.hpp"
#include "fedpmt/rng.hpp"
#include "fedpmt/tensor.hpp"

namespace fedpmt {

// ---------------------------------------------------------------------------
// Layer descriptors. A model is an ordered list of these; Dense and Conv2d
// carry trainable parameters, everything else is shape/activation plumbing.
// ---------------------------------------------------------------------------

struct Dense {
  std::size_t in = 0, out = 0;
};
struct Conv2d {
  std::size_t in_channels = 0, out_channels = 0, kernel = 0;
  std::size_t stride = 1, padding = 0;
};
struct MaxPool2d {
  std::size_t window = 0;
};
struct Relu {};
struct Flatten {};
struct SoftmaxXent {
  std::size_t classes = 0;
};

using Layer = std::variant<Dense, Conv2d, MaxPool2d, Relu, Flatten, SoftmaxXent>;

inline bool is_trainable(const Layer& l) {
  return std::holds_alternative<Dense>(l) || std::holds_alternative<Conv2d>(l);
}

struct ModelSpec {
  std::vector<std::size_t> input_shape;  // per-sample, e.g. {784} or {3,32,32}
  std::vector<Layer> layers;

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += is_trainable(l) ? 1 : 0;
    return n;
  }

  std::size_t num_classes() const {
    return std::get<SoftmaxXent>(layers.back()).classes;
  }

  // Per-sample output shape of every layer; throws ShapeError at the first
  // layer whose input does not compose.
  std::vector<std::vector<std::size_t>> layer_output_shapes() const;
  void validate() const { (void)layer_output_shapes(); }
};

inline std::vector<std::vector<std::size_t>> ModelSpec::layer_output_shapes() const {
  if (layers.empty()) throw Error("model has no layers");
  std::vector<std::vector<std::size_t>> shapes;
  std::vector<std::size_t> cur = input_shape;
  std::size_t softmax_seen = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (std::holds_alternative<SoftmaxXent>(l) && i + 1 != layers.size())
      throw ShapeError("softmax-xent must be the final layer (found at layer " +
                           std::to_string(i) + ")",
                       i);
    if (const auto* d = std::get_if<Dense>(&l)) {
      if (cur.size() != 1 || cur[0] != d->in)
        throw ShapeError("layer " + std::to_string(i) + ": dense expects (" +
                             std::to_string(d->in) + "), got " + shape_string(cur),
                         i);
      cur = {d->out};
    } else if (const auto* c = std::get_if<Conv2d>(&l)) {
      if (cur.size() != 3 || cur[0] != c->in_channels)
        throw ShapeError("layer " + std::to_string(i) + ": conv expects " +
                             std::to_string(c->in_channels) + " channels, got " +
                             shape_string(cur),
                         i);
      const std::size_t h = cur[1], w = cur[2];
      if (h + 2 * c->padding < c->kernel || w + 2 * c->padding < c->kernel)
        throw ShapeError("layer " + std::to_string(i) + ": kernel larger than input",
                         i);
      const std::size_t oh = (h - c->kernel + 2 * c->padding) / c->stride + 1;
      const std::size_t ow = (w - c->kernel + 2 * c->padding) / c->stride + 1;
      cur = {c->out_channels, oh, ow};
    } else if (const auto* p = std::get_if<MaxPool2d>(&l)) {
      if (cur.size() != 3 || cur[1] < p->window || cur[2] < p->window)
        throw ShapeError("layer " + std::to_string(i) + ": pool does not fit " +
                             shape_string(cur),
                         i);
      cur = {cur[0], cur[1] / p->window, cur[2] / p->window};
    } else if (std::holds_alternative<Relu>(l)) {
      // shape preserved
    } else if (std::holds_alternative<Flatten>(l)) {
      cur = {Tensor::element_count(cur)};
    } else if (const auto* s = std::get_if<SoftmaxXent>(&l)) {
      ++softmax_seen;
      if (cur.size() != 1 || cur[0] != s->classes)
        throw ShapeError("layer " + std::to_string(i) + ": softmax expects (" +
                             std::to_string(s->classes) + "), got " + shape_string(cur),
                         i);
    }
    shapes.push_back(cur);
  }
  if (softmax_seen != 1 || !std::holds_alternative<SoftmaxXent>(layers.back()))
    throw Error("model must end with exactly one softmax-xent layer");
  return shapes;
}

// ---------------------------------------------------------------------------
// Parameters and gradients. Block l belongs to the l-th trainable layer,
// ordered shallow-to-deep. Bias travels with its layer's weights.
// ---------------------------------------------------------------------------

struct ParamBlock {
  Tensor weights;
  Tensor bias;
};

struct LayerParams {
  std::vector<ParamBlock> blocks;
};

struct LayerGrads {
  std::vector<ParamBlock> blocks;
  std::vector<std::uint8_t> updated;  // updated[l] == 0 implies block l all-zero
};

inline LayerParams make_zero_params(const ModelSpec& spec) {
  LayerParams p;
  for (const auto& l : spec.layers) {
    if (const auto* d = std::get_if<Dense>(&l)) {
      p.blocks.push_back({Tensor::zeros({d->out, d->in}), Tensor::zeros({d->out})});
    } else if (const auto* c = std::get_if<Conv2d>(&l)) {
      p.blocks.push_back(
          {Tensor::zeros({c->out_channels, c->in_channels, c->kernel, c->kernel}),
           Tensor::zeros({c->out_channels})});
    }
  }
  return p;
}

inline LayerGrads make_zero_grads(const ModelSpec& spec) {
  LayerGrads g;
  LayerParams p = make_zero_params(spec);
  g.blocks = std::move(p.blocks);
  g.updated.assign(g.blocks.size(), 0);
  return g;
}

// Glorot-uniform weights, zero biases, one independent stream per layer.
inline LayerParams init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  LayerParams p = make_zero_params(spec);
  std::size_t ti = 0;
  for (const auto& l : spec.layers) {
    if (!is_trainable(l)) continue;
    std::size_t fan_in, fan_out;
    if (const auto* d = std::get_if<Dense>(&l)) {
      fan_in = d->in;
      fan_out = d->out;
    } else {
      const auto& c = std::get<Conv2d>(l);
      fan_in = c.in_channels * c.kernel * c.kernel;
      fan_out = c.out_channels * c.kernel * c.kernel;
    }
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Rng rng(derive_seed(seed, 0xA11Cu, ti));
    for (double& w : p.blocks[ti].weights.data) w = rng.uniform(-a, a);
    ++ti;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct ForwardCache {
  std::vector<Tensor> inputs;  // inputs[i] = batched input to layer i
  std::vector<std::vector<std::size_t>> pool_argmax;  // flat index into layer input
  Tensor logits;
  Tensor probs;
  std::vector<int> labels;
  double loss = 0.0;
  std::size_t batch = 0;
};

namespace detail {

inline Tensor dense_forward(const Dense& d, const ParamBlock& p, const Tensor& x) {
  const std::size_t n = x.shape[0];
  Tensor y = Tensor::zeros({n, d.out});
  for (std::size_t s = 0; s < n; ++s) {
    const double* xs = &x.data[s * d.in];
    double* ys = &y.data[s * d.out];
    for (std::size_t o = 0; o < d.out; ++o) {
      double acc = p.bias.data[o];
      const double* w = &p.weights.data[o * d.in];
      for (std::size_t i = 0; i < d.in; ++i) acc += w[i] * xs[i];
      ys[o] = acc;
    }
  }
  return y;
}

inline Tensor conv_forward(const Conv2d& c, const ParamBlock& p, const Tensor& x) {
  const std::size_t n = x.shape[0], ih = x.shape[2], iw = x.shape[3];
  const std::size_t oh = (ih - c.kernel + 2 * c.padding) / c.stride + 1;
  const std::size_t ow = (iw - c.kernel + 2 * c.padding) / c.stride + 1;
  Tensor y = Tensor::zeros({n, c.out_channels, oh, ow});
  const long pad = static_cast<long>(c.padding);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oc = 0; oc < c.out_channels; ++oc)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = p.bias.data[oc];
          for (std::size_t ic = 0; ic < c.in_channels; ++ic)
            for (std::size_t ky = 0; ky < c.kernel; ++ky)
              for (std::size_t kx = 0; kx < c.kernel; ++kx) {
                const long yy = static_cast<long>(oy * c.stride + ky) - pad;
                const long xx = static_cast<long>(ox * c.stride + kx) - pad;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(ih) ||
                    xx >= static_cast<long>(iw))
                  continue;
                acc += p.weights.data[((oc * c.in_channels + ic) * c.kernel + ky) *
                                          c.kernel +
                                      kx] *
                       x.data[((s * x.shape[1] + ic) * ih + yy) * iw + xx];
              }
          y.data[((s * c.out_channels + oc) * oh + oy) * ow + ox] = acc;
        }
  return y;
}

// Ties take the lowest flat index (first maximum in scan order).
inline Tensor pool_forward(const MaxPool2d& pl, const Tensor& x,
                           std::vector<std::size_t>& argmax) {
  const std::size_t n = x.shape[0], ch = x.shape[1], ih = x.shape[2], iw = x.shape[3];
  const std::size_t oh = ih / pl.window, ow = iw / pl.window;
  Tensor y = Tensor::zeros({n, ch, oh, ow});
  argmax.assign(y.size(), 0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ci = 0; ci < ch; ++ci)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double best = -1e300;
          std::size_t best_idx = 0;
          for (std::size_t ky = 0; ky < pl.window; ++ky)
            for (std::size_t kx = 0; kx < pl.window; ++kx) {
              const std::size_t idx =
                  ((s * ch + ci) * ih + oy * pl.window + ky) * iw + ox * pl.window + kx;
              if (x.data[idx] > best) {
                best = x.data[idx];
                best_idx = idx;
              }
            }
          const std::size_t oidx = ((s * ch + ci) * oh + oy) * ow + ox;
          y.data[oidx] = best;
          argmax[oidx] = best_idx;
        }
  return y;
}

}  // namespace detail

// Full forward pass; the cache is sufficient for a backward pass under any
// mask. Throws ShapeError if batch_x does not match the model input.
inline std::pair<double, ForwardCache> forward(const ModelSpec& spec,
                                               const LayerParams& params,
                                               const Tensor& batch_x,
                                               const std::vector<int>& labels) {
  spec.validate();
  if (batch_x.shape.empty() || batch_x.shape[0] == 0)
    throw ShapeError("empty batch", 0);
  const std::size_t n = batch_x.shape[0];
  std::vector<std::size_t> per_sample(batch_x.shape.begin() + 1, batch_x.shape.end());
  if (per_sample != spec.input_shape)
    throw ShapeError("batch shape " + shape_string(per_sample) +
                         " does not match model input " + shape_string(spec.input_shape),
                     0);
  if (labels.size() != n) throw Error("labels/batch size mismatch");
  const int classes = static_cast<int>(spec.num_classes());
  for (int lb : labels)
    if (lb < 0 || lb >= classes) throw Error("label out of range");

  ForwardCache cache;
  cache.batch = n;
  cache.labels = labels;
  cache.pool_argmax.resize(spec.layers.size());
  Tensor cur = batch_x;
  std::size_t ti = 0;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    cache.inputs.push_back(cur);
    const Layer& l = spec.layers[li];
    if (const auto* d = std::get_if<Dense>(&l)) {
      cur = detail::dense_forward(*d, params.blocks[ti++], cur);
    } else if (const auto* c = std::get_if<Conv2d>(&l)) {
      cur = detail::conv_forward(*c, params.blocks[ti++], cur);
    } else if (const auto* p = std::get_if<MaxPool2d>(&l)) {
      cur = detail::pool_forward(*p, cur, cache.pool_argmax[li]);
    } else if (std::holds_alternative<Relu>(l)) {
      Tensor y = cur;
      for (double& v : y.data) v = v > 0.0 ? v : 0.0;
      cur = std::move(y);
    } else if (std::holds_alternative<Flatten>(l)) {
      Tensor y(std::vector<std::size_t>{n, cur.size() / n}, cur.data);
      cur = std::move(y);
    } else {
      // softmax cross-entropy, numerically stable
      const auto& s = std::get<SoftmaxXent>(l);
      cache.logits = cur;
      Tensor probs = Tensor::zeros(cur.shape);
      double loss_sum = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        const double* z = &cur.data[r * s.classes];
        double m = z[0];
        for (std::size_t c2 = 1; c2 < s.classes; ++c2) m = std::max(m, z[c2]);
        double denom = 0.0;
        for (std::size_t c2 = 0; c2 < s.classes; ++c2)
          denom += std::exp(z[c2] - m);
        for (std::size_t c2 = 0; c2 < s.classes; ++c2)
          probs.data[r * s.classes + c2] = std::exp(z[c2] - m) / denom;
        loss_sum += -(z[labels[r]] - m - std::log(denom));
      }
      cache.probs = std::move(probs);
      cache.loss = loss_sum / static_cast<double>(n);
    }
  }
  return {cache.loss, cache};
}

// Backward pass restricted by a per-trainable-layer mask (shallow-to-deep).
// Masked-off blocks stay exactly zero, and no signal is propagated below the
// shallowest masked-on layer.
inline LayerGrads backward(const ModelSpec& spec, const LayerParams& params,
                           const ForwardCache& cache,
                           const std::vector<std::uint8_t>& mask) {
  const std::size_t tcount = spec.trainable_count();
  if (mask.size() != tcount)
    throw Error("mask length " + std::to_string(mask.size()) +
                " does not match trainable layer count " + std::to_string(tcount));
  LayerGrads grads = make_zero_grads(spec);

  // map trainable index -> layer index
  std::vector<std::size_t> t2l;
  for (std::size_t li = 0; li < spec.layers.size(); ++li)
    if (is_trainable(spec.layers[li])) t2l.push_back(li);

  std::size_t shallowest = tcount;
  for (std::size_t t = 0; t < tcount; ++t)
    if (mask[t]) {
      shallowest = t;
      break;
    }
  if (shallowest == tcount) return grads;  // all-zero mask: nothing to do
  const std::size_t stop_li = t2l[shallowest];

  const std::size_t n = cache.batch;
  const auto& sm = std::get<SoftmaxXent>(spec.layers.back());
  Tensor delta = Tensor::zeros(cache.probs.shape);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < sm.classes; ++c)
      delta.data[r * sm.classes + c] =
          (cache.probs.data[r * sm.classes + c] -
           (static_cast<int>(c) == cache.labels[r] ? 1.0 : 0.0)) /
          static_cast<double>(n);

  std::size_t ti = tcount;  // trainable index of the layer about to be visited
  for (std::size_t li = spec.layers.size() - 1; li + 1 > stop_li + 1; --li) {
    const std::size_t cur_li = li - 1;
    const Layer& l = spec.layers[cur_li];
    const Tensor& x = cache.inputs[cur_li];
    if (const auto* d = std::get_if<Dense>(&l)) {
      --ti;
      const ParamBlock& p = params.blocks[ti];
      if (mask[ti]) {
        ParamBlock& g = grads.blocks[ti];
        for (std::size_t s = 0; s < n; ++s) {
          const double* ds = &delta.data[s * d->out];
          const double* xs = &x.data[s * d->in];
          for (std::size_t o = 0; o < d->out; ++o) {
            g.bias.data[o] += ds[o];
            double* gw = &g.weights.data[o * d->in];
            for (std::size_t i = 0; i < d->in; ++i) gw[i] += ds[o] * xs[i];
          }
        }
        grads.updated[ti] = 1;
      }
      if (cur_li > stop_li) {
        Tensor dx = Tensor::zeros(x.shape);
        for (std::size_t s = 0; s < n; ++s) {
          const double* ds = &delta.data[s * d->out];
          double* dxs = &dx.data[s * d->in];
          for (std::size_t o = 0; o < d->out; ++o) {
            const double* w = &p.weights.data[o * d->in];
            for (std::size_t i = 0; i < d->in; ++i) dxs[i] += ds[o] * w[i];
          }
        }
        delta = std::move(dx);
      }
    } else if (const auto* c = std::get_if<Conv2d>(&l)) {
      --ti;
      const ParamBlock& p = params.blocks[ti];
      const std::size_t ih = x.shape[2], iw = x.shape[3];
      const std::size_t oh = delta.shape[2], ow = delta.shape[3];
      const long pad = static_cast<long>(c->padding);
      const bool want_dx = cur_li > stop_li;
      Tensor dx = want_dx ? Tensor::zeros(x.shape) : Tensor();
      ParamBlock& g = grads.blocks[ti];
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t oc = 0; oc < c->out_channels; ++oc)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double dv =
                  delta.data[((s * c->out_channels + oc) * oh + oy) * ow + ox];
              if (mask[ti]) g.bias.data[oc] += dv;
              for (std::size_t ic = 0; ic < c->in_channels; ++ic)
                for (std::size_t ky = 0; ky < c->kernel; ++ky)
                  for (std::size_t kx = 0; kx < c->kernel; ++kx) {
                    const long yy = static_cast<long>(oy * c->stride + ky) - pad;
                    const long xx = static_cast<long>(ox * c->stride + kx) - pad;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(ih) ||
                        xx >= static_cast<long>(iw))
                      continue;
                    const std::size_t widx =
                        ((oc * c->in_channels + ic) * c->kernel + ky) * c->kernel + kx;
                    const std::size_t xidx =
                        ((s * c->in_channels + ic) * ih + yy) * iw + xx;
                    if (mask[ti]) g.weights.data[widx] += dv * x.data[xidx];
                    if (want_dx) dx.data[xidx] += dv * p.weights.data[widx];
                  }
            }
      if (mask[ti]) grads.updated[ti] = 1;
      if (want_dx) delta = std::move(dx);
    } else if (const auto* pl = std::get_if<MaxPool2d>(&l)) {
      Tensor dx = Tensor::zeros(x.shape);
      const auto& amax = cache.pool_argmax[cur_li];
      for (std::size_t i = 0; i < delta.size(); ++i) dx.data[amax[i]] += delta.data[i];
      delta = std::move(dx);
    } else if (std::holds_alternative<Relu>(l)) {
      Tensor dx = delta;
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (x.data[i] <= 0.0) dx.data[i] = 0.0;
      delta = std::move(dx);
    } else if (std::holds_alternative<Flatten>(l)) {
      Tensor dx(x.shape, delta.data);
      delta = std::move(dx);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline std::size_t argmax_lowest(const double* v, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

template <typename GetSample>
EvalResult evaluate_samples(const ModelSpec& spec, const LayerParams& params,
                            std::size_t count, GetSample&& get) {
  if (count == 0) throw Error("evaluate: empty dataset");
  const std::size_t feat = Tensor::element_count(spec.input_shape);
  const std::size_t chunk = 256;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  const std::size_t classes = spec.num_classes();
  for (std::size_t start = 0; start < count; start += chunk) {
    const std::size_t m = std::min(chunk, count - start);
    std::vector<std::size_t> bshape;
    bshape.push_back(m);
    for (auto s : spec.input_shape) bshape.push_back(s);
    Tensor bx = Tensor::zeros(bshape);
    std::vector<int> by(m);
    for (std::size_t i = 0; i < m; ++i) {
      auto [ptr, label] = get(start + i);
      std::copy(ptr, ptr + feat, &bx.data[i * feat]);
      by[i] = label;
    }
    auto [loss, cache] = forward(spec, params, bx, by);
    loss_sum += loss * static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t pred =
          argmax_lowest(&cache.logits.data[i * classes], classes);
      if (static_cast<int>(pred) == by[i]) ++correct;
    }
  }
  EvalResult r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(count);
  r.mean_loss = loss_sum / static_cast<double>(count);
  return r;
}

}  // namespace fedpmt
