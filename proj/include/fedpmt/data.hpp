#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "fedpmt/error.hpp"
#include "fedpmt/rng.hpp"
#include "fedpmt/tensor.hpp"

namespace fedpmt {

struct Dataset {
  Tensor features;  // {N, ...per-sample dims}
  std::vector<int> labels;
  int class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_size() const {
    return size() == 0 ? 0 : features.size() / size();
  }
  const double* sample(std::size_t i) const {
    return &features.data[i * feature_size()];
  }
};

// Device id -> index list into a parent dataset. Lists are pairwise disjoint.
struct Partition {
  std::vector<std::vector<std::size_t>> device_indices;
};

// ---------------------------------------------------------------------------
// IDX ingestion (big-endian headers, magic 0x803 for images, 0x801 for labels)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_be_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    throw IdxTruncatedError("truncated idx file: " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw Error("cannot open " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw Error("cannot open " + labels_path);

  const std::uint32_t img_magic = detail::read_be_u32(img, images_path);
  if (img_magic != 0x00000803u)
    throw IdxBadMagicError("bad image magic in " + images_path);
  const std::uint32_t n = detail::read_be_u32(img, images_path);
  const std::uint32_t rows = detail::read_be_u32(img, images_path);
  const std::uint32_t cols = detail::read_be_u32(img, images_path);

  const std::uint32_t lab_magic = detail::read_be_u32(lab, labels_path);
  if (lab_magic != 0x00000801u)
    throw IdxBadMagicError("bad label magic in " + labels_path);
  const std::uint32_t n_lab = detail::read_be_u32(lab, labels_path);
  if (n != n_lab)
    throw IdxCountMismatchError("image/label count mismatch: " + std::to_string(n) +
                                " vs " + std::to_string(n_lab));

  Dataset ds;
  ds.features = Tensor::zeros({n, rows, cols});
  ds.labels.resize(n);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!img.read(reinterpret_cast<char*>(buf.data()), buf.size()))
      throw IdxTruncatedError("truncated idx file: " + images_path);
    for (std::size_t p = 0; p < buf.size(); ++p)
      ds.features.data[i * buf.size() + p] = buf[p] / 255.0;
  }
  std::vector<unsigned char> lbuf(n);
  if (!lab.read(reinterpret_cast<char*>(lbuf.data()), n))
    throw IdxTruncatedError("truncated idx file: " + labels_path);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.labels[i] = lbuf[i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.class_count = max_label + 1;
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian clusters: class mean ~ N(0, separation^2 I), samples
// ~ N(mean_c, I). `sample_stream` selects an independent noise stream over
// the same class means, so train/test splits share the task.
// ---------------------------------------------------------------------------

inline Dataset generate_synthetic(int num_classes, std::size_t dim,
                                  std::size_t samples_per_class,
                                  double class_separation, std::uint64_t seed,
                                  std::uint64_t sample_stream = 0) {
  if (num_classes <= 0 || dim == 0 || samples_per_class == 0)
    throw Error("generate_synthetic: arguments must be positive");
  std::vector<std::vector<double>> means(num_classes, std::vector<double>(dim));
  Rng mean_rng(derive_seed(seed, 0xC1A55u));
  for (auto& m : means)
    for (auto& v : m) v = mean_rng.normal(0.0, class_separation);

  const std::size_t n = static_cast<std::size_t>(num_classes) * samples_per_class;
  Dataset ds;
  ds.features = Tensor::zeros({n, dim});
  ds.labels.resize(n);
  ds.class_count = num_classes;
  std::size_t row = 0;
  for (int c = 0; c < num_classes; ++c) {
    Rng rng(derive_seed(seed, 0x5A3B1Eu, sample_stream, static_cast<std::uint64_t>(c)));
    for (std::size_t s = 0; s < samples_per_class; ++s, ++row) {
      for (std::size_t d = 0; d < dim; ++d)
        ds.features.data[row * dim + d] = means[c][d] + rng.normal();
      ds.labels[row] = c;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

inline Partition partition_iid(const Dataset& ds, std::size_t num_devices,
                               std::size_t per_device, std::uint64_t seed) {
  if (num_devices * per_device > ds.size())
    throw Error("partition_iid: need " + std::to_string(num_devices * per_device) +
                " samples, dataset has " + std::to_string(ds.size()));
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x11Du));
  rng.shuffle(idx);
  Partition part;
  part.device_indices.resize(num_devices);
  for (std::size_t d = 0; d < num_devices; ++d)
    part.device_indices[d].assign(idx.begin() + d * per_device,
                                  idx.begin() + (d + 1) * per_device);
  return part;
}

// Each device holds samples from exactly 2 distinct classes (half per class,
// odd remainder to the first). Class pairs are drawn by repeatedly shuffling
// the class list and consuming adjacent pairs, so classes are reused evenly
// once every class has been handed out.
inline Partition partition_noniid_2class(const Dataset& ds, std::size_t num_devices,
                                         std::size_t per_device, std::uint64_t seed) {
  const int classes = ds.class_count;
  if (classes < 2) throw Error("non-iid partition needs at least 2 classes");
  std::vector<std::vector<std::size_t>> pools(classes);
  for (std::size_t i = 0; i < ds.size(); ++i) pools[ds.labels[i]].push_back(i);
  Rng rng(derive_seed(seed, 0x2C1A55u));
  for (auto& p : pools) rng.shuffle(p);
  std::vector<std::size_t> used(classes, 0);

  std::vector<std::pair<int, int>> pairs;
  while (pairs.size() < num_devices) {
    std::vector<int> order(classes);
    for (int c = 0; c < classes; ++c) order[c] = c;
    rng.shuffle(order);
    for (int i = 0; i + 1 < classes && pairs.size() < num_devices; i += 2)
      pairs.emplace_back(order[i], order[i + 1]);
  }

  Partition part;
  part.device_indices.resize(num_devices);
  const std::size_t first_share = per_device - per_device / 2;
  for (std::size_t d = 0; d < num_devices; ++d) {
    auto [a, b] = pairs[d];
    const std::size_t take_a = first_share, take_b = per_device / 2;
    if (used[a] + take_a > pools[a].size())
      throw ClassExhaustedError("class " + std::to_string(a) +
                                    " exhausted while partitioning device " +
                                    std::to_string(d),
                                a);
    if (used[b] + take_b > pools[b].size())
      throw ClassExhaustedError("class " + std::to_string(b) +
                                    " exhausted while partitioning device " +
                                    std::to_string(d),
                                b);
    auto& out = part.device_indices[d];
    out.insert(out.end(), pools[a].begin() + used[a], pools[a].begin() + used[a] + take_a);
    out.insert(out.end(), pools[b].begin() + used[b], pools[b].begin() + used[b] + take_b);
    used[a] += take_a;
    used[b] += take_b;
  }
  return part;
}

}  // namespace fedpmt
