#include <catch_amalgamated.hpp>

#include "fedpmt/masking.hpp"
#include "oracle_nn.hpp"

using namespace fedpmt;

namespace {

std::vector<std::uint8_t> bits(const BpMask& m) { return m.bits; }

ModelSpec two_layer() {
  ModelSpec spec;
  spec.input_shape = {3};
  spec.layers = {Dense{3, 4}, Relu{}, Dense{4, 2}, SoftmaxXent{2}};
  return spec;
}

Dataset tiny_dataset(std::size_t n, std::size_t dim, int classes, std::uint64_t seed) {
  Dataset ds;
  ds.features = Tensor::zeros({n, dim});
  ds.labels.resize(n);
  ds.class_count = classes;
  Rng rng(seed);
  for (auto& v : ds.features.data) v = rng.normal();
  for (auto& l : ds.labels) l = static_cast<int>(rng.next_below(classes));
  return ds;
}

}  // namespace

TEST_CASE("width menus") {
  SECTION("three widths over three layers") {
    WidthMenu m = build_width_menu(3, 3);
    REQUIRE(bits(m.masks[0]) == std::vector<std::uint8_t>{0, 0, 1});
    REQUIRE(bits(m.masks[1]) == std::vector<std::uint8_t>{0, 1, 1});
    REQUIRE(bits(m.masks[2]) == std::vector<std::uint8_t>{1, 1, 1});
  }
  SECTION("default grouping with fewer widths than layers") {
    WidthMenu m = build_width_menu(4, 3);
    REQUIRE(bits(m.masks[0]) == std::vector<std::uint8_t>{0, 0, 1, 1});
    REQUIRE(bits(m.masks[1]) == std::vector<std::uint8_t>{0, 1, 1, 1});
    REQUIRE(bits(m.masks[2]) == std::vector<std::uint8_t>{1, 1, 1, 1});
  }
  SECTION("single width is the full model") {
    WidthMenu m = build_width_menu(5, 1);
    REQUIRE(bits(m.masks[0]) == std::vector<std::uint8_t>{1, 1, 1, 1, 1});
  }
  SECTION("custom layer counts") {
    WidthMenu m = build_width_menu(5, 3, std::vector<std::size_t>{1, 3, 5});
    REQUIRE(bits(m.masks[0]) == std::vector<std::uint8_t>{0, 0, 0, 0, 1});
    REQUIRE(bits(m.masks[1]) == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
    REQUIRE(bits(m.masks[2]) == std::vector<std::uint8_t>{1, 1, 1, 1, 1});
  }
  SECTION("errors") {
    REQUIRE_THROWS_AS(build_width_menu(3, 4), Error);
    REQUIRE_THROWS_AS(build_width_menu(3, 0), Error);
    REQUIRE_THROWS_AS(build_width_menu(4, 2, std::vector<std::size_t>{3, 2}), Error);
    REQUIRE_THROWS_AS(build_width_menu(4, 2, std::vector<std::size_t>{1, 3}), Error);
  }
  SECTION("masks are suffixes, nested, classifier always on") {
    for (std::size_t L = 1; L <= 6; ++L)
      for (std::size_t I = 1; I <= L; ++I) {
        WidthMenu m = build_width_menu(L, I);
        REQUIRE(m.full().all_ones());
        std::size_t prev = 0;
        for (std::size_t i = 0; i < m.masks.size(); ++i) {
          REQUIRE(m.masks[i].is_suffix());
          REQUIRE(m.masks[i].bits.back() == 1);
          REQUIRE(m.masks[i].ones() > prev);
          prev = m.masks[i].ones();
          // nesting: AND of two masks equals the narrower one
          for (std::size_t j = 0; j <= i; ++j)
            for (std::size_t l = 0; l < L; ++l)
              REQUIRE((m.masks[i].bits[l] & m.masks[j].bits[l]) == m.masks[j].bits[l]);
        }
      }
  }
}

TEST_CASE("layer-wise multiplication") {
  LayerParams b;
  b.blocks.push_back({Tensor({3}, {2, 2, 2}), Tensor({0}, {})});
  b.blocks.push_back({Tensor({2}, {1, 1}), Tensor({0}, {})});
  b.blocks.push_back({Tensor({4}, {3, 3, 3, 3}), Tensor({0}, {})});

  SECTION("worked example") {
    LayerParams r = layerwise_mul({0, 1, 2}, b);
    REQUIRE(r.blocks[0].weights.data == std::vector<double>{0, 0, 0});
    REQUIRE(r.blocks[1].weights.data == std::vector<double>{1, 1});
    REQUIRE(r.blocks[2].weights.data == std::vector<double>{6, 6, 6, 6});
  }
  SECTION("all-ones is the identity") {
    LayerParams r = layerwise_mul({1, 1, 1}, b);
    for (std::size_t l = 0; l < 3; ++l)
      REQUIRE(r.blocks[l].weights.data == b.blocks[l].weights.data);
  }
  SECTION("all-zeros zeroes every block") {
    LayerParams r = layerwise_mul({0, 0, 0}, b);
    for (const auto& blk : r.blocks)
      for (double v : blk.weights.data) REQUIRE(v == 0.0);
  }
  SECTION("length mismatch") {
    REQUIRE_THROWS_AS(layerwise_mul({1, 2}, b), Error);
  }
}

TEST_CASE("local update") {
  ModelSpec spec = two_layer();
  LayerParams global = init_params(spec, 5);
  Dataset ds = tiny_dataset(8, 3, 2, 17);
  std::vector<std::size_t> shard = {0, 1, 2, 3, 4, 5, 6, 7};

  SECTION("deepest-only mask touches only the final block") {
    BpMask mask{{0, 1}};
    auto res = local_update(spec, global, ds, shard, mask, 0.1, 1, 8, 99);
    REQUIRE(res.final_params.blocks[0].weights.data == global.blocks[0].weights.data);
    REQUIRE(res.final_params.blocks[0].bias.data == global.blocks[0].bias.data);
    REQUIRE(res.final_params.blocks[1].weights.data != global.blocks[1].weights.data);
    for (double v : res.delta.blocks[0].weights.data) REQUIRE(v == 0.0);
    REQUIRE(res.delta.updated == std::vector<std::uint8_t>{0, 1});
  }

  SECTION("one full-batch step: delta equals eta times the batch gradient") {
    BpMask mask{{1, 1}};
    auto res = local_update(spec, global, ds, shard, mask, 0.05, 1, 8, 123);
    // full batch == whole shard in ascending order, so the step is plain GD
    Tensor bx = Tensor::zeros({8, 3});
    std::vector<int> by(8);
    for (std::size_t i = 0; i < 8; ++i) {
      std::copy(ds.sample(i), ds.sample(i) + 3, &bx.data[i * 3]);
      by[i] = ds.labels[i];
    }
    auto cache = forward(spec, global, bx, by).second;
    LayerGrads g = backward(spec, global, cache, mask.bits);
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t i = 0; i < g.blocks[l].weights.data.size(); ++i) {
        const double expect =
            global.blocks[l].weights.data[i] -
            (global.blocks[l].weights.data[i] - 0.05 * g.blocks[l].weights.data[i]);
        REQUIRE(res.delta.blocks[l].weights.data[i] == expect);
      }
    }
  }

  SECTION("three steps on one sample match a hand-rolled loop") {
    std::vector<std::size_t> one = {3};
    BpMask mask{{1, 1}};
    auto res = local_update(spec, global, ds, one, mask, 0.2, 3, 1, 7);

    LayerParams w = global;
    Tensor bx = Tensor::zeros({1, 3});
    std::copy(ds.sample(3), ds.sample(3) + 3, bx.data.begin());
    std::vector<int> by = {ds.labels[3]};
    for (int step = 0; step < 3; ++step) {
      auto cache = forward(spec, w, bx, by).second;
      LayerGrads g = backward(spec, w, cache, mask.bits);
      for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t i = 0; i < w.blocks[l].weights.data.size(); ++i)
          w.blocks[l].weights.data[i] -= 0.2 * g.blocks[l].weights.data[i];
        for (std::size_t i = 0; i < w.blocks[l].bias.data.size(); ++i)
          w.blocks[l].bias.data[i] -= 0.2 * g.blocks[l].bias.data[i];
      }
    }
    for (std::size_t l = 0; l < 2; ++l) {
      REQUIRE(res.final_params.blocks[l].weights.data == w.blocks[l].weights.data);
      REQUIRE(res.final_params.blocks[l].bias.data == w.blocks[l].bias.data);
    }
  }

  SECTION("masked-off deltas are exactly zero and flags mirror the mask") {
    BpMask mask{{0, 1}};
    auto res = local_update(spec, global, ds, shard, mask, 0.1, 5, 3, 21);
    for (double v : res.delta.blocks[0].weights.data) REQUIRE(v == 0.0);
    for (double v : res.delta.blocks[0].bias.data) REQUIRE(v == 0.0);
    REQUIRE(res.delta.updated == mask.bits);
  }

  SECTION("same seed gives bit-identical results") {
    BpMask mask{{1, 1}};
    auto a = local_update(spec, global, ds, shard, mask, 0.1, 4, 3, 31);
    auto b = local_update(spec, global, ds, shard, mask, 0.1, 4, 3, 31);
    for (std::size_t l = 0; l < 2; ++l)
      REQUIRE(a.final_params.blocks[l].weights.data ==
              b.final_params.blocks[l].weights.data);
    auto c = local_update(spec, global, ds, shard, mask, 0.1, 4, 3, 32);
    REQUIRE(a.final_params.blocks[1].weights.data !=
            c.final_params.blocks[1].weights.data);
  }

  SECTION("errors") {
    BpMask mask{{1, 1}};
    REQUIRE_THROWS_AS(local_update(spec, global, ds, {}, mask, 0.1, 1, 1, 1), Error);
    REQUIRE_THROWS_AS(local_update(spec, global, ds, shard, mask, 0.1, 1, 9, 1), Error);
    REQUIRE_THROWS_AS(local_update(spec, global, ds, shard, BpMask{{1}}, 0.1, 1, 2, 1),
                      Error);
    REQUIRE_THROWS_AS(local_update(spec, global, ds, shard, mask, 0.1, 0, 2, 1), Error);
  }
}
