#include <catch_amalgamated.hpp>

#include "fedpmt/aggregation.hpp"

using namespace fedpmt;

namespace {

// two-layer dummy layout with block sizes 3 and 2
LayerParams params_of(std::vector<double> a, std::vector<double> b) {
  LayerParams p;
  p.blocks.push_back({Tensor({3}, std::move(a)), Tensor({1}, {0.0})});
  p.blocks.push_back({Tensor({2}, std::move(b)), Tensor({1}, {0.0})});
  return p;
}

LayerGrads delta_of(std::vector<double> a, std::vector<double> b,
                    std::vector<std::uint8_t> updated) {
  LayerGrads g;
  g.blocks.push_back({Tensor({3}, std::move(a)), Tensor({1}, {0.0})});
  g.blocks.push_back({Tensor({2}, std::move(b)), Tensor({1}, {0.0})});
  g.updated = std::move(updated);
  return g;
}

}  // namespace

TEST_CASE("aggregation weights") {
  SECTION("two devices, one partial") {
    auto w = compute_weights({BpMask{{1, 1}}, BpMask{{0, 1}}});
    REQUIRE(w.per_device[0] == std::vector<double>{1.0, 0.5});
    REQUIRE(w.per_device[1] == std::vector<double>{0.0, 0.5});
    REQUIRE(w.layer_has_updater == std::vector<std::uint8_t>{1, 1});
  }
  SECTION("all devices full width get uniform weights") {
    std::vector<BpMask> masks(5, BpMask{{1, 1, 1}});
    auto w = compute_weights(masks);
    for (const auto& dev : w.per_device)
      for (double v : dev) REQUIRE(v == 0.2);
  }
  SECTION("eight devices, two per width over a four-width menu") {
    WidthMenu menu = build_width_menu(5, 4);
    std::vector<BpMask> masks;
    for (std::size_t w = 0; w < 4; ++w)
      for (int rep = 0; rep < 2; ++rep) masks.push_back(menu.masks[w]);
    auto w = compute_weights(masks);
    // layer 0 (shallowest) is updated only by the two full-width devices
    REQUIRE(w.per_device[6][0] == 0.5);
    REQUIRE(w.per_device[7][0] == 0.5);
    REQUIRE(w.per_device[0][0] == 0.0);
    // the deepest layer is updated by everyone
    for (const auto& dev : w.per_device) REQUIRE(dev[4] == 0.125);
  }
  SECTION("layers with no updater are flagged, not errors") {
    auto w = compute_weights({BpMask{{0, 1}}, BpMask{{0, 1}}});
    REQUIRE(w.layer_has_updater == std::vector<std::uint8_t>{0, 1});
    REQUIRE(w.per_device[0][0] == 0.0);
  }
  SECTION("per-layer weights sum to one") {
    WidthMenu menu = build_width_menu(6, 4);
    Rng rng(7);
    std::vector<BpMask> masks;
    for (int k = 0; k < 11; ++k) masks.push_back(menu.masks[rng.next_below(4)]);
    auto w = compute_weights(masks);
    for (std::size_t l = 0; l < 6; ++l) {
      if (!w.layer_has_updater[l]) continue;
      double sum = 0.0;
      for (const auto& dev : w.per_device) sum += dev[l];
      REQUIRE(std::abs(sum - 1.0) < 1e-12);
    }
  }
  SECTION("dataset-size weighting") {
    auto w = compute_weights({BpMask{{1, 1}}, BpMask{{1, 1}}},
                             std::vector<std::size_t>{300, 100});
    REQUIRE(w.per_device[0][0] == Catch::Approx(0.75));
    REQUIRE(w.per_device[1][0] == Catch::Approx(0.25));
  }
  SECTION("empty set is an error") {
    REQUIRE_THROWS_AS(compute_weights({}), Error);
  }
}

TEST_CASE("aggregate") {
  LayerParams global = params_of({1, 2, 3}, {4, 5});

  SECTION("full-width deltas average uniformly, matching naive parameter averaging") {
    const std::size_t devices = 8;  // power of two keeps the comparison bit-exact
    std::vector<LayerGrads> deltas;
    std::vector<BpMask> masks;
    Rng rng(3);
    for (std::size_t k = 0; k < devices; ++k) {
      deltas.push_back(delta_of({rng.normal(), rng.normal(), rng.normal()},
                                {rng.normal(), rng.normal()}, {1, 1}));
      masks.push_back(BpMask{{1, 1}});
    }
    LayerParams got = aggregate(global, deltas, masks);

    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t i = 0; i < global.blocks[l].weights.data.size(); ++i) {
        double mean_final = 0.0;
        for (std::size_t k = 0; k < devices; ++k)
          mean_final +=
              global.blocks[l].weights.data[i] - deltas[k].blocks[l].weights.data[i];
        mean_final /= static_cast<double>(devices);
        REQUIRE(got.blocks[l].weights.data[i] == mean_final);
      }
  }

  SECTION("single full-width device adopts its final parameters exactly") {
    auto d = delta_of({0.1, -0.2, 0.3}, {0.5, -0.5}, {1, 1});
    LayerParams got = aggregate(global, {d}, {BpMask{{1, 1}}});
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t i = 0; i < global.blocks[l].weights.data.size(); ++i) {
        const double final_param =
            global.blocks[l].weights.data[i] - d.blocks[l].weights.data[i];
        REQUIRE(got.blocks[l].weights.data[i] == final_param);
      }
  }

  SECTION("hand-computed two-device mix") {
    auto d1 = delta_of({0.3, 0.3, 0.3}, {0.2, 0.4}, {1, 1});
    auto d2 = delta_of({0.0, 0.0, 0.0}, {0.6, 0.8}, {0, 1});
    LayerParams got =
        aggregate(global, {d1, d2}, {BpMask{{1, 1}}, BpMask{{0, 1}}});
    // layer 0 moves by device 1's delta alone
    REQUIRE(got.blocks[0].weights.data ==
            std::vector<double>{1.0 - 0.3, 2.0 - 0.3, 3.0 - 0.3});
    // layer 1 moves by the mean of both deltas
    REQUIRE(got.blocks[1].weights.data[0] ==
            Catch::Approx(4.0 - (0.5 * 0.2 + 0.5 * 0.6)).epsilon(1e-15));
    REQUIRE(got.blocks[1].weights.data[1] ==
            Catch::Approx(5.0 - (0.5 * 0.4 + 0.5 * 0.8)).epsilon(1e-15));
  }

  SECTION("untouched layers keep their exact previous values") {
    auto d1 = delta_of({0, 0, 0}, {0.1, 0.1}, {0, 1});
    auto d2 = delta_of({0, 0, 0}, {0.3, 0.3}, {0, 1});
    LayerParams got =
        aggregate(global, {d1, d2}, {BpMask{{0, 1}}, BpMask{{0, 1}}});
    REQUIRE(got.blocks[0].weights.data == global.blocks[0].weights.data);
    REQUIRE(got.blocks[0].bias.data == global.blocks[0].bias.data);
  }

  SECTION("repeat runs are bit-identical") {
    auto d1 = delta_of({0.1, 0.2, 0.3}, {0.4, 0.5}, {1, 1});
    auto d2 = delta_of({0.7, 0.8, 0.9}, {1.0, 1.1}, {1, 1});
    auto a = aggregate(global, {d1, d2}, {BpMask{{1, 1}}, BpMask{{1, 1}}});
    auto b = aggregate(global, {d1, d2}, {BpMask{{1, 1}}, BpMask{{1, 1}}});
    for (std::size_t l = 0; l < 2; ++l)
      REQUIRE(a.blocks[l].weights.data == b.blocks[l].weights.data);
  }

  SECTION("layout mismatch is an error") {
    LayerGrads bad;
    bad.blocks.push_back({Tensor({2}, {0, 0}), Tensor({1}, {0.0})});
    bad.blocks.push_back({Tensor({2}, {0, 0}), Tensor({1}, {0.0})});
    bad.updated = {1, 1};
    REQUIRE_THROWS_AS(aggregate(global, {bad}, {BpMask{{1, 1}}}), Error);
  }
}
