#include <catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "fedpmt/strategies.hpp"

using namespace fedpmt;

namespace {

std::vector<DeviceProfile> tier_profiles(const std::vector<double>& kappas) {
  std::vector<DeviceProfile> out;
  for (std::size_t i = 0; i < kappas.size(); ++i)
    out.push_back(DeviceProfile{i, kappas[i], 500, 1});
  return out;
}

ModelSpec small_dense() {
  ModelSpec spec;
  spec.input_shape = {4};
  spec.layers = {Dense{4, 6}, Relu{}, Dense{6, 5}, Relu{}, Dense{5, 3}, SoftmaxXent{3}};
  return spec;
}

}  // namespace

TEST_CASE("width assignment") {
  SECTION("five tiers rank onto the five-width menu in order") {
    const WidthMenu menu = build_width_menu(5, 5);
    const auto profiles = tier_profiles({0.2, 0.25, 0.33, 0.5, 1.0});
    const WidthAssignment a = fedpmt_assign_option1(profiles, menu);
    REQUIRE(a.width_by_device == std::vector<std::size_t>{0, 1, 2, 3, 4});
    REQUIRE(a.provenance == Provenance::kServerAssigned);
    for (auto f : a.flagged) REQUIRE(f == 0);
  }
  SECTION("uniform capability means everyone trains the full model") {
    const WidthMenu menu = build_width_menu(5, 3);
    const auto profiles = tier_profiles({1.0, 1.0, 1.0, 1.0});
    const WidthAssignment a = fedpmt_assign_option1(profiles, menu);
    for (std::size_t w : a.width_by_device) REQUIRE(w == 2);
  }
  SECTION("two tiers over a two-width menu") {
    const WidthMenu menu = build_width_menu(4, 2);
    const WidthAssignment a = fedpmt_assign_option1(tier_profiles({0.5, 1.0}), menu);
    REQUIRE(a.width_by_device == std::vector<std::size_t>{0, 1});
  }
  SECTION("more tiers than widths floor at the smallest width, flagged") {
    const WidthMenu menu = build_width_menu(5, 2);
    const WidthAssignment a =
        fedpmt_assign_option1(tier_profiles({0.1, 0.2, 0.5, 1.0}), menu);
    REQUIRE(a.width_by_device == std::vector<std::size_t>{0, 0, 0, 1});
    REQUIRE(a.flagged == std::vector<std::uint8_t>{1, 1, 0, 0});
  }
  SECTION("option II mirrors option I on identical inputs") {
    const WidthMenu menu = build_width_menu(6, 4);
    Rng rng(5);
    std::vector<double> kappas;
    for (int i = 0; i < 12; ++i) kappas.push_back(0.1 + rng.next_double());
    const auto profiles = tier_profiles(kappas);
    const WidthAssignment s = fedpmt_assign_option1(profiles, menu);
    const WidthAssignment d = fedpmt_assign_option2(profiles, menu);
    REQUIRE(s.width_by_device == d.width_by_device);
    REQUIRE(s.flagged == d.flagged);
    REQUIRE(d.provenance == Provenance::kDeviceChosen);
  }
  SECTION("random capabilities match a rank-evaluation oracle") {
    const WidthMenu menu = build_width_menu(5, 3);
    Rng rng(77);
    std::vector<double> kappas;
    for (int i = 0; i < 30; ++i) kappas.push_back(0.05 * (1.0 + rng.next_below(12)));
    const auto profiles = tier_profiles(kappas);
    const WidthAssignment a = fedpmt_assign_option2(profiles, menu);

    std::set<double, std::greater<double>> ladder(kappas.begin(), kappas.end());
    std::vector<double> desc(ladder.begin(), ladder.end());
    for (std::size_t i = 0; i < kappas.size(); ++i) {
      const std::size_t rank =
          std::find(desc.begin(), desc.end(), kappas[i]) - desc.begin();
      const std::size_t expect = rank < 3 ? 2 - rank : 0;
      REQUIRE(a.width_by_device[i] == expect);
      REQUIRE(a.flagged[i] == (rank >= 3 ? 1 : 0));
    }
  }
}

TEST_CASE("feddrop sub-model generation") {
  const ModelSpec spec = small_dense();
  const LayerParams global = init_params(spec, 9);

  SECTION("keep rate 1 is the identity") {
    const FeddropSubmodel sub = feddrop_generate(spec, global, 1.0, 3);
    REQUIRE(sub.spec.layers.size() == spec.layers.size());
    for (std::size_t l = 0; l < global.blocks.size(); ++l) {
      REQUIRE(sub.params.blocks[l].weights.data == global.blocks[l].weights.data);
      REQUIRE(sub.params.blocks[l].bias.data == global.blocks[l].bias.data);
    }
    for (std::size_t t = 0; t < sub.plan.kept.size(); ++t)
      for (std::size_t i = 0; i < sub.plan.kept[t].size(); ++i)
        REQUIRE(sub.plan.kept[t][i] == i);
  }
  SECTION("tiny keep rate floors at one neuron per hidden layer") {
    const FeddropSubmodel sub = feddrop_generate(spec, global, 1e-9, 3);
    REQUIRE(std::get<Dense>(sub.spec.layers[0]).out == 1);
    REQUIRE(std::get<Dense>(sub.spec.layers[2]).out == 1);
    REQUIRE(std::get<Dense>(sub.spec.layers[4]).out == 3);
    REQUIRE(std::get<Dense>(sub.spec.layers[4]).in == 1);
  }
  SECTION("extraction picks the planned rows and columns, rescaled") {
    const FeddropSubmodel sub = feddrop_generate(spec, global, 0.5, 12);
    REQUIRE(sub.plan.kept[0].size() == 3);  // ceil(0.5 * 6)
    REQUIRE(sub.plan.kept[1].size() == 3);  // ceil(0.5 * 5)
    const auto& rows = sub.plan.kept[1];
    const auto& cols = sub.plan.kept[0];
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < cols.size(); ++c)
        REQUIRE(sub.params.blocks[1].weights.data[r * cols.size() + c] ==
                global.blocks[1].weights.data[rows[r] * 6 + cols[c]] * 2.0);
    // first layer reads the raw input: no rescale
    for (std::size_t r = 0; r < cols.size(); ++r)
      for (std::size_t c = 0; c < 4; ++c)
        REQUIRE(sub.params.blocks[0].weights.data[r * 4 + c] ==
                global.blocks[0].weights.data[cols[r] * 4 + c]);
  }
  SECTION("seeded plans are reproducible and the sub-model trains") {
    const FeddropSubmodel a = feddrop_generate(spec, global, 0.6, 42);
    const FeddropSubmodel b = feddrop_generate(spec, global, 0.6, 42);
    REQUIRE(a.plan.kept == b.plan.kept);
    Tensor bx = Tensor::zeros({2, 4});
    bx.data = {0.1, -0.2, 0.3, 0.4, 1.0, 0.0, -1.0, 0.5};
    auto [loss, cache] = forward(a.spec, a.params, bx, {0, 2});
    REQUIRE(std::isfinite(loss));
    (void)cache;
  }
  SECTION("bad keep rates and conv models are rejected") {
    REQUIRE_THROWS_AS(feddrop_generate(spec, global, 0.0, 1), Error);
    REQUIRE_THROWS_AS(feddrop_generate(spec, global, 1.5, 1), Error);
    ModelSpec conv;
    conv.input_shape = {1, 4, 4};
    conv.layers = {Conv2d{1, 2, 3}, Flatten{}, Dense{8, 2}, SoftmaxXent{2}};
    REQUIRE_THROWS_AS(feddrop_generate(conv, init_params(conv, 1), 0.5, 1), Error);
  }
}

TEST_CASE("feddrop aggregation") {
  const ModelSpec spec = small_dense();
  const LayerParams global = init_params(spec, 4);

  SECTION("zero deltas leave the global model bit-identical") {
    std::vector<FeddropUpdate> updates;
    for (int k = 0; k < 3; ++k) {
      FeddropSubmodel sub = feddrop_generate(spec, global, 0.5, 100 + k);
      FeddropUpdate u;
      u.plan = sub.plan;
      u.delta = make_zero_grads(sub.spec);
      updates.push_back(std::move(u));
    }
    const LayerParams out = feddrop_aggregate(spec, global, updates);
    for (std::size_t l = 0; l < global.blocks.size(); ++l) {
      REQUIRE(out.blocks[l].weights.data == global.blocks[l].weights.data);
      REQUIRE(out.blocks[l].bias.data == global.blocks[l].bias.data);
    }
  }
  SECTION("all keep rates 1 reduce to uniform delta averaging") {
    std::vector<FeddropUpdate> updates;
    std::vector<LayerGrads> plain;
    Rng rng(8);
    for (int k = 0; k < 4; ++k) {
      FeddropSubmodel sub = feddrop_generate(spec, global, 1.0, 300 + k);
      FeddropUpdate u;
      u.plan = sub.plan;
      u.delta = make_zero_grads(spec);
      for (auto& blk : u.delta.blocks) {
        for (auto& v : blk.weights.data) v = rng.normal();
        for (auto& v : blk.bias.data) v = rng.normal();
      }
      u.delta.updated.assign(u.delta.blocks.size(), 1);
      plain.push_back(u.delta);
      updates.push_back(std::move(u));
    }
    const LayerParams got = feddrop_aggregate(spec, global, updates);
    const LayerParams expect =
        aggregate(global, plain,
                  std::vector<BpMask>(4, BpMask{std::vector<std::uint8_t>(3, 1)}));
    for (std::size_t l = 0; l < global.blocks.size(); ++l)
      for (std::size_t i = 0; i < got.blocks[l].weights.data.size(); ++i)
        REQUIRE(got.blocks[l].weights.data[i] ==
                Catch::Approx(expect.blocks[l].weights.data[i]).margin(1e-14));
  }
  SECTION("disjoint and overlapping owners") {
    // hand-built plans on the first hidden layer (6 neurons)
    FeddropSubmodel a = feddrop_generate(spec, global, 0.5, 1);
    FeddropSubmodel b = feddrop_generate(spec, global, 0.5, 2);
    a.plan.kept[0] = {0, 1, 2};
    b.plan.kept[0] = {3, 4, 5};
    a.plan.kept[1] = {0, 1, 2, 3, 4};
    b.plan.kept[1] = {0, 1, 2, 3, 4};

    FeddropUpdate ua, ub;
    ua.plan = a.plan;
    ub.plan = b.plan;
    // sub layer 0 is 3x4 (+3 bias), layer 1 is 5x3 (+5 bias), layer 2 is 3x5
    ua.delta.blocks.push_back({Tensor::zeros({3, 4}), Tensor::zeros({3})});
    ua.delta.blocks.push_back({Tensor::zeros({5, 3}), Tensor::zeros({5})});
    ua.delta.blocks.push_back({Tensor::zeros({3, 5}), Tensor::zeros({3})});
    ub.delta = ua.delta;
    ua.delta.updated = ub.delta.updated = {1, 1, 1};
    for (auto& v : ua.delta.blocks[0].weights.data) v = 1.0;
    for (auto& v : ub.delta.blocks[0].weights.data) v = 3.0;
    for (auto& v : ua.delta.blocks[2].weights.data) v = 2.0;
    for (auto& v : ub.delta.blocks[2].weights.data) v = 4.0;

    const LayerParams got = feddrop_aggregate(spec, global, {ua, ub});
    // layer 0: rows 0-2 owned by device a alone, rows 3-5 by device b alone
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 4; ++c) {
        const double want =
            global.blocks[0].weights.data[r * 4 + c] - (r < 3 ? 1.0 : 3.0);
        REQUIRE(got.blocks[0].weights.data[r * 4 + c] == want);
      }
    // layer 2 columns kept by both devices move by the mean, scale corrected
    const auto& rows2 = a.plan.kept[2];
    for (std::size_t r = 0; r < rows2.size(); ++r)
      for (std::size_t c = 0; c < 5; ++c) {
        const double mean = (2.0 * a.plan.keep_rate + 4.0 * b.plan.keep_rate) / 2.0;
        const double want = global.blocks[2].weights.data[rows2[r] * 5 + c] - mean;
        REQUIRE(got.blocks[2].weights.data[rows2[r] * 5 + c] ==
                Catch::Approx(want).epsilon(1e-14));
      }
  }
}
