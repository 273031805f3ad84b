#include <doctest.h>

#include <set>

#include "gex/ge.hpp"
#include "support/oracles.hpp"

using namespace gex;
using gex::testing::bitwise_equal;
using gex::testing::random_tensor;

TEST_CASE("selection window formula") {
    SUBCASE("e=1 degenerates to the single cell") {
        auto w = selection_window({1, 1}, 1, 8, 8);
        REQUIRE(w.size() == 1);
        CHECK(w[0] == std::pair<int, int>{1, 1});
    }
    SUBCASE("u=(1,1), e=2 is the 3x3 set centered at (2,2)") {
        auto w = selection_window({1, 1}, 2, 8, 8);
        CHECK(w.size() == 9);
        std::set<std::pair<int, int>> got(w.begin(), w.end());
        for (int y = 1; y <= 3; ++y)
            for (int x = 1; x <= 3; ++x) CHECK(got.count({y, x}) == 1);
    }
    SUBCASE("u=(2,3), e=4 on a 16x16 grid: 7x7 centered at (8,12)") {
        auto w = selection_window({2, 3}, 4, 16, 16);
        CHECK(w.size() == 49);
        for (auto [y, x] : w) {
            CHECK(std::abs(y - 8) <= 3);
            CHECK(std::abs(x - 12) <= 3);
        }
    }
    SUBCASE("window side is 2e-1 before clipping") {
        auto w = selection_window({2, 2}, 4, 64, 64);  // interior: no clipping
        CHECK(w.size() == 49);
    }
}

TEST_CASE("pooling gather: shapes and constants") {
    SUBCASE("constant input gives a constant aggregate") {
        Tensor x = Tensor::full({1, 2, 8, 8}, 1.75f);
        Tensor g = gather_pool(x, GatherKind::AvgPool, ExtentSpec::Ratio(2));
        CHECK(g.shape() == Shape4{1, 2, 4, 4});
        // interior windows have no padding; check one
        CHECK(g.at(0, 0, 1, 1) == doctest::Approx(1.75f));
    }
    SUBCASE("56x56 at e=8 gives 7x7") {
        Tensor x = Tensor::full({1, 3, 56, 56}, 0.5f);
        CHECK(gather_pool(x, GatherKind::AvgPool, ExtentSpec::Ratio(8)).shape() ==
              Shape4{1, 3, 7, 7});
    }
    SUBCASE("global extent gives 1x1") {
        Tensor x = Tensor::full({2, 5, 9, 13}, 1.0f);
        CHECK(gather_pool(x, GatherKind::AvgPool, ExtentSpec::Global()).shape() ==
              Shape4{2, 5, 1, 1});
        CHECK(gather_pool(x, GatherKind::MaxPool, ExtentSpec::Global()).shape() ==
              Shape4{2, 5, 1, 1});
    }
    SUBCASE("spatial size below the extent ratio is rejected") {
        Tensor x = Tensor::full({1, 1, 3, 8}, 1.0f);
        CHECK_THROWS_AS(gather_pool(x, GatherKind::AvgPool, ExtentSpec::Ratio(4)), ConfigError);
    }
    SUBCASE("extent ratio must be a power of two >= 2") {
        Tensor x = Tensor::full({1, 1, 8, 8}, 1.0f);
        CHECK_THROWS_AS(gather_pool(x, GatherKind::AvgPool, ExtentSpec::Ratio(3)), ConfigError);
        CHECK_THROWS_AS(gather_pool(x, GatherKind::AvgPool, ExtentSpec::Ratio(1)), ConfigError);
    }
}

TEST_CASE("pooling gathers equal the selection-window oracle exactly") {
    Rng rng(101);
    for (int e : {2, 4, 8}) {
        for (int rep = 0; rep < 25; ++rep) {
            const int n = 1 + static_cast<int>(rng.uniform_int(2));
            const int c = 1 + static_cast<int>(rng.uniform_int(4));
            const int h = e + static_cast<int>(rng.uniform_int(18 - e));
            const int w = e + static_cast<int>(rng.uniform_int(18 - e));
            Tensor x = random_tensor({n, c, h, w}, rng);
            for (GatherKind kind : {GatherKind::AvgPool, GatherKind::MaxPool}) {
                Tensor got = gather_pool(x, kind, ExtentSpec::Ratio(e));
                Tensor ref = gex::testing::gather_pool_oracle(x, kind, e);
                CHECK(got.shape() == Shape4{n, c, (h + e - 1) / e, (w + e - 1) / e});
                REQUIRE(bitwise_equal(got, ref));
            }
        }
    }
}

TEST_CASE("gather locality: masking outside iota(u,e) leaves the output bit unchanged") {
    Rng rng(202);
    for (int rep = 0; rep < 100; ++rep) {
        const int e = 1 << (1 + rng.uniform_int(3));  // 2, 4, 8
        const int h = e + static_cast<int>(rng.uniform_int(17 - e));
        const int w = e + static_cast<int>(rng.uniform_int(17 - e));
        const int C = 1 + static_cast<int>(rng.uniform_int(3));
        Tensor x = random_tensor({1, C, h, w}, rng);
        const int Ho = (h + e - 1) / e, Wo = (w + e - 1) / e;
        const int uy = 1 + static_cast<int>(rng.uniform_int(Ho));
        const int ux = 1 + static_cast<int>(rng.uniform_int(Wo));
        const int c = static_cast<int>(rng.uniform_int(C));

        Tensor masked = Tensor::zeros(x.shape());
        for (auto [iy, ix] : selection_window({uy, ux}, e, h, w))
            masked.at(0, c, iy - 1, ix - 1) = x.at(0, c, iy - 1, ix - 1);

        for (GatherKind kind : {GatherKind::AvgPool, GatherKind::MaxPool}) {
            Tensor full = gather_pool(x, kind, ExtentSpec::Ratio(e));
            Tensor part = gather_pool(masked, kind, ExtentSpec::Ratio(e));
            CHECK(full.at(0, c, uy - 1, ux - 1) == part.at(0, c, uy - 1, ux - 1));
        }
    }
}

TEST_CASE("depth-wise gather locality via the composed receptive field") {
    Rng rng(303);
    for (int rep = 0; rep < 20; ++rep) {
        const int e = 1 << (1 + rng.uniform_int(3));
        const int h = 16, w = 16, C = 2;
        ParamStore store;
        Rng irng(400 + rep);
        GEUnit unit(store, "u", GEVariant::theta(ExtentSpec::Ratio(e)).bind(C, h, w), irng);
        Tensor x = random_tensor({1, C, h, w}, rng);
        const int Ho = (h + e - 1) / e;
        const int u0 = static_cast<int>(rng.uniform_int(Ho));
        const int v0 = static_cast<int>(rng.uniform_int(Ho));
        const int c = static_cast<int>(rng.uniform_int(C));

        // composed RF of the stride-2 3x3 chain: [e*u - (e-1), e*u + (e-1)]
        Tensor masked = Tensor::zeros(x.shape());
        for (int iy = std::max(0, e * u0 - (e - 1)); iy <= std::min(h - 1, e * u0 + e - 1); ++iy)
            for (int ix = std::max(0, e * v0 - (e - 1)); ix <= std::min(w - 1, e * v0 + e - 1);
                 ++ix)
                masked.at(0, c, iy, ix) = x.at(0, c, iy, ix);

        NoGrad ng;  // eval mode below: batchnorm is a per-channel affine map
        Tensor full = unit.gather_forward(x, false);
        Tensor part = unit.gather_forward(masked, false);
        CHECK(full.at(0, c, u0, v0) == part.at(0, c, u0, v0));
    }
}

TEST_CASE("gather channel independence") {
    Rng rng(404);
    Tensor x = random_tensor({1, 3, 8, 8}, rng);
    Tensor perturbed = x.clone();
    for (int i = 0; i < 64; ++i) perturbed.data()[2 * 64 + i] += 5.0f;  // channel 2 only

    for (GatherKind kind : {GatherKind::AvgPool, GatherKind::MaxPool}) {
        Tensor a = gather_pool(x, kind, ExtentSpec::Ratio(2));
        Tensor b = gather_pool(perturbed, kind, ExtentSpec::Ratio(2));
        for (int c = 0; c < 2; ++c)
            for (int i = 0; i < 16; ++i)
                CHECK(a.data()[c * 16 + i] == b.data()[c * 16 + i]);
    }
    {
        ParamStore store;
        Rng irng(7);
        GEUnit unit(store, "u", GEVariant::theta(ExtentSpec::Ratio(2)).bind(3, 8, 8), irng);
        NoGrad ng;
        Tensor a = unit.gather_forward(x, false);
        Tensor b = unit.gather_forward(perturbed, false);
        for (int c = 0; c < 2; ++c)
            for (int i = 0; i < 16; ++i)
                CHECK(a.data()[c * 16 + i] == b.data()[c * 16 + i]);
    }
}

TEST_CASE("depth-wise gather structure") {
    SUBCASE("e=2 is a single stride-2 stage") {
        ParamStore store;
        Rng rng(1);
        GEUnit unit(store, "u", GEVariant::theta(ExtentSpec::Ratio(2)).bind(3, 8, 8), rng);
        Tensor x = Tensor::full({1, 3, 8, 8}, 1.0f);
        CHECK(unit.forward(x, true).shape() == Shape4{1, 3, 8, 8});
        NoGrad ng;
        CHECK(unit.gather_forward(x, false).shape() == Shape4{1, 3, 4, 4});
        int stages = 0;
        for (const auto& e : store.params())
            if (e.name.find(".conv.weight") != std::string::npos) ++stages;
        CHECK(stages == 1);
    }
    SUBCASE("global case: one full-field conv, 49C + 2C parameters at 7x7") {
        ParamStore store;
        Rng rng(2);
        const int C = 5;
        GEUnit unit(store, "u", GEVariant::theta(ExtentSpec::Global()).bind(C, 7, 7), rng);
        CHECK(store.param_count() == 49 * C + 2 * C);
        Tensor x = Tensor::full({1, C, 7, 7}, 0.3f);
        NoGrad ng;
        CHECK(unit.gather_forward(x, false).shape() == Shape4{1, C, 1, 1});
    }
    SUBCASE("e=8 chains exactly log2(8)=3 stages") {
        ParamStore store;
        Rng rng(3);
        GEUnit unit(store, "u", GEVariant::theta(ExtentSpec::Ratio(8)).bind(2, 16, 16), rng);
        int stages = 0;
        for (const auto& e : store.params())
            if (e.name.find(".conv.weight") != std::string::npos) ++stages;
        CHECK(stages == 3);
        Tensor x = Tensor::full({1, 2, 16, 16}, 1.0f);
        NoGrad ng;
        CHECK(unit.gather_forward(x, false).shape() == Shape4{1, 2, 2, 2});
    }
}

TEST_CASE("direct excite") {
    Rng rng(505);
    SUBCASE("zero aggregates halve the input") {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        Tensor xhat = Tensor::zeros({2, 3, 2, 2});
        Tensor y = excite_direct(x, xhat);
        for (std::int64_t i = 0; i < y.numel(); ++i)
            CHECK(y.data()[i] == doctest::Approx(0.5f * x.data()[i]));
    }
    SUBCASE("1x1 aggregates broadcast one gate per channel") {
        Tensor x = Tensor::full({1, 2, 4, 4}, 1.0f);
        Tensor xhat = Tensor::from_vector({1, 2, 1, 1}, {0.3f, -1.2f});
        Tensor y = excite_direct(x, xhat);
        for (int c = 0; c < 2; ++c) {
            const float first = y.at(0, c, 0, 0);
            for (int i = 0; i < 16; ++i) CHECK(y.data()[c * 16 + i] == first);
        }
    }
    SUBCASE("gate lies in (0,1): |y| <= |x| with matching sign") {
        Tensor x = random_tensor({2, 3, 6, 6}, rng);
        Tensor xhat = random_tensor({2, 3, 3, 3}, rng, 2.0f);
        Tensor y = excite_direct(x, xhat);
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            CHECK(std::abs(y.data()[i]) <= std::abs(x.data()[i]));
            if (x.data()[i] != 0.0f) CHECK(y.data()[i] * x.data()[i] >= 0.0f);
        }
    }
    SUBCASE("channel mismatch is a dimension error") {
        Tensor x = Tensor::full({1, 3, 4, 4}, 1.0f);
        Tensor xhat = Tensor::full({1, 2, 2, 2}, 1.0f);
        CHECK_THROWS_AS(excite_direct(x, xhat), DimensionError);
    }
}

TEST_CASE("subnet excite") {
    SUBCASE("all-zero subnet parameters gate at exactly one half") {
        ParamStore store;
        Rng rng(1);
        GEUnit unit(store, "u", GEVariant::se(2).bind(4, 4, 4), rng);
        for (auto& e : const_cast<std::vector<ParamStore::Entry>&>(store.params()))
            std::fill(e.tensor.vec().begin(), e.tensor.vec().end(), 0.0f);
        Tensor x = gex::testing::random_tensor({1, 4, 4, 4}, rng);
        Tensor y = unit.forward(x, true);
        for (std::int64_t i = 0; i < y.numel(); ++i)
            CHECK(y.data()[i] == doctest::Approx(0.5f * x.data()[i]));
    }
    SUBCASE("subnet parameter count at C=2048, r=16 is 526,464") {
        ParamStore store;
        Rng rng(2);
        GEUnit unit(store, "u", GEVariant::se(16).bind(2048, 7, 7), rng);
        CHECK(store.param_count() == 2 * (2048 * 128) + 128 + 2048);
    }
    SUBCASE("hidden width never collapses to zero") {
        GEUnitConfig cfg = GEVariant::se(16).bind(8, 4, 4);  // tiny channel count
        CHECK(cfg.hidden_width() == 1);
    }
}

TEST_CASE("assembled unit contracts") {
    Rng rng(606);
    SUBCASE("SE equals the hand-assembled composition") {
        ParamStore store;
        Rng irng(3);
        GEUnit unit(store, "u", GEVariant::se(16).bind(64, 8, 8), irng);
        Tensor x = random_tensor({2, 64, 8, 8}, rng);
        Tensor y = unit.forward(x, true);

        Tensor agg = global_avg_pool(x);
        const Tensor& w1 = *store.find("u.fc1.weight");
        const Tensor& b1 = *store.find("u.fc1.bias");
        const Tensor& w2 = *store.find("u.fc2.weight");
        const Tensor& b2 = *store.find("u.fc2.bias");
        Tensor z = conv2d(agg, w1, std::optional<Tensor>(b1), 1, 0, 1);
        z = conv2d(relu(z), w2, std::optional<Tensor>(b2), 1, 0, 1);
        Tensor ref = hadamard(x, sigmoid(nearest_interpolate(z, 8, 8)));
        CHECK(bitwise_equal(y, ref));
    }
    SUBCASE("GE-theta-minus global on constant input c gives sigmoid(c)*c") {
        ParamStore store;
        Rng irng(4);
        GEUnit unit(store, "u", GEVariant::theta_minus(ExtentSpec::Global()).bind(3, 5, 5), irng);
        const float c = 0.8f;
        Tensor x = Tensor::full({1, 3, 5, 5}, c);
        Tensor y = unit.forward(x, true);
        const float expect = c / (1.0f + std::exp(-c));
        for (std::int64_t i = 0; i < y.numel(); ++i)
            CHECK(y.data()[i] == doctest::Approx(expect));
    }
    SUBCASE("saturated gate makes the unit the identity, bitwise") {
        struct Saturate : ForwardHooks {
            bool saturate_gates() const override { return true; }
        } hook;
        ParamStore store;
        Rng irng(5);
        GEUnit unit(store, "u", GEVariant::theta_plus(ExtentSpec::Ratio(2), 2).bind(4, 8, 8),
                    irng);
        Tensor x = random_tensor({2, 4, 8, 8}, rng);
        Tensor y = unit.forward(x, false, &hook, "u");
        CHECK(bitwise_equal(y, x));
    }
    SUBCASE("output shape always equals input shape") {
        for (auto variant :
             {GEVariant::theta_minus(ExtentSpec::Ratio(4)), GEVariant::theta(ExtentSpec::Ratio(2)),
              GEVariant::theta_plus(ExtentSpec::Global(), 4), GEVariant::se(4)}) {
            ParamStore store;
            Rng irng(6);
            GEUnit unit(store, "u", variant.bind(8, 8, 8), irng);
            Tensor x = random_tensor({2, 8, 8, 8}, rng);
            CHECK(unit.forward(x, true).shape() == x.shape());
        }
    }
    SUBCASE("parameter-free pairings register zero parameters") {
        for (auto variant : {GEVariant::theta_minus(ExtentSpec::Global()),
                             GEVariant::theta_minus(ExtentSpec::Ratio(8)),
                             GEVariant::theta_minus(ExtentSpec::Ratio(2), GatherKind::MaxPool)}) {
            ParamStore store;
            Rng irng(7);
            GEUnit unit(store, "u", variant.bind(16, 16, 16), irng);
            CHECK(store.param_count() == 0);
            CHECK(variant.parameter_free());
        }
        CHECK_FALSE(GEVariant::theta(ExtentSpec::Global()).parameter_free());
        CHECK_FALSE(GEVariant::se(16).parameter_free());
    }
}

TEST_CASE("named variants map to their defining pairings") {
    auto tm = GEVariant::theta_minus(ExtentSpec::Ratio(4));
    CHECK(tm.gather == GatherKind::AvgPool);
    CHECK_FALSE(tm.excite.subnet);

    auto th = GEVariant::theta(ExtentSpec::Global());
    CHECK(th.gather == GatherKind::DepthwiseConv);
    CHECK_FALSE(th.excite.subnet);

    auto tp = GEVariant::theta_plus(ExtentSpec::Global());
    CHECK(tp.gather == GatherKind::DepthwiseConv);
    CHECK(tp.excite.subnet);
    CHECK(tp.excite.reduction == 16);

    auto se = GEVariant::se();
    CHECK(se.gather == GatherKind::AvgPool);
    CHECK(se.extent.global);
    CHECK(se.excite.subnet);
}
