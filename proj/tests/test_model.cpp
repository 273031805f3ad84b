#include <doctest.h>

#include <cmath>
#include <map>

#include "gex/cost.hpp"
#include "gex/model.hpp"
#include "support/oracles.hpp"

using namespace gex;
using gex::testing::bitwise_equal;
using gex::testing::random_tensor;

namespace {

// layer prefix = parameter name minus its last component
std::string layer_of(const std::string& param_name) {
    return param_name.substr(0, param_name.rfind('.'));
}

struct SaturateHook : ForwardHooks {
    bool saturate_gates() const override { return true; }
};

void copy_shared_tensors(const Model& src, Model& dst) {
    for (const auto& e : src.store.params()) {
        Tensor* t = dst.store.find(e.name);
        REQUIRE(t != nullptr);
        t->vec() = e.tensor.vec();
    }
    for (const auto& e : src.store.buffers()) {
        Tensor* t = dst.store.find(e.name);
        REQUIRE(t != nullptr);
        t->vec() = e.tensor.vec();
    }
}

}  // namespace

TEST_CASE("resnet50 structure: 53 conv layers plus the classifier") {
    CostReport rep = count_cost(ArchSpec::resnet50(), std::nullopt);
    int convs = 0, fcs = 0;
    for (const auto& l : rep.lines) {
        if (l.macs == 0) continue;
        if (l.name == "fc")
            ++fcs;
        else
            ++convs;
    }
    CHECK(convs == 53);
    CHECK(fcs == 1);
    CHECK(rep.total_params == 25557032);
}

TEST_CASE("stage placement inserts one GE unit per block") {
    GEPlacement place;
    place.variant = GEVariant::theta(ExtentSpec::Global());
    place.stages = {"stage2"};
    Model m = build_model(ArchSpec::resnet50_narrow(), place, 1);
    int units = 0;
    for (std::size_t i = 0; i < m.block_names().size(); ++i)
        if (m.block_has_ge(m.block_names()[i])) ++units;
    CHECK(units == 3);  // stage2 has 3 blocks

    GEPlacement all;
    all.variant = GEVariant::theta_minus(ExtentSpec::Global());
    Model m2 = build_model(ArchSpec::cifar_resnet(110), all, 1);
    int units2 = 0;
    for (const auto& b : m2.block_names())
        if (m2.block_has_ge(b)) ++units2;
    CHECK(units2 == 54);  // 3 stages x 18 blocks
}

TEST_CASE("invalid placement stage is a configuration error") {
    GEPlacement place;
    place.variant = GEVariant::se();
    place.stages = {"stage9"};
    CHECK_THROWS_AS(build_model(ArchSpec::cifar_resnet(110), place, 1), ConfigError);
}

TEST_CASE("cifar-resnet110 with SE produces (N, classes) logits") {
    GEPlacement place;
    place.variant = GEVariant::se();
    Model m = build_model(ArchSpec::cifar_resnet(110, 10, 4), place, 3);
    Tensor x = Tensor::zeros({1, 3, 32, 32});
    Tensor logits = m.forward(x, false);
    CHECK(logits.shape() == Shape4{1, 10, 1, 1});
    for (std::int64_t i = 0; i < logits.numel(); ++i)
        CHECK(std::isfinite(logits.data()[i]));
}

TEST_CASE("eval forward is deterministic, bit for bit") {
    Model m = build_model(ArchSpec::wrn_16_8(), std::nullopt, 11);
    Rng rng(12);
    Tensor x = random_tensor({2, 3, 32, 32}, rng);
    Tensor a = m.forward(x, false);
    Tensor b = m.forward(x, false);
    CHECK(bitwise_equal(a, b));
}

TEST_CASE("forward geometry mismatch is a dimension error") {
    Model m = build_model(ArchSpec::cifar_resnet(110, 10, 8), std::nullopt, 1);
    CHECK_THROWS_AS(m.forward(Tensor::zeros({1, 3, 28, 28}), false), DimensionError);
    CHECK_THROWS_AS(m.forward(Tensor::zeros({1, 1, 32, 32}), false), DimensionError);
}

TEST_CASE("saturated gates reduce a GE model to its parameter-shared baseline") {
    const ArchSpec arch = ArchSpec::cifar_resnet(110, 10, 8);
    Model baseline = build_model(arch, std::nullopt, 42);

    for (auto variant : {GEVariant::theta_minus(ExtentSpec::Global()),
                         GEVariant::se(4), GEVariant::theta(ExtentSpec::Ratio(2))}) {
        GEPlacement place;
        place.variant = variant;
        Model ge_model = build_model(arch, place, 43);
        copy_shared_tensors(baseline, ge_model);

        Rng rng(44);
        Tensor x = random_tensor({2, 3, 32, 32}, rng);
        SaturateHook hook;
        Tensor a = baseline.forward(x, false);
        Tensor b = ge_model.forward(x, false, &hook);
        CHECK(bitwise_equal(a, b));
    }
}

TEST_CASE("cost walk and parameter registry agree exactly, line by line") {
    struct Case {
        ArchSpec arch;
        std::optional<GEPlacement> place;
    };
    std::vector<Case> cases;
    cases.push_back({ArchSpec::resnet50_narrow(), std::nullopt});
    {
        GEPlacement p;
        p.variant = GEVariant::theta_plus(ExtentSpec::Global());
        cases.push_back({ArchSpec::resnet50_narrow(), p});
    }
    {
        GEPlacement p;
        p.variant = GEVariant::theta(ExtentSpec::Ratio(4));
        p.stages = {"stage1", "stage2"};
        cases.push_back({ArchSpec::cifar_resnet(164, 100, 4), p});
    }
    {
        GEPlacement p;
        p.variant = GEVariant::se();
        cases.push_back({ArchSpec::wrn_16_8(), p});
    }

    for (auto& c : cases) {
        Model m = build_model(c.arch, c.place, 7);
        CostReport rep = count_cost(c.arch, c.place);

        CHECK(rep.total_params == m.store.param_count());

        std::map<std::string, std::int64_t> census;
        for (const auto& e : m.store.params()) census[layer_of(e.name)] += e.tensor.numel();
        std::map<std::string, std::int64_t> lines;
        for (const auto& l : rep.lines)
            if (l.params > 0) lines[l.name] += l.params;
        CHECK(census.size() == lines.size());
        for (const auto& [name, count] : census) {
            INFO("layer " << name);
            REQUIRE(lines.count(name) == 1);
            CHECK(lines[name] == count);
        }
    }
}

TEST_CASE("every parameter appears exactly once in the registry") {
    GEPlacement p;
    p.variant = GEVariant::theta_plus(ExtentSpec::Ratio(2));
    Model m = build_model(ArchSpec::cifar_resnet(110, 10, 4), p, 5);
    std::map<std::string, int> seen;
    for (const auto& e : m.store.params()) ++seen[e.name];
    for (const auto& [name, cnt] : seen) {
        INFO(name);
        CHECK(cnt == 1);
    }
}
