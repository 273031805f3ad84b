// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Training-dependent checks use the CIFAR-10 binaries under
// GEX_CIFAR10_DIR when present, otherwise a deterministic synthetic dataset
// written and reloaded through the same binary format. Set GEX_ACCEPT_LONG=1
// to run the full-budget training comparison (hours on CPU).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "gex/gex.hpp"
#include "support/oracles.hpp"

using namespace gex;
namespace fs = std::filesystem;

namespace {

const std::string kWork = "/tmp/gex_acceptance";

struct Outcome {
    bool pass = true;
    bool skipped = false;
    std::string detail;
};

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------- data ----

bool using_real_data() {
    const char* dir = std::getenv("GEX_CIFAR10_DIR");
    return dir && *dir && fs::exists(std::string(dir) + "/data_batch_1.bin");
}

// Loads CIFAR-10 through the binary loader either way.
std::pair<Dataset, Dataset> acceptance_datasets() {
    if (using_real_data()) {
        const std::string dir = std::getenv("GEX_CIFAR10_DIR");
        return {load_cifar(dir, CifarVariant::Cifar10, true),
                load_cifar(dir, CifarVariant::Cifar10, false)};
    }
    const std::string dir = kWork + "/synthetic-cifar10";
    if (!fs::exists(dir + "/data_batch_1.bin")) {
        write_cifar(dir, synthetic_cifar(CifarVariant::Cifar10, true, 6000, 2026));
        write_cifar(dir, synthetic_cifar(CifarVariant::Cifar10, false, 1500, 2026));
    }
    return {load_cifar(dir, CifarVariant::Cifar10, true),
            load_cifar(dir, CifarVariant::Cifar10, false)};
}

// The toy models of criteria 7b/9 stand in for CIFAR-trained networks, so
// their fallback data uses the benchmark-like difficulty (a saturated model
// on trivially easy data turns the pruning comparison into ties).
std::pair<Dataset, Dataset> toy_datasets() {
    if (using_real_data()) return acceptance_datasets();
    const std::string dir = kWork + "/synthetic-cifar10-benchlike";
    if (!fs::exists(dir + "/data_batch_1.bin")) {
        write_cifar(dir, synthetic_cifar(CifarVariant::Cifar10, true, 6000, 27,
                                         kCifarLikeSynthetic));
        write_cifar(dir, synthetic_cifar(CifarVariant::Cifar10, false, 1500, 27,
                                         kCifarLikeSynthetic));
    }
    return {load_cifar(dir, CifarVariant::Cifar10, true),
            load_cifar(dir, CifarVariant::Cifar10, false)};
}

// ------------------------------------------------------------ criteria ----

Outcome criterion1_complexity() {
    const double t0 = now_s();
    struct Row {
        ArchSpec arch;
        const char* ge;
        double params_m, gflops;
    };
    const ArchSpec r50 = ArchSpec::resnet50(), r101 = ArchSpec::resnet101();
    const std::vector<Row> rows = {
        {r50, "", 25.6, 3.86},
        {r50, "theta-minus:global:all", 25.6, 3.86},
        {r50, "theta:global:all", 31.2, 3.87},
        {r50, "theta-plus:global:all", 33.7, 3.87},
        {r50, "se:global:all", 28.1, 3.87},
        {r50, "theta:global:stage2", 28.0, 3.86},
        {r50, "theta:global:stage3", 27.2, 3.86},
        {r50, "theta:global:stage4", 26.8, 3.86},
        {r101, "", 44.6, 7.57},
        {r101, "se:global:all", 49.4, 7.58},
        {r101, "theta-minus:global:all", 44.6, 7.58},
        {r101, "theta:global:all", 53.7, 7.59},
        {r101, "theta-plus:global:all", 58.4, 7.59},
    };
    Outcome out;
    for (const auto& row : rows) {
        CostReport rep = count_cost(row.arch, parse_ge_placement(row.ge));
        const double dp = std::abs(rep.params_millions() - row.params_m);
        const double dg = std::abs(rep.gflops() - row.gflops);
        if (dp > 0.2 || dg > 0.05) {
            out.pass = false;
            out.detail += " [" + row.arch.name() + " " + (*row.ge ? row.ge : "baseline") +
                          ": got " + std::to_string(rep.params_millions()) + "M/" +
                          std::to_string(rep.gflops()) + "G]";
        }
    }
    const double dt = now_s() - t0;
    if (dt >= 1.0) {
        out.pass = false;
        out.detail += " [runtime " + std::to_string(dt) + "s >= 1s]";
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "13 table rows within +-0.2M/+-0.05G in %.3fs", dt);
    if (out.pass) out.detail = buf;
    return out;
}

Outcome criterion2_gather_oracle() {
    Outcome out;
    Rng rng(20260808);
    int checked = 0;
    for (int rep = 0; rep < 100; ++rep) {
        const int e = 1 << (1 + rng.uniform_int(3));  // 2, 4, 8
        const int n = 1 + static_cast<int>(rng.uniform_int(2));
        const int c = 1 + static_cast<int>(rng.uniform_int(4));
        const int h = e + static_cast<int>(rng.uniform_int(18 - e));
        const int w = e + static_cast<int>(rng.uniform_int(18 - e));
        Tensor x = gex::testing::random_tensor({n, c, h, w}, rng);
        for (GatherKind kind : {GatherKind::AvgPool, GatherKind::MaxPool}) {
            Tensor got = gather_pool(x, kind, ExtentSpec::Ratio(e));
            if (!(got.shape() == Shape4{n, c, (h + e - 1) / e, (w + e - 1) / e})) {
                out.pass = false;
                out.detail = "shape mismatch at e=" + std::to_string(e);
                return out;
            }
            if (!gex::testing::bitwise_equal(got,
                                             gex::testing::gather_pool_oracle(x, kind, e))) {
                out.pass = false;
                out.detail = "value mismatch vs window oracle at e=" + std::to_string(e);
                return out;
            }
            ++checked;
        }
    }
    out.detail = std::to_string(checked) + " gathers bit-equal to the iota-window oracle";
    return out;
}

Outcome criterion3_locality() {
    Outcome out;
    Rng rng(333);
    int pool_checked = 0, dw_checked = 0;
    for (int rep = 0; rep < 100; ++rep) {
        const int e = 1 << (1 + rng.uniform_int(3));
        const int C = 1 + static_cast<int>(rng.uniform_int(3));
        const int h = e + static_cast<int>(rng.uniform_int(17 - e));
        const int w = e + static_cast<int>(rng.uniform_int(17 - e));
        Tensor x = gex::testing::random_tensor({1, C, h, w}, rng);
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
            if (full.at(0, c, uy - 1, ux - 1) != part.at(0, c, uy - 1, ux - 1)) {
                out.pass = false;
                out.detail = "pooling locality violated at e=" + std::to_string(e);
                return out;
            }
            ++pool_checked;
        }

        // depth-wise version over the composed receptive field
        ParamStore store;
        Rng irng(1000 + rep);
        GEUnit unit(store, "u", GEVariant::theta(ExtentSpec::Ratio(e)).bind(C, h, w), irng);
        const int u0 = uy - 1, v0 = ux - 1;
        Tensor dmask = Tensor::zeros(x.shape());
        for (int iy = std::max(0, e * u0 - (e - 1)); iy <= std::min(h - 1, e * u0 + e - 1); ++iy)
            for (int ix = std::max(0, e * v0 - (e - 1)); ix <= std::min(w - 1, e * v0 + e - 1);
                 ++ix)
                dmask.at(0, c, iy, ix) = x.at(0, c, iy, ix);
        NoGrad ng;
        Tensor full = unit.gather_forward(x, false);
        Tensor part = unit.gather_forward(dmask, false);
        if (full.at(0, c, u0, v0) != part.at(0, c, u0, v0)) {
            out.pass = false;
            out.detail = "depth-wise composed-RF locality violated at e=" + std::to_string(e);
            return out;
        }
        ++dw_checked;
    }
    out.detail = std::to_string(pool_checked) + " pooling + " + std::to_string(dw_checked) +
                 " depth-wise locality checks";
    return out;
}

Outcome criterion4_gradients() {
    const double t0 = now_s();
    Outcome out;
    auto reports = run_op_gradchecks("all", 424242);
    auto model_reports = run_model_gradcheck(424242);
    reports.insert(reports.end(), model_reports.begin(), model_reports.end());
    int passed = 0;
    for (const auto& r : reports) {
        if (!r.pass) {
            out.pass = false;
            out.detail += " [" + r.name + "]";
        } else {
            ++passed;
        }
    }
    const double dt = now_s() - t0;
    if (dt >= 120.0) {
        out.pass = false;
        out.detail += " [runtime " + std::to_string(dt) + "s >= 120s]";
    }
    if (out.pass) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%d finite-difference checks in %.1fs", passed, dt);
        out.detail = buf;
    }
    return out;
}

Outcome criterion5_saturated_gate() {
    Outcome out;
    const ArchSpec arch = ArchSpec::cifar_resnet(110, 10, 1);  // full width
    Model baseline = build_model(arch, std::nullopt, 5001);
    GEPlacement place;
    place.variant = GEVariant::se();
    Model ge_model = build_model(arch, place, 5002);
    for (const auto& e : baseline.store.params()) {
        Tensor* t = ge_model.store.find(e.name);
        if (!t) {
            out.pass = false;
            out.detail = "missing shared tensor " + e.name;
            return out;
        }
        t->vec() = e.tensor.vec();
    }
    for (const auto& e : baseline.store.buffers()) ge_model.store.find(e.name)->vec() = e.tensor.vec();

    struct Saturate : ForwardHooks {
        bool saturate_gates() const override { return true; }
    } hook;
    Rng rng(5003);
    Tensor x = gex::testing::random_tensor({16, 3, 32, 32}, rng);
    Tensor a = baseline.forward(x, false);
    Tensor b = ge_model.forward(x, false, &hook);
    if (!gex::testing::bitwise_equal(a, b)) {
        out.pass = false;
        out.detail = "saturated-gate forward differs from the shared-parameter baseline";
        return out;
    }
    out.detail = "bit-exact over 16 inputs (cifar-resnet110 + SE, gates clamped)";
    return out;
}

Outcome criterion6_parameter_free() {
    Outcome out;
    for (auto arch : {ArchSpec::resnet50(), ArchSpec::cifar_resnet(110)}) {
        for (const char* ge : {"theta-minus:global:all", "theta-minus-max:e4:all"}) {
            const auto place = parse_ge_placement(ge);
            const std::int64_t cost_base = count_cost(arch, std::nullopt).total_params;
            const std::int64_t cost_ge = count_cost(arch, place).total_params;
            if (cost_ge != cost_base) {
                out.pass = false;
                out.detail += " [cost model: " + arch.name() + " " + ge + "]";
            }
        }
    }
    // registry census route (desk-scale build)
    const ArchSpec arch = ArchSpec::cifar_resnet(110);
    Model plain = build_model(arch, std::nullopt, 61);
    GEPlacement place;
    place.variant = GEVariant::theta_minus(ExtentSpec::Global());
    Model ge_model = build_model(arch, place, 61);
    if (ge_model.store.param_count() != plain.store.param_count()) {
        out.pass = false;
        out.detail += " [registry census differs]";
    }
    if (out.pass)
        out.detail = "0 parameters added by census and cost model (avg and max gathers)";
    return out;
}

struct ToyRun {
    Model model;
    TrainResult result;
};

// Reduced-width CifarResNet-110 + GE-theta-minus(global): the 7b/9 toy.
ToyRun train_toy_ge(const Dataset& train_ds, const Dataset& test_ds, const NormStats& norm,
                    std::uint64_t seed, int width_div, int subset, int epochs,
                    const std::string& tag, bool with_ge = true) {
    std::optional<GEPlacement> place;
    if (with_ge) {
        GEPlacement p;
        p.variant = GEVariant::theta_minus(ExtentSpec::Global());
        place = p;
    }
    ToyRun run{build_model(ArchSpec::cifar_resnet(110, 10, width_div), place, seed), {}};
    TrainConfig cfg;
    cfg.batch = 64;
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.subset = subset;
    cfg.eval_subset = 512;
    cfg.eval_batch = 128;
    cfg.checkpoint_every = 0;
    cfg.schedule.initial_lr = 0.1;
    cfg.out_dir = kWork + "/" + tag;
    run.result = train(run.model, train_ds, test_ds, norm, cfg);
    return run;
}

Outcome criterion7_training(const Dataset& train_ds, const Dataset& test_ds,
                            const NormStats& norm) {
    Outcome out;
    // (a) 2-epoch smoke at full width on a 1k subset
    GEPlacement place;
    place.variant = GEVariant::theta_minus(ExtentSpec::Global());
    Model model = build_model(ArchSpec::cifar_resnet(110, 10, 1), place, 7001);

    // initial loss: cross-entropy of the untrained model, batch statistics
    // (a throwaway same-seed build; eval mode with default running stats is
    // not a meaningful reference through 110 unnormalized layers)
    double initial = 0.0;
    {
        Model probe_model = build_model(ArchSpec::cifar_resnet(110, 10, 1), place, 7001);
        NoGrad ng;
        const int probe = 128;
        Tensor x(Shape4{probe, 3, 32, 32});
        std::vector<int> labels(probe);
        for (int i = 0; i < probe; ++i) {
            eval_transform_into(train_ds, i, norm, x.data() + static_cast<std::int64_t>(i) * kCifarPixels);
            labels[i] = train_ds.labels[i];
        }
        initial = softmax_cross_entropy(probe_model.forward(x, true), labels).data()[0];
    }

    TrainConfig cfg;
    cfg.batch = 8;
    cfg.epochs = 2;
    cfg.seed = 7001;
    cfg.subset = 1000;
    cfg.eval_subset = 256;
    cfg.eval_batch = 128;
    cfg.schedule.initial_lr = 0.05;  // a 110-layer net descends faster early at half lr
    cfg.out_dir = kWork + "/smoke";
    TrainResult res = train(model, train_ds, test_ds, norm, cfg);
    const double final_loss = res.rows.back().train_loss;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "smoke: initial loss %.3f -> final %.3f (2 epochs, 1k subset)",
                  initial, final_loss);
    out.detail = buf;
    if (!(final_loss < 0.5 * initial)) {
        out.pass = false;
        out.detail += " [loss not halved]";
    }
    return out;
}

Outcome criterion7b_long() {
    Outcome out;
    if (!std::getenv("GEX_ACCEPT_LONG")) {
        out.skipped = true;
        out.detail = "optional long job; set GEX_ACCEPT_LONG=1 (hours on CPU)";
        return out;
    }
    auto [train_ds, test_ds] = toy_datasets();
    NormStats norm = compute_norm_stats(train_ds);
    const int epochs = std::getenv("GEX_ACCEPT_LONG_EPOCHS")
                           ? std::atoi(std::getenv("GEX_ACCEPT_LONG_EPOCHS"))
                           : 40;
    double base_err = 0.0, ge_err = 0.0;
    for (std::uint64_t seed : {11u, 22u, 33u}) {
        ToyRun base = train_toy_ge(train_ds, test_ds, norm, seed, 2, 0, epochs,
                                   "long-base-" + std::to_string(seed), false);
        ToyRun ge = train_toy_ge(train_ds, test_ds, norm, seed, 2, 0, epochs,
                                 "long-ge-" + std::to_string(seed), true);
        base_err += base.result.rows.back().val_top1;
        ge_err += ge.result.rows.back().val_top1;
    }
    base_err /= 3.0;
    ge_err /= 3.0;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "mean final test error: baseline %.4f vs GE %.4f (3 seeds)",
                  base_err, ge_err);
    out.detail = buf;
    out.pass = ge_err <= base_err;
    return out;
}

Outcome criterion8_selectivity() {
    Outcome out;
    const double one = selectivity_index({1.0, 0.0, 0.0, 0.0});
    const double flat = selectivity_index({0.7, 0.7, 0.7});
    const double fixture = selectivity_index({4.0, 2.0, 0.0});
    char buf[128];
    std::snprintf(buf, sizeof(buf), "indices: one-class %.6f, constant %.6f, (4,2,0) %.6f", one,
                  flat, fixture);
    out.detail = buf;
    if (std::abs(one - 1.0) > 1e-3 || std::abs(flat) > 1e-12 ||
        std::abs(fixture - 0.6) > 1e-6)
        out.pass = false;
    return out;
}

Outcome criterion9_pruning(std::vector<ToyRun>& toys, const Dataset& test_ds,
                           const NormStats& norm) {
    Outcome out;
    // first block of the last stage: the trend is probed where the reference
    // experiment probed it (conv5-1, the deepest stage's first block)
    const std::string block = "stage3.block0";
    const int subset = 1500;

    // endpoints on the first toy
    Model& m0 = toys[0].model;
    auto [t1, t5] = evaluate(m0, test_ds, norm, 128, subset);
    const double acc = 1.0 - t1;
    const double r0 = prune_eval(m0, test_ds, norm, block, 0.0, PruneOrder::Ascending, 128, subset);
    const double r1a = prune_eval(m0, test_ds, norm, block, 1.0, PruneOrder::Ascending, 128, subset);
    const double r1d = prune_eval(m0, test_ds, norm, block, 1.0, PruneOrder::Descending, 128, subset);
    if (std::abs(r0 - acc) > 1e-12) {
        out.pass = false;
        out.detail += " [ratio-0 != evaluate]";
    }
    if (r1a != r1d) {
        out.pass = false;
        out.detail += " [ratio-1 order dependent]";
    }

    int cells_ok = 0;
    std::string cells;
    for (auto& toy : toys) {
        for (double ratio : {0.3, 0.5, 0.7}) {
            const double asc =
                prune_eval(toy.model, test_ds, norm, block, ratio, PruneOrder::Ascending, 128, subset);
            const double desc =
                prune_eval(toy.model, test_ds, norm, block, ratio, PruneOrder::Descending, 128, subset);
            if (asc >= desc) ++cells_ok;
            char cb[48];
            std::snprintf(cb, sizeof(cb), " %.2f:%+0.4f", ratio, asc - desc);
            cells += cb;
        }
    }
    if (cells_ok < 8) out.pass = false;
    out.detail = "asc>=desc in " + std::to_string(cells_ok) + "/9 cells (asc-desc:" + cells + ")" +
                 out.detail;
    return out;
}

Outcome criterion10_determinism(const Dataset& train_ds, const Dataset& test_ds,
                                const NormStats& norm) {
    Outcome out;
    auto tiny = [&](const std::string& tag, std::uint64_t seed, int epochs,
                    const std::string& resume = {}) {
        Model m = build_model(ArchSpec::cifar_resnet(110, 10, 8), std::nullopt, seed);
        TrainConfig cfg;
        cfg.batch = 32;
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.subset = 128;
        cfg.eval_subset = 64;
        cfg.eval_batch = 64;
        cfg.checkpoint_every = 1;
        cfg.schedule.initial_lr = 0.05;
        cfg.out_dir = kWork + "/" + tag;
        TrainResult r = train(m, train_ds, test_ds, norm, cfg, resume);
        return std::make_pair(std::move(m), std::move(r));
    };

    auto [m1, r1] = tiny("det-a", 99, 2);
    auto [m2, r2] = tiny("det-b", 99, 2);
    if (slurp(r1.metrics_path) != slurp(r2.metrics_path)) {
        out.pass = false;
        out.detail += " [metrics differ across identical runs]";
    }

    // checkpoint round trip: load then re-save, bytes must match
    {
        Model m3 = build_model(ArchSpec::cifar_resnet(110, 10, 8), std::nullopt, 1);
        SGD opt(m3.store, 0.9f, 1e-4f);
        CheckpointMeta meta = load_checkpoint(kWork + "/det-a/checkpoints/final.gekt", m3, &opt);
        save_checkpoint(kWork + "/det-roundtrip.gekt", m3, &opt, meta);
        if (slurp(kWork + "/det-a/checkpoints/final.gekt") !=
            slurp(kWork + "/det-roundtrip.gekt")) {
            out.pass = false;
            out.detail += " [checkpoint round trip not byte-identical]";
        }
    }

    // resume continuity: epochs 2..3 resumed equal the uninterrupted run
    auto [m4, r4] = tiny("det-full", 7, 4);
    auto [m6, r6] = tiny("det-part", 7, 2);
    auto [m7, r7] = tiny("det-resumed", 7, 4, kWork + "/det-part/checkpoints/epoch_2.gekt");
    if (r7.rows.size() != 2 || r4.rows[2].train_loss != r7.rows[0].train_loss ||
        r4.rows[3].val_top1 != r7.rows[1].val_top1 || r4.rows[3].lr != r7.rows[1].lr) {
        out.pass = false;
        out.detail += " [resume diverges from the uninterrupted run]";
    }
    if (out.pass)
        out.detail = "identical metrics bytes, byte-exact checkpoint round trip, seamless resume";
    return out;
}

}  // namespace

int main() {
    fs::create_directories(kWork);
    std::printf("data source: %s\n",
                using_real_data() ? "CIFAR-10 binaries (GEX_CIFAR10_DIR)"
                                  : "synthetic CIFAR-format fallback");
    auto [train_ds, test_ds] = acceptance_datasets();
    NormStats norm = compute_norm_stats(train_ds);

    int failures = 0;
    auto report = [&](int id, const std::string& label, const Outcome& o) {
        const char* tag = o.skipped ? "SKIP" : (o.pass ? "PASS" : "FAIL");
        if (!o.skipped && !o.pass) ++failures;
        std::printf("[%s] criterion %-3d %s%s%s\n", tag, id, label.c_str(),
                    o.detail.empty() ? "" : " -- ", o.detail.c_str());
        std::fflush(stdout);
    };

    report(1, "complexity reproduction (Tables 1-3)", criterion1_complexity());
    report(2, "gather oracle equivalence", criterion2_gather_oracle());
    report(3, "gather locality property", criterion3_locality());
    report(4, "gradient suite", criterion4_gradients());
    report(5, "saturated-gate equivalence", criterion5_saturated_gate());
    report(6, "parameter-free claim", criterion6_parameter_free());
    report(7, "desk-scale training sanity (a: smoke)", criterion7_training(train_ds, test_ds, norm));
    report(7, "desk-scale training sanity (b: full run)", criterion7b_long());
    report(8, "selectivity endpoints", criterion8_selectivity());

    // toy GE models for the pruning trend (criterion 9): the reduced-width
    // configuration of 7b at a desk-scale budget
    auto [toy_train, toy_test] = toy_datasets();
    NormStats toy_norm = compute_norm_stats(toy_train);
    std::vector<ToyRun> toys;
    for (std::uint64_t seed : {101u, 202u, 303u}) {
        toys.push_back(train_toy_ge(toy_train, toy_test, toy_norm, seed, 4, 3000, 6,
                                    "toy-" + std::to_string(seed)));
    }
    report(9, "pruning endpoints and trend", criterion9_pruning(toys, toy_test, toy_norm));
    report(10, "determinism and persistence", criterion10_determinism(train_ds, test_ds, norm));

    if (failures) {
        std::printf("%d criterion(s) FAILED\n", failures);
        return 1;
    }
    std::printf("all acceptance criteria passed\n");
    return 0;
}
