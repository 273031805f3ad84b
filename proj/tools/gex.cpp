// gex: gather-excite operators for convolutional networks.
// Subcommands: count, train, eval, gradcheck, selectivity, prune.
// Exit codes: 0 ok, 2 configuration/input error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gex/gex.hpp"

namespace fs = std::filesystem;

namespace {

struct CountArgs {
    std::string arch;
    std::string ge;
    int input_size = 0;
    int classes = 0;
    bool json = false;
};

int run_count(const CountArgs& a) {
    gex::ArchSpec arch = gex::parse_arch(a.arch, a.classes, a.input_size, 0);
    auto placement = gex::parse_ge_placement(a.ge);
    if (placement) placement->validate(arch);
    gex::CostReport rep = gex::count_cost(arch, placement);
    if (a.json)
        std::cout << rep.to_json().dump(2) << "\n";
    else
        std::cout << rep.to_text();
    return 0;
}

gex::Model model_from_config(const gex::RunConfig& rc) {
    return gex::build_model(rc.arch, rc.placement, rc.seed);
}

gex::NormStats norm_stats_for(const gex::RunConfig& rc, const gex::Dataset& train_ds) {
    if (!rc.data_dir.empty() && fs::exists(rc.data_dir))
        return gex::load_or_compute_norm_stats(rc.data_dir, train_ds);
    return gex::compute_norm_stats(train_ds);
}

int run_train(const std::string& config_path, const std::string& resume) {
    gex::RunConfig rc = gex::load_run_config(config_path);
    auto [train_ds, test_ds] = gex::load_datasets(rc);
    gex::NormStats norm = norm_stats_for(rc, train_ds);
    fs::create_directories(rc.out_dir);
    {
        std::ofstream echo(rc.out_dir + "/config.json");
        echo << rc.echo.dump(2) << "\n";
    }
    gex::Model model = model_from_config(rc);
    gex::TrainConfig tc = rc.train;
    tc.quiet = false;
    gex::TrainResult res = gex::train(model, train_ds, test_ds, norm, tc, resume);
    if (!res.rows.empty()) {
        const auto& r = res.rows.back();
        std::printf("final: epoch %d train_loss %.4f train_top1 %.4f val_top1 %.4f val_top5 %.4f\n",
                    r.epoch, r.train_loss, r.train_top1, r.val_top1, r.val_top5);
    }
    std::printf("metrics: %s\n", res.metrics_path.c_str());
    if (!res.final_checkpoint.empty())
        std::printf("checkpoint: %s\n", res.final_checkpoint.c_str());
    return 0;
}

int run_eval(const std::string& config_path, const std::string& ckpt) {
    gex::RunConfig rc = gex::load_run_config(config_path);
    auto [train_ds, test_ds] = gex::load_datasets(rc);
    gex::NormStats norm = norm_stats_for(rc, train_ds);
    gex::Model model = model_from_config(rc);
    gex::load_checkpoint(ckpt, model, nullptr);
    auto [top1, top5] = gex::evaluate(model, test_ds, norm, rc.train.eval_batch);
    std::printf("top1_error %.6f top5_error %.6f (n=%d)\n", top1, top5, test_ds.count);
    return 0;
}

int run_gradcheck(const std::string& op, bool model, std::uint64_t seed) {
    std::vector<gex::GradCheckReport> reports =
        model ? gex::run_model_gradcheck(seed) : gex::run_op_gradchecks(op, seed);
    if (reports.empty()) {
        std::fprintf(stderr, "no gradcheck named '%s'\n", op.c_str());
        return 2;
    }
    bool all_ok = true;
    for (const auto& r : reports) {
        std::puts(r.summary().c_str());
        for (const auto& f : r.failures) std::printf("    %s\n", f.c_str());
        all_ok = all_ok && r.pass;
    }
    return all_ok ? 0 : 3;
}

int run_selectivity(const std::string& config_path, const std::string& ckpt,
                    const std::string& layer, std::string out, int subset) {
    gex::RunConfig rc = gex::load_run_config(config_path);
    auto [train_ds, test_ds] = gex::load_datasets(rc);
    gex::NormStats norm = norm_stats_for(rc, train_ds);
    gex::Model model = model_from_config(rc);
    if (!ckpt.empty()) gex::load_checkpoint(ckpt, model, nullptr);
    gex::SelectivityHistogram hist =
        gex::class_selectivity(model, test_ds, norm, layer, rc.train.eval_batch, subset);
    if (out.empty()) {
        fs::create_directories(rc.out_dir + "/analysis");
        std::string safe = layer;
        for (auto& c : safe)
            if (c == '/' || c == '.') c = '_';
        out = rc.out_dir + "/analysis/selectivity_" + safe + ".csv";
    }
    gex::export_csv(hist, out);
    std::printf("selectivity: %zu channels -> %s\n", hist.indices.size(), out.c_str());
    return 0;
}

int run_prune(const std::string& config_path, const std::string& ckpt,
              const std::string& block, const std::string& orders, std::string out,
              int subset) {
    gex::RunConfig rc = gex::load_run_config(config_path);
    auto [train_ds, test_ds] = gex::load_datasets(rc);
    gex::NormStats norm = norm_stats_for(rc, train_ds);
    gex::Model model = model_from_config(rc);
    if (!ckpt.empty()) gex::load_checkpoint(ckpt, model, nullptr);
    gex::PruneCurve curve;
    if (orders == "both") {
        curve = gex::prune_curve(model, test_ds, norm, block, true, rc.train.eval_batch, subset);
    } else if (orders == "asc" || orders == "desc") {
        curve.block = block;
        const auto ord =
            orders == "asc" ? gex::PruneOrder::Ascending : gex::PruneOrder::Descending;
        for (int r = 0; r <= 10; ++r)
            curve.points.push_back({r / 10.0, orders,
                                    gex::prune_eval(model, test_ds, norm, block, r / 10.0, ord,
                                                    rc.train.eval_batch, subset)});
    } else {
        throw gex::ConfigError("--orders must be asc|desc|both, got '" + orders + "'");
    }
    if (out.empty()) {
        fs::create_directories(rc.out_dir + "/analysis");
        std::string safe = block;
        for (auto& c : safe)
            if (c == '/' || c == '.') c = '_';
        out = rc.out_dir + "/analysis/prune_" + safe + ".csv";
    }
    gex::export_csv(curve, out);
    std::printf("prune curve: %zu points -> %s\n", curve.points.size(), out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gather-excite operators for convolutional networks"};
    app.require_subcommand(1);

    CountArgs ca;
    auto* count = app.add_subcommand("count", "analytic parameter / MAC report");
    count->add_option("--arch", ca.arch, "architecture name")->required();
    count->add_option("--ge", ca.ge, "GE placement, kind:extent:stages");
    count->add_option("--input-size", ca.input_size, "input resolution");
    count->add_option("--classes", ca.classes, "classifier width");
    count->add_flag("--json", ca.json, "emit JSON instead of text");

    std::string cfg_path, resume, ckpt, layer, block, out;
    std::string orders = "both";
    int subset = 0;

    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", cfg_path, "run config JSON")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--config", cfg_path, "run config JSON")->required();
    eval->add_option("--checkpoint", ckpt, "checkpoint path")->required();

    std::string gc_op = "all";
    bool gc_model = false;
    std::uint64_t gc_seed = 17;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gradcheck->add_option("--op", gc_op, "op name or 'all'");
    gradcheck->add_flag("--model", gc_model, "check an assembled model");
    gradcheck->add_option("--seed", gc_seed, "rng seed");

    auto* sel = app.add_subcommand("selectivity", "class selectivity histogram");
    sel->add_option("--config", cfg_path, "run config JSON")->required();
    sel->add_option("--checkpoint", ckpt, "checkpoint path");
    sel->add_option("--layer", layer, "recorded activation name")->required();
    sel->add_option("--out", out, "output CSV path");
    sel->add_option("--subset", subset, "evaluation subset size");

    auto* prune = app.add_subcommand("prune", "gate-importance pruning curve");
    prune->add_option("--config", cfg_path, "run config JSON")->required();
    prune->add_option("--checkpoint", ckpt, "checkpoint path");
    prune->add_option("--block", block, "block name, e.g. stage3.block0")->required();
    prune->add_option("--orders", orders, "asc|desc|both");
    prune->add_option("--out", out, "output CSV path");
    prune->add_option("--subset", subset, "evaluation subset size");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (count->parsed()) return run_count(ca);
        if (train->parsed()) return run_train(cfg_path, resume);
        if (eval->parsed()) return run_eval(cfg_path, ckpt);
        if (gradcheck->parsed()) return run_gradcheck(gc_op, gc_model, gc_seed);
        if (sel->parsed()) return run_selectivity(cfg_path, ckpt, layer, out, subset);
        if (prune->parsed()) return run_prune(cfg_path, ckpt, block, orders, out, subset);
    } catch (const gex::NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const gex::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
