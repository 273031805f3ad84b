#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "gex/data.hpp"
#include "gex/model.hpp"
#include "gex/train.hpp"

// Run configuration: a validated JSON tree plus the GE placement
// mini-syntax  kind:extent:stages  (e.g. "theta:e8:stage3,stage4",
// "se:global:all", "theta-minus-max:e4:all"). Unknown keys are rejected.

namespace gex {

inline ArchSpec parse_arch(const std::string& name, int classes, int input, int width_div) {
    if (name == "resnet50") return ArchSpec::resnet50(classes ? classes : 1000, input ? input : 224);
    if (name == "resnet101")
        return ArchSpec::resnet101(classes ? classes : 1000, input ? input : 224);
    if (name == "resnet50-narrow")
        return ArchSpec::resnet50_narrow(classes ? classes : 10, input ? input : 32);
    if (name == "cifar-resnet110")
        return ArchSpec::cifar_resnet(110, classes ? classes : 10, width_div ? width_div : 1);
    if (name == "cifar-resnet164")
        return ArchSpec::cifar_resnet(164, classes ? classes : 10, width_div ? width_div : 1);
    if (name == "wrn-16-8") return ArchSpec::wrn_16_8(classes ? classes : 10);
    throw ConfigError(
        "unknown architecture '" + name +
        "' (expected resnet50|resnet101|resnet50-narrow|cifar-resnet110|cifar-resnet164|wrn-16-8)");
}

// "" -> no placement. kind: theta-minus[-max] | theta | theta-plus | se.
inline std::optional<GEPlacement> parse_ge_placement(const std::string& spec) {
    if (spec.empty() || spec == "none") return std::nullopt;
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : spec) {
        if (ch == ':') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    parts.push_back(cur);
    if (parts.size() > 3)
        throw ConfigError("ge placement '" + spec + "': expected kind[:extent[:stages]]");
    const std::string kind = parts[0];
    const std::string extent_s = parts.size() > 1 && !parts[1].empty() ? parts[1] : "global";
    const std::string stages_s = parts.size() > 2 ? parts[2] : "all";

    ExtentSpec extent;
    if (extent_s == "global") {
        extent = ExtentSpec::Global();
    } else if (extent_s.size() > 1 && extent_s[0] == 'e') {
        int e = 0;
        try {
            e = std::stoi(extent_s.substr(1));
        } catch (...) {
            throw ConfigError("ge placement '" + spec + "': bad extent '" + extent_s + "'");
        }
        extent = ExtentSpec::Ratio(e);
        extent.validate();
    } else {
        throw ConfigError("ge placement '" + spec + "': bad extent '" + extent_s +
                          "' (expected global or eN)");
    }

    GEVariant variant;
    if (kind == "theta-minus") {
        variant = GEVariant::theta_minus(extent);
    } else if (kind == "theta-minus-max") {
        variant = GEVariant::theta_minus(extent, GatherKind::MaxPool);
    } else if (kind == "theta") {
        variant = GEVariant::theta(extent);
    } else if (kind == "theta-plus") {
        variant = GEVariant::theta_plus(extent);
    } else if (kind == "se") {
        if (!extent.global)
            throw ConfigError("ge placement '" + spec + "': SE requires global extent");
        variant = GEVariant::se();
    } else {
        throw ConfigError("ge placement '" + spec + "': unknown kind '" + kind + "'");
    }

    GEPlacement place;
    place.variant = variant;
    if (stages_s != "all" && !stages_s.empty()) {
        std::string tok;
        for (char ch : stages_s + ",") {
            if (ch == ',') {
                if (!tok.empty()) place.stages.push_back(tok);
                tok.clear();
            } else {
                tok += ch;
            }
        }
    }
    return place;
}

inline std::string placement_to_string(const std::optional<GEPlacement>& p) {
    if (!p) return "";
    std::string kind;
    const GEVariant& v = p->variant;
    if (v.gather == GatherKind::DepthwiseConv)
        kind = v.excite.subnet ? "theta-plus" : "theta";
    else if (v.excite.subnet)
        kind = "se";
    else
        kind = v.gather == GatherKind::MaxPool ? "theta-minus-max" : "theta-minus";
    std::string stages = "all";
    if (!p->stages.empty()) {
        stages.clear();
        for (std::size_t i = 0; i < p->stages.size(); ++i)
            stages += (i ? "," : "") + p->stages[i];
    }
    return kind + ":" + v.extent.str() + ":" + stages;
}

struct RunConfig {
    std::string name = "run";
    std::uint64_t seed = 0;
    ArchSpec arch;
    std::optional<GEPlacement> placement;
    // data
    std::string data_dir;
    CifarVariant variant = CifarVariant::Cifar10;
    bool synthetic = false;
    int synthetic_train = 2000, synthetic_test = 512;
    std::uint64_t synthetic_seed = 7;
    // training
    TrainConfig train;
    std::string out_dir;

    nlohmann::json echo;  // the validated tree, written into run dirs
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    detail::reject_unknown(j, {"name", "seed", "arch", "ge", "data", "train", "out_dir"},
                           "top level");
    RunConfig rc;
    rc.echo = j;
    rc.name = j.value("name", std::string("run"));
    rc.seed = j.value("seed", std::uint64_t{0});

    if (!j.contains("arch")) throw ConfigError("config: missing 'arch'");
    const auto& a = j.at("arch");
    if (a.is_string()) {
        rc.arch = parse_arch(a.get<std::string>(), 0, 0, 0);
    } else {
        detail::reject_unknown(a, {"family", "classes", "input", "width_div"}, "arch");
        rc.arch = parse_arch(a.at("family").get<std::string>(), a.value("classes", 0),
                             a.value("input", 0), a.value("width_div", 0));
    }
    rc.placement = parse_ge_placement(j.value("ge", std::string()));
    if (rc.placement) rc.placement->validate(rc.arch);

    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::reject_unknown(d, {"dir", "variant", "synthetic"}, "data");
        rc.data_dir = d.value("dir", std::string());
        const std::string v = d.value("variant", std::string("cifar10"));
        if (v == "cifar10")
            rc.variant = CifarVariant::Cifar10;
        else if (v == "cifar100")
            rc.variant = CifarVariant::Cifar100;
        else
            throw ConfigError("config: data.variant must be cifar10|cifar100, got '" + v + "'");
        if (d.contains("synthetic")) {
            const auto& s = d.at("synthetic");
            detail::reject_unknown(s, {"enabled", "train", "test", "seed"}, "data.synthetic");
            rc.synthetic = s.value("enabled", true);
            rc.synthetic_train = s.value("train", 2000);
            rc.synthetic_test = s.value("test", 512);
            rc.synthetic_seed = s.value("seed", std::uint64_t{7});
        }
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::reject_unknown(t,
                               {"batch", "epochs", "momentum", "weight_decay", "schedule",
                                "subset", "eval_subset", "eval_batch", "checkpoint_every"},
                               "train");
        rc.train.batch = t.value("batch", 128);
        rc.train.epochs = t.value("epochs", 100);
        rc.train.momentum = t.value("momentum", 0.9f);
        rc.train.weight_decay = t.value("weight_decay", 5e-4f);
        rc.train.subset = t.value("subset", 0);
        rc.train.eval_subset = t.value("eval_subset", 0);
        rc.train.eval_batch = t.value("eval_batch", 256);
        rc.train.checkpoint_every = t.value("checkpoint_every", 0);
        if (t.contains("schedule")) {
            const auto& s = t.at("schedule");
            detail::reject_unknown(s,
                                   {"kind", "initial_lr", "step_epochs", "patience",
                                    "max_drops", "min_rel_improve"},
                                   "train.schedule");
            const std::string kind = s.value("kind", std::string("fixed"));
            if (kind == "fixed")
                rc.train.schedule.kind = ScheduleSpec::Kind::FixedStep;
            else if (kind == "plateau")
                rc.train.schedule.kind = ScheduleSpec::Kind::Plateau;
            else
                throw ConfigError("config: schedule.kind must be fixed|plateau");
            rc.train.schedule.initial_lr = s.value("initial_lr", 0.1);
            rc.train.schedule.step_epochs = s.value("step_epochs", 30);
            rc.train.schedule.patience = s.value("patience", 5);
            rc.train.schedule.max_drops = s.value("max_drops", 3);
            rc.train.schedule.min_rel_improve = s.value("min_rel_improve", 1e-3);
        }
    }
    rc.out_dir = j.value("out_dir", std::string("runs/") + rc.name);
    rc.train.out_dir = rc.out_dir;
    rc.train.seed = rc.seed;
    rc.train.config_echo = j.dump(2);
    return rc;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

// Resolves the dataset per config: real CIFAR binaries when dir is given and
// present, otherwise the deterministic synthetic fallback (written to and
// reloaded through the same binary format when a dir is configured).
inline std::pair<Dataset, Dataset> load_datasets(const RunConfig& rc) {
    namespace fs = std::filesystem;
    const char* env_dir = std::getenv("GEX_CIFAR10_DIR");
    std::string dir = rc.data_dir;
    if (rc.variant == CifarVariant::Cifar10 && env_dir && *env_dir) dir = env_dir;
    if (!rc.synthetic) {
        if (dir.empty()) throw ConfigError("config: data.dir required unless synthetic");
        return {load_cifar(dir, rc.variant, true), load_cifar(dir, rc.variant, false)};
    }
    Dataset train_ds = synthetic_cifar(rc.variant, true, rc.synthetic_train, rc.synthetic_seed);
    Dataset test_ds = synthetic_cifar(rc.variant, false, rc.synthetic_test, rc.synthetic_seed);
    if (!dir.empty() && !fs::exists(dir + (rc.variant == CifarVariant::Cifar10
                                               ? "/data_batch_1.bin"
                                               : "/train.bin"))) {
        write_cifar(dir, train_ds);
        write_cifar(dir, test_ds);
    }
    return {train_ds, test_ds};
}

}  // namespace gex
