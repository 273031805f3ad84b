#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "gex/checkpoint.hpp"
#include "gex/data.hpp"
#include "gex/model.hpp"

namespace gex {

// Learning-rate schedules. Fixed-step: divide by drop_factor every
// step_epochs. Plateau: divide by drop_factor when the epoch-mean training
// loss fails to improve by more than min_rel_improve for `patience`
// consecutive epochs, at most max_drops times.
struct ScheduleSpec {
    enum class Kind { FixedStep, Plateau };
    Kind kind = Kind::FixedStep;
    double initial_lr = 0.1;
    double drop_factor = 10.0;
    int step_epochs = 30;
    int max_drops = 3;
    int patience = 5;
    double min_rel_improve = 1e-3;
};

class LrSchedule {
public:
    explicit LrSchedule(const ScheduleSpec& spec) : spec_(spec), lr_(spec.initial_lr) {}

    double lr(int epoch) const {
        if (spec_.kind == ScheduleSpec::Kind::FixedStep)
            return spec_.initial_lr / std::pow(spec_.drop_factor, epoch / spec_.step_epochs);
        return lr_;
    }

    // Plateau bookkeeping; call once per epoch with the epoch-mean train loss.
    void observe(double train_loss) {
        if (spec_.kind != ScheduleSpec::Kind::Plateau) return;
        if (best_ < 0.0 || train_loss < best_ * (1.0 - spec_.min_rel_improve)) {
            best_ = train_loss;
            stall_ = 0;
            return;
        }
        if (++stall_ >= spec_.patience && drops_ < spec_.max_drops) {
            lr_ /= spec_.drop_factor;
            ++drops_;
            stall_ = 0;
            best_ = train_loss;  // restart the plateau measurement at the new lr
        }
    }

    int drops() const { return drops_; }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out(sizeof(double) * 2 + sizeof(int) * 2);
        std::memcpy(out.data(), &lr_, 8);
        std::memcpy(out.data() + 8, &best_, 8);
        std::memcpy(out.data() + 16, &stall_, 4);
        std::memcpy(out.data() + 20, &drops_, 4);
        return out;
    }
    void deserialize(const std::vector<std::uint8_t>& b) {
        if (b.size() < 24) return;  // absent state: fresh schedule
        std::memcpy(&lr_, b.data(), 8);
        std::memcpy(&best_, b.data() + 8, 8);
        std::memcpy(&stall_, b.data() + 16, 4);
        std::memcpy(&drops_, b.data() + 20, 4);
    }

private:
    ScheduleSpec spec_;
    double lr_;
    double best_ = -1.0;
    int stall_ = 0;
    int drops_ = 0;
};

struct TrainConfig {
    int batch = 128;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    int epochs = 100;
    std::uint64_t seed = 0;
    ScheduleSpec schedule;
    int checkpoint_every = 0;  // 0: final checkpoint only
    int subset = 0;            // >0: first K training images
    int eval_subset = 0;
    int eval_batch = 256;
    std::string out_dir;       // metrics.csv and checkpoints/ land here
    std::string config_echo = "{}";
    bool quiet = true;
};

struct EpochRow {
    int epoch = 0;
    double lr = 0, train_loss = 0, train_top1 = 0, val_top1 = 0, val_top5 = 0;
};

struct TrainResult {
    std::vector<EpochRow> rows;
    std::string metrics_path;
    std::string final_checkpoint;
};

namespace detail {

// Tie rule: on equal logits the lower class index ranks first.
inline bool label_in_topk(const float* logits, int K, int label, int k) {
    int rank = 0;
    const float lt = logits[label];
    for (int j = 0; j < K; ++j) {
        if (j == label) continue;
        if (logits[j] > lt || (logits[j] == lt && j < label)) ++rank;
    }
    return rank < k;
}

inline std::string metrics_row(const EpochRow& r) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6f,%.6f,%.6f,%.6f\n", r.epoch, r.lr,
                  r.train_loss, r.train_top1, r.val_top1, r.val_top5);
    return buf;
}

}  // namespace detail

// Top-1 / top-5 error on the evaluation split (normalize only, eval mode).
inline std::pair<double, double> evaluate(Model& model, const Dataset& ds,
                                          const NormStats& norm, int batch = 256,
                                          int subset = 0) {
    NoGrad ng;
    const int n = subset > 0 ? std::min(subset, ds.count) : ds.count;
    const int K = ds.classes();
    std::int64_t top1_wrong = 0, top5_wrong = 0;
    for (int lo = 0; lo < n; lo += batch) {
        const int b = std::min(batch, n - lo);
        Tensor x(Shape4{b, 3, kCifarDim, kCifarDim});
        for (int i = 0; i < b; ++i)
            eval_transform_into(ds, lo + i, norm, x.data() + static_cast<std::int64_t>(i) * kCifarPixels);
        Tensor logits = model.forward(x, /*train=*/false);
        for (int i = 0; i < b; ++i) {
            const float* row = logits.data() + static_cast<std::int64_t>(i) * K;
            const int lab = ds.labels[lo + i];
            if (!detail::label_in_topk(row, K, lab, 1)) ++top1_wrong;
            if (!detail::label_in_topk(row, K, lab, std::min(5, K))) ++top5_wrong;
        }
    }
    return {static_cast<double>(top1_wrong) / n, static_cast<double>(top5_wrong) / n};
}

// Seeded training loop: shuffle and augmentation draw from per-(purpose,
// epoch) streams, so a resumed run replays exactly the epochs it never saw.
inline TrainResult train(Model& model, const Dataset& train_ds, const Dataset& test_ds,
                         const NormStats& norm, const TrainConfig& cfg,
                         const std::string& resume_path = {}) {
    namespace fs = std::filesystem;
    if (train_ds.count == 0) throw ConfigError("train: empty training dataset");
    SGD opt(model.store, cfg.momentum, cfg.weight_decay);
    LrSchedule sched(cfg.schedule);
    int start_epoch = 0;

    if (!resume_path.empty()) {
        CheckpointMeta meta = load_checkpoint(resume_path, model, &opt);
        sched.deserialize(meta.state);
        start_epoch = static_cast<int>(meta.epoch);
    }

    TrainResult result;
    std::ofstream metrics;
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        fs::create_directories(cfg.out_dir + "/checkpoints");
        result.metrics_path = cfg.out_dir + "/metrics.csv";
        metrics.open(result.metrics_path, start_epoch > 0 && fs::exists(result.metrics_path)
                                              ? std::ios::app
                                              : std::ios::trunc);
        if (!metrics) throw IoError("cannot write " + result.metrics_path);
        if (start_epoch == 0) metrics << "epoch,lr,train_loss,train_top1,val_top1,val_top5\n";
    }

    const int n_all = cfg.subset > 0 ? std::min(cfg.subset, train_ds.count) : train_ds.count;
    const int K = train_ds.classes();
    AugmentSpec aug;
    aug.norm = norm;

    std::vector<int> order(n_all);

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = sched.lr(epoch);
        Rng shuffle_rng = Rng::stream(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
        Rng aug_rng = Rng::stream(cfg.seed, "augment", static_cast<std::uint64_t>(epoch));
        for (int i = 0; i < n_all; ++i) order[i] = i;
        for (int i = n_all - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(static_cast<std::uint32_t>(i + 1))]);

        double loss_sum = 0.0;
        std::int64_t wrong = 0;
        for (int lo = 0; lo < n_all; lo += cfg.batch) {
            const int b = std::min(cfg.batch, n_all - lo);
            Tensor x(Shape4{b, 3, kCifarDim, kCifarDim});
            std::vector<int> labels(b);
            for (int i = 0; i < b; ++i) {
                const int idx = order[lo + i];
                const AugmentDraw d = draw_augment(aug, aug_rng);
                augment_into(train_ds, idx, aug, d,
                             x.data() + static_cast<std::int64_t>(i) * kCifarPixels);
                labels[i] = train_ds.labels[idx];
            }
            Tensor logits = model.forward(x, /*train=*/true);
            Tensor loss = softmax_cross_entropy(logits, labels);
            const double lv = loss.data()[0];
            if (!std::isfinite(lv))
                throw NumericError("non-finite training loss (epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(lo / cfg.batch) + ", lr " +
                                   std::to_string(lr) + ")");
            for (int i = 0; i < b; ++i)
                if (!detail::label_in_topk(logits.data() + static_cast<std::int64_t>(i) * K, K,
                                           labels[i], 1))
                    ++wrong;
            backward(loss);
            opt.step(model.store, static_cast<float>(lr));
            loss_sum += lv * b;
        }

        EpochRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = loss_sum / n_all;
        row.train_top1 = static_cast<double>(wrong) / n_all;
        auto [v1, v5] = evaluate(model, test_ds, norm, cfg.eval_batch, cfg.eval_subset);
        row.val_top1 = v1;
        row.val_top5 = v5;
        result.rows.push_back(row);
        if (metrics.is_open()) {
            metrics << detail::metrics_row(row);
            metrics.flush();
        }
        if (!cfg.quiet)
            std::fprintf(stderr, "epoch %d lr %.4g loss %.4f train_err %.4f val_err %.4f\n",
                         epoch, lr, row.train_loss, row.train_top1, row.val_top1);

        sched.observe(row.train_loss);

        const bool last = epoch + 1 == cfg.epochs;
        const bool cadence =
            cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if (!cfg.out_dir.empty() && (cadence || last)) {
            CheckpointMeta meta;
            meta.config_echo = cfg.config_echo;
            meta.epoch = static_cast<std::uint32_t>(epoch + 1);
            meta.seed = cfg.seed;
            meta.state = sched.serialize();
            const std::string path =
                cfg.out_dir + "/checkpoints/epoch_" + std::to_string(epoch + 1) + ".gekt";
            save_checkpoint(path, model, &opt, meta);
            if (last) {
                save_checkpoint(cfg.out_dir + "/checkpoints/final.gekt", model, &opt, meta);
                result.final_checkpoint = cfg.out_dir + "/checkpoints/final.gekt";
            }
        }
    }
    return result;
}

}  // namespace gex
