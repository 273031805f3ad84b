#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "gex/data.hpp"
#include "gex/model.hpp"
#include "gex/train.hpp"

// Feature-analysis procedures: class selectivity index distributions and
// gate-importance pruning curves, with stable CSV export.

namespace gex {

struct SelectivityHistogram {
    std::string layer;
    std::vector<float> indices;      // one per channel, in [0,1]
    std::array<int, 50> bins{};      // fixed: 50 bins over [0,1]
};

struct PrunePoint {
    double ratio = 0;
    std::string order;  // "asc" | "desc"
    double top1 = 0;    // accuracy
};

struct PruneCurve {
    std::string block;
    std::vector<PrunePoint> points;
};

enum class PruneOrder { Ascending, Descending };

// index = (mu_max - mean of the remaining class means) /
//         (mu_max + mean of the remaining class means + eps), eps = 1e-6.
// Scale-free over non-negative activities; 0 when every class mean is zero.
inline double selectivity_index(const std::vector<double>& class_means) {
    constexpr double eps = 1e-6;
    if (class_means.size() < 2) return 0.0;
    double mu_max = class_means[0], total = 0.0;
    for (double m : class_means) {
        total += m;
        mu_max = std::max(mu_max, m);
    }
    if (mu_max <= 0.0) return 0.0;
    const double rest = (total - mu_max) / (static_cast<double>(class_means.size()) - 1);
    return (mu_max - rest) / (mu_max + rest + eps);
}

namespace detail {

struct CaptureHook : ForwardHooks {
    std::string want;
    Tensor captured;
    bool found = false;
    void on_activation(const std::string& name, const Tensor& t) override {
        if (name == want) {
            captured = t;
            found = true;
        }
    }
};

// Spatial mean per channel for one image of a (N,C,H,W) tensor.
inline void channel_means(const Tensor& t, int image, std::vector<float>& out) {
    const Shape4& s = t.shape();
    out.resize(s.c);
    const std::int64_t plane = s.plane();
    for (int c = 0; c < s.c; ++c) {
        const float* p = t.data() + (static_cast<std::int64_t>(image) * s.c + c) * plane;
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
        out[c] = static_cast<float>(acc / plane);
    }
}

inline std::vector<int> prune_order_indices(const std::vector<float>& imp, PruneOrder order) {
    std::vector<int> idx(imp.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (imp[a] != imp[b])
            return order == PruneOrder::Ascending ? imp[a] < imp[b] : imp[a] > imp[b];
        return a < b;  // deterministic tie rule
    });
    return idx;
}

// Zeroes the first floor(ratio*C) gated channels of the residual branch,
// per image, in the importance order induced by that image's gate. Without
// a gate (baseline reference) the dummy importance is the channel index.
struct PruneHook : ForwardHooks {
    std::string block;
    double ratio = 0;
    PruneOrder order = PruneOrder::Ascending;

    Tensor transform_branch(const std::string& name, Tensor branch,
                            const Tensor& gate) override {
        if (name != block) return branch;
        const Shape4& s = branch.shape();
        const int drop = static_cast<int>(ratio * s.c);
        if (drop == 0) return branch;
        Tensor out = branch.clone();
        const std::int64_t plane = s.plane();
        std::vector<float> imp;
        for (int n = 0; n < s.n; ++n) {
            if (gate.defined()) {
                channel_means(gate, n, imp);
            } else {
                imp.resize(s.c);
                for (int c = 0; c < s.c; ++c) imp[c] = static_cast<float>(c);
            }
            const std::vector<int> idx = prune_order_indices(imp, order);
            for (int j = 0; j < drop && j < s.c; ++j) {
                float* p = out.data() +
                           (static_cast<std::int64_t>(n) * s.c + idx[j]) * plane;
                std::fill(p, p + plane, 0.0f);
            }
        }
        return out;
    }
};

}  // namespace detail

// Class selectivity index per channel of a recorded post-activation layer:
// activity = spatial mean of the feature map per sample; with mu_k the mean
// activity over class-k samples, index = (mu_max - mean(rest)) /
// (mu_max + mean(rest) + eps), eps = 1e-6; defined as 0 when all mu_k = 0.
inline SelectivityHistogram class_selectivity(Model& model, const Dataset& ds,
                                              const NormStats& norm,
                                              const std::string& layer, int batch = 256,
                                              int subset = 0) {
    NoGrad ng;
    const int n = subset > 0 ? std::min(subset, ds.count) : ds.count;
    const int K = ds.classes();
    std::vector<double> class_sum;   // [C x K]
    std::vector<std::int64_t> class_cnt(K, 0);
    int channels = -1;
    std::vector<float> means;

    for (int lo = 0; lo < n; lo += batch) {
        const int b = std::min(batch, n - lo);
        Tensor x(Shape4{b, 3, kCifarDim, kCifarDim});
        for (int i = 0; i < b; ++i)
            eval_transform_into(ds, lo + i, norm,
                                x.data() + static_cast<std::int64_t>(i) * kCifarPixels);
        detail::CaptureHook hook;
        hook.want = layer;
        model.forward(x, /*train=*/false, &hook);
        if (!hook.found)
            throw ConfigError("class_selectivity: no activation recorded under name '" +
                              layer + "'");
        if (channels < 0) {
            channels = hook.captured.shape().c;
            class_sum.assign(static_cast<std::size_t>(channels) * K, 0.0);
        }
        for (int i = 0; i < b; ++i) {
            detail::channel_means(hook.captured, i, means);
            const int lab = ds.labels[lo + i];
            ++class_cnt[lab];
            for (int c = 0; c < channels; ++c)
                class_sum[static_cast<std::size_t>(c) * K + lab] += means[c];
        }
    }

    SelectivityHistogram hist;
    hist.layer = layer;
    hist.indices.resize(channels);
    std::vector<double> mus;
    for (int c = 0; c < channels; ++c) {
        mus.clear();
        for (int k = 0; k < K; ++k)
            if (class_cnt[k] > 0)
                mus.push_back(class_sum[static_cast<std::size_t>(c) * K + k] / class_cnt[k]);
        const double index = selectivity_index(mus);
        hist.indices[c] = static_cast<float>(index);
        const int bin = std::min(49, std::max(0, static_cast<int>(index * 50.0)));
        ++hist.bins[bin];
    }
    return hist;
}

// Per-image channel importances induced by a block's excite gate: the
// post-sigmoid gate values, spatially averaged per channel for non-global
// extents.
inline std::vector<std::vector<float>> gate_importances(Model& model, const Tensor& x,
                                                        const std::string& block) {
    if (!model.has_block(block))
        throw ConfigError("gate_importances: unknown block '" + block + "'");
    if (!model.block_has_ge(block))
        throw ConfigError("gate_importances: block '" + block + "' has no GE unit");
    NoGrad ng;
    detail::CaptureHook hook;
    hook.want = block + ".ge.gate";
    model.forward(x, /*train=*/false, &hook);
    if (!hook.found)
        throw ConfigError("gate_importances: gate not recorded for block '" + block + "'");
    std::vector<std::vector<float>> out(x.shape().n);
    for (int i = 0; i < x.shape().n; ++i) detail::channel_means(hook.captured, i, out[i]);
    return out;
}

// Top-1 accuracy with a fraction of each image's gated residual channels
// zeroed in importance order. Ratio 0 is the plain evaluation; ratio 1 drops
// the whole residual branch (the identity path passes through).
inline double prune_eval(Model& model, const Dataset& ds, const NormStats& norm,
                         const std::string& block, double ratio, PruneOrder order,
                         int batch = 256, int subset = 0) {
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw ConfigError("prune_eval: ratio must lie in [0,1], got " + std::to_string(ratio));
    if (!model.has_block(block))
        throw ConfigError("prune_eval: unknown block '" + block + "'");
    NoGrad ng;
    detail::PruneHook hook;
    hook.block = block;
    hook.ratio = ratio;
    hook.order = order;
    const int n = subset > 0 ? std::min(subset, ds.count) : ds.count;
    const int K = ds.classes();
    std::int64_t correct = 0;
    for (int lo = 0; lo < n; lo += batch) {
        const int b = std::min(batch, n - lo);
        Tensor x(Shape4{b, 3, kCifarDim, kCifarDim});
        for (int i = 0; i < b; ++i)
            eval_transform_into(ds, lo + i, norm,
                                x.data() + static_cast<std::int64_t>(i) * kCifarPixels);
        Tensor logits = model.forward(x, /*train=*/false, &hook);
        for (int i = 0; i < b; ++i)
            if (detail::label_in_topk(logits.data() + static_cast<std::int64_t>(i) * K, K,
                                      ds.labels[lo + i], 1))
                ++correct;
    }
    return static_cast<double>(correct) / n;
}

inline PruneCurve prune_curve(Model& model, const Dataset& ds, const NormStats& norm,
                              const std::string& block, bool both_orders, int batch = 256,
                              int subset = 0) {
    PruneCurve curve;
    curve.block = block;
    for (int r = 0; r <= 10; ++r) {
        const double ratio = r / 10.0;
        curve.points.push_back(
            {ratio, "asc",
             prune_eval(model, ds, norm, block, ratio, PruneOrder::Ascending, batch, subset)});
        if (both_orders)
            curve.points.push_back({ratio, "desc",
                                    prune_eval(model, ds, norm, block, ratio,
                                               PruneOrder::Descending, batch, subset)});
    }
    return curve;
}

// ------------------------------------------------------------- exports ----

inline void export_csv(const SelectivityHistogram& h, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << "channel,index\n";
    char buf[64];
    for (std::size_t c = 0; c < h.indices.size(); ++c) {
        std::snprintf(buf, sizeof(buf), "%zu,%.6f\n", c, h.indices[c]);
        f << buf;
    }
    if (!f) throw IoError("write failed for " + path);
}

inline void export_csv(const PruneCurve& curve, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << "ratio,order,top1\n";
    char buf[64];
    for (const auto& p : curve.points) {
        std::snprintf(buf, sizeof(buf), "%.1f,%s,%.6f\n", p.ratio, p.order.c_str(), p.top1);
        f << buf;
    }
    if (!f) throw IoError("write failed for " + path);
}

}  // namespace gex
