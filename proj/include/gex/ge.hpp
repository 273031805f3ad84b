#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gex/nn.hpp"
#include "gex/ops.hpp"

// Gather-excite operators. A gather aggregates feature responses per channel
// over a spatial neighbourhood set by the extent ratio (window side 2e-1,
// stride e, output ceil(H/e) x ceil(W/e), or a single aggregate for global
// extent). An excite turns the aggregates into a sigmoid gate, resized to
// the input resolution by nearest-neighbour interpolation, and applies it
// multiplicatively. Named pairings:
//   GE-theta-minus : avg/max pooling gather + direct excite (no parameters)
//   GE-theta       : strided depth-wise conv gather + direct excite
//   GE-theta-plus  : depth-wise gather + channel-subnetwork excite
//   SE             : global average gather + channel-subnetwork excite

namespace gex {

struct ExtentSpec {
    bool global = true;
    int e = 0;  // >= 2, power of two, when !global

    static ExtentSpec Global() { return {true, 0}; }
    static ExtentSpec Ratio(int e) { return {false, e}; }

    void validate() const {
        if (global) return;
        if (e < 2 || (e & (e - 1)) != 0)
            throw ConfigError("extent ratio must be a power of two >= 2, got " +
                              std::to_string(e));
    }
    bool operator==(const ExtentSpec&) const = default;
    std::string str() const { return global ? "global" : "e" + std::to_string(e); }
};

enum class GatherKind { AvgPool, MaxPool, DepthwiseConv };

struct ExciteKind {
    bool subnet = false;
    int reduction = 16;

    static ExciteKind Direct() { return {false, 0}; }
    static ExciteKind ChannelSubnet(int r = 16) { return {true, r}; }
    bool operator==(const ExciteKind&) const = default;
};

struct GEUnitConfig {
    ExtentSpec extent;
    GatherKind gather = GatherKind::AvgPool;
    ExciteKind excite = ExciteKind::Direct();
    int channels = 0;
    int in_h = 0, in_w = 0;

    int hidden_width() const {  // ceil(C/r), never zero
        return (channels + excite.reduction - 1) / excite.reduction;
    }
    // Depth-wise chain length: each stride-2 stage contributes a factor of 2
    // of extent, so a ratio of e needs log2(e) stages; global uses one
    // full-field depth-wise convolution.
    int dw_stages() const {
        if (extent.global) return 1;
        int L = 0;
        for (int v = extent.e; v > 1; v >>= 1) ++L;
        return L;
    }

    void validate() const {
        extent.validate();
        if (channels < 1) throw ConfigError("ge unit: channels must be >= 1");
        if (!extent.global && (in_h < extent.e || in_w < extent.e))
            throw ConfigError("ge unit: spatial size " + std::to_string(in_h) + "x" +
                              std::to_string(in_w) + " smaller than extent ratio " +
                              std::to_string(extent.e));
        if (excite.subnet && excite.reduction < 1)
            throw ConfigError("ge unit: subnet reduction must be >= 1");
    }
};

// The named operator pairings as config templates (channels/geometry bound later).
struct GEVariant {
    GatherKind gather;
    ExtentSpec extent;
    ExciteKind excite;

    static GEVariant theta_minus(ExtentSpec ext, GatherKind pool = GatherKind::AvgPool) {
        return {pool, ext, ExciteKind::Direct()};
    }
    static GEVariant theta(ExtentSpec ext) {
        return {GatherKind::DepthwiseConv, ext, ExciteKind::Direct()};
    }
    static GEVariant theta_plus(ExtentSpec ext, int r = 16) {
        return {GatherKind::DepthwiseConv, ext, ExciteKind::ChannelSubnet(r)};
    }
    static GEVariant se(int r = 16) {
        return {GatherKind::AvgPool, ExtentSpec::Global(), ExciteKind::ChannelSubnet(r)};
    }

    GEUnitConfig bind(int channels, int h, int w) const {
        GEUnitConfig cfg{extent, gather, excite, channels, h, w};
        cfg.validate();
        return cfg;
    }
    bool parameter_free() const { return gather != GatherKind::DepthwiseConv && !excite.subnet; }
};

// 1-based selection window iota(u, e): {e*u + d : d in [-(e-1), e-1]^2},
// clipped to the HxW grid. Reference form; the pooling gathers realize it.
inline std::vector<std::pair<int, int>> selection_window(std::pair<int, int> u, int e,
                                                         int H, int W) {
    std::vector<std::pair<int, int>> out;
    const int r = (2 * e - 1) / 2;  // = e-1 for e >= 1
    const int cy = e * u.first, cx = e * u.second;
    for (int dy = -r; dy <= r; ++dy) {
        const int y = cy + dy;
        if (y < 1 || y > H) continue;
        for (int dx = -r; dx <= r; ++dx) {
            const int x = cx + dx;
            if (x < 1 || x > W) continue;
            out.emplace_back(y, x);
        }
    }
    return out;
}

inline int gather_out_dim(int in, int e) { return (in + e - 1) / e; }

// Pooling gather. Windows sit at 1-based centers e*u, i.e. the 0-based
// window of output u0 spans [e*u0, e*u0 + 2e-2]: no leading pad, trailing
// zero pad to reach ceil(H/e) outputs. Average uses the count-include-pad
// divisor (2e-1)^2; max excludes padding.
template <typename T>
TensorT<T> gather_pool(const TensorT<T>& x, GatherKind kind, const ExtentSpec& extent) {
    if (kind == GatherKind::DepthwiseConv)
        throw ConfigError("gather_pool: depth-wise gather carries parameters; use GEUnit");
    extent.validate();
    const Shape4& s = x.shape();
    if (extent.global) {
        return kind == GatherKind::AvgPool ? global_avg_pool(x) : global_max_pool(x);
    }
    const int e = extent.e;
    if (s.h < e || s.w < e)
        throw ConfigError("gather_pool: spatial size " + std::to_string(s.h) + "x" +
                          std::to_string(s.w) + " smaller than extent ratio " +
                          std::to_string(e));
    const int k = 2 * e - 1;
    const int Ho = gather_out_dim(s.h, e), Wo = gather_out_dim(s.w, e);
    return pool2d(x, k, k, e, 0, 0, Ho, Wo,
                  kind == GatherKind::AvgPool ? PoolMode::Avg : PoolMode::Max);
}

// Direct excite: y = x (*) sigmoid(interp(xhat)).
template <typename T>
TensorT<T> excite_direct(const TensorT<T>& x, const TensorT<T>& xhat) {
    if (x.shape().c != xhat.shape().c)
        throw DimensionError("excite: channel axis mismatch, input " +
                             std::to_string(x.shape().c) + " vs aggregate " +
                             std::to_string(xhat.shape().c));
    if (x.shape().n != xhat.shape().n)
        throw DimensionError("excite: batch axis mismatch");
    auto gate = sigmoid(nearest_interpolate(xhat, x.shape().h, x.shape().w));
    return hadamard(x, gate);
}

// Per-model forward instrumentation. Also the seam used by the analysis
// procedures: gate capture, gate saturation, and per-image channel pruning
// of the residual branch.
struct ForwardHooks {
    virtual ~ForwardHooks() = default;
    virtual bool saturate_gates() const { return false; }
    virtual void on_activation(const std::string& /*name*/, const Tensor& /*t*/) {}
    virtual Tensor transform_branch(const std::string& /*block*/, Tensor branch,
                                    const Tensor& /*gate*/) {
        return branch;
    }
};

// A full gather-excite unit with its learned state (empty for GE-theta-minus).
class GEUnit {
public:
    GEUnit() = default;

    GEUnit(ParamStore& store, const std::string& prefix, const GEUnitConfig& cfg, Rng& rng)
        : cfg_(cfg) {
        cfg_.validate();
        if (cfg_.gather == GatherKind::DepthwiseConv) {
            int h = cfg_.in_h, w = cfg_.in_w;
            const int stages = cfg_.dw_stages();
            for (int i = 0; i < stages; ++i) {
                const std::string sp = prefix + ".gather" + std::to_string(i);
                if (cfg_.extent.global) {
                    dw_.emplace_back(store, sp + ".conv", cfg_.channels, cfg_.channels, h, w,
                                     1, 0, cfg_.channels, false, rng);
                } else {
                    dw_.emplace_back(store, sp + ".conv", cfg_.channels, cfg_.channels, 3, 3,
                                     2, 1, cfg_.channels, false, rng);
                    h = (h + 1) / 2;
                    w = (w + 1) / 2;
                }
                dw_bn_.emplace_back(store, sp + ".bn", cfg_.channels);
            }
        }
        if (cfg_.excite.subnet) {
            const int hidden = cfg_.hidden_width();
            fc1_.emplace(store, prefix + ".fc1", cfg_.channels, hidden, 1, 1, 1, 0, 1, true, rng);
            fc2_.emplace(store, prefix + ".fc2", hidden, cfg_.channels, 1, 1, 1, 0, 1, true, rng);
        }
    }

    const GEUnitConfig& config() const { return cfg_; }

    // Returns the gated output; gate_out (optional) receives the full-size gate.
    Tensor forward(const Tensor& x, bool train, ForwardHooks* hooks = nullptr,
                   const std::string& name = {}, Tensor* gate_out = nullptr) {
        const Shape4& s = x.shape();
        if (s.c != cfg_.channels)
            throw DimensionError("ge unit: channel axis mismatch, input " +
                                 std::to_string(s.c) + " vs configured " +
                                 std::to_string(cfg_.channels));

        if (hooks && hooks->saturate_gates()) {
            // gate pinned to 1: the unit is the identity
            Tensor gate(s, 1.0f);
            if (hooks) hooks->on_activation(name + ".gate", gate);
            if (gate_out) *gate_out = gate;
            return x;
        }

        Tensor agg = gather_forward(x, train);
        if (cfg_.excite.subnet) agg = fc2_->forward(relu(fc1_->forward(agg)));
        Tensor gate = sigmoid(nearest_interpolate(agg, s.h, s.w));
        if (hooks) hooks->on_activation(name + ".gate", gate);
        if (gate_out) *gate_out = gate;
        return hadamard(x, gate);
    }

    // The gather stage alone (used by the locality property checks).
    Tensor gather_forward(const Tensor& x, bool train) {
        if (cfg_.gather != GatherKind::DepthwiseConv)
            return gather_pool(x, cfg_.gather, cfg_.extent);
        Tensor h = x;
        for (std::size_t i = 0; i < dw_.size(); ++i) {
            if (i > 0) h = relu(h);  // between stages, never after the last
            h = dw_bn_[i].forward(dw_[i].forward(h), train);
        }
        return h;
    }

private:
    GEUnitConfig cfg_;
    std::vector<Conv2d> dw_;
    std::vector<BatchNorm2d> dw_bn_;
    std::optional<Conv2d> fc1_, fc2_;
};

}  // namespace gex
