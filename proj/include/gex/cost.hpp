#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gex/model.hpp"

// Execution-free parameter and multiply-accumulate accounting. Counting
// convention: one MAC = one FLOP; convolutions and the classifier count
// MACs, batchnorm / pooling / activations / elementwise gating count zero
// (batchnorm still contributes its affine pair to the parameter total).
// GE depth-wise and subnet 1x1 convolutions are counted as convolutions,
// at the resolution they actually run at.

namespace gex {

struct CostLine {
    std::string name;
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

struct CostReport {
    std::vector<CostLine> lines;
    std::int64_t total_params = 0;
    std::int64_t total_macs = 0;

    double gflops() const { return static_cast<double>(total_macs) / 1e9; }
    double params_millions() const { return static_cast<double>(total_params) / 1e6; }

    std::string to_text() const {
        std::string out;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-44s %14s %16s\n", "layer", "params", "MACs");
        out += buf;
        for (const auto& l : lines) {
            std::snprintf(buf, sizeof(buf), "%-44s %14lld %16lld\n", l.name.c_str(),
                          static_cast<long long>(l.params), static_cast<long long>(l.macs));
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "%-44s %14lld %16lld\n", "total",
                      static_cast<long long>(total_params), static_cast<long long>(total_macs));
        out += buf;
        std::snprintf(buf, sizeof(buf), "GFLOPs %.2f   #Params %.2fM\n", gflops(),
                      params_millions());
        out += buf;
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& l : lines)
            layers.push_back({{"name", l.name}, {"params", l.params}, {"macs", l.macs}});
        return {{"layers", layers},
                {"totals", {{"params", total_params}, {"macs", total_macs}}}};
    }
};

namespace detail {

struct CostWalk {
    CostReport rep;

    void conv(const std::string& name, int cin, int cout, int kh, int kw, int groups,
              int ho, int wo, bool bias) {
        CostLine l;
        l.name = name;
        l.params = static_cast<std::int64_t>(kh) * kw * (cin / groups) * cout +
                   (bias ? cout : 0);
        l.macs = static_cast<std::int64_t>(kh) * kw * (cin / groups) * cout * ho * wo;
        rep.lines.push_back(l);
    }
    void bn(const std::string& name, int c) {
        rep.lines.push_back({name, 2 * static_cast<std::int64_t>(c), 0});
    }
    void fc(const std::string& name, int in, int out) {
        rep.lines.push_back({name, static_cast<std::int64_t>(in) * out + out,
                             static_cast<std::int64_t>(in) * out});
    }

    void ge_unit(const std::string& prefix, const GEVariant& v, int c, int h, int w) {
        if (v.gather == GatherKind::DepthwiseConv) {
            if (v.extent.global) {
                conv(prefix + ".gather0.conv", c, c, h, w, c, 1, 1, false);
                bn(prefix + ".gather0.bn", c);
                h = 1;
                w = 1;
            } else {
                int stages = 0;
                for (int e = v.extent.e; e > 1; e >>= 1) ++stages;
                for (int i = 0; i < stages; ++i) {
                    const int ho = (h + 1) / 2, wo = (w + 1) / 2;
                    conv(prefix + ".gather" + std::to_string(i) + ".conv", c, c, 3, 3, c,
                         ho, wo, false);
                    bn(prefix + ".gather" + std::to_string(i) + ".bn", c);
                    h = ho;
                    w = wo;
                }
            }
        } else {
            // pooling gather: no parameters, zero MACs under the convention,
            // but it still sets the resolution the subnet runs at
            if (v.extent.global) {
                h = 1;
                w = 1;
            } else {
                h = gather_out_dim(h, v.extent.e);
                w = gather_out_dim(w, v.extent.e);
            }
        }
        if (v.excite.subnet) {
            const int hidden = (c + v.excite.reduction - 1) / v.excite.reduction;
            conv(prefix + ".fc1", c, hidden, 1, 1, 1, h, w, true);
            conv(prefix + ".fc2", hidden, c, 1, 1, 1, h, w, true);
        }
    }
};

}  // namespace detail

inline CostReport count_cost(const ArchSpec& arch,
                             const std::optional<GEPlacement>& placement) {
    if (placement) placement->validate(arch);
    detail::CostWalk cw;
    const auto plans = arch.stage_plans();
    int ch = arch.stem_channels();
    int h = arch.in_h, w = arch.in_w;

    if (arch.has_imagenet_stem()) {
        h = detail::conv_out_dim(h, 7, 2, 3);
        w = detail::conv_out_dim(w, 7, 2, 3);
        cw.conv("conv1", arch.in_channels, ch, 7, 7, 1, h, w, false);
        cw.bn("bn1", ch);
        h = detail::conv_out_dim(h, 3, 2, 1);
        w = detail::conv_out_dim(w, 3, 2, 1);
    } else {
        cw.conv("conv1", arch.in_channels, ch, 3, 3, 1, h, w, false);
    }

    const BlockStyle style = arch.style();
    for (const auto& sp : plans) {
        for (int b = 0; b < sp.blocks; ++b) {
            const int stride = b == 0 ? sp.stride : 1;
            const std::string nm = sp.name + ".block" + std::to_string(b);
            const int ho = stride == 1 ? h : detail::conv_out_dim(h, 3, 2, 1);
            const int wo = stride == 1 ? w : detail::conv_out_dim(w, 3, 2, 1);
            if (style == BlockStyle::V1Bottleneck) {
                cw.conv(nm + ".conv1", ch, sp.mid, 1, 1, 1, ho, wo, false);
                cw.bn(nm + ".bn1", sp.mid);
                cw.conv(nm + ".conv2", sp.mid, sp.mid, 3, 3, 1, ho, wo, false);
                cw.bn(nm + ".bn2", sp.mid);
                cw.conv(nm + ".conv3", sp.mid, sp.out, 1, 1, 1, ho, wo, false);
                cw.bn(nm + ".bn3", sp.out);
                if (stride != 1 || ch != sp.out) {
                    cw.conv(nm + ".downsample.conv", ch, sp.out, 1, 1, 1, ho, wo, false);
                    cw.bn(nm + ".downsample.bn", sp.out);
                }
            } else if (style == BlockStyle::PreActBasic) {
                cw.bn(nm + ".bn1", ch);
                cw.conv(nm + ".conv1", ch, sp.out, 3, 3, 1, ho, wo, false);
                cw.bn(nm + ".bn2", sp.out);
                cw.conv(nm + ".conv2", sp.out, sp.out, 3, 3, 1, ho, wo, false);
                if (stride != 1 || ch != sp.out)
                    cw.conv(nm + ".downsample.conv", ch, sp.out, 1, 1, 1, ho, wo, false);
            } else {  // pre-activation bottleneck
                cw.bn(nm + ".bn1", ch);
                cw.conv(nm + ".conv1", ch, sp.mid, 1, 1, 1, h, w, false);
                cw.bn(nm + ".bn2", sp.mid);
                cw.conv(nm + ".conv2", sp.mid, sp.mid, 3, 3, 1, ho, wo, false);
                cw.bn(nm + ".bn3", sp.mid);
                cw.conv(nm + ".conv3", sp.mid, sp.out, 1, 1, 1, ho, wo, false);
                if (stride != 1 || ch != sp.out)
                    cw.conv(nm + ".downsample.conv", ch, sp.out, 1, 1, 1, ho, wo, false);
            }
            h = ho;
            w = wo;
            if (placement && placement->covers(sp.name))
                cw.ge_unit(nm + ".ge", placement->variant, sp.out, h, w);
            ch = sp.out;
        }
    }

    if (!arch.has_imagenet_stem()) cw.bn("bn_final", ch);
    cw.fc("fc", ch, arch.classes);

    for (const auto& l : cw.rep.lines) {
        cw.rep.total_params += l.params;
        cw.rep.total_macs += l.macs;
    }
    return cw.rep;
}

}  // namespace gex
