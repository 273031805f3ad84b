#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gex/ge.hpp"
#include "gex/nn.hpp"

namespace gex {

enum class ArchFamily {
    ResNet50,
    ResNet101,
    ResNet50Narrow,  // width/4 at 32x32; pipeline smoke model, no reference numbers
    CifarResNet110,
    CifarResNet164,
    WRN16x8,
};

enum class BlockStyle { V1Bottleneck, PreActBasic, PreActBottleneck };

// Declarative description of a backbone. Both the builder and the analytic
// cost model consume this plan; the builder instantiates tensors, the cost
// model computes counts from formulas.
struct ArchSpec {
    ArchFamily family = ArchFamily::CifarResNet110;
    int in_channels = 3, in_h = 32, in_w = 32;
    int classes = 10;
    int width_div = 1;  // channel divisor for the narrow smoke variant

    struct StagePlan {
        std::string name;
        int blocks;
        int mid;  // bottleneck width; equals out for basic blocks
        int out;
        int stride;
    };

    static ArchSpec resnet50(int classes = 1000, int input = 224) {
        return {ArchFamily::ResNet50, 3, input, input, classes, 1};
    }
    static ArchSpec resnet101(int classes = 1000, int input = 224) {
        return {ArchFamily::ResNet101, 3, input, input, classes, 1};
    }
    static ArchSpec resnet50_narrow(int classes = 10, int input = 32) {
        return {ArchFamily::ResNet50Narrow, 3, input, input, classes, 4};
    }
    static ArchSpec cifar_resnet(int depth, int classes = 10, int width_div = 1) {
        if (depth == 110) return {ArchFamily::CifarResNet110, 3, 32, 32, classes, width_div};
        if (depth == 164) return {ArchFamily::CifarResNet164, 3, 32, 32, classes, width_div};
        throw ConfigError("cifar resnet depth must be 110 or 164, got " + std::to_string(depth));
    }
    static ArchSpec wrn_16_8(int classes = 10) {
        return {ArchFamily::WRN16x8, 3, 32, 32, classes, 1};
    }

    BlockStyle style() const {
        switch (family) {
            case ArchFamily::ResNet50:
            case ArchFamily::ResNet101:
            case ArchFamily::ResNet50Narrow:
                return BlockStyle::V1Bottleneck;
            case ArchFamily::CifarResNet164:
                return BlockStyle::PreActBottleneck;
            default:
                return BlockStyle::PreActBasic;
        }
    }

    bool has_imagenet_stem() const { return style() == BlockStyle::V1Bottleneck; }

    int stem_channels() const {
        switch (family) {
            case ArchFamily::ResNet50:
            case ArchFamily::ResNet101:
            case ArchFamily::ResNet50Narrow:
                return 64 / width_div;
            default:
                return 16;
        }
    }

    std::vector<StagePlan> stage_plans() const {
        const int d = width_div;
        switch (family) {
            case ArchFamily::ResNet50:
            case ArchFamily::ResNet50Narrow:
                return {{"stage2", 3, 64 / d, 256 / d, 1},
                        {"stage3", 4, 128 / d, 512 / d, 2},
                        {"stage4", 6, 256 / d, 1024 / d, 2},
                        {"stage5", 3, 512 / d, 2048 / d, 2}};
            case ArchFamily::ResNet101:
                return {{"stage2", 3, 64, 256, 1},
                        {"stage3", 4, 128, 512, 2},
                        {"stage4", 23, 256, 1024, 2},
                        {"stage5", 3, 512, 2048, 2}};
            case ArchFamily::CifarResNet110:
                return {{"stage1", 18, 16 / d, 16 / d, 1},
                        {"stage2", 18, 32 / d, 32 / d, 2},
                        {"stage3", 18, 64 / d, 64 / d, 2}};
            case ArchFamily::CifarResNet164:
                return {{"stage1", 18, 16 / d, 64 / d, 1},
                        {"stage2", 18, 32 / d, 128 / d, 2},
                        {"stage3", 18, 64 / d, 256 / d, 2}};
            case ArchFamily::WRN16x8:
                return {{"stage1", 2, 128, 128, 1},
                        {"stage2", 2, 256, 256, 2},
                        {"stage3", 2, 512, 512, 2}};
        }
        throw ConfigError("unknown architecture family");
    }

    std::string name() const {
        switch (family) {
            case ArchFamily::ResNet50: return "resnet50";
            case ArchFamily::ResNet101: return "resnet101";
            case ArchFamily::ResNet50Narrow: return "resnet50-narrow";
            case ArchFamily::CifarResNet110: return "cifar-resnet110";
            case ArchFamily::CifarResNet164: return "cifar-resnet164";
            case ArchFamily::WRN16x8: return "wrn-16-8";
        }
        return "?";
    }
};

// Where GE units go: every building block of each selected stage, at the end
// of the residual branch, immediately before summation with the identity.
struct GEPlacement {
    GEVariant variant = GEVariant::theta_minus(ExtentSpec::Global());
    std::vector<std::string> stages;  // empty = all stages

    bool covers(const std::string& stage) const {
        if (stages.empty()) return true;
        for (const auto& s : stages)
            if (s == stage) return true;
        return false;
    }

    void validate(const ArchSpec& arch) const {
        auto plans = arch.stage_plans();
        for (const auto& s : stages) {
            bool found = false;
            for (const auto& p : plans) found = found || p.name == s;
            if (!found)
                throw ConfigError("placement stage '" + s + "' does not exist in " +
                                  arch.name());
        }
    }
};

namespace detail {

struct BlockCommon {
    std::string name;
    std::optional<GEUnit> ge;

    Tensor finish_branch(Tensor r, const Tensor& /*x*/, bool train, ForwardHooks* hooks) {
        Tensor gate;
        if (ge) r = ge->forward(r, train, hooks, name + ".ge", &gate);
        if (hooks) r = hooks->transform_branch(name, std::move(r), gate);
        return r;
    }
};

// Original bottleneck (post-activation); downsampling stride sits on the
// first 1x1 convolution, projection shortcut on shape change.
struct BottleneckV1 : BlockCommon {
    Conv2d conv1, conv2, conv3;
    BatchNorm2d bn1, bn2, bn3;
    std::optional<Conv2d> proj;
    std::optional<BatchNorm2d> proj_bn;

    BottleneckV1(ParamStore& st, const std::string& nm, int in, int mid, int out,
                 int stride, Rng& rng)
        : conv1(st, nm + ".conv1", in, mid, 1, 1, stride, 0, 1, false, rng),
          conv2(st, nm + ".conv2", mid, mid, 3, 3, 1, 1, 1, false, rng),
          conv3(st, nm + ".conv3", mid, out, 1, 1, 1, 0, 1, false, rng),
          bn1(st, nm + ".bn1", mid),
          bn2(st, nm + ".bn2", mid),
          bn3(st, nm + ".bn3", out) {
        name = nm;
        if (stride != 1 || in != out) {
            proj.emplace(st, nm + ".downsample.conv", in, out, 1, 1, stride, 0, 1, false, rng);
            proj_bn.emplace(st, nm + ".downsample.bn", out);
        }
    }

    Tensor forward(const Tensor& x, bool train, ForwardHooks* hooks) {
        Tensor r = relu(bn1.forward(conv1.forward(x), train));
        r = relu(bn2.forward(conv2.forward(r), train));
        r = bn3.forward(conv3.forward(r), train);
        r = finish_branch(std::move(r), x, train, hooks);
        Tensor id = proj ? proj_bn->forward(proj->forward(x), train) : x;
        Tensor out = relu(add(r, id));
        if (hooks) hooks->on_activation(name + ".out", out);
        return out;
    }
};

// Pre-activation blocks (identity-mappings style). The shared pre-activation
// feeds both the residual branch and, on shape change, the projection.
struct PreActBlock : BlockCommon {
    bool bottleneck = false;
    Conv2d conv1, conv2;
    std::optional<Conv2d> conv3;
    BatchNorm2d bn1, bn2;
    std::optional<BatchNorm2d> bn3;
    std::optional<Conv2d> proj;

    PreActBlock(ParamStore& st, const std::string& nm, bool bneck, int in, int mid,
                int out, int stride, Rng& rng)
        : bottleneck(bneck),
          conv1(bneck ? Conv2d(st, nm + ".conv1", in, mid, 1, 1, 1, 0, 1, false, rng)
                      : Conv2d(st, nm + ".conv1", in, out, 3, 3, stride, 1, 1, false, rng)),
          conv2(bneck ? Conv2d(st, nm + ".conv2", mid, mid, 3, 3, stride, 1, 1, false, rng)
                      : Conv2d(st, nm + ".conv2", out, out, 3, 3, 1, 1, 1, false, rng)),
          bn1(st, nm + ".bn1", in),
          bn2(st, nm + ".bn2", bneck ? mid : out) {
        name = nm;
        if (bneck) {
            conv3.emplace(st, nm + ".conv3", mid, out, 1, 1, 1, 0, 1, false, rng);
            bn3.emplace(st, nm + ".bn3", mid);
        }
        if (stride != 1 || in != out)
            proj.emplace(st, nm + ".downsample.conv", in, out, 1, 1, stride, 0, 1, false, rng);
    }

    Tensor forward(const Tensor& x, bool train, ForwardHooks* hooks) {
        Tensor a = relu(bn1.forward(x, train));
        if (hooks) hooks->on_activation(name + ".preact", a);
        Tensor r = conv1.forward(a);
        r = relu(bn2.forward(r, train));
        r = conv2.forward(r);
        if (bottleneck) {
            r = relu(bn3->forward(r, train));
            r = conv3->forward(r);
        }
        r = finish_branch(std::move(r), x, train, hooks);
        Tensor id = proj ? proj->forward(a) : x;
        return add(r, id);
    }
};

}  // namespace detail

// A built network: layer graph plus its parameter registry. Train-mode
// forward/backward is confined to one thread per instance (batchnorm state
// mutates); a frozen instance may be shared read-only for eval.
class Model {
public:
    ArchSpec arch;
    std::optional<GEPlacement> placement;
    ParamStore store;
    std::uint64_t init_seed = 0;

    Tensor forward(const Tensor& x, bool train = false, ForwardHooks* hooks = nullptr) {
        const Shape4& s = x.shape();
        if (s.c != arch.in_channels || s.h != arch.in_h || s.w != arch.in_w)
            throw DimensionError("model forward: input geometry " + s.str() +
                                 " does not match arch (" + std::to_string(arch.in_channels) +
                                 "," + std::to_string(arch.in_h) + "," +
                                 std::to_string(arch.in_w) + ")");
        Tensor h = stem_conv.forward(x);
        if (arch.has_imagenet_stem()) {
            h = relu(stem_bn->forward(h, train));
            h = max_pool2d(h, 3, 2, 1);
            for (auto& b : v1_blocks) h = b.forward(h, train, hooks);
        } else {
            for (auto& b : pre_blocks) h = b.forward(h, train, hooks);
            h = relu(bn_final->forward(h, train));
            if (hooks) hooks->on_activation("final.out", h);
        }
        h = global_avg_pool(h);
        return fc->forward(h);
    }

    const std::vector<std::string>& block_names() const { return block_names_; }

    bool block_has_ge(const std::string& block) const {
        for (std::size_t i = 0; i < block_names_.size(); ++i)
            if (block_names_[i] == block) return block_has_ge_[i];
        return false;
    }

    bool has_block(const std::string& block) const {
        for (const auto& b : block_names_)
            if (b == block) return true;
        return false;
    }

    // build internals
    Conv2d stem_conv;
    std::optional<BatchNorm2d> stem_bn;
    std::vector<detail::BottleneckV1> v1_blocks;
    std::vector<detail::PreActBlock> pre_blocks;
    std::optional<BatchNorm2d> bn_final;
    std::optional<Linear> fc;
    std::vector<std::string> block_names_;
    std::vector<bool> block_has_ge_;
};

inline Model build_model(const ArchSpec& arch, std::optional<GEPlacement> placement,
                         std::uint64_t seed) {
    if (placement) placement->validate(arch);
    Model m;
    m.arch = arch;
    m.placement = placement;
    m.init_seed = seed;
    Rng rng = Rng::stream(seed, "init");
    ParamStore& st = m.store;

    const auto plans = arch.stage_plans();
    int ch = arch.stem_channels();
    int h = arch.in_h, w = arch.in_w;

    if (arch.has_imagenet_stem()) {
        m.stem_conv = Conv2d(st, "conv1", arch.in_channels, ch, 7, 7, 2, 3, 1, false, rng);
        m.stem_bn.emplace(st, "bn1", ch);
        h = detail::conv_out_dim(h, 7, 2, 3);
        w = detail::conv_out_dim(w, 7, 2, 3);
        h = detail::conv_out_dim(h, 3, 2, 1);  // stem max pool
        w = detail::conv_out_dim(w, 3, 2, 1);
    } else {
        m.stem_conv = Conv2d(st, "conv1", arch.in_channels, ch, 3, 3, 1, 1, 1, false, rng);
    }

    const BlockStyle style = arch.style();
    for (const auto& sp : plans) {
        for (int b = 0; b < sp.blocks; ++b) {
            const int stride = b == 0 ? sp.stride : 1;
            const std::string nm = sp.name + ".block" + std::to_string(b);
            if (b == 0) {
                h = detail::conv_out_dim(h, stride == 1 ? 1 : 3, stride, stride == 1 ? 0 : 1);
                w = detail::conv_out_dim(w, stride == 1 ? 1 : 3, stride, stride == 1 ? 0 : 1);
            }
            if (style == BlockStyle::V1Bottleneck) {
                m.v1_blocks.emplace_back(st, nm, ch, sp.mid, sp.out, stride, rng);
            } else {
                m.pre_blocks.emplace_back(st, nm, style == BlockStyle::PreActBottleneck, ch,
                                          sp.mid, sp.out, stride, rng);
            }
            bool has_ge = false;
            if (placement && placement->covers(sp.name)) {
                GEUnitConfig cfg = placement->variant.bind(sp.out, h, w);
                GEUnit unit(st, nm + ".ge", cfg, rng);
                if (style == BlockStyle::V1Bottleneck)
                    m.v1_blocks.back().ge = std::move(unit);
                else
                    m.pre_blocks.back().ge = std::move(unit);
                has_ge = true;
            }
            m.block_names_.push_back(nm);
            m.block_has_ge_.push_back(has_ge);
            ch = sp.out;
        }
    }

    if (!arch.has_imagenet_stem()) m.bn_final.emplace(st, "bn_final", ch);
    m.fc.emplace(st, "fc", ch, arch.classes, rng);
    return m;
}

}  // namespace gex
