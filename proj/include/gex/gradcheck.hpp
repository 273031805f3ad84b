#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "gex/ge.hpp"
#include "gex/model.hpp"
#include "gex/ops.hpp"
#include "gex/rng.hpp"

// Central finite-difference verification of the analytic gradients. The
// production path is float; kernels can be re-instantiated in double for a
// tighter check (the tolerances below are per scalar type).

namespace gex {

template <typename T>
struct FdOptions {
    T step = T(5e-3);  // balances curvature bias (h^2) against fp noise (1/h)
    double rtol = 1e-3;            // per-coordinate relative tolerance
    double denom_floor = 0.25;     // |a - fd| / max(|a|,|fd|,floor)
    double max_rel = 1e-2;         // hard cap for the worst coordinate
    double pass_fraction = 0.95;   // coords within rtol
    int max_coords = 60;
};

template <>
struct FdOptions<double> {
    double step = 1e-5;
    double rtol = 1e-6;
    double denom_floor = 1e-3;
    double max_rel = 1e-6;
    double pass_fraction = 1.0;
    int max_coords = 60;
};

struct GradCheckReport {
    std::string name;
    int checked = 0;
    int within_tol = 0;
    int skipped = 0;  // locally non-smooth coordinates (FD undefined there)
    double max_rel = 0.0;
    bool pass = false;
    std::vector<std::string> failures;  // coordinate descriptions over rtol

    std::string summary() const {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "%-28s %s  (%d/%d coords within tol, %d non-smooth skipped, max rel %.3g)",
                      name.c_str(), pass ? "pass" : "FAIL", within_tol, checked, skipped,
                      max_rel);
        return buf;
    }
};

// loss_fn builds a fresh scalar loss from the current contents of the wrt
// tensors. Analytic grads come from one recorded backward; the numeric side
// perturbs coordinates with recording off.
template <typename T>
GradCheckReport finite_diff_check(const std::string& name,
                                  const std::function<TensorT<T>()>& loss_fn,
                                  std::vector<TensorT<T>> wrt, Rng& rng,
                                  FdOptions<T> opt = {}) {
    GradCheckReport rep;
    rep.name = name;
    for (auto& t : wrt) t.zero_grad();

    TensorT<T> loss = loss_fn();
    backward(loss);
    std::vector<std::vector<T>> analytic;
    for (auto& t : wrt) {
        analytic.push_back(t.grad_if() ? *t.grad_if() : std::vector<T>(t.numel(), T(0)));
        t.zero_grad();
    }

    typename TapeT<T>::NoGrad ng;
    for (std::size_t wi = 0; wi < wrt.size(); ++wi) {
        TensorT<T>& t = wrt[wi];
        const std::int64_t n = t.numel();
        const int ncheck = static_cast<int>(std::min<std::int64_t>(n, opt.max_coords));
        for (int s = 0; s < ncheck; ++s) {
            const std::int64_t i =
                ncheck == n ? s : static_cast<std::int64_t>(rng.next_u64() % n);
            T* p = t.data() + i;
            const T old = *p;
            const T h = opt.step * std::max<T>(std::abs(old), T(1));
            auto eval_at = [&](T v) {
                *p = v;
                return static_cast<double>(loss_fn().data()[0]);
            };
            const double fd = (eval_at(old + h) - eval_at(old - h)) / (2.0 * h);
            const double fd_half =
                (eval_at(old + h / 2) - eval_at(old - h / 2)) / static_cast<double>(h);
            *p = old;
            // Richardson consistency: a kink or strong curvature inside
            // [x-h, x+h] makes the two estimates disagree; when they differ
            // beyond the tolerance being enforced, the secant cannot
            // adjudicate the analytic value at that tolerance at all.
            // Smooth ops agree to O(h^2), far inside the gate.
            if (std::abs(fd - fd_half) >
                opt.rtol * std::max({std::abs(fd), std::abs(fd_half), opt.denom_floor})) {
                ++rep.skipped;
                continue;
            }
            const double a = static_cast<double>(analytic[wi][i]);
            const double denom =
                std::max({std::abs(a), std::abs(fd), opt.denom_floor});
            const double rel = std::abs(a - fd) / denom;
            ++rep.checked;
            if (rel <= opt.rtol) {
                ++rep.within_tol;
            } else if (rep.failures.size() < 8) {
                char buf[160];
                std::snprintf(buf, sizeof(buf),
                              "tensor %zu coord %lld: analytic %.6g fd %.6g rel %.3g",
                              wi, static_cast<long long>(i), a, fd, rel);
                rep.failures.push_back(buf);
            }
            rep.max_rel = std::max(rep.max_rel, rel);
        }
    }
    rep.pass = rep.checked > 0 &&
               rep.within_tol >= static_cast<int>(std::ceil(opt.pass_fraction * rep.checked)) &&
               rep.max_rel <= opt.max_rel &&
               rep.skipped <= (rep.checked + rep.skipped) / 3;  // never mostly vacuous
    return rep;
}

namespace detail {

inline Tensor rand_tensor(Shape4 s, Rng& rng, float scale = 1.0f, bool rg = true) {
    Tensor t(s, 0.0f, rg);
    for (auto& v : t.vec()) v = static_cast<float>(rng.normal()) * scale;
    return t;
}

// Values pairwise separated within each channel plane and bounded away from
// zero, so kinked ops (max windows, relu) see no tie or sign flip within the
// FD step.
inline Tensor rand_tensor_separated(Shape4 s, Rng& rng, float gap = 0.15f) {
    Tensor t(s, 0.0f, true);
    const std::int64_t plane = s.plane();
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(s.n) * s.c; ++p) {
        float* d = t.data() + p * plane;
        for (std::int64_t i = 0; i < plane; ++i)
            d[i] = (static_cast<float>(i) - plane / 2.0f) * gap + gap / 2.0f;
        for (std::int64_t i = plane - 1; i > 0; --i)
            std::swap(d[i], d[rng.next_u64() % (i + 1)]);
    }
    return t;
}

// Generic parameter values: breaks the zero-bias / zero-beta degeneracies
// that park ReLUs exactly on their kink.
inline void jitter_params(ParamStore& store, Rng& rng, float scale = 0.3f) {
    auto& entries = const_cast<std::vector<ParamStore::Entry>&>(store.params());
    for (auto& e : entries)
        for (auto& v : e.tensor.vec()) v += static_cast<float>(rng.normal()) * scale;
}

}  // namespace detail

// Named gradient checks covering every differentiable op and the assembled
// GE pairings (theta-minus / theta / theta-plus / SE at e in {2, global}).
inline std::vector<GradCheckReport> run_op_gradchecks(const std::string& which,
                                                      std::uint64_t seed) {
    std::vector<GradCheckReport> out;
    auto want = [&](const std::string& name) {
        return which == "all" || which == name;
    };

    auto run_check = [&](const std::string& name, std::vector<Tensor> wrt,
                         std::function<Tensor()> fwd) {
        if (!want(name)) return;
        Tensor probe = fwd();
        Tensor w(probe.shape());
        Rng lw = Rng::stream(seed, name + "/loss");
        for (auto& v : w.vec())
            v = static_cast<float>(lw.uniform() + 0.25) / std::sqrt(static_cast<float>(w.numel()));
        std::function<Tensor()> fn = [fwd, w]() { return sum(hadamard(fwd(), w)); };
        Rng crng = Rng::stream(seed, name + "/coords");
        out.push_back(finite_diff_check<float>(name, fn, std::move(wrt), crng));
    };

    {
        Rng r = Rng::stream(seed, "conv2d");
        Tensor x = detail::rand_tensor({2, 3, 5, 5}, r);
        Tensor w = detail::rand_tensor({4, 3, 3, 3}, r, 0.5f);
        Tensor b = detail::rand_tensor({1, 4, 1, 1}, r, 0.2f);
        run_check("conv2d", {x, w, b},
                  [=]() { return conv2d(x, w, std::optional<Tensor>(b), 2, 1, 1); });
    }
    {
        Rng r = Rng::stream(seed, "conv2d_depthwise");
        Tensor x = detail::rand_tensor({1, 4, 5, 5}, r);
        Tensor w = detail::rand_tensor({4, 1, 3, 3}, r, 0.5f);
        run_check("conv2d_depthwise", {x, w},
                  [=]() { return conv2d(x, w, std::optional<Tensor>(), 1, 1, 4); });
    }
    {
        Rng r = Rng::stream(seed, "conv2d_grouped");
        Tensor x = detail::rand_tensor({2, 4, 4, 4}, r);
        Tensor w = detail::rand_tensor({6, 2, 3, 3}, r, 0.5f);
        run_check("conv2d_grouped", {x, w},
                  [=]() { return conv2d(x, w, std::optional<Tensor>(), 1, 1, 2); });
    }
    {
        Rng r = Rng::stream(seed, "avg_pool2d");
        Tensor x = detail::rand_tensor({2, 3, 5, 5}, r);
        run_check("avg_pool2d", {x}, [=]() { return avg_pool2d(x, 3, 2, 1); });
    }
    {
        Rng r = Rng::stream(seed, "max_pool2d");
        Tensor x = detail::rand_tensor_separated({2, 3, 5, 5}, r);
        run_check("max_pool2d", {x}, [=]() { return max_pool2d(x, 3, 2, 1); });
    }
    {
        Rng r = Rng::stream(seed, "nearest_interpolate");
        Tensor x = detail::rand_tensor({2, 3, 3, 3}, r);
        run_check("nearest_interpolate", {x}, [=]() { return nearest_interpolate(x, 7, 7); });
    }
    {
        Rng r = Rng::stream(seed, "sigmoid");
        Tensor x = detail::rand_tensor({2, 3, 4, 4}, r);
        run_check("sigmoid", {x}, [=]() { return sigmoid(x); });
    }
    {
        Rng r = Rng::stream(seed, "relu");
        Tensor x = detail::rand_tensor_separated({2, 3, 4, 4}, r);
        run_check("relu", {x}, [=]() { return relu(x); });
    }
    {
        Rng r = Rng::stream(seed, "hadamard");
        Tensor a = detail::rand_tensor({2, 3, 4, 4}, r);
        Tensor b = detail::rand_tensor({2, 3, 4, 4}, r);
        run_check("hadamard", {a, b}, [=]() { return hadamard(a, b); });
    }
    {
        Rng r = Rng::stream(seed, "add");
        Tensor a = detail::rand_tensor({2, 3, 4, 4}, r);
        Tensor b = detail::rand_tensor({2, 3, 4, 4}, r);
        run_check("add", {a, b}, [=]() { return add(a, b); });
    }
    {
        Rng r = Rng::stream(seed, "linear");
        Tensor x = detail::rand_tensor({3, 7, 1, 1}, r);
        Tensor w = detail::rand_tensor({4, 7, 1, 1}, r, 0.5f);
        Tensor b = detail::rand_tensor({1, 4, 1, 1}, r, 0.2f);
        run_check("linear", {x, w, b},
                  [=]() { return linear(x, w, std::optional<Tensor>(b)); });
    }
    {
        Rng r = Rng::stream(seed, "global_avg_pool");
        Tensor x = detail::rand_tensor({2, 3, 4, 5}, r);
        run_check("global_avg_pool", {x}, [=]() { return global_avg_pool(x); });
    }
    if (want("batchnorm2d")) {
        Rng r = Rng::stream(seed, "batchnorm2d");
        Tensor x = detail::rand_tensor({3, 4, 4, 4}, r);
        Tensor gamma = detail::rand_tensor({1, 4, 1, 1}, r, 0.5f);
        Tensor beta = detail::rand_tensor({1, 4, 1, 1}, r, 0.5f);
        auto rm = std::make_shared<Tensor>(Shape4{1, 4, 1, 1}, 0.0f);
        auto rv = std::make_shared<Tensor>(Shape4{1, 4, 1, 1}, 1.0f);
        std::function<Tensor()> fwd = [=]() {
            return batchnorm2d(x, gamma, beta, *rm, *rv, true, 0.1f, 1e-5f);
        };
        Tensor probe = fwd();
        Tensor w(probe.shape());
        Rng lw = Rng::stream(seed, "batchnorm2d/loss");
        for (auto& v : w.vec())
            v = static_cast<float>(lw.uniform() + 0.25) / std::sqrt(static_cast<float>(w.numel()));
        std::function<Tensor()> fn = [fwd, w]() { return sum(hadamard(fwd(), w)); };
        Rng crng = Rng::stream(seed, "batchnorm2d/coords");
        out.push_back(finite_diff_check<float>("batchnorm2d", fn, {x, gamma, beta}, crng));
    }
    if (want("batchnorm2d_eval")) {
        Rng r = Rng::stream(seed, "batchnorm2d_eval");
        Tensor x = detail::rand_tensor({3, 4, 4, 4}, r);
        Tensor gamma = detail::rand_tensor({1, 4, 1, 1}, r, 0.5f);
        Tensor beta = detail::rand_tensor({1, 4, 1, 1}, r, 0.5f);
        auto rm = std::make_shared<Tensor>(Shape4{1, 4, 1, 1}, 0.1f);
        auto rv = std::make_shared<Tensor>(Shape4{1, 4, 1, 1}, 0.8f);
        std::function<Tensor()> fwd = [=]() {
            return batchnorm2d(x, gamma, beta, *rm, *rv, false, 0.1f, 1e-5f);
        };
        Tensor probe = fwd();
        Tensor w(probe.shape());
        Rng lw = Rng::stream(seed, "batchnorm2d_eval/loss");
        for (auto& v : w.vec())
            v = static_cast<float>(lw.uniform() + 0.25) / std::sqrt(static_cast<float>(w.numel()));
        std::function<Tensor()> fn = [fwd, w]() { return sum(hadamard(fwd(), w)); };
        Rng crng = Rng::stream(seed, "batchnorm2d_eval/coords");
        out.push_back(finite_diff_check<float>("batchnorm2d_eval", fn, {x, gamma, beta}, crng));
    }
    if (want("softmax_cross_entropy")) {
        Rng r = Rng::stream(seed, "softmax_cross_entropy");
        Tensor x = detail::rand_tensor({4, 6, 1, 1}, r);
        std::vector<int> labels = {0, 2, 5, 1};
        std::function<Tensor()> fn = [=]() { return softmax_cross_entropy(x, labels); };
        Rng crng = Rng::stream(seed, "softmax_cross_entropy/coords");
        out.push_back(finite_diff_check<float>("softmax_cross_entropy", fn, {x}, crng));
    }

    // assembled GE units
    struct UnitCase {
        std::string name;
        GEVariant variant;
    };
    const std::vector<UnitCase> units = {
        {"ge_theta_minus_e2", GEVariant::theta_minus(ExtentSpec::Ratio(2))},
        {"ge_theta_minus_global", GEVariant::theta_minus(ExtentSpec::Global())},
        {"ge_theta_minus_max_e2",
         GEVariant::theta_minus(ExtentSpec::Ratio(2), GatherKind::MaxPool)},
        {"ge_theta_e2", GEVariant::theta(ExtentSpec::Ratio(2))},
        {"ge_theta_global", GEVariant::theta(ExtentSpec::Global())},
        {"ge_theta_plus_e2", GEVariant::theta_plus(ExtentSpec::Ratio(2), 2)},
        {"ge_theta_plus_global", GEVariant::theta_plus(ExtentSpec::Global(), 2)},
        {"ge_se_global", GEVariant::se(2)},
    };
    for (const auto& uc : units) {
        if (!want(uc.name)) continue;
        Rng r = Rng::stream(seed, uc.name);
        Tensor x = uc.variant.gather == GatherKind::MaxPool
                       ? detail::rand_tensor_separated({4, 4, 4, 4}, r)
                       : detail::rand_tensor({4, 4, 4, 4}, r);
        auto store = std::make_shared<ParamStore>();
        Rng init_rng = Rng::stream(seed, uc.name + "/init");
        auto unit = std::make_shared<GEUnit>(*store, "ge", uc.variant.bind(4, 4, 4), init_rng);
        Rng jrng = Rng::stream(seed, uc.name + "/jitter");
        detail::jitter_params(*store, jrng);
        std::vector<Tensor> wrt = {x};
        for (const auto& e : store->params()) wrt.push_back(e.tensor);
        std::function<Tensor()> fwd = [unit, x]() { return unit->forward(x, true); };
        Tensor probe = fwd();
        Tensor w(probe.shape());
        Rng lw = Rng::stream(seed, uc.name + "/loss");
        for (auto& v : w.vec())
            v = static_cast<float>(lw.uniform() + 0.25) / std::sqrt(static_cast<float>(w.numel()));
        std::function<Tensor()> fn = [fwd, w]() { return sum(hadamard(fwd(), w)); };
        Rng crng = Rng::stream(seed, uc.name + "/coords");
        out.push_back(finite_diff_check<float>(uc.name, fn, wrt, crng));
    }
    return out;
}

// Spot-check of a whole assembled network: a narrow CIFAR backbone with a
// parameter-free GE placement, probed at a few representative tensors.
inline std::vector<GradCheckReport> run_model_gradcheck(std::uint64_t seed) {
    ArchSpec arch = ArchSpec::cifar_resnet(110, 4, 8);
    GEPlacement place;
    place.variant = GEVariant::theta_minus(ExtentSpec::Global());
    Model model = build_model(arch, place, seed);

    Rng r = Rng::stream(seed, "model-input");
    Tensor x = detail::rand_tensor({2, 3, 32, 32}, r, 1.0f, false);
    std::vector<int> labels = {1, 3};
    std::function<Tensor()> fn = [&]() {
        return softmax_cross_entropy(model.forward(x, true), labels);
    };

    // late-stage probes: short chains to the loss keep float FD well
    // conditioned (early layers go through ~100 ReLU kinks, where a usable
    // step size no longer exists in 32-bit)
    const std::vector<std::string> probes = {"stage3.block17.conv1.weight",
                                             "stage3.block17.bn2.gamma", "bn_final.gamma",
                                             "fc.weight", "fc.bias"};
    std::vector<Tensor> wrt;
    for (const auto& p : probes) {
        Tensor* t = model.store.find(p);
        if (t) wrt.push_back(*t);
    }
    FdOptions<float> opt;
    opt.max_coords = 10;
    Rng crng = Rng::stream(seed, "model/coords");
    std::vector<GradCheckReport> out;
    out.push_back(finite_diff_check<float>("model_cifar110_ge", fn, wrt, crng, opt));
    return out;
}

}  // namespace gex
