#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gex/detail/kernels.hpp"
#include "gex/error.hpp"
#include "gex/tensor.hpp"

// Differentiable operations. Each op runs its forward kernel and, when the
// tape is recording and an input requires grad, registers a backward closure
// that accumulates (+=) into input grad buffers. Shapes must match exactly;
// any broadcast is performed explicitly upstream (nearest_interpolate),
// never implicitly here.

namespace gex {

namespace detail {

template <typename T>
inline bool want_record(std::initializer_list<const TensorT<T>*> inputs) {
    if (!TapeT<T>::current().recording()) return false;
    for (const auto* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// ------------------------------------------------------------ conv2d ------

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w,
                  const std::optional<TensorT<T>>& b, int stride, int pad,
                  int groups = 1) {
    const Shape4& xs = x.shape();
    const Shape4& ws = w.shape();
    if (groups < 1 || xs.c % groups != 0)
        throw DimensionError("conv2d: input channel axis " + std::to_string(xs.c) +
                             " not divisible by groups " + std::to_string(groups));
    if (ws.n % groups != 0)
        throw DimensionError("conv2d: output channel axis " + std::to_string(ws.n) +
                             " not divisible by groups " + std::to_string(groups));
    if (ws.c != xs.c / groups)
        throw DimensionError("conv2d: weight channel axis " + std::to_string(ws.c) +
                             " does not match input channels/groups " +
                             std::to_string(xs.c / groups));
    if (ws.h < 1 || ws.w < 1 || stride < 1 || pad < 0)
        throw ConfigError("conv2d: kernel/stride/pad out of range");
    if (b && (b->shape().c != ws.n || b->shape().numel() != ws.n))
        throw DimensionError("conv2d: bias channel axis " + std::to_string(b->shape().c) +
                             " does not match output channels " + std::to_string(ws.n));

    detail::ConvGeom g{xs.n, xs.c, xs.h, xs.w, ws.n,    ws.h,
                       ws.w, stride, pad,  groups, 0, 0};
    g.Ho = detail::conv_out_dim(xs.h, ws.h, stride, pad);
    g.Wo = detail::conv_out_dim(xs.w, ws.w, stride, pad);
    if (g.Ho < 1 || g.Wo < 1)
        throw DimensionError("conv2d: spatial axis collapses to zero, input " + xs.str() +
                             " kernel " + std::to_string(ws.h) + "x" + std::to_string(ws.w));

    TensorT<T> y(Shape4{xs.n, ws.n, g.Ho, g.Wo});
    detail::conv2d_forward(g, x.data(), w.data(), b ? b->data() : nullptr, y.data());

    if (detail::want_record<T>({&x, &w, b ? &*b : &x})) {
        auto xi = x.impl(), wi = w.impl(), yi = y.impl();
        auto bi = b ? b->impl() : nullptr;
        TapeT<T>::current().record(yi, [g, xi, wi, bi, yi] {
            detail::conv2d_backward(
                g, xi->data.data(), wi->data.data(), yi->grad.data(),
                xi->requires_grad ? grad_buf(xi) : nullptr,
                wi->requires_grad ? grad_buf(wi) : nullptr,
                (bi && bi->requires_grad) ? grad_buf(bi) : nullptr);
        });
    }
    debug_check_finite(y, "conv2d");
    return y;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, std::nullopt_t, int stride,
                  int pad, int groups = 1) {
    return conv2d(x, w, std::optional<TensorT<T>>(), stride, pad, groups);
}

// -------------------------------------------------------------- pools -----

enum class PoolMode { Avg, Max };

// Full-control pooling used by the gather operators: explicit output size,
// top/left padding only on the leading edge, trailing coverage implied.
template <typename T>
TensorT<T> pool2d(const TensorT<T>& x, int kh, int kw, int stride, int padT,
                  int padL, int Ho, int Wo, PoolMode mode) {
    const Shape4& xs = x.shape();
    detail::PoolGeom g{xs.n, xs.c, xs.h, xs.w, kh, kw, stride, padT, padL, Ho, Wo};
    TensorT<T> y(Shape4{xs.n, xs.c, Ho, Wo});
    if (mode == PoolMode::Avg) {
        detail::pool_avg_forward(g, x.data(), y.data());
        if (detail::want_record<T>({&x})) {
            auto xi = x.impl(), yi = y.impl();
            TapeT<T>::current().record(yi, [g, xi, yi] {
                detail::pool_avg_backward(g, yi->grad.data(), grad_buf(xi));
            });
        }
    } else {
        auto argm = std::make_shared<std::vector<std::int32_t>>(
            static_cast<std::size_t>(y.numel()));
        detail::pool_max_forward(g, x.data(), y.data(), argm->data());
        if (detail::want_record<T>({&x})) {
            auto xi = x.impl(), yi = y.impl();
            TapeT<T>::current().record(yi, [g, xi, yi, argm] {
                detail::pool_max_backward(g, yi->grad.data(), argm->data(), grad_buf(xi));
            });
        }
    }
    debug_check_finite(y, "pool2d");
    return y;
}

template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& x, int k, int stride, int pad) {
    if (k < 1 || stride < 1 || pad < 0 || pad >= k)
        throw ConfigError("avg_pool2d: require k >= 1, stride >= 1, 0 <= pad < k");
    const int Ho = detail::conv_out_dim(x.shape().h, k, stride, pad);
    const int Wo = detail::conv_out_dim(x.shape().w, k, stride, pad);
    if (Ho < 1 || Wo < 1)
        throw DimensionError("avg_pool2d: output spatial axis collapses to zero");
    return pool2d(x, k, k, stride, pad, pad, Ho, Wo, PoolMode::Avg);
}

template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& x, int k, int stride, int pad) {
    if (k < 1 || stride < 1 || pad < 0 || pad >= k)
        throw ConfigError("max_pool2d: require k >= 1, stride >= 1, 0 <= pad < k");
    const int Ho = detail::conv_out_dim(x.shape().h, k, stride, pad);
    const int Wo = detail::conv_out_dim(x.shape().w, k, stride, pad);
    if (Ho < 1 || Wo < 1)
        throw DimensionError("max_pool2d: output spatial axis collapses to zero");
    return pool2d(x, k, k, stride, pad, pad, Ho, Wo, PoolMode::Max);
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
    return pool2d(x, x.shape().h, x.shape().w, 1, 0, 0, 1, 1, PoolMode::Avg);
}

template <typename T>
TensorT<T> global_max_pool(const TensorT<T>& x) {
    return pool2d(x, x.shape().h, x.shape().w, 1, 0, 0, 1, 1, PoolMode::Max);
}

// ------------------------------------------------------------- interp -----

// Upsampling only: out(u,v) = in(floor(u*H/outH), floor(v*W/outW)).
template <typename T>
TensorT<T> nearest_interpolate(const TensorT<T>& x, int outH, int outW) {
    const Shape4& xs = x.shape();
    if (outH < xs.h || outW < xs.w)
        throw ConfigError("nearest_interpolate: downsampling requested (" +
                          std::to_string(outH) + "x" + std::to_string(outW) +
                          " from " + std::to_string(xs.h) + "x" + std::to_string(xs.w) + ")");
    TensorT<T> y(Shape4{xs.n, xs.c, outH, outW});
    detail::interp_nearest_forward(xs.n, xs.c, xs.h, xs.w, outH, outW, x.data(), y.data());
    if (detail::want_record<T>({&x})) {
        auto xi = x.impl(), yi = y.impl();
        const int H = xs.h, W = xs.w, N = xs.n, C = xs.c;
        TapeT<T>::current().record(yi, [N, C, H, W, outH, outW, xi, yi] {
            detail::interp_nearest_backward(N, C, H, W, outH, outW, yi->grad.data(),
                                            grad_buf(xi));
        });
    }
    return y;
}

// -------------------------------------------------------- elementwise -----

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    TensorT<T> y(x.shape());
    detail::map_unary(x.numel(), x.data(), y.data(),
                      [](T v) { return T(1) / (T(1) + std::exp(-v)); });
    if (detail::want_record<T>({&x})) {
        auto xi = x.impl(), yi = y.impl();
        TapeT<T>::current().record(yi, [xi, yi] {
            const T* dy = yi->grad.data();
            const T* yv = yi->data.data();
            T* dx = grad_buf(xi);
            parallel_for(static_cast<std::int64_t>(yi->data.size()), 1 << 16,
                         [&](std::int64_t lo, std::int64_t hi) {
                             for (std::int64_t i = lo; i < hi; ++i)
                                 dx[i] += dy[i] * yv[i] * (T(1) - yv[i]);
                         });
        });
    }
    debug_check_finite(y, "sigmoid");
    return y;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> y(x.shape());
    detail::map_unary(x.numel(), x.data(), y.data(),
                      [](T v) { return v > T(0) ? v : T(0); });
    if (detail::want_record<T>({&x})) {
        auto xi = x.impl(), yi = y.impl();
        TapeT<T>::current().record(yi, [xi, yi] {
            const T* dy = yi->grad.data();
            const T* xv = xi->data.data();
            T* dx = grad_buf(xi);
            parallel_for(static_cast<std::int64_t>(yi->data.size()), 1 << 16,
                         [&](std::int64_t lo, std::int64_t hi) {
                             for (std::int64_t i = lo; i < hi; ++i)
                                 if (xv[i] > T(0)) dx[i] += dy[i];
                         });
        });
    }
    return y;
}

template <typename T>
TensorT<T> hadamard(const TensorT<T>& a, const TensorT<T>& b) {
    if (!(a.shape() == b.shape()))
        throw DimensionError("hadamard: shape mismatch " + a.shape().str() + " vs " +
                             b.shape().str());
    TensorT<T> y(a.shape());
    const T* av = a.data();
    const T* bv = b.data();
    T* yv = y.data();
    parallel_for(a.numel(), 1 << 16, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yv[i] = av[i] * bv[i];
    });
    if (detail::want_record<T>({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), yi = y.impl();
        TapeT<T>::current().record(yi, [ai, bi, yi] {
            const T* dy = yi->grad.data();
            const std::int64_t n = static_cast<std::int64_t>(yi->data.size());
            if (ai->requires_grad) {
                T* da = grad_buf(ai);
                const T* bv2 = bi->data.data();
                parallel_for(n, 1 << 16, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) da[i] += dy[i] * bv2[i];
                });
            }
            if (bi->requires_grad) {
                T* db = grad_buf(bi);
                const T* av2 = ai->data.data();
                parallel_for(n, 1 << 16, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) db[i] += dy[i] * av2[i];
                });
            }
        });
    }
    debug_check_finite(y, "hadamard");
    return y;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!(a.shape() == b.shape()))
        throw DimensionError("add: shape mismatch " + a.shape().str() + " vs " +
                             b.shape().str());
    TensorT<T> y(a.shape());
    const T* av = a.data();
    const T* bv = b.data();
    T* yv = y.data();
    parallel_for(a.numel(), 1 << 16, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yv[i] = av[i] + bv[i];
    });
    if (detail::want_record<T>({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), yi = y.impl();
        TapeT<T>::current().record(yi, [ai, bi, yi] {
            const T* dy = yi->grad.data();
            const std::int64_t n = static_cast<std::int64_t>(yi->data.size());
            for (const auto& ii : {ai, bi}) {
                if (!ii->requires_grad) continue;
                T* d = grad_buf(ii);
                parallel_for(n, 1 << 16, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) d[i] += dy[i];
                });
            }
        });
    }
    return y;
}

// ------------------------------------------------------------- linear -----

// x: (N, F, 1, 1), w: (Out, F, 1, 1), b: (1, Out, 1, 1).
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w,
                  const std::optional<TensorT<T>>& b) {
    const Shape4& xs = x.shape();
    const Shape4& ws = w.shape();
    if (xs.h != 1 || xs.w != 1)
        throw DimensionError("linear: expects (N,F,1,1) input, got " + xs.str());
    if (ws.c != xs.c)
        throw DimensionError("linear: feature axis mismatch, input " +
                             std::to_string(xs.c) + " vs weight " + std::to_string(ws.c));
    const int N = xs.n, F = xs.c, O = ws.n;
    TensorT<T> y(Shape4{N, O, 1, 1});
    const T* xv = x.data();
    const T* wv = w.data();
    const T* bv = b ? b->data() : nullptr;
    T* yv = y.data();
    for (int n = 0; n < N; ++n) {
        const T* xr = xv + static_cast<std::int64_t>(n) * F;
        for (int o = 0; o < O; ++o) {
            const T* wr = wv + static_cast<std::int64_t>(o) * F;
            T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            int f = 0;
            for (; f + 4 <= F; f += 4) {
                s0 += xr[f] * wr[f];
                s1 += xr[f + 1] * wr[f + 1];
                s2 += xr[f + 2] * wr[f + 2];
                s3 += xr[f + 3] * wr[f + 3];
            }
            for (; f < F; ++f) s0 += xr[f] * wr[f];
            yv[static_cast<std::int64_t>(n) * O + o] =
                ((s0 + s1) + (s2 + s3)) + (bv ? bv[o] : T(0));
        }
    }
    if (detail::want_record<T>({&x, &w, b ? &*b : &x})) {
        auto xi = x.impl(), wi = w.impl(), yi = y.impl();
        auto bi = b ? b->impl() : nullptr;
        TapeT<T>::current().record(yi, [N, F, O, xi, wi, bi, yi] {
            const T* dy = yi->grad.data();
            if (xi->requires_grad) {
                T* dx = grad_buf(xi);
                const T* wv2 = wi->data.data();
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) {
                        const T g = dy[static_cast<std::int64_t>(n) * O + o];
                        const T* wr = wv2 + static_cast<std::int64_t>(o) * F;
                        T* dxr = dx + static_cast<std::int64_t>(n) * F;
                        for (int f = 0; f < F; ++f) dxr[f] += g * wr[f];
                    }
            }
            if (wi->requires_grad) {
                T* dw = grad_buf(wi);
                const T* xv2 = xi->data.data();
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) {
                        const T g = dy[static_cast<std::int64_t>(n) * O + o];
                        const T* xr = xv2 + static_cast<std::int64_t>(n) * F;
                        T* dwr = dw + static_cast<std::int64_t>(o) * F;
                        for (int f = 0; f < F; ++f) dwr[f] += g * xr[f];
                    }
            }
            if (bi && bi->requires_grad) {
                T* db = grad_buf(bi);
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o)
                        db[o] += dy[static_cast<std::int64_t>(n) * O + o];
            }
        });
    }
    debug_check_finite(y, "linear");
    return y;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, std::nullopt_t) {
    return linear(x, w, std::optional<TensorT<T>>());
}

// ---------------------------------------------------------- batchnorm -----

// Functional batchnorm. In train mode, batch statistics normalize the input
// and the running buffers are updated in place (biased variance, momentum
// per the layer). In eval mode the running buffers are used; the caller is
// responsible for validating that they are populated.
template <typename T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma,
                       const TensorT<T>& beta, TensorT<T>& running_mean,
                       TensorT<T>& running_var, bool train, T momentum, T eps) {
    const Shape4& xs = x.shape();
    const int C = xs.c;
    if (gamma.numel() != C || beta.numel() != C)
        throw DimensionError("batchnorm2d: affine parameter channel axis mismatch for C=" +
                             std::to_string(C));
    TensorT<T> y(xs);
    if (!train) {
        detail::bn_forward_eval(xs.n, C, xs.plane(), x.data(), gamma.data(), beta.data(),
                                running_mean.data(), running_var.data(), eps, y.data());
        if (detail::want_record<T>({&x, &gamma, &beta})) {
            auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
            auto rm = running_mean.impl(), rv = running_var.impl();
            TapeT<T>::current().record(yi, [xs, xi, gi, bi, rm, rv, yi, eps] {
                const T* dy = yi->grad.data();
                const std::int64_t plane = xs.plane();
                const std::int64_t cs = static_cast<std::int64_t>(xs.c) * plane;
                for (int c = 0; c < xs.c; ++c) {
                    const T inv = T(1) / std::sqrt(rv->data[c] + eps);
                    const T k = gi->data[c] * inv;
                    double sdy = 0, sdyx = 0;
                    for (int n = 0; n < xs.n; ++n) {
                        const T* d = dy + n * cs + c * plane;
                        const T* xv = xi->data.data() + n * cs + c * plane;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            sdy += d[i];
                            sdyx += static_cast<double>(d[i]) * (xv[i] - rm->data[c]) * inv;
                        }
                    }
                    if (gi->requires_grad) grad_buf(gi)[c] += static_cast<T>(sdyx);
                    if (bi->requires_grad) grad_buf(bi)[c] += static_cast<T>(sdy);
                    if (xi->requires_grad) {
                        T* dx = grad_buf(xi);
                        for (int n = 0; n < xs.n; ++n) {
                            const T* d = dy + n * cs + c * plane;
                            T* o = dx + n * cs + c * plane;
                            for (std::int64_t i = 0; i < plane; ++i) o[i] += k * d[i];
                        }
                    }
                }
            });
        }
        return y;
    }

    auto xhat = std::make_shared<std::vector<T>>(x.vec().size());
    std::vector<T> mean(C), inv(C);
    detail::bn_forward_train(xs.n, C, xs.plane(), x.data(), gamma.data(), beta.data(),
                             eps, y.data(), xhat->data(), mean.data(), inv.data());
    // running-stat update is buffer state, not part of the differentiable graph
    for (int c = 0; c < C; ++c) {
        const T var = T(1) / (inv[c] * inv[c]) - eps;
        running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * mean[c];
        running_var.data()[c] =
            (T(1) - momentum) * running_var.data()[c] + momentum * std::max(var, T(0));
    }
    if (detail::want_record<T>({&x, &gamma, &beta})) {
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
        auto invs = std::make_shared<std::vector<T>>(inv);
        TapeT<T>::current().record(yi, [xs, xi, gi, bi, yi, xhat, invs] {
            detail::bn_backward_train(
                xs.n, xs.c, xs.plane(), yi->grad.data(), xhat->data(), gi->data.data(),
                invs->data(), xi->requires_grad ? grad_buf(xi) : nullptr,
                gi->requires_grad ? grad_buf(gi) : nullptr,
                bi->requires_grad ? grad_buf(bi) : nullptr);
        });
    }
    debug_check_finite(y, "batchnorm2d");
    return y;
}

// ----------------------------------------------------------- reductions ---

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
    TensorT<T> y(Shape4{1, 1, 1, 1});
    double acc = 0.0;
    for (const T& v : x.vec()) acc += v;
    y.data()[0] = static_cast<T>(acc);
    if (detail::want_record<T>({&x})) {
        auto xi = x.impl(), yi = y.impl();
        TapeT<T>::current().record(yi, [xi, yi] {
            const T g = yi->grad[0];
            T* dx = grad_buf(xi);
            for (std::size_t i = 0; i < xi->data.size(); ++i) dx[i] += g;
        });
    }
    return y;
}

// Mean cross-entropy over the batch from raw logits of shape (N, K, 1, 1).
template <typename T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
    const Shape4& s = logits.shape();
    if (s.h != 1 || s.w != 1)
        throw DimensionError("softmax_cross_entropy: expects (N,K,1,1) logits, got " + s.str());
    if (static_cast<int>(labels.size()) != s.n)
        throw DimensionError("softmax_cross_entropy: batch axis " + std::to_string(s.n) +
                             " vs " + std::to_string(labels.size()) + " labels");
    const int N = s.n, K = s.c;
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N) * K);
    double total = 0.0;
    const T* lv = logits.data();
    for (int n = 0; n < N; ++n) {
        const T* row = lv + static_cast<std::int64_t>(n) * K;
        const int lab = labels[n];
        if (lab < 0 || lab >= K)
            throw UsageError("softmax_cross_entropy: label " + std::to_string(lab) +
                             " out of range for " + std::to_string(K) + " classes");
        T m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        double se = 0.0;
        for (int k = 0; k < K; ++k) se += std::exp(static_cast<double>(row[k] - m));
        const double lse = static_cast<double>(m) + std::log(se);
        for (int k = 0; k < K; ++k)
            (*probs)[static_cast<std::size_t>(n) * K + k] =
                static_cast<T>(std::exp(static_cast<double>(row[k]) - lse));
        total += lse - static_cast<double>(row[lab]);
    }
    TensorT<T> loss(Shape4{1, 1, 1, 1});
    loss.data()[0] = static_cast<T>(total / N);
    if (detail::want_record<T>({&logits})) {
        auto li = logits.impl(), yi = loss.impl();
        auto labs = std::make_shared<std::vector<int>>(labels);
        TapeT<T>::current().record(yi, [N, K, li, yi, probs, labs] {
            const T g = yi->grad[0] / static_cast<T>(N);
            T* dl = grad_buf(li);
            for (int n = 0; n < N; ++n) {
                const std::size_t base = static_cast<std::size_t>(n) * K;
                for (int k = 0; k < K; ++k) dl[base + k] += g * (*probs)[base + k];
                dl[base + (*labs)[n]] -= g;
            }
        });
    }
    debug_check_finite(loss, "softmax_cross_entropy");
    return loss;
}

}  // namespace gex
