#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gex/error.hpp"

namespace gex {

// Dense rank-4 shape (batch N, channels C, height H, width W). Rank-2 data
// (e.g. classifier features) travels as (N, F, 1, 1).
struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    std::int64_t plane() const { return static_cast<std::int64_t>(h) * w; }
    bool operator==(const Shape4&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

template <typename T>
struct TensorImplT {
    Shape4 shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // empty until first accumulation
};

template <typename T>
class TapeT;

// Value-semantic handle onto a shared dense buffer. Row-major (n,c,h,w).
// Immutable after construction except through optimizer steps and explicit
// mutable access in non-differentiable code paths.
template <typename T>
class TensorT {
public:
    using value_type = T;
    using Impl = TensorImplT<T>;

    TensorT() = default;

    explicit TensorT(Shape4 s, T fill = T(0), bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
            throw DimensionError("tensor shape has a negative axis: " + s.str());
        impl_->shape = s;
        impl_->data.assign(static_cast<std::size_t>(s.numel()), fill);
        impl_->requires_grad = requires_grad;
    }

    static TensorT zeros(Shape4 s, bool requires_grad = false) {
        return TensorT(s, T(0), requires_grad);
    }
    static TensorT full(Shape4 s, T v, bool requires_grad = false) {
        return TensorT(s, v, requires_grad);
    }
    static TensorT from_vector(Shape4 s, std::vector<T> v, bool requires_grad = false) {
        TensorT t;
        t.impl_ = std::make_shared<Impl>();
        if (static_cast<std::int64_t>(v.size()) != s.numel())
            throw DimensionError("data length " + std::to_string(v.size()) +
                                 " does not match shape " + s.str());
        t.impl_->shape = s;
        t.impl_->data = std::move(v);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape4& shape() const { return impl_->shape; }
    std::int64_t numel() const { return impl_->shape.numel(); }

    T* data() { return impl_->data.data(); }
    const T* data() const { return impl_->data.data(); }
    std::vector<T>& vec() { return impl_->data; }
    const std::vector<T>& vec() const { return impl_->data; }

    T& at(int n, int c, int y, int x) {
        const Shape4& s = impl_->shape;
        return impl_->data[((static_cast<std::int64_t>(n) * s.c + c) * s.h + y) * s.w + x];
    }
    const T& at(int n, int c, int y, int x) const {
        const Shape4& s = impl_->shape;
        return impl_->data[((static_cast<std::int64_t>(n) * s.c + c) * s.h + y) * s.w + x];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    // Grad buffer, allocated (zero) on demand.
    std::vector<T>& grad() {
        auto& g = impl_->grad;
        if (g.empty()) g.assign(impl_->data.size(), T(0));
        return g;
    }
    const std::vector<T>* grad_if() const {
        return impl_->grad.empty() ? nullptr : &impl_->grad;
    }
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad() {
        if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    // Deep copy detached from any tape history.
    TensorT clone() const {
        TensorT t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    const std::shared_ptr<Impl>& impl() const { return impl_; }

private:
    std::shared_ptr<Impl> impl_;
};

// Zero-initialized grad buffer on a raw impl; helper for backward closures.
template <typename T>
inline T* grad_buf(const std::shared_ptr<TensorImplT<T>>& impl) {
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
    return impl->grad.data();
}

// Reverse-mode tape. One per thread per scalar type; each differentiable op
// executed while recording appends one node. Records are in execution order,
// which is already topological. backward() walks the records once in reverse
// and then consumes the tape.
template <typename T>
class TapeT {
public:
    struct Node {
        std::shared_ptr<TensorImplT<T>> out;
        std::function<void()> fn;
    };

    static TapeT& current() {
        thread_local TapeT tape;
        return tape;
    }

    bool recording() const { return disable_depth_ == 0; }

    void record(std::shared_ptr<TensorImplT<T>> out, std::function<void()> fn) {
        out->requires_grad = true;
        nodes_.push_back(Node{std::move(out), std::move(fn)});
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and propagates. Nodes are released as soon
    // as they have run so activation memory drains during the walk.
    void backward(const TensorT<T>& loss) {
        if (!loss.defined() || loss.numel() != 1)
            throw UsageError("backward requires a scalar loss, got shape " +
                             (loss.defined() ? loss.shape().str() : std::string("undefined")));
        grad_buf(loss.impl())[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->fn && !it->out->grad.empty()) it->fn();
            it->fn = nullptr;
            it->out.reset();
        }
        nodes_.clear();
    }

    struct NoGrad {
        NoGrad() { ++TapeT::current().disable_depth_; }
        ~NoGrad() { --TapeT::current().disable_depth_; }
        NoGrad(const NoGrad&) = delete;
        NoGrad& operator=(const NoGrad&) = delete;
    };

private:
    std::vector<Node> nodes_;
    int disable_depth_ = 0;
};

template <typename T>
void backward(const TensorT<T>& loss) {
    TapeT<T>::current().backward(loss);
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using NoGrad = typename TapeT<float>::NoGrad;

// Forward results on finite inputs must stay finite; cheap to verify in
// debug builds, compiled out in release.
template <typename T>
inline void debug_check_finite(const TensorT<T>& t, const char* where) {
#ifndef NDEBUG
    for (const T& v : t.vec()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite value produced by ") + where);
    }
#else
    (void)t;
    (void)where;
#endif
}

}  // namespace gex
