#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gex/ops.hpp"
#include "gex/rng.hpp"
#include "gex/tensor.hpp"

namespace gex {

// Named tensor registry for one model. Parameters are learnable (grads,
// optimizer state, cost-model lines); buffers are persistent state such as
// batchnorm running statistics. Names are hierarchical
// (stage2.block0.conv1.weight) and unique; creation order is the
// checkpoint/optimizer order.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
    };

    Tensor add_param(const std::string& name, Shape4 shape) {
        check_unique(name);
        Tensor t(shape, 0.0f, true);
        params_.push_back({name, t});
        index_[name] = {true, params_.size() - 1};
        return t;
    }

    Tensor add_buffer(const std::string& name, Shape4 shape, float fill) {
        check_unique(name);
        Tensor t(shape, fill, false);
        buffers_.push_back({name, t});
        index_[name] = {false, buffers_.size() - 1};
        return t;
    }

    const std::vector<Entry>& params() const { return params_; }
    const std::vector<Entry>& buffers() const { return buffers_; }

    Tensor* find(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) return nullptr;
        return it->second.first ? &params_[it->second.second].tensor
                                : &buffers_[it->second.second].tensor;
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& e : params_) n += e.tensor.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : params_) e.tensor.zero_grad();
    }

private:
    void check_unique(const std::string& name) {
        if (index_.count(name))
            throw ConfigError("duplicate parameter name: " + name);
    }
    std::vector<Entry> params_, buffers_;
    std::unordered_map<std::string, std::pair<bool, std::size_t>> index_;
};

namespace init {

// He fan-in normal for conv/linear weights; biases zero; bn gamma=1, beta=0.
inline void he_normal(Tensor& w, int fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / fan_in);
    for (auto& v : w.vec()) v = static_cast<float>(rng.normal() * stddev);
}

}  // namespace init

struct Conv2d {
    Tensor w;
    std::optional<Tensor> b;
    int stride = 1, pad = 0, groups = 1;

    Conv2d() = default;
    Conv2d(ParamStore& store, const std::string& prefix, int cin, int cout, int kh,
           int kw, int stride_, int pad_, int groups_, bool bias, Rng& rng)
        : stride(stride_), pad(pad_), groups(groups_) {
        w = store.add_param(prefix + ".weight", Shape4{cout, cin / groups_, kh, kw});
        init::he_normal(w, (cin / groups_) * kh * kw, rng);
        if (bias) b = store.add_param(prefix + ".bias", Shape4{1, cout, 1, 1});
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad, groups); }
};

struct BatchNorm2d {
    Tensor gamma, beta, running_mean, running_var;
    float eps = 1e-5f;
    float momentum = 0.1f;

    BatchNorm2d() = default;
    BatchNorm2d(ParamStore& store, const std::string& prefix, int channels) {
        gamma = store.add_param(prefix + ".gamma", Shape4{1, channels, 1, 1});
        beta = store.add_param(prefix + ".beta", Shape4{1, channels, 1, 1});
        std::fill(gamma.vec().begin(), gamma.vec().end(), 1.0f);
        running_mean = store.add_buffer(prefix + ".running_mean", Shape4{1, channels, 1, 1}, 0.0f);
        running_var = store.add_buffer(prefix + ".running_var", Shape4{1, channels, 1, 1}, 1.0f);
    }

    Tensor forward(const Tensor& x, bool train) {
        if (!train && (!running_mean.defined() || !running_var.defined() ||
                       running_mean.numel() != x.shape().c))
            throw StateError("batchnorm eval forward without populated running statistics");
        return batchnorm2d(x, gamma, beta, running_mean, running_var, train, momentum, eps);
    }
};

struct Linear {
    Tensor w, b;

    Linear() = default;
    Linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng) {
        w = store.add_param(prefix + ".weight", Shape4{out, in, 1, 1});
        b = store.add_param(prefix + ".bias", Shape4{1, out, 1, 1});
        init::he_normal(w, in, rng);
    }

    Tensor forward(const Tensor& x) const { return linear(x, w, std::optional<Tensor>(b)); }
};

// SGD with momentum and decoupled-from-nothing weight decay (L2 into the
// velocity):   v <- momentum*v + grad + wd*param;  param <- param - lr*v.
// Grads are zeroed after the step. Velocity buffers align with the store's
// parameter order and are checkpointed by name.
class SGD {
public:
    explicit SGD(const ParamStore& store, float momentum, float weight_decay)
        : momentum_(momentum), weight_decay_(weight_decay) {
        velocity_.resize(store.params().size());
        for (std::size_t i = 0; i < velocity_.size(); ++i)
            velocity_[i].assign(static_cast<std::size_t>(store.params()[i].tensor.numel()), 0.0f);
    }

    void step(ParamStore& store, float lr) {
        auto& entries = const_cast<std::vector<ParamStore::Entry>&>(store.params());
        for (std::size_t i = 0; i < entries.size(); ++i) {
            Tensor& p = entries[i].tensor;
            if (!p.has_grad())
                throw StateError("sgd_step: parameter " + entries[i].name +
                                 " has no gradient; run backward first");
            const std::vector<float>& g = *p.grad_if();
            std::vector<float>& v = velocity_[i];
            float* pv = p.data();
            for (std::size_t j = 0; j < v.size(); ++j) {
                v[j] = momentum_ * v[j] + g[j] + weight_decay_ * pv[j];
                pv[j] -= lr * v[j];
            }
            p.zero_grad();
        }
    }

    float momentum() const { return momentum_; }
    float weight_decay() const { return weight_decay_; }
    std::vector<std::vector<float>>& velocity() { return velocity_; }
    const std::vector<std::vector<float>>& velocity() const { return velocity_; }

private:
    float momentum_, weight_decay_;
    std::vector<std::vector<float>> velocity_;
};

}  // namespace gex
