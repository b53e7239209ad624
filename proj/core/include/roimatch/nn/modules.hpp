// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "roimatch/nn/ops.hpp"

namespace roimatch::nn {

// Named leaf parameters; the registry is the single source of truth for the
// optimizer and for checkpoint serialization.
template <typename T>
class ParamStore {
public:
    Var<T> add(const std::string& name, Tensor<T> init) {
        for (const auto& [n, v] : entries_) {
            if (n == name) throw UsageError("duplicate parameter name: " + name);
        }
        Var<T> p = make_leaf(std::move(init), /*needs_grad=*/true);
        p->needs_grad = true;  // leaves stay trainable even under NoGradGuard
        entries_.push_back({name, p});
        return p;
    }

    const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }

    Var<T> find(const std::string& name) const {
        for (const auto& [n, v] : entries_) {
            if (n == name) return v;
        }
        throw UsageError("unknown parameter: " + name);
    }

    void zero_grad() {
        for (auto& [n, v] : entries_) {
            if (v->grad.numel() > 0) std::fill(v->grad.data.begin(), v->grad.data.end(), T(0));
        }
    }

    int64_t total_parameters() const {
        int64_t n = 0;
        for (const auto& [name, v] : entries_) n += v->val.numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, Var<T>>> entries_;
};

template <typename T>
struct Conv2dLayer {
    Var<T> w;
    Var<T> b;  // null when bias-free
    int stride = 1;
    int pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int stride_,
                int pad_, bool bias, Rng& rng)
        : stride(stride_), pad(pad_) {
        Tensor<T> wt({cout, cin, k, k});
        wt.fill_normal(rng, static_cast<T>(std::sqrt(2.0 / (static_cast<double>(cin) * k * k))));
        w = ps.add(name + ".w", std::move(wt));
        if (bias) b = ps.add(name + ".b", Tensor<T>({cout}));
    }

    Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct LinearLayer {
    Var<T> w;
    Var<T> b;

    LinearLayer() = default;
    LinearLayer(ParamStore<T>& ps, const std::string& name, int din, int dout, bool bias, Rng& rng) {
        Tensor<T> wt({dout, din});
        const T limit = static_cast<T>(std::sqrt(6.0 / (din + dout)));
        wt.fill_uniform(rng, -limit, limit);
        w = ps.add(name + ".w", std::move(wt));
        if (bias) b = ps.add(name + ".b", Tensor<T>({dout}));
    }

    Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct LayerNormLayer {
    Var<T> gamma;
    Var<T> beta;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStore<T>& ps, const std::string& name, int dim) {
        gamma = ps.add(name + ".gamma", Tensor<T>::full({dim}, T(1)));
        beta = ps.add(name + ".beta", Tensor<T>({dim}));
    }

    Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta); }
};

// Decoupled-weight-decay variant of adaptive moment estimation.
template <typename T>
class AdamW {
public:
    explicit AdamW(std::vector<Var<T>> params, T lr = T(1e-4), T weight_decay = T(1e-4),
                   T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2),
          eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.push_back(Tensor<T>::zeros(p->val.shape));
            v_.push_back(Tensor<T>::zeros(p->val.shape));
        }
    }

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

    // Scales all gradients so the global L2 norm is at most max_norm; returns
    // the pre-clip norm.
    T clip_global_norm(T max_norm) {
        double sq = 0.0;
        for (const auto& p : params_) {
            if (p->grad.numel() == 0) continue;
            for (int64_t i = 0; i < p->grad.numel(); ++i) {
                sq += static_cast<double>(p->grad[i]) * static_cast<double>(p->grad[i]);
            }
        }
        const double norm = std::sqrt(sq);
        if (norm > static_cast<double>(max_norm) && norm > 0.0) {
            const T scale = static_cast<T>(static_cast<double>(max_norm) / norm);
            for (const auto& p : params_) {
                for (int64_t i = 0; i < p->grad.numel(); ++i) p->grad[i] *= scale;
            }
        }
        return static_cast<T>(norm);
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), t_));
        const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), t_));
        for (size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (p->grad.numel() == 0) p->ensure_grad();
            for (int64_t i = 0; i < p->val.numel(); ++i) {
                const T g = p->grad[i];
                m_[k][i] = beta1_ * m_[k][i] + (T(1) - beta1_) * g;
                v_[k][i] = beta2_ * v_[k][i] + (T(1) - beta2_) * g * g;
                const T mhat = m_[k][i] / bc1;
                const T vhat = v_[k][i] / bc2;
                p->val[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p->val[i]);
            }
        }
    }

private:
    std::vector<Var<T>> params_;
    std::vector<Tensor<T>> m_, v_;
    T lr_, wd_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace roimatch::nn
