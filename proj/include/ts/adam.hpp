#pragma once

#include "ts/autodiff.hpp"

namespace ts::nn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment accumulators mirroring the parameter shapes.
template <class T>
struct AdamState {
    AdamConfig cfg;
    int64_t step = 0;
    std::vector<TensorT<T>> m;
    std::vector<TensorT<T>> v;

    explicit AdamState(AdamConfig c = {}) : cfg(c) {}
};

// One Adam update with bias correction. Parameters are updated in place;
// the state's step increments by exactly 1.
template <class T>
void adam_step(std::vector<TensorT<T>*> params, std::vector<const TensorT<T>*> grads,
               AdamState<T>& st) {
    if (params.size() != grads.size())
        throw ContractError("adam_step: params/grads count mismatch");
    if (st.m.empty()) {
        for (auto* p : params) {
            st.m.emplace_back(p->shape, T(0));
            st.v.emplace_back(p->shape, T(0));
        }
    }
    if (st.m.size() != params.size()) throw ContractError("adam_step: state size mismatch");
    st.step += 1;
    double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
    double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (size_t i = 0; i < params.size(); ++i) {
        TensorT<T>& p = *params[i];
        const TensorT<T>& g = *grads[i];
        if (p.shape != g.shape || p.shape != st.m[i].shape)
            throw ContractError("adam_step: shape mismatch on parameter " + std::to_string(i));
        T* pd = p.ptr();
        const T* gd = g.ptr();
        T* md = st.m[i].ptr();
        T* vd = st.v[i].ptr();
        for (int64_t j = 0; j < p.numel(); ++j) {
            double gj = static_cast<double>(gd[j]);
            double mj = b1 * static_cast<double>(md[j]) + (1.0 - b1) * gj;
            double vj = b2 * static_cast<double>(vd[j]) + (1.0 - b2) * gj * gj;
            md[j] = static_cast<T>(mj);
            vd[j] = static_cast<T>(vj);
            double mhat = mj / bc1;
            double vhat = vj / bc2;
            pd[j] = static_cast<T>(static_cast<double>(pd[j]) -
                                   st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps));
        }
    }
}

// Convenience for graph parameters: uses each node's accumulated gradient.
// Parameters with no gradient this step are treated as zero-gradient.
template <class T>
void adam_step(const std::vector<VarT<T>>& params, AdamState<T>& st) {
    std::vector<TensorT<T>*> ps;
    std::vector<TensorT<T>> zero_storage;
    std::vector<const TensorT<T>*> gs;
    ps.reserve(params.size());
    zero_storage.reserve(params.size());
    for (auto& p : params) {
        ps.push_back(&p->value);
        if (p->has_grad()) {
            gs.push_back(&p->grad);
        } else {
            zero_storage.emplace_back(p->value.shape, T(0));
            gs.push_back(&zero_storage.back());
        }
    }
    adam_step(std::move(ps), std::move(gs), st);
}

}  // namespace ts::nn
