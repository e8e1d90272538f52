#include "latdial/optim.hpp"

#include <cmath>

#include "latdial/errors.hpp"

namespace latdial {

Tensor& ParamSet::add(const std::string& path, Tensor t) {
    if (index_.count(path)) throw ContractError("duplicate parameter path " + path);
    index_[path] = items_.size();
    items_.emplace_back(path, std::move(t));
    return items_.back().second;
}

const Tensor& ParamSet::get(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw IndexError("unknown parameter " + path);
    return items_[it->second].second;
}

Tensor& ParamSet::get(const std::string& path) {
    auto it = index_.find(path);
    if (it == index_.end()) throw IndexError("unknown parameter " + path);
    return items_[it->second].second;
}

bool ParamSet::contains(const std::string& path) const { return index_.count(path) != 0; }

std::size_t ParamSet::total_numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.numel();
    return n;
}

void ParamSet::zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
}

void adamw_step(ParamSet& params, OptimizerState& state, const AdamWConfig& cfg, real lr_now) {
    if (!(lr_now > 0)) throw ContractError("adamw_step needs a positive learning rate");
    state.step += 1;
    const real t = static_cast<real>(state.step);
    const real bc1 = real(1) - std::pow(cfg.beta1, t);
    const real bc2 = real(1) - std::pow(cfg.beta2, t);
    for (auto& [path, p] : params) {
        auto& m = state.m[path];
        auto& v = state.v[path];
        if (m.empty()) {
            m.assign(p.numel(), real(0));
            v.assign(p.numel(), real(0));
        }
        if (m.size() != p.numel()) throw DimensionError("optimizer moments do not match parameter " + path);
        auto data = p.mutable_data();
        const auto grad = p.grad();
        const bool has_grad = !grad.empty();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const real g = has_grad ? grad[i] : real(0);
            m[i] = cfg.beta1 * m[i] + (real(1) - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (real(1) - cfg.beta2) * g * g;
            const real mhat = m[i] / bc1;
            const real vhat = v[i] / bc2;
            data[i] *= real(1) - lr_now * cfg.weight_decay;
            data[i] -= lr_now * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

real clip_grad_norm(ParamSet& params, real max_norm) {
    real sq = 0;
    for (const auto& [_, p] : params)
        for (real g : p.grad()) sq += g * g;
    const real norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const real f = max_norm / norm;
        for (auto& [_, p] : params) {
            if (!p.has_grad()) continue;
            for (real& g : p.mutable_grad()) g *= f;
        }
    }
    return norm;
}

}  // namespace latdial
