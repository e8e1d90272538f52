#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "latdial/tensor.hpp"

namespace latdial {

// Named, ordered collection of trainable leaf tensors. Paths are unique.
class ParamSet {
  public:
    Tensor& add(const std::string& path, Tensor t);
    const Tensor& get(const std::string& path) const;
    Tensor& get(const std::string& path);
    bool contains(const std::string& path) const;

    std::size_t size() const { return items_.size(); }
    std::size_t total_numel() const;
    void zero_grad();

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

  private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::map<std::string, std::size_t> index_;
};

struct AdamWConfig {
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real eps = real(1e-8);
    real weight_decay = real(0.01);
};

struct OptimizerState {
    std::uint64_t step = 0;
    // First and second moments keyed by parameter path.
    std::map<std::string, std::vector<real>> m;
    std::map<std::string, std::vector<real>> v;
};

// Decoupled-weight-decay Adam: p <- p(1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps).
// Parameters without a gradient are treated as having a zero gradient.
void adamw_step(ParamSet& params, OptimizerState& state, const AdamWConfig& cfg, real lr_now);

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
real clip_grad_norm(ParamSet& params, real max_norm);

}  // namespace latdial
