#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "latdial/layers.hpp"
#include "latdial/tensor.hpp"

namespace latdial {

// Cumulative signal levels alpha_bar[0..T] with alpha_bar[0] = 1, and the
// per-step beta[t], alpha[t] for t in 1..T (index 0 unused).
struct NoiseSchedule {
    int steps = 0;
    double offset = 0;
    std::vector<double> alpha_bar;
    std::vector<double> beta;
    std::vector<double> alpha;
};

// alpha_bar_t = 1 - sqrt(t/T + s), clipped to [1e-5, 1); beta_t derived from
// consecutive ratios and capped at 0.999.
NoiseSchedule build_sqrt_schedule(int steps, double offset = 1e-4);

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, one t per row.
// Differentiable in z0; eps is treated as a constant.
Tensor q_sample(const Tensor& z0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule);

// Mean squared error between the predicted and posterior latents.
Tensor ld_loss(const Tensor& z_pred, const Tensor& z0);

// Sinusoidal embedding of timestep t: [sin(t w_0..), cos(t w_0..)].
std::vector<real> timestep_embedding(int t, std::size_t dim);

// Evenly spaced timesteps over [1, T] including both ends, rounded,
// deduplicated and returned in decreasing order.
std::vector<int> sampling_timesteps(int steps, int n_steps);

struct DenoiserConfig {
    std::size_t layers = 1;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t ffn = 128;
    std::size_t time_dim = 128;
};

// Transformer-decoder denoiser over a single latent position. Predicts z0.
class Denoiser {
  public:
    Denoiser() = default;
    Denoiser(ParamSet& ps, const std::string& path, const DenoiserConfig& cfg, std::size_t latent_dim, Rng& rng);

    // z_t [B, latent], one timestep per row, context [B, Lc, d] with its
    // key-valid mask [B * Lc]. Returns z0 predictions [B, latent].
    Tensor operator()(const Tensor& z_t, std::span<const int> t, const Tensor& context,
                      std::span<const std::uint8_t> context_mask) const;

    const DenoiserConfig& config() const { return cfg_; }

  private:
    DenoiserConfig cfg_;
    std::size_t latent_dim_ = 0;
    Linear in_proj_, time_proj_, out_proj_;
    std::vector<DecoderLayer> layers_;
    LayerNorm ln_final_;
};

struct SamplerOptions {
    int n_steps = 50;
    double eta = 0.0;
    std::uint64_t seed = 0;
};

// Inference-side denoiser call: (z_t, t) -> predicted z0, context bound.
using DenoiseFn = std::function<Tensor(const Tensor& z_t, int t)>;

struct SamplerTrace {
    std::vector<int> visited;
    Tensor last_prediction;
};

// Reverse process over sampling_timesteps(T, n_steps). From z_T ~ N(0, I):
//   z0_hat = denoise(z_t, t)
//   z_prev = sqrt(ab') z0_hat + sqrt(1 - ab') (sqrt(1 - eta^2) eps_hat + eta noise)
// where eps_hat is the noise implied by (z_t, z0_hat). eta = 0 is
// deterministic DDIM, eta = 1 re-noises with fresh Gaussian noise at every
// step. The last step returns z0_hat itself (alpha_bar_0 = 1).
Tensor sample_latent(const DenoiseFn& denoise, std::size_t batch, std::size_t dim, const NoiseSchedule& schedule,
                     const SamplerOptions& options, SamplerTrace* trace = nullptr);

}  // namespace latdial
