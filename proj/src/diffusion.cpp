#include "latdial/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "latdial/errors.hpp"

namespace latdial {

NoiseSchedule build_sqrt_schedule(int steps, double offset) {
    if (steps < 1) throw ConfigError("diffusion_steps must be >= 1");
    if (!(offset > 0.0 && offset < 1.0)) throw ConfigError("schedule_offset must lie in (0, 1)");
    NoiseSchedule s;
    s.steps = steps;
    s.offset = offset;
    s.alpha_bar.resize(static_cast<std::size_t>(steps) + 1);
    s.beta.assign(static_cast<std::size_t>(steps) + 1, 0.0);
    s.alpha.assign(static_cast<std::size_t>(steps) + 1, 1.0);
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= steps; ++t) {
        const double ab = 1.0 - std::sqrt(static_cast<double>(t) / steps + offset);
        s.alpha_bar[static_cast<std::size_t>(t)] = std::clamp(ab, 1e-5, 1.0 - 1e-12);
    }
    for (std::size_t t = 1; t <= static_cast<std::size_t>(steps); ++t) {
        s.beta[t] = std::min(1.0 - s.alpha_bar[t] / s.alpha_bar[t - 1], 0.999);
        s.alpha[t] = 1.0 - s.beta[t];
    }
    return s;
}

Tensor q_sample(const Tensor& z0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule) {
    if (eps.shape() != z0.shape()) throw DimensionError("q_sample: noise shape differs from z0");
    if (t.size() != z0.dim(0)) throw DimensionError("q_sample: one timestep per row required");
    std::vector<real> signal(t.size()), noise(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] < 1 || t[i] > schedule.steps)
            throw ContractError("q_sample: timestep " + std::to_string(t[i]) + " outside [1, " +
                                std::to_string(schedule.steps) + "]");
        const double ab = schedule.alpha_bar[static_cast<std::size_t>(t[i])];
        signal[i] = static_cast<real>(std::sqrt(ab));
        noise[i] = static_cast<real>(std::sqrt(1.0 - ab));
    }
    return scale_rows(z0, signal) + scale_rows(eps, noise);
}

Tensor ld_loss(const Tensor& z_pred, const Tensor& z0) { return mse(z_pred, z0); }

std::vector<real> timestep_embedding(int t, std::size_t dim) {
    const std::size_t half = dim / 2;
    std::vector<real> out(dim, real(0));
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out[i] = static_cast<real>(std::sin(t * freq));
        out[half + i] = static_cast<real>(std::cos(t * freq));
    }
    return out;
}

std::vector<int> sampling_timesteps(int steps, int n_steps) {
    if (n_steps < 1 || n_steps > steps)
        throw ConfigError("sampling steps must lie in [1, " + std::to_string(steps) + "], got " +
                          std::to_string(n_steps));
    std::vector<int> ts;
    if (n_steps == 1) return {steps};
    for (int i = n_steps - 1; i >= 0; --i) {
        const double pos = 1.0 + static_cast<double>(steps - 1) * i / (n_steps - 1);
        const int t = static_cast<int>(std::lround(pos));
        if (ts.empty() || t < ts.back()) ts.push_back(t);
    }
    return ts;
}

Denoiser::Denoiser(ParamSet& ps, const std::string& path, const DenoiserConfig& cfg, std::size_t latent_dim,
                   Rng& rng)
    : cfg_(cfg), latent_dim_(latent_dim) {
    if (cfg.heads == 0 || cfg.d_model % cfg.heads != 0) throw ConfigError("denoiser_heads must divide d_model");
    if (cfg.time_dim < 2 || cfg.time_dim % 2 != 0) throw ConfigError("time_dim must be even");
    in_proj_ = Linear::make(ps, path + ".in", latent_dim, cfg.d_model, rng);
    time_proj_ = Linear::make(ps, path + ".time", cfg.time_dim, cfg.d_model, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l)
        layers_.push_back(DecoderLayer::make(ps, path + ".l" + std::to_string(l), cfg.d_model, cfg.heads, cfg.ffn, rng));
    ln_final_ = LayerNorm::make(ps, path + ".ln_final", cfg.d_model);
    out_proj_ = Linear::make(ps, path + ".out", cfg.d_model, latent_dim, rng);
}

Tensor Denoiser::operator()(const Tensor& z_t, std::span<const int> t, const Tensor& context,
                            std::span<const std::uint8_t> context_mask) const {
    const std::size_t batch = z_t.dim(0);
    if (t.size() != batch) throw DimensionError("denoiser: one timestep per row required");
    std::vector<real> temb;
    temb.reserve(batch * cfg_.time_dim);
    for (int ti : t) {
        auto e = timestep_embedding(ti, cfg_.time_dim);
        temb.insert(temb.end(), e.begin(), e.end());
    }
    const Tensor te = Tensor::from({batch, cfg_.time_dim}, std::move(temb));
    Tensor h = reshape(in_proj_(z_t) + time_proj_(te), {batch, 1, cfg_.d_model});

    const std::vector<std::uint8_t> self_valid(batch, 1);
    const auto self_mask = AttentionMask::from_key_padding(batch, 1, 1, self_valid);
    const auto cross_mask = AttentionMask::from_key_padding(batch, 1, context.dim(1), context_mask);
    for (const auto& layer : layers_) h = layer(h, Tensor{}, Tensor{}, self_mask, context, cross_mask);
    return out_proj_(reshape(ln_final_(h), {batch, cfg_.d_model}));
}

Tensor sample_latent(const DenoiseFn& denoise, std::size_t batch, std::size_t dim, const NoiseSchedule& schedule,
                     const SamplerOptions& options, SamplerTrace* trace) {
    if (!(options.eta >= 0.0 && options.eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
    const auto ts = sampling_timesteps(schedule.steps, options.n_steps);
    Rng rng(options.seed);
    auto gaussian = [&](std::size_t n) {
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<real> v(n);
        for (real& x : v) x = static_cast<real>(dist(rng));
        return v;
    };

    std::vector<real> z = gaussian(batch * dim);
    Tensor z0_hat;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        if (trace) trace->visited.push_back(t);
        z0_hat = denoise(Tensor::from({batch, dim}, z), t);
        if (i + 1 == ts.size()) break;

        const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
        const double ab_next = schedule.alpha_bar[static_cast<std::size_t>(ts[i + 1])];
        const double keep = std::sqrt(1.0 - options.eta * options.eta);
        std::vector<real> fresh = options.eta > 0.0 ? gaussian(batch * dim) : std::vector<real>{};
        const auto pred = z0_hat.data();
        for (std::size_t j = 0; j < z.size(); ++j) {
            const double eps_hat = (z[j] - std::sqrt(ab) * pred[j]) / std::sqrt(1.0 - ab);
            double noise = keep * eps_hat;
            if (options.eta > 0.0) noise += options.eta * fresh[j];
            z[j] = static_cast<real>(std::sqrt(ab_next) * pred[j] + std::sqrt(1.0 - ab_next) * noise);
        }
    }
    if (trace) trace->last_prediction = z0_hat;
    return z0_hat;
}

}  // namespace latdial
