#include <cmath>
#include <random>

#include "doctest.h"
#include "finite_diff.hpp"
#include "latdial/diffusion.hpp"
#include "latdial/errors.hpp"
#include "latdial/model.hpp"

using namespace latdial;

TEST_CASE("sqrt schedule shape") {
    for (int T : {10, 100, 1000, 2000}) {
        const NoiseSchedule s = build_sqrt_schedule(T);
        CHECK(s.alpha_bar.size() == static_cast<std::size_t>(T) + 1);
        CHECK(s.alpha_bar[0] == 1.0);
        for (int t = 1; t <= T; ++t) {
            CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            CHECK(s.beta[t] > 0.0);
            CHECK(s.beta[t] <= 0.999);
            CHECK(s.alpha[t] == doctest::Approx(1.0 - s.beta[t]));
        }
        CHECK(s.alpha_bar[T] < 1e-3);
        CHECK(s.alpha_bar[1] == doctest::Approx(1.0 - std::sqrt(1.0 / T + 1e-4)));
    }
    CHECK_THROWS_AS(build_sqrt_schedule(0), ConfigError);
    CHECK_THROWS_AS(build_sqrt_schedule(10, 0.0), ConfigError);
}

TEST_CASE("products of alpha recover alpha_bar below the cap") {
    const NoiseSchedule s = build_sqrt_schedule(200);
    double prod = 1.0;
    for (int t = 1; t < 200; ++t) {
        prod *= s.alpha[t];
        CHECK(prod == doctest::Approx(s.alpha_bar[t]).epsilon(1e-9));
    }
}

TEST_CASE("q_sample") {
    const NoiseSchedule s = build_sqrt_schedule(50);
    const Tensor z0 = Tensor::from({2, 3}, {1, 2, 3, -1, 0.5, 0}, true);
    const std::vector<int> t{5, 40};
    const Tensor eps = Tensor::from({2, 3}, {0.1, -0.2, 0.3, 1, 1, 1});
    const Tensor zt = q_sample(z0, t, eps, s);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < 3; ++j) {
            const double ab = s.alpha_bar[t[r]];
            CHECK(zt.at(r * 3 + j) ==
                  doctest::Approx(std::sqrt(ab) * z0.at(r * 3 + j) + std::sqrt(1 - ab) * eps.at(r * 3 + j)));
        }
    CHECK(fdcheck::check(z0, [&] { return sum(q_sample(z0, t, eps, s)); }).rel < 1e-6);
    CHECK_THROWS_AS(q_sample(z0, std::vector<int>{0, 1}, eps, s), ContractError);
    CHECK_THROWS_AS(q_sample(z0, std::vector<int>{1, 51}, eps, s), ContractError);
    CHECK_THROWS_AS(q_sample(z0, std::vector<int>{1}, eps, s), DimensionError);
    CHECK_THROWS_AS(q_sample(z0, t, Tensor::zeros({2, 2}), s), DimensionError);
}

TEST_CASE("q_sample matches the iterated forward chain in distribution") {
    const int T = 10, t = 5;
    const NoiseSchedule s = build_sqrt_schedule(T);
    const std::vector<double> z0{1.5, -0.7};
    const std::size_t draws = 100000;
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> g;
    double m[2] = {0, 0}, c[3] = {0, 0, 0};
    for (std::size_t n = 0; n < draws; ++n) {
        double z[2] = {z0[0], z0[1]};
        for (int k = 1; k <= t; ++k)
            for (double& x : z) x = std::sqrt(s.alpha[k]) * x + std::sqrt(s.beta[k]) * g(rng);
        m[0] += z[0], m[1] += z[1];
        c[0] += z[0] * z[0], c[1] += z[0] * z[1], c[2] += z[1] * z[1];
    }
    for (double& x : m) x /= draws;
    const double v0 = c[0] / draws - m[0] * m[0], v1 = c[2] / draws - m[1] * m[1], cov = c[1] / draws - m[0] * m[1];

    const Tensor base = Tensor::from({1, 2}, {static_cast<real>(z0[0]), static_cast<real>(z0[1])});
    const Tensor mean = q_sample(base, std::vector<int>{t}, Tensor::zeros({1, 2}), s);
    const Tensor unit = q_sample(Tensor::zeros({1, 2}), std::vector<int>{t}, Tensor::full({1, 2}, 1), s);
    const double var = unit.at(0) * unit.at(0);
    CHECK(std::abs(m[0] - mean.at(0)) < 0.02 * std::abs(mean.at(0)));
    CHECK(std::abs(m[1] - mean.at(1)) < 0.02 * std::abs(mean.at(1)));
    CHECK(std::abs(v0 - var) < 0.02 * var);
    CHECK(std::abs(v1 - var) < 0.02 * var);
    CHECK(std::abs(cov) < 0.02 * var);
}

TEST_CASE("sampling timesteps") {
    const auto all = sampling_timesteps(20, 20);
    REQUIRE(all.size() == 20);
    for (int i = 0; i < 20; ++i) CHECK(all[i] == 20 - i);
    CHECK(sampling_timesteps(1000, 1) == std::vector<int>{1000});
    const auto ten = sampling_timesteps(1000, 10);
    CHECK(ten.size() == 10);
    CHECK(ten.front() == 1000);
    CHECK(ten.back() == 1);
    for (std::size_t i = 1; i < ten.size(); ++i) CHECK(ten[i] < ten[i - 1]);
    CHECK_THROWS_AS(sampling_timesteps(10, 11), ConfigError);
    CHECK_THROWS_AS(sampling_timesteps(10, 0), ConfigError);
}

TEST_CASE("timestep embedding") {
    const auto e0 = timestep_embedding(0, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(e0[i] == 0);
        CHECK(e0[4 + i] == 1);
    }
    const auto e = timestep_embedding(3, 8);
    CHECK(e[0] == doctest::Approx(std::sin(3.0)));
    CHECK(e[5] == doctest::Approx(std::cos(3.0 * std::pow(10000.0, -0.25))));
}

TEST_CASE("ld loss is the mean squared error") {
    const Tensor a = Tensor::from({1, 2}, {1, 3}), b = Tensor::from({1, 2}, {0, 1});
    CHECK(ld_loss(a, b).item() == doctest::Approx(2.5));
}

TEST_CASE("sampler contracts") {
    const NoiseSchedule s = build_sqrt_schedule(30);
    int calls = 0;
    Tensor last;
    const DenoiseFn shrink = [&](const Tensor& z, int t) {
        ++calls;
        last = scale(z, static_cast<real>(0.5 + 0.01 * t));
        return last;
    };
    SamplerOptions o;
    o.n_steps = 30;
    o.seed = 4;

    SUBCASE("eta 0 is deterministic given the seed") {
        const Tensor a = sample_latent(shrink, 3, 4, s, o), b = sample_latent(shrink, 3, 4, s, o);
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
        o.seed = 5;
        const Tensor c = sample_latent(shrink, 3, 4, s, o);
        CHECK(c.at(0) != a.at(0));
    }
    SUBCASE("all timesteps visited with eta 1") {
        o.eta = 1.0;
        SamplerTrace trace;
        calls = 0;
        const Tensor out = sample_latent(shrink, 2, 4, s, o, &trace);
        CHECK(calls == 30);
        REQUIRE(trace.visited.size() == 30);
        for (int i = 0; i < 30; ++i) CHECK(trace.visited[i] == 30 - i);
        CHECK(out.same_node(last));
        CHECK(trace.last_prediction.same_node(last));
    }
    SUBCASE("eta 1 injects fresh noise") {
        o.eta = 1.0;
        o.n_steps = 5;
        Tensor first;
        int step = 0;
        const DenoiseFn probe = [&](const Tensor& z, int) {
            if (step++ == 1) first = z.detach();
            return Tensor::zeros(z.shape());
        };
        sample_latent(probe, 1, 3, s, o);
        // a zero prediction under eta 0 would give z' = sqrt(1 - ab') / sqrt(1 - ab) z
        CHECK(first.defined());
        const Tensor det_first = [&] {
            Tensor f;
            int k = 0;
            SamplerOptions d = o;
            d.eta = 0.0;
            sample_latent([&](const Tensor& z, int) {
                if (k++ == 1) f = z.detach();
                return Tensor::zeros(z.shape());
            }, 1, 3, s, d);
            return f;
        }();
        CHECK(first.at(0) != det_first.at(0));
    }
    SUBCASE("one DDIM step by hand") {
        o.n_steps = 2;
        std::vector<Tensor> seen;
        const DenoiseFn half = [&](const Tensor& z, int) {
            seen.push_back(z.detach());
            return scale(z, real(0.5));
        };
        const Tensor out = sample_latent(half, 1, 2, s, o);
        REQUIRE(seen.size() == 2);
        const double ab = s.alpha_bar[30], ab1 = s.alpha_bar[1];
        for (std::size_t j = 0; j < 2; ++j) {
            const double z = seen[0].at(j), pred = 0.5 * z;
            const double eps = (z - std::sqrt(ab) * pred) / std::sqrt(1 - ab);
            const double next = std::sqrt(ab1) * pred + std::sqrt(1 - ab1) * eps;
            CHECK(seen[1].at(j) == doctest::Approx(next).epsilon(1e-12));
            CHECK(out.at(j) == doctest::Approx(0.5 * next).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(sample_latent(shrink, 1, 2, s, SamplerOptions{31, 0.0, 0}), ConfigError);
    CHECK_THROWS_AS(sample_latent(shrink, 1, 2, s, SamplerOptions{5, 1.5, 0}), ConfigError);
}

TEST_CASE("denoiser") {
    ModelConfig c;
    c.d_model = 8;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.heads = 2;
    c.ffn = 12;
    c.vocab_size = 20;
    c.max_positions = 16;
    c.denoiser = {1, 8, 2, 12, 6};
    c.diffusion_steps = 20;
    Model m(c, 3);
    EncoderOutput enc;
    enc.batch = 2;
    enc.length = 3;
    Rng rng(1);
    enc.hidden = init_normal({2, 3, 8}, 1, rng);
    enc.mask = {1, 1, 0, 1, 0, 0};
    const Tensor z = init_normal({2, 8}, 1, rng);
    const std::vector<int> t{3, 17};
    const Tensor out = m.denoise(z, t, enc);
    CHECK(out.shape() == Shape{2, 8});

    SUBCASE("masked context positions are ignored") {
        NoGradGuard ng;
        EncoderOutput other = enc;
        std::vector<real> h(enc.hidden.data().begin(), enc.hidden.data().end());
        for (std::size_t j = 0; j < 8; ++j) h[2 * 8 + j] += 3, h[(3 + 2) * 8 + j] -= 3;
        other.hidden = Tensor::from(enc.hidden.shape(), h);
        const Tensor o2 = m.denoise(z, t, other);
        for (std::size_t i = 0; i < out.numel(); ++i) CHECK(o2.at(i) == doctest::Approx(out.at(i)).epsilon(1e-13));
    }
    SUBCASE("timestep changes the prediction") {
        NoGradGuard ng;
        const Tensor o2 = m.denoise(z, std::vector<int>{4, 17}, enc);
        CHECK(o2.at(0) != out.at(0));
        CHECK(o2.at(8) == doctest::Approx(out.at(8)).epsilon(1e-13));
    }
    SUBCASE("gradients of every denoiser parameter") {
        const Tensor target = init_normal({2, 8}, 1, rng);
        int checked = 0;
        for (auto& [path, p] : m.params()) {
            if (path.rfind("den.", 0) != 0) continue;
            ++checked;
            CAPTURE(path);
            CHECK(fdcheck::check(p, [&] { return ld_loss(m.denoise(z, t, enc), target); }, 1e-6, 1e-7).rel < 1e-4);
        }
        CHECK(checked > 10);
    }
    CHECK_THROWS_AS(m.denoise(z, std::vector<int>{1}, enc), DimensionError);
}
