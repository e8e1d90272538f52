#include <cmath>
#include <random>

#include "doctest.h"
#include "finite_diff.hpp"
#include "latdial/errors.hpp"
#include "latdial/optim.hpp"
#include "latdial/tensor.hpp"

using namespace latdial;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, bool grad = true, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, scale);
    std::vector<real> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<real>(d(rng));
    return Tensor::from(std::move(shape), std::move(v), grad);
}

// Weighted sum so that every output element gets a distinct upstream gradient.
Tensor probe(const Tensor& y) {
    std::vector<real> w(y.numel());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<real>(std::sin(0.7 * static_cast<double>(i) + 0.3));
    return sum(mul(y, Tensor::from(y.shape(), w)));
}

}  // namespace

TEST_CASE("matmul hand examples") {
    const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor ia = matmul(eye, a);
    for (std::size_t i = 0; i < 4; ++i) CHECK(ia.at(i) == a.at(i));

    const Tensor r = matmul(a, Tensor::from({2, 1}, {1, 1}));
    CHECK(r.shape() == Shape{2, 1});
    CHECK(r.at(0) == 3);
    CHECK(r.at(1) == 7);
    CHECK_THROWS_AS(matmul(a, Tensor::from({3, 1}, {1, 1, 1})), DimensionError);
}

TEST_CASE("matmul gradient of sum(A B) matches central differences") {
    Tensor a = randn({3, 4}, 1), b = randn({4, 2}, 2);
    auto w = fdcheck::check(a, [&] { return sum(matmul(a, b)); }, 1e-6);
    CHECK(w.rel < 1e-5);
    w = fdcheck::check(b, [&] { return sum(matmul(a, b)); }, 1e-6);
    CHECK(w.rel < 1e-5);
}

TEST_CASE("softmax values") {
    auto s = softmax(Tensor::from({2}, {0, 0}));
    CHECK(s.at(0) == doctest::Approx(0.5));
    CHECK(s.at(1) == doctest::Approx(0.5));
    s = softmax(Tensor::from({2}, {1000, 1000}));
    CHECK(s.at(0) == doctest::Approx(0.5));
    s = softmax(Tensor::from({2}, {0, static_cast<real>(std::log(3.0))}));
    CHECK(s.at(0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(s.at(1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    const Tensor x = randn({4, 7}, 3, false, 3.0);
    std::vector<real> shifted(x.data().begin(), x.data().end());
    for (auto& v : shifted) v += real(12.5);
    const Tensor a = softmax(x), b = softmax(Tensor::from({4, 7}, shifted));
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 7; ++c) s += a.at(r * 7 + c);
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-9);
}

TEST_CASE("softmax along a non-final axis") {
    const Tensor x = Tensor::from({2, 2}, {0, 0, static_cast<real>(std::log(3.0)), 0});
    const Tensor s = softmax(x, 0);
    CHECK(s.at(0) == doctest::Approx(0.25));
    CHECK(s.at(2) == doctest::Approx(0.75));
    CHECK(s.at(1) == doctest::Approx(0.5));
}

TEST_CASE("layer_norm statistics and limits") {
    const Tensor ones = Tensor::full({8}, 1), zeros = Tensor::zeros({8});
    const Tensor c = layer_norm(Tensor::full({2, 8}, 3.5), ones, zeros);
    for (real v : c.data()) CHECK(std::abs(v) < 1e-9);

    const Tensor x = randn({5, 64}, 4, false, 2.0);
    const Tensor y = layer_norm(x, Tensor::full({64}, 1), Tensor::zeros({64}));
    for (std::size_t r = 0; r < 5; ++r) {
        double m = 0, v = 0;
        for (std::size_t j = 0; j < 64; ++j) m += y.at(r * 64 + j);
        m /= 64;
        for (std::size_t j = 0; j < 64; ++j) v += (y.at(r * 64 + j) - m) * (y.at(r * 64 + j) - m);
        v /= 64;
        CHECK(std::abs(m) < 1e-6);
        CHECK(std::abs(v - 1) < 1e-3);
    }
}

TEST_CASE("cross entropy special cases") {
    CHECK(cross_entropy_logits(Tensor::from({1, 2}, {0, 0}), std::vector<int>{1}, -1).item() ==
          doctest::Approx(std::log(2.0)));
    CHECK(cross_entropy_logits(Tensor::from({1, 3}, {0, 100, 0}), std::vector<int>{1}, -1).item() < 1e-40);

    Tensor logits = randn({3, 4}, 5);
    Tensor loss = cross_entropy_logits(logits, std::vector<int>{0, 0, 0}, 0);
    CHECK(loss.item() == 0);
    loss.backward();
    if (logits.has_grad())
        for (real g : logits.grad()) CHECK(g == 0);
}

TEST_CASE("backward on analytic examples") {
    Tensor x = randn({6}, 6);
    sum(x).backward();
    for (real g : x.grad()) CHECK(g == 1);

    Tensor y = randn({6}, 7);
    sum(mul(y, y)).backward();
    for (std::size_t i = 0; i < 6; ++i) CHECK(y.grad()[i] == doctest::Approx(2 * y.at(i)));
}

TEST_CASE("backward twice on the same graph is a contract error") {
    Tensor x = randn({3}, 8);
    Tensor l = sum(mul(x, x));
    l.backward();
    CHECK_THROWS_AS(l.backward(), ContractError);
    CHECK_THROWS_AS(mul(x, x).backward(), ContractError);
}

TEST_CASE("backward is linear in the loss") {
    Tensor x = randn({5}, 9);
    auto l1 = [&] { return sum(mul(gelu(x), x)); };
    auto l2 = [&] { return mean(softmax(x)); };
    l1().backward();
    std::vector<real> g1(x.grad().begin(), x.grad().end());
    x.zero_grad();
    l2().backward();
    std::vector<real> g2(x.grad().begin(), x.grad().end());
    x.zero_grad();
    (scale(l1(), real(2.5)) + scale(l2(), real(-0.75))).backward();
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(x.grad()[i] - (2.5 * g1[i] - 0.75 * g2[i])) < 1e-9);
}

TEST_CASE("every differentiable op agrees with central differences") {
    Tensor a = randn({2, 3, 4}, 10), b = randn({4}, 11), c = randn({2, 3, 4}, 12);
    Tensor w = randn({4, 5}, 13), bias = randn({5}, 14);
    Tensor g = randn({4}, 15), be = randn({4}, 16);
    Tensor table = randn({6, 4}, 17);
    const double tol = 1e-4;

    SUBCASE("add with suffix broadcast") {
        CHECK(fdcheck::check(a, [&] { return probe(add(a, b)); }).rel < tol);
        CHECK(fdcheck::check(b, [&] { return probe(add(a, b)); }).rel < tol);
    }
    SUBCASE("sub and mul") {
        CHECK(fdcheck::check(c, [&] { return probe(sub(a, c)); }).rel < tol);
        CHECK(fdcheck::check(a, [&] { return probe(mul(a, c)); }).rel < tol);
    }
    SUBCASE("scale, mean") {
        CHECK(fdcheck::check(a, [&] { return mean(scale(mul(a, a), real(0.3))); }).rel < tol);
    }
    SUBCASE("linear") {
        CHECK(fdcheck::check(a, [&] { return probe(linear(a, w, bias)); }).rel < tol);
        CHECK(fdcheck::check(w, [&] { return probe(linear(a, w, bias)); }).rel < tol);
        CHECK(fdcheck::check(bias, [&] { return probe(linear(a, w, bias)); }).rel < tol);
    }
    SUBCASE("gelu") { CHECK(fdcheck::check(a, [&] { return probe(gelu(a)); }).rel < tol); }
    SUBCASE("softmax") {
        CHECK(fdcheck::check(a, [&] { return probe(softmax(a)); }).rel < tol);
        CHECK(fdcheck::check(a, [&] { return probe(softmax(a, 1)); }).rel < tol);
    }
    SUBCASE("layer_norm") {
        CHECK(fdcheck::check(a, [&] { return probe(layer_norm(a, g, be)); }).rel < tol);
        CHECK(fdcheck::check(g, [&] { return probe(layer_norm(a, g, be)); }).rel < tol);
        CHECK(fdcheck::check(be, [&] { return probe(layer_norm(a, g, be)); }).rel < tol);
    }
    SUBCASE("gather_rows and embedding") {
        const std::vector<int> ids{0, 3, 3, 5, 1, 0};
        CHECK(fdcheck::check(table, [&] { return probe(gather_rows(table, ids)); }).rel < tol);
        CHECK(fdcheck::check(table, [&] { return probe(embedding(table, ids, {2, 3})); }).rel < tol);
    }
    SUBCASE("reshape, concat, slice, select, scale_rows") {
        CHECK(fdcheck::check(a, [&] { return probe(reshape(a, {6, 4})); }).rel < tol);
        CHECK(fdcheck::check(c, [&] { return probe(concat_seq(a, c)); }).rel < tol);
        CHECK(fdcheck::check(a, [&] { return probe(slice_last(a, 1, 2)); }).rel < tol);
        CHECK(fdcheck::check(a, [&] { return probe(select_position(a, 2)); }).rel < tol);
        const std::vector<real> coeffs{0.5, -2.0};
        CHECK(fdcheck::check(a, [&] { return probe(scale_rows(a, coeffs)); }).rel < tol);
    }
    SUBCASE("attention with masks") {
        Tensor q = randn({2, 3, 4}, 20), k = randn({2, 5, 4}, 21), v = randn({2, 5, 4}, 22);
        const std::vector<std::uint8_t> valid{1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
        const auto mask = AttentionMask::from_key_padding(2, 3, 5, valid);
        for (Tensor* t : {&q, &k, &v}) CHECK(fdcheck::check(*t, [&] { return probe(attention(q, k, v, 2, mask)); }).rel < tol);
    }
    SUBCASE("cross entropy and mse") {
        Tensor logits = randn({4, 6}, 23);
        const std::vector<int> tg{1, 0, 5, 2};
        CHECK(fdcheck::check(logits, [&] { return cross_entropy_logits(logits, tg, 0); }).rel < tol);
        CHECK(fdcheck::check(a, [&] { return mse(a, c); }).rel < tol);
    }
}

TEST_CASE("fully masked attention rows output zeros") {
    const Tensor q = randn({1, 2, 4}, 30, false), k = randn({1, 3, 4}, 31, false), v = randn({1, 3, 4}, 32, false);
    AttentionMask m{1, 2, 3, {1, 1, 0, 0, 0, 0}};
    const Tensor out = attention(q, k, v, 2, m);
    for (std::size_t j = 4; j < 8; ++j) CHECK(out.at(j) == 0);
}

TEST_CASE("broadcasting is limited to scalars and trailing suffixes") {
    const Tensor a = Tensor::zeros({2, 3});
    CHECK_NOTHROW(add(a, Tensor::scalar(1)));
    CHECK_NOTHROW(add(a, Tensor::zeros({3})));
    CHECK_THROWS_AS(add(a, Tensor::zeros({2})), DimensionError);
    CHECK_THROWS_AS(mul(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("non-finite values are rejected") {
    const Tensor big = Tensor::from({1}, {1e308});
    CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("no-grad guard skips graph recording") {
    Tensor x = randn({3}, 40);
    Tensor y;
    {
        NoGradGuard g;
        CHECK_FALSE(grad_enabled());
        y = mul(x, x);
    }
    CHECK(grad_enabled());
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("adamw reference cases") {
    AdamWConfig cfg;
    SUBCASE("zero gradient without decay leaves parameters unchanged") {
        ParamSet ps;
        Tensor& p = ps.add("p", Tensor::from({2}, {0.5, -1.5}, true));
        p.mutable_grad();
        OptimizerState st;
        cfg.weight_decay = 0;
        adamw_step(ps, st, cfg, real(0.1));
        CHECK(p.at(0) == 0.5);
        CHECK(p.at(1) == -1.5);
        CHECK(st.step == 1);
    }
    SUBCASE("first step with unit gradient moves by lr / (1 + eps)") {
        ParamSet ps;
        Tensor& p = ps.add("p", Tensor::from({1}, {2.0}, true));
        p.mutable_grad()[0] = 1;
        OptimizerState st;
        cfg.weight_decay = 0;
        const real lr = real(0.01);
        adamw_step(ps, st, cfg, lr);
        CHECK(p.at(0) == doctest::Approx(2.0 - lr / (1 + cfg.eps)).epsilon(1e-14));
        CHECK(st.m.at("p").size() == 1);
    }
    SUBCASE("decay alone shrinks by (1 - lr * wd)") {
        ParamSet ps;
        Tensor& p = ps.add("p", Tensor::from({1}, {3.0}, true));
        OptimizerState st;
        cfg.weight_decay = real(0.1);
        adamw_step(ps, st, cfg, real(0.5));
        CHECK(p.at(0) == doctest::Approx(3.0 * (1 - 0.5 * 0.1)));
    }
    SUBCASE("step counter increases by one per call") {
        ParamSet ps;
        ps.add("p", Tensor::from({1}, {1.0}, true));
        OptimizerState st;
        for (int i = 1; i <= 3; ++i) {
            adamw_step(ps, st, cfg, real(0.1));
            CHECK(st.step == static_cast<std::uint64_t>(i));
        }
    }
}

TEST_CASE("gradient clipping rescales to the requested norm") {
    ParamSet ps;
    Tensor& p = ps.add("p", Tensor::from({2}, {0, 0}, true));
    p.mutable_grad()[0] = 3;
    p.mutable_grad()[1] = 4;
    CHECK(clip_grad_norm(ps, 1) == doctest::Approx(5));
    CHECK(p.grad()[0] == doctest::Approx(0.6));
    CHECK(p.grad()[1] == doctest::Approx(0.8));
}
