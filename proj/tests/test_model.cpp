#include <cmath>
#include <functional>
#include <map>

#include "doctest.h"
#include "finite_diff.hpp"
#include "latdial/beam_search.hpp"
#include "latdial/errors.hpp"
#include "latdial/model.hpp"

using namespace latdial;

namespace {

const Vocab& vocab() {
    static const Vocab v = train_bpe(
        std::vector<std::string>{"hi there how are you", "fine thanks and you", "what is your name", "my name is bob",
                                 "nice to meet you bob", "i like the red car", "the blue car is fast"},
        90);
    return v;
}

ModelConfig tiny(bool latent = true) {
    ModelConfig c;
    c.d_model = 16;
    c.encoder_layers = 1;
    c.decoder_layers = 2;
    c.heads = 2;
    c.ffn = 24;
    c.vocab_size = vocab().size();
    c.max_positions = 40;
    c.use_latent = latent;
    c.denoiser.d_model = 16;
    c.denoiser.layers = 1;
    c.denoiser.heads = 2;
    c.denoiser.ffn = 24;
    c.denoiser.time_dim = 8;
    c.diffusion_steps = 50;
    return c;
}

EncodedBatch sample_batch() {
    const std::vector<DialogueSample> s{{{{0, "hi there"}, {1, "how are you"}}, "fine thanks and you"},
                                        {{{0, "what is your name"}}, "my name is bob"}};
    return build_batch(s, vocab(), BatchLimits{});
}

bool equal_data(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a.at(i) != b.at(i)) return false;
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a.at(i) - b.at(i))));
    return m;
}

Tensor row_of(const Tensor& t, std::size_t r) {
    const std::size_t per = t.numel() / t.dim(0);
    Shape s = t.shape();
    s[0] = 1;
    return Tensor::from(s, std::vector<real>(t.data().begin() + static_cast<long>(r * per),
                                             t.data().begin() + static_cast<long>((r + 1) * per)));
}

Tensor random_latent(std::size_t b, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    return init_normal({b, d}, 1, rng);
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c = tiny();
    c.heads = 3;
    CHECK_THROWS_AS(Model(c, 1), ConfigError);
    c = tiny();
    c.schedule_offset = 0;
    CHECK_THROWS_AS(Model(c, 1), ConfigError);
    CHECK(model_config_from_json(to_json(tiny())).d_model == 16);
}

TEST_CASE("encoder contracts") {
    const Model m(tiny(), 1);
    NoGradGuard ng;
    const std::vector<std::vector<Turn>> ctx{{{0, "hi there"}}, {{0, "what is your name"}, {1, "my name is bob"}}};
    const auto b = build_context_batch(ctx, vocab(), BatchLimits{});
    const auto h = m.encode_context(b);
    CHECK(h.hidden.shape() == Shape{2, b.ctx_tokens.cols, 16});

    SUBCASE("row permutation permutes outputs") {
        const std::vector<std::vector<Turn>> swapped{ctx[1], ctx[0]};
        const auto hs = m.encode_context(build_context_batch(swapped, vocab(), BatchLimits{}));
        const std::size_t len = b.ctx_tokens.cols;
        // row 1 of the swapped batch is row 0 of the original, on its valid positions
        for (std::size_t c = 0; c < len; ++c) {
            if (!b.ctx_mask[c]) continue;
            for (std::size_t j = 0; j < 16; ++j)
                CHECK(hs.hidden.at((len + c) * 16 + j) == doctest::Approx(h.hidden.at(c * 16 + j)).epsilon(1e-12));
        }
    }
    SUBCASE("role ids matter") {
        std::vector<std::vector<Turn>> other = ctx;
        other[0][0].role = 1;
        const auto h2 = m.encode_context(build_context_batch(other, vocab(), BatchLimits{}));
        CHECK(max_abs_diff(row_of(h.hidden, 0), row_of(h2.hidden, 0)) > 0);
    }
    SUBCASE("call counter") {
        const auto before = m.encode_calls();
        m.encode_context(b);
        CHECK(m.encode_calls() == before + 1);
    }
}

TEST_CASE("a fully padded context row is ignored by the decoder") {
    const Model m(tiny(), 2);
    NoGradGuard ng;
    EncodedBatch b = sample_batch();
    const std::size_t len = b.ctx_tokens.cols;
    for (std::size_t c = 0; c < len; ++c) {
        b.ctx_tokens.at(1, c) = special::kPad;
        b.ctx_mask[len + c] = 0;
    }
    const auto enc = m.encode_context(b);
    for (real v : enc.hidden.data()) CHECK(std::isfinite(static_cast<double>(v)));
    const Tensor z = random_latent(2, 16, 3);
    const Tensor base = m.decode_logits(b.dec_input, enc, z);

    EncoderOutput other = enc;
    std::vector<real> hid(enc.hidden.data().begin(), enc.hidden.data().end());
    for (std::size_t i = len * 16; i < hid.size(); ++i) hid[i] += real(5);
    other.hidden = Tensor::from(enc.hidden.shape(), hid);
    CHECK(equal_data(row_of(base, 1), row_of(m.decode_logits(b.dec_input, other, z), 1)));
}

TEST_CASE("posterior encoder contracts") {
    const Model m(tiny(), 3);
    NoGradGuard ng;
    const std::vector<DialogueSample> same{{{{0, "hi"}}, "my name is bob"}, {{{0, "what"}}, "my name is bob"}};
    const auto z = m.encode_posterior(build_batch(same, vocab(), BatchLimits{})).z;
    CHECK(z.shape() == Shape{2, 16});
    CHECK(equal_data(row_of(z, 0), row_of(z, 1)));

    const std::vector<DialogueSample> diff{{{{0, "hi"}}, "my name is bob"}, {{{0, "hi"}}, "my name is red"}};
    const auto z2 = m.encode_posterior(build_batch(diff, vocab(), BatchLimits{})).z;
    CHECK(max_abs_diff(row_of(z2, 0), row_of(z2, 1)) > 0);

    EncodedBatch broken = sample_batch();
    broken.post_input.at(0, 0) = special::kBos;
    CHECK_THROWS_AS(m.encode_posterior(broken), ContractError);
    CHECK_THROWS_AS(Model(tiny(false), 3).encode_posterior(sample_batch()), ContractError);
}

TEST_CASE("memory slot contracts") {
    Model m(tiny(), 4);
    NoGradGuard ng;
    const EncodedBatch b = sample_batch();
    const auto enc = m.encode_context(b);
    const Tensor z = random_latent(2, 16, 5);

    auto [k, v] = m.memory_kv(z, 1);
    CHECK(k.shape() == Shape{2, 1, 16});
    CHECK(v.shape() == Shape{2, 1, 16});
    CHECK_THROWS_AS(m.memory_kv(z, 2), IndexError);

    SUBCASE("masked memory equals a decoder without memory") {
        CHECK(max_abs_diff(m.decode_logits(b.dec_input, enc, z, false), m.decode_logits(b.dec_input, enc, Tensor{})) < 1e-12);
    }
    SUBCASE("changing z changes logits") {
        const Tensor z2 = random_latent(2, 16, 6);
        CHECK(max_abs_diff(m.decode_logits(b.dec_input, enc, z), m.decode_logits(b.dec_input, enc, z2)) > 0);
    }
    SUBCASE("zeroed memory weights make logits independent of z") {
        for (auto& [path, t] : m.params())
            if (path.find(".memory") != std::string::npos)
                for (auto& x : t.mutable_data()) x = 0;
        auto [k0, v0] = m.memory_kv(Tensor::zeros({2, 16}), 0);
        for (real x : k0.data()) CHECK(x == 0);
        for (real x : v0.data()) CHECK(x == 0);
        const Tensor z2 = random_latent(2, 16, 7);
        CHECK(equal_data(m.decode_logits(b.dec_input, enc, z), m.decode_logits(b.dec_input, enc, z2)));
    }
}

TEST_CASE("decoder is causal") {
    const Model m(tiny(), 8);
    NoGradGuard ng;
    const EncodedBatch b = sample_batch();
    const auto enc = m.encode_context(b);
    const Tensor z = random_latent(2, 16, 9);
    const Tensor base = m.decode_logits(b.dec_input, enc, z);
    const std::size_t len = b.dec_input.cols, v = m.config().vocab_size;
    CHECK(base.shape() == Shape{2, len, v});
    for (std::size_t t = 0; t + 1 < len; ++t) {
        IdGrid edited = b.dec_input;
        for (std::size_t c = t + 1; c < len; ++c) edited.at(0, c) = 7 + static_cast<int>(c % 5);
        const Tensor out = m.decode_logits(edited, enc, z);
        for (std::size_t p = 0; p <= t; ++p)
            for (std::size_t j = 0; j < v; ++j) CHECK(out.at(p * v + j) == base.at(p * v + j));
    }
}

TEST_CASE("bag-of-words loss") {
    Model m(tiny(), 10);
    const EncodedBatch b = sample_batch();
    const Tensor z = random_latent(2, 16, 11);
    CHECK(m.bow_logits(z).shape() == Shape{2, m.config().vocab_size});

    SUBCASE("zero head gives ln|V| per token") {
        for (auto& [path, t] : m.params())
            if (path.rfind("bow.", 0) == 0)
                for (auto& x : t.mutable_data()) x = 0;
        CHECK(m.bow_loss(z, b).item() == doctest::Approx(std::log(static_cast<double>(m.config().vocab_size))));
    }
    SUBCASE("matches a direct sum over response tokens") {
        const Tensor logits = m.bow_logits(z);
        const std::size_t v = m.config().vocab_size;
        double total = 0;
        std::size_t count = 0;
        for (std::size_t r = 0; r < 2; ++r) {
            double mx = -1e300, s = 0;
            for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(logits.at(r * v + j)));
            for (std::size_t j = 0; j < v; ++j) s += std::exp(logits.at(r * v + j) - mx);
            for (int id : b.response_ids[r]) {
                total += -(logits.at(r * v + static_cast<std::size_t>(id)) - mx - std::log(s));
                ++count;
            }
        }
        CHECK(m.bow_loss(z, b).item() == doctest::Approx(total / static_cast<double>(count)).epsilon(1e-12));
    }
    SUBCASE("gradient with respect to z") {
        Tensor zg = Tensor::from(z.shape(), std::vector<real>(z.data().begin(), z.data().end()), true);
        CHECK(fdcheck::check(zg, [&] { return m.bow_loss(zg, b); }).rel < 1e-4);
    }
}

TEST_CASE("token NLL") {
    const Model m(tiny(), 12);
    NoGradGuard ng;
    const EncodedBatch b = sample_batch();
    const auto enc = m.encode_context(b);
    const Tensor z = random_latent(2, 16, 13);
    const double nll = m.nll_loss(b, enc, z).item();
    const Tensor logits = m.decode_logits(b.dec_input, enc, z);
    const std::size_t n = b.dec_input.rows * b.dec_input.cols;
    const double direct =
        cross_entropy_logits(reshape(logits, {n, m.config().vocab_size}), b.dec_target.ids, special::kPad).item();
    CHECK(nll == doctest::Approx(direct).epsilon(1e-14));
    const double lnv = std::log(static_cast<double>(m.config().vocab_size));
    CHECK(nll > 0.9 * lnv);
    CHECK(nll < 1.1 * lnv);
}

TEST_CASE("ablation model has no latent parameters") {
    const Model full(tiny(), 1), abl(tiny(false), 1);
    CHECK(full.params().contains("bow.w"));
    CHECK_FALSE(abl.params().contains("bow.w"));
    CHECK_FALSE(abl.params().contains("dec.l0.memory"));
    CHECK(abl.params().total_numel() < full.params().total_numel());
}

// ---- beam search on a hand-built scorer ------------------------------------------

namespace {

// Three tokens; token 2 is EOS. Log-probabilities depend on the last token.
std::vector<double> toy_row(const std::vector<int>& prefix) {
    static const std::map<int, std::vector<double>> probs{
        {-1, {0.5, 0.3, 0.2}}, {0, {0.1, 0.6, 0.3}}, {1, {0.45, 0.1, 0.45}}};
    const int last = prefix.empty() ? -1 : prefix.back();
    std::vector<double> out;
    for (double p : probs.at(last)) out.push_back(std::log(p));
    return out;
}

std::vector<std::vector<double>> toy_scorer(const std::vector<std::vector<int>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) out.push_back(toy_row(p));
    return out;
}

}  // namespace

TEST_CASE("beam size one is greedy decoding") {
    BeamOptions o;
    o.beam_size = 1;
    o.max_len = 6;
    std::vector<int> greedy;
    for (std::size_t i = 0; i < o.max_len; ++i) {
        const auto row = toy_row(greedy);
        const int best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == 2) break;
        greedy.push_back(best);
    }
    CHECK(beam_search(toy_scorer, o).ids == greedy);
}

TEST_CASE("wide beam finds the exhaustive optimum") {
    BeamOptions o;
    o.beam_size = 64;
    o.max_len = 3;
    double best_score = -1e300;
    std::vector<int> best;
    std::function<void(std::vector<int>, double)> walk = [&](std::vector<int> prefix, double lp) {
        const auto row = toy_row(prefix);
        if (prefix.size() == o.max_len) {
            const double s = lp / static_cast<double>(prefix.size());
            if (s > best_score) best_score = s, best = prefix;
            return;
        }
        const double fin = (lp + row[2]) / static_cast<double>(prefix.size() + 1);
        if (fin > best_score) best_score = fin, best = prefix;
        for (int t : {0, 1}) {
            auto next = prefix;
            next.push_back(t);
            walk(next, lp + row[static_cast<std::size_t>(t)]);
        }
    };
    walk({}, 0);
    const auto h = beam_search(toy_scorer, o);
    CHECK(h.ids == best);
    CHECK(h.score == doctest::Approx(best_score));
}

TEST_CASE("banned ids never appear") {
    BeamOptions o;
    o.banned = {0};
    o.max_len = 5;
    for (int id : beam_search(toy_scorer, o).ids) CHECK(id != 0);
}
