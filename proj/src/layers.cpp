#include "latdial/layers.hpp"

#include <cmath>

namespace latdial {

Tensor init_normal(Shape shape, real stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<real> v(shape_numel(shape));
    for (real& x : v) x = static_cast<real>(dist(rng));
    return Tensor::from(std::move(shape), std::move(v), true);
}

Linear Linear::make(ParamSet& ps, const std::string& path, std::size_t in, std::size_t out, Rng& rng,
                    bool with_bias, real stddev) {
    if (stddev < 0) stddev = real(1) / std::sqrt(static_cast<real>(in));
    Linear l;
    l.weight = ps.add(path + ".w", init_normal({in, out}, stddev, rng));
    if (with_bias) l.bias = ps.add(path + ".b", Tensor::zeros({out}, true));
    return l;
}

LayerNorm LayerNorm::make(ParamSet& ps, const std::string& path, std::size_t d) {
    return {ps.add(path + ".g", Tensor::full({d}, real(1), true)), ps.add(path + ".b", Tensor::zeros({d}, true))};
}

MultiHeadAttention MultiHeadAttention::make(ParamSet& ps, const std::string& path, std::size_t d, std::size_t heads,
                                            Rng& rng) {
    MultiHeadAttention m;
    m.q = Linear::make(ps, path + ".q", d, d, rng);
    m.k = Linear::make(ps, path + ".k", d, d, rng);
    m.v = Linear::make(ps, path + ".v", d, d, rng);
    m.o = Linear::make(ps, path + ".o", d, d, rng);
    m.heads = heads;
    return m;
}

Tensor MultiHeadAttention::operator()(const Tensor& query_in, const Tensor& key_in, const Tensor& value_in,
                                      const AttentionMask& mask) const {
    return o(attention(q(query_in), k(key_in), v(value_in), heads, mask));
}

FeedForward FeedForward::make(ParamSet& ps, const std::string& path, std::size_t d, std::size_t hidden, Rng& rng) {
    return {Linear::make(ps, path + ".up", d, hidden, rng), Linear::make(ps, path + ".down", hidden, d, rng)};
}

EncoderLayer EncoderLayer::make(ParamSet& ps, const std::string& path, std::size_t d, std::size_t heads,
                                std::size_t ffn_hidden, Rng& rng) {
    EncoderLayer l;
    l.ln_attn = LayerNorm::make(ps, path + ".ln_attn", d);
    l.attn = MultiHeadAttention::make(ps, path + ".attn", d, heads, rng);
    l.ln_ffn = LayerNorm::make(ps, path + ".ln_ffn", d);
    l.ffn = FeedForward::make(ps, path + ".ffn", d, ffn_hidden, rng);
    return l;
}

Tensor EncoderLayer::operator()(const Tensor& h, const AttentionMask& mask) const {
    const Tensor x = ln_attn(h);
    const Tensor h1 = h + attn(x, x, x, mask);
    return h1 + ffn(ln_ffn(h1));
}

DecoderLayer DecoderLayer::make(ParamSet& ps, const std::string& path, std::size_t d, std::size_t heads,
                                std::size_t ffn_hidden, Rng& rng) {
    DecoderLayer l;
    l.ln_self = LayerNorm::make(ps, path + ".ln_self", d);
    l.self_attn = MultiHeadAttention::make(ps, path + ".self", d, heads, rng);
    l.ln_cross = LayerNorm::make(ps, path + ".ln_cross", d);
    l.cross_attn = MultiHeadAttention::make(ps, path + ".cross", d, heads, rng);
    l.ln_ffn = LayerNorm::make(ps, path + ".ln_ffn", d);
    l.ffn = FeedForward::make(ps, path + ".ffn", d, ffn_hidden, rng);
    return l;
}

Tensor DecoderLayer::operator()(const Tensor& h, const Tensor& mem_key, const Tensor& mem_value,
                                const AttentionMask& self_mask, const Tensor& context,
                                const AttentionMask& cross_mask) const {
    const Tensor x = ln_self(h);
    Tensor h1;
    if (mem_key.defined()) {
        h1 = h + self_attn(x, concat_seq(mem_key, x), concat_seq(mem_value, x), self_mask);
    } else {
        h1 = h + self_attn(x, x, x, self_mask);
    }
    const Tensor h2 = h1 + cross_attn(ln_cross(h1), context, context, cross_mask);
    return h2 + ffn(ln_ffn(h2));
}

}  // namespace latdial
