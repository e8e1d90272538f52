#pragma once

// Transformer building blocks shared by the encoder, decoder and denoiser.
// Each block registers its parameters in a ParamSet under a path prefix and
// keeps handles to them.

#include <random>
#include <string>

#include "latdial/optim.hpp"
#include "latdial/tensor.hpp"

namespace latdial {

using Rng = std::mt19937_64;

Tensor init_normal(Shape shape, real stddev, Rng& rng);

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out], may be undefined

    static Linear make(ParamSet& ps, const std::string& path, std::size_t in, std::size_t out, Rng& rng,
                       bool with_bias = true, real stddev = real(-1));
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    static LayerNorm make(ParamSet& ps, const std::string& path, std::size_t d);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct MultiHeadAttention {
    Linear q, k, v, o;
    std::size_t heads = 1;

    static MultiHeadAttention make(ParamSet& ps, const std::string& path, std::size_t d, std::size_t heads,
                                   Rng& rng);
    // key_in and value_in may differ (memory prefix carries distinct key/value rows).
    Tensor operator()(const Tensor& query_in, const Tensor& key_in, const Tensor& value_in,
                      const AttentionMask& mask) const;
};

struct FeedForward {
    Linear up, down;

    static FeedForward make(ParamSet& ps, const std::string& path, std::size_t d, std::size_t hidden, Rng& rng);
    Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }
};

// Pre-norm encoder layer: self-attention + feed-forward, residual around each.
struct EncoderLayer {
    LayerNorm ln_attn, ln_ffn;
    MultiHeadAttention attn;
    FeedForward ffn;

    static EncoderLayer make(ParamSet& ps, const std::string& path, std::size_t d, std::size_t heads,
                             std::size_t ffn_hidden, Rng& rng);
    Tensor operator()(const Tensor& h, const AttentionMask& mask) const;
};

// Pre-norm decoder layer: self-attention (optionally with a prepended
// key/value memory), cross-attention over encoder states, feed-forward.
struct DecoderLayer {
    LayerNorm ln_self, ln_cross, ln_ffn;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ffn;

    static DecoderLayer make(ParamSet& ps, const std::string& path, std::size_t d, std::size_t heads,
                             std::size_t ffn_hidden, Rng& rng);
    // mem_key / mem_value: [B, 1, d] or undefined; self_mask must account for
    // the prefix slot when memory is given.
    Tensor operator()(const Tensor& h, const Tensor& mem_key, const Tensor& mem_value, const AttentionMask& self_mask,
                      const Tensor& context, const AttentionMask& cross_mask) const;
};

}  // namespace latdial
