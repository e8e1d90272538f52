#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "json.hpp"
#include "latdial/corpus.hpp"
#include "latdial/diffusion.hpp"
#include "latdial/layers.hpp"
#include "latdial/optim.hpp"

namespace latdial {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    std::size_t heads = 4;
    std::size_t ffn = 128;
    std::size_t vocab_size = 512;
    std::size_t max_turns = 32;
    std::size_t max_roles = 2;
    std::size_t max_positions = 256;
    // false builds the no-latent ablation: no memory slot in the decoder, no
    // posterior, BOW head or denoiser.
    bool use_latent = true;
    DenoiserConfig denoiser;
    int diffusion_steps = 2000;
    double schedule_offset = 1e-4;

    std::size_t latent_dim() const { return d_model; }
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct EncoderOutput {
    Tensor hidden;  // [B, Lc, d]
    std::vector<std::uint8_t> mask;
    std::size_t batch = 0;
    std::size_t length = 0;
};

enum class LatentKind { posterior, noised, denoised };

struct LatentState {
    Tensor z;  // [B, d_z]
    LatentKind kind = LatentKind::posterior;
};

// Encoder-decoder with a response posterior head, latent memory injection,
// bag-of-words head and a latent denoiser. All parameters live in one
// ParamSet; the encoder is shared between contexts and the posterior input.
class Model {
  public:
    Model(const ModelConfig& cfg, std::uint64_t seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    // token + turn + role + position embeddings through the encoder stack.
    EncoderOutput encode_context(const EncodedBatch& batch) const;
    // z0 = MLP(encoder([LATENT, response])[0]).
    LatentState encode_posterior(const EncodedBatch& batch) const;
    // Layer-l memory slot: W_M^l z split into key and value, each [B, 1, d].
    std::pair<Tensor, Tensor> memory_kv(const Tensor& z, std::size_t layer) const;
    // Teacher-forced decoder logits [B, L, |V|] for dec_input rows. With an
    // undefined z, or memory_visible=false, the memory slot is not attended.
    Tensor decode_logits(const IdGrid& dec_input, const EncoderOutput& enc, const Tensor& z,
                         bool memory_visible = true) const;
    Tensor bow_logits(const Tensor& z) const;
    // Mean over response tokens of -log softmax(bow_logits(z0))[token].
    Tensor bow_loss(const Tensor& z0, const EncodedBatch& batch) const;
    // Token cross-entropy of decode_logits against dec_target, PAD ignored.
    Tensor nll_loss(const EncodedBatch& batch, const EncoderOutput& enc, const Tensor& z) const;
    Tensor denoise(const Tensor& z_t, std::span<const int> t, const EncoderOutput& enc) const;

    // Number of encode_context invocations since construction / reset.
    std::uint64_t encode_calls() const { return encode_calls_.load(); }
    void reset_encode_calls() { encode_calls_ = 0; }

  private:
    Tensor embed_tokens(const IdGrid& tokens, const IdGrid& positions) const;
    Tensor run_encoder(Tensor h, std::span<const std::uint8_t> mask, std::size_t batch, std::size_t len) const;

    ModelConfig cfg_;
    ParamSet params_;
    Tensor tok_emb_, enc_pos_emb_, turn_emb_, role_emb_, dec_pos_emb_;
    std::vector<EncoderLayer> enc_layers_;
    LayerNorm enc_ln_;
    Linear post_up_, post_down_;
    std::vector<Tensor> memory_w_;
    std::vector<DecoderLayer> dec_layers_;
    LayerNorm dec_ln_;
    Linear out_proj_, bow_proj_;
    Denoiser denoiser_;
    mutable std::atomic<std::uint64_t> encode_calls_{0};
};

// Row r of an encoder output repeated `times` times (beam and candidate fan-out).
EncoderOutput repeat_row(const EncoderOutput& enc, std::size_t row, std::size_t times);

}  // namespace latdial
