#include "latdial/model.hpp"

#include <cmath>

#include "latdial/errors.hpp"

namespace latdial {

using nlohmann::json;

void ModelConfig::validate() const {
    if (d_model == 0) throw ConfigError("d_model must be positive");
    if (heads == 0 || d_model % heads != 0) throw ConfigError("heads must divide d_model");
    if (encoder_layers == 0) throw ConfigError("encoder_layers must be positive");
    if (decoder_layers == 0) throw ConfigError("decoder_layers must be positive");
    if (ffn == 0) throw ConfigError("ffn must be positive");
    if (vocab_size <= static_cast<std::size_t>(special::kCount)) throw ConfigError("vocab_size too small");
    if (max_roles < 2) throw ConfigError("max_roles must be at least 2");
    if (max_positions == 0) throw ConfigError("max_positions must be positive");
    if (use_latent) {
        if (denoiser.d_model != d_model) throw ConfigError("denoiser_d_model must equal d_model");
        if (denoiser.layers == 0) throw ConfigError("denoiser_layers must be positive");
        if (diffusion_steps < 1) throw ConfigError("diffusion_steps must be >= 1");
        if (!(schedule_offset > 0.0 && schedule_offset < 1.0)) throw ConfigError("schedule_offset must lie in (0, 1)");
    }
}

json to_json(const ModelConfig& c) {
    return json{{"d_model", c.d_model},
                {"encoder_layers", c.encoder_layers},
                {"decoder_layers", c.decoder_layers},
                {"heads", c.heads},
                {"ffn", c.ffn},
                {"vocab_size", c.vocab_size},
                {"max_turns", c.max_turns},
                {"max_roles", c.max_roles},
                {"max_positions", c.max_positions},
                {"use_latent", c.use_latent},
                {"denoiser_layers", c.denoiser.layers},
                {"denoiser_heads", c.denoiser.heads},
                {"denoiser_ffn", c.denoiser.ffn},
                {"time_dim", c.denoiser.time_dim},
                {"diffusion_steps", c.diffusion_steps},
                {"schedule_offset", c.schedule_offset}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<std::size_t>();
    c.encoder_layers = j.at("encoder_layers").get<std::size_t>();
    c.decoder_layers = j.at("decoder_layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ffn = j.at("ffn").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_turns = j.at("max_turns").get<std::size_t>();
    c.max_roles = j.at("max_roles").get<std::size_t>();
    c.max_positions = j.at("max_positions").get<std::size_t>();
    c.use_latent = j.at("use_latent").get<bool>();
    c.denoiser.layers = j.at("denoiser_layers").get<std::size_t>();
    c.denoiser.heads = j.at("denoiser_heads").get<std::size_t>();
    c.denoiser.ffn = j.at("denoiser_ffn").get<std::size_t>();
    c.denoiser.time_dim = j.at("time_dim").get<std::size_t>();
    c.denoiser.d_model = c.d_model;
    c.diffusion_steps = j.at("diffusion_steps").get<int>();
    c.schedule_offset = j.at("schedule_offset").get<double>();
    return c;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.denoiser.d_model = cfg_.d_model;
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.d_model;
    const real emb_std = real(0.02);

    tok_emb_ = params_.add("emb.token", init_normal({cfg_.vocab_size, d}, emb_std, rng));
    enc_pos_emb_ = params_.add("enc.pos", init_normal({cfg_.max_positions, d}, emb_std, rng));
    turn_emb_ = params_.add("enc.turn", init_normal({cfg_.max_turns + 1, d}, emb_std, rng));
    role_emb_ = params_.add("enc.role", init_normal({cfg_.max_roles, d}, emb_std, rng));
    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l)
        enc_layers_.push_back(EncoderLayer::make(params_, "enc.l" + std::to_string(l), d, cfg_.heads, cfg_.ffn, rng));
    enc_ln_ = LayerNorm::make(params_, "enc.ln_final", d);

    if (cfg_.use_latent) {
        post_up_ = Linear::make(params_, "post.up", d, d, rng);
        post_down_ = Linear::make(params_, "post.down", d, cfg_.latent_dim(), rng);
    }

    dec_pos_emb_ = params_.add("dec.pos", init_normal({cfg_.max_positions, d}, emb_std, rng));
    for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) {
        const std::string path = "dec.l" + std::to_string(l);
        if (cfg_.use_latent) {
            const real std_m = real(1) / std::sqrt(static_cast<real>(cfg_.latent_dim()));
            memory_w_.push_back(params_.add(path + ".memory", init_normal({cfg_.latent_dim(), 2 * d}, std_m, rng)));
        }
        dec_layers_.push_back(DecoderLayer::make(params_, path, d, cfg_.heads, cfg_.ffn, rng));
    }
    dec_ln_ = LayerNorm::make(params_, "dec.ln_final", d);
    out_proj_ = Linear::make(params_, "dec.out", d, cfg_.vocab_size, rng, true, emb_std);

    if (cfg_.use_latent) {
        bow_proj_ = Linear::make(params_, "bow", cfg_.latent_dim(), cfg_.vocab_size, rng, true, emb_std);
        denoiser_ = Denoiser(params_, "den", cfg_.denoiser, cfg_.latent_dim(), rng);
    }
}

Tensor Model::run_encoder(Tensor h, std::span<const std::uint8_t> mask, std::size_t batch, std::size_t len) const {
    const auto attn_mask = AttentionMask::from_key_padding(batch, len, len, mask);
    for (const auto& layer : enc_layers_) h = layer(h, attn_mask);
    return enc_ln_(h);
}

EncoderOutput Model::encode_context(const EncodedBatch& batch) const {
    ++encode_calls_;
    const std::size_t b = batch.ctx_tokens.rows, len = batch.ctx_tokens.cols;
    const Shape grid{b, len};
    Tensor h = embedding(tok_emb_, batch.ctx_tokens.ids, grid) + embedding(turn_emb_, batch.ctx_turns.ids, grid) +
               embedding(role_emb_, batch.ctx_roles.ids, grid) +
               embedding(enc_pos_emb_, batch.ctx_positions.ids, grid);
    EncoderOutput out;
    out.hidden = run_encoder(std::move(h), batch.ctx_mask, b, len);
    out.mask = batch.ctx_mask;
    out.batch = b;
    out.length = len;
    return out;
}

Tensor Model::embed_tokens(const IdGrid& tokens, const IdGrid& positions) const {
    const Shape grid{tokens.rows, tokens.cols};
    return embedding(tok_emb_, tokens.ids, grid) + embedding(enc_pos_emb_, positions.ids, grid);
}

LatentState Model::encode_posterior(const EncodedBatch& batch) const {
    if (!cfg_.use_latent) throw ContractError("encode_posterior on a model without latent");
    const auto& in = batch.post_input;
    if (in.rows == 0) throw ContractError("encode_posterior needs response rows");
    IdGrid positions{in.rows, in.cols, std::vector<int>(in.ids.size())};
    for (std::size_t r = 0; r < in.rows; ++r) {
        if (in.at(r, 0) != special::kLatent)
            throw ContractError("posterior input row " + std::to_string(r) + " does not start with LATENT");
        for (std::size_t c = 0; c < in.cols; ++c) positions.at(r, c) = static_cast<int>(c);
    }
    const Tensor h = run_encoder(embed_tokens(in, positions), batch.post_mask, in.rows, in.cols);
    const Tensor z0 = post_down_(gelu(post_up_(select_position(h, 0))));
    return {z0, LatentKind::posterior};
}

std::pair<Tensor, Tensor> Model::memory_kv(const Tensor& z, std::size_t layer) const {
    if (layer >= memory_w_.size()) throw IndexError("memory_kv: no memory for decoder layer " + std::to_string(layer));
    const std::size_t b = z.dim(0), d = cfg_.d_model;
    const Tensor kv = matmul(z, memory_w_[layer]);
    return {reshape(slice_last(kv, 0, d), {b, 1, d}), reshape(slice_last(kv, d, d), {b, 1, d})};
}

Tensor Model::decode_logits(const IdGrid& dec_input, const EncoderOutput& enc, const Tensor& z,
                            bool memory_visible) const {
    const std::size_t b = dec_input.rows, len = dec_input.cols;
    if (enc.batch != b) throw DimensionError("decode_logits: encoder batch differs from decoder batch");
    const bool with_memory = z.defined() && cfg_.use_latent;
    if (with_memory && z.dim(0) != b) throw DimensionError("decode_logits: latent batch differs");
    IdGrid positions{b, len, std::vector<int>(b * len)};
    for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < len; ++c) positions.at(r, c) = static_cast<int>(c);
    const Shape grid{b, len};
    Tensor h = embedding(tok_emb_, dec_input.ids, grid) + embedding(dec_pos_emb_, positions.ids, grid);

    const auto self_mask = AttentionMask::causal_with_prefix(b, len, with_memory ? 1 : 0, memory_visible);
    const auto cross_mask = AttentionMask::from_key_padding(b, len, enc.length, enc.mask);
    for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
        if (with_memory) {
            auto [mk, mv] = memory_kv(z, l);
            h = dec_layers_[l](h, mk, mv, self_mask, enc.hidden, cross_mask);
        } else {
            h = dec_layers_[l](h, Tensor{}, Tensor{}, self_mask, enc.hidden, cross_mask);
        }
    }
    return out_proj_(dec_ln_(h));
}

Tensor Model::bow_logits(const Tensor& z) const {
    if (!cfg_.use_latent) throw ContractError("bow_logits on a model without latent");
    return bow_proj_(z);
}

Tensor Model::bow_loss(const Tensor& z0, const EncodedBatch& batch) const {
    std::vector<int> rows, targets;
    for (std::size_t r = 0; r < batch.response_ids.size(); ++r)
        for (int id : batch.response_ids[r]) {
            rows.push_back(static_cast<int>(r));
            targets.push_back(id);
        }
    if (rows.empty()) return Tensor::scalar(0);
    return cross_entropy_logits(gather_rows(bow_logits(z0), rows), targets, special::kPad);
}

Tensor Model::nll_loss(const EncodedBatch& batch, const EncoderOutput& enc, const Tensor& z) const {
    const Tensor logits = decode_logits(batch.dec_input, enc, z);
    const std::size_t n = batch.dec_input.rows * batch.dec_input.cols;
    return cross_entropy_logits(reshape(logits, {n, cfg_.vocab_size}), batch.dec_target.ids, special::kPad);
}

Tensor Model::denoise(const Tensor& z_t, std::span<const int> t, const EncoderOutput& enc) const {
    if (!cfg_.use_latent) throw ContractError("denoise on a model without latent");
    return denoiser_(z_t, t, enc.hidden, enc.mask);
}

EncoderOutput repeat_row(const EncoderOutput& enc, std::size_t row, std::size_t times) {
    const std::size_t len = enc.length, d = enc.hidden.dim(2);
    const auto src = enc.hidden.data().subspan(row * len * d, len * d);
    std::vector<real> data;
    data.reserve(times * len * d);
    EncoderOutput out;
    for (std::size_t i = 0; i < times; ++i) {
        data.insert(data.end(), src.begin(), src.end());
        out.mask.insert(out.mask.end(), enc.mask.begin() + static_cast<long>(row * len),
                        enc.mask.begin() + static_cast<long>((row + 1) * len));
    }
    out.hidden = Tensor::from({times, len, d}, std::move(data));
    out.batch = times;
    out.length = len;
    return out;
}

}  // namespace latdial
