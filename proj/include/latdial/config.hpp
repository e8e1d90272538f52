#pragma once

// Run configuration read from a flat text file:
//
//   # comment
//   key = value
//
// Keys (defaults in parentheses):
//   model:     d_model (64) encoder_layers (2) decoder_layers (2) heads (4)
//              ffn (128) vocab_size (512) max_positions (256) use_latent (true)
//   denoiser:  denoiser_layers (1) denoiser_heads (4) denoiser_ffn (128) time_dim (128)
//   schedule:  diffusion_steps (2000) schedule_offset (1e-4)
//   training:  total_steps (10000) batch_size (128) peak_lr (1e-4)
//              warmup_init_lr (1e-7) warmup_steps (10% of total) seed (1)
//              eval_every (500) grad_clip (1.0) weight_decay (0.01)
//              weight_nll, weight_bow, weight_ld (1.0)
//   batching:  max_context (256) max_response (128) max_turns (32)
//   data:      train_file, dev_file (JSONL), or synthetic = true with
//              synthetic_contexts (100) synthetic_valid (8) synthetic_seed (seed)
//              synthetic_draws (1): training responses drawn per context
//   output:    out_dir (run)
//
// Relative paths are resolved against the config file's directory.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "latdial/corpus.hpp"
#include "latdial/model.hpp"
#include "latdial/training.hpp"

namespace latdial {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    BatchLimits limits;
    std::filesystem::path train_file;
    std::filesystem::path dev_file;
    bool synthetic = false;
    std::size_t synthetic_contexts = 100;
    std::size_t synthetic_valid = 8;
    std::size_t synthetic_draws = 1;
    std::uint64_t synthetic_seed = 0;
    bool synthetic_seed_set = false;
    std::filesystem::path out_dir = "run";

    // Every problem found, one message per field. Empty means valid.
    std::vector<std::string> problems() const;
    // Throws ConfigError listing all problems.
    void validate() const;
    nlohmann::json to_json() const;
};

// Parses `key = value` text. Unknown keys and malformed values throw
// ConfigError naming the key and line.
RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace latdial
