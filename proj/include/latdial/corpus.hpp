#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "latdial/tokenizer.hpp"

namespace latdial {

struct Turn {
    int role = 0;  // speaker index, 0 or 1
    std::string text;
};

struct DialogueSample {
    std::vector<Turn> context;
    std::string response;
};

// Throws ValidationError (prefixed with `where`) unless the sample has at least
// one turn, alternating roles in {0,1}, and a non-empty response.
void validate_sample(const DialogueSample& sample, const std::string& where = "sample");

std::vector<DialogueSample> load_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const DialogueSample> samples);

// Stable key for a context: hash of normalized role-tagged turns.
std::string context_key(std::span<const Turn> context);

// Row-major id grid.
struct IdGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<int> ids;

    int at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
    int& at(std::size_t r, std::size_t c) { return ids[r * cols + c]; }
};

struct BatchLimits {
    std::size_t max_context = 256;
    std::size_t max_response = 128;
    std::size_t max_turns = 32;  // turn ids run 1..max_turns
};

struct EncodedBatch {
    std::size_t batch = 0;

    // Context: each turn's tokens followed by SEP, oldest turn first.
    IdGrid ctx_tokens;
    IdGrid ctx_turns;      // distance from the response; last turn is 1, pad 0
    IdGrid ctx_roles;      // speaker index, pad 0
    IdGrid ctx_positions;  // 0..len-1, pad 0
    std::vector<std::uint8_t> ctx_mask;

    // Response, present only when the batch was built from full samples.
    IdGrid dec_input;   // BOS r_1 .. r_n
    IdGrid dec_target;  // r_1 .. r_n EOS
    std::vector<std::uint8_t> resp_mask;
    IdGrid post_input;  // LATENT r_1 .. r_n
    std::vector<std::uint8_t> post_mask;
    std::vector<std::vector<int>> response_ids;

    std::vector<std::size_t> source_index;  // input sample behind each row
    std::vector<std::string> notices;       // truncation and skip messages

    bool has_response() const { return dec_input.rows != 0; }
};

// Context-only batch for inference.
EncodedBatch build_context_batch(std::span<const std::vector<Turn>> contexts, const Vocab& vocab,
                                 const BatchLimits& limits);

// Samples whose response (plus EOS) exceeds max_response are skipped with a
// notice; if none survive a ValidationError is thrown.
EncodedBatch build_batch(std::span<const DialogueSample> samples, const Vocab& vocab, const BatchLimits& limits);

// Exact-membership oracle of valid responses per context (normalized text).
class SyntheticOracle {
  public:
    std::uint64_t seed = 0;
    std::map<std::string, std::vector<std::string>> valid;  // context key -> responses

    bool covers(const std::string& key) const { return valid.count(key) != 0; }
    bool is_valid(const std::string& key, std::string_view response) const;
    std::size_t total_responses() const;

    void save(const std::filesystem::path& path) const;
    static SyntheticOracle load(const std::filesystem::path& path);
};

struct SyntheticCorpus {
    std::vector<DialogueSample> train;
    SyntheticOracle oracle;
    std::vector<std::vector<Turn>> contexts;  // in generation order, one per train sample
};

// Templated one-to-many corpus: each context is a question about an object,
// optionally preceded by a greeting; its valid responses are the first
// k_valid answer templates filled with the same object. The train split
// holds one uniformly drawn valid response per context.
SyntheticCorpus generate_synthetic(std::uint64_t seed, std::size_t n_contexts, std::size_t k_valid);

// Fresh one-per-context draw from the oracle (dev splits).
std::vector<DialogueSample> resample_responses(const SyntheticCorpus& corpus, std::uint64_t seed);

}  // namespace latdial
