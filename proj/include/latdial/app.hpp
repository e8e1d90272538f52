#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latdial/config.hpp"
#include "latdial/corpus.hpp"
#include "latdial/metrics.hpp"
#include "latdial/model.hpp"
#include "latdial/tokenizer.hpp"

namespace latdial {

struct GenerateOptions {
    int steps = 10;
    double eta = 0.0;
    std::uint64_t seed = 0;
    std::size_t n_samples = 1;
    std::size_t beam = 5;
    std::size_t max_len = 32;
};

struct Candidate {
    std::string text;
    std::vector<int> ids;
    std::uint64_t seed = 0;
};

// Wall-clock milliseconds per generation phase.
struct PhaseTimes {
    double encode_ms = 0;
    double denoise_ms = 0;
    double decode_ms = 0;
};

// Encodes a context once, then draws n_samples latents with sub-seeds
// seed + i and decodes each with beam search. Models without latent decode
// every candidate from the context alone.
class Generator {
  public:
    Generator(const Model& model, const Vocab& vocab, BatchLimits limits);

    std::vector<Candidate> generate(const std::vector<Turn>& context, const GenerateOptions& options,
                                    PhaseTimes* times = nullptr, std::vector<std::string>* notices = nullptr) const;

    const NoiseSchedule& schedule() const { return schedule_; }
    const BatchLimits& limits() const { return limits_; }

  private:
    Candidate decode(const EncoderOutput& enc, const Tensor& z, const GenerateOptions& options) const;

    const Model& model_;
    const Vocab& vocab_;
    BatchLimits limits_;
    NoiseSchedule schedule_;
};

// A checkpoint together with the vocabulary it was trained with.
struct LoadedRun {
    std::unique_ptr<Model> model;
    Vocab vocab;
    nlohmann::json meta;
    std::filesystem::path dir;
    BatchLimits limits;
};

// The vocabulary defaults to vocab.txt beside the checkpoint.
LoadedRun load_run(const std::filesystem::path& checkpoint, const std::optional<std::filesystem::path>& vocab = {});

// Contexts from JSONL records with a "context" array; "response" is optional.
std::vector<std::vector<Turn>> load_contexts(const std::filesystem::path& path);

struct TrainOutcome {
    std::filesystem::path best_checkpoint;
    std::filesystem::path manifest;
    std::size_t best_step = 0;
    double best_dev_loss = 0;
};

// Validates the config, prepares data and vocabulary, runs fit and writes
// vocab.txt, train_log.jsonl, best.ckpt, last.ckpt and manifest.json into
// out_dir (plus train/dev/oracle files for synthetic runs). With resume, a
// previous last.ckpt in out_dir is continued.
TrainOutcome cmd_train(const RunConfig& cfg, std::ostream& out, bool resume = false);

// Writes one JSONL record per candidate: context hash, seed, steps, text.
void cmd_sample(const LoadedRun& run, const std::vector<std::vector<Turn>>& contexts, const GenerateOptions& options,
                std::ostream& out);

enum class EvalMode { standard, upper_bound, synthetic };
EvalMode parse_eval_mode(const std::string& s);

// standard: one sample per context; upper_bound: best of n_samples (at least
// 10) by sentence BLEU-1; synthetic: n_samples per context scored against
// the oracle as well.
EvalReport cmd_eval(const LoadedRun& run, const std::vector<DialogueSample>& corpus, EvalMode mode,
                    const GenerateOptions& options, const SyntheticOracle* oracle = nullptr);

struct BenchRow {
    int steps = 0;
    std::size_t contexts = 0;
    double encode_s = 0;   // mean seconds per sample
    double denoise_s = 0;
    double decode_s = 0;
    double total_s = 0;
};

// Rows sorted by step count. Requires at least 20 contexts.
std::vector<BenchRow> cmd_bench(const LoadedRun& run, const std::vector<std::vector<Turn>>& contexts,
                                std::vector<int> step_counts, const GenerateOptions& options);
std::string bench_table(const std::vector<BenchRow>& rows);

// Rolling dialogue state for the chat REPL. Turn roles alternate from 0.
class ChatSession {
  public:
    ChatSession(const Generator& generator, GenerateOptions options);

    Candidate reply(const std::string& user_text);
    // Replaces the last reply with one from a fresh latent.
    Candidate more();
    void reset();

    const std::vector<Turn>& history() const { return history_; }
    std::uint64_t next_seed() const { return options_.seed + draws_; }

  private:
    Candidate draw(const std::vector<Turn>& context);

    const Generator& generator_;
    GenerateOptions options_;
    std::vector<Turn> history_;
    std::uint64_t draws_ = 0;
};

// Reads lines from `in` until EOF or /quit. /more and /reset are commands.
void cmd_chat(const LoadedRun& run, const GenerateOptions& options, std::istream& in, std::ostream& out);

}  // namespace latdial
