#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "latdial/corpus.hpp"
#include "latdial/diffusion.hpp"
#include "latdial/model.hpp"
#include "latdial/optim.hpp"

namespace latdial {

struct LossWeights {
    double nll = 1.0;
    double bow = 1.0;
    double ld = 1.0;
};

struct TrainConfig {
    std::size_t total_steps = 10000;
    std::size_t batch_size = 128;
    double peak_lr = 1e-4;
    double warmup_init_lr = 1e-7;
    // Unset means 10% of total_steps.
    std::optional<std::size_t> warmup_steps;
    std::uint64_t seed = 1;
    std::size_t eval_every = 500;
    double grad_clip = 1.0;
    double weight_decay = 0.01;
    LossWeights weights;

    std::size_t resolved_warmup() const;
    void validate() const;
};

// Linear warmup from warmup_init_lr to peak_lr over the warmup steps, then
// constant: lr(s) = init + (peak - init) * min(s, W) / W for s >= 1.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct TrainLogRecord {
    std::size_t step = 0;
    double nll = 0;
    double bow = 0;
    double ld = 0;
    double total = 0;
    double lr = 0;
    double wall_ms = 0;

    nlohmann::json to_json() const;
    static TrainLogRecord from_json(const nlohmann::json& j);
};

class TrainingAborted : public std::runtime_error {
  public:
    TrainingAborted(const std::string& what, TrainLogRecord record)
        : std::runtime_error(what), record_(record) {}
    const TrainLogRecord& record() const { return record_; }

  private:
    TrainLogRecord record_;
};

// Per-row timesteps t ~ U{1..T} and standard-normal noise for one batch.
struct NoiseDraw {
    std::vector<int> t;
    Tensor eps;
};
NoiseDraw draw_noise(Rng& rng, std::size_t batch, std::size_t dim, int steps);

struct LossTerms {
    Tensor nll, bow, ld, total;
};

// One forward pass of the joint objective:
//   h_c = encode_context, z0 = encode_posterior, L_BOW(z0),
//   z_t = q_sample(z0, t, eps), z0_hat = denoise(z_t, t, h_c), L_LD(z0_hat, z0),
//   L_NLL(c, z0_hat), total = weighted sum.
// Models without latent only contribute L_NLL.
LossTerms compute_losses(const Model& model, const EncodedBatch& batch, const NoiseSchedule& schedule,
                         const NoiseDraw& noise, const LossWeights& weights);

// Draws noise, runs compute_losses, one backward pass, gradient clipping and
// one AdamW step at lr_at(step). Throws TrainingAborted on non-finite values.
TrainLogRecord train_step(Model& model, const EncodedBatch& batch, const NoiseSchedule& schedule,
                          OptimizerState& opt_state, Rng& rng, const TrainConfig& cfg, std::size_t step);

// Keeps the lowest dev loss seen; ties keep the earlier one.
class BestTracker {
  public:
    bool offer(std::size_t step, double loss);
    std::optional<std::size_t> best_step() const { return best_step_; }
    double best_loss() const { return best_loss_; }

  private:
    std::optional<std::size_t> best_step_;
    double best_loss_ = 0;
};

struct FitResult {
    std::size_t best_step = 0;
    double best_dev_loss = 0;
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;
    std::vector<std::pair<std::size_t, double>> dev_history;
    std::vector<TrainLogRecord> log;
};

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    nlohmann::json meta;
};

// Parameters only, for inference. Validates config and (when given) vocab.
void save_model(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                nlohmann::json extra = nlohmann::json::object());
LoadedCheckpoint load_model(const std::filesystem::path& path, const Vocab* vocab = nullptr);

nlohmann::json to_json(const BatchLimits& limits);
BatchLimits batch_limits_from_json(const nlohmann::json& j);

// Owns the training state for one run: parameters (via the model), optimizer
// moments, noise and data-order RNGs and the step counter. Checkpoints hold
// all of it, so resuming reproduces the continuation exactly.
class Trainer {
  public:
    Trainer(Model& model, const Vocab& vocab, TrainConfig cfg, BatchLimits limits,
            std::vector<DialogueSample> train_samples);

    std::size_t step() const { return step_; }
    const OptimizerState& optimizer() const { return opt_; }
    const NoiseSchedule& schedule() const { return schedule_; }

    EncodedBatch next_batch();
    TrainLogRecord step_once();
    // Mean total loss over dev samples with a fixed noise stream.
    double evaluate(const std::vector<DialogueSample>& dev) const;

    // Trains until total_steps, evaluating every eval_every steps. Writes
    // best.ckpt (lowest dev loss) and last.ckpt (full resumable state) into
    // out_dir; per-step JSON records go to `log` when given.
    // A one-line summary per evaluation goes to `progress` when given.
    FitResult fit(const std::vector<DialogueSample>& dev, const std::filesystem::path& out_dir,
                  std::ostream* log = nullptr, std::ostream* progress = nullptr);

    void save_state(const std::filesystem::path& path) const;
    void load_state(const std::filesystem::path& path);

  private:
    Model& model_;
    const Vocab& vocab_;
    TrainConfig cfg_;
    BatchLimits limits_;
    std::vector<DialogueSample> train_;
    NoiseSchedule schedule_;
    OptimizerState opt_;
    Rng noise_rng_;
    Rng data_rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t step_ = 0;
    BestTracker best_;
    std::vector<std::pair<std::size_t, double>> dev_history_;
};

}  // namespace latdial
