#include "latdial/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "latdial/errors.hpp"
#include "latdial/serialize.hpp"

namespace latdial {

using nlohmann::json;
namespace fs = std::filesystem;

std::size_t TrainConfig::resolved_warmup() const {
    if (warmup_steps) return *warmup_steps;
    return std::max<std::size_t>(1, total_steps / 10);
}

void TrainConfig::validate() const {
    if (total_steps == 0) throw ConfigError("total_steps must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
    if (!(warmup_init_lr > 0)) throw ConfigError("warmup_init_lr must be positive");
    if (warmup_init_lr > peak_lr) throw ConfigError("warmup_init_lr must not exceed peak_lr");
    if (resolved_warmup() == 0) throw ConfigError("warmup_steps must be positive");
    if (resolved_warmup() >= total_steps) throw ConfigError("warmup_steps must be below total_steps");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
    if (!(grad_clip > 0)) throw ConfigError("grad_clip must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (weights.nll < 0 || weights.bow < 0 || weights.ld < 0) throw ConfigError("loss weights must be non-negative");
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    if (step < 1) throw ContractError("lr_at: step must be >= 1");
    const double w = static_cast<double>(cfg.resolved_warmup());
    const double frac = std::min(static_cast<double>(step), w) / w;
    return cfg.warmup_init_lr + (cfg.peak_lr - cfg.warmup_init_lr) * frac;
}

json TrainLogRecord::to_json() const {
    return json{{"step", step}, {"nll", nll}, {"bow", bow}, {"ld", ld},
                {"total", total}, {"lr", lr}, {"ms", wall_ms}};
}

TrainLogRecord TrainLogRecord::from_json(const json& j) {
    TrainLogRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.nll = j.at("nll").get<double>();
    r.bow = j.at("bow").get<double>();
    r.ld = j.at("ld").get<double>();
    r.total = j.at("total").get<double>();
    r.lr = j.at("lr").get<double>();
    r.wall_ms = j.value("ms", 0.0);
    return r;
}

NoiseDraw draw_noise(Rng& rng, std::size_t batch, std::size_t dim, int steps) {
    NoiseDraw d;
    std::uniform_int_distribution<int> pick(1, steps);
    d.t.resize(batch);
    for (int& t : d.t) t = pick(rng);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<real> eps(batch * dim);
    for (real& e : eps) e = static_cast<real>(gauss(rng));
    d.eps = Tensor::from({batch, dim}, std::move(eps));
    return d;
}

LossTerms compute_losses(const Model& model, const EncodedBatch& batch, const NoiseSchedule& schedule,
                         const NoiseDraw& noise, const LossWeights& weights) {
    if (!batch.has_response()) throw ContractError("compute_losses needs a batch with responses");
    LossTerms out;
    const EncoderOutput enc = model.encode_context(batch);
    if (!model.config().use_latent) {
        out.nll = model.nll_loss(batch, enc, Tensor{});
        out.bow = Tensor::scalar(0);
        out.ld = Tensor::scalar(0);
        out.total = scale(out.nll, static_cast<real>(weights.nll));
        return out;
    }
    const Tensor z0 = model.encode_posterior(batch).z;
    out.bow = model.bow_loss(z0, batch);
    const Tensor z_t = q_sample(z0, noise.t, noise.eps, schedule);
    const Tensor z0_hat = model.denoise(z_t, noise.t, enc);
    out.ld = ld_loss(z0_hat, z0);
    out.nll = model.nll_loss(batch, enc, z0_hat);
    out.total = scale(out.nll, static_cast<real>(weights.nll)) + scale(out.bow, static_cast<real>(weights.bow)) +
                scale(out.ld, static_cast<real>(weights.ld));
    return out;
}

TrainLogRecord train_step(Model& model, const EncodedBatch& batch, const NoiseSchedule& schedule,
                          OptimizerState& opt_state, Rng& rng, const TrainConfig& cfg, std::size_t step) {
    const auto start = std::chrono::steady_clock::now();
    TrainLogRecord rec;
    rec.step = step;
    rec.lr = lr_at(step, cfg);

    const NoiseDraw noise = draw_noise(rng, batch.batch, model.config().latent_dim(), schedule.steps);
    model.params().zero_grad();
    try {
        LossTerms losses = compute_losses(model, batch, schedule, noise, cfg.weights);
        rec.nll = static_cast<double>(losses.nll.item());
        rec.bow = static_cast<double>(losses.bow.item());
        rec.ld = static_cast<double>(losses.ld.item());
        rec.total = static_cast<double>(losses.total.item());
        losses.total.backward();
    } catch (const NumericError& e) {
        throw TrainingAborted("non-finite value at step " + std::to_string(step) + ": " + e.what(), rec);
    }
    const real norm = clip_grad_norm(model.params(), static_cast<real>(cfg.grad_clip));
    if (!std::isfinite(static_cast<double>(norm)))
        throw TrainingAborted("non-finite gradient norm at step " + std::to_string(step), rec);

    AdamWConfig acfg;
    acfg.weight_decay = static_cast<real>(cfg.weight_decay);
    adamw_step(model.params(), opt_state, acfg, static_cast<real>(rec.lr));
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

bool BestTracker::offer(std::size_t step, double loss) {
    if (best_step_ && !(loss < best_loss_)) return false;
    best_step_ = step;
    best_loss_ = loss;
    return true;
}

namespace {

std::string rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

void restore_rng(Rng& rng, const std::string& state) {
    std::istringstream is(state);
    is >> rng;
    if (!is) throw ValidationError("checkpoint holds a malformed RNG state");
}

void put_params(TensorArchive& ar, const ParamSet& ps) {
    for (const auto& [path, t] : ps) {
        auto d = t.data();
        ar.put("param/" + path, t.shape(), std::vector<real>(d.begin(), d.end()));
    }
}

void restore_params(const TensorArchive& ar, ParamSet& ps, const fs::path& where) {
    for (auto& [path, t] : ps) {
        const ArchiveEntry* e = ar.find("param/" + path);
        if (!e) throw ValidationError(where.string() + ": missing parameter " + path);
        if (e->shape != t.shape()) throw ValidationError(where.string() + ": shape mismatch for " + path);
        auto dst = t.mutable_data();
        std::copy(e->values.begin(), e->values.end(), dst.begin());
    }
}

json model_meta(const Model& model, const Vocab& vocab) {
    return json{{"model_config", to_json(model.config())}, {"vocab_hash", vocab.fingerprint()}};
}

}  // namespace

json to_json(const BatchLimits& l) {
    return json{{"max_context", l.max_context}, {"max_response", l.max_response}, {"max_turns", l.max_turns}};
}

BatchLimits batch_limits_from_json(const json& j) {
    BatchLimits l;
    l.max_context = j.at("max_context").get<std::size_t>();
    l.max_response = j.at("max_response").get<std::size_t>();
    l.max_turns = j.at("max_turns").get<std::size_t>();
    return l;
}

void save_model(const fs::path& path, const Model& model, const Vocab& vocab, json extra) {
    TensorArchive ar;
    ar.meta = model_meta(model, vocab);
    ar.meta["kind"] = "model";
    for (auto& [k, v] : extra.items()) ar.meta[k] = v;
    put_params(ar, model.params());
    write_archive(path, ar);
}

LoadedCheckpoint load_model(const fs::path& path, const Vocab* vocab) {
    const TensorArchive ar = read_archive(path);
    if (!ar.meta.contains("model_config")) throw ValidationError(path.string() + ": no model config in checkpoint");
    if (vocab && ar.meta.value("vocab_hash", std::string()) != vocab->fingerprint())
        throw ValidationError(path.string() + ": checkpoint was trained with a different vocabulary");
    LoadedCheckpoint out;
    out.model = std::make_unique<Model>(model_config_from_json(ar.meta.at("model_config")), 0);
    restore_params(ar, out.model->params(), path);
    out.meta = ar.meta;
    return out;
}

Trainer::Trainer(Model& model, const Vocab& vocab, TrainConfig cfg, BatchLimits limits,
                 std::vector<DialogueSample> train_samples)
    : model_(model),
      vocab_(vocab),
      cfg_(std::move(cfg)),
      limits_(limits),
      train_(std::move(train_samples)),
      noise_rng_(cfg_.seed),
      data_rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ULL) {
    cfg_.validate();
    if (train_.empty()) throw ConfigError("training set is empty");
    const auto& mc = model_.config();
    if (mc.use_latent) schedule_ = build_sqrt_schedule(mc.diffusion_steps, mc.schedule_offset);
    else schedule_ = build_sqrt_schedule(1, mc.schedule_offset);
    order_.resize(train_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), data_rng_);
}

EncodedBatch Trainer::next_batch() {
    std::vector<DialogueSample> picked;
    picked.reserve(cfg_.batch_size);
    while (picked.size() < cfg_.batch_size) {
        if (cursor_ == order_.size()) {
            std::shuffle(order_.begin(), order_.end(), data_rng_);
            cursor_ = 0;
        }
        picked.push_back(train_[order_[cursor_++]]);
    }
    return build_batch(picked, vocab_, limits_);
}

TrainLogRecord Trainer::step_once() {
    const EncodedBatch batch = next_batch();
    ++step_;
    return train_step(model_, batch, schedule_, opt_, noise_rng_, cfg_, step_);
}

double Trainer::evaluate(const std::vector<DialogueSample>& dev) const {
    if (dev.empty()) throw ConfigError("dev set is empty");
    NoGradGuard no_grad;
    Rng rng(cfg_.seed + 0x5eed);
    double sum = 0;
    std::size_t rows = 0;
    for (std::size_t i = 0; i < dev.size(); i += cfg_.batch_size) {
        const std::size_t n = std::min(cfg_.batch_size, dev.size() - i);
        const EncodedBatch batch =
            build_batch(std::span<const DialogueSample>(dev.data() + i, n), vocab_, limits_);
        const NoiseDraw noise = draw_noise(rng, batch.batch, model_.config().latent_dim(), schedule_.steps);
        const LossTerms l = compute_losses(model_, batch, schedule_, noise, cfg_.weights);
        sum += static_cast<double>(l.total.item()) * static_cast<double>(batch.batch);
        rows += batch.batch;
    }
    return sum / static_cast<double>(rows);
}

FitResult Trainer::fit(const std::vector<DialogueSample>& dev, const fs::path& out_dir, std::ostream* log,
                       std::ostream* progress) {
    if (dev.empty()) throw ConfigError("dev set is empty");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

    FitResult result;
    result.best_checkpoint = out_dir / "best.ckpt";
    result.last_checkpoint = out_dir / "last.ckpt";
    while (step_ < cfg_.total_steps) {
        const TrainLogRecord rec = step_once();
        result.log.push_back(rec);
        if (log) *log << rec.to_json().dump() << '\n';
        if (step_ % cfg_.eval_every == 0 || step_ == cfg_.total_steps) {
            const double dev_loss = evaluate(dev);
            dev_history_.emplace_back(step_, dev_loss);
            const bool improved = best_.offer(step_, dev_loss);
            if (improved)
                save_model(result.best_checkpoint, model_, vocab_,
                           json{{"step", step_}, {"dev_loss", dev_loss}, {"limits", to_json(limits_)}});
            save_state(result.last_checkpoint);
            if (progress)
                *progress << "step " << step_ << "  loss " << rec.total << "  dev " << dev_loss
                          << (improved ? "  (best)" : "") << std::endl;
        }
    }
    if (log) log->flush();
    result.dev_history = dev_history_;
    if (best_.best_step()) {
        result.best_step = *best_.best_step();
        result.best_dev_loss = best_.best_loss();
    }
    return result;
}

void Trainer::save_state(const fs::path& path) const {
    TensorArchive ar;
    ar.meta = model_meta(model_, vocab_);
    ar.meta["kind"] = "trainer";
    ar.meta["limits"] = to_json(limits_);
    json hist = json::array();
    for (const auto& [s, l] : dev_history_) hist.push_back({s, l});
    ar.meta["trainer"] = json{{"step", step_},
                              {"adam_step", opt_.step},
                              {"noise_rng", rng_state(noise_rng_)},
                              {"data_rng", rng_state(data_rng_)},
                              {"order", order_},
                              {"cursor", cursor_},
                              {"dev_history", hist}};
    if (best_.best_step()) {
        ar.meta["trainer"]["best_step"] = *best_.best_step();
        ar.meta["trainer"]["best_loss"] = best_.best_loss();
    }
    put_params(ar, model_.params());
    for (const auto& [path_, m] : opt_.m) ar.put("adam.m/" + path_, {m.size()}, m);
    for (const auto& [path_, v] : opt_.v) ar.put("adam.v/" + path_, {v.size()}, v);
    write_archive(path, ar);
}

void Trainer::load_state(const fs::path& path) {
    const TensorArchive ar = read_archive(path);
    if (ar.meta.value("kind", std::string()) != "trainer")
        throw ValidationError(path.string() + ": not a resumable training checkpoint");
    if (ar.meta.at("vocab_hash").get<std::string>() != vocab_.fingerprint())
        throw ValidationError(path.string() + ": vocabulary differs from the one used for training");
    if (ar.meta.at("model_config") != to_json(model_.config()))
        throw ValidationError(path.string() + ": model config differs from the current one");
    const json& tr = ar.meta.at("trainer");
    auto order = tr.at("order").get<std::vector<std::size_t>>();
    if (order.size() != train_.size())
        throw ValidationError(path.string() + ": checkpoint was written for a different training set size");

    restore_params(ar, model_.params(), path);
    opt_ = OptimizerState{};
    opt_.step = tr.at("adam_step").get<std::uint64_t>();
    for (const auto& e : ar.entries) {
        if (e.name.rfind("adam.m/", 0) == 0) opt_.m[e.name.substr(7)] = e.values;
        if (e.name.rfind("adam.v/", 0) == 0) opt_.v[e.name.substr(7)] = e.values;
    }
    restore_rng(noise_rng_, tr.at("noise_rng").get<std::string>());
    restore_rng(data_rng_, tr.at("data_rng").get<std::string>());
    order_ = std::move(order);
    cursor_ = tr.at("cursor").get<std::size_t>();
    step_ = tr.at("step").get<std::size_t>();
    dev_history_.clear();
    for (const auto& h : tr.at("dev_history")) dev_history_.emplace_back(h[0].get<std::size_t>(), h[1].get<double>());
    best_ = BestTracker{};
    if (tr.contains("best_step")) best_.offer(tr.at("best_step").get<std::size_t>(), tr.at("best_loss").get<double>());
}

}  // namespace latdial
