#include "latdial/app.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "latdial/beam_search.hpp"
#include "latdial/errors.hpp"
#include "latdial/serialize.hpp"
#include "latdial/training.hpp"

namespace latdial {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

Tensor repeat_latent(const Tensor& z, std::size_t times) {
    const auto src = z.data();
    std::vector<real> data;
    data.reserve(times * src.size());
    for (std::size_t i = 0; i < times; ++i) data.insert(data.end(), src.begin(), src.end());
    return Tensor::from({times, src.size()}, std::move(data));
}

std::vector<double> log_softmax_row(std::span<const real> logits) {
    double mx = -INFINITY;
    for (real v : logits) mx = std::max(mx, static_cast<double>(v));
    double sum = 0;
    for (real v : logits) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
    return out;
}

}  // namespace

Generator::Generator(const Model& model, const Vocab& vocab, BatchLimits limits)
    : model_(model), vocab_(vocab), limits_(limits) {
    if (vocab.size() > model.config().vocab_size)
        throw ValidationError("vocabulary has " + std::to_string(vocab.size()) + " tokens but the model only " +
                              std::to_string(model.config().vocab_size));
    if (model.config().use_latent)
        schedule_ = build_sqrt_schedule(model.config().diffusion_steps, model.config().schedule_offset);
}

Candidate Generator::decode(const EncoderOutput& enc, const Tensor& z, const GenerateOptions& options) const {
    BeamOptions bo;
    bo.beam_size = options.beam;
    bo.max_len = options.max_len;
    bo.eos = special::kEos;
    bo.banned = {special::kPad, special::kBos, special::kSep, special::kLatent};
    for (std::size_t id = vocab_.size(); id < model_.config().vocab_size; ++id) bo.banned.push_back(static_cast<int>(id));

    std::map<std::size_t, std::pair<EncoderOutput, Tensor>> fanout;
    auto scorer = [&](const std::vector<std::vector<int>>& prefixes) {
        const std::size_t k = prefixes.size();
        auto it = fanout.find(k);
        if (it == fanout.end())
            it = fanout.emplace(k, std::make_pair(repeat_row(enc, 0, k), z.defined() ? repeat_latent(z, k) : Tensor{}))
                     .first;
        std::size_t len = 0;
        for (const auto& p : prefixes) len = std::max(len, p.size() + 1);
        IdGrid grid{k, len, std::vector<int>(k * len, special::kPad)};
        for (std::size_t r = 0; r < k; ++r) {
            grid.at(r, 0) = special::kBos;
            for (std::size_t c = 0; c < prefixes[r].size(); ++c) grid.at(r, c + 1) = prefixes[r][c];
        }
        const Tensor logits = model_.decode_logits(grid, it->second.first, it->second.second);
        const std::size_t v = model_.config().vocab_size;
        const auto data = logits.data();
        std::vector<std::vector<double>> out;
        out.reserve(k);
        for (std::size_t r = 0; r < k; ++r)
            out.push_back(log_softmax_row(data.subspan((r * len + prefixes[r].size()) * v, v)));
        return out;
    };
    BeamHypothesis best = beam_search(scorer, bo);
    Candidate c;
    c.ids = best.ids;
    c.text = vocab_.decode(best.ids);
    return c;
}

std::vector<Candidate> Generator::generate(const std::vector<Turn>& context, const GenerateOptions& options,
                                           PhaseTimes* times, std::vector<std::string>* notices) const {
    if (options.n_samples == 0) throw ConfigError("n_samples must be positive");
    if (options.beam == 0) throw ConfigError("beam must be positive");
    NoGradGuard no_grad;
    const EncodedBatch batch = build_context_batch(std::span<const std::vector<Turn>>(&context, 1), vocab_, limits_);
    if (notices) notices->insert(notices->end(), batch.notices.begin(), batch.notices.end());

    auto t0 = Clock::now();
    const EncoderOutput enc = model_.encode_context(batch);
    if (times) times->encode_ms += ms_since(t0);

    std::vector<Candidate> out;
    for (std::size_t i = 0; i < options.n_samples; ++i) {
        const std::uint64_t seed = options.seed + i;
        Tensor z;
        if (model_.config().use_latent) {
            t0 = Clock::now();
            SamplerOptions so{options.steps, options.eta, seed};
            DenoiseFn fn = [&](const Tensor& z_t, int t) {
                const int ts[1] = {t};
                return model_.denoise(z_t, ts, enc);
            };
            z = sample_latent(fn, 1, model_.config().latent_dim(), schedule_, so);
            if (times) times->denoise_ms += ms_since(t0);
        }
        t0 = Clock::now();
        Candidate c = decode(enc, z, options);
        if (times) times->decode_ms += ms_since(t0);
        c.seed = seed;
        out.push_back(std::move(c));
    }
    return out;
}

LoadedRun load_run(const fs::path& checkpoint, const std::optional<fs::path>& vocab) {
    if (!fs::exists(checkpoint)) throw ValidationError("checkpoint not found: " + checkpoint.string());
    LoadedRun run;
    run.dir = checkpoint.parent_path();
    const fs::path vpath = vocab ? *vocab : run.dir / "vocab.txt";
    if (!fs::exists(vpath)) throw ValidationError("vocabulary not found: " + vpath.string());
    run.vocab = Vocab::load(vpath);
    LoadedCheckpoint ck = load_model(checkpoint, &run.vocab);
    run.model = std::move(ck.model);
    run.meta = std::move(ck.meta);
    if (run.meta.contains("limits")) run.limits = batch_limits_from_json(run.meta["limits"]);
    return run;
}

std::vector<std::vector<Turn>> load_contexts(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot read " + path.string());
    std::vector<std::vector<Turn>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ValidationError(where + ": " + e.what());
        }
        if (!rec.contains("context") || !rec["context"].is_array() || rec["context"].empty())
            throw ValidationError(where + ": missing non-empty \"context\" array");
        std::vector<Turn> ctx;
        for (const auto& t : rec["context"]) {
            if (!t.is_object() || !t.contains("role") || !t.contains("text"))
                throw ValidationError(where + ": each turn needs \"role\" and \"text\"");
            ctx.push_back({t["role"].get<int>(), t["text"].get<std::string>()});
        }
        out.push_back(std::move(ctx));
    }
    if (out.empty()) throw ValidationError(path.string() + ": no contexts");
    return out;
}

TrainOutcome cmd_train(const RunConfig& cfg, std::ostream& out, bool resume) {
    cfg.validate();
    const std::string started = utc_now();
    const fs::path dir = cfg.out_dir;
    fs::create_directories(dir);

    std::vector<DialogueSample> train, dev;
    json artifacts = json::object();
    auto record = [&](const std::string& name, const fs::path& p) {
        artifacts[name] = {{"path", p.string()}, {"hash", file_hash(p)}};
    };
    if (cfg.synthetic) {
        const std::uint64_t seed = cfg.synthetic_seed_set ? cfg.synthetic_seed : cfg.train.seed;
        SyntheticCorpus corpus = generate_synthetic(seed, cfg.synthetic_contexts, cfg.synthetic_valid);
        train = corpus.train;
        for (std::size_t i = 1; i < cfg.synthetic_draws; ++i) {
            const auto extra = resample_responses(corpus, seed + 1000 + i);
            train.insert(train.end(), extra.begin(), extra.end());
        }
        dev = resample_responses(corpus, seed + 1);
        write_jsonl(dir / "train.jsonl", train);
        write_jsonl(dir / "dev.jsonl", dev);
        corpus.oracle.save(dir / "oracle.json");
        record("train", dir / "train.jsonl");
        record("dev", dir / "dev.jsonl");
        record("oracle", dir / "oracle.json");
    } else {
        train = load_jsonl(cfg.train_file);
        dev = load_jsonl(cfg.dev_file);
        if (dev.empty()) throw ValidationError(cfg.dev_file.string() + ": dev set is empty");
    }
    out << "train samples " << train.size() << ", dev samples " << dev.size() << "\n";

    const fs::path vocab_path = dir / "vocab.txt";
    const fs::path last = dir / "last.ckpt";
    const bool resuming = resume && fs::exists(last) && fs::exists(vocab_path);
    Vocab vocab;
    if (resuming) {
        vocab = Vocab::load(vocab_path);
    } else {
        std::vector<std::string> texts;
        for (const auto& s : train) {
            for (const auto& t : s.context) texts.push_back(t.text);
            texts.push_back(s.response);
        }
        vocab = train_bpe(texts, cfg.model.vocab_size);
        vocab.save(vocab_path);
    }
    record("vocab", vocab_path);
    out << "vocabulary " << vocab.size() << " tokens\n";

    ModelConfig mc = cfg.model;
    mc.vocab_size = vocab.size();
    mc.max_turns = cfg.limits.max_turns;
    Model model(mc, cfg.train.seed);
    out << "parameters " << model.params().total_numel() << "\n";
    Trainer trainer(model, vocab, cfg.train, cfg.limits, train);

    const fs::path log_path = dir / "train_log.jsonl";
    std::vector<std::string> kept;
    if (resuming) {
        trainer.load_state(last);
        std::ifstream old(log_path);
        std::string line;
        while (std::getline(old, line)) {
            if (line.empty()) continue;
            if (json::parse(line).at("step").get<std::size_t>() <= trainer.step()) kept.push_back(line);
        }
        out << "resuming at step " << trainer.step() << "\n";
    }
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + log_path.string());
    for (const auto& l : kept) log << l << '\n';

    const FitResult fit = trainer.fit(dev, dir, &log, &out);
    log.close();
    record("log", log_path);
    record("best_checkpoint", fit.best_checkpoint);
    record("last_checkpoint", fit.last_checkpoint);

    json history = json::array();
    for (const auto& [s, l] : fit.dev_history) history.push_back({{"step", s}, {"dev_loss", l}});
    const json manifest{{"config", cfg.to_json()},
                        {"seed", cfg.train.seed},
                        {"vocab_size", vocab.size()},
                        {"started", started},
                        {"finished", utc_now()},
                        {"resumed", resuming},
                        {"best_step", fit.best_step},
                        {"best_dev_loss", fit.best_dev_loss},
                        {"dev_history", history},
                        {"artifacts", artifacts}};
    const fs::path manifest_path = dir / "manifest.json";
    std::ofstream mf(manifest_path);
    mf << manifest.dump(2) << '\n';
    if (!mf) throw std::runtime_error("cannot write " + manifest_path.string());

    out << "best step " << fit.best_step << " (dev loss " << fit.best_dev_loss << ")\n"
        << "checkpoint " << fit.best_checkpoint.string() << "\n";
    return {fit.best_checkpoint, manifest_path, fit.best_step, fit.best_dev_loss};
}

void cmd_sample(const LoadedRun& run, const std::vector<std::vector<Turn>>& contexts, const GenerateOptions& options,
                std::ostream& out) {
    const Generator gen(*run.model, run.vocab, run.limits);
    for (const auto& ctx : contexts) {
        std::vector<std::string> notices;
        const auto cands = gen.generate(ctx, options, nullptr, &notices);
        for (const auto& n : notices) std::cerr << "notice: " << n << "\n";
        const std::string key = context_key(ctx);
        for (const auto& c : cands)
            out << json{{"context", key}, {"seed", c.seed}, {"steps", options.steps}, {"text", c.text}}.dump()
                << '\n';
    }
}

EvalMode parse_eval_mode(const std::string& s) {
    if (s == "standard") return EvalMode::standard;
    if (s == "upper_bound") return EvalMode::upper_bound;
    if (s == "synthetic") return EvalMode::synthetic;
    throw ConfigError("mode must be standard, upper_bound or synthetic, got '" + s + "'");
}

EvalReport cmd_eval(const LoadedRun& run, const std::vector<DialogueSample>& corpus, EvalMode mode,
                    const GenerateOptions& options, const SyntheticOracle* oracle) {
    if (corpus.empty()) throw ValidationError("eval: empty corpus");
    if (mode == EvalMode::synthetic && !oracle) throw ValidationError("eval: synthetic mode needs an oracle");
    const Generator gen(*run.model, run.vocab, run.limits);
    GenerateOptions opt = options;
    if (mode == EvalMode::standard) opt.n_samples = 1;
    if (mode == EvalMode::upper_bound) opt.n_samples = std::max<std::size_t>(opt.n_samples, 10);

    std::vector<std::string> chosen, refs;
    std::vector<std::pair<std::string, std::vector<std::string>>> per_context;
    for (const auto& s : corpus) {
        const auto cands = gen.generate(s.context, opt);
        std::vector<std::string> texts;
        for (const auto& c : cands) texts.push_back(c.text);
        if (mode == EvalMode::synthetic) {
            for (const auto& t : texts) {
                chosen.push_back(t);
                refs.push_back(s.response);
            }
            per_context.emplace_back(context_key(s.context), texts);
        } else {
            chosen.push_back(texts[mode == EvalMode::upper_bound ? best_of_n(texts, s.response) : 0]);
            refs.push_back(s.response);
        }
    }
    EvalReport report = score_responses(chosen, refs);
    report.n_contexts = corpus.size();
    report.mode = mode == EvalMode::standard ? "standard" : mode == EvalMode::upper_bound ? "upper_bound" : "synthetic";
    if (mode != EvalMode::standard) report.n_samples = corpus.size() * opt.n_samples;
    if (mode == EvalMode::synthetic) report.synthetic = synthetic_eval(per_context, *oracle);
    return report;
}

std::vector<BenchRow> cmd_bench(const LoadedRun& run, const std::vector<std::vector<Turn>>& contexts,
                                std::vector<int> step_counts, const GenerateOptions& options) {
    if (contexts.size() < 20) throw ValidationError("bench needs at least 20 contexts");
    if (step_counts.empty()) throw ConfigError("bench needs at least one step count");
    std::sort(step_counts.begin(), step_counts.end());
    step_counts.erase(std::unique(step_counts.begin(), step_counts.end()), step_counts.end());
    const Generator gen(*run.model, run.vocab, run.limits);
    GenerateOptions opt = options;
    opt.n_samples = 1;

    opt.steps = step_counts.front();
    gen.generate(contexts.front(), opt);  // warm-up

    std::vector<PhaseTimes> times(step_counts.size());
    for (const auto& ctx : contexts) {
        for (std::size_t i = 0; i < step_counts.size(); ++i) {
            opt.steps = step_counts[i];
            gen.generate(ctx, opt, &times[i]);
        }
    }
    std::vector<BenchRow> rows;
    const double n = static_cast<double>(contexts.size());
    for (std::size_t i = 0; i < step_counts.size(); ++i) {
        BenchRow r;
        r.steps = step_counts[i];
        r.contexts = contexts.size();
        r.encode_s = times[i].encode_ms / 1000.0 / n;
        r.denoise_s = times[i].denoise_ms / 1000.0 / n;
        r.decode_s = times[i].decode_ms / 1000.0 / n;
        r.total_s = r.encode_s + r.denoise_s + r.decode_s;
        rows.push_back(r);
    }
    return rows;
}

std::string bench_table(const std::vector<BenchRow>& rows) {
    std::string out = "steps   encode_s    denoise_s   decode_s    total_s\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-7d %-11.6f %-11.6f %-11.6f %-11.6f\n", r.steps, r.encode_s, r.denoise_s,
                      r.decode_s, r.total_s);
        out += buf;
    }
    return out;
}

ChatSession::ChatSession(const Generator& generator, GenerateOptions options)
    : generator_(generator), options_(options) {
    options_.n_samples = 1;
}

Candidate ChatSession::draw(const std::vector<Turn>& context) {
    GenerateOptions opt = options_;
    opt.seed = options_.seed + draws_++;
    return generator_.generate(context, opt).front();
}

Candidate ChatSession::reply(const std::string& user_text) {
    const int role = history_.empty() ? 0 : 1 - history_.back().role;
    history_.push_back({role, user_text});
    Candidate c = draw(history_);
    history_.push_back({1 - role, c.text});
    while (history_.size() > generator_.limits().max_turns) history_.erase(history_.begin());
    return c;
}

Candidate ChatSession::more() {
    if (history_.size() < 2) throw ContractError("/more needs a previous reply");
    const int role = history_.back().role;
    history_.pop_back();
    Candidate c = draw(history_);
    history_.push_back({role, c.text});
    return c;
}

void ChatSession::reset() { history_.clear(); }

void cmd_chat(const LoadedRun& run, const GenerateOptions& options, std::istream& in, std::ostream& out) {
    const Generator gen(*run.model, run.vocab, run.limits);
    ChatSession session(gen, options);
    out << "type a message; /more resamples the last reply, /reset clears history, /quit exits\n";
    std::string line;
    while (out << "> " << std::flush, std::getline(in, line)) {
        if (line == "/quit") break;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (line == "/reset") {
            session.reset();
            out << "(history cleared)\n";
            continue;
        }
        try {
            const Candidate c = line == "/more" ? session.more() : session.reply(line);
            out << c.text << "   [seed " << c.seed << "]\n";
        } catch (const ContractError& e) {
            out << "(" << e.what() << ")\n";
        }
    }
}

}  // namespace latdial
