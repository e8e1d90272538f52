#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "latdial/app.hpp"
#include "latdial/training.hpp"

using namespace latdial;
namespace fs = std::filesystem;

namespace {

void add_generation_flags(CLI::App* cmd, GenerateOptions& g) {
    cmd->add_option("--steps", g.steps, "Denoising steps")->check(CLI::PositiveNumber);
    cmd->add_option("--eta", g.eta, "0 = deterministic DDIM, 1 = fresh noise at every step")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--seed", g.seed, "Base seed; candidate i uses seed + i");
    cmd->add_option("--beam", g.beam, "Beam size")->check(CLI::PositiveNumber);
    cmd->add_option("--max-len", g.max_len, "Maximum response tokens")->check(CLI::PositiveNumber);
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
    if (path.empty() || path == "-") return std::cout;
    file.open(path);
    if (!file) throw std::runtime_error("cannot write " + path);
    return file;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Latent diffusion dialogue generation"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, vocab_path, out_path, contexts_path, corpus_path, oracle_path;
    std::string mode = "standard";
    std::vector<std::string> turns;
    std::vector<int> bench_steps{10, 100, 1000};
    bool resume = false;
    GenerateOptions gen;
    std::size_t synth_contexts = 100, synth_valid = 8;
    std::uint64_t synth_seed = 1;

    auto* train = app.add_subcommand("train", "Train a model from a config file");
    train->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
    train->add_flag("--resume", resume, "Continue from last.ckpt in the output directory");
    train->add_option("--out-dir", out_path, "Overrides out_dir from the config");

    auto* sample = app.add_subcommand("sample", "Generate responses for contexts");
    sample->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    sample->add_option("--vocab", vocab_path, "Defaults to vocab.txt beside the checkpoint");
    sample->add_option("--contexts", contexts_path, "JSONL file of contexts")->check(CLI::ExistingFile);
    sample->add_option("--turn", turns, "Inline context turn (repeatable, oldest first)");
    sample->add_option("--n-samples", gen.n_samples, "Candidates per context")->check(CLI::PositiveNumber);
    sample->add_option("--out", out_path, "JSONL output (default stdout)");
    add_generation_flags(sample, gen);

    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a corpus");
    eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    eval->add_option("--vocab", vocab_path);
    eval->add_option("--corpus", corpus_path, "JSONL corpus with references")->required()->check(CLI::ExistingFile);
    eval->add_option("--mode", mode, "standard, upper_bound or synthetic");
    eval->add_option("--oracle", oracle_path, "Oracle JSON (synthetic mode; defaults to oracle.json beside the checkpoint)");
    eval->add_option("--n-samples", gen.n_samples, "Samples per context (upper_bound uses at least 10)");
    eval->add_option("--out", out_path, "Write the report JSON here");
    add_generation_flags(eval, gen);

    auto* bench = app.add_subcommand("bench", "Time encode, denoise and decode phases");
    bench->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    bench->add_option("--vocab", vocab_path);
    bench->add_option("--contexts", contexts_path, "JSONL contexts (at least 20)")->required()->check(CLI::ExistingFile);
    bench->add_option("--step-counts", bench_steps, "Step counts to compare");
    bench->add_option("--out", out_path, "Write rows as JSON here");
    add_generation_flags(bench, gen);

    auto* chat = app.add_subcommand("chat", "Interactive session");
    chat->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    chat->add_option("--vocab", vocab_path);
    add_generation_flags(chat, gen);

    auto* synth = app.add_subcommand("synth", "Write the synthetic one-to-many corpus");
    synth->add_option("--out", out_path, "Output directory")->required();
    synth->add_option("--seed", synth_seed);
    synth->add_option("--contexts", synth_contexts)->check(CLI::PositiveNumber);
    synth->add_option("--valid", synth_valid, "Valid responses per context")->check(CLI::Range(4, 12));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    const std::optional<fs::path> vocab = vocab_path.empty() ? std::nullopt : std::optional<fs::path>(vocab_path);
    try {
        if (*train) {
            RunConfig cfg = load_run_config(config_path);
            if (!out_path.empty()) cfg.out_dir = out_path;
            cmd_train(cfg, std::cout, resume);
        } else if (*sample) {
            std::vector<std::vector<Turn>> contexts;
            if (!contexts_path.empty()) contexts = load_contexts(contexts_path);
            if (!turns.empty()) {
                std::vector<Turn> ctx;
                for (std::size_t i = 0; i < turns.size(); ++i) ctx.push_back({static_cast<int>(i % 2), turns[i]});
                contexts.push_back(ctx);
            }
            if (contexts.empty()) throw CLI::ValidationError("sample", "give --contexts or at least one --turn");
            const LoadedRun run = load_run(checkpoint, vocab);
            std::ofstream file;
            cmd_sample(run, contexts, gen, open_out(out_path, file));
        } else if (*eval) {
            const EvalMode m = parse_eval_mode(mode);
            const LoadedRun run = load_run(checkpoint, vocab);
            std::optional<SyntheticOracle> oracle;
            if (m == EvalMode::synthetic) {
                const fs::path op = oracle_path.empty() ? run.dir / "oracle.json" : fs::path(oracle_path);
                if (!fs::exists(op)) throw std::runtime_error("synthetic mode needs an oracle; not found: " + op.string());
                oracle = SyntheticOracle::load(op);
                if (eval->count("--n-samples") == 0) gen.n_samples = 10;
            }
            const auto report = cmd_eval(run, load_jsonl(corpus_path), m, gen, oracle ? &*oracle : nullptr);
            std::cout << report.table();
            if (!out_path.empty()) {
                std::ofstream f(out_path);
                f << report.to_json().dump(2) << '\n';
            }
        } else if (*bench) {
            const LoadedRun run = load_run(checkpoint, vocab);
            const auto rows = cmd_bench(run, load_contexts(contexts_path), bench_steps, gen);
            std::cout << bench_table(rows);
            if (!out_path.empty()) {
                nlohmann::json j = nlohmann::json::array();
                for (const auto& r : rows)
                    j.push_back({{"steps", r.steps}, {"contexts", r.contexts}, {"encode_s", r.encode_s},
                                 {"denoise_s", r.denoise_s}, {"decode_s", r.decode_s}, {"total_s", r.total_s}});
                std::ofstream f(out_path);
                f << j.dump(2) << '\n';
            }
        } else if (*chat) {
            const LoadedRun run = load_run(checkpoint, vocab);
            cmd_chat(run, gen, std::cin, std::cout);
        } else if (*synth) {
            const SyntheticCorpus corpus = generate_synthetic(synth_seed, synth_contexts, synth_valid);
            const fs::path dir(out_path);
            fs::create_directories(dir);
            write_jsonl(dir / "train.jsonl", corpus.train);
            write_jsonl(dir / "dev.jsonl", resample_responses(corpus, synth_seed + 1));
            corpus.oracle.save(dir / "oracle.json");
            std::cout << "wrote " << corpus.train.size() << " contexts to " << dir.string() << "\n";
        }
    } catch (const CLI::Error& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
