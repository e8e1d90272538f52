#include "latdial/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "latdial/errors.hpp"

namespace latdial {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

fs::path resolve(const fs::path& base, const std::string& v) {
    fs::path p(v);
    return p.is_relative() && !base.empty() ? base / p : p;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&, const fs::path&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto sz = [&t](const std::string& k, auto field) {
            t[k] = [field](RunConfig& c, const std::string& key, const std::string& v, const fs::path&) {
                field(c) = to_size(key, v);
            };
        };
        auto dbl = [&t](const std::string& k, auto field) {
            t[k] = [field](RunConfig& c, const std::string& key, const std::string& v, const fs::path&) {
                field(c) = to_double(key, v);
            };
        };
        sz("d_model", [](RunConfig& c) -> std::size_t& { return c.model.d_model; });
        sz("encoder_layers", [](RunConfig& c) -> std::size_t& { return c.model.encoder_layers; });
        sz("decoder_layers", [](RunConfig& c) -> std::size_t& { return c.model.decoder_layers; });
        sz("heads", [](RunConfig& c) -> std::size_t& { return c.model.heads; });
        sz("ffn", [](RunConfig& c) -> std::size_t& { return c.model.ffn; });
        sz("vocab_size", [](RunConfig& c) -> std::size_t& { return c.model.vocab_size; });
        sz("max_positions", [](RunConfig& c) -> std::size_t& { return c.model.max_positions; });
        sz("denoiser_layers", [](RunConfig& c) -> std::size_t& { return c.model.denoiser.layers; });
        sz("denoiser_heads", [](RunConfig& c) -> std::size_t& { return c.model.denoiser.heads; });
        sz("denoiser_ffn", [](RunConfig& c) -> std::size_t& { return c.model.denoiser.ffn; });
        sz("time_dim", [](RunConfig& c) -> std::size_t& { return c.model.denoiser.time_dim; });
        sz("total_steps", [](RunConfig& c) -> std::size_t& { return c.train.total_steps; });
        sz("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
        sz("eval_every", [](RunConfig& c) -> std::size_t& { return c.train.eval_every; });
        sz("max_context", [](RunConfig& c) -> std::size_t& { return c.limits.max_context; });
        sz("max_response", [](RunConfig& c) -> std::size_t& { return c.limits.max_response; });
        sz("synthetic_contexts", [](RunConfig& c) -> std::size_t& { return c.synthetic_contexts; });
        sz("synthetic_valid", [](RunConfig& c) -> std::size_t& { return c.synthetic_valid; });
        sz("synthetic_draws", [](RunConfig& c) -> std::size_t& { return c.synthetic_draws; });
        dbl("schedule_offset", [](RunConfig& c) -> double& { return c.model.schedule_offset; });
        dbl("peak_lr", [](RunConfig& c) -> double& { return c.train.peak_lr; });
        dbl("warmup_init_lr", [](RunConfig& c) -> double& { return c.train.warmup_init_lr; });
        dbl("grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });
        dbl("weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
        dbl("weight_nll", [](RunConfig& c) -> double& { return c.train.weights.nll; });
        dbl("weight_bow", [](RunConfig& c) -> double& { return c.train.weights.bow; });
        dbl("weight_ld", [](RunConfig& c) -> double& { return c.train.weights.ld; });

        t["max_turns"] = [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) {
            c.limits.max_turns = c.model.max_turns = to_size(k, v);
        };
        t["diffusion_steps"] = [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) {
            const std::size_t n = to_size(k, v);
            if (n > 1000000) throw ConfigError(k + ": too large");
            c.model.diffusion_steps = static_cast<int>(n);
        };
        t["use_latent"] = [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) {
            c.model.use_latent = to_bool(k, v);
        };
        t["synthetic"] = [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) {
            c.synthetic = to_bool(k, v);
        };
        t["warmup_steps"] = [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) {
            c.train.warmup_steps = to_size(k, v);
        };
        t["seed"] = [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) {
            c.train.seed = to_size(k, v);
        };
        t["synthetic_seed"] = [](RunConfig& c, const std::string& k, const std::string& v, const fs::path&) {
            c.synthetic_seed = to_size(k, v);
            c.synthetic_seed_set = true;
        };
        t["train_file"] = [](RunConfig& c, const std::string&, const std::string& v, const fs::path& b) {
            c.train_file = resolve(b, v);
        };
        t["dev_file"] = [](RunConfig& c, const std::string&, const std::string& v, const fs::path& b) {
            c.dev_file = resolve(b, v);
        };
        t["out_dir"] = [](RunConfig& c, const std::string&, const std::string& v, const fs::path& b) {
            c.out_dir = resolve(b, v);
        };
        return t;
    }();
    return table;
}

}  // namespace

std::vector<std::string> RunConfig::problems() const {
    std::vector<std::string> out;
    auto check = [&out](auto&& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            out.emplace_back(e.what());
        }
    };
    check([&] { model.validate(); });
    check([&] { train.validate(); });
    if (limits.max_context == 0) out.emplace_back("max_context must be positive");
    if (limits.max_response < 2) out.emplace_back("max_response must be at least 2");
    if (limits.max_turns == 0) out.emplace_back("max_turns must be positive");
    if (limits.max_context > model.max_positions) out.emplace_back("max_context must not exceed max_positions");
    if (limits.max_response + 1 > model.max_positions) out.emplace_back("max_response must be below max_positions");
    if (synthetic) {
        if (synthetic_contexts == 0) out.emplace_back("synthetic_contexts must be positive");
        if (synthetic_valid < 4 || synthetic_valid > 12) out.emplace_back("synthetic_valid must lie in [4, 12]");
        if (synthetic_draws == 0) out.emplace_back("synthetic_draws must be positive");
        if (!train_file.empty() || !dev_file.empty())
            out.emplace_back("synthetic: train_file/dev_file must not be set together with synthetic = true");
    } else {
        if (train_file.empty()) out.emplace_back("train_file is required unless synthetic = true");
        if (dev_file.empty()) out.emplace_back("dev_file is required unless synthetic = true");
    }
    return out;
}

void RunConfig::validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& s : p) msg += "\n  " + s;
    throw ConfigError(msg);
}

json RunConfig::to_json() const {
    json j = latdial::to_json(model);
    j["total_steps"] = train.total_steps;
    j["batch_size"] = train.batch_size;
    j["peak_lr"] = train.peak_lr;
    j["warmup_init_lr"] = train.warmup_init_lr;
    j["warmup_steps"] = train.resolved_warmup();
    j["seed"] = train.seed;
    j["eval_every"] = train.eval_every;
    j["grad_clip"] = train.grad_clip;
    j["weight_decay"] = train.weight_decay;
    j["weight_nll"] = train.weights.nll;
    j["weight_bow"] = train.weights.bow;
    j["weight_ld"] = train.weights.ld;
    j["max_context"] = limits.max_context;
    j["max_response"] = limits.max_response;
    j["synthetic"] = synthetic;
    if (synthetic) {
        j["synthetic_contexts"] = synthetic_contexts;
        j["synthetic_valid"] = synthetic_valid;
        j["synthetic_draws"] = synthetic_draws;
        j["synthetic_seed"] = synthetic_seed_set ? synthetic_seed : train.seed;
    } else {
        j["train_file"] = train_file.string();
        j["dev_file"] = dev_file.string();
    }
    j["out_dir"] = out_dir.string();
    return j;
}

RunConfig parse_run_config(const std::string& text, const fs::path& base_dir) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string s = trim(line);
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(std::string_view(s).substr(0, eq));
        const std::string value = trim(std::string_view(s).substr(eq + 1));
        auto it = setters().find(key);
        if (it == setters().end())
            throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (value.empty()) throw ConfigError(key + ": missing value on line " + std::to_string(lineno));
        it->second(cfg, key, value, base_dir);
    }
    cfg.model.denoiser.d_model = cfg.model.d_model;
    return cfg;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    RunConfig cfg = parse_run_config(ss.str(), path.parent_path());
    if (cfg.out_dir == "run") cfg.out_dir = path.parent_path() / "run";
    return cfg;
}

}  // namespace latdial
