#include "latdial/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>

#include "json.hpp"
#include "latdial/errors.hpp"
#include "latdial/serialize.hpp"

namespace latdial {

using nlohmann::json;

void validate_sample(const DialogueSample& sample, const std::string& where) {
    if (sample.context.empty()) throw ValidationError(where + ": context has no turns");
    for (std::size_t i = 0; i < sample.context.size(); ++i) {
        const int role = sample.context[i].role;
        if (role != 0 && role != 1) throw ValidationError(where + ": role must be 0 or 1");
        if (i > 0 && role == sample.context[i - 1].role)
            throw ValidationError(where + ": roles do not alternate at turn " + std::to_string(i));
    }
    if (normalize_text(sample.response).empty()) throw ValidationError(where + ": empty response");
}

std::vector<DialogueSample> load_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open corpus " + path.string());
    std::vector<DialogueSample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.filename().string() + ":" + std::to_string(line_no);
        DialogueSample s;
        try {
            const json rec = json::parse(line);
            if (!rec.contains("context") || !rec["context"].is_array())
                throw ValidationError(where + ": missing context array");
            if (!rec.contains("response") || !rec["response"].is_string())
                throw ValidationError(where + ": missing response string");
            for (const auto& t : rec["context"]) {
                if (!t.contains("role") || !t.contains("text"))
                    throw ValidationError(where + ": turn needs role and text");
                s.context.push_back({t["role"].get<int>(), t["text"].get<std::string>()});
            }
            s.response = rec["response"].get<std::string>();
        } catch (const json::exception& e) {
            throw ValidationError(where + ": " + e.what());
        }
        validate_sample(s, where);
        out.push_back(std::move(s));
    }
    return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const DialogueSample> samples) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write corpus " + path.string());
    for (const auto& s : samples) {
        json ctx = json::array();
        for (const auto& t : s.context) ctx.push_back({{"role", t.role}, {"text", t.text}});
        os << json{{"context", ctx}, {"response", s.response}}.dump() << '\n';
    }
}

std::string context_key(std::span<const Turn> context) {
    std::string flat;
    for (const auto& t : context) {
        flat += std::to_string(t.role);
        flat += ':';
        flat += normalize_text(t.text);
        flat += '\n';
    }
    return fnv1a_hex(flat);
}

namespace {

struct ContextRow {
    std::vector<int> tokens, turns, roles;
};

ContextRow encode_context_row(std::span<const Turn> context, const Vocab& vocab, const BatchLimits& limits,
                              std::vector<std::string>& notices, std::size_t row) {
    std::vector<std::vector<int>> per_turn;
    per_turn.reserve(context.size());
    for (const auto& t : context) {
        auto ids = vocab.encode(t.text);
        ids.push_back(special::kSep);
        per_turn.push_back(std::move(ids));
    }
    // Drop whole turns from the front until the rest fits.
    std::size_t first = 0;
    std::size_t total = 0;
    for (const auto& ids : per_turn) total += ids.size();
    while (first + 1 < per_turn.size() &&
           (total > limits.max_context || per_turn.size() - first > limits.max_turns)) {
        total -= per_turn[first].size();
        ++first;
    }
    if (first > 0)
        notices.push_back("row " + std::to_string(row) + ": dropped " + std::to_string(first) +
                          " oldest context turn(s)");
    ContextRow out;
    for (std::size_t i = first; i < per_turn.size(); ++i) {
        const int turn_id = static_cast<int>(per_turn.size() - i);
        for (int id : per_turn[i]) {
            out.tokens.push_back(id);
            out.turns.push_back(turn_id);
            out.roles.push_back(context[i].role);
        }
    }
    if (out.tokens.size() > limits.max_context) {
        const auto cut = static_cast<long>(out.tokens.size() - limits.max_context);
        out.tokens.erase(out.tokens.begin(), out.tokens.begin() + cut);
        out.turns.erase(out.turns.begin(), out.turns.begin() + cut);
        out.roles.erase(out.roles.begin(), out.roles.begin() + cut);
        notices.push_back("row " + std::to_string(row) + ": last turn truncated to " +
                          std::to_string(limits.max_context) + " tokens");
    }
    return out;
}

IdGrid make_grid(std::size_t rows, std::size_t cols) { return IdGrid{rows, cols, std::vector<int>(rows * cols, 0)}; }

void fill_context(EncodedBatch& b, const std::vector<ContextRow>& rows) {
    std::size_t len = 1;
    for (const auto& r : rows) len = std::max(len, r.tokens.size());
    b.ctx_tokens = make_grid(rows.size(), len);
    b.ctx_turns = make_grid(rows.size(), len);
    b.ctx_roles = make_grid(rows.size(), len);
    b.ctx_positions = make_grid(rows.size(), len);
    b.ctx_mask.assign(rows.size() * len, 0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < rows[r].tokens.size(); ++c) {
            b.ctx_tokens.at(r, c) = rows[r].tokens[c];
            b.ctx_turns.at(r, c) = rows[r].turns[c];
            b.ctx_roles.at(r, c) = rows[r].roles[c];
            b.ctx_positions.at(r, c) = static_cast<int>(c);
            b.ctx_mask[r * len + c] = 1;
        }
    }
}

}  // namespace

EncodedBatch build_context_batch(std::span<const std::vector<Turn>> contexts, const Vocab& vocab,
                                 const BatchLimits& limits) {
    if (contexts.empty()) throw ContractError("build_context_batch: no contexts");
    EncodedBatch b;
    std::vector<ContextRow> rows;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        if (contexts[i].empty()) throw ValidationError("context " + std::to_string(i) + " has no turns");
        rows.push_back(encode_context_row(contexts[i], vocab, limits, b.notices, i));
        b.source_index.push_back(i);
    }
    b.batch = rows.size();
    fill_context(b, rows);
    return b;
}

EncodedBatch build_batch(std::span<const DialogueSample> samples, const Vocab& vocab, const BatchLimits& limits) {
    if (samples.empty()) throw ContractError("build_batch: no samples");
    EncodedBatch b;
    std::vector<ContextRow> rows;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto resp = vocab.encode(samples[i].response);
        if (resp.size() + 1 > limits.max_response) {
            b.notices.push_back("sample " + std::to_string(i) + ": response of " + std::to_string(resp.size()) +
                                " tokens exceeds max_response, skipped");
            continue;
        }
        rows.push_back(encode_context_row(samples[i].context, vocab, limits, b.notices, b.batch));
        b.response_ids.push_back(std::move(resp));
        b.source_index.push_back(i);
        ++b.batch;
    }
    if (b.batch == 0) throw ValidationError("build_batch: every sample was skipped");
    fill_context(b, rows);

    std::size_t lr = 1;
    for (const auto& r : b.response_ids) lr = std::max(lr, r.size() + 1);
    b.dec_input = make_grid(b.batch, lr);
    b.dec_target = make_grid(b.batch, lr);
    b.post_input = make_grid(b.batch, lr);
    b.resp_mask.assign(b.batch * lr, 0);
    b.post_mask.assign(b.batch * lr, 0);
    for (std::size_t r = 0; r < b.batch; ++r) {
        const auto& ids = b.response_ids[r];
        b.dec_input.at(r, 0) = special::kBos;
        b.post_input.at(r, 0) = special::kLatent;
        for (std::size_t c = 0; c < ids.size(); ++c) {
            b.dec_input.at(r, c + 1) = ids[c];
            b.post_input.at(r, c + 1) = ids[c];
            b.dec_target.at(r, c) = ids[c];
        }
        b.dec_target.at(r, ids.size()) = special::kEos;
        for (std::size_t c = 0; c <= ids.size(); ++c) {
            b.resp_mask[r * lr + c] = 1;
            b.post_mask[r * lr + c] = 1;
        }
    }
    return b;
}

// ---- synthetic corpus -----------------------------------------------------------

namespace {

const std::vector<std::string> kObjects = {"car",   "lamp",   "bike",  "phone",  "guitar", "sofa",
                                           "camera", "watch", "kettle", "jacket", "laptop", "boat"};

const std::vector<std::string> kQuestions = {
    "what do you think about the {} ?", "do you want the {} ?",        "have you seen my new {} ?",
    "should we get a {} ?",             "tell me about the {} .",      "how do you feel about the {} ?",
    "is the {} any good ?",             "would you like a {} ?",       "any thoughts on the {} ?",
    "can we talk about the {} ?"};

const std::vector<std::string> kGreetings = {"", "hi there !", "good morning ."};

const std::vector<std::string> kAnswers = {
    "i really like the {}",         "the {} is too expensive",       "my sister bought a {} last week",
    "no thanks , i do not need a {}", "what color is the {} ?",      "i have never seen such a {}",
    "maybe later , the {} can wait", "that {} looks great",          "we should buy a new {}",
    "i lost my {} yesterday",        "the old {} still works",       "ask my brother about the {}"};

std::string fill(const std::string& pattern, const std::string& object) {
    std::string out = pattern;
    out.replace(out.find("{}"), 2, object);
    return out;
}

}  // namespace

bool SyntheticOracle::is_valid(const std::string& key, std::string_view response) const {
    auto it = valid.find(key);
    if (it == valid.end()) throw ValidationError("context " + key + " is not covered by the oracle");
    const std::string norm = normalize_text(response);
    return std::find(it->second.begin(), it->second.end(), norm) != it->second.end();
}

std::size_t SyntheticOracle::total_responses() const {
    std::size_t n = 0;
    for (const auto& [_, v] : valid) n += v.size();
    return n;
}

void SyntheticOracle::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write oracle " + path.string());
    os << json{{"seed", seed}, {"contexts", valid}}.dump(1) << '\n';
}

SyntheticOracle SyntheticOracle::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read oracle " + path.string());
    SyntheticOracle o;
    try {
        const json j = json::parse(is);
        o.seed = j.at("seed").get<std::uint64_t>();
        o.valid = j.at("contexts").get<std::map<std::string, std::vector<std::string>>>();
    } catch (const json::exception& e) {
        throw ValidationError("oracle " + path.string() + ": " + e.what());
    }
    return o;
}

SyntheticCorpus generate_synthetic(std::uint64_t seed, std::size_t n_contexts, std::size_t k_valid) {
    if (k_valid < 4) throw ConfigError("k_valid must be at least 4");
    if (k_valid > kAnswers.size())
        throw ConfigError("k_valid must be at most " + std::to_string(kAnswers.size()));
    const std::size_t combos = kObjects.size() * kQuestions.size() * kGreetings.size();
    if (n_contexts == 0 || n_contexts > combos)
        throw ConfigError("n_contexts must be in [1, " + std::to_string(combos) + "]");

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(combos);
    for (std::size_t i = 0; i < combos; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);

    SyntheticCorpus out;
    out.oracle.seed = seed;
    for (std::size_t i = 0; i < n_contexts; ++i) {
        const std::size_t c = order[i];
        const auto& object = kObjects[c % kObjects.size()];
        const auto& question = kQuestions[(c / kObjects.size()) % kQuestions.size()];
        const auto& greeting = kGreetings[c / (kObjects.size() * kQuestions.size())];
        std::vector<Turn> ctx;
        if (!greeting.empty()) ctx.push_back({0, greeting});
        ctx.push_back({static_cast<int>(ctx.size()), fill(question, object)});

        std::vector<std::string> valid;
        for (std::size_t k = 0; k < k_valid; ++k) valid.push_back(normalize_text(fill(kAnswers[k], object)));
        std::uniform_int_distribution<std::size_t> pick(0, k_valid - 1);
        out.train.push_back({ctx, valid[pick(rng)]});
        out.oracle.valid[context_key(ctx)] = std::move(valid);
        out.contexts.push_back(std::move(ctx));
    }
    return out;
}

std::vector<DialogueSample> resample_responses(const SyntheticCorpus& corpus, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<DialogueSample> out;
    for (const auto& ctx : corpus.contexts) {
        const auto& valid = corpus.oracle.valid.at(context_key(ctx));
        std::uniform_int_distribution<std::size_t> pick(0, valid.size() - 1);
        out.push_back({ctx, valid[pick(rng)]});
    }
    return out;
}

}  // namespace latdial
