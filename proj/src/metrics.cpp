#include "latdial/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "latdial/errors.hpp"
#include "latdial/tokenizer.hpp"

namespace latdial {

using Words = std::vector<std::string>;
using NGram = std::vector<std::string>;

namespace {

std::map<NGram, std::size_t> ngram_counts(const Words& w, int n) {
    std::map<NGram, std::size_t> c;
    const auto k = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + k <= w.size(); ++i) ++c[NGram(w.begin() + static_cast<long>(i), w.begin() + static_cast<long>(i + k))];
    return c;
}

void check_order(int n) {
    if (n != 1 && n != 2) throw ConfigError("n-gram order must be 1 or 2, got " + std::to_string(n));
}

}  // namespace

double bleu_n(const std::vector<std::string>& candidates, const std::vector<std::string>& references, int n) {
    check_order(n);
    if (candidates.empty()) throw ValidationError("bleu: no candidates");
    if (candidates.size() != references.size())
        throw DimensionError("bleu: " + std::to_string(candidates.size()) + " candidates but " +
                             std::to_string(references.size()) + " references");
    std::vector<double> matched(static_cast<std::size_t>(n), 0), total(static_cast<std::size_t>(n), 0);
    double cand_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const Words c = word_tokens(candidates[i]);
        const Words r = word_tokens(references[i]);
        cand_len += static_cast<double>(c.size());
        ref_len += static_cast<double>(r.size());
        for (int k = 1; k <= n; ++k) {
            const auto cc = ngram_counts(c, k);
            const auto rc = ngram_counts(r, k);
            for (const auto& [g, cnt] : cc) {
                auto it = rc.find(g);
                matched[k - 1] += static_cast<double>(it == rc.end() ? 0 : std::min(cnt, it->second));
                total[k - 1] += static_cast<double>(cnt);
            }
        }
    }
    if (cand_len == 0) return 0.0;
    double log_sum = 0;
    for (int k = 1; k <= n; ++k) {
        double m = matched[k - 1];
        const double t = total[k - 1];
        double p;
        if (k == 1) {
            if (m == 0) return 0.0;
            p = m / t;
        } else {
            p = m == 0 ? 1.0 / (t + 1.0) : m / t;
        }
        log_sum += std::log(p);
    }
    const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    return bp * std::exp(log_sum / n);
}

double sentence_bleu1(const std::string& candidate, const std::string& reference) {
    return bleu_n({candidate}, {reference}, 1);
}

double distinct_n(const std::vector<std::string>& responses, int n) {
    check_order(n);
    std::set<NGram> unique;
    std::size_t words = 0;
    bool long_enough = false;
    for (const auto& r : responses) {
        const Words w = word_tokens(r);
        words += w.size();
        if (w.size() >= static_cast<std::size_t>(n)) long_enough = true;
        for (const auto& [g, _] : ngram_counts(w, n)) unique.insert(g);
    }
    if (words == 0) throw ValidationError("distinct: all responses are empty");
    if (!long_enough) throw ValidationError("distinct: no response has " + std::to_string(n) + " words");
    return static_cast<double>(unique.size()) / static_cast<double>(words);
}

std::size_t best_of_n(const std::vector<std::string>& candidates, const std::string& reference) {
    if (candidates.empty()) throw ValidationError("best_of_n: no candidates");
    std::size_t best = 0;
    double best_score = sentence_bleu1(candidates[0], reference);
    for (std::size_t i = 1; i < candidates.size(); ++i) {
        const double s = sentence_bleu1(candidates[i], reference);
        if (s > best_score) {
            best = i;
            best_score = s;
        }
    }
    return best;
}

SyntheticScores synthetic_eval(const std::vector<std::pair<std::string, std::vector<std::string>>>& outputs,
                               const SyntheticOracle& oracle) {
    if (outputs.empty()) throw ValidationError("synthetic_eval: no outputs");
    std::size_t valid = 0, samples = 0;
    double distinct_sum = 0;
    for (const auto& [key, responses] : outputs) {
        if (!oracle.covers(key)) throw ValidationError("synthetic_eval: context " + key + " is not in the oracle");
        std::set<std::string> seen;
        for (const auto& r : responses) {
            ++samples;
            if (oracle.is_valid(key, r)) {
                ++valid;
                seen.insert(normalize_text(r));
            }
        }
        distinct_sum += static_cast<double>(seen.size());
    }
    SyntheticScores s;
    s.validity = samples ? static_cast<double>(valid) / static_cast<double>(samples) : 0.0;
    s.diversity = distinct_sum / static_cast<double>(outputs.size());
    return s;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j{{"mode", mode},           {"bleu1", bleu1},         {"bleu2", bleu2},
                     {"distinct1", distinct1}, {"distinct2", distinct2}, {"n_contexts", n_contexts},
                     {"n_samples", n_samples}};
    if (synthetic) j["synthetic"] = {{"validity", synthetic->validity}, {"diversity", synthetic->diversity}};
    return j;
}

std::string EvalReport::table() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "mode        %s\ncontexts    %zu\nsamples     %zu\nBLEU-1      %.4f\nBLEU-2      %.4f\n"
                  "Distinct-1  %.4f\nDistinct-2  %.4f\n",
                  mode.c_str(), n_contexts, n_samples, bleu1, bleu2, distinct1, distinct2);
    std::string out = buf;
    if (synthetic) {
        std::snprintf(buf, sizeof buf, "validity    %.4f\ndiversity   %.4f\n", synthetic->validity,
                      synthetic->diversity);
        out += buf;
    }
    return out;
}

EvalReport score_responses(const std::vector<std::string>& responses, const std::vector<std::string>& references) {
    EvalReport r;
    r.n_contexts = responses.size();
    r.n_samples = responses.size();
    r.bleu1 = bleu_n(responses, references, 1);
    r.bleu2 = bleu_n(responses, references, 2);
    std::size_t words = 0, max_len = 0;
    for (const auto& s : responses) {
        const auto n = word_tokens(s).size();
        words += n;
        max_len = std::max(max_len, n);
    }
    r.distinct1 = words ? distinct_n(responses, 1) : 0.0;
    r.distinct2 = max_len >= 2 ? distinct_n(responses, 2) : 0.0;
    return r;
}

}  // namespace latdial
