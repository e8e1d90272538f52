#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "latdial/corpus.hpp"

namespace latdial {

// Corpus-level BLEU over normalized whitespace tokens, one reference per
// candidate, n in {1, 2}. Geometric mean of clipped precisions p_1..p_n times
// the brevity penalty. Unigram precision is unsmoothed; a higher-order
// precision with zero matches becomes 1 / (count + 1).
double bleu_n(const std::vector<std::string>& candidates, const std::vector<std::string>& references, int n);

double sentence_bleu1(const std::string& candidate, const std::string& reference);

// Unique n-grams across all responses divided by the total word count.
double distinct_n(const std::vector<std::string>& responses, int n);

// Index of the candidate with the highest sentence BLEU-1; first wins ties.
std::size_t best_of_n(const std::vector<std::string>& candidates, const std::string& reference);

struct SyntheticScores {
    double validity = 0;   // valid samples / all samples
    double diversity = 0;  // mean distinct valid responses per context
};

// Samples per context, keyed by context_key. Every key must be covered.
SyntheticScores synthetic_eval(const std::vector<std::pair<std::string, std::vector<std::string>>>& outputs,
                               const SyntheticOracle& oracle);

struct EvalReport {
    std::string mode;
    double bleu1 = 0, bleu2 = 0, distinct1 = 0, distinct2 = 0;
    std::size_t n_contexts = 0;
    std::size_t n_samples = 0;
    std::optional<SyntheticScores> synthetic;

    nlohmann::json to_json() const;
    // Fixed-order plain-text table.
    std::string table() const;
};

// Standard metrics over one chosen response per context. Distinct scores of a
// corpus without words are reported as 0.
EvalReport score_responses(const std::vector<std::string>& responses, const std::vector<std::string>& references);

}  // namespace latdial
