#pragma once

#include <functional>
#include <vector>

#include "latdial/tensor.hpp"

namespace latdial {

// Next-token log-probabilities, one row per prefix (prefixes hold generated
// ids only, no BOS).
using NextTokenScorer = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>& prefixes)>;

struct BeamOptions {
    std::size_t beam_size = 5;
    std::size_t max_len = 32;
    int eos = 2;
    std::vector<int> banned;  // never expanded
};

struct BeamHypothesis {
    std::vector<int> ids;  // without EOS
    double log_prob = 0;
    double score = 0;      // log_prob / (length including EOS when finished)
    bool finished = false;
};

// Ranks live prefixes by cumulative log-probability and finished hypotheses by
// length-normalized log-probability. Stops once beam_size hypotheses have
// finished or max_len tokens were generated; unfinished survivors compete
// with their own normalized score. Ties resolve to the earlier hypothesis.
BeamHypothesis beam_search(const NextTokenScorer& scorer, const BeamOptions& options);

}  // namespace latdial
