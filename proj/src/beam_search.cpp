#include "latdial/beam_search.hpp"

#include <algorithm>
#include <cmath>

#include "latdial/errors.hpp"

namespace latdial {

BeamHypothesis beam_search(const NextTokenScorer& scorer, const BeamOptions& options) {
    if (options.beam_size < 1) throw ContractError("beam_size must be >= 1");
    if (options.max_len < 1) throw ContractError("max_len must be >= 1");

    struct Candidate {
        std::size_t parent;
        int token;
        double log_prob;
    };

    std::vector<BeamHypothesis> live{BeamHypothesis{}};
    std::vector<BeamHypothesis> finished;
    for (std::size_t step = 0; step < options.max_len && !live.empty(); ++step) {
        std::vector<std::vector<int>> prefixes;
        prefixes.reserve(live.size());
        for (const auto& h : live) prefixes.push_back(h.ids);
        const auto scores = scorer(prefixes);
        if (scores.size() != live.size()) throw DimensionError("scorer returned wrong number of rows");

        std::vector<Candidate> cands;
        for (std::size_t i = 0; i < live.size(); ++i) {
            for (std::size_t v = 0; v < scores[i].size(); ++v) {
                const int tok = static_cast<int>(v);
                if (std::find(options.banned.begin(), options.banned.end(), tok) != options.banned.end()) continue;
                const double lp = live[i].log_prob + scores[i][v];
                if (std::isfinite(lp)) cands.push_back({i, tok, lp});
            }
        }
        // Stable: equal scores keep (parent, token) order.
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });
        if (cands.size() > options.beam_size) cands.resize(options.beam_size);

        std::vector<BeamHypothesis> next;
        for (const auto& c : cands) {
            BeamHypothesis h;
            h.ids = live[c.parent].ids;
            h.log_prob = c.log_prob;
            if (c.token == options.eos) {
                h.finished = true;
                h.score = h.log_prob / static_cast<double>(h.ids.size() + 1);
                finished.push_back(std::move(h));
            } else {
                h.ids.push_back(c.token);
                next.push_back(std::move(h));
            }
        }
        live = std::move(next);
        if (finished.size() >= options.beam_size) {
            live.clear();
            break;
        }
    }
    for (auto& h : live) {
        h.score = h.log_prob / static_cast<double>(h.ids.size());
        finished.push_back(std::move(h));
    }
    if (finished.empty()) return {};
    std::size_t best = 0;
    for (std::size_t i = 1; i < finished.size(); ++i)
        if (finished[i].score > finished[best].score) best = i;
    return finished[best];
}

}  // namespace latdial
