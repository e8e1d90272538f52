#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "latdial/errors.hpp"
#include "latdial/metrics.hpp"
#include "latdial/tokenizer.hpp"

using namespace latdial;

namespace {

// Clipped unigram precision times brevity penalty, counted directly.
double hand_bleu1(const std::string& cand, const std::string& ref) {
    const auto c = word_tokens(cand), r = word_tokens(ref);
    if (c.empty()) return 0;
    std::map<std::string, int> rc;
    for (const auto& w : r) ++rc[w];
    int hits = 0;
    for (const auto& w : c)
        if (rc[w]-- > 0) ++hits;
    const double bp = c.size() >= r.size() ? 1.0 : std::exp(1.0 - static_cast<double>(r.size()) / c.size());
    return bp * hits / static_cast<double>(c.size());
}

}  // namespace

TEST_CASE("bleu hand examples") {
    CHECK(bleu_n({"the cat sat on the mat"}, {"the cat sat on the mat"}, 1) == 1.0);
    CHECK(bleu_n({"the cat sat on the mat"}, {"the cat sat on the mat"}, 2) == 1.0);
    CHECK(bleu_n({"the cat sat"}, {"the cat ran"}, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(bleu_n({"the cat sat on the mat"}, {"the cat is on the mat"}, 1) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
    CHECK(bleu_n({"the cat sat on the mat"}, {"the cat is on the mat"}, 2) ==
          doctest::Approx(std::sqrt(5.0 / 6.0 * 3.0 / 5.0)).epsilon(1e-15));
    CHECK(bleu_n({"the the the"}, {"the cat"}, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(bleu_n({"the cat"}, {"the cat sat"}, 1) == doctest::Approx(std::exp(-0.5)).epsilon(1e-15));
    // zero bigram matches fall back to 1 / (count + 1)
    CHECK(bleu_n({"a b"}, {"b a"}, 2) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
    // corpus-level pooling of counts and lengths
    CHECK(bleu_n({"a b", "d"}, {"a c", "d e f"}, 1) ==
          doctest::Approx(2.0 / 3.0 * std::exp(1.0 - 5.0 / 3.0)).epsilon(1e-15));
}

TEST_CASE("bleu of disjoint vocabularies vanishes") {
    const std::string c = "a b c d e f g h i j", r = "k l m n o p q r s t";
    CHECK(bleu_n({c}, {r}, 1) < 0.05);
    CHECK(bleu_n({c}, {r}, 2) < 0.05);
}

TEST_CASE("bleu errors and invariants") {
    CHECK_THROWS_AS(bleu_n({}, {}, 1), ValidationError);
    CHECK_THROWS_AS(bleu_n({"a"}, {"a", "b"}, 1), DimensionError);
    CHECK_THROWS_AS(bleu_n({"a"}, {"a"}, 3), ConfigError);
    const std::vector<std::string> c{"x y z", "the cat sat", "hello there"}, r{"x z", "the dog sat", "hello you"};
    std::vector<std::size_t> idx{0, 1, 2};
    const double b1 = bleu_n(c, r, 1), b2 = bleu_n(c, r, 2);
    while (std::next_permutation(idx.begin(), idx.end())) {
        std::vector<std::string> pc, pr;
        for (auto i : idx) pc.push_back(c[i]), pr.push_back(r[i]);
        CHECK(bleu_n(pc, pr, 1) == doctest::Approx(b1).epsilon(1e-15));
        CHECK(bleu_n(pc, pr, 2) == doctest::Approx(b2).epsilon(1e-15));
    }
    CHECK(b1 >= 0);
    CHECK(b1 <= 1);
}

TEST_CASE("distinct hand examples") {
    CHECK(distinct_n({"a b a b"}, 1) == 0.5);
    CHECK(distinct_n({"a b a b"}, 2) == 0.5);
    CHECK(distinct_n({"a b c d"}, 1) == 1.0);
    CHECK(distinct_n({"a b", "b c"}, 1) == 0.75);
    CHECK(distinct_n({"a b", "b c"}, 2) == 0.5);
    CHECK(distinct_n({"a b", "a b"}, 2) == 0.25);
    CHECK(distinct_n({"a", "b c"}, 2) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(distinct_n({"b c", "a"}, 2) == distinct_n({"a", "b c"}, 2));
    CHECK_THROWS_AS(distinct_n({"", "  "}, 1), ValidationError);
    CHECK_THROWS_AS(distinct_n({"a", "b"}, 2), ValidationError);
    CHECK_THROWS_AS(distinct_n({"a"}, 0), ConfigError);
}

TEST_CASE("best of n") {
    CHECK(best_of_n({"only one"}, "anything") == 0);
    CHECK(best_of_n({"the cat sat", "zz yy"}, "the cat sat") == 0);
    CHECK(best_of_n({"zz yy", "the cat sat"}, "the cat sat") == 1);
    CHECK(best_of_n({"a b", "a b"}, "a b") == 0);
    CHECK_THROWS_AS(best_of_n({}, "x"), ValidationError);

    const std::string ref = "i would like a cup of tea please";
    const std::vector<std::string> near{"i would like tea", "i would like a cup of coffee please",
                                        "a cup of tea would be nice"};
    std::vector<double> scores;
    for (const auto& c : near) {
        scores.push_back(hand_bleu1(c, ref));
        CHECK(sentence_bleu1(c, ref) == doctest::Approx(scores.back()).epsilon(1e-15));
    }
    const auto expected = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
    const std::size_t picked = best_of_n(near, ref);
    CHECK(picked == expected);
    for (const auto& c : near) CHECK(sentence_bleu1(near[picked], ref) >= sentence_bleu1(c, ref));
}

TEST_CASE("synthetic scoring") {
    SyntheticOracle o;
    o.valid["k1"] = {"r1 x", "r2 x", "r3 x", "r4 x", "r5 x", "r6 x", "r7 x", "r8 x"};
    o.valid["k2"] = {"s1", "s2"};
    auto s = synthetic_eval({{"k1", {"r1 x", "r1 x", "r1 x"}}}, o);
    CHECK(s.validity == 1.0);
    CHECK(s.diversity == 1.0);
    s = synthetic_eval({{"k1", {"r1 x", "r2 x", "r3 x", "r2 x", "junk"}}}, o);
    CHECK(s.validity == 0.8);
    CHECK(s.diversity == 3.0);
    s = synthetic_eval({{"k1", {"junk", "r1 x"}}, {"k2", {"s1", "s2"}}}, o);
    CHECK(s.validity == 0.75);
    CHECK(s.diversity == 1.5);
    CHECK(synthetic_eval({{"k2", {"s3", "random words"}}}, o).validity == 0.0);
    CHECK_THROWS_AS(synthetic_eval({{"missing", {"s1"}}}, o), ValidationError);
}

TEST_CASE("report scoring and formatting") {
    const EvalReport r = score_responses({"the cat sat", "a b a b"}, {"the cat ran", "a b"});
    CHECK(r.n_samples == 2);
    CHECK(r.bleu1 == doctest::Approx(bleu_n({"the cat sat", "a b a b"}, {"the cat ran", "a b"}, 1)));
    CHECK(r.distinct1 == doctest::Approx(5.0 / 7.0));
    for (double v : {r.bleu1, r.bleu2, r.distinct1, r.distinct2}) {
        CHECK(v >= 0);
        CHECK(v <= 1);
    }
    const EvalReport empty = score_responses({"", ""}, {"a", "b"});
    CHECK(empty.bleu1 == 0);
    CHECK(empty.distinct1 == 0);
    const auto j = r.to_json();
    CHECK(j.at("bleu1").get<double>() == r.bleu1);
    CHECK_FALSE(j.contains("synthetic"));
    CHECK(r.table().find("Distinct-2") != std::string::npos);
}
