#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <vector>

#include "dyncap/errors.hpp"
#include "dyncap/metrics.hpp"
#include "dyncap/vocab.hpp"

using namespace dyncap;

namespace {
TokenSeq toks(const std::string& s) { return Vocabulary::tokenize(s); }
}  // namespace

TEST_CASE("bleu basics") {
    const auto ref = toks("a red train is on the tracks now");
    CHECK(bleu(ref, {ref}, 4) == 1.0);

    CHECK(bleu(toks("zebra qux"), {toks("a red train")}, 1) == 0.0);
    CHECK(bleu({}, {ref}, 4) == 0.0);

    // "the cat sat" vs "the cat sat down": p1 = 1, BP = exp(1 - 4/3)
    const double got = bleu(toks("the cat sat"), {toks("the cat sat down")}, 1);
    CHECK(got == doctest::Approx(std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-12));

    // candidate shorter than n scores 0 for that order
    CHECK(bleu(toks("the cat sat"), {toks("the cat sat")}, 4) == 0.0);

    CHECK_THROWS_AS(bleu(ref, {ref}, 5), ConfigError);
}

TEST_CASE("bleu brevity penalty picks the closest reference length") {
    const auto cand = toks("a b c d");
    // closest ref has length 4 -> BP = 1
    CHECK(bleu(cand, {toks("a b c d"), toks("a b c d e f g h")}, 1) == doctest::Approx(1.0));
    // only longer refs: closest is length 6 -> BP = exp(1 - 6/4)
    const double got = bleu(cand, {toks("a b c d e f"), toks("a b c d e f g h")}, 1);
    CHECK(got == doctest::Approx(std::exp(1.0 - 6.0 / 4.0)).epsilon(1e-12));
}

TEST_CASE("bleu is invariant to reference order") {
    const auto cand = toks("a man rides a red bike");
    std::vector<TokenSeq> refs{toks("a man rides a bike"), toks("a person on a red bike"),
                               toks("the man is riding")};
    const double base = bleu(cand, refs, 4);
    std::vector<TokenSeq> shuffled{refs[2], refs[0], refs[1]};
    CHECK(bleu(cand, shuffled, 4) == base);
}

TEST_CASE("clipped match counts never decrease when a reference gains a matching n-gram") {
    const auto cand = toks("the cat sat on the mat");
    std::vector<TokenSeq> refs{toks("a dog sat on a rug")};
    for (int n = 1; n <= 2; ++n) {
        const auto before = bleu_clipped_counts(cand, refs, n);
        std::vector<TokenSeq> grown{toks("a dog sat on a rug the cat")};
        const auto after = bleu_clipped_counts(cand, grown, n);
        CHECK(after.first >= before.first);
        CHECK(after.second == before.second);
    }
}

TEST_CASE("cider_d: identical candidate in a one-document corpus scores the maximum 10") {
    std::vector<std::vector<TokenSeq>> refs{{toks("a small red dog runs fast")}};
    auto stats = NGramStats::build(refs);
    auto res = cider_d({toks("a small red dog runs fast")}, refs, stats);
    CHECK(res.per_sample[0] == doctest::Approx(10.0).epsilon(1e-9));

    // disjoint n-grams score 0
    auto zero = cider_d({toks("zebra purple quux")}, refs, stats);
    CHECK(zero.per_sample[0] == 0.0);

    // empty candidates score 0 and do not crash
    auto empty = cider_d({TokenSeq{}}, refs, stats);
    CHECK(empty.per_sample[0] == 0.0);
}

TEST_CASE("cider_d matches an independent transcription on a toy corpus") {
    // three samples, two references each
    std::vector<std::vector<TokenSeq>> refs{
        {toks("a man is riding a bike"), toks("the man rides a red bike")},
        {toks("two dogs play in the park"), toks("dogs playing on green grass")},
        {toks("a red train on the tracks"), toks("the train is red")},
    };
    std::vector<TokenSeq> cands{toks("a man rides a bike"), toks("dogs play in the park"),
                                toks("a red train on tracks")};
    auto stats = NGramStats::build(refs);
    auto got = cider_d(cands, refs, stats);

    // transcription of the published formulation, written independently on maps
    const double sigma = 6.0;
    const double logN = std::log(static_cast<double>(refs.size()));
    auto counts = [](const TokenSeq& t, int n) {
        std::unordered_map<std::string, double> m;
        for (int i = 0; i + n <= static_cast<int>(t.size()); ++i) {
            std::string k;
            for (int j = 0; j < n; ++j) k += t[i + j] + "|";
            m[k] += 1.0;
        }
        return m;
    };
    // document frequencies
    std::unordered_map<std::string, double> df;
    for (const auto& sample : refs) {
        std::unordered_map<std::string, bool> seen;
        for (const auto& r : sample)
            for (int n = 1; n <= 4; ++n)
                for (const auto& [k, v] : counts(r, n)) seen[k] = true;
        for (const auto& [k, v] : seen) df[k] += 1.0;
    }
    auto tfidf = [&](const TokenSeq& t, int n) {
        auto m = counts(t, n);
        for (auto& [k, v] : m) v *= logN - std::log(std::max(1.0, df.count(k) ? df[k] : 0.0));
        return m;
    };
    auto norm_of = [](const std::unordered_map<std::string, double>& m) {
        double s = 0;
        for (const auto& [k, v] : m) s += v * v;
        return std::sqrt(s);
    };
    for (std::size_t i = 0; i < cands.size(); ++i) {
        double score_n[4] = {0, 0, 0, 0};
        for (const auto& r : refs[i]) {
            const double delta = static_cast<double>(cands[i].size()) - static_cast<double>(r.size());
            const double pen = std::exp(-delta * delta / (2 * sigma * sigma));
            for (int n = 1; n <= 4; ++n) {
                auto hv = tfidf(cands[i], n);
                auto rv = tfidf(r, n);
                double dot = 0;
                for (const auto& [k, v] : hv) {
                    auto it = rv.find(k);
                    if (it != rv.end()) dot += std::min(v, it->second) * it->second;
                }
                const double nh = norm_of(hv), nr = norm_of(rv);
                double val = (nh != 0 && nr != 0) ? dot / (nh * nr) : 0.0;
                score_n[n - 1] += val * pen;
            }
        }
        double expect = (score_n[0] + score_n[1] + score_n[2] + score_n[3]) / 4.0;
        expect = expect / static_cast<double>(refs[i].size()) * 10.0;
        CHECK(got.per_sample[i] == doctest::Approx(expect).epsilon(1e-6));
    }

    // reference-order invariance
    std::vector<std::vector<TokenSeq>> swapped = refs;
    std::swap(swapped[0][0], swapped[0][1]);
    auto got2 = cider_d(cands, swapped, stats);
    CHECK(got2.per_sample[0] == doctest::Approx(got.per_sample[0]).epsilon(1e-12));

    // deterministic, nonnegative, bounded by the 10-per-n cap
    for (double s : got.per_sample) {
        CHECK(s >= 0.0);
        CHECK(s <= 10.0);
    }
}

TEST_CASE("cider_d rejects empty stats or missing references") {
    NGramStats empty;
    CHECK_THROWS_AS(cider_d({toks("a")}, {{toks("a")}}, empty), ConfigError);

    std::vector<std::vector<TokenSeq>> refs{{toks("a b c")}};
    auto stats = NGramStats::build(refs);
    CHECK_THROWS_AS(cider_d({toks("a")}, {std::vector<TokenSeq>{}}, stats), ConfigError);
}
