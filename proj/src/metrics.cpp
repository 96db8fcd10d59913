#include "dyncap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

#include "dyncap/errors.hpp"

namespace dyncap {

namespace {

constexpr double kCiderSigma = 6.0;

std::string ngram_key(const TokenSeq& tokens, std::size_t start, int n) {
    std::string key;
    for (int i = 0; i < n; ++i) {
        if (i) key.push_back('\x1f');
        key += tokens[start + static_cast<std::size_t>(i)];
    }
    return key;
}

using CountMap = std::unordered_map<std::string, std::int64_t>;

CountMap ngram_counts(const TokenSeq& tokens, int n) {
    CountMap counts;
    if (static_cast<int>(tokens.size()) >= n) {
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
            ++counts[ngram_key(tokens, i, n)];
        }
    }
    return counts;
}

}  // namespace

std::pair<std::int64_t, std::int64_t> bleu_clipped_counts(const TokenSeq& candidate,
                                                          const std::vector<TokenSeq>& refs,
                                                          int n) {
    const auto cand = ngram_counts(candidate, n);
    CountMap best_ref;
    for (const auto& ref : refs) {
        for (const auto& [key, count] : ngram_counts(ref, n)) {
            auto& slot = best_ref[key];
            slot = std::max(slot, count);
        }
    }
    std::int64_t matched = 0, total = 0;
    for (const auto& [key, count] : cand) {
        total += count;
        auto it = best_ref.find(key);
        if (it != best_ref.end()) matched += std::min(count, it->second);
    }
    return {matched, total};
}

double bleu(const TokenSeq& candidate, const std::vector<TokenSeq>& refs, int n) {
    if (n < 1 || n > kMaxNgram) throw ConfigError("bleu order must be in 1..4");
    if (candidate.empty() || refs.empty()) return 0.0;

    double log_prec_sum = 0.0;
    for (int order = 1; order <= n; ++order) {
        const auto [matched, total] = bleu_clipped_counts(candidate, refs, order);
        if (matched == 0 || total == 0) return 0.0;
        log_prec_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
    }

    // closest reference length; ties go to the shorter reference
    const std::int64_t c = static_cast<std::int64_t>(candidate.size());
    std::int64_t r = static_cast<std::int64_t>(refs.front().size());
    for (const auto& ref : refs) {
        const std::int64_t len = static_cast<std::int64_t>(ref.size());
        if (std::llabs(len - c) < std::llabs(r - c) || (std::llabs(len - c) == std::llabs(r - c) && len < r)) {
            r = len;
        }
    }
    const double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
    return bp * std::exp(log_prec_sum / n);
}

NGramStats NGramStats::build(const std::vector<std::vector<TokenSeq>>& refs_per_sample) {
    NGramStats stats;
    for (const auto& refs : refs_per_sample) {
        std::set<std::string> seen;
        for (const auto& ref : refs) {
            for (int n = 1; n <= kMaxNgram; ++n) {
                for (const auto& [key, count] : ngram_counts(ref, n)) seen.insert(key);
            }
        }
        for (const auto& key : seen) ++stats.df_[key];
        ++stats.corpus_size_;
    }
    stats.log_ref_len_ = std::log(std::max<double>(2.0, static_cast<double>(stats.corpus_size_)));
    return stats;
}

double NGramStats::doc_freq(const std::string& key) const {
    auto it = df_.find(key);
    return it == df_.end() ? 0.0 : static_cast<double>(it->second);
}

namespace {

struct TfIdfVec {
    std::vector<std::unordered_map<std::string, double>> vec;  // per n
    std::vector<double> norm;                                  // per n
    std::int64_t length = 0;
};

TfIdfVec counts_to_vec(const TokenSeq& tokens, const NGramStats& stats) {
    TfIdfVec out;
    out.vec.resize(kMaxNgram);
    out.norm.assign(kMaxNgram, 0.0);
    out.length = static_cast<std::int64_t>(tokens.size());
    for (int n = 1; n <= kMaxNgram; ++n) {
        auto& v = out.vec[static_cast<std::size_t>(n - 1)];
        double norm2 = 0.0;
        for (const auto& [key, count] : ngram_counts(tokens, n)) {
            const double idf = stats.log_ref_len() - std::log(std::max(1.0, stats.doc_freq(key)));
            const double w = static_cast<double>(count) * idf;
            v[key] = w;
            norm2 += w * w;
        }
        out.norm[static_cast<std::size_t>(n - 1)] = std::sqrt(norm2);
    }
    return out;
}

// per-n similarity of candidate vs one reference, with candidate counts
// clipped by the reference and the Gaussian length penalty applied
void accumulate_sim(const TfIdfVec& hyp, const TfIdfVec& ref, std::vector<double>& score) {
    const double delta = static_cast<double>(hyp.length - ref.length);
    const double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
    for (int n = 0; n < kMaxNgram; ++n) {
        double val = 0.0;
        const auto& rv = ref.vec[static_cast<std::size_t>(n)];
        for (const auto& [key, w] : hyp.vec[static_cast<std::size_t>(n)]) {
            auto it = rv.find(key);
            if (it != rv.end()) val += std::min(w, it->second) * it->second;
        }
        const double nh = hyp.norm[static_cast<std::size_t>(n)];
        const double nr = ref.norm[static_cast<std::size_t>(n)];
        if (nh != 0.0 && nr != 0.0) val /= nh * nr;
        score[static_cast<std::size_t>(n)] += val * penalty;
    }
}

}  // namespace

CiderResult cider_d(const std::vector<TokenSeq>& candidates,
                    const std::vector<std::vector<TokenSeq>>& refs_per_sample,
                    const NGramStats& stats) {
    if (stats.empty()) throw ConfigError("cider_d needs stats built from a non-empty corpus");
    if (candidates.size() != refs_per_sample.size()) {
        throw ShapeError("cider_d candidate/reference count mismatch");
    }
    CiderResult result;
    result.per_sample.reserve(candidates.size());
    double total = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& refs = refs_per_sample[i];
        if (refs.empty()) throw ConfigError("cider_d sample " + std::to_string(i) + " has no references");
        const auto hyp = counts_to_vec(candidates[i], stats);
        std::vector<double> score(kMaxNgram, 0.0);
        for (const auto& ref : refs) accumulate_sim(hyp, counts_to_vec(ref, stats), score);
        double avg = 0.0;
        for (double s : score) avg += s;
        avg /= kMaxNgram;                                  // mean over n
        avg /= static_cast<double>(refs.size());           // mean over references
        avg *= 10.0;
        result.per_sample.push_back(avg);
        total += avg;
    }
    result.mean = candidates.empty() ? 0.0 : total / static_cast<double>(candidates.size());
    return result;
}

}  // namespace dyncap
