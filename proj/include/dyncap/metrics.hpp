#pragma once

// N-gram caption metrics. bleu() follows the original modified-precision
// formulation with the closest-reference brevity penalty and no smoothing.
// cider_d() follows the consensus-metric reference implementation: raw-count
// TF times log(N/df) IDF, candidate counts clipped by the reference, cosine
// per n, Gaussian length penalty (sigma 6), scaled by 10 and averaged over
// n = 1..4.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace dyncap {

using TokenSeq = std::vector<std::string>;

inline constexpr int kMaxNgram = 4;

// Clipped match count and candidate n-gram total for order n.
std::pair<std::int64_t, std::int64_t> bleu_clipped_counts(const TokenSeq& candidate,
                                                          const std::vector<TokenSeq>& refs,
                                                          int n);

// BLEU-n in [0,1]; empty candidates score 0 rather than erroring.
double bleu(const TokenSeq& candidate, const std::vector<TokenSeq>& refs, int n);

// Corpus document frequencies over n-grams (n = 1..4), frozen after build.
// One "document" is one sample's whole reference set. For the degenerate
// single-document corpus the IDF base is clamped to 2 so that identical
// sentences still score (plain log(N/df) would zero every vector there).
class NGramStats {
public:
    static NGramStats build(const std::vector<std::vector<TokenSeq>>& refs_per_sample);

    bool empty() const { return corpus_size_ == 0; }
    std::int64_t corpus_size() const { return corpus_size_; }
    double log_ref_len() const { return log_ref_len_; }
    double doc_freq(const std::string& key) const;

private:
    std::unordered_map<std::string, std::int64_t> df_;
    std::int64_t corpus_size_ = 0;
    double log_ref_len_ = 0.0;
};

struct CiderResult {
    std::vector<double> per_sample;
    double mean = 0.0;
};

CiderResult cider_d(const std::vector<TokenSeq>& candidates,
                    const std::vector<std::vector<TokenSeq>>& refs_per_sample,
                    const NGramStats& stats);

}  // namespace dyncap
