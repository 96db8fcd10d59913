#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace dyncap {

// Token <-> id bijection with fixed reserved ids.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;

    Vocabulary();

    int add(const std::string& token);
    int id(const std::string& token) const;  // kUnk if absent
    const std::string& token(int id) const;
    bool contains(const std::string& token) const;
    int size() const { return static_cast<int>(tokens_.size()); }

    // Whitespace tokenization, lowercased.
    static std::vector<std::string> tokenize(const std::string& text);
    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;  // skips reserved ids

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

// A padded batch of caption token sequences. Rows are
// [BOS, w1..wn, EOS, PAD...]; length counts BOS and EOS.
struct CaptionBatch {
    int batch = 0;
    int max_len = 0;
    std::vector<int> ids;      // [batch, max_len] row-major
    std::vector<int> lengths;  // [batch]
    std::vector<std::vector<std::vector<int>>> refs;  // per sample, reference token seqs (no BOS/EOS)

    static CaptionBatch from_token_ids(const std::vector<std::vector<int>>& captions);
    int at(int b, int t) const { return ids[static_cast<std::size_t>(b) * max_len + t]; }
};

}  // namespace dyncap
