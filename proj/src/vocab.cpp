#include "dyncap/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "dyncap/errors.hpp"

namespace dyncap {

Vocabulary::Vocabulary() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t);
}

int Vocabulary::add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
}

int Vocabulary::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw ShapeError("token id " + std::to_string(id) + " out of vocab");
    return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) > 0; }

std::vector<std::string> Vocabulary::tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
    std::vector<int> out;
    for (const auto& tok : tokenize(text)) out.push_back(id(tok));
    return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == kPad || id == kBos || id == kEos) continue;
        if (!out.empty()) out.push_back(' ');
        out += token(id);
    }
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write vocab file " + path);
    for (const auto& t : tokens_) f << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read vocab file " + path);
    Vocabulary v;
    std::string line;
    int n = 0;
    while (std::getline(f, line)) {
        if (n < 4) {
            // Reserved rows must match the fixed ids.
            if (line != v.token(n)) {
                throw IoError("vocab file " + path + " reserved token mismatch at line " +
                              std::to_string(n));
            }
        } else {
            v.add(line);
        }
        ++n;
    }
    return v;
}

CaptionBatch CaptionBatch::from_token_ids(const std::vector<std::vector<int>>& captions) {
    CaptionBatch b;
    b.batch = static_cast<int>(captions.size());
    int longest = 0;
    for (const auto& c : captions) longest = std::max(longest, static_cast<int>(c.size()));
    b.max_len = longest + 2;  // BOS + EOS
    b.ids.assign(static_cast<std::size_t>(b.batch) * b.max_len, Vocabulary::kPad);
    b.lengths.resize(static_cast<std::size_t>(b.batch));
    for (int i = 0; i < b.batch; ++i) {
        int* row = b.ids.data() + static_cast<std::size_t>(i) * b.max_len;
        row[0] = Vocabulary::kBos;
        const auto& c = captions[static_cast<std::size_t>(i)];
        std::copy(c.begin(), c.end(), row + 1);
        row[1 + c.size()] = Vocabulary::kEos;
        b.lengths[static_cast<std::size_t>(i)] = static_cast<int>(c.size()) + 2;
    }
    return b;
}

}  // namespace dyncap
