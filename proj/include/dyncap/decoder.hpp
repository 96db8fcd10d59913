#pragma once

// Standard autoregressive transformer decoder: masked self-attention,
// cross-attention over the encoded grid, position-wise FFN, post-norm
// residuals, learned token/grid positional embeddings. Decoding supports
// greedy, categorical sampling, and beam search.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dyncap/errors.hpp"
#include "dyncap/nn.hpp"
#include "dyncap/tensor.hpp"
#include "dyncap/vocab.hpp"

namespace dyncap {

struct DecoderConfig {
    int layers = 2;
    int d_model = 64;
    int heads = 4;
    int vocab = 0;
    int max_len = 10;   // generated tokens per caption, EOS included
    int n_memory = 49;  // encoder grid positions
    int ffn_ratio = 4;

    void validate() const {
        if (layers < 1) throw ConfigError("decoder needs at least one layer");
        if (vocab < 5) throw ConfigError("decoder vocab too small");
        if (max_len < 1) throw ConfigError("decoder max_len must be >= 1");
        if (heads < 1 || d_model % heads != 0) {
            throw ConfigError("decoder heads must divide d_model");
        }
    }
};

// q_in[B,Tq,C] attends over kv_in[Bk,Tk,C] (Bk == B or 1); optional additive
// mask [Tq,Tk].
template <class T>
TensorT<T> multi_head_attention(const TensorT<T>& q_in, const TensorT<T>& kv_in,
                                const Linear<T>& wq, const Linear<T>& wk, const Linear<T>& wv,
                                const Linear<T>& wo, int heads, const TensorT<T>* mask) {
    const int C = q_in.dim(2);
    const int d = C / heads;
    auto q = wq.forward(q_in);
    auto k = wk.forward(kv_in);
    auto v = wv.forward(kv_in);
    const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<TensorT<T>> ctx;
    ctx.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto qh = slice(q, 2, h * d, d);
        auto kh = slice(k, 2, h * d, d);
        auto vh = slice(v, 2, h * d, d);
        auto scores = scale(matmul(qh, transpose_last2(kh)), inv_sqrt_d);
        if (mask) scores = add(scores, *mask);
        ctx.push_back(matmul(softmax(scores, 2), vh));
    }
    return wo.forward(concat(ctx, 2));
}

// One decoded hypothesis. `tokens` excludes BOS and EOS; `logprob` sums the
// per-step log-softmax of every emitted token, including the terminating EOS
// when `finished` is true.
struct Decoded {
    std::vector<int> tokens;
    double logprob = 0.0;
    bool finished = false;
};

template <class T>
class CaptionDecoder {
public:
    CaptionDecoder() = default;

    CaptionDecoder(const DecoderConfig& cfg, RngState& rng) : cfg_(cfg) {
        cfg.validate();
        tok_embed_ = Embedding<T>(cfg.vocab, cfg.d_model, rng);
        pos_embed_ = init_projection<T>({cfg.max_len + 2, cfg.d_model}, cfg.d_model, rng);
        mem_pos_ = init_projection<T>({cfg.n_memory, cfg.d_model}, cfg.d_model, rng);
        for (int l = 0; l < cfg.layers; ++l) layers_.emplace_back(cfg, rng);
        out_proj_ = Linear<T>(cfg.d_model, cfg.vocab, true, rng);
    }

    const DecoderConfig& config() const { return cfg_; }

    // Teacher-forced logits [B, T, vocab] for input token rows ids[B*T].
    TensorT<T> forward(const TensorT<T>& memory, const std::vector<int>& ids, int B, int steps) const {
        if (steps < 1) throw ShapeError("decoder forward needs at least one step");
        if (steps > cfg_.max_len + 2) {
            throw ShapeError("decoder sequence length " + std::to_string(steps) +
                             " exceeds position table " + std::to_string(cfg_.max_len + 2));
        }
        if (memory.dim(memory.rank() - 2) != cfg_.n_memory) {
            throw ShapeError("decoder built for " + std::to_string(cfg_.n_memory) +
                             " memory positions, got " + shape_str(memory.shape()));
        }
        auto mem = add(memory, mem_pos_);
        auto x = add(tok_embed_.forward(ids, {B, steps}), slice(pos_embed_, 0, 0, steps));
        auto mask = causal_mask(steps);
        for (auto& layer : layers_) x = layer.forward(x, mem, cfg_.heads, mask);
        return out_proj_.forward(x);
    }

    // Tape-tracked per-sequence log-probs [B] of given captions (no BOS/EOS
    // in `seqs`); the EOS step is scored only for finished sequences.
    TensorT<T> sequence_logprob(const TensorT<T>& memory, const std::vector<Decoded>& seqs) const {
        const int B = static_cast<int>(seqs.size());
        int steps = 1;
        for (const auto& s : seqs) steps = std::max(steps, static_cast<int>(s.tokens.size()) + 1);
        std::vector<int> in_ids(static_cast<std::size_t>(B) * steps, Vocabulary::kPad);
        std::vector<int> targets(static_cast<std::size_t>(B) * steps, 0);
        std::vector<T> mask(static_cast<std::size_t>(B) * steps, T(0));
        for (int b = 0; b < B; ++b) {
            const auto& s = seqs[static_cast<std::size_t>(b)];
            int* in = in_ids.data() + static_cast<std::size_t>(b) * steps;
            int* tg = targets.data() + static_cast<std::size_t>(b) * steps;
            T* mk = mask.data() + static_cast<std::size_t>(b) * steps;
            in[0] = Vocabulary::kBos;
            for (std::size_t t = 0; t < s.tokens.size(); ++t) {
                tg[t] = s.tokens[t];
                mk[t] = T(1);
                if (t + 1 < static_cast<std::size_t>(steps)) in[t + 1] = s.tokens[t];
            }
            if (s.finished && static_cast<int>(s.tokens.size()) < steps) {
                tg[s.tokens.size()] = Vocabulary::kEos;
                mk[s.tokens.size()] = T(1);
            }
        }
        auto logits = forward(memory, in_ids, B, steps);
        // same generative distribution as decode(): BOS/PAD are not emittable
        std::vector<T> vmask(static_cast<std::size_t>(cfg_.vocab), T(0));
        vmask[Vocabulary::kPad] = T(-1e9);
        vmask[Vocabulary::kBos] = T(-1e9);
        auto masked_logits = add(logits, TensorT<T>::from_data({cfg_.vocab}, std::move(vmask)));
        auto logp = gather_last(log_softmax(masked_logits, 2), targets);
        auto masked = mul(logp, TensorT<T>::from_data({B, steps}, std::move(mask)));
        return reshape(matmul(masked, TensorT<T>::ones({steps, 1})), {B});
    }

    std::vector<Decoded> decode_greedy(const TensorT<T>& memory, int max_len) const {
        return rollout(memory, max_len, nullptr);
    }

    std::vector<Decoded> decode_sample(const TensorT<T>& memory, int max_len, RngState& rng) const {
        return rollout(memory, max_len, &rng);
    }

    // Per-sample beam search: k hypotheses, scores sorted non-increasing,
    // ties broken toward the lexicographically smaller token sequence.
    std::vector<std::vector<Decoded>> decode_beam(const TensorT<T>& memory, int k,
                                                  int max_len) const {
        if (k < 1) throw ConfigError("beam size must be >= 1");
        if (max_len < 1) throw ConfigError("max_len must be >= 1");
        const int B = memory.dim(0);
        std::vector<std::vector<Decoded>> out;
        out.reserve(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            out.push_back(beam_one(slice(memory, 0, b, 1), k, max_len));
        }
        return out;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        tok_embed_.collect(prefix + ".tok_embed", out);
        out.push_back({prefix + ".pos_embed", pos_embed_});
        out.push_back({prefix + ".mem_pos", mem_pos_});
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            layers_[l].collect(prefix + "." + std::to_string(l), out);
        }
        out_proj_.collect(prefix + ".out_proj", out);
    }

private:
    struct DecLayer {
        Linear<T> sq, sk, sv, so;  // masked self-attention
        LayerNorm<T> ln1;
        Linear<T> cq, ck, cv, co;  // cross-attention
        LayerNorm<T> ln2;
        Linear<T> ff1, ff2;
        LayerNorm<T> ln3;

        DecLayer(const DecoderConfig& cfg, RngState& rng)
            : sq(cfg.d_model, cfg.d_model, true, rng), sk(cfg.d_model, cfg.d_model, true, rng),
              sv(cfg.d_model, cfg.d_model, true, rng), so(cfg.d_model, cfg.d_model, true, rng),
              ln1(cfg.d_model), cq(cfg.d_model, cfg.d_model, true, rng),
              ck(cfg.d_model, cfg.d_model, true, rng), cv(cfg.d_model, cfg.d_model, true, rng),
              co(cfg.d_model, cfg.d_model, true, rng), ln2(cfg.d_model),
              ff1(cfg.d_model, cfg.ffn_ratio * cfg.d_model, true, rng),
              ff2(cfg.ffn_ratio * cfg.d_model, cfg.d_model, true, rng), ln3(cfg.d_model) {}

        TensorT<T> forward(const TensorT<T>& x, const TensorT<T>& mem, int heads,
                           const TensorT<T>& mask) const {
            auto a = ln1.forward(add(x, multi_head_attention(x, x, sq, sk, sv, so, heads, &mask)));
            auto c = ln2.forward(add(
                a, multi_head_attention(a, mem, cq, ck, cv, co, heads,
                                        static_cast<const TensorT<T>*>(nullptr))));
            return ln3.forward(add(c, ff2.forward(relu(ff1.forward(c)))));
        }

        void collect(const std::string& prefix, ParamList<T>& out) const {
            sq.collect(prefix + ".self.wq", out);
            sk.collect(prefix + ".self.wk", out);
            sv.collect(prefix + ".self.wv", out);
            so.collect(prefix + ".self.wo", out);
            ln1.collect(prefix + ".ln1", out);
            cq.collect(prefix + ".cross.wq", out);
            ck.collect(prefix + ".cross.wk", out);
            cv.collect(prefix + ".cross.wv", out);
            co.collect(prefix + ".cross.wo", out);
            ln2.collect(prefix + ".ln2", out);
            ff1.collect(prefix + ".ffn.w1", out);
            ff2.collect(prefix + ".ffn.w2", out);
            ln3.collect(prefix + ".ln3", out);
        }
    };

    TensorT<T> causal_mask(int steps) const {
        std::vector<T> m(static_cast<std::size_t>(steps) * steps, T(0));
        for (int i = 0; i < steps; ++i) {
            for (int j = i + 1; j < steps; ++j) m[static_cast<std::size_t>(i) * steps + j] = T(-1e9);
        }
        return TensorT<T>::from_data({steps, steps}, std::move(m));
    }

    // Next-token log-probs from the final position, with BOS/PAD generation
    // disabled. Plain values (no tape).
    std::vector<double> step_logprobs(const TensorT<T>& memory, const std::vector<int>& ids,
                                      int B, int steps) const {
        auto logits = forward(memory, ids, B, steps);
        const int V = cfg_.vocab;
        std::vector<double> out(static_cast<std::size_t>(B) * V);
        for (int b = 0; b < B; ++b) {
            const T* row = logits.data().data() + (static_cast<std::int64_t>(b) * steps + steps - 1) * V;
            double mx = -1e300;
            for (int v = 0; v < V; ++v) {
                double lv = static_cast<double>(row[v]);
                if (v == Vocabulary::kPad || v == Vocabulary::kBos) lv = -1e9;
                out[static_cast<std::size_t>(b) * V + v] = lv;
                mx = std::max(mx, lv);
            }
            double z = 0;
            for (int v = 0; v < V; ++v) z += std::exp(out[static_cast<std::size_t>(b) * V + v] - mx);
            const double lse = mx + std::log(z);
            for (int v = 0; v < V; ++v) out[static_cast<std::size_t>(b) * V + v] -= lse;
        }
        return out;
    }

    std::vector<Decoded> rollout(const TensorT<T>& memory, int max_len, RngState* rng) const {
        if (max_len < 1) throw ConfigError("max_len must be >= 1");
        max_len = std::min(max_len, cfg_.max_len);
        const int B = memory.dim(0);
        const int V = cfg_.vocab;
        std::vector<Decoded> hyps(static_cast<std::size_t>(B));
        std::vector<int> ids(static_cast<std::size_t>(B), Vocabulary::kBos);
        for (int t = 0; t < max_len; ++t) {
            const auto lp = step_logprobs(memory, ids, B, t + 1);
            std::vector<int> next(static_cast<std::size_t>(B), Vocabulary::kPad);
            bool all_done = true;
            for (int b = 0; b < B; ++b) {
                auto& h = hyps[static_cast<std::size_t>(b)];
                if (h.finished) continue;
                const double* row = lp.data() + static_cast<std::size_t>(b) * V;
                int pick;
                if (rng == nullptr) {
                    pick = 0;
                    for (int v = 1; v < V; ++v) {
                        if (row[v] > row[pick]) pick = v;
                    }
                } else {
                    const double u = rng->next_uniform();
                    double acc = 0;
                    pick = V - 1;
                    for (int v = 0; v < V; ++v) {
                        acc += std::exp(row[v]);
                        if (u < acc) {
                            pick = v;
                            break;
                        }
                    }
                }
                h.logprob += row[pick];
                if (pick == Vocabulary::kEos) {
                    h.finished = true;
                } else {
                    h.tokens.push_back(pick);
                    all_done = false;
                }
                next[static_cast<std::size_t>(b)] = pick;
            }
            if (all_done) break;
            // grow every prefix (finished rows keep PAD; their logits are unused)
            std::vector<int> grown(static_cast<std::size_t>(B) * (t + 2), Vocabulary::kPad);
            for (int b = 0; b < B; ++b) {
                for (int s = 0; s <= t; ++s) {
                    grown[static_cast<std::size_t>(b) * (t + 2) + s] =
                        ids[static_cast<std::size_t>(b) * (t + 1) + s];
                }
                grown[static_cast<std::size_t>(b) * (t + 2) + t + 1] = next[static_cast<std::size_t>(b)];
            }
            ids = std::move(grown);
        }
        return hyps;
    }

    std::vector<Decoded> beam_one(const TensorT<T>& memory, int k, int max_len) const {
        max_len = std::min(max_len, cfg_.max_len);
        const int V = cfg_.vocab;
        const auto better = [](const Decoded& x, const Decoded& y) {
            if (x.logprob != y.logprob) return x.logprob > y.logprob;
            return x.tokens < y.tokens;
        };
        std::vector<Decoded> active{Decoded{}};
        std::vector<Decoded> finished;
        for (int t = 0; t < max_len && !active.empty(); ++t) {
            const int A = static_cast<int>(active.size());
            std::vector<int> ids(static_cast<std::size_t>(A) * (t + 1), Vocabulary::kPad);
            for (int a = 0; a < A; ++a) {
                ids[static_cast<std::size_t>(a) * (t + 1)] = Vocabulary::kBos;
                for (int s = 0; s < t; ++s) {
                    ids[static_cast<std::size_t>(a) * (t + 1) + s + 1] =
                        active[static_cast<std::size_t>(a)].tokens[static_cast<std::size_t>(s)];
                }
            }
            const auto lp = step_logprobs(memory, ids, A, t + 1);
            // retired hypotheses keep competing by score against fresh expansions
            std::vector<Decoded> pool = finished;
            for (int a = 0; a < A; ++a) {
                for (int v = 0; v < V; ++v) {
                    if (v == Vocabulary::kPad || v == Vocabulary::kBos) continue;
                    Decoded cand = active[static_cast<std::size_t>(a)];
                    cand.logprob += lp[static_cast<std::size_t>(a) * V + v];
                    if (v == Vocabulary::kEos) cand.finished = true;
                    else cand.tokens.push_back(v);
                    pool.push_back(std::move(cand));
                }
            }
            std::sort(pool.begin(), pool.end(), better);
            if (static_cast<int>(pool.size()) > k) pool.resize(static_cast<std::size_t>(k));
            active.clear();
            finished.clear();
            for (auto& c : pool) {
                (c.finished ? finished : active).push_back(std::move(c));
            }
        }
        // hypotheses still active hit the length cap
        for (auto& a : active) finished.push_back(std::move(a));
        std::sort(finished.begin(), finished.end(), better);
        if (static_cast<int>(finished.size()) > k) finished.resize(static_cast<std::size_t>(k));
        return finished;
    }

    DecoderConfig cfg_;
    Embedding<T> tok_embed_;
    TensorT<T> pos_embed_, mem_pos_;
    std::vector<DecLayer> layers_;
    Linear<T> out_proj_;
};

}  // namespace dyncap
