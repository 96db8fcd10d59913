#pragma once

// Cross-entropy training, self-critical fine-tuning, Adam, and the staged
// learning-rate schedule.

#include <cmath>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dyncap/datagen.hpp"
#include "dyncap/errors.hpp"
#include "dyncap/metrics.hpp"
#include "dyncap/model.hpp"

namespace dyncap {

enum class Phase { CE, SCST };

// Staged schedule: linear warmup to the CE peak over the first 4 epochs,
// piecewise drops at epochs 10 and 12; SCST runs from its own base rate with
// milestone drops at epochs 35/40/45/50. `scale` multiplies every rate.
inline double schedule_lr(Phase phase, int epoch, double scale = 1.0) {
    if (epoch < 0) throw ConfigError("schedule epoch must be >= 0");
    double lr;
    if (phase == Phase::CE) {
        const double peak = 1e-4;
        constexpr int warmup = 4;
        if (epoch < warmup) lr = peak * static_cast<double>(epoch + 1) / warmup;
        else if (epoch < 10) lr = peak;
        else if (epoch < 12) lr = 2e-5;
        else lr = 4e-6;
    } else {
        if (epoch < 35) lr = 5e-6;
        else if (epoch < 40) lr = 2.5e-6;
        else if (epoch < 45) lr = 5e-7;
        else if (epoch < 50) lr = 2.5e-7;
        else lr = 5e-8;
    }
    return lr * scale;
}

// -(1/B) sum over valid positions of log p(target); PAD positions carry mask 0.
template <class T>
TensorT<T> ce_loss(const TensorT<T>& logits, const std::vector<int>& targets,
                   const std::vector<T>& mask, int batch) {
    T total_mask = T(0);
    for (T m : mask) total_mask += m;
    if (total_mask == T(0)) throw NumericError("ce_loss: all positions are PAD");
    const int steps = logits.dim(1);
    auto picked = gather_last(log_softmax(logits, 2), targets);
    auto masked = mul(picked, TensorT<T>::from_data({batch, steps}, mask));
    return scale(sum(masked), T(-1) / static_cast<T>(batch));
}

// Teacher-forcing rows for a caption batch: input drops the last position,
// target drops the first, mask covers positions before each EOS (inclusive).
template <class T>
struct TeacherForced {
    int steps = 0;
    std::vector<int> input;    // [B, steps]
    std::vector<int> targets;  // [B, steps]
    std::vector<T> mask;       // [B, steps]
};

template <class T>
TeacherForced<T> teacher_forcing(const CaptionBatch& batch) {
    TeacherForced<T> tf;
    tf.steps = batch.max_len - 1;
    tf.input.assign(static_cast<std::size_t>(batch.batch) * tf.steps, Vocabulary::kPad);
    tf.targets.assign(static_cast<std::size_t>(batch.batch) * tf.steps, Vocabulary::kPad);
    tf.mask.assign(static_cast<std::size_t>(batch.batch) * tf.steps, T(0));
    for (int b = 0; b < batch.batch; ++b) {
        const int len = batch.lengths[static_cast<std::size_t>(b)];
        for (int t = 0; t < tf.steps; ++t) {
            const std::size_t i = static_cast<std::size_t>(b) * tf.steps + t;
            tf.input[i] = batch.at(b, t);
            tf.targets[i] = batch.at(b, t + 1);
            if (t + 1 < len) tf.mask[i] = T(1);
        }
    }
    return tf;
}

// Bias-corrected Adam keyed by parameter name.
template <class T>
class Adam {
public:
    explicit Adam(T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    std::int64_t steps() const { return t_; }

    void step(const ParamList<T>& params, T lr) {
        ++t_;
        const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
        const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
        for (const auto& p : params) {
            auto& state = moments_[p.name];
            auto& value = const_cast<TensorT<T>&>(p.tensor).mutable_data();
            const auto& grad = p.tensor.grad();
            if (state.m.size() != value.size()) {
                state.m.assign(value.size(), T(0));
                state.v.assign(value.size(), T(0));
            }
            for (std::size_t i = 0; i < value.size(); ++i) {
                const T g = grad[i];
                if (!std::isfinite(static_cast<double>(g))) {
                    throw NumericError("non-finite gradient in parameter " + p.name);
                }
                state.m[i] = beta1_ * state.m[i] + (T(1) - beta1_) * g;
                state.v[i] = beta2_ * state.v[i] + (T(1) - beta2_) * g * g;
                const T mhat = state.m[i] / bc1;
                const T vhat = state.v[i] / bc2;
                value[i] -= lr * mhat / (static_cast<T>(std::sqrt(static_cast<double>(vhat))) + eps_);
            }
        }
    }

private:
    struct Moments {
        std::vector<T> m, v;
    };
    T beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::unordered_map<std::string, Moments> moments_;
};

// Global-norm gradient clip; returns the pre-clip norm.
template <class T>
double clip_gradients(const ParamList<T>& params, double max_norm) {
    double norm2 = 0;
    for (const auto& p : params) {
        for (T g : p.tensor.grad()) norm2 += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(norm2);
    if (norm > max_norm && norm > 0) {
        const T s = static_cast<T>(max_norm / norm);
        for (const auto& p : params) {
            auto& g = const_cast<TensorT<T>&>(p.tensor).node()->grad;
            for (auto& v : g) v *= s;
        }
    }
    return norm;
}

// Mean advantages against the shared baseline b = mean reward.
inline std::vector<double> scst_advantages(const std::vector<double>& rewards) {
    double b = 0;
    for (double r : rewards) b += r;
    b /= static_cast<double>(rewards.size());
    std::vector<double> adv(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = rewards[i] - b;
    return adv;
}

// Surrogate whose gradient is the self-critical estimator:
//   loss = -(1/k) sum_i (r_i - b) log p(y_i), averaged over the batch rows.
// logprobs is [B, k]; rewards is row-major [B, k].
template <class T>
TensorT<T> scst_surrogate(const TensorT<T>& logprobs, const std::vector<double>& rewards) {
    const int B = logprobs.dim(0), k = logprobs.dim(1);
    if (static_cast<int>(rewards.size()) != B * k) {
        throw ShapeError("scst_surrogate rewards size mismatch");
    }
    if (k < 2) throw ConfigError("scst needs k >= 2 sequences for the baseline");
    std::vector<T> coeff(static_cast<std::size_t>(B) * k);
    for (int b = 0; b < B; ++b) {
        std::vector<double> row(rewards.begin() + static_cast<std::ptrdiff_t>(b) * k,
                                rewards.begin() + static_cast<std::ptrdiff_t>(b + 1) * k);
        const auto adv = scst_advantages(row);
        for (int i = 0; i < k; ++i) {
            coeff[static_cast<std::size_t>(b) * k + i] = static_cast<T>(-adv[static_cast<std::size_t>(i)] / k);
        }
    }
    auto weighted = mul(logprobs, TensorT<T>::from_data({B, k}, std::move(coeff)));
    return scale(sum(weighted), T(1) / static_cast<T>(B));
}

struct ScstStats {
    double loss = 0;
    double mean_reward = 0;
};

// One self-critical step's loss for a feature batch: beam-decode k candidates
// per sample, reward them with CIDEr-D + BLEU-4 against the references, and
// build the Eq-style surrogate on the tape (encoder re-run in train mode so
// routing and cells receive gradient).
template <class T>
std::pair<TensorT<T>, ScstStats> scst_loss(Captioner<T>& model, const TensorT<T>& features,
                                           const std::vector<std::vector<TokenSeq>>& refs,
                                           const Vocabulary& vocab, const NGramStats& stats,
                                           int k, RngState* route_rng) {
    const int B = features.dim(0);
    if (k < 2) throw ConfigError("scst needs beam size >= 2");
    for (const auto& r : refs) {
        if (r.empty()) throw ConfigError("scst sample without references");
    }

    auto memory_gen = model.encode(features, Mode::Eval);
    const auto beams = model.decoder().decode_beam(memory_gen, k, model.config().max_len);

    std::vector<TokenSeq> cands;
    std::vector<std::vector<TokenSeq>> cand_refs;
    for (int b = 0; b < B; ++b) {
        for (const auto& hyp : beams[static_cast<std::size_t>(b)]) {
            TokenSeq words;
            for (int id : hyp.tokens) words.push_back(vocab.token(id));
            cands.push_back(std::move(words));
            cand_refs.push_back(refs[static_cast<std::size_t>(b)]);
        }
        if (static_cast<int>(beams[static_cast<std::size_t>(b)].size()) != k) {
            throw NumericError("beam search returned fewer than k hypotheses");
        }
    }
    const auto cider = cider_d(cands, cand_refs, stats);
    std::vector<double> rewards(cands.size());
    double reward_sum = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        rewards[i] = cider.per_sample[i] + bleu(cands[i], cand_refs[i], 4);
        reward_sum += rewards[i];
    }

    auto memory_train = model.encode(features, Mode::Train, route_rng);
    std::vector<TensorT<T>> per_sample;
    per_sample.reserve(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
        auto mem_b = slice(memory_train, 0, b, 1);
        per_sample.push_back(
            reshape(model.decoder().sequence_logprob(mem_b, beams[static_cast<std::size_t>(b)]),
                    {1, k}));
    }
    auto logprobs = concat(per_sample, 0);  // [B, k]
    auto loss = scst_surrogate(logprobs, rewards);
    ScstStats st;
    st.loss = static_cast<double>(loss.item());
    st.mean_reward = reward_sum / static_cast<double>(cands.size());
    return {loss, st};
}

// ---------------------------------------------------------------------------
// Training driver.

struct TrainOptions {
    int batch_size = 16;
    double lr_scale = 10.0;
    double lr_override = 0.0;  // > 0 fixes the rate, bypassing the schedule
    double clip_norm = 5.0;
    int beam_k = 5;
    int scst_batch_size = 8;
    std::uint64_t seed = 42;
};

template <class T>
class Trainer {
public:
    Trainer(Captioner<T>& model, const Dataset& data, TrainOptions opts)
        : model_(model), data_(data), opts_(opts),
          order_rng_(RngState::derive(opts.seed, 1)), route_rng_(RngState::derive(opts.seed, 2)) {
        caption_ids_ = caption_ids(data);
        std::vector<std::vector<TokenSeq>> refs;
        for (const auto& cap : data.captions) refs.push_back({Vocabulary::tokenize(cap)});
        reward_stats_ = NGramStats::build(refs);
        refs_ = std::move(refs);
    }

    std::int64_t global_step() const { return step_; }

    // One CE optimizer step over explicit sample indices; returns the loss.
    double ce_step(const std::vector<int>& indices, double lr) {
        auto features = batch_features<T>(data_, indices);
        std::vector<std::vector<int>> caps;
        for (int i : indices) caps.push_back(caption_ids_[static_cast<std::size_t>(i)]);
        auto batch = CaptionBatch::from_token_ids(caps);
        const auto tf = teacher_forcing<T>(batch);

        auto memory = model_.encode(features, Mode::Train, &route_rng_);
        auto logits = model_.decoder().forward(memory, tf.input, batch.batch, tf.steps);
        auto loss = ce_loss(logits, tf.targets, tf.mask, batch.batch);
        const double loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) throw NumericError("non-finite CE loss");
        zero_grads();
        loss.backward();
        clip_gradients(model_.parameters(), opts_.clip_norm);
        adam_.step(model_.parameters(), static_cast<T>(lr));
        ++step_;
        return loss_value;
    }

    double scst_step(const std::vector<int>& indices, double lr) {
        auto features = batch_features<T>(data_, indices);
        std::vector<std::vector<TokenSeq>> refs;
        for (int i : indices) refs.push_back(refs_[static_cast<std::size_t>(i)]);
        auto [loss, st] = scst_loss(model_, features, refs, data_.vocab, reward_stats_,
                                    opts_.beam_k, &route_rng_);
        if (!std::isfinite(st.loss)) throw NumericError("non-finite SCST loss");
        zero_grads();
        loss.backward();
        clip_gradients(model_.parameters(), opts_.clip_norm);
        adam_.step(model_.parameters(), static_cast<T>(lr));
        ++step_;
        last_reward_ = st.mean_reward;
        return st.loss;
    }

    // One pass over the dataset; logs "step loss lr [reward]" lines.
    double run_epoch(Phase phase, int epoch, std::ostream* log) {
        const double lr = opts_.lr_override > 0 ? opts_.lr_override
                                                : schedule_lr(phase, epoch, opts_.lr_scale);
        const int bs = phase == Phase::CE ? opts_.batch_size : opts_.scst_batch_size;
        auto order = shuffled_indices();
        double loss_sum = 0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(bs)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(bs));
            std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
            const double loss = phase == Phase::CE ? ce_step(idx, lr) : scst_step(idx, lr);
            loss_sum += loss;
            ++batches;
            if (log) {
                (*log) << step_ << ' ' << loss << ' ' << lr;
                if (phase == Phase::SCST) (*log) << ' ' << last_reward_;
                (*log) << '\n';
            }
        }
        return batches ? loss_sum / batches : 0.0;
    }

    // Teacher-forced token accuracy over the given samples.
    double token_accuracy(const std::vector<int>& indices) {
        auto features = batch_features<T>(data_, indices);
        std::vector<std::vector<int>> caps;
        for (int i : indices) caps.push_back(caption_ids_[static_cast<std::size_t>(i)]);
        auto batch = CaptionBatch::from_token_ids(caps);
        const auto tf = teacher_forcing<T>(batch);
        auto memory = model_.encode(features, Mode::Eval);
        auto logits = model_.decoder().forward(memory, tf.input, batch.batch, tf.steps);
        const auto pred = argmax_last(logits);
        std::int64_t ok = 0, total = 0;
        for (std::size_t i = 0; i < tf.mask.size(); ++i) {
            if (tf.mask[i] == T(0)) continue;
            ++total;
            ok += pred[i] == tf.targets[i];
        }
        return total ? static_cast<double>(ok) / static_cast<double>(total) : 0.0;
    }

private:
    std::vector<int> shuffled_indices() {
        std::vector<int> order(static_cast<std::size_t>(data_.size()));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = order_rng_.next_below(i);
            std::swap(order[i - 1], order[j]);
        }
        return order;
    }

    void zero_grads() {
        for (const auto& p : model_.parameters()) const_cast<TensorT<T>&>(p.tensor).zero_grad();
    }

    Captioner<T>& model_;
    const Dataset& data_;
    TrainOptions opts_;
    RngState order_rng_, route_rng_;
    Adam<T> adam_;
    std::vector<std::vector<int>> caption_ids_;
    std::vector<std::vector<TokenSeq>> refs_;
    NGramStats reward_stats_;
    std::int64_t step_ = 0;
    double last_reward_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation: decode captions and score them.

struct EvalReport {
    double bleu1 = 0, bleu4 = 0, cider = 0, exact = 0;
    int n = 0;
    std::vector<std::string> generated;
};

enum class DecodeMode { Greedy, Sample, Beam };

inline DecodeMode parse_decode(const std::string& s) {
    if (s == "greedy") return DecodeMode::Greedy;
    if (s == "sample") return DecodeMode::Sample;
    if (s == "beam") return DecodeMode::Beam;
    throw ConfigError("unknown decode mode '" + s + "'");
}

template <class T>
EvalReport evaluate(Captioner<T>& model, const Dataset& ds, DecodeMode mode, int beam_k,
                    std::uint64_t sample_seed = 7, int eval_batch = 32) {
    EvalReport rep;
    rep.n = ds.size();
    std::vector<TokenSeq> cands;
    std::vector<std::vector<TokenSeq>> refs;
    RngState srng(sample_seed);
    for (int start = 0; start < ds.size(); start += eval_batch) {
        std::vector<int> idx;
        for (int i = start; i < std::min(ds.size(), start + eval_batch); ++i) idx.push_back(i);
        auto memory = model.encode(batch_features<T>(ds, idx), Mode::Eval);
        std::vector<Decoded> hyps;
        if (mode == DecodeMode::Beam) {
            for (auto& per : model.decoder().decode_beam(memory, beam_k, model.config().max_len)) {
                hyps.push_back(per.front());
            }
        } else if (mode == DecodeMode::Greedy) {
            hyps = model.decoder().decode_greedy(memory, model.config().max_len);
        } else {
            hyps = model.decoder().decode_sample(memory, model.config().max_len, srng);
        }
        for (std::size_t j = 0; j < idx.size(); ++j) {
            TokenSeq words;
            for (int id : hyps[j].tokens) words.push_back(ds.vocab.token(id));
            refs.push_back({Vocabulary::tokenize(ds.captions[static_cast<std::size_t>(idx[j])])});
            cands.push_back(std::move(words));
        }
    }
    auto stats = NGramStats::build(refs);
    rep.cider = cider_d(cands, refs, stats).mean;
    double b1 = 0, b4 = 0, exact = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        b1 += bleu(cands[i], refs[i], 1);
        b4 += bleu(cands[i], refs[i], 4);
        exact += cands[i] == refs[i][0];
        std::string joined;
        for (const auto& w : cands[i]) {
            if (!joined.empty()) joined.push_back(' ');
            joined += w;
        }
        rep.generated.push_back(std::move(joined));
    }
    rep.bleu1 = b1 / cands.size();
    rep.bleu4 = b4 / cands.size();
    rep.exact = exact / static_cast<double>(cands.size());
    return rep;
}

}  // namespace dyncap
