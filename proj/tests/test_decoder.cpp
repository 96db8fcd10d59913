#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "dyncap/decoder.hpp"
#include "testutil.hpp"

using namespace dyncap;
using testutil::gradcheck;
using testutil::rand_tensor;

namespace {

DecoderConfig tiny_cfg() {
    DecoderConfig cfg;
    cfg.layers = 1;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.vocab = 7;
    cfg.max_len = 4;
    cfg.n_memory = 4;
    cfg.ffn_ratio = 2;
    return cfg;
}

std::vector<DTensor> tensors_of(const ParamList<double>& ps) {
    std::vector<DTensor> out;
    for (const auto& p : ps) out.push_back(p.tensor);
    return out;
}

DTensor find_param(const ParamList<double>& ps, const std::string& needle) {
    for (const auto& p : ps) {
        if (p.name.find(needle) != std::string::npos) return p.tensor;
    }
    FAIL("param not found: ", needle);
    return {};
}

}  // namespace

TEST_CASE("causality: perturbing an input position changes logits only at or after it") {
    RngState rng(401);
    CaptionDecoder<double> dec(tiny_cfg(), rng);
    auto mem = rand_tensor({1, 4, 8}, rng);
    std::vector<int> ids{1, 4, 5, 6};
    auto a = dec.forward(mem, ids, 1, 4);
    std::vector<int> ids2{1, 4, 6, 6};  // perturbed at position 2
    auto b = dec.forward(mem, ids2, 1, 4);
    const int V = 7;
    for (int t = 0; t < 2; ++t) {
        for (int v = 0; v < V; ++v) CHECK(a.data()[t * V + v] == b.data()[t * V + v]);
    }
    double changed = 0;
    for (int t = 2; t < 4; ++t) {
        for (int v = 0; v < V; ++v) changed += std::abs(a.data()[t * V + v] - b.data()[t * V + v]);
    }
    CHECK(changed > 1e-6);
}

TEST_CASE("zeroed cross-attention value path makes logits independent of the memory") {
    RngState rng(402);
    CaptionDecoder<double> dec(tiny_cfg(), rng);
    ParamList<double> ps;
    dec.collect("dec", ps);
    for (const auto& p : ps) {
        if (p.name.find("cross.wv") != std::string::npos) {
            auto& d = const_cast<DTensor&>(p.tensor).mutable_data();
            std::fill(d.begin(), d.end(), 0.0);
        }
    }
    auto m1 = rand_tensor({1, 4, 8}, rng);
    auto m2 = rand_tensor({1, 4, 8}, rng);
    std::vector<int> ids{1, 4, 5};
    auto a = dec.forward(m1, ids, 1, 3);
    auto b = dec.forward(m2, ids, 1, 3);
    CHECK(testutil::max_abs_diff(a.data(), b.data()) < 1e-12);
}

TEST_CASE("tiny decoder gradient check at 64-bit") {
    RngState rng(403);
    CaptionDecoder<double> dec(tiny_cfg(), rng);
    ParamList<double> ps;
    dec.collect("dec", ps);
    auto mem = rand_tensor({2, 4, 8}, rng);
    std::vector<int> ids{1, 4, 5, 1, 6, 4};
    auto wl = rand_tensor({2, 3, 7}, rng);
    auto checked = tensors_of(ps);
    checked.push_back(mem);
    const double err = gradcheck(checked, [&] {
        return sum(mul(wl, log_softmax(dec.forward(mem, ids, 2, 3), 2)));
    });
    CHECK(err < 1e-4);
}

TEST_CASE("beam(1) matches greedy token for token") {
    RngState rng(404);
    CaptionDecoder<double> dec(tiny_cfg(), rng);
    for (int trial = 0; trial < 5; ++trial) {
        auto mem = rand_tensor({3, 4, 8}, rng, -2.0, 2.0);
        auto greedy = dec.decode_greedy(mem, 4);
        auto beam = dec.decode_beam(mem, 1, 4);
        for (int b = 0; b < 3; ++b) {
            REQUIRE(beam[b].size() == 1);
            CHECK(beam[b][0].tokens == greedy[b].tokens);
            CHECK(beam[b][0].logprob == doctest::Approx(greedy[b].logprob).epsilon(1e-9));
        }
    }
}

TEST_CASE("a decoder rigged to a fixed token returns it under every mode") {
    RngState rng(405);
    CaptionDecoder<double> dec(tiny_cfg(), rng);
    ParamList<double> ps;
    dec.collect("dec", ps);
    auto w = find_param(ps, "out_proj.w");
    auto b = find_param(ps, "out_proj.b");
    std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
    std::fill(b.mutable_data().begin(), b.mutable_data().end(), 0.0);
    b.mutable_data()[5] = 50.0;

    auto mem = rand_tensor({1, 4, 8}, rng);
    const std::vector<int> expect{5, 5, 5, 5};  // runs to the length cap
    CHECK(dec.decode_greedy(mem, 4)[0].tokens == expect);
    RngState srng(7);
    CHECK(dec.decode_sample(mem, 4, srng)[0].tokens == expect);
    CHECK(dec.decode_beam(mem, 2, 4)[0][0].tokens == expect);
}

TEST_CASE("beam(3) finds the exhaustive-enumeration top 3 on a 2-step toy model") {
    RngState rng(406);
    auto cfg = tiny_cfg();
    cfg.max_len = 2;
    CaptionDecoder<double> dec(cfg, rng);
    auto mem = rand_tensor({1, 4, 8}, rng);

    // step distributions from teacher-forced forwards, PAD/BOS masked
    auto step_lp = [&](const std::vector<int>& prefix) {
        auto logits = dec.forward(mem, prefix, 1, static_cast<int>(prefix.size()));
        const int V = 7;
        std::vector<double> row(V);
        const int t = static_cast<int>(prefix.size()) - 1;
        for (int v = 0; v < V; ++v) {
            row[v] = logits.data()[t * V + v];
            if (v == Vocabulary::kPad || v == Vocabulary::kBos) row[v] = -1e9;
        }
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0;
        for (double& x : row) z += std::exp(x - mx);
        const double lse = mx + std::log(z);
        for (double& x : row) x -= lse;
        return row;
    };

    struct Terminal {
        std::vector<int> tokens;
        double score;
    };
    std::vector<Terminal> all;
    const auto lp1 = step_lp({Vocabulary::kBos});
    all.push_back({{}, lp1[Vocabulary::kEos]});
    for (int t1 = 3; t1 < 7; ++t1) {
        const auto lp2 = step_lp({Vocabulary::kBos, t1});
        all.push_back({{t1}, lp1[t1] + lp2[Vocabulary::kEos]});
        for (int t2 = 3; t2 < 7; ++t2) {
            all.push_back({{t1, t2}, lp1[t1] + lp2[t2]});
        }
    }
    std::sort(all.begin(), all.end(), [](const Terminal& a, const Terminal& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.tokens < b.tokens;
    });

    auto beam = dec.decode_beam(mem, 3, 2)[0];
    REQUIRE(beam.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(beam[i].tokens == all[i].tokens);
        CHECK(beam[i].logprob == doctest::Approx(all[i].score).epsilon(1e-9));
    }
    // scores non-increasing with rank
    CHECK(beam[0].logprob >= beam[1].logprob);
    CHECK(beam[1].logprob >= beam[2].logprob);
}

TEST_CASE("reported sequence log-prob equals the sum of per-step log-softmax values") {
    RngState rng(407);
    CaptionDecoder<double> dec(tiny_cfg(), rng);
    auto mem = rand_tensor({2, 4, 8}, rng);
    auto hyps = dec.decode_greedy(mem, 4);
    auto scored = dec.sequence_logprob(mem, hyps);
    for (int b = 0; b < 2; ++b) {
        CHECK(scored.data()[b] == doctest::Approx(hyps[b].logprob).epsilon(1e-5));
    }

    auto beams = dec.decode_beam(mem, 3, 4);
    for (int b = 0; b < 2; ++b) {
        auto scored_b = dec.sequence_logprob(slice(mem, 0, b, 1).detach(), {beams[b][0]});
        CHECK(scored_b.data()[0] == doctest::Approx(beams[b][0].logprob).epsilon(1e-5));
    }
}

TEST_CASE("sampling with a fixed RngState is bitwise reproducible") {
    RngState rng(408);
    CaptionDecoder<double> dec(tiny_cfg(), rng);
    auto mem = rand_tensor({3, 4, 8}, rng);
    RngState s1(42), s2(42);
    auto a = dec.decode_sample(mem, 4, s1);
    auto b = dec.decode_sample(mem, 4, s2);
    for (int i = 0; i < 3; ++i) {
        CHECK(a[i].tokens == b[i].tokens);
        CHECK(a[i].logprob == b[i].logprob);
    }
    // and the stream position matters: different seeds diverge somewhere
    RngState s3(43);
    auto c = dec.decode_sample(mem, 4, s3);
    bool any_diff = false;
    for (int i = 0; i < 3; ++i) any_diff = any_diff || c[i].tokens != a[i].tokens;
    // not guaranteed in theory, but with 3 samples of length 4 it is in practice
    CHECK(any_diff);
}

TEST_CASE("decode argument validation") {
    RngState rng(409);
    CaptionDecoder<double> dec(tiny_cfg(), rng);
    auto mem = rand_tensor({1, 4, 8}, rng);
    CHECK_THROWS_AS(dec.decode_beam(mem, 0, 4), ConfigError);
    CHECK_THROWS_AS(dec.decode_greedy(mem, 0), ConfigError);
    CHECK_THROWS_AS(dec.forward(mem, {}, 1, 0), ShapeError);
    CHECK_THROWS_AS(dec.forward(rand_tensor({1, 5, 8}, rng), {1}, 1, 1), ShapeError);
}
