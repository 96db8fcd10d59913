#include "doctest.h"

#include <cmath>
#include <set>
#include <vector>

#include "dyncap/router.hpp"
#include "testutil.hpp"

using namespace dyncap;
using testutil::gradcheck;
using testutil::rand_tensor;

namespace {
std::vector<DTensor> tensors_of(const ParamList<double>& ps) {
    std::vector<DTensor> out;
    for (const auto& p : ps) out.push_back(p.tensor);
    return out;
}
}  // namespace

TEST_CASE("SCJR with zero weights yields uniform path weights") {
    RngState rng(201);
    const int B = 3, H = 3, W = 3, C = 16, p = 3;
    Router<double> router(RouterVariant::SCJR, C, H * W, p, 16, 7, rng);
    ParamList<double> ps;
    router.collect("r", ps);
    for (auto& pr : ps) std::fill(pr.tensor.mutable_data().begin(), pr.tensor.mutable_data().end(), 0.0);
    auto x = rand_tensor({B, H, W, C}, rng);
    auto w = router.forward(x, RoutingType::Soft, 1.0, Mode::Eval, nullptr, "spatial");
    for (double v : w.weights.data()) CHECK(v == doctest::Approx(1.0 / p).epsilon(1e-9));
}

TEST_CASE("SCJR rows live on the simplex for random inputs") {
    RngState rng(202);
    const int B = 8, H = 3, W = 3, C = 16, p = 3;
    Router<double> router(RouterVariant::SCJR, C, H * W, p, 16, 7, rng);
    for (int trial = 0; trial < 25; ++trial) {
        auto x = rand_tensor({B, H, W, C}, rng, -5.0, 5.0);
        auto w = router.forward(x, RoutingType::Soft, 1.0, Mode::Eval, nullptr, "spatial");
        for (int b = 0; b < B; ++b) {
            double s = 0;
            for (int k = 0; k < p; ++k) {
                const double v = w.weights.data()[b * p + k];
                CHECK(v >= 0.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("SCJR matches an independent transcription and is input sensitive") {
    RngState rng(203);
    const int B = 2, H = 3, W = 3, C = 32, N = H * W, p = 3;
    const int hc = C / 16, hs = N / 7;
    Router<double> router(RouterVariant::SCJR, C, N, p, 16, 7, rng);
    ParamList<double> ps;
    router.collect("r", ps);
    auto get = [&](const std::string& suffix) -> const std::vector<double>& {
        for (const auto& pr : ps)
            if (pr.name.size() >= suffix.size() &&
                pr.name.compare(pr.name.size() - suffix.size(), suffix.size(), suffix) == 0)
                return pr.tensor.data();
        throw std::runtime_error("missing " + suffix);
    };
    const auto& wc1 = get("w_cha1.w");
    const auto& wc2 = get("w_cha2.w");
    const auto& ws1 = get("w_spa1.w");
    const auto& ws2 = get("w_spa2.w");
    const auto& wj1 = get("w_joint1.w");
    const auto& wj2 = get("w_joint2.w");

    auto x = rand_tensor({B, H, W, C}, rng);
    auto w = router.forward(x, RoutingType::Soft, 1.0, Mode::Eval, nullptr, "spatial");

    for (int b = 0; b < B; ++b) {
        // channel branch
        std::vector<double> gsp(C, 0.0);
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < C; ++c) gsp[c] += x.data()[(b * N + r) * C + c];
        for (double& v : gsp) v /= N;
        std::vector<double> h1(hc, 0.0), xc(p, 0.0);
        for (int j = 0; j < hc; ++j) {
            for (int c = 0; c < C; ++c) h1[j] += gsp[c] * wc1[c * hc + j];
            h1[j] = std::max(0.0, h1[j]);
        }
        for (int k = 0; k < p; ++k)
            for (int j = 0; j < hc; ++j) xc[k] += h1[j] * wc2[j * p + k];
        // spatial branch
        std::vector<double> gcp(N, 0.0);
        for (int r = 0; r < N; ++r) {
            for (int c = 0; c < C; ++c) gcp[r] += x.data()[(b * N + r) * C + c];
            gcp[r] /= C;
        }
        std::vector<double> h2(hs, 0.0), xs(p, 0.0);
        for (int j = 0; j < hs; ++j) {
            for (int r = 0; r < N; ++r) h2[j] += gcp[r] * ws1[r * hs + j];
            h2[j] = std::max(0.0, h2[j]);
        }
        for (int k = 0; k < p; ++k)
            for (int j = 0; j < hs; ++j) xs[k] += h2[j] * ws2[j * p + k];
        // joint MLP + softmax
        std::vector<double> cat(2 * p);
        for (int k = 0; k < p; ++k) cat[k] = xc[k], cat[p + k] = xs[k];
        std::vector<double> j1(p, 0.0), logits(p, 0.0);
        for (int k = 0; k < p; ++k) {
            for (int i = 0; i < 2 * p; ++i) j1[k] += cat[i] * wj1[i * p + k];
            j1[k] = std::max(0.0, j1[k]);
        }
        for (int k = 0; k < p; ++k)
            for (int i = 0; i < p; ++i) logits[k] += j1[i] * wj2[i * p + k];
        double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (double& v : logits) z += (v = std::exp(v - mx));
        for (int k = 0; k < p; ++k) {
            CHECK(w.weights.data()[b * p + k] == doctest::Approx(logits[k] / z).epsilon(1e-6));
        }
    }

    // permuting channels changes the weights in general
    std::vector<double> perm(x.data().size());
    for (int r = 0; r < B * N; ++r)
        for (int c = 0; c < C; ++c) perm[r * C + c] = x.data()[r * C + (c + 1) % C];
    auto w2 = router.forward(DTensor::from_data({B, H, W, C}, perm), RoutingType::Soft, 1.0,
                             Mode::Eval, nullptr, "spatial");
    CHECK(testutil::max_abs_diff(w.weights.data(), w2.weights.data()) > 1e-6);
}

TEST_CASE("route_combine: uniform mean, one-hot selection, loop oracle") {
    RngState rng(204);
    const int B = 2, p = 3;
    std::vector<DTensor> outs;
    for (int k = 0; k < p; ++k) outs.push_back(rand_tensor({B, 2, 2, 3}, rng));

    PathWeights<double> uni{DTensor::full({B, p}, 1.0 / p), "spatial"};
    auto mean_out = route_combine(uni, outs);
    for (std::size_t i = 0; i < mean_out.data().size(); ++i) {
        const double expect =
            (outs[0].data()[i] + outs[1].data()[i] + outs[2].data()[i]) / 3.0;
        CHECK(mean_out.data()[i] == doctest::Approx(expect).epsilon(1e-12));
    }

    PathWeights<double> onehot{DTensor::from_data({B, p}, {0, 1, 0, 0, 1, 0}), "spatial"};
    auto picked = route_combine(onehot, outs);
    CHECK(picked.data() == outs[1].data());

    auto w = rand_tensor({B, p}, rng, 0.0, 1.0);
    PathWeights<double> pw{w, "spatial"};
    auto y = route_combine(pw, outs);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < 12; ++i) {
            double s = 0;
            for (int k = 0; k < p; ++k) s += w.data()[b * p + k] * outs[k].data()[b * 12 + i];
            CHECK(y.data()[b * 12 + i] == doctest::Approx(s).epsilon(1e-6));
        }

    CHECK_THROWS_AS(route_combine(uni, std::vector<DTensor>{outs[0]}), ShapeError);

    // gradient flows into both the weights and every cell output
    auto wl = rand_tensor({B, 2, 2, 3}, rng);
    CHECK(gradcheck({w, outs[0], outs[1], outs[2]}, [&] {
              PathWeights<double> pw2{softmax(w, 1), "spatial"};
              return sum(mul(wl, route_combine(pw2, outs)));
          }) < 1e-4);
}

TEST_CASE("gumbel_hard_route: eval argmax, train one-hot forward with soft backward") {
    auto logits = DTensor::from_data({1, 3}, {5, 0, 0});
    auto w = gumbel_hard_route(logits, 1.0, nullptr, Mode::Eval);
    CHECK(w.data() == std::vector<double>{1, 0, 0});

    RngState rng(205);
    auto lg = DTensor::from_data({4, 3}, {0.3, -0.2, 0.1, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -2.0, 2.0, 0.0});
    lg.set_requires_grad(true);
    auto hard = gumbel_hard_route(lg, 0.7, &rng, Mode::Train);
    for (int b = 0; b < 4; ++b) {
        double s = 0;
        int ones = 0;
        for (int k = 0; k < 3; ++k) {
            const double v = hard.data()[b * 3 + k];
            CHECK((v == 0.0 || v == 1.0));
            ones += v == 1.0;
            s += v;
        }
        CHECK(s == 1.0);
        CHECK(ones == 1);
    }
    // backward receives the soft distribution's gradient: nonzero on all coords
    sum(mul(hard, hard)).backward();
    int nonzero = 0;
    for (double g : lg.grad()) nonzero += std::abs(g) > 1e-12;
    CHECK(nonzero == 12);

    CHECK_THROWS_AS(gumbel_hard_route(lg, 0.0, &rng, Mode::Train), ConfigError);
    CHECK_THROWS_AS(gumbel_hard_route(lg, -1.0, &rng, Mode::Train), ConfigError);
}

TEST_CASE("gumbel sampling frequencies match the softmax distribution") {
    RngState rng(206);
    auto logits = DTensor::zeros({1, 2});
    int first = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        auto w = gumbel_hard_route(logits, 1.0, &rng, Mode::Train);
        first += w.data()[0] == 1.0;
    }
    const double freq = static_cast<double>(first) / trials;
    CHECK(freq > 0.48);
    CHECK(freq < 0.52);
}

TEST_CASE("hard/soft consistency: tiny temperature concentrates the soft distribution") {
    RngState rng(207);
    // margin >= 1 between the top logit and the rest
    auto logits = DTensor::from_data({1, 3}, {2.0, 1.0, 0.5});
    // direct check on the tempered softmax that the straight-through path uses
    auto soft = softmax(scale(logits, 1.0 / 1e-3), 1);
    CHECK(*std::max_element(soft.data().begin(), soft.data().end()) > 0.99);
}

TEST_CASE("router variants") {
    RngState rng(208);
    const int B = 4, H = 3, W = 3, C = 16, N = H * W, p = 3;

    Router<double> stat(RouterVariant::StaticSum, C, N, p, 16, 7, rng);
    auto x = rand_tensor({B, H, W, C}, rng);
    auto w = stat.forward(x, RoutingType::Soft, 1.0, Mode::Eval, nullptr, "spatial");
    for (double v : w.weights.data()) CHECK(v == doctest::Approx(1.0 / p));
    ParamList<double> none;
    stat.collect("r", none);
    CHECK(none.empty());

    // CHANNEL_ONLY ignores spatial permutations
    Router<double> cha(RouterVariant::ChannelOnly, C, N, p, 16, 7, rng);
    auto wc = cha.forward(x, RoutingType::Soft, 1.0, Mode::Eval, nullptr, "spatial");
    std::vector<double> sperm(x.data().size());
    for (int b = 0; b < B; ++b)
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < C; ++c)
                sperm[(b * N + (r + 3) % N) * C + c] = x.data()[(b * N + r) * C + c];
    auto wcp = cha.forward(DTensor::from_data({B, H, W, C}, sperm), RoutingType::Soft, 1.0,
                           Mode::Eval, nullptr, "spatial");
    CHECK(testutil::max_abs_diff(wc.weights.data(), wcp.weights.data()) < 1e-6);

    // SPATIAL_ONLY ignores channel permutations
    Router<double> spa(RouterVariant::SpatialOnly, C, N, p, 16, 7, rng);
    auto ws = spa.forward(x, RoutingType::Soft, 1.0, Mode::Eval, nullptr, "spatial");
    std::vector<double> cperm(x.data().size());
    for (int r = 0; r < B * N; ++r)
        for (int c = 0; c < C; ++c) cperm[r * C + (c + 5) % C] = x.data()[r * C + c];
    auto wsp = spa.forward(DTensor::from_data({B, H, W, C}, cperm), RoutingType::Soft, 1.0,
                           Mode::Eval, nullptr, "spatial");
    CHECK(testutil::max_abs_diff(ws.weights.data(), wsp.weights.data()) < 1e-6);
}

TEST_CASE("discretize_paths examples") {
    auto uni = DTensor::from_data({1, 3}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    auto a = discretize_paths(uni, 0.3);
    CHECK(a[0] == std::vector<int>{0, 1, 2});

    auto two = DTensor::from_data({1, 2}, {0.29, 0.71});
    CHECK(discretize_paths(two, 0.3)[0] == std::vector<int>{1});

    auto three = DTensor::from_data({1, 3}, {0.25, 0.25, 0.5});
    CHECK(discretize_paths(three, 0.3)[0] == std::vector<int>{2});

    CHECK_THROWS_AS(discretize_paths(uni, 0.0), ConfigError);
    CHECK_THROWS_AS(discretize_paths(uni, 1.0), ConfigError);
}

TEST_CASE("SCJR gradients flow through both branches") {
    RngState rng(209);
    const int B = 2, H = 3, W = 3, C = 16, p = 2;
    Router<double> router(RouterVariant::SCJR, C, H * W, p, 16, 7, rng);
    ParamList<double> ps;
    router.collect("r", ps);
    auto x = rand_tensor({B, H, W, C}, rng);
    auto wl = rand_tensor({B, p}, rng);
    auto checked = tensors_of(ps);
    checked.push_back(x);
    CHECK(gradcheck(checked, [&] {
              auto w = router.forward(x, RoutingType::Soft, 1.0, Mode::Eval, nullptr, "s");
              return sum(mul(wl, w.weights));
          }) < 1e-4);
}
