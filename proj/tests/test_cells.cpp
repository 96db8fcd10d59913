#include "doctest.h"

#include <cmath>
#include <vector>

#include "dyncap/cells.hpp"
#include "testutil.hpp"

using namespace dyncap;
using testutil::gradcheck;
using testutil::rand_tensor;

namespace {

DTensor find_param(const ParamList<double>& ps, const std::string& suffix) {
    for (const auto& p : ps) {
        if (p.name.size() >= suffix.size() &&
            p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            return p.tensor;
        }
    }
    FAIL("param not found: ", suffix);
    return {};
}

void fill(DTensor t, double v) {
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), v);
}

double sigmoid_ref(double v) { return 1.0 / (1.0 + std::exp(-v)); }

std::vector<DTensor> tensors_of(const ParamList<double>& ps) {
    std::vector<DTensor> out;
    for (const auto& p : ps) out.push_back(p.tensor);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("GMC: single position reduces to value-output projection plus residual") {
    RngState rng(101);
    const int C = 6;
    auto cell = GmcCell<double>(C, 2, rng);
    ParamList<double> ps;
    cell.collect("gmc", ps);
    auto wv = find_param(ps, "wv.w");
    auto wo = find_param(ps, "wo.w");

    auto x = rand_tensor({1, 1, 1, C}, rng);
    auto y = cell.forward(x, Mode::Eval);
    // with N=1, softmax over one element is 1, so out = x Wv Wo + x
    for (int c = 0; c < C; ++c) {
        double v = 0;
        for (int j = 0; j < C; ++j) {
            double t = 0;
            for (int k = 0; k < C; ++k) t += x.data()[k] * wv.data()[k * C + j];
            v += t * wo.data()[j * C + c];
        }
        CHECK(y.data()[c] == doctest::Approx(v + x.data()[c]).epsilon(1e-9));
    }
}

TEST_CASE("GMC: zero projections leave only the residual") {
    RngState rng(102);
    const int C = 8;
    auto cell = GmcCell<double>(C, 2, rng);
    ParamList<double> ps;
    cell.collect("gmc", ps);
    fill(find_param(ps, "wq.w"), 0.0);
    fill(find_param(ps, "wk.w"), 0.0);
    fill(find_param(ps, "wv.w"), 0.0);
    auto x = rand_tensor({2, 2, 2, C}, rng);
    CHECK(testutil::max_abs_diff(cell.forward(x, Mode::Eval).data(), x.data()) < 1e-12);
}

TEST_CASE("GMC matches naive per-head attention oracle") {
    RngState rng(103);
    const int B = 1, H = 2, W = 2, C = 8, heads = 2, N = H * W, d = C / heads;
    auto cell = GmcCell<double>(C, heads, rng);
    ParamList<double> ps;
    cell.collect("gmc", ps);
    const auto& wq = find_param(ps, "wq.w").data();
    const auto& wk = find_param(ps, "wk.w").data();
    const auto& wv = find_param(ps, "wv.w").data();
    const auto& wo = find_param(ps, "wo.w").data();

    auto x = rand_tensor({B, H, W, C}, rng);
    auto y = cell.forward(x, Mode::Eval);

    // straight-line transcription: one loop nest per head
    const auto& xv = x.data();
    std::vector<double> ctx(N * C, 0.0);
    for (int h = 0; h < heads; ++h) {
        std::vector<double> q(N * d), k(N * d), v(N * d);
        for (int n = 0; n < N; ++n)
            for (int j = 0; j < d; ++j) {
                double sq = 0, sk = 0, sv = 0;
                for (int c = 0; c < C; ++c) {
                    sq += xv[n * C + c] * wq[c * C + h * d + j];
                    sk += xv[n * C + c] * wk[c * C + h * d + j];
                    sv += xv[n * C + c] * wv[c * C + h * d + j];
                }
                q[n * d + j] = sq;
                k[n * d + j] = sk;
                v[n * d + j] = sv;
            }
        for (int i = 0; i < N; ++i) {
            std::vector<double> att(N);
            double mx = -1e300;
            for (int j2 = 0; j2 < N; ++j2) {
                double s = 0;
                for (int j = 0; j < d; ++j) s += q[i * d + j] * k[j2 * d + j];
                att[j2] = s / std::sqrt(static_cast<double>(d));
                mx = std::max(mx, att[j2]);
            }
            double z = 0;
            for (double& a : att) z += (a = std::exp(a - mx));
            for (double& a : att) a /= z;
            for (int j = 0; j < d; ++j) {
                double s = 0;
                for (int j2 = 0; j2 < N; ++j2) s += att[j2] * v[j2 * d + j];
                ctx[i * C + h * d + j] = s;
            }
        }
    }
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double s = xv[n * C + c];
            for (int j = 0; j < C; ++j) s += ctx[n * C + j] * wo[j * C + c];
            CHECK(y.data()[n * C + c] == doctest::Approx(s).epsilon(1e-6));
        }
}

TEST_CASE("GMC config error when heads do not divide channels") {
    RngState rng(104);
    CHECK_THROWS_AS(GmcCell<double>(6, 4, rng), ConfigError);
}

// ---------------------------------------------------------------------------

TEST_CASE("LMC: zero input gives zero output, gate bounds magnitude") {
    RngState rng(111);
    const int C = 4;
    auto cell = LmcCell<double>(C, rng);
    auto zero = DTensor::zeros({2, 3, 3, C});
    auto y0 = cell.forward(zero, Mode::Eval);
    for (double v : y0.data()) CHECK(v == 0.0);

    auto x = rand_tensor({2, 3, 3, C}, rng);
    auto y = cell.forward(x, Mode::Train);
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        CHECK(std::abs(y.data()[i]) <= std::abs(x.data()[i]));
    }
}

TEST_CASE("LMC matches a straight-line transcription") {
    RngState rng(112);
    const int B = 2, H = 3, W = 3, C = 4, M = B * H * W;
    auto cell = LmcCell<double>(C, rng);
    ParamList<double> ps;
    cell.collect("lmc", ps);
    // give the BNs non-trivial scale/shift
    for (int s = 0; s < 2; ++s)
        for (const char* bn : {"bn_id", "bn_f1", "bn_f3"}) {
            auto g = find_param(ps, std::string("s") + std::to_string(s) + "." + bn + ".gamma");
            auto b = find_param(ps, std::string("s") + std::to_string(s) + "." + bn + ".beta");
            for (std::size_t i = 0; i < g.data().size(); ++i) {
                g.mutable_data()[i] = 0.8 + 0.1 * static_cast<double>(i);
                b.mutable_data()[i] = 0.05 * static_cast<double>(i) - 0.1;
            }
        }

    auto x = rand_tensor({B, H, W, C}, rng);
    auto y = cell.forward(x, Mode::Train);

    auto conv_ref = [&](const std::vector<double>& in, const std::vector<double>& w, int kh,
                        int kw) {
        std::vector<double> out(static_cast<std::size_t>(M) * C, 0.0);
        const int ph = kh / 2, pw = kw / 2;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    for (int di = 0; di < kh; ++di)
                        for (int dj = 0; dj < kw; ++dj) {
                            const int si = i + di - ph, sj = j + dj - pw;
                            if (si < 0 || si >= H || sj < 0 || sj >= W) continue;
                            for (int ci = 0; ci < C; ++ci)
                                for (int co = 0; co < C; ++co)
                                    out[((b * H + i) * W + j) * C + co] +=
                                        in[((b * H + si) * W + sj) * C + ci] *
                                        w[((di * kw + dj) * C + ci) * C + co];
                        }
        return out;
    };
    auto bn_ref = [&](const std::vector<double>& in, const std::string& name) {
        const auto& g = find_param(ps, name + ".gamma").data();
        const auto& be = find_param(ps, name + ".beta").data();
        std::vector<double> mu(C, 0), var(C, 0);
        for (int r = 0; r < M; ++r)
            for (int c = 0; c < C; ++c) mu[c] += in[r * C + c];
        for (int c = 0; c < C; ++c) mu[c] /= M;
        for (int r = 0; r < M; ++r)
            for (int c = 0; c < C; ++c) {
                const double dd = in[r * C + c] - mu[c];
                var[c] += dd * dd;
            }
        for (int c = 0; c < C; ++c) var[c] /= M;
        std::vector<double> out(in.size());
        for (int r = 0; r < M; ++r)
            for (int c = 0; c < C; ++c)
                out[r * C + c] = g[c] * (in[r * C + c] - mu[c]) / std::sqrt(var[c] + 1e-5) + be[c];
        return out;
    };
    auto stage_ref = [&](const std::vector<double>& in, int s) {
        const std::string p = "s" + std::to_string(s);
        const auto& f1 = find_param(ps, p + ".f1.w").data();
        const auto& f3a = find_param(ps, p + ".f3a.w").data();
        const auto& f3b = find_param(ps, p + ".f3b.w").data();
        auto a = bn_ref(in, p + ".bn_id");
        auto b = bn_ref(conv_ref(in, f1, 1, 1), p + ".bn_f1");
        auto c = bn_ref(conv_ref(conv_ref(in, f3a, 1, 1), f3b, 3, 3), p + ".bn_f3");
        std::vector<double> out(in.size());
        for (std::size_t i = 0; i < in.size(); ++i) out[i] = a[i] + b[i] + c[i];
        return out;
    };

    auto x1 = stage_ref(x.data(), 0);
    for (double& v : x1) v = std::max(0.0, v);
    auto x2 = stage_ref(x1, 1);
    for (std::size_t i = 0; i < x2.size(); ++i) {
        const double expect = sigmoid_ref(x2[i]) * x.data()[i];
        CHECK(y.data()[i] == doctest::Approx(expect).epsilon(1e-6));
    }
}

// ---------------------------------------------------------------------------

TEST_CASE("AMC: constructed identity gate reduces to sigmoid(x) * x") {
    RngState rng(121);
    const int B = 1, H = 3, W = 3, C = 2;
    auto cell = AmcCell<double>(C, H, W, rng);
    ParamList<double> ps;
    cell.collect("amc", ps);
    auto fc_h = find_param(ps, "fc_h");
    auto fc_w = find_param(ps, "fc_w");
    auto w_rec = find_param(ps, "w_rec");
    fill(fc_h, 0.0);
    fill(fc_w, 0.0);
    for (int i = 0; i < H; ++i) fc_h.mutable_data()[i * H + i] = 1.0;
    for (int i = 0; i < W; ++i) fc_w.mutable_data()[i * W + i] = 1.0;
    fill(w_rec, 0.0);
    for (int c = 0; c < C; ++c) w_rec.mutable_data()[c * C + c] = 1.0;  // select first C slice

    auto x = rand_tensor({B, H, W, C}, rng);
    auto y = cell.forward(x, Mode::Eval);
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        CHECK(y.data()[i] == doctest::Approx(sigmoid_ref(x.data()[i]) * x.data()[i]).epsilon(1e-9));
    }
}

TEST_CASE("AMC matches an independent transcription, rejects wrong grid") {
    RngState rng(122);
    const int B = 1, H = 3, W = 3, C = 4;
    auto cell = AmcCell<double>(C, H, W, rng);
    ParamList<double> ps;
    cell.collect("amc", ps);
    const auto& fc_h = find_param(ps, "fc_h").data();
    const auto& fc_w = find_param(ps, "fc_w").data();
    const auto& w_rec = find_param(ps, "w_rec").data();

    auto x = rand_tensor({B, H, W, C}, rng);
    auto y = cell.forward(x, Mode::Eval);

    const auto& xv = x.data();
    auto at = [&](int i, int j, int c) { return xv[(i * W + j) * C + c]; };
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            for (int c = 0; c < C; ++c) {
                double xh = 0, xw = 0;
                for (int k = 0; k < H; ++k) xh += at(k, j, c) * fc_h[k * H + i];
                for (int k = 0; k < W; ++k) xw += at(i, k, c) * fc_w[k * W + j];
                double gate_in = 0;
                for (int cc = 0; cc < C; ++cc) {
                    double xh2 = 0, xw2 = 0;
                    for (int k = 0; k < H; ++k) xh2 += at(k, j, cc) * fc_h[k * H + i];
                    for (int k = 0; k < W; ++k) xw2 += at(i, k, cc) * fc_w[k * W + j];
                    gate_in += at(i, j, cc) * w_rec[cc * C + c];
                    gate_in += xh2 * w_rec[(C + cc) * C + c];
                    gate_in += xw2 * w_rec[(2 * C + cc) * C + c];
                }
                (void)xh;
                (void)xw;
                const double expect = sigmoid_ref(gate_in) * at(i, j, c);
                CHECK(y.data()[(i * W + j) * C + c] == doctest::Approx(expect).epsilon(1e-6));
            }

    CHECK_THROWS_AS(cell.forward(rand_tensor({B, H + 1, W, C}, rng), Mode::Eval), ShapeError);
}

// ---------------------------------------------------------------------------

TEST_CASE("CPC: degenerate parameter cases") {
    RngState rng(131);
    const int C = 4;
    auto cell = CpcCell<double>(C, rng);
    ParamList<double> ps;
    cell.collect("cpc", ps);
    auto w1 = find_param(ps, "w1.w");
    auto w2 = find_param(ps, "w2.w");

    SUBCASE("zero weights pass through b2") {
        fill(w1, 0.0);
        fill(w2, 0.0);
        auto b2 = find_param(ps, "w2.b");
        for (int c = 0; c < C; ++c) b2.mutable_data()[c] = 0.5 + c;
        auto x = rand_tensor({1, 2, 2, C}, rng);
        auto y = cell.forward(x, Mode::Eval);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < C; ++c) CHECK(y.data()[r * C + c] == doctest::Approx(0.5 + c));
    }
    SUBCASE("zero input with zero b1 gives b2") {
        auto b2 = find_param(ps, "w2.b");
        auto x = DTensor::zeros({1, 1, 1, C});
        auto y = cell.forward(x, Mode::Eval);
        for (int c = 0; c < C; ++c) CHECK(y.data()[c] == doctest::Approx(b2.data()[c]));
    }
}

TEST_CASE("CPC matches the two-matmul hand computation") {
    RngState rng(132);
    const int C = 4, E = 4 * C;
    auto cell = CpcCell<double>(C, rng);
    ParamList<double> ps;
    cell.collect("cpc", ps);
    const auto& w1 = find_param(ps, "w1.w").data();
    const auto& b1 = find_param(ps, "w1.b").data();
    const auto& w2 = find_param(ps, "w2.w").data();
    const auto& b2 = find_param(ps, "w2.b").data();
    // nonzero biases
    for (auto& p : ps)
        if (p.name.find(".b") != std::string::npos)
            for (auto& v : p.tensor.mutable_data()) v = 0.1;

    auto x = rand_tensor({2, 2, 2, C}, rng);
    auto y = cell.forward(x, Mode::Eval);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < C; ++c) {
            double out = b2[c];
            for (int e = 0; e < E; ++e) {
                double h = b1[e];
                for (int k = 0; k < C; ++k) h += x.data()[r * C + k] * w1[k * E + e];
                out += std::max(0.0, h) * w2[e * C + c];
            }
            CHECK(y.data()[r * C + c] == doctest::Approx(out).epsilon(1e-6));
        }
}

// ---------------------------------------------------------------------------

TEST_CASE("CAC: zero excitation gives a uniform half gate") {
    RngState rng(141);
    const int C = 16;
    auto cell = CacCell<double>(C, rng);
    ParamList<double> ps;
    cell.collect("cac", ps);
    fill(find_param(ps, "w2.w"), 0.0);
    auto x = rand_tensor({2, 3, 3, C}, rng);
    auto y = cell.forward(x, Mode::Eval);
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        CHECK(y.data()[i] == doctest::Approx(0.5 * x.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("CAC gate is spatially constant; matches transcription") {
    RngState rng(142);
    const int B = 2, H = 3, W = 3, C = 32, R = C / 16;
    auto cell = CacCell<double>(C, rng);
    ParamList<double> ps;
    cell.collect("cac", ps);
    const auto& w1 = find_param(ps, "w1.w").data();
    const auto& w2 = find_param(ps, "w2.w").data();

    auto x = rand_tensor({B, H, W, C}, rng);
    auto y = cell.forward(x, Mode::Eval);

    for (int b = 0; b < B; ++b) {
        std::vector<double> gsp(C, 0.0);
        for (int r = 0; r < H * W; ++r)
            for (int c = 0; c < C; ++c) gsp[c] += x.data()[(b * H * W + r) * C + c];
        for (double& v : gsp) v /= H * W;
        std::vector<double> hid(R, 0.0);
        for (int j = 0; j < R; ++j) {
            for (int c = 0; c < C; ++c) hid[j] += gsp[c] * w1[c * R + j];
            hid[j] = std::max(0.0, hid[j]);
        }
        for (int c = 0; c < C; ++c) {
            double e = 0;
            for (int j = 0; j < R; ++j) e += hid[j] * w2[j * C + c];
            const double gate = sigmoid_ref(e);
            for (int r = 0; r < H * W; ++r) {
                const std::size_t idx = static_cast<std::size_t>((b * H * W + r) * C + c);
                CHECK(y.data()[idx] == doctest::Approx(gate * x.data()[idx]).epsilon(1e-6));
                // spatial constancy of the gate itself
                if (std::abs(x.data()[idx]) > 1e-9) {
                    CHECK(y.data()[idx] / x.data()[idx] == doctest::Approx(gate).epsilon(1e-6));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------

TEST_CASE("all cells preserve shape and bound gating cells; AMC/LMC gates vary spatially") {
    RngState rng(151);
    const int B = 2, H = 3, W = 3, C = 16;
    auto x = rand_tensor({B, H, W, C}, rng);
    for (CellKind k : {CellKind::GMC, CellKind::LMC, CellKind::AMC, CellKind::CPC, CellKind::CAC}) {
        auto cell = Cell<double>::make(k, C, H, W, 4, rng);
        auto y = cell.forward(x, Mode::Train);
        CHECK(y.shape() == x.shape());
        if (k == CellKind::LMC || k == CellKind::AMC || k == CellKind::CAC) {
            for (std::size_t i = 0; i < x.data().size(); ++i) {
                CHECK(std::abs(y.data()[i]) <= std::abs(x.data()[i]) + 1e-12);
            }
        }
    }

    // witness: with an input constant in channels but varying spatially, the
    // AMC and LMC gates differ across positions while CAC's cannot.
    auto amc = Cell<double>::make(CellKind::AMC, C, H, W, 4, rng);
    auto lmc = Cell<double>::make(CellKind::LMC, C, H, W, 4, rng);
    auto cac = Cell<double>::make(CellKind::CAC, C, H, W, 4, rng);
    std::vector<double> d(static_cast<std::size_t>(B) * H * W * C);
    RngState nrng(999);
    for (int r = 0; r < B * H * W; ++r) {
        const double v = 0.5 + nrng.next_uniform();
        for (int c = 0; c < C; ++c) d[static_cast<std::size_t>(r) * C + c] = v;
    }
    auto xs = DTensor::from_data({B, H, W, C}, d);
    auto gate_spread = [&](Cell<double>& cell) {
        auto y = cell.forward(xs, Mode::Train);
        double lo = 1e300, hi = -1e300;
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double g = y.data()[i] / d[i];
            lo = std::min(lo, g);
            hi = std::max(hi, g);
        }
        return hi - lo;
    };
    CHECK(gate_spread(amc) > 1e-4);
    CHECK(gate_spread(lmc) > 1e-4);
    // CAC gate varies across channels but not across positions for fixed (b,c)
    auto ycac = cac.forward(xs, Mode::Eval);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double g0 = ycac.data()[static_cast<std::size_t>(b * H * W) * C + c] /
                              d[static_cast<std::size_t>(b * H * W) * C + c];
            for (int r = 1; r < H * W; ++r) {
                const std::size_t i = static_cast<std::size_t>((b * H * W + r)) * C + c;
                CHECK(ycac.data()[i] / d[i] == doctest::Approx(g0).epsilon(1e-9));
            }
        }
}

TEST_CASE("every cell passes the finite-difference gradient check") {
    const int B = 1, H = 3, W = 3, C = 8;
    for (CellKind k : {CellKind::GMC, CellKind::LMC, CellKind::AMC, CellKind::CPC, CellKind::CAC}) {
        RngState rng(160 + static_cast<int>(k));
        auto cell = Cell<double>::make(k, C, H, W, 2, rng);
        ParamList<double> ps;
        cell.collect("cell", ps);
        auto x = rand_tensor({B, H, W, C}, rng);
        auto wloss = rand_tensor({B, H, W, C}, rng);
        auto checked = tensors_of(ps);
        checked.push_back(x);
        const double err = gradcheck(checked, [&] {
            return sum(mul(wloss, cell.forward(x, Mode::Train)));
        });
        INFO("cell ", cell_name(k));
        CHECK(err < 1e-4);
    }
}
