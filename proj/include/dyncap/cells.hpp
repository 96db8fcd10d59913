#pragma once

// The five basic modeling cells. Spatial space: GMC (multi-head
// self-attention), LMC (gated multi-branch convolutions), AMC (gated axial
// mixing). Channel space: CPC (feed-forward projection), CAC
// (squeeze-and-excitation gate). Every cell maps [B,H,W,C] -> [B,H,W,C].

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "dyncap/errors.hpp"
#include "dyncap/nn.hpp"
#include "dyncap/tensor.hpp"

namespace dyncap {

enum class CellKind { GMC, LMC, AMC, CPC, CAC };
enum class RoutingSpace { Spatial, Channel };

inline const char* cell_name(CellKind k) {
    switch (k) {
        case CellKind::GMC: return "gmc";
        case CellKind::LMC: return "lmc";
        case CellKind::AMC: return "amc";
        case CellKind::CPC: return "cpc";
        case CellKind::CAC: return "cac";
    }
    return "?";
}

inline CellKind parse_cell(const std::string& s) {
    if (s == "gmc" || s == "GMC") return CellKind::GMC;
    if (s == "lmc" || s == "LMC") return CellKind::LMC;
    if (s == "amc" || s == "AMC") return CellKind::AMC;
    if (s == "cpc" || s == "CPC") return CellKind::CPC;
    if (s == "cac" || s == "CAC") return CellKind::CAC;
    throw ConfigError("unknown cell kind '" + s + "'");
}

// Default grouping: spatial modeling cells vs channel modeling cells.
inline RoutingSpace cell_space(CellKind k) {
    switch (k) {
        case CellKind::GMC:
        case CellKind::LMC:
        case CellKind::AMC: return RoutingSpace::Spatial;
        default: return RoutingSpace::Channel;
    }
}

// --------------------------------------------------------------------------
// GMC: multi-head self-attention over the N = H*W grid positions, with its
// own output projection and internal residual.

template <class T>
class GmcCell {
public:
    GmcCell() = default;
    GmcCell(int channels, int heads, RngState& rng) : channels_(channels), heads_(heads) {
        if (heads <= 0 || channels % heads != 0) {
            throw ConfigError("GMC: channels " + std::to_string(channels) +
                              " not divisible by heads " + std::to_string(heads));
        }
        wq_ = Linear<T>(channels, channels, false, rng);
        wk_ = Linear<T>(channels, channels, false, rng);
        wv_ = Linear<T>(channels, channels, false, rng);
        wo_ = Linear<T>(channels, channels, false, rng);
    }

    TensorT<T> forward(const TensorT<T>& x_grid, Mode) const {
        const int B = x_grid.dim(0), H = x_grid.dim(1), W = x_grid.dim(2), C = x_grid.dim(3);
        const int N = H * W;
        auto x = reshape(x_grid, {B, N, C});
        auto q = wq_.forward(x);
        auto k = wk_.forward(x);
        auto v = wv_.forward(x);
        const int d = C / heads_;
        const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
        std::vector<TensorT<T>> ctx;
        ctx.reserve(static_cast<std::size_t>(heads_));
        for (int h = 0; h < heads_; ++h) {
            auto qh = slice(q, 2, h * d, d);
            auto kh = slice(k, 2, h * d, d);
            auto vh = slice(v, 2, h * d, d);
            auto scores = scale(matmul(qh, transpose_last2(kh)), inv_sqrt_d);
            auto att = softmax(scores, 2);
            ctx.push_back(matmul(att, vh));
        }
        auto y = add(wo_.forward(concat(ctx, 2)), x);
        return reshape(y, {B, H, W, C});
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        wq_.collect(prefix + ".wq", out);
        wk_.collect(prefix + ".wk", out);
        wv_.collect(prefix + ".wv", out);
        wo_.collect(prefix + ".wo", out);
    }
    void collect_buffers(const std::string&, BufferList<T>&) {}

private:
    int channels_ = 0, heads_ = 0;
    Linear<T> wq_, wk_, wv_, wo_;
};

// --------------------------------------------------------------------------
// LMC: two multi-branch convolution stages joined by ReLU, then a sigmoid
// gate applied to the original input. Branches per stage: identity, 1x1
// conv, and "3x3" = 1x1 then 3x3, each batch-normalized separately.

template <class T>
class LmcCell {
public:
    LmcCell() = default;
    LmcCell(int channels, RngState& rng) {
        for (int s = 0; s < 2; ++s) {
            stage_[s].f1 = init_projection<T>({1, 1, channels, channels}, channels, rng);
            stage_[s].f3a = init_projection<T>({1, 1, channels, channels}, channels, rng);
            stage_[s].f3b = init_projection<T>({3, 3, channels, channels}, 9 * channels, rng);
            stage_[s].bn_id = BatchNorm<T>(channels);
            stage_[s].bn_f1 = BatchNorm<T>(channels);
            stage_[s].bn_f3 = BatchNorm<T>(channels);
        }
    }

    TensorT<T> forward(const TensorT<T>& x0, Mode mode) {
        auto x1 = stage_forward(0, x0, mode);
        auto x2 = stage_forward(1, relu(x1), mode);
        return mul(sigmoid(x2), x0);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        for (int s = 0; s < 2; ++s) {
            const std::string p = prefix + ".s" + std::to_string(s);
            out.push_back({p + ".f1.w", stage_[s].f1});
            out.push_back({p + ".f3a.w", stage_[s].f3a});
            out.push_back({p + ".f3b.w", stage_[s].f3b});
            stage_[s].bn_id.collect(p + ".bn_id", out);
            stage_[s].bn_f1.collect(p + ".bn_f1", out);
            stage_[s].bn_f3.collect(p + ".bn_f3", out);
        }
    }
    void collect_buffers(const std::string& prefix, BufferList<T>& out) {
        for (int s = 0; s < 2; ++s) {
            const std::string p = prefix + ".s" + std::to_string(s);
            stage_[s].bn_id.collect_buffers(p + ".bn_id", out);
            stage_[s].bn_f1.collect_buffers(p + ".bn_f1", out);
            stage_[s].bn_f3.collect_buffers(p + ".bn_f3", out);
        }
    }

private:
    struct Stage {
        TensorT<T> f1, f3a, f3b;
        BatchNorm<T> bn_id, bn_f1, bn_f3;
    };

    TensorT<T> stage_forward(int s, const TensorT<T>& x, Mode mode) {
        auto& st = stage_[s];
        auto branch_id = st.bn_id.forward(x, mode);
        auto branch_f1 = st.bn_f1.forward(conv2d(x, st.f1), mode);
        auto branch_f3 = st.bn_f3.forward(conv2d(conv2d(x, st.f3a), st.f3b), mode);
        return add(add(branch_id, branch_f1), branch_f3);
    }

    Stage stage_[2];
};

// --------------------------------------------------------------------------
// AMC: fully connected mixing along the height axis (per (w,c) slot) and the
// width axis (per (h,c) slot), concatenated with the input and reduced to a
// sigmoid gate.

template <class T>
class AmcCell {
public:
    AmcCell() = default;
    AmcCell(int channels, int grid_h, int grid_w, RngState& rng)
        : grid_h_(grid_h), grid_w_(grid_w) {
        fc_h_ = init_projection<T>({grid_h, grid_h}, grid_h, rng);
        fc_w_ = init_projection<T>({grid_w, grid_w}, grid_w, rng);
        w_rec_ = init_projection<T>({3 * channels, channels}, 3 * channels, rng);
    }

    TensorT<T> forward(const TensorT<T>& x, Mode) const {
        if (x.dim(1) != grid_h_ || x.dim(2) != grid_w_) {
            throw ShapeError("AMC built for " + std::to_string(grid_h_) + "x" +
                             std::to_string(grid_w_) + " grid, got " + shape_str(x.shape()));
        }
        // x_h[b,i,w,c] = sum_j x[b,j,w,c] * fc_h[j,i]
        auto x_h = permute(matmul(permute(x, {0, 2, 3, 1}), fc_h_), {0, 3, 1, 2});
        // x_w[b,h,j,c] = sum_i x[b,h,i,c] * fc_w[i,j]
        auto x_w = permute(matmul(permute(x, {0, 1, 3, 2}), fc_w_), {0, 1, 3, 2});
        auto x_con = concat<T>({x, x_h, x_w}, 3);
        return mul(sigmoid(matmul(x_con, w_rec_)), x);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".fc_h", fc_h_});
        out.push_back({prefix + ".fc_w", fc_w_});
        out.push_back({prefix + ".w_rec", w_rec_});
    }
    void collect_buffers(const std::string&, BufferList<T>&) {}

private:
    int grid_h_ = 0, grid_w_ = 0;
    TensorT<T> fc_h_, fc_w_, w_rec_;
};

// --------------------------------------------------------------------------
// CPC: position-wise feed-forward network with expansion ratio 4.

template <class T>
class CpcCell {
public:
    CpcCell() = default;
    CpcCell(int channels, RngState& rng)
        : w1_(channels, 4 * channels, true, rng), w2_(4 * channels, channels, true, rng) {}

    TensorT<T> forward(const TensorT<T>& x, Mode) const {
        return w2_.forward(relu(w1_.forward(x)));
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        w1_.collect(prefix + ".w1", out);
        w2_.collect(prefix + ".w2", out);
    }
    void collect_buffers(const std::string&, BufferList<T>&) {}

private:
    Linear<T> w1_, w2_;
};

// --------------------------------------------------------------------------
// CAC: squeeze-and-excitation. Channel reduction floor(C/16), clamped to 1
// for narrow test configs.

template <class T>
class CacCell {
public:
    CacCell() = default;
    CacCell(int channels, RngState& rng) {
        const int reduced = std::max(1, channels / 16);
        w1_ = Linear<T>(channels, reduced, false, rng);
        w2_ = Linear<T>(reduced, channels, false, rng);
    }

    TensorT<T> forward(const TensorT<T>& x, Mode) const {
        const int B = x.dim(0), C = x.dim(3);
        auto gate = sigmoid(w2_.forward(relu(w1_.forward(global_pool(x, PoolDomain::Spatial)))));
        return mul(reshape(gate, {B, 1, 1, C}), x);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        w1_.collect(prefix + ".w1", out);
        w2_.collect(prefix + ".w2", out);
    }
    void collect_buffers(const std::string&, BufferList<T>&) {}

private:
    Linear<T> w1_, w2_;
};

// --------------------------------------------------------------------------

template <class T>
class Cell {
public:
    Cell() = default;

    static Cell make(CellKind kind, int channels, int grid_h, int grid_w, int heads,
                     RngState& rng) {
        Cell c;
        c.kind_ = kind;
        switch (kind) {
            case CellKind::GMC: c.impl_ = GmcCell<T>(channels, heads, rng); break;
            case CellKind::LMC: c.impl_ = LmcCell<T>(channels, rng); break;
            case CellKind::AMC: c.impl_ = AmcCell<T>(channels, grid_h, grid_w, rng); break;
            case CellKind::CPC: c.impl_ = CpcCell<T>(channels, rng); break;
            case CellKind::CAC: c.impl_ = CacCell<T>(channels, rng); break;
        }
        return c;
    }

    CellKind kind() const { return kind_; }

    TensorT<T> forward(const TensorT<T>& x, Mode mode) {
        return std::visit([&](auto& cell) { return cell.forward(x, mode); }, impl_);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        std::visit([&](const auto& cell) { cell.collect(prefix + "." + cell_name(kind_), out); },
                   impl_);
    }
    void collect_buffers(const std::string& prefix, BufferList<T>& out) {
        std::visit(
            [&](auto& cell) { cell.collect_buffers(prefix + "." + cell_name(kind_), out); },
            impl_);
    }

private:
    CellKind kind_ = CellKind::GMC;
    std::variant<GmcCell<T>, LmcCell<T>, AmcCell<T>, CpcCell<T>, CacCell<T>> impl_;
};

}  // namespace dyncap
