#pragma once

// Path-weight generation and dynamic combination. The joint router squeezes
// the input along the spatial domain (channel branch) and along the channel
// domain (spatial branch), then merges both descriptors into one softmax
// simplex per sample. Ablation variants keep a single branch or fall back to
// uniform weights.

#include <string>
#include <vector>

#include "dyncap/cells.hpp"
#include "dyncap/errors.hpp"
#include "dyncap/nn.hpp"
#include "dyncap/tensor.hpp"

namespace dyncap {

enum class RouterVariant { SCJR, SpatialOnly, ChannelOnly, StaticSum };
enum class RoutingType { Soft, Hard };

inline const char* router_name(RouterVariant v) {
    switch (v) {
        case RouterVariant::SCJR: return "scjr";
        case RouterVariant::SpatialOnly: return "spatial_only";
        case RouterVariant::ChannelOnly: return "channel_only";
        case RouterVariant::StaticSum: return "static_sum";
    }
    return "?";
}

inline RouterVariant parse_router(const std::string& s) {
    if (s == "scjr") return RouterVariant::SCJR;
    if (s == "spatial_only") return RouterVariant::SpatialOnly;
    if (s == "channel_only") return RouterVariant::ChannelOnly;
    if (s == "static_sum") return RouterVariant::StaticSum;
    throw ConfigError("unknown router variant '" + s + "'");
}

inline RoutingType parse_routing(const std::string& s) {
    if (s == "soft") return RoutingType::Soft;
    if (s == "hard") return RoutingType::Hard;
    throw ConfigError("unknown routing type '" + s + "'");
}

// Per-sample convex (soft) or one-hot (hard) coefficients over one routing
// space's cells.
template <class T>
struct PathWeights {
    TensorT<T> weights;  // [B, p]
    std::string label;   // "spatial" / "channel" / "joint"
};

// One-hot rows sampled with Gumbel noise in train mode (straight-through
// gradient), deterministic argmax in eval mode.
template <class T>
TensorT<T> gumbel_hard_route(const TensorT<T>& logits, T temperature, RngState* rng, Mode mode) {
    if (!(temperature > T(0))) {
        throw ConfigError("hard routing temperature must be positive");
    }
    const int B = logits.dim(0), p = logits.dim(1);
    TensorT<T> soft;
    if (mode == Mode::Train) {
        if (rng == nullptr) throw ConfigError("hard routing in train mode needs an RngState");
        std::vector<T> noise(static_cast<std::size_t>(B) * p);
        for (auto& v : noise) v = static_cast<T>(rng->next_gumbel());
        auto perturbed = add(logits, TensorT<T>::from_data({B, p}, std::move(noise)));
        soft = softmax(scale(perturbed, T(1) / temperature), 1);
    } else {
        soft = softmax(logits, 1);
    }
    std::vector<T> hard(static_cast<std::size_t>(B) * p, T(0));
    const auto arg = argmax_last(soft);
    for (int b = 0; b < B; ++b) hard[static_cast<std::size_t>(b) * p + arg[static_cast<std::size_t>(b)]] = T(1);
    return straight_through(soft, std::move(hard));
}

template <class T>
class Router {
public:
    Router() = default;

    // n_positions = H*W of the grid this router watches; paths = cells in its
    // routing space. r1/r2 are the channel/spatial reduction ratios.
    Router(RouterVariant variant, int channels, int n_positions, int paths, int r1, int r2,
           RngState& rng)
        : variant_(variant), n_(n_positions), p_(paths) {
        if (paths < 1) throw ConfigError("router needs at least one path");
        if (variant == RouterVariant::StaticSum) return;
        const bool want_channel = variant != RouterVariant::SpatialOnly;
        const bool want_spatial = variant != RouterVariant::ChannelOnly;
        if (want_channel) {
            w_cha1_ = Linear<T>(channels, std::max(1, channels / r1), false, rng);
            w_cha2_ = Linear<T>(std::max(1, channels / r1), paths, false, rng);
        }
        if (want_spatial) {
            w_spa1_ = Linear<T>(n_positions, std::max(1, n_positions / r2), false, rng);
            w_spa2_ = Linear<T>(std::max(1, n_positions / r2), paths, false, rng);
        }
        if (variant == RouterVariant::SCJR) {
            w_joint1_ = Linear<T>(2 * paths, paths, false, rng);
            w_joint2_ = Linear<T>(paths, paths, false, rng);
        }
    }

    RouterVariant variant() const { return variant_; }
    int paths() const { return p_; }

    // Pre-softmax scores [B, p]; StaticSum yields all-zero logits so that the
    // soft weights come out uniform.
    TensorT<T> logits(const TensorT<T>& x_grid) const {
        const int B = x_grid.dim(0), H = x_grid.dim(1), W = x_grid.dim(2);
        if (variant_ == RouterVariant::StaticSum) {
            return TensorT<T>::zeros({B, p_});
        }
        if (H * W != n_) {
            throw ShapeError("router built for N=" + std::to_string(n_) + ", got grid " +
                             shape_str(x_grid.shape()));
        }
        TensorT<T> xc, xs;
        if (variant_ != RouterVariant::SpatialOnly) {
            xc = w_cha2_.forward(relu(w_cha1_.forward(global_pool(x_grid, PoolDomain::Spatial))));
            if (variant_ == RouterVariant::ChannelOnly) return xc;
        }
        if (variant_ != RouterVariant::ChannelOnly) {
            auto gcp = reshape(global_pool(x_grid, PoolDomain::Channel), {B, n_});
            xs = w_spa2_.forward(relu(w_spa1_.forward(gcp)));
            if (variant_ == RouterVariant::SpatialOnly) return xs;
        }
        return w_joint2_.forward(relu(w_joint1_.forward(concat<T>({xc, xs}, 1))));
    }

    PathWeights<T> forward(const TensorT<T>& x_grid, RoutingType type, T temperature, Mode mode,
                           RngState* rng, std::string label) const {
        auto lg = logits(x_grid);
        TensorT<T> w = type == RoutingType::Soft ? softmax(lg, 1)
                                                 : gumbel_hard_route(lg, temperature, rng, mode);
        return PathWeights<T>{std::move(w), std::move(label)};
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        if (variant_ == RouterVariant::StaticSum) return;
        if (variant_ != RouterVariant::SpatialOnly) {
            w_cha1_.collect(prefix + ".w_cha1", out);
            w_cha2_.collect(prefix + ".w_cha2", out);
        }
        if (variant_ != RouterVariant::ChannelOnly) {
            w_spa1_.collect(prefix + ".w_spa1", out);
            w_spa2_.collect(prefix + ".w_spa2", out);
        }
        if (variant_ == RouterVariant::SCJR) {
            w_joint1_.collect(prefix + ".w_joint1", out);
            w_joint2_.collect(prefix + ".w_joint2", out);
        }
    }

private:
    RouterVariant variant_ = RouterVariant::StaticSum;
    int n_ = 0, p_ = 1;
    Linear<T> w_cha1_, w_cha2_, w_spa1_, w_spa2_, w_joint1_, w_joint2_;
};

// Y_hat[b] = sum_k w[b,k] * Y_k[b]
template <class T>
TensorT<T> route_combine(const PathWeights<T>& w, const std::vector<TensorT<T>>& outputs) {
    const int B = w.weights.dim(0), p = w.weights.dim(1);
    if (static_cast<int>(outputs.size()) != p) {
        throw ShapeError("route_combine got " + std::to_string(outputs.size()) +
                         " cell outputs for " + std::to_string(p) + " path weights");
    }
    TensorT<T> acc;
    for (int k = 0; k < p; ++k) {
        Shape wshape(static_cast<std::size_t>(outputs[static_cast<std::size_t>(k)].rank()), 1);
        wshape[0] = B;
        auto wk = reshape(slice(w.weights, 1, k, 1), wshape);
        auto term = mul(wk, outputs[static_cast<std::size_t>(k)]);
        acc = k == 0 ? term : add(acc, term);
    }
    return acc;
}

// Cells whose weight clears the threshold, per sample.
template <class T>
std::vector<std::vector<int>> discretize_paths(const TensorT<T>& weights, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ConfigError("discretization threshold must lie in (0,1)");
    }
    const int B = weights.dim(0), p = weights.dim(1);
    std::vector<std::vector<int>> active(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
        for (int k = 0; k < p; ++k) {
            if (static_cast<double>(weights.data()[static_cast<std::size_t>(b) * p + k]) >=
                threshold) {
                active[static_cast<std::size_t>(b)].push_back(k);
            }
        }
    }
    return active;
}

}  // namespace dyncap
