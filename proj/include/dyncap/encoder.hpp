#pragma once

// Stacked dynamic encoder layers. Each layer owns one or two routed blocks
// (cell group + router); a residual connection wraps every block. Grouping,
// block arrangement, router variant, and soft/hard routing are all
// config-selectable so the ablation axes can be reproduced.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dyncap/cells.hpp"
#include "dyncap/errors.hpp"
#include "dyncap/router.hpp"

namespace dyncap {

enum class Arrangement { SThenC, CThenS, Parallel };

inline const char* arrangement_name(Arrangement a) {
    switch (a) {
        case Arrangement::SThenC: return "s_then_c";
        case Arrangement::CThenS: return "c_then_s";
        case Arrangement::Parallel: return "parallel";
    }
    return "?";
}

inline Arrangement parse_arrangement(const std::string& s) {
    if (s == "s_then_c") return Arrangement::SThenC;
    if (s == "c_then_s") return Arrangement::CThenS;
    if (s == "parallel") return Arrangement::Parallel;
    throw ConfigError("unknown arrangement '" + s + "'");
}

struct EncoderConfig {
    int layers = 2;
    int d_model = 64;
    int heads = 4;
    int grid_h = 7;
    int grid_w = 7;
    std::vector<CellKind> spatial_cells = {CellKind::GMC, CellKind::LMC, CellKind::AMC};
    std::vector<CellKind> channel_cells = {CellKind::CPC, CellKind::CAC};
    Arrangement arrangement = Arrangement::SThenC;
    bool grouped = true;
    // Optional explicit two-set partition; overrides the spatial/channel
    // grouping when non-empty.
    std::vector<std::vector<CellKind>> custom_groups;
    RouterVariant router_variant = RouterVariant::SCJR;
    RoutingType routing_type = RoutingType::Soft;
    double temperature = 1.0;
    int r1 = 16;
    int r2 = 7;

    void validate() const {
        if (layers < 0) throw ConfigError("encoder layers must be >= 0");
        if (d_model < 1 || grid_h < 1 || grid_w < 1) throw ConfigError("bad encoder dims");
        if (heads < 1 || d_model % heads != 0) {
            throw ConfigError("heads must divide d_model (" + std::to_string(heads) + " vs " +
                              std::to_string(d_model) + ")");
        }
        if (!(temperature > 0)) throw ConfigError("temperature must be positive");
        std::set<CellKind> seen;
        for (const auto& group : {spatial_cells, channel_cells}) {
            for (CellKind k : group) {
                if (!seen.insert(k).second) {
                    throw ConfigError(std::string("cell ") + cell_name(k) + " selected twice");
                }
            }
        }
        if (spatial_cells.empty() && channel_cells.empty()) {
            throw ConfigError("encoder needs at least one cell");
        }
        if (!custom_groups.empty()) {
            if (custom_groups.size() != 2) throw ConfigError("custom_groups needs exactly 2 groups");
            std::set<CellKind> in_groups;
            for (const auto& g : custom_groups) {
                if (g.empty()) throw ConfigError("custom group may not be empty");
                for (CellKind k : g) {
                    if (!in_groups.insert(k).second) {
                        throw ConfigError(std::string("cell ") + cell_name(k) +
                                          " appears twice in custom_groups");
                    }
                }
            }
            if (in_groups != seen) {
                throw ConfigError("custom_groups must partition the selected cells");
            }
        }
    }
};

// One applied path-weight row set, recorded for later inspection.
struct TraceEntry {
    int layer = 0;
    std::string block;
    int paths = 0;
    std::vector<double> weights;  // [B, paths] row-major
};

using EncoderTrace = std::vector<TraceEntry>;

// Per-layer, per-block forced one-hot selections (cell index); used by the
// diverse-path sampler and the sub-model equivalence checks.
using ForcedPaths = std::vector<std::vector<int>>;

template <class T>
class EncoderLayer {
public:
    EncoderLayer() = default;

    EncoderLayer(const EncoderConfig& cfg, RngState& rng) : cfg_(cfg) {
        std::vector<std::pair<std::string, std::vector<CellKind>>> groups;
        if (!cfg.grouped) {
            auto all = cfg.spatial_cells;
            all.insert(all.end(), cfg.channel_cells.begin(), cfg.channel_cells.end());
            groups.emplace_back("joint", std::move(all));
        } else if (!cfg.custom_groups.empty()) {
            groups.emplace_back("group1", cfg.custom_groups[0]);
            groups.emplace_back("group2", cfg.custom_groups[1]);
        } else {
            if (!cfg.spatial_cells.empty()) groups.emplace_back("spatial", cfg.spatial_cells);
            if (!cfg.channel_cells.empty()) groups.emplace_back("channel", cfg.channel_cells);
        }
        const int n = cfg.grid_h * cfg.grid_w;
        for (auto& [label, kinds] : groups) {
            if (kinds.empty()) continue;
            Block blk;
            blk.label = label;
            for (CellKind k : kinds) {
                blk.cells.push_back(
                    Cell<T>::make(k, cfg.d_model, cfg.grid_h, cfg.grid_w, cfg.heads, rng));
            }
            blk.router = Router<T>(cfg.router_variant, cfg.d_model, n,
                                   static_cast<int>(kinds.size()), cfg.r1, cfg.r2, rng);
            blocks_.push_back(std::move(blk));
        }
    }

    int block_count() const { return static_cast<int>(blocks_.size()); }
    const std::string& block_label(int i) const { return blocks_[static_cast<std::size_t>(i)].label; }
    int block_paths(int i) const { return blocks_[static_cast<std::size_t>(i)].router.paths(); }
    std::vector<Cell<T>>& block_cells(int i) { return blocks_[static_cast<std::size_t>(i)].cells; }
    Router<T>& block_router(int i) { return blocks_[static_cast<std::size_t>(i)].router; }

    TensorT<T> forward(const TensorT<T>& x, Mode mode, RngState* rng, int layer_idx,
                       EncoderTrace* trace, const std::vector<int>* forced) {
        if (x.dim(1) != cfg_.grid_h || x.dim(2) != cfg_.grid_w || x.dim(3) != cfg_.d_model) {
            throw ShapeError("encoder layer built for grid " + std::to_string(cfg_.grid_h) + "x" +
                             std::to_string(cfg_.grid_w) + "x" + std::to_string(cfg_.d_model) +
                             ", got " + shape_str(x.shape()));
        }
        if (cfg_.arrangement == Arrangement::Parallel) {
            auto y = x;
            for (std::size_t i = 0; i < blocks_.size(); ++i) {
                y = add(y, block_forward(static_cast<int>(i), x, mode, rng, layer_idx, trace,
                                         forced));
            }
            return y;
        }
        auto y = x;
        if (cfg_.arrangement == Arrangement::SThenC) {
            for (std::size_t i = 0; i < blocks_.size(); ++i) {
                y = add(y, block_forward(static_cast<int>(i), y, mode, rng, layer_idx, trace,
                                         forced));
            }
        } else {
            for (std::size_t i = blocks_.size(); i-- > 0;) {
                y = add(y, block_forward(static_cast<int>(i), y, mode, rng, layer_idx, trace,
                                         forced));
            }
        }
        return y;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        for (const auto& blk : blocks_) {
            for (const auto& cell : blk.cells) cell.collect(prefix, out);
            blk.router.collect(prefix + ".router_" + blk.label, out);
        }
    }
    void collect_buffers(const std::string& prefix, BufferList<T>& out) {
        for (auto& blk : blocks_) {
            for (auto& cell : blk.cells) cell.collect_buffers(prefix, out);
        }
    }

private:
    struct Block {
        std::string label;
        std::vector<Cell<T>> cells;
        Router<T> router;
    };

    TensorT<T> block_forward(int bi, const TensorT<T>& x, Mode mode, RngState* rng, int layer_idx,
                             EncoderTrace* trace, const std::vector<int>* forced) {
        auto& blk = blocks_[static_cast<std::size_t>(bi)];
        const int B = x.dim(0);
        const int p = static_cast<int>(blk.cells.size());

        PathWeights<T> w;
        if (forced) {
            const int pick = (*forced)[static_cast<std::size_t>(bi)];
            if (pick < 0 || pick >= p) throw ConfigError("forced path index out of range");
            std::vector<T> onehot(static_cast<std::size_t>(B) * p, T(0));
            for (int b = 0; b < B; ++b) onehot[static_cast<std::size_t>(b) * p + pick] = T(1);
            w = PathWeights<T>{TensorT<T>::from_data({B, p}, std::move(onehot)), blk.label};
        } else {
            w = blk.router.forward(x, cfg_.routing_type, static_cast<T>(cfg_.temperature), mode,
                                   rng, blk.label);
        }
        if (trace) {
            TraceEntry e;
            e.layer = layer_idx;
            e.block = blk.label;
            e.paths = p;
            e.weights.assign(w.weights.data().begin(), w.weights.data().end());
            trace->push_back(std::move(e));
        }
        std::vector<TensorT<T>> outs;
        outs.reserve(blk.cells.size());
        for (auto& cell : blk.cells) outs.push_back(cell.forward(x, mode));
        return route_combine(w, outs);
    }

    EncoderConfig cfg_;
    std::vector<Block> blocks_;
};

template <class T>
class Encoder {
public:
    Encoder() = default;

    explicit Encoder(const EncoderConfig& cfg, RngState& rng) : cfg_(cfg) {
        cfg.validate();
        for (int l = 0; l < cfg.layers; ++l) layers_.emplace_back(cfg, rng);
    }

    const EncoderConfig& config() const { return cfg_; }
    int layer_count() const { return static_cast<int>(layers_.size()); }
    EncoderLayer<T>& layer(int i) { return layers_[static_cast<std::size_t>(i)]; }

    TensorT<T> forward(const TensorT<T>& x, Mode mode, RngState* rng = nullptr,
                       EncoderTrace* trace = nullptr, const ForcedPaths* forced = nullptr) {
        if (forced && static_cast<int>(forced->size()) != layer_count()) {
            throw ConfigError("forced paths must cover every encoder layer");
        }
        auto y = x;
        for (int l = 0; l < layer_count(); ++l) {
            y = layers_[static_cast<std::size_t>(l)].forward(
                y, mode, rng, l, trace, forced ? &(*forced)[static_cast<std::size_t>(l)] : nullptr);
        }
        return y;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            layers_[l].collect(prefix + "." + std::to_string(l), out);
        }
    }
    void collect_buffers(const std::string& prefix, BufferList<T>& out) {
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            layers_[l].collect_buffers(prefix + "." + std::to_string(l), out);
        }
    }

private:
    EncoderConfig cfg_;
    std::vector<EncoderLayer<T>> layers_;
};

}  // namespace dyncap
