#pragma once

// Encoder + decoder captioner with named-parameter enumeration and
// checkpoint save/load.

#include <string>
#include <vector>

#include "dyncap/decoder.hpp"
#include "dyncap/encoder.hpp"
#include "dyncap/serialize.hpp"

namespace dyncap {

struct ModelConfig {
    EncoderConfig encoder;
    int dec_layers = 2;
    int vocab = 0;
    int max_len = 10;

    DecoderConfig decoder_config() const {
        DecoderConfig d;
        d.layers = dec_layers;
        d.d_model = encoder.d_model;
        d.heads = encoder.heads;
        d.vocab = vocab;
        d.max_len = max_len;
        d.n_memory = encoder.grid_h * encoder.grid_w;
        return d;
    }
};

template <class T>
class Captioner {
public:
    Captioner() = default;

    Captioner(const ModelConfig& cfg, RngState& rng)
        : cfg_(cfg), encoder_(cfg.encoder, rng), decoder_(cfg.decoder_config(), rng) {}

    const ModelConfig& config() const { return cfg_; }
    Encoder<T>& encoder() { return encoder_; }
    CaptionDecoder<T>& decoder() { return decoder_; }

    // [B,H,W,C] -> flattened memory [B,N,C]
    TensorT<T> encode(const TensorT<T>& v, Mode mode, RngState* rng = nullptr,
                      EncoderTrace* trace = nullptr, const ForcedPaths* forced = nullptr) {
        auto y = encoder_.forward(v, mode, rng, trace, forced);
        return reshape(y, {v.dim(0), v.dim(1) * v.dim(2), v.dim(3)});
    }

    ParamList<T> parameters() const {
        ParamList<T> ps;
        encoder_.collect("enc", ps);
        decoder_.collect("dec", ps);
        return ps;
    }

    BufferList<T> buffers() {
        BufferList<T> bs;
        encoder_.collect_buffers("enc", bs);
        return bs;
    }

    void save(const std::string& path) {
        std::vector<std::pair<std::string, std::pair<Shape, const std::vector<T>*>>> entries;
        auto ps = parameters();
        for (const auto& p : ps) entries.push_back({p.name, {p.tensor.shape(), &p.tensor.data()}});
        for (const auto& b : buffers()) {
            entries.push_back({b.name, {Shape{static_cast<int>(b.data->size())}, b.data}});
        }
        save_checkpoint(path, entries);
    }

    void load(const std::string& path) {
        const auto ckpt = load_checkpoint(path);
        auto ps = parameters();
        for (auto& p : ps) {
            auto it = ckpt.find(p.name);
            if (it == ckpt.end()) throw IoError(path + ": missing parameter " + p.name);
            if (it->second.shape != p.tensor.shape()) {
                throw IoError(path + ": shape mismatch for " + p.name + ": file " +
                              shape_str(it->second.shape) + " vs model " +
                              shape_str(p.tensor.shape()));
            }
            auto& dst = const_cast<TensorT<T>&>(p.tensor).mutable_data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.data[i]);
        }
        for (auto& b : buffers()) {
            auto it = ckpt.find(b.name);
            if (it == ckpt.end()) throw IoError(path + ": missing buffer " + b.name);
            if (it->second.data.size() != b.data->size()) {
                throw IoError(path + ": size mismatch for buffer " + b.name);
            }
            for (std::size_t i = 0; i < b.data->size(); ++i) {
                (*b.data)[i] = static_cast<T>(it->second.data[i]);
            }
        }
    }

private:
    ModelConfig cfg_;
    Encoder<T> encoder_;
    CaptionDecoder<T> decoder_;
};

}  // namespace dyncap
