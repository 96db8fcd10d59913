#pragma once

// Synthetic grid-captioning task. Two sample families with deterministic
// captions:
//
//   LOCAL_PATTERN  — a 2x2 motif planted at (row, col). The motif id (0..7)
//                    is encoded as a sign pattern (+-3.0) over the 2x2 block
//                    in the first channel band; the caption names the motif
//                    and its position: "local motif<m> row<r> col<c>".
//   GLOBAL_PATTERN — one dominant channel band (+1.5 on every grid position)
//                    plus k in {3,4} spike positions (+6.0) on the last
//                    channel; the caption names the band and the count
//                    parity: "global chan<g> odd|even".
//
// Channel bands are groups of 4 consecutive channels; bands 0..6 are usable
// as dominant bands, the last channel is the spike counter. Additive
// Gaussian noise with configurable sigma is applied everywhere.
//
// Feature file ("DTNF"): magic, u32 count, u32 H, u32 W, u32 C, then per
// sample u64 id + row-major 32-bit little-endian floats. Captions: UTF-8
// lines "id<TAB>caption". Vocab: one token per line, line number = id.

#include <cstdint>
#include <string>
#include <vector>

#include "dyncap/rng.hpp"
#include "dyncap/tensor.hpp"
#include "dyncap/vocab.hpp"

namespace dyncap {

enum class SampleFamily { LocalPattern, GlobalPattern };

inline constexpr double kMotifAmplitude = 3.0;
inline constexpr double kBandAmplitude = 1.5;
inline constexpr double kSpikeAmplitude = 6.0;
inline constexpr int kMotifCount = 8;
inline constexpr int kBandWidth = 4;

// Bands usable as the dominant one; the last band is reserved because its
// final channel carries the spike counter.
inline constexpr int dominant_bands(int channels) { return channels / kBandWidth - 1; }

struct FeatureGrid {
    std::uint64_t sample_id = 0;
    std::vector<float> values;  // [H,W,C] row-major
};

struct DatasetSpec {
    int h = 7;
    int w = 7;
    int c = 32;
    int n_per_family = 1000;
    double noise_sigma = 0.1;

    void validate() const;
};

struct Dataset {
    int h = 0, w = 0, c = 0;
    std::vector<FeatureGrid> features;
    std::vector<std::string> captions;  // aligned with features
    Vocabulary vocab;

    int size() const { return static_cast<int>(features.size()); }
    SampleFamily family_of(int i) const;
};

// Task vocabulary for a given grid shape (reserved ids + caption words).
Vocabulary task_vocabulary(int h, int w, int c);

Dataset gen_dataset(RngState& rng, const DatasetSpec& spec);

void write_features(const std::string& path, const Dataset& ds);
// Reads features only; captions/vocab load separately.
Dataset read_features(const std::string& path);

void write_captions(const std::string& path, const Dataset& ds);
void read_captions(const std::string& path, Dataset& ds);

// Token-id reference sequences (single reference per sample).
std::vector<std::vector<int>> caption_ids(const Dataset& ds);

template <class T>
TensorT<T> batch_features(const Dataset& ds, const std::vector<int>& indices) {
    const int B = static_cast<int>(indices.size());
    std::vector<T> data(static_cast<std::size_t>(B) * ds.h * ds.w * ds.c);
    const std::int64_t per = static_cast<std::int64_t>(ds.h) * ds.w * ds.c;
    for (int b = 0; b < B; ++b) {
        const auto& f = ds.features[static_cast<std::size_t>(indices[static_cast<std::size_t>(b)])];
        for (std::int64_t i = 0; i < per; ++i) {
            data[static_cast<std::size_t>(b * per + i)] = static_cast<T>(f.values[static_cast<std::size_t>(i)]);
        }
    }
    return TensorT<T>::from_data({B, ds.h, ds.w, ds.c}, std::move(data));
}

}  // namespace dyncap
