#include "dyncap/datagen.hpp"

#include <algorithm>
#include <fstream>

#include "dyncap/errors.hpp"
#include "dyncap/serialize.hpp"

namespace dyncap {

void DatasetSpec::validate() const {
    if (h < 3 || w < 3) throw ConfigError("dataset grid must be at least 3x3");
    if (c < 16) throw ConfigError("dataset needs at least 16 channels");
    if (c % kBandWidth != 0) throw ConfigError("dataset channels must be a multiple of 4");
    if (n_per_family < 1) throw ConfigError("dataset needs at least one sample per family");
    if (noise_sigma < 0) throw ConfigError("noise_sigma must be nonnegative");
    if (h > 12 || w > 12) throw ConfigError("dataset grid capped at 12x12 (vocabulary budget)");
}

SampleFamily Dataset::family_of(int i) const {
    const auto& cap = captions[static_cast<std::size_t>(i)];
    return cap.rfind("local", 0) == 0 ? SampleFamily::LocalPattern : SampleFamily::GlobalPattern;
}

Vocabulary task_vocabulary(int h, int w, int c) {
    Vocabulary v;
    v.add("local");
    v.add("global");
    for (int m = 0; m < kMotifCount; ++m) v.add("motif" + std::to_string(m));
    for (int r = 0; r + 1 < h; ++r) v.add("row" + std::to_string(r));
    for (int col = 0; col + 1 < w; ++col) v.add("col" + std::to_string(col));
    for (int g = 0; g < dominant_bands(c); ++g) v.add("chan" + std::to_string(g));
    v.add("odd");
    v.add("even");
    return v;
}

namespace {

// corner signs of a motif: corners (0,0),(0,1),(1,0) carry the three id
// bits, corner (1,1) is a fixed positive anchor
double motif_sign(int motif, int corner) {
    if (corner == 3) return 1.0;
    return (motif >> corner) & 1 ? 1.0 : -1.0;
}

}  // namespace

Dataset gen_dataset(RngState& rng, const DatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.h = spec.h;
    ds.w = spec.w;
    ds.c = spec.c;
    ds.vocab = task_vocabulary(spec.h, spec.w, spec.c);

    const int total = 2 * spec.n_per_family;
    std::vector<SampleFamily> order(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) {
        order[static_cast<std::size_t>(i)] =
            i < spec.n_per_family ? SampleFamily::LocalPattern : SampleFamily::GlobalPattern;
    }
    // Fisher-Yates with the dataset stream keeps generation deterministic
    for (int i = total - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    const std::int64_t per = static_cast<std::int64_t>(spec.h) * spec.w * spec.c;
    for (int i = 0; i < total; ++i) {
        FeatureGrid f;
        f.sample_id = static_cast<std::uint64_t>(i);
        f.values.assign(static_cast<std::size_t>(per), 0.0f);
        auto at = [&](int r, int c, int ch) -> float& {
            return f.values[static_cast<std::size_t>((r * spec.w + c) * spec.c + ch)];
        };
        std::string caption;
        if (order[static_cast<std::size_t>(i)] == SampleFamily::LocalPattern) {
            const int motif = static_cast<int>(rng.next_below(kMotifCount));
            const int row = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.h - 1)));
            const int col = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.w - 1)));
            for (int corner = 0; corner < 4; ++corner) {
                const int r = row + corner / 2, c = col + corner % 2;
                const float v = static_cast<float>(motif_sign(motif, corner) * kMotifAmplitude);
                for (int ch = 0; ch < kBandWidth; ++ch) at(r, c, ch) += v;
            }
            caption = "local motif" + std::to_string(motif) + " row" + std::to_string(row) +
                      " col" + std::to_string(col);
        } else {
            const int band = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(dominant_bands(spec.c))));
            const int spikes = 3 + static_cast<int>(rng.next_below(2));
            for (int r = 0; r < spec.h; ++r)
                for (int c = 0; c < spec.w; ++c)
                    for (int ch = 0; ch < kBandWidth; ++ch)
                        at(r, c, band * kBandWidth + ch) += static_cast<float>(kBandAmplitude);
            // distinct spike positions via partial Fisher-Yates over all cells
            std::vector<int> cells(static_cast<std::size_t>(spec.h) * spec.w);
            for (std::size_t j = 0; j < cells.size(); ++j) cells[j] = static_cast<int>(j);
            for (int s = 0; s < spikes; ++s) {
                const int j = s + static_cast<int>(rng.next_below(cells.size() - static_cast<std::size_t>(s)));
                std::swap(cells[static_cast<std::size_t>(s)], cells[static_cast<std::size_t>(j)]);
                const int cell = cells[static_cast<std::size_t>(s)];
                at(cell / spec.w, cell % spec.w, spec.c - 1) += static_cast<float>(kSpikeAmplitude);
            }
            caption = "global chan" + std::to_string(band) + (spikes % 2 ? " odd" : " even");
        }
        if (spec.noise_sigma > 0) {
            for (auto& v : f.values) {
                v += static_cast<float>(spec.noise_sigma * rng.next_gaussian());
            }
        }
        ds.features.push_back(std::move(f));
        ds.captions.push_back(std::move(caption));
    }
    return ds;
}

void write_features(const std::string& path, const Dataset& ds) {
    std::string out = "DTNF";
    io::put_u32(out, static_cast<std::uint32_t>(ds.features.size()));
    io::put_u32(out, static_cast<std::uint32_t>(ds.h));
    io::put_u32(out, static_cast<std::uint32_t>(ds.w));
    io::put_u32(out, static_cast<std::uint32_t>(ds.c));
    for (const auto& f : ds.features) {
        io::put_u64(out, f.sample_id);
        for (float v : f.values) io::put_f32(out, v);
    }
    io::write_file(path, out);
}

Dataset read_features(const std::string& path) {
    const std::string buf = io::read_file(path);
    io::Reader r(buf, path);
    r.expect_magic("DTNF");
    const std::uint32_t count = r.u32();
    Dataset ds;
    ds.h = static_cast<int>(r.u32());
    ds.w = static_cast<int>(r.u32());
    ds.c = static_cast<int>(r.u32());
    if (ds.h < 1 || ds.w < 1 || ds.c < 1 || ds.h > 4096 || ds.w > 4096 || ds.c > 65536) {
        throw IoError(path + ": implausible grid header at byte offset 8");
    }
    const std::int64_t per = static_cast<std::int64_t>(ds.h) * ds.w * ds.c;
    for (std::uint32_t i = 0; i < count; ++i) {
        FeatureGrid f;
        f.sample_id = r.u64();
        f.values.resize(static_cast<std::size_t>(per));
        for (auto& v : f.values) v = r.f32();
        ds.features.push_back(std::move(f));
    }
    if (r.pos != buf.size()) {
        throw IoError(path + ": trailing bytes at offset " + std::to_string(r.pos));
    }
    return ds;
}

void write_captions(const std::string& path, const Dataset& ds) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    for (std::size_t i = 0; i < ds.captions.size(); ++i) {
        f << ds.features[i].sample_id << '\t' << ds.captions[i] << '\n';
    }
}

void read_captions(const std::string& path, Dataset& ds) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    if (lines.size() != ds.features.size()) {
        throw IoError(path + ": " + std::to_string(lines.size()) + " captions for " +
                      std::to_string(ds.features.size()) + " feature grids");
    }
    ds.captions.clear();
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto tab = lines[i].find('\t');
        if (tab == std::string::npos) throw IoError(path + ": malformed line " + std::to_string(i));
        const std::uint64_t id = std::stoull(lines[i].substr(0, tab));
        if (id != ds.features[i].sample_id) {
            throw IoError(path + ": caption id " + std::to_string(id) +
                          " does not match feature id at row " + std::to_string(i));
        }
        ds.captions.push_back(lines[i].substr(tab + 1));
    }
}

std::vector<std::vector<int>> caption_ids(const Dataset& ds) {
    std::vector<std::vector<int>> out;
    out.reserve(ds.captions.size());
    for (const auto& cap : ds.captions) out.push_back(ds.vocab.encode(cap));
    return out;
}

}  // namespace dyncap
