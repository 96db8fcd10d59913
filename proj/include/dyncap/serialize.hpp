#pragma once

// Binary tensor format and the checkpoint container.
//
// Tensor blob ("DTNT"): magic, u32 rank, u32 dims[rank], then row-major
// 32-bit little-endian IEEE floats.
//
// Checkpoint container ("DTNC"): magic, u32 version, u32 manifest byte
// length, the manifest text ("name<TAB>offset<TAB>bytes\n" per entry,
// offsets relative to the end of the manifest), then the DTNT blobs.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dyncap/errors.hpp"
#include "dyncap/tensor.hpp"

namespace dyncap {

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

// Cursor over an in-memory byte string; read errors carry the offset.
struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    std::string what;

    Reader(const std::string& b, std::string name) : buf(b), what(std::move(name)) {}

    void need(std::size_t n) const {
        if (pos + n > buf.size()) {
            throw IoError(what + ": truncated at byte offset " + std::to_string(pos));
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    void expect_magic(const char* magic) {
        need(4);
        if (std::memcmp(buf.data() + pos, magic, 4) != 0) {
            throw IoError(what + ": bad magic at byte offset " + std::to_string(pos) +
                          " (expected " + magic + ")");
        }
        pos += 4;
    }
};

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::string& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw IoError("short write to " + path);
}

}  // namespace io

template <class T>
void append_tensor_blob(std::string& out, const Shape& shape, const std::vector<T>& data) {
    out += "DTNT";
    io::put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) io::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : data) io::put_f32(out, static_cast<float>(v));
}

template <class T>
std::pair<Shape, std::vector<T>> read_tensor_blob(io::Reader& r) {
    r.expect_magic("DTNT");
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw IoError(r.what + ": implausible rank " + std::to_string(rank) +
                                " at byte offset " + std::to_string(r.pos - 4));
    Shape shape(rank);
    std::int64_t n = 1;
    for (auto& d : shape) {
        d = static_cast<int>(r.u32());
        n *= d;
    }
    std::vector<T> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = static_cast<T>(r.f32());
    return {shape, std::move(data)};
}

struct CheckpointEntry {
    Shape shape;
    std::vector<float> data;
};

using CheckpointMap = std::map<std::string, CheckpointEntry>;

template <class T>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, std::pair<Shape, const std::vector<T>*>>>& entries) {
    std::string blobs;
    std::string manifest;
    for (const auto& [name, sh_data] : entries) {
        const std::size_t off = blobs.size();
        append_tensor_blob(blobs, sh_data.first, *sh_data.second);
        manifest += name + "\t" + std::to_string(off) + "\t" +
                    std::to_string(blobs.size() - off) + "\n";
    }
    std::string out = "DTNC";
    io::put_u32(out, 1);
    io::put_u32(out, static_cast<std::uint32_t>(manifest.size()));
    out += manifest;
    out += blobs;
    io::write_file(path, out);
}

inline CheckpointMap load_checkpoint(const std::string& path) {
    const std::string buf = io::read_file(path);
    io::Reader r(buf, path);
    r.expect_magic("DTNC");
    const std::uint32_t version = r.u32();
    if (version != 1) throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t mlen = r.u32();
    r.need(mlen);
    const std::string manifest = buf.substr(r.pos, mlen);
    const std::size_t blob_base = r.pos + mlen;

    CheckpointMap out;
    std::size_t line_start = 0;
    while (line_start < manifest.size()) {
        const std::size_t eol = manifest.find('\n', line_start);
        if (eol == std::string::npos) throw IoError(path + ": manifest missing newline");
        const std::string line = manifest.substr(line_start, eol - line_start);
        line_start = eol + 1;
        const std::size_t t1 = line.find('\t');
        const std::size_t t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos) {
            throw IoError(path + ": malformed manifest line '" + line + "'");
        }
        const std::string name = line.substr(0, t1);
        const std::size_t off = std::stoull(line.substr(t1 + 1, t2 - t1 - 1));
        io::Reader br(buf, path + ":" + name);
        br.pos = blob_base + off;
        auto [shape, data] = read_tensor_blob<float>(br);
        out[name] = CheckpointEntry{std::move(shape), std::move(data)};
    }
    return out;
}

}  // namespace dyncap
