#pragma once

// Fixture / checkpoint serialization.
//   MPT1: magic "MPT1", u8 rank, little-endian u32 extents, little-endian f32 payload
//   MPL1: magic "MPL1", little-endian u32 H, W, u8 label payload row-major
//   MPA1: archive of named MPT1 blobs with a JSON manifest

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpers/errors.hpp"
#include "mpers/tensor.hpp"

namespace mpers {

namespace detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline uint32_t get_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::vector<uint8_t> write_tensor(const Tensor& t) {
    std::vector<uint8_t> out = {'M', 'P', 'T', '1'};
    if (t.rank() > 255) throw FormatError("tensor rank exceeds MPT1 limit");
    out.push_back(static_cast<uint8_t>(t.rank()));
    for (int e : t.shape()) detail::put_u32(out, static_cast<uint32_t>(e));
    size_t off = out.size();
    out.resize(off + t.data().size() * 4);
    static_assert(sizeof(float) == 4);
    std::memcpy(out.data() + off, t.data().data(), t.data().size() * 4);
    return out;
}

inline Tensor read_tensor(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 5 || std::memcmp(bytes.data(), "MPT1", 4) != 0)
        throw FormatError("bad MPT1 magic");
    const int rank = bytes[4];
    size_t off = 5;
    if (bytes.size() < off + static_cast<size_t>(rank) * 4) throw FormatError("truncated MPT1 header");
    Shape shape(rank);
    for (int i = 0; i < rank; ++i) {
        shape[i] = static_cast<int>(detail::get_u32(bytes.data() + off));
        off += 4;
    }
    const size_t n = static_cast<size_t>(shape_numel(shape));
    if (bytes.size() != off + n * 4) throw FormatError("truncated MPT1 payload");
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data() + off, n * 4);
    return Tensor::from(shape, std::move(data));
}

struct LabelRaster {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> labels;  // row-major
};

inline std::vector<uint8_t> write_raster(const LabelRaster& r) {
    if (static_cast<int>(r.labels.size()) != r.height * r.width)
        throw FormatError("raster payload size mismatch");
    std::vector<uint8_t> out = {'M', 'P', 'L', '1'};
    detail::put_u32(out, static_cast<uint32_t>(r.height));
    detail::put_u32(out, static_cast<uint32_t>(r.width));
    out.insert(out.end(), r.labels.begin(), r.labels.end());
    return out;
}

inline LabelRaster read_raster(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "MPL1", 4) != 0)
        throw FormatError("bad MPL1 magic");
    LabelRaster r;
    r.height = static_cast<int>(detail::get_u32(bytes.data() + 4));
    r.width = static_cast<int>(detail::get_u32(bytes.data() + 8));
    if (bytes.size() != 12 + static_cast<size_t>(r.height) * r.width)
        throw FormatError("truncated MPL1 payload");
    r.labels.assign(bytes.begin() + 12, bytes.end());
    return r;
}

inline void save_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<uint8_t> load_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bytes;
}

// named tensor archive: "MPA1" + u32 manifest length + manifest JSON + blobs
inline std::vector<uint8_t> write_archive(const std::map<std::string, Tensor>& tensors) {
    std::vector<uint8_t> blobs;
    nlohmann::json manifest = nlohmann::json::object();
    for (const auto& [name, t] : tensors) {
        std::vector<uint8_t> b = write_tensor(t);
        manifest[name] = {{"offset", blobs.size()}, {"size", b.size()}};
        blobs.insert(blobs.end(), b.begin(), b.end());
    }
    const std::string mtext = manifest.dump();
    std::vector<uint8_t> out = {'M', 'P', 'A', '1'};
    detail::put_u32(out, static_cast<uint32_t>(mtext.size()));
    out.insert(out.end(), mtext.begin(), mtext.end());
    out.insert(out.end(), blobs.begin(), blobs.end());
    return out;
}

inline std::map<std::string, Tensor> read_archive(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "MPA1", 4) != 0)
        throw FormatError("bad MPA1 magic");
    const uint32_t mlen = detail::get_u32(bytes.data() + 4);
    if (bytes.size() < 8 + mlen) throw FormatError("truncated MPA1 manifest");
    nlohmann::json manifest = nlohmann::json::parse(std::string(bytes.begin() + 8, bytes.begin() + 8 + mlen));
    const size_t base = 8 + mlen;
    std::map<std::string, Tensor> out;
    for (auto& [name, entry] : manifest.items()) {
        const size_t off = entry.at("offset").get<size_t>();
        const size_t size = entry.at("size").get<size_t>();
        if (base + off + size > bytes.size()) throw FormatError("truncated MPA1 blob: " + name);
        std::vector<uint8_t> blob(bytes.begin() + base + off, bytes.begin() + base + off + size);
        out.emplace(name, read_tensor(blob));
    }
    return out;
}

// atomic write: temp file in place, then rename
inline void save_bytes_atomic(const std::string& path, const std::vector<uint8_t>& bytes) {
    const std::string tmp = path + ".tmp";
    save_bytes(tmp, bytes);
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("rename failed: " + path);
}

}  // namespace mpers
