#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdtk/common.hpp"
#include "bdtk/tensor.hpp"

#include "json.hpp"

namespace bdtk {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Binary blob layout: header of 4 little-endian uint32 dims (leading dims
// padded with 1 for lower-rank tensors), then the row-major payload.
// Tensor payloads are float32; label and flag payloads reuse the same header
// with uint32/uint8 elements.

namespace detail {

inline void write_bytes(std::ofstream& f, const void* p, std::size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::ifstream& f, void* p, std::size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!f) throw std::runtime_error("blob read: truncated file");
}

inline std::array<std::uint32_t, 4> pad_dims(const std::vector<std::size_t>& shape) {
    if (shape.empty() || shape.size() > 4) {
        throw std::invalid_argument("blob write: rank must be 1..4, got " +
                                    std::to_string(shape.size()));
    }
    std::array<std::uint32_t, 4> dims = {1, 1, 1, 1};
    const std::size_t off = 4 - shape.size();
    for (std::size_t i = 0; i < shape.size(); ++i) {
        dims[off + i] = static_cast<std::uint32_t>(shape[i]);
    }
    return dims;
}

inline std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    return f;
}

inline std::ifstream open_in(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path.string());
    return f;
}

}  // namespace detail

inline void write_f32_blob(const fs::path& path, const Tensor& t) {
    auto dims = detail::pad_dims(t.shape());
    auto f = detail::open_out(path);
    detail::write_bytes(f, dims.data(), sizeof(dims));
    std::vector<float> buf(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) buf[i] = static_cast<float>(t[i]);
    detail::write_bytes(f, buf.data(), buf.size() * sizeof(float));
}

inline Tensor read_f32_blob(const fs::path& path) {
    auto f = detail::open_in(path);
    std::array<std::uint32_t, 4> dims{};
    detail::read_bytes(f, dims.data(), sizeof(dims));
    std::vector<std::size_t> shape;
    bool leading = true;
    for (std::uint32_t d : dims) {
        if (leading && d == 1) continue;
        leading = false;
        shape.push_back(d);
    }
    if (shape.empty()) shape.push_back(1);
    Tensor t(shape);
    std::vector<float> buf(t.numel());
    detail::read_bytes(f, buf.data(), buf.size() * sizeof(float));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(buf[i]);
    return t;
}

// Reads a blob whose logical shape the caller already knows (the 4-dim header
// cannot distinguish leading size-1 axes from padding).
inline Tensor read_f32_blob_shaped(const fs::path& path,
                                   const std::vector<std::size_t>& shape) {
    Tensor flat = read_f32_blob(path);
    if (flat.numel() != Tensor::count(shape)) {
        throw std::runtime_error("blob " + path.string() + ": element count " +
                                 std::to_string(flat.numel()) + " does not match expected shape " +
                                 shape_str(shape));
    }
    Tensor t(shape);
    t.raw() = std::move(flat.raw());
    return t;
}

inline void write_u32_blob(const fs::path& path, const std::vector<std::uint32_t>& v) {
    std::array<std::uint32_t, 4> dims = {static_cast<std::uint32_t>(v.size()), 1, 1, 1};
    auto f = detail::open_out(path);
    detail::write_bytes(f, dims.data(), sizeof(dims));
    detail::write_bytes(f, v.data(), v.size() * sizeof(std::uint32_t));
}

inline std::vector<std::uint32_t> read_u32_blob(const fs::path& path) {
    auto f = detail::open_in(path);
    std::array<std::uint32_t, 4> dims{};
    detail::read_bytes(f, dims.data(), sizeof(dims));
    std::vector<std::uint32_t> v(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2] * dims[3]);
    detail::read_bytes(f, v.data(), v.size() * sizeof(std::uint32_t));
    return v;
}

inline void write_u8_blob(const fs::path& path, const std::vector<std::uint8_t>& v) {
    std::array<std::uint32_t, 4> dims = {static_cast<std::uint32_t>(v.size()), 1, 1, 1};
    auto f = detail::open_out(path);
    detail::write_bytes(f, dims.data(), sizeof(dims));
    detail::write_bytes(f, v.data(), v.size());
}

inline std::vector<std::uint8_t> read_u8_blob(const fs::path& path) {
    auto f = detail::open_in(path);
    std::array<std::uint32_t, 4> dims{};
    detail::read_bytes(f, dims.data(), sizeof(dims));
    std::vector<std::uint8_t> v(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2] * dims[3]);
    detail::read_bytes(f, v.data(), v.size());
    return v;
}

inline void write_json_file(const fs::path& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << j.dump(2) << "\n";
}

inline json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open for read: " + path.string());
    json j;
    f >> j;
    return j;
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << text;
}

// Cheap directory fingerprint: name, size, and a sample of the head bytes of
// every regular file. Good enough to key stage caches; not a content hash.
inline std::uint64_t quick_dir_fingerprint(const fs::path& dir) {
    std::uint64_t h = fnv1a(dir.filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        h = fnv1a(fs::relative(p, dir).string(), h);
        const auto size = static_cast<std::uint64_t>(fs::file_size(p));
        h = fnv1a(&size, sizeof(size), h);
        std::ifstream f(p, std::ios::binary);
        char buf[4096];
        f.read(buf, sizeof(buf));
        h = fnv1a(buf, static_cast<std::size_t>(f.gcount()), h);
    }
    return h;
}

}  // namespace bdtk
