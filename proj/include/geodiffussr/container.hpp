#pragma once

// Flat tensor container: fixed magic, a JSON manifest (tensor names, shapes,
// dtype, offsets, checksums, plus caller metadata), then raw little-endian
// data. Used for frozen encoder weights and training checkpoints.

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "geodiffussr/tensor.hpp"

namespace gdr {

using json = nlohmann::json;

namespace detail {

template <typename S>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
    return "f32";
}
template <>
inline const char* dtype_name<double>() {
    return "f64";
}

inline constexpr char kContainerMagic[4] = {'G', 'D', 'R', 'C'};

}  // namespace detail

template <typename S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

template <typename S>
void save_container(const std::filesystem::path& path, const NamedTensors<S>& tensors,
                    const json& meta = json::object()) {
    json manifest;
    manifest["container_version"] = 1;
    manifest["dtype"] = detail::dtype_name<S>();
    manifest["meta"] = meta;
    json list = json::array();
    int64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["offset"] = offset;
        e["checksum"] = tensor_checksum(t);
        list.push_back(e);
        offset += t.size() * int64_t(sizeof(S));
    }
    manifest["tensors"] = list;

    std::string header = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "cannot open for write: " + path.string());
    out.write(detail::kContainerMagic, 4);
    uint64_t hlen = header.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header.data(), std::streamsize(header.size()));
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t.data()),
                  std::streamsize(size_t(t.size()) * sizeof(S)));
    check(out.good(), "write failed: " + path.string());
}

template <typename S>
NamedTensors<S> load_container(const std::filesystem::path& path, json* meta_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "missing file: " + path.string());
    char magic[4];
    in.read(magic, 4);
    check(in.good() && std::memcmp(magic, detail::kContainerMagic, 4) == 0,
          "not a tensor container: " + path.string());
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    check(in.good(), "truncated header: " + path.string());
    std::string header(hlen, '\0');
    in.read(header.data(), std::streamsize(hlen));
    check(in.good(), "truncated header: " + path.string());
    json manifest = json::parse(header);
    check(manifest.value("dtype", "") == detail::dtype_name<S>(),
          "dtype mismatch in " + path.string() + ": expected " +
              std::string(detail::dtype_name<S>()) + ", file has " +
              manifest.value("dtype", "?"));
    if (meta_out) *meta_out = manifest.value("meta", json::object());

    NamedTensors<S> out;
    for (const auto& e : manifest.at("tensors")) {
        std::string name = e.at("name");
        Shape shape = e.at("shape").get<Shape>();
        Tensor<S> t(shape);
        in.read(reinterpret_cast<char*>(t.data()), std::streamsize(size_t(t.size()) * sizeof(S)));
        check(in.good(), "truncated tensor data at layer '" + name + "' in " + path.string());
        uint64_t want = e.at("checksum");
        check(tensor_checksum(t) == want,
              "checksum mismatch at layer '" + name + "' in " + path.string());
        out.push_back({std::move(name), std::move(t)});
    }
    return out;
}

}  // namespace gdr
