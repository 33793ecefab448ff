#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sokd/nn.hpp"

namespace sokd {

// Checkpoint file layout, all integers little-endian:
//
//   sokd-checkpoint v1\n
//   layer <name> <canonical-spec>\n          (one per layer, in order)
//   meta <key> <value>\n                     (free-form metadata)
//   tensor <name> <ndim> <d0> ... <offset> <bytes>\n
//   end\n
//   <blob section: per tensor, u64 element count then raw float32 values>
//
// Offsets are relative to the start of the blob section and point at the
// length prefix. Parameters round-trip bit-exactly.

struct Checkpoint {
    SequentialModel model;
    std::map<std::string, std::string> meta;
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32_le(std::string& out, float f) {
    std::uint32_t v = 0;
    std::memcpy(&v, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline float get_f32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    float f = 0.0f;
    std::memcpy(&f, &v, 4);
    return f;
}

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && line[i] == ' ') ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace detail

inline void save_checkpoint(const SequentialModel& model, const std::string& path,
                            const std::map<std::string, std::string>& meta = {}) {
    std::string manifest = "sokd-checkpoint v1\n";
    for (const auto& l : model.layers)
        manifest += "layer " + l.spec.name + " " + l.spec.to_string() + "\n";
    for (const auto& [k, v] : meta) manifest += "meta " + k + " " + v + "\n";

    std::string blobs;
    for (const auto& l : model.layers) {
        if (!l.spec.has_params()) continue;
        for (const auto& [suffix, t] : {std::pair<const char*, const Tensor*>{"weight", &l.weight},
                                        {"bias", &l.bias}}) {
            manifest += "tensor " + l.spec.name + "." + suffix + " " +
                        std::to_string(t->rank());
            for (auto d : t->shape()) manifest += " " + std::to_string(d);
            manifest += " " + std::to_string(blobs.size()) + " " +
                        std::to_string(8 + 4 * t->numel()) + "\n";
            detail::put_u64_le(blobs, static_cast<std::uint64_t>(t->numel()));
            for (float v : t->data()) detail::put_f32_le(blobs, v);
        }
    }
    manifest += "end\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open '" + path + "' for writing");
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    out.write(blobs.data(), static_cast<std::streamsize>(blobs.size()));
    if (!out) throw IoError("save_checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open '" + path + "'");
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("load_checkpoint: read failed for '" + path + "'");

    std::size_t pos = 0;
    auto next_line = [&content, &pos]() {
        const std::size_t q = content.find('\n', pos);
        if (q == std::string::npos) throw ManifestMismatch("load_checkpoint: truncated manifest");
        std::string line = content.substr(pos, q - pos);
        pos = q + 1;
        return line;
    };

    if (next_line() != "sokd-checkpoint v1")
        throw ManifestMismatch("load_checkpoint: '" + path + "' is not a sokd checkpoint");

    std::vector<LayerSpec> specs;
    Checkpoint ckpt;
    struct TensorEntry {
        std::string name;
        Shape shape;
        std::uint64_t offset = 0, bytes = 0;
    };
    std::vector<TensorEntry> entries;
    while (true) {
        const std::string line = next_line();
        if (line == "end") break;
        const auto f = detail::split_ws(line);
        if (f.empty()) continue;
        if (f[0] == "layer" && f.size() == 3) {
            LayerSpec s = parse_arch(f[2]).front();
            s.name = f[1];
            specs.push_back(std::move(s));
        } else if (f[0] == "meta" && f.size() >= 3) {
            std::string value = f[2];
            for (std::size_t i = 3; i < f.size(); ++i) value += " " + f[i];
            ckpt.meta[f[1]] = value;
        } else if (f[0] == "tensor" && f.size() >= 5) {
            TensorEntry e;
            e.name = f[1];
            const std::size_t ndim = std::stoul(f[2]);
            if (f.size() != 3 + ndim + 2)
                throw ManifestMismatch("load_checkpoint: malformed tensor line '" + line + "'");
            for (std::size_t i = 0; i < ndim; ++i) e.shape.push_back(std::stoll(f[3 + i]));
            e.offset = std::stoull(f[3 + ndim]);
            e.bytes = std::stoull(f[4 + ndim]);
            entries.push_back(std::move(e));
        } else {
            throw ManifestMismatch("load_checkpoint: unrecognized manifest line '" + line + "'");
        }
    }

    // rebuild the architecture, then overwrite parameters from the blobs
    SequentialModel model;
    for (auto& s : specs) {
        Layer l;
        l.spec = s;
        if (s.has_params()) {
            if (s.kind == LayerKind::dense) {
                l.weight = Tensor::zeros({s.in, s.out}, true);
                l.bias = Tensor::zeros({s.out}, true);
            } else {
                l.weight = Tensor::zeros({s.out, s.in, s.kernel, s.kernel}, true);
                l.bias = Tensor::zeros({s.out}, true);
            }
        }
        model.layers.push_back(std::move(l));
    }

    const std::size_t blob_base = pos;
    std::map<std::string, const TensorEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;

    std::size_t expected = 0;
    for (auto& l : model.layers) {
        if (!l.spec.has_params()) continue;
        for (const auto& [suffix, t] : {std::pair<const char*, Tensor*>{"weight", &l.weight},
                                        {"bias", &l.bias}}) {
            ++expected;
            const std::string name = l.spec.name + "." + suffix;
            auto it = by_name.find(name);
            if (it == by_name.end())
                throw ManifestMismatch("load_checkpoint: missing tensor '" + name + "'");
            const TensorEntry& e = *it->second;
            if (e.shape != t->shape())
                throw ManifestMismatch("load_checkpoint: tensor '" + name + "' has shape " +
                                       detail::shape_str(e.shape) + ", architecture expects " +
                                       detail::shape_str(t->shape()));
            const std::size_t start = blob_base + e.offset;
            if (start + e.bytes > content.size())
                throw ManifestMismatch("load_checkpoint: blob for '" + name + "' out of bounds");
            const auto* p = reinterpret_cast<const unsigned char*>(content.data() + start);
            const std::uint64_t count = detail::get_u64_le(p);
            if (count != static_cast<std::uint64_t>(t->numel()) || e.bytes != 8 + 4 * count)
                throw ManifestMismatch("load_checkpoint: blob for '" + name +
                                       "' disagrees with manifest");
            auto dst = t->mutable_data();
            for (std::uint64_t i = 0; i < count; ++i)
                dst[static_cast<std::size_t>(i)] = detail::get_f32_le(p + 8 + 4 * i);
        }
    }
    if (entries.size() != expected)
        throw ManifestMismatch("load_checkpoint: manifest lists " + std::to_string(entries.size()) +
                               " tensors, architecture has " + std::to_string(expected));
    if (model.block_count() > 1) model.split_index = static_cast<int>(model.block_count()) - 1;
    ckpt.model = std::move(model);
    return ckpt;
}

}  // namespace sokd
