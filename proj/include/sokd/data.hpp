#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "sokd/rng.hpp"
#include "sokd/tensor.hpp"

namespace sokd {

enum class Split { train, test };

struct Dataset {
    Tensor inputs;                         // [n, ...]
    std::vector<int> labels;               // class indices, length n
    int class_count = 0;
    Split split = Split::train;
    std::vector<std::string> label_names;  // CSV label mapping, first-seen order
    std::string source;                    // provenance for the manifest

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

struct BatchPlan {
    std::int64_t batch_size = 64;
    std::uint64_t seed = 1;
    bool drop_last = false;
};

struct Batch {
    Tensor inputs;
    std::vector<int> labels;
};

// ---------------------------------------------------------------------------
// IDX loader (big-endian magic 0x00000803 for images, 0x00000801 for labels)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_u32_be(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("load_idx: '" + path + "' truncated");
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace detail

// Loads an IDX image/label pair; pixels are scaled to [0,1] and shaped
// [n,1,h,w].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw IoError("load_idx: cannot open '" + images_path + "'");
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError("load_idx: cannot open '" + labels_path + "'");

    if (detail::read_u32_be(img, images_path) != 0x00000803u)
        throw FormatError("load_idx: '" + images_path + "' has a bad image magic number");
    if (detail::read_u32_be(lab, labels_path) != 0x00000801u)
        throw FormatError("load_idx: '" + labels_path + "' has a bad label magic number");

    const std::uint32_t n_img = detail::read_u32_be(img, images_path);
    const std::uint32_t h = detail::read_u32_be(img, images_path);
    const std::uint32_t w = detail::read_u32_be(img, images_path);
    const std::uint32_t n_lab = detail::read_u32_be(lab, labels_path);
    if (n_img != n_lab)
        throw CountMismatch("load_idx: " + std::to_string(n_img) + " images vs " +
                            std::to_string(n_lab) + " labels");

    std::vector<unsigned char> pixels(static_cast<std::size_t>(n_img) * h * w);
    img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!img) throw FormatError("load_idx: '" + images_path + "' truncated pixel data");
    std::vector<unsigned char> raw_labels(n_lab);
    lab.read(reinterpret_cast<char*>(raw_labels.data()),
             static_cast<std::streamsize>(raw_labels.size()));
    if (!lab) throw FormatError("load_idx: '" + labels_path + "' truncated label data");

    Dataset ds;
    ds.inputs = Tensor::zeros({static_cast<std::int64_t>(n_img), 1, static_cast<std::int64_t>(h),
                               static_cast<std::int64_t>(w)});
    auto d = ds.inputs.mutable_data();
    for (std::size_t i = 0; i < pixels.size(); ++i)
        d[i] = static_cast<float>(pixels[i]) / 255.0f;
    int max_label = 0;
    for (unsigned char l : raw_labels) {
        ds.labels.push_back(static_cast<int>(l));
        max_label = std::max(max_label, static_cast<int>(l));
    }
    ds.class_count = max_label + 1;
    ds.source = images_path + " + " + labels_path;
    return ds;
}

// ---------------------------------------------------------------------------
// CSV loader: header row, numeric features, labels mapped in first-seen order
// ---------------------------------------------------------------------------

inline Dataset load_csv(const std::string& path, const std::string& label_column) {
    std::ifstream in(path);
    if (!in) throw IoError("load_csv: cannot open '" + path + "'");

    auto split_cells = [](const std::string& line) {
        std::vector<std::string> cells;
        std::size_t pos = 0;
        while (true) {
            const std::size_t q = line.find(',', pos);
            cells.push_back(line.substr(pos, q == std::string::npos ? std::string::npos : q - pos));
            if (q == std::string::npos) break;
            pos = q + 1;
        }
        return cells;
    };

    std::string line;
    if (!std::getline(in, line)) throw ParseError("load_csv: '" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = split_cells(line);
    std::size_t label_idx = header.size();
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == label_column) label_idx = i;
    if (label_idx == header.size())
        throw ParseError("load_csv: no column named '" + label_column + "' in '" + path + "'");

    std::vector<float> features;
    Dataset ds;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_cells(line);
        if (cells.size() != header.size())
            throw ParseError("load_csv: row " + std::to_string(row) + " has " +
                             std::to_string(cells.size()) + " cells, header has " +
                             std::to_string(header.size()));
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i == label_idx) {
                int id = -1;
                for (std::size_t k = 0; k < ds.label_names.size(); ++k)
                    if (ds.label_names[k] == cells[i]) id = static_cast<int>(k);
                if (id < 0) {
                    id = static_cast<int>(ds.label_names.size());
                    ds.label_names.push_back(cells[i]);
                }
                ds.labels.push_back(id);
            } else {
                float v = 0.0f;
                const auto [p, ec] = std::from_chars(cells[i].data(),
                                                     cells[i].data() + cells[i].size(), v);
                if (ec != std::errc() || p != cells[i].data() + cells[i].size())
                    throw ParseError("load_csv: row " + std::to_string(row) + " column '" +
                                     header[i] + "' is not numeric: '" + cells[i] + "'");
                features.push_back(v);
            }
        }
    }
    if (ds.labels.empty()) throw ParseError("load_csv: '" + path + "' has no data rows");
    const std::int64_t n = static_cast<std::int64_t>(ds.labels.size());
    const std::int64_t d = static_cast<std::int64_t>(header.size()) - 1;
    ds.inputs = Tensor::from(std::move(features), {n, d});
    ds.class_count = static_cast<int>(ds.label_names.size());
    ds.source = path;
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian blobs
// ---------------------------------------------------------------------------

struct BlobsResult {
    Dataset train;
    Dataset test;
    std::vector<std::vector<float>> centers;  // all cluster centers
    std::vector<int> center_labels;           // class of each center
};

// Deterministic Gaussian clusters. Each class occupies three clusters whose
// centers are drawn on a radius-3 sphere from the seed and interleaved
// across classes, so class regions are multi-modal and capacity matters.
// Points are center + spread * N(0,I), cycled over the class's clusters.
// Per class the first floor(4m/5) points go to train, the rest to test.
inline BlobsResult synth_blobs(std::uint64_t seed, int classes, int dim, int per_class,
                               float spread) {
    if (classes < 2) throw InvalidArg("synth_blobs: needs at least 2 classes");
    if (dim < 2) throw InvalidArg("synth_blobs: needs dimension >= 2");
    if (per_class < 2) throw InvalidArg("synth_blobs: needs at least 2 points per class");
    if (spread < 0.0f) throw InvalidArg("synth_blobs: spread must be non-negative");

    Rng rng(mix_seed(seed, 0x626c6f6273ull));
    BlobsResult out;
    constexpr float kRadius = 3.0f;
    constexpr int kClustersPerClass = 3;

    const int n_centers = classes * kClustersPerClass;
    for (int c = 0; c < n_centers; ++c) {
        std::vector<float> center(static_cast<std::size_t>(dim));
        float norm = 0.0f;
        for (auto& v : center) {
            v = rng.gaussian();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm < 1e-6f) norm = 1.0f;
        for (auto& v : center) v = v / norm * kRadius;
        out.centers.push_back(std::move(center));
        out.center_labels.push_back(c % classes);
    }

    const int train_m = per_class * 4 / 5;
    const std::int64_t n_train = static_cast<std::int64_t>(classes) * train_m;
    const std::int64_t n_test = static_cast<std::int64_t>(classes) * (per_class - train_m);
    out.train.inputs = Tensor::zeros({n_train, dim});
    out.test.inputs = Tensor::zeros({n_test, dim});
    out.train.split = Split::train;
    out.test.split = Split::test;
    out.train.class_count = out.test.class_count = classes;
    out.train.source = out.test.source =
        "synth_blobs(seed=" + std::to_string(seed) + ",C=" + std::to_string(classes) +
        ",d=" + std::to_string(dim) + ",m=" + std::to_string(per_class) + ")";

    auto train_data = out.train.inputs.mutable_data();
    auto test_data = out.test.inputs.mutable_data();
    std::int64_t ti = 0, vi = 0;
    for (int c = 0; c < classes; ++c) {
        for (int k = 0; k < per_class; ++k) {
            const bool is_train = k < train_m;
            float* dst = is_train ? train_data.data() + ti * dim : test_data.data() + vi * dim;
            // cluster index c, c+C, c+2C, ... cycled per point
            const auto& center =
                out.centers[static_cast<std::size_t>(c + classes * (k % kClustersPerClass))];
            for (int j = 0; j < dim; ++j)
                dst[j] = center[static_cast<std::size_t>(j)] + spread * rng.gaussian();
            if (is_train) {
                out.train.labels.push_back(c);
                ++ti;
            } else {
                out.test.labels.push_back(c);
                ++vi;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Seeded batch iteration
// ---------------------------------------------------------------------------

// The permutation is a pure function of (plan.seed, epoch).
inline std::vector<std::int64_t> batch_permutation(std::int64_t n, std::uint64_t seed,
                                                   std::int64_t epoch) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch) + 0x657061756368ull));
    for (std::int64_t i = n - 1; i > 0; --i) {
        const std::int64_t j =
            static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

inline Tensor gather_rows(const Tensor& inputs, const std::vector<std::int64_t>& rows) {
    Shape shape = inputs.shape();
    const std::int64_t stride = inputs.numel() / shape[0];
    shape[0] = static_cast<std::int64_t>(rows.size());
    Tensor out = Tensor::zeros(shape);
    auto src = inputs.data();
    auto dst = out.mutable_data();
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::int64_t j = 0; j < stride; ++j)
            dst[static_cast<std::int64_t>(r) * stride + j] = src[rows[r] * stride + j];
    return out;
}

inline std::vector<Batch> batches(const Dataset& ds, const BatchPlan& plan, std::int64_t epoch) {
    if (plan.batch_size < 1) throw InvalidArg("batches: batch_size must be >= 1");
    const std::int64_t n = ds.size();
    const auto perm = batch_permutation(n, plan.seed, epoch);
    std::vector<Batch> out;
    for (std::int64_t start = 0; start < n; start += plan.batch_size) {
        const std::int64_t end = std::min(n, start + plan.batch_size);
        if (plan.drop_last && end - start < plan.batch_size) break;
        std::vector<std::int64_t> rows(perm.begin() + start, perm.begin() + end);
        Batch b;
        b.inputs = gather_rows(ds.inputs, rows);
        for (std::int64_t r : rows) b.labels.push_back(ds.labels[static_cast<std::size_t>(r)]);
        out.push_back(std::move(b));
    }
    return out;
}

// Structured-text dataset manifest: provenance, sizes, label map, and a
// content checksum.
inline std::string dataset_manifest(const Dataset& ds) {
    std::uint64_t checksum = 1469598103934665603ull;  // FNV-1a over input bytes and labels
    for (float v : ds.inputs.data()) {
        std::uint32_t bits = 0;
        static_assert(sizeof(bits) == sizeof(v));
        __builtin_memcpy(&bits, &v, 4);
        for (int b = 0; b < 4; ++b) {
            checksum ^= (bits >> (8 * b)) & 0xff;
            checksum *= 1099511628211ull;
        }
    }
    for (int l : ds.labels) {
        checksum ^= static_cast<std::uint64_t>(l) & 0xff;
        checksum *= 1099511628211ull;
    }
    std::string s;
    s += "source = " + ds.source + "\n";
    s += "split = " + std::string(ds.split == Split::train ? "train" : "test") + "\n";
    s += "samples = " + std::to_string(ds.size()) + "\n";
    s += "classes = " + std::to_string(ds.class_count) + "\n";
    s += "input_shape = " + detail::shape_str(ds.inputs.shape()) + "\n";
    s += "normalization = " + std::string(ds.source.find(".csv") != std::string::npos
                                              ? "none"
                                              : "pixel/255 when loaded from idx") + "\n";
    if (!ds.label_names.empty()) {
        s += "label_map =";
        for (std::size_t i = 0; i < ds.label_names.size(); ++i)
            s += " " + std::to_string(i) + ":" + ds.label_names[i];
        s += "\n";
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(checksum));
    s += "checksum = " + std::string(buf) + "\n";
    return s;
}

}  // namespace sokd
