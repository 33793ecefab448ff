#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sokd/conv.hpp"
#include "sokd/rng.hpp"
#include "sokd/tensor.hpp"

namespace sokd {

enum class LayerKind { dense, conv, relu, maxpool, flatten, standardize };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv: return "conv";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::flatten: return "flatten";
        case LayerKind::standardize: return "standardize";
    }
    return "?";
}

// One layer in an architecture description. Size fields are used per kind:
// dense uses in/out, conv uses in (channels), out (filters), kernel, stride,
// pad, maxpool uses kernel and stride.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::string name;
    std::int64_t in = 0, out = 0;
    std::int64_t kernel = 0, stride = 1, pad = 0;

    static LayerSpec dense(std::int64_t in, std::int64_t out) {
        LayerSpec s;
        s.kind = LayerKind::dense;
        s.in = in;
        s.out = out;
        return s;
    }
    static LayerSpec conv(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kernel,
                          std::int64_t stride = 1, std::int64_t pad = 0) {
        LayerSpec s;
        s.kind = LayerKind::conv;
        s.in = in_ch;
        s.out = out_ch;
        s.kernel = kernel;
        s.stride = stride;
        s.pad = pad;
        return s;
    }
    static LayerSpec relu() { return LayerSpec{LayerKind::relu, "", 0, 0, 0, 1, 0}; }
    static LayerSpec maxpool(std::int64_t kernel, std::int64_t stride) {
        return LayerSpec{LayerKind::maxpool, "", 0, 0, kernel, stride, 0};
    }
    static LayerSpec flatten() { return LayerSpec{LayerKind::flatten, "", 0, 0, 0, 1, 0}; }
    static LayerSpec standardize() { return LayerSpec{LayerKind::standardize, "", 0, 0, 0, 1, 0}; }

    bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv; }

    // canonical textual form, also used by the checkpoint manifest and the
    // config file architecture strings
    std::string to_string() const {
        switch (kind) {
            case LayerKind::dense:
                return "dense:" + std::to_string(in) + ":" + std::to_string(out);
            case LayerKind::conv:
                return "conv:" + std::to_string(in) + ":" + std::to_string(out) + ":" +
                       std::to_string(kernel) + ":" + std::to_string(stride) + ":" +
                       std::to_string(pad);
            case LayerKind::maxpool:
                return "maxpool:" + std::to_string(kernel) + ":" + std::to_string(stride);
            default:
                return layer_kind_name(kind);
        }
    }
};

struct Layer {
    LayerSpec spec;
    Tensor weight;  // dense: [in,out]; conv: [out,in,k,k]
    Tensor bias;    // dense: [out]; conv: [out]
};

// Forward output: final logits plus any tapped intermediate features.
struct DistillBatchOutput {
    Tensor logits;
    std::map<std::string, Tensor> features;
};

// Ordered layer stack with named layers and block-granular split points.
// A "block" starts at each parameterized layer and absorbs the activation /
// pool / reshape layers that follow it, which is the granularity the split
// index l refers to. Copying a SequentialModel yields a view (parameters are
// shared); deep_copy() detaches them.
class SequentialModel {
  public:
    std::vector<Layer> layers;
    int split_index = -1;  // default split used when a caller passes none

    std::int64_t layer_count() const { return static_cast<std::int64_t>(layers.size()); }

    // block boundaries: indices of layers that begin each block
    std::vector<std::int64_t> block_starts() const {
        std::vector<std::int64_t> starts;
        bool have_param = false;
        for (std::int64_t i = 0; i < layer_count(); ++i) {
            if (layers[static_cast<std::size_t>(i)].spec.has_params()) {
                if (!have_param && starts.empty()) starts.push_back(0);
                else if (have_param) starts.push_back(i);
                have_param = true;
            } else if (starts.empty()) {
                starts.push_back(0);
            }
        }
        if (starts.empty() && !layers.empty()) starts.push_back(0);
        return starts;
    }

    std::int64_t block_count() const { return static_cast<std::int64_t>(block_starts().size()); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& l : layers) {
            if (!l.spec.has_params()) continue;
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    void set_requires_grad(bool v) {
        for (auto& l : layers) {
            if (!l.spec.has_params()) continue;
            l.weight.set_requires_grad(v);
            l.bias.set_requires_grad(v);
        }
    }

    SequentialModel deep_copy() const {
        SequentialModel m;
        m.split_index = split_index;
        m.layers.reserve(layers.size());
        for (const auto& l : layers) {
            Layer c;
            c.spec = l.spec;
            if (l.spec.has_params()) {
                c.weight = l.weight.clone();
                c.bias = l.bias.clone();
            }
            m.layers.push_back(std::move(c));
        }
        return m;
    }

    std::vector<std::string> layer_names() const {
        std::vector<std::string> names;
        names.reserve(layers.size());
        for (const auto& l : layers) names.push_back(l.spec.name);
        return names;
    }

    bool has_layer(const std::string& name) const {
        for (const auto& l : layers)
            if (l.spec.name == name) return true;
        return false;
    }

    std::string arch_string() const {
        std::string s;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (i) s += ",";
            s += layers[i].spec.to_string();
        }
        return s;
    }
};

namespace detail {

inline void auto_name_layers(std::vector<LayerSpec>& specs) {
    for (std::size_t i = 0; i < specs.size(); ++i)
        if (specs[i].name.empty())
            specs[i].name = std::string(layer_kind_name(specs[i].kind)) + std::to_string(i);
}

inline void check_spec_composition(const std::vector<LayerSpec>& specs) {
    // Verifies the statically known dimension chain: dense->dense and
    // conv->conv channel agreement, plus uniqueness of names. Reshape
    // boundaries (flatten) are checked at forward time when the spatial
    // extent is known.
    std::set<std::string> seen;
    for (const auto& s : specs) {
        if (!seen.insert(s.name).second)
            throw InvalidArg("build_model: duplicate layer name '" + s.name + "'");
    }
    std::int64_t width = -1;  // last known feature width/channel count, -1 unknown
    bool width_is_channels = false;
    for (const auto& s : specs) {
        switch (s.kind) {
            case LayerKind::dense:
                if (s.in <= 0 || s.out <= 0)
                    throw InvalidArg("build_model: dense layer '" + s.name + "' needs positive dims");
                if (width >= 0 && !width_is_channels && width != s.in)
                    throw ShapeMismatch("build_model: layer '" + s.name + "' expects " +
                                        std::to_string(s.in) + " inputs but previous layer yields " +
                                        std::to_string(width));
                width = s.out;
                width_is_channels = false;
                break;
            case LayerKind::conv:
                if (s.in <= 0 || s.out <= 0 || s.kernel <= 0)
                    throw InvalidArg("build_model: conv layer '" + s.name + "' needs positive dims");
                if (s.stride <= 0) throw InvalidArg("build_model: conv stride must be positive");
                if (width >= 0 && width_is_channels && width != s.in)
                    throw ShapeMismatch("build_model: layer '" + s.name + "' expects " +
                                        std::to_string(s.in) + " channels but previous layer yields " +
                                        std::to_string(width));
                if (width >= 0 && !width_is_channels)
                    throw ShapeMismatch("build_model: conv layer '" + s.name +
                                        "' after a flat layer");
                width = s.out;
                width_is_channels = true;
                break;
            case LayerKind::flatten:
                width = -1;  // flat width depends on the input spatial size
                width_is_channels = false;
                break;
            default:
                break;  // shape preserved
        }
    }
}

}  // namespace detail

// Builds a model with Kaiming-uniform fan-in initialized weights and zero
// biases, deterministically from the seed.
inline SequentialModel build_model(std::vector<LayerSpec> specs, std::uint64_t seed) {
    detail::auto_name_layers(specs);
    detail::check_spec_composition(specs);
    Rng rng(mix_seed(seed, 0x6e6e2d696e6974ull));
    SequentialModel m;
    for (auto& spec : specs) {
        Layer l;
        l.spec = spec;
        if (spec.kind == LayerKind::dense) {
            const float bound = std::sqrt(6.0f / static_cast<float>(spec.in));
            l.weight = Tensor::zeros({spec.in, spec.out}, true);
            for (auto& v : l.weight.mutable_data()) v = rng.uniform(-bound, bound);
            l.bias = Tensor::zeros({spec.out}, true);
        } else if (spec.kind == LayerKind::conv) {
            const float fan_in = static_cast<float>(spec.in * spec.kernel * spec.kernel);
            const float bound = std::sqrt(6.0f / fan_in);
            l.weight = Tensor::zeros({spec.out, spec.in, spec.kernel, spec.kernel}, true);
            for (auto& v : l.weight.mutable_data()) v = rng.uniform(-bound, bound);
            l.bias = Tensor::zeros({spec.out}, true);
        }
        m.layers.push_back(std::move(l));
    }
    if (m.block_count() > 1) m.split_index = static_cast<int>(m.block_count()) - 1;
    return m;
}

// Runs the stack; features are captured after every layer whose name is in
// `taps`.
inline DistillBatchOutput forward(const SequentialModel& model, const Tensor& x,
                                  const std::set<std::string>& taps = {}) {
    for (const auto& t : taps)
        if (!model.has_layer(t)) throw UnknownTap("forward: no layer named '" + t + "'");
    DistillBatchOutput out;
    Tensor h = x;
    for (const auto& l : model.layers) {
        switch (l.spec.kind) {
            case LayerKind::dense: {
                if (h.rank() != 2)
                    throw ShapeMismatch("forward: dense layer '" + l.spec.name +
                                        "' expects a flat [n,d] input");
                if (h.dim(1) != l.spec.in)
                    throw ShapeMismatch("forward: layer '" + l.spec.name + "' expects " +
                                        std::to_string(l.spec.in) + " features, got " +
                                        std::to_string(h.dim(1)));
                h = add_rowwise(matmul(h, l.weight), l.bias);
                break;
            }
            case LayerKind::conv:
                h = add_channel_bias(conv2d(h, l.weight, l.spec.stride, l.spec.pad), l.bias);
                break;
            case LayerKind::relu:
                h = relu(h);
                break;
            case LayerKind::maxpool:
                h = maxpool2d(h, l.spec.kernel, l.spec.stride);
                break;
            case LayerKind::flatten:
                h = flatten_rows(h);
                break;
            case LayerKind::standardize:
                h = standardize(h);
                break;
        }
        if (taps.count(l.spec.name)) out.features.emplace(l.spec.name, h);
    }
    out.logits = h;
    return out;
}

// Splits at block boundary l into (blocks 1..l, blocks l+1..L). Both halves
// view the original parameters; composing them reproduces the full forward
// bit-exactly.
inline std::pair<SequentialModel, SequentialModel> split_model(const SequentialModel& model,
                                                               std::int64_t l) {
    const auto starts = model.block_starts();
    const std::int64_t blocks = static_cast<std::int64_t>(starts.size());
    if (l < 1 || l >= blocks)
        throw InvalidArg("split_model: split index " + std::to_string(l) +
                         " out of range [1," + std::to_string(blocks - 1) + "]");
    const std::int64_t cut = starts[static_cast<std::size_t>(l)];
    SequentialModel low, high;
    for (std::int64_t i = 0; i < model.layer_count(); ++i) {
        if (i < cut) low.layers.push_back(model.layers[static_cast<std::size_t>(i)]);
        else high.layers.push_back(model.layers[static_cast<std::size_t>(i)]);
    }
    return {std::move(low), std::move(high)};
}

// Architecture strings: comma-separated layer tokens, e.g.
//   "dense:8:64,relu,dense:64:4"
//   "conv:1:8:3:1:1,relu,maxpool:2:2,flatten,dense:128:10"
inline std::vector<LayerSpec> parse_arch(const std::string& text) {
    auto split = [](const std::string& s, char sep) {
        std::vector<std::string> out;
        std::size_t pos = 0;
        while (true) {
            const std::size_t q = s.find(sep, pos);
            out.push_back(s.substr(pos, q == std::string::npos ? std::string::npos : q - pos));
            if (q == std::string::npos) break;
            pos = q + 1;
        }
        return out;
    };
    auto to_int = [&text](const std::string& f) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(f, &used);
            if (used != f.size()) throw std::invalid_argument(f);
            return static_cast<std::int64_t>(v);
        } catch (const std::exception&) {
            throw ParseError("parse_arch: bad integer '" + f + "' in '" + text + "'");
        }
    };
    std::vector<LayerSpec> specs;
    for (const std::string& tok : split(text, ',')) {
        if (tok.empty()) throw ParseError("parse_arch: empty layer token in '" + text + "'");
        const std::vector<std::string> f = split(tok, ':');
        const std::string& kind = f[0];
        const std::size_t n = f.size();
        if (kind == "dense" && n == 3) {
            specs.push_back(LayerSpec::dense(to_int(f[1]), to_int(f[2])));
        } else if (kind == "conv" && (n == 4 || n == 5 || n == 6)) {
            specs.push_back(LayerSpec::conv(to_int(f[1]), to_int(f[2]), to_int(f[3]),
                                            n >= 5 ? to_int(f[4]) : 1,
                                            n >= 6 ? to_int(f[5]) : 0));
        } else if (kind == "maxpool" && n == 3) {
            specs.push_back(LayerSpec::maxpool(to_int(f[1]), to_int(f[2])));
        } else if (kind == "relu" && n == 1) {
            specs.push_back(LayerSpec::relu());
        } else if (kind == "flatten" && n == 1) {
            specs.push_back(LayerSpec::flatten());
        } else if (kind == "standardize" && n == 1) {
            specs.push_back(LayerSpec::standardize());
        } else {
            throw ParseError("parse_arch: bad layer token '" + tok + "'");
        }
    }
    if (specs.empty()) throw ParseError("parse_arch: empty architecture");
    return specs;
}

}  // namespace sokd
