#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sokd/errors.hpp"

namespace sokd {

using Shape = std::vector<std::int64_t>;

class Tape;
class Tensor;

namespace detail {

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Shared value buffer behind a Tensor handle. Ops that record on a tape
// link the produced storage back to its tape node so backward can start
// from any scalar result.
struct Storage {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // allocated on demand
    bool requires_grad = false;
    Tape* tape = nullptr;  // producing tape, null for leaves
    std::int64_t node = -1;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

struct OpAccess;

}  // namespace detail

// Dense row-major float32 tensor. Copies of a Tensor share the same
// storage (handle semantics); clone() makes an independent deep copy.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = static_cast<std::size_t>(detail::shape_numel(shape));
        return make(std::vector<float>(n, 0.0f), std::move(shape), requires_grad);
    }
    static Tensor full(Shape shape, float value, bool requires_grad = false) {
        const auto n = static_cast<std::size_t>(detail::shape_numel(shape));
        return make(std::vector<float>(n, value), std::move(shape), requires_grad);
    }
    static Tensor from(std::vector<float> values, Shape shape, bool requires_grad = false) {
        if (static_cast<std::int64_t>(values.size()) != detail::shape_numel(shape))
            throw ShapeMismatch("Tensor::from: data length " + std::to_string(values.size()) +
                                " does not match shape " + detail::shape_str(shape));
        return make(std::move(values), std::move(shape), requires_grad);
    }
    static Tensor scalar(float value, bool requires_grad = false) {
        return make({value}, Shape{1}, requires_grad);
    }

    bool defined() const { return st_ != nullptr; }
    const Shape& shape() const { return st_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(st_->shape.size()); }
    std::int64_t dim(std::size_t i) const { return st_->shape[i]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(st_->data.size()); }

    std::span<const float> data() const { return st_->data; }
    std::span<float> mutable_data() { return st_->data; }

    bool requires_grad() const { return st_ && st_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        st_->requires_grad = v;
        return *this;
    }

    // empty span until a backward pass has touched this tensor
    std::span<const float> grad() const { return st_->grad; }
    void zero_grad() {
        if (st_) std::fill(st_->grad.begin(), st_->grad.end(), 0.0f);
    }

    // Same values, no gradient flow, no tape link.
    Tensor detach() const {
        return make(st_->data, st_->shape, false);
    }

    // Independent deep copy (fresh leaf; gradient buffer not copied).
    Tensor clone() const {
        return make(st_->data, st_->shape, st_->requires_grad);
    }

    float item() const {
        if (numel() != 1) throw InvalidArg("item: tensor has " + std::to_string(numel()) + " elements");
        return st_->data[0];
    }

    void backward() const;

  private:
    friend struct detail::OpAccess;
    std::shared_ptr<detail::Storage> st_;

    static Tensor make(std::vector<float> values, Shape shape, bool requires_grad) {
        Tensor t;
        t.st_ = std::make_shared<detail::Storage>();
        t.st_->shape = std::move(shape);
        t.st_->data = std::move(values);
        t.st_->requires_grad = requires_grad;
        return t;
    }
};

namespace detail {
struct OpAccess {
    static const std::shared_ptr<Storage>& get(const Tensor& t) { return t.st_; }
};
inline const std::shared_ptr<Storage>& st(const Tensor& t) { return OpAccess::get(t); }
}  // namespace detail

// Reverse-mode tape. Constructing a Tape makes it the active tape for the
// current thread (RAII); ops record nodes only while a tape is active and
// some input requires grad. Node order is the forward creation order, which
// is a valid topological order. A tape and the tensors recorded on it are
// confined to one thread.
class Tape {
  public:
    Tape() : parent_(active_ref()) { active_ref() = this; }
    ~Tape() { active_ref() = parent_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    std::int64_t size() const { return static_cast<std::int64_t>(nodes_.size()); }

    void record(const char* op, std::function<void()> backprop,
                const std::shared_ptr<detail::Storage>& out) {
        Node n;
        n.op = op;
        n.backprop = std::move(backprop);
        n.out = out;
        out->tape = this;
        out->node = static_cast<std::int64_t>(nodes_.size());
        out->requires_grad = true;
        nodes_.push_back(std::move(n));
    }

    // Propagates from the given scalar storage down to the leaves. Output
    // grads of interior nodes are consumed (zeroed) as the walk passes them,
    // so several losses recorded on one tape can each run their own
    // backward; leaf grads accumulate across calls.
    void backward_from(detail::Storage* loss) {
        loss->ensure_grad();
        loss->grad[0] += 1.0f;
        for (std::int64_t i = loss->node; i >= 0; --i) {
            auto& node = nodes_[static_cast<std::size_t>(i)];
            node.out->ensure_grad();
            node.backprop();
            std::fill(node.out->grad.begin(), node.out->grad.end(), 0.0f);
        }
    }

  private:
    struct Node {
        const char* op = nullptr;
        std::function<void()> backprop;
        std::shared_ptr<detail::Storage> out;
    };

    static Tape*& active_ref() {
        thread_local Tape* current = nullptr;
        return current;
    }

    std::vector<Node> nodes_;
    Tape* parent_ = nullptr;
};

inline void Tensor::backward() const {
    if (!st_ || numel() != 1) throw InvalidArg("backward: loss must be a scalar tensor");
    if (!st_->tape) throw InvalidArg("backward: loss is not attached to a live tape");
    st_->tape->backward_from(st_.get());
}

inline void backward(const Tensor& loss) { loss.backward(); }

namespace detail {

inline bool want_tape(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                            shape_str(b.shape()) + " differ");
}

inline void accumulate(Storage& s, std::span<const float> g) {
    if (!s.requires_grad) return;
    s.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) s.grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data(), db = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = da[i] + db[i];
    if (detail::want_tape({&a, &b})) {
        auto sa = detail::st(a), sb = detail::st(b), so = detail::st(out);
        Tape::active()->record("add", [sa, sb, so] {
            detail::accumulate(*sa, so->grad);
            detail::accumulate(*sb, so->grad);
        }, so);
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data(), db = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = da[i] - db[i];
    if (detail::want_tape({&a, &b})) {
        auto sa = detail::st(a), sb = detail::st(b), so = detail::st(out);
        Tape::active()->record("sub", [sa, sb, so] {
            detail::accumulate(*sa, so->grad);
            if (sb->requires_grad) {
                sb->ensure_grad();
                for (std::size_t i = 0; i < so->grad.size(); ++i) sb->grad[i] -= so->grad[i];
            }
        }, so);
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data(), db = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = da[i] * db[i];
    if (detail::want_tape({&a, &b})) {
        auto sa = detail::st(a), sb = detail::st(b), so = detail::st(out);
        Tape::active()->record("mul", [sa, sb, so] {
            if (sa->requires_grad) {
                sa->ensure_grad();
                for (std::size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i] * sb->data[i];
            }
            if (sb->requires_grad) {
                sb->ensure_grad();
                for (std::size_t i = 0; i < so->grad.size(); ++i) sb->grad[i] += so->grad[i] * sa->data[i];
            }
        }, so);
    }
    return out;
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = da[i] * s;
    if (detail::want_tape({&a})) {
        auto sa = detail::st(a), so = detail::st(out);
        Tape::active()->record("scale", [sa, so, s] {
            if (sa->requires_grad) {
                sa->ensure_grad();
                for (std::size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i] * s;
            }
        }, so);
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = da[i] > 0.0f ? da[i] : 0.0f;
    if (detail::want_tape({&a})) {
        auto sa = detail::st(a), so = detail::st(out);
        Tape::active()->record("relu", [sa, so] {
            if (sa->requires_grad) {
                sa->ensure_grad();
                for (std::size_t i = 0; i < so->grad.size(); ++i)
                    if (sa->data[i] > 0.0f) sa->grad[i] += so->grad[i];
            }
        }, so);
    }
    return out;
}

inline Tensor abs(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = std::fabs(da[i]);
    if (detail::want_tape({&a})) {
        auto sa = detail::st(a), so = detail::st(out);
        Tape::active()->record("abs", [sa, so] {
            if (sa->requires_grad) {
                sa->ensure_grad();
                for (std::size_t i = 0; i < so->grad.size(); ++i) {
                    const float x = sa->data[i];
                    if (x > 0.0f) sa->grad[i] += so->grad[i];
                    else if (x < 0.0f) sa->grad[i] -= so->grad[i];
                }
            }
        }, so);
    }
    return out;
}

// log(max(x, floor)); the floor keeps log finite for tiny probabilities and
// zeroes the gradient below it (0*log 0 conventions are handled by callers).
inline Tensor log_floored(const Tensor& a, float floor = 1e-8f) {
    if (floor <= 0.0f) throw InvalidArg("log_floored: floor must be positive");
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = std::log(da[i] > floor ? da[i] : floor);
    if (detail::want_tape({&a})) {
        auto sa = detail::st(a), so = detail::st(out);
        Tape::active()->record("log_floored", [sa, so, floor] {
            if (sa->requires_grad) {
                sa->ensure_grad();
                for (std::size_t i = 0; i < so->grad.size(); ++i)
                    if (sa->data[i] > floor) sa->grad[i] += so->grad[i] / sa->data[i];
            }
        }, so);
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    float acc = 0.0f;
    for (float v : a.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (detail::want_tape({&a})) {
        auto sa = detail::st(a), so = detail::st(out);
        Tape::active()->record("sum", [sa, so] {
            if (sa->requires_grad) {
                sa->ensure_grad();
                const float g = so->grad[0];
                for (std::size_t i = 0; i < sa->grad.size(); ++i) sa->grad[i] += g;
            }
        }, so);
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw InvalidArg("mean: empty tensor");
    return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeMismatch("matmul: expects rank-2 tensors, got " + detail::shape_str(a.shape()) +
                            " and " + detail::shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeMismatch("matmul: inner dimensions " + std::to_string(k) + " and " +
                            std::to_string(k2) + " differ");
    Tensor out = Tensor::zeros({m, n});
    auto o = out.mutable_data();
    auto da = a.data(), db = b.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            const float av = da[i * k + p];
            if (av == 0.0f) continue;
            for (std::int64_t j = 0; j < n; ++j) o[i * n + j] += av * db[p * n + j];
        }
    if (detail::want_tape({&a, &b})) {
        auto sa = detail::st(a), sb = detail::st(b), so = detail::st(out);
        Tape::active()->record("matmul", [sa, sb, so, m, k, n] {
            if (sa->requires_grad) {
                sa->ensure_grad();  // dA = dC * B^T
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t p = 0; p < k; ++p) {
                        float acc = 0.0f;
                        for (std::int64_t j = 0; j < n; ++j)
                            acc += so->grad[i * n + j] * sb->data[p * n + j];
                        sa->grad[i * k + p] += acc;
                    }
            }
            if (sb->requires_grad) {
                sb->ensure_grad();  // dB = A^T * dC
                for (std::int64_t p = 0; p < k; ++p)
                    for (std::int64_t j = 0; j < n; ++j) {
                        float acc = 0.0f;
                        for (std::int64_t i = 0; i < m; ++i)
                            acc += sa->data[i * k + p] * so->grad[i * n + j];
                        sb->grad[p * n + j] += acc;
                    }
            }
        }, so);
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeMismatch("transpose: expects rank-2 tensor");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    auto o = out.mutable_data();
    auto da = a.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) o[j * m + i] = da[i * n + j];
    if (detail::want_tape({&a})) {
        auto sa = detail::st(a), so = detail::st(out);
        Tape::active()->record("transpose", [sa, so, m, n] {
            if (sa->requires_grad) {
                sa->ensure_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) sa->grad[i * n + j] += so->grad[j * m + i];
            }
        }, so);
    }
    return out;
}

// bias add over the last dimension of a [m,n] matrix
inline Tensor add_rowwise(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 1 || a.dim(1) != b.dim(0))
        throw ShapeMismatch("add_rowwise: " + detail::shape_str(a.shape()) + " + " +
                            detail::shape_str(b.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data(), db = b.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) o[i * n + j] = da[i * n + j] + db[j];
    if (detail::want_tape({&a, &b})) {
        auto sa = detail::st(a), sb = detail::st(b), so = detail::st(out);
        Tape::active()->record("add_rowwise", [sa, sb, so, m, n] {
            detail::accumulate(*sa, so->grad);
            if (sb->requires_grad) {
                sb->ensure_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) sb->grad[j] += so->grad[i * n + j];
            }
        }, so);
    }
    return out;
}

// bias add over the channel dimension of a [n,c,h,w] tensor
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 4 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw ShapeMismatch("add_channel_bias: " + detail::shape_str(x.shape()) + " + " +
                            detail::shape_str(b.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros(x.shape());
    auto o = out.mutable_data();
    auto dx = x.data(), db = b.data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const float bv = db[ch];
            const std::int64_t base = (i * c + ch) * hw;
            for (std::int64_t p = 0; p < hw; ++p) o[base + p] = dx[base + p] + bv;
        }
    if (detail::want_tape({&x, &b})) {
        auto sx = detail::st(x), sb = detail::st(b), so = detail::st(out);
        Tape::active()->record("add_channel_bias", [sx, sb, so, n, c, hw] {
            detail::accumulate(*sx, so->grad);
            if (sb->requires_grad) {
                sb->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t ch = 0; ch < c; ++ch) {
                        const std::int64_t base = (i * c + ch) * hw;
                        float acc = 0.0f;
                        for (std::int64_t p = 0; p < hw; ++p) acc += so->grad[base + p];
                        sb->grad[ch] += acc;
                    }
            }
        }, so);
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (detail::shape_numel(shape) != a.numel())
        throw ShapeMismatch("reshape: cannot view " + detail::shape_str(a.shape()) + " as " +
                            detail::shape_str(shape));
    Tensor out = Tensor::from(std::vector<float>(a.data().begin(), a.data().end()), std::move(shape));
    if (detail::want_tape({&a})) {
        auto sa = detail::st(a), so = detail::st(out);
        Tape::active()->record("reshape", [sa, so] {
            detail::accumulate(*sa, so->grad);
        }, so);
    }
    return out;
}

inline Tensor flatten_rows(const Tensor& a) {
    if (a.rank() < 2) throw ShapeMismatch("flatten_rows: expects rank >= 2");
    std::int64_t rest = 1;
    for (std::size_t i = 1; i < a.shape().size(); ++i) rest *= a.shape()[i];
    return reshape(a, {a.dim(0), rest});
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {
inline void check_finite(const Tensor& t, const char* op) {
    for (float v : t.data())
        if (!std::isfinite(v)) throw NonFinite(std::string(op) + ": input contains NaN or Inf");
}
inline std::pair<std::int64_t, std::int64_t> rows_cols(const Tensor& t, const char* op) {
    if (t.rank() == 1) return {1, t.dim(0)};
    if (t.rank() == 2) return {t.dim(0), t.dim(1)};
    throw ShapeMismatch(std::string(op) + ": expects rank-1 or rank-2 logits");
}
}  // namespace detail

// Row-wise softened softmax p_j = exp(z_j/tau) / sum_k exp(z_k/tau),
// computed with max subtraction.
inline Tensor softmax_with_temperature(const Tensor& z, float tau) {
    if (tau <= 0.0f) throw InvalidArg("softmax_with_temperature: tau must be positive");
    auto [n, c] = detail::rows_cols(z, "softmax_with_temperature");
    if (c < 2) throw InvalidArg("softmax_with_temperature: needs at least 2 classes");
    detail::check_finite(z, "softmax_with_temperature");
    Tensor out = Tensor::zeros(z.shape());
    auto o = out.mutable_data();
    auto dz = z.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const float* row = dz.data() + i * c;
        float* prow = o.data() + i * c;
        float mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        float denom = 0.0f;
        for (std::int64_t j = 0; j < c; ++j) {
            prow[j] = std::exp((row[j] - mx) / tau);
            denom += prow[j];
        }
        for (std::int64_t j = 0; j < c; ++j) prow[j] /= denom;
    }
    if (detail::want_tape({&z})) {
        auto sz = detail::st(z), so = detail::st(out);
        Tape::active()->record("softmax_tau", [sz, so, n, c, tau] {
            if (!sz->requires_grad) return;
            sz->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const float* p = so->data.data() + i * c;
                const float* g = so->grad.data() + i * c;
                float dot = 0.0f;
                for (std::int64_t j = 0; j < c; ++j) dot += g[j] * p[j];
                for (std::int64_t j = 0; j < c; ++j)
                    sz->grad[i * c + j] += p[j] * (g[j] - dot) / tau;
            }
        }, so);
    }
    return out;
}

inline Tensor log_softmax(const Tensor& z) {
    auto [n, c] = detail::rows_cols(z, "log_softmax");
    if (c < 2) throw InvalidArg("log_softmax: needs at least 2 classes");
    detail::check_finite(z, "log_softmax");
    Tensor out = Tensor::zeros(z.shape());
    auto o = out.mutable_data();
    auto dz = z.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const float* row = dz.data() + i * c;
        float* lrow = o.data() + i * c;
        float mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        float denom = 0.0f;
        for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        const float lse = mx + std::log(denom);
        for (std::int64_t j = 0; j < c; ++j) lrow[j] = row[j] - lse;
    }
    if (detail::want_tape({&z})) {
        auto sz = detail::st(z), so = detail::st(out);
        Tape::active()->record("log_softmax", [sz, so, n, c] {
            if (!sz->requires_grad) return;
            sz->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const float* lp = so->data.data() + i * c;
                const float* g = so->grad.data() + i * c;
                float gsum = 0.0f;
                for (std::int64_t j = 0; j < c; ++j) gsum += g[j];
                for (std::int64_t j = 0; j < c; ++j)
                    sz->grad[i * c + j] += g[j] - std::exp(lp[j]) * gsum;
            }
        }, so);
    }
    return out;
}

// Negative log-likelihood of hard labels given row-wise log-probabilities;
// batch mean.
inline Tensor nll_loss(const Tensor& logp, const std::vector<int>& labels) {
    auto [n, c] = detail::rows_cols(logp, "nll_loss");
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ShapeMismatch("nll_loss: label count " + std::to_string(labels.size()) +
                            " does not match batch " + std::to_string(n));
    for (int y : labels)
        if (y < 0 || y >= c) throw InvalidArg("nll_loss: label out of range");
    auto dl = logp.data();
    float acc = 0.0f;
    for (std::int64_t i = 0; i < n; ++i) acc -= dl[i * c + labels[static_cast<std::size_t>(i)]];
    Tensor out = Tensor::scalar(acc / static_cast<float>(n));
    if (detail::want_tape({&logp})) {
        auto sl = detail::st(logp), so = detail::st(out);
        Tape::active()->record("nll_loss", [sl, so, n, c, labels] {
            if (!sl->requires_grad) return;
            sl->ensure_grad();
            const float g = so->grad[0] / static_cast<float>(n);
            for (std::int64_t i = 0; i < n; ++i)
                sl->grad[i * c + labels[static_cast<std::size_t>(i)]] -= g;
        }, so);
    }
    return out;
}

// Standard hard-label cross entropy at temperature 1.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    return nll_loss(log_softmax(logits), labels);
}

// Rows scaled to unit L2 norm; eps keeps the zero row finite.
inline Tensor l2_normalize_rows(const Tensor& a, float eps = 1e-12f) {
    if (a.rank() != 2) throw ShapeMismatch("l2_normalize_rows: expects rank-2 tensor");
    const std::int64_t n = a.dim(0), d = a.dim(1);
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data();
    std::vector<float> norms(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        float ss = eps;
        for (std::int64_t j = 0; j < d; ++j) ss += da[i * d + j] * da[i * d + j];
        const float nm = std::sqrt(ss);
        norms[static_cast<std::size_t>(i)] = nm;
        for (std::int64_t j = 0; j < d; ++j) o[i * d + j] = da[i * d + j] / nm;
    }
    if (detail::want_tape({&a})) {
        auto sa = detail::st(a), so = detail::st(out);
        Tape::active()->record("l2_normalize_rows", [sa, so, n, d, norms] {
            if (!sa->requires_grad) return;
            sa->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const float nm = norms[static_cast<std::size_t>(i)];
                const float* g = so->grad.data() + i * d;
                const float* x = sa->data.data() + i * d;
                float dot = 0.0f;
                for (std::int64_t j = 0; j < d; ++j) dot += g[j] * x[j];
                const float n3 = nm * nm * nm;
                for (std::int64_t j = 0; j < d; ++j)
                    sa->grad[i * d + j] += g[j] / nm - x[j] * dot / n3;
            }
        }, so);
    }
    return out;
}

// Parameter-free standardization: each row (rank 2) or each (sample,channel)
// plane (rank 4) is shifted to zero mean and unit variance. Stateless, so
// train and eval behave identically.
inline Tensor standardize(const Tensor& a, float eps = 1e-5f) {
    if (a.rank() != 2 && a.rank() != 4)
        throw ShapeMismatch("standardize: expects rank-2 or rank-4 tensor");
    const std::int64_t groups = a.rank() == 2 ? a.dim(0) : a.dim(0) * a.dim(1);
    const std::int64_t span = a.numel() / groups;
    if (span < 1) throw InvalidArg("standardize: empty normalization group");
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.mutable_data();
    auto da = a.data();
    std::vector<float> inv_sd(static_cast<std::size_t>(groups));
    for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
        const float* x = da.data() + gidx * span;
        float* y = o.data() + gidx * span;
        float mu = 0.0f;
        for (std::int64_t j = 0; j < span; ++j) mu += x[j];
        mu /= static_cast<float>(span);
        float var = 0.0f;
        for (std::int64_t j = 0; j < span; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<float>(span);
        const float inv = 1.0f / std::sqrt(var + eps);
        inv_sd[static_cast<std::size_t>(gidx)] = inv;
        for (std::int64_t j = 0; j < span; ++j) y[j] = (x[j] - mu) * inv;
    }
    if (detail::want_tape({&a})) {
        auto sa = detail::st(a), so = detail::st(out);
        Tape::active()->record("standardize", [sa, so, groups, span, inv_sd] {
            if (!sa->requires_grad) return;
            sa->ensure_grad();
            for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
                const float inv = inv_sd[static_cast<std::size_t>(gidx)];
                const float* g = so->grad.data() + gidx * span;
                const float* y = so->data.data() + gidx * span;
                float gmean = 0.0f, gymean = 0.0f;
                for (std::int64_t j = 0; j < span; ++j) {
                    gmean += g[j];
                    gymean += g[j] * y[j];
                }
                gmean /= static_cast<float>(span);
                gymean /= static_cast<float>(span);
                for (std::int64_t j = 0; j < span; ++j)
                    sa->grad[gidx * span + j] += inv * (g[j] - gmean - y[j] * gymean);
            }
        }, so);
    }
    return out;
}

}  // namespace sokd
