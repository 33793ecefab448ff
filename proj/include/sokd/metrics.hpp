#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "sokd/errors.hpp"
#include "sokd/tensor.hpp"

namespace sokd {

// Per-sample class predictions of a teacher and a student plus the ground
// truth, the raw material for the imitation metrics.
struct PredictionRecord {
    std::vector<int> teacher_pred;
    std::vector<int> student_pred;
    std::vector<int> label;

    std::size_t size() const { return teacher_pred.size(); }
    void validate() const {
        if (teacher_pred.size() != student_pred.size() || teacher_pred.size() != label.size())
            throw ShapeMismatch("PredictionRecord: vectors have different lengths");
    }
};

// n x d activation matrix; CKA internally works in double.
struct ActivationMatrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<float> values;

    static ActivationMatrix from_tensor(const Tensor& t) {
        ActivationMatrix m;
        if (t.rank() == 2) {
            m.rows = t.dim(0);
            m.cols = t.dim(1);
        } else {
            m.rows = t.dim(0);
            m.cols = t.numel() / t.dim(0);
        }
        m.values.assign(t.data().begin(), t.data().end());
        return m;
    }
};

struct CkaResult {
    double value = 0.0;
    bool degenerate = false;  // a centered input had no variance
};

// Linear centered kernel alignment:
//   CKA(X,Y) = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)
// with column-centered X, Y. Invariant to orthogonal right-multiplication
// and isotropic scaling; 0 is returned (flagged) for zero-variance input.
inline CkaResult linear_cka(const ActivationMatrix& x, const ActivationMatrix& y) {
    if (x.rows != y.rows)
        throw ShapeMismatch("linear_cka: sample counts differ (" + std::to_string(x.rows) +
                            " vs " + std::to_string(y.rows) + ")");
    if (x.rows < 2) throw InvalidArg("linear_cka: needs at least 2 samples");
    for (float v : x.values)
        if (!std::isfinite(v)) throw NonFinite("linear_cka: X contains NaN or Inf");
    for (float v : y.values)
        if (!std::isfinite(v)) throw NonFinite("linear_cka: Y contains NaN or Inf");

    const std::int64_t n = x.rows, p = x.cols, q = y.cols;
    auto centered = [n](const ActivationMatrix& m) {
        std::vector<double> c(m.values.size());
        for (std::int64_t j = 0; j < m.cols; ++j) {
            double mean = 0.0;
            for (std::int64_t i = 0; i < n; ++i) mean += m.values[i * m.cols + j];
            mean /= static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i)
                c[static_cast<std::size_t>(i * m.cols + j)] = m.values[i * m.cols + j] - mean;
        }
        return c;
    };
    const std::vector<double> xc = centered(x);
    const std::vector<double> yc = centered(y);

    // ||A^T B||_F^2 for column-centered matrices
    auto cross_fro_sq = [n](const std::vector<double>& a, std::int64_t ca,
                            const std::vector<double>& b, std::int64_t cb) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < ca; ++j)
            for (std::int64_t k = 0; k < cb; ++k) {
                double dot = 0.0;
                for (std::int64_t i = 0; i < n; ++i)
                    dot += a[static_cast<std::size_t>(i * ca + j)] *
                           b[static_cast<std::size_t>(i * cb + k)];
                acc += dot * dot;
            }
        return acc;
    };

    const double xx = std::sqrt(cross_fro_sq(xc, p, xc, p));
    const double yy = std::sqrt(cross_fro_sq(yc, q, yc, q));
    CkaResult r;
    if (xx == 0.0 || yy == 0.0) {
        r.degenerate = true;
        return r;
    }
    r.value = cross_fro_sq(yc, q, xc, p) / (xx * yy);
    return r;
}

// Percentage of samples where teacher and student predict different classes.
inline double imitation_error_rate(const PredictionRecord& r) {
    r.validate();
    if (r.size() == 0) throw InvalidArg("imitation_error_rate: empty record");
    std::size_t same = 0;
    for (std::size_t i = 0; i < r.size(); ++i)
        if (r.teacher_pred[i] == r.student_pred[i]) ++same;
    return 100.0 * (1.0 - static_cast<double>(same) / static_cast<double>(r.size()));
}

// Among samples where teacher and student agree, the percentage where that
// shared prediction is wrong. Undefined (absent) when they never agree.
inline std::optional<double> misleading_rate(const PredictionRecord& r) {
    r.validate();
    std::size_t same = 0, same_and_correct = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (r.teacher_pred[i] != r.student_pred[i]) continue;
        ++same;
        if (r.student_pred[i] == r.label[i]) ++same_and_correct;
    }
    if (same == 0) return std::nullopt;
    return 100.0 * (1.0 - static_cast<double>(same_and_correct) / static_cast<double>(same));
}

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size())
        throw ShapeMismatch("accuracy: prediction and label counts differ");
    if (preds.empty()) throw InvalidArg("accuracy: empty input");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) ++correct;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(preds.size());
}

}  // namespace sokd
