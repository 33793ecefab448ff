#pragma once

#include <vector>

#include "sokd/tensor.hpp"

namespace sokd {

namespace detail {

struct ConvDims {
    std::int64_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
};

// Gathers padded patches into a [n*oh*ow, c*kh*kw] matrix (im2col).
inline std::vector<float> im2col(std::span<const float> x, const ConvDims& d) {
    const std::int64_t cols = d.c * d.kh * d.kw;
    std::vector<float> patches(static_cast<std::size_t>(d.n * d.oh * d.ow * cols), 0.0f);
    for (std::int64_t img = 0; img < d.n; ++img)
        for (std::int64_t oi = 0; oi < d.oh; ++oi)
            for (std::int64_t oj = 0; oj < d.ow; ++oj) {
                const std::int64_t row = (img * d.oh + oi) * d.ow + oj;
                float* dst = patches.data() + row * cols;
                for (std::int64_t ch = 0; ch < d.c; ++ch)
                    for (std::int64_t u = 0; u < d.kh; ++u) {
                        const std::int64_t ii = oi * d.stride - d.pad + u;
                        if (ii < 0 || ii >= d.h) { dst += d.kw; continue; }
                        for (std::int64_t v = 0; v < d.kw; ++v, ++dst) {
                            const std::int64_t jj = oj * d.stride - d.pad + v;
                            if (jj >= 0 && jj < d.w)
                                *dst = x[((img * d.c + ch) * d.h + ii) * d.w + jj];
                        }
                    }
            }
    return patches;
}

}  // namespace detail

// 2-D convolution, computed as an im2col patch gather followed by a matrix
// product against the [o, c*kh*kw] kernel. Output spatial size is
// floor((h + 2*pad - kh)/stride) + 1 (same for width).
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::int64_t stride = 1,
                     std::int64_t padding = 0) {
    if (stride <= 0) throw InvalidArg("conv2d: stride must be positive");
    if (padding < 0) throw InvalidArg("conv2d: padding must be non-negative");
    if (x.rank() != 4 || kernel.rank() != 4)
        throw ShapeMismatch("conv2d: expects [n,c,h,w] input and [o,c,kh,kw] kernel");
    detail::ConvDims d;
    d.n = x.dim(0); d.c = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
    d.o = kernel.dim(0); d.kh = kernel.dim(2); d.kw = kernel.dim(3);
    d.stride = stride; d.pad = padding;
    if (kernel.dim(1) != d.c)
        throw ShapeMismatch("conv2d: input has " + std::to_string(d.c) + " channels, kernel expects " +
                            std::to_string(kernel.dim(1)));
    d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
    d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
    if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding)
        throw InvalidArg("conv2d: kernel larger than padded input");

    const std::int64_t cols = d.c * d.kh * d.kw;
    const std::vector<float> patches = detail::im2col(x.data(), d);
    Tensor out = Tensor::zeros({d.n, d.o, d.oh, d.ow});
    auto o = out.mutable_data();
    auto kd = kernel.data();
    const std::int64_t rows = d.n * d.oh * d.ow;
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* p = patches.data() + r * cols;
        const std::int64_t img = r / (d.oh * d.ow);
        const std::int64_t pix = r % (d.oh * d.ow);
        for (std::int64_t f = 0; f < d.o; ++f) {
            const float* kf = kd.data() + f * cols;
            float acc = 0.0f;
            for (std::int64_t q = 0; q < cols; ++q) acc += p[q] * kf[q];
            o[(img * d.o + f) * d.oh * d.ow + pix] = acc;
        }
    }

    if (detail::want_tape({&x, &kernel})) {
        auto sx = detail::st(x), sk = detail::st(kernel), so = detail::st(out);
        Tape::active()->record("conv2d", [sx, sk, so, d, cols] {
            const std::int64_t rows = d.n * d.oh * d.ow;
            // patches are recomputed from the saved input
            const std::vector<float> patches = detail::im2col(sx->data, d);
            if (sk->requires_grad) {
                sk->ensure_grad();  // dK = dOut^T * patches
                for (std::int64_t r = 0; r < rows; ++r) {
                    const std::int64_t img = r / (d.oh * d.ow);
                    const std::int64_t pix = r % (d.oh * d.ow);
                    const float* p = patches.data() + r * cols;
                    for (std::int64_t f = 0; f < d.o; ++f) {
                        const float g = so->grad[(img * d.o + f) * d.oh * d.ow + pix];
                        if (g == 0.0f) continue;
                        float* kg = sk->grad.data() + f * cols;
                        for (std::int64_t q = 0; q < cols; ++q) kg[q] += g * p[q];
                    }
                }
            }
            if (sx->requires_grad) {
                sx->ensure_grad();  // dPatches = dOut * K, scattered back
                for (std::int64_t r = 0; r < rows; ++r) {
                    const std::int64_t img = r / (d.oh * d.ow);
                    const std::int64_t pix = r % (d.oh * d.ow);
                    const std::int64_t oi = pix / d.ow, oj = pix % d.ow;
                    for (std::int64_t f = 0; f < d.o; ++f) {
                        const float g = so->grad[(img * d.o + f) * d.oh * d.ow + pix];
                        if (g == 0.0f) continue;
                        const float* kf = sk->data.data() + f * cols;
                        std::int64_t q = 0;
                        for (std::int64_t ch = 0; ch < d.c; ++ch)
                            for (std::int64_t u = 0; u < d.kh; ++u)
                                for (std::int64_t v = 0; v < d.kw; ++v, ++q) {
                                    const std::int64_t ii = oi * d.stride - d.pad + u;
                                    const std::int64_t jj = oj * d.stride - d.pad + v;
                                    if (ii < 0 || ii >= d.h || jj < 0 || jj >= d.w) continue;
                                    sx->grad[((img * d.c + ch) * d.h + ii) * d.w + jj] += g * kf[q];
                                }
                    }
                }
            }
        }, so);
    }
    return out;
}

// Max pooling over non-overlapping or strided windows; no padding.
inline Tensor maxpool2d(const Tensor& x, std::int64_t k, std::int64_t stride) {
    if (k <= 0 || stride <= 0) throw InvalidArg("maxpool2d: kernel and stride must be positive");
    if (x.rank() != 4) throw ShapeMismatch("maxpool2d: expects [n,c,h,w] input");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (k > h || k > w) throw InvalidArg("maxpool2d: window larger than input");
    const std::int64_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    Tensor out = Tensor::zeros({n, c, oh, ow});
    auto o = out.mutable_data();
    auto dx = x.data();
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    for (std::int64_t img = 0; img < n; ++img)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t oi = 0; oi < oh; ++oi)
                for (std::int64_t oj = 0; oj < ow; ++oj) {
                    std::int64_t best = ((img * c + ch) * h + oi * stride) * w + oj * stride;
                    float bv = dx[best];
                    for (std::int64_t u = 0; u < k; ++u)
                        for (std::int64_t v = 0; v < k; ++v) {
                            const std::int64_t idx =
                                ((img * c + ch) * h + oi * stride + u) * w + oj * stride + v;
                            if (dx[idx] > bv) { bv = dx[idx]; best = idx; }
                        }
                    const std::int64_t oidx = ((img * c + ch) * oh + oi) * ow + oj;
                    o[oidx] = bv;
                    argmax[static_cast<std::size_t>(oidx)] = best;
                }
    if (detail::want_tape({&x})) {
        auto sx = detail::st(x), so = detail::st(out);
        Tape::active()->record("maxpool2d", [sx, so, argmax] {
            if (!sx->requires_grad) return;
            sx->ensure_grad();
            for (std::size_t i = 0; i < argmax.size(); ++i)
                sx->grad[static_cast<std::size_t>(argmax[i])] += so->grad[i];
        }, so);
    }
    return out;
}

// Channel reduction [n,c,h,w] -> [n,h,w]; the building block of
// attention-style feature summaries.
inline Tensor sum_channels(const Tensor& x) {
    if (x.rank() != 4) throw ShapeMismatch("sum_channels: expects [n,c,h,w] input");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros({n, x.dim(2), x.dim(3)});
    auto o = out.mutable_data();
    auto dx = x.data();
    for (std::int64_t img = 0; img < n; ++img)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t p = 0; p < hw; ++p)
                o[img * hw + p] += dx[(img * c + ch) * hw + p];
    if (detail::want_tape({&x})) {
        auto sx = detail::st(x), so = detail::st(out);
        Tape::active()->record("sum_channels", [sx, so, n, c, hw] {
            if (!sx->requires_grad) return;
            sx->ensure_grad();
            for (std::int64_t img = 0; img < n; ++img)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    for (std::int64_t p = 0; p < hw; ++p)
                        sx->grad[(img * c + ch) * hw + p] += so->grad[img * hw + p];
        }, so);
    }
    return out;
}

}  // namespace sokd
