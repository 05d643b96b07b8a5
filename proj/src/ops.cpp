#include "hba/ops.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace hba {

namespace {

// ---------------------------------------------------------------------------
// GEMM kernels, row-major, blocked for cache reuse. Accumulation order per
// output element is fixed (k ascending) so results are bit-reproducible.
// ---------------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]
template <class Real>
void gemm_nn(const Real* A, const Real* B, Real* C, int M, int K, int N) {
    constexpr int KT = 16; // B tile rows stay cached across the m sweep
    for (int k0 = 0; k0 < K; k0 += KT) {
        const int k1 = std::min(K, k0 + KT);
        for (int m = 0; m < M; ++m) {
            const Real* a = A + static_cast<std::int64_t>(m) * K;
            Real* c = C + static_cast<std::int64_t>(m) * N;
            for (int k = k0; k < k1; ++k) {
                const Real av = a[k];
                const Real* b = B + static_cast<std::int64_t>(k) * N;
                for (int n = 0; n < N; ++n) c[n] += av * b[n];
            }
        }
    }
}

// fixed-order dot product over eight independent accumulator lanes; the
// lanes break the serial FP dependency chain without -ffast-math
template <class Real>
Real dot_lanes(const Real* a, const Real* b, int k) {
    Real l0 = 0, l1 = 0, l2 = 0, l3 = 0, l4 = 0, l5 = 0, l6 = 0, l7 = 0;
    int i = 0;
    for (; i + 8 <= k; i += 8) {
        l0 += a[i] * b[i];
        l1 += a[i + 1] * b[i + 1];
        l2 += a[i + 2] * b[i + 2];
        l3 += a[i + 3] * b[i + 3];
        l4 += a[i + 4] * b[i + 4];
        l5 += a[i + 5] * b[i + 5];
        l6 += a[i + 6] * b[i + 6];
        l7 += a[i + 7] * b[i + 7];
    }
    Real tail = 0;
    for (; i < k; ++i) tail += a[i] * b[i];
    return ((l0 + l1) + (l2 + l3)) + ((l4 + l5) + (l6 + l7)) + tail;
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class Real>
void gemm_nt(const Real* A, const Real* B, Real* C, int M, int K, int N) {
    constexpr int MT = 8, NT = 8; // an 8x8 block keeps 16 K-length rows hot
    for (int m0 = 0; m0 < M; m0 += MT) {
        const int m1 = std::min(M, m0 + MT);
        for (int n0 = 0; n0 < N; n0 += NT) {
            const int n1 = std::min(N, n0 + NT);
            for (int m = m0; m < m1; ++m) {
                const Real* a = A + static_cast<std::int64_t>(m) * K;
                Real* c = C + static_cast<std::int64_t>(m) * N;
                for (int n = n0; n < n1; ++n)
                    c[n] += dot_lanes(a, B + static_cast<std::int64_t>(n) * K, K);
            }
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class Real>
void gemm_tn(const Real* A, const Real* B, Real* C, int M, int K, int N) {
    constexpr int NT = 4096; // B column block reused across the m sweep
    for (int n0 = 0; n0 < N; n0 += NT) {
        const int n1 = std::min(N, n0 + NT);
        for (int m = 0; m < M; ++m) {
            Real* c = C + static_cast<std::int64_t>(m) * N;
            for (int k = 0; k < K; ++k) {
                const Real av = A[static_cast<std::int64_t>(k) * M + m];
                const Real* b = B + static_cast<std::int64_t>(k) * N;
                for (int n = n0; n < n1; ++n) c[n] += av * b[n];
            }
        }
    }
}

template <class Real>
bool wants_grad(const TensorPtr<Real>& t) {
    return t && t->requires_grad;
}

template <class Real>
void record_if_needed(const TensorPtr<Real>& out, std::function<void()> fn) {
    if (out->requires_grad) {
        if (Tape<Real>* tape = active_tape<Real>()) tape->record(std::move(fn));
    }
}

template <class Real>
void add_into(std::vector<Real>& dst, const std::vector<Real>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct ConvDims {
    int out_h = 0, out_w = 0, ck = 0;
};

ConvDims conv_dims(const Shape& in, const Shape& k, int stride, int padding) {
    if (k.h < 1 || k.w < 1) throw ShapeError("conv2d: kernel must be at least 1x1");
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
    if (k.c != in.c)
        throw ShapeError("conv2d: kernel expects " + std::to_string(k.c) + " input channels, input has " +
                         std::to_string(in.c) + " (input " + in.str() + ", kernel " + k.str() + ")");
    const int num_h = in.h + 2 * padding - k.h;
    const int num_w = in.w + 2 * padding - k.w;
    if (num_h < 0 || num_w < 0 || num_h % stride != 0 || num_w % stride != 0)
        throw ShapeError("conv2d: output size (" + std::to_string(num_h) + "/" + std::to_string(stride) +
                         "+1, " + std::to_string(num_w) + "/" + std::to_string(stride) +
                         "+1) is not a positive integer for input " + in.str() + ", kernel " + k.str());
    ConvDims d;
    d.out_h = num_h / stride + 1;
    d.out_w = num_w / stride + 1;
    d.ck = k.c * k.h * k.w;
    return d;
}

// col[(ci*kh+ky)*kw+kx][oy*OW+ox] = x[ci][oy*stride-pad+ky][ox*stride-pad+kx]
template <class Real>
void im2col(const Real* x, const Shape& in, const Shape& k, int stride, int padding,
            const ConvDims& d, Real* col) {
    const int ohw = d.out_h * d.out_w;
    for (int ci = 0; ci < in.c; ++ci) {
        const Real* xc = x + static_cast<std::int64_t>(ci) * in.h * in.w;
        for (int ky = 0; ky < k.h; ++ky) {
            for (int kx = 0; kx < k.w; ++kx) {
                Real* row = col + static_cast<std::int64_t>((ci * k.h + ky) * k.w + kx) * ohw;
                for (int oy = 0; oy < d.out_h; ++oy) {
                    const int iy = oy * stride - padding + ky;
                    Real* dst = row + oy * d.out_w;
                    if (iy < 0 || iy >= in.h) {
                        for (int ox = 0; ox < d.out_w; ++ox) dst[ox] = Real(0);
                        continue;
                    }
                    const Real* src = xc + static_cast<std::int64_t>(iy) * in.w;
                    for (int ox = 0; ox < d.out_w; ++ox) {
                        const int ix = ox * stride - padding + kx;
                        dst[ox] = (ix >= 0 && ix < in.w) ? src[ix] : Real(0);
                    }
                }
            }
        }
    }
}

template <class Real>
void col2im_add(const Real* col, const Shape& in, const Shape& k, int stride, int padding,
                const ConvDims& d, Real* dx) {
    const int ohw = d.out_h * d.out_w;
    for (int ci = 0; ci < in.c; ++ci) {
        Real* xc = dx + static_cast<std::int64_t>(ci) * in.h * in.w;
        for (int ky = 0; ky < k.h; ++ky) {
            for (int kx = 0; kx < k.w; ++kx) {
                const Real* row = col + static_cast<std::int64_t>((ci * k.h + ky) * k.w + kx) * ohw;
                for (int oy = 0; oy < d.out_h; ++oy) {
                    const int iy = oy * stride - padding + ky;
                    if (iy < 0 || iy >= in.h) continue;
                    const Real* src = row + oy * d.out_w;
                    Real* dst = xc + static_cast<std::int64_t>(iy) * in.w;
                    for (int ox = 0; ox < d.out_w; ++ox) {
                        const int ix = ox * stride - padding + kx;
                        if (ix >= 0 && ix < in.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// iterate 1-D lines along `axis`: fn(base_offset, length, stride)
template <class Fn>
void for_each_line(const Shape& s, SoftmaxAxis axis, Fn&& fn) {
    const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
    switch (axis) {
        case SoftmaxAxis::Channel:
            for (int n = 0; n < s.n; ++n)
                for (int h = 0; h < s.h; ++h)
                    for (int w = 0; w < s.w; ++w)
                        fn(s.index(n, 0, h, w), s.c, hw);
            break;
        case SoftmaxAxis::Height:
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c)
                    for (int w = 0; w < s.w; ++w)
                        fn(s.index(n, c, 0, w), s.h, static_cast<std::int64_t>(s.w));
            break;
        case SoftmaxAxis::Width:
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c)
                    for (int h = 0; h < s.h; ++h)
                        fn(s.index(n, c, h, 0), s.w, std::int64_t(1));
            break;
    }
}

} // namespace

template <class Real>
void check_finite(const Tensor<Real>& t, const char* op) {
    // single vectorizable pass: any NaN/Inf poisons the double accumulator
    double acc = 0.0;
    for (const Real v : t.data) acc += std::abs(static_cast<double>(v));
    if (std::isfinite(acc)) return;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        if (!std::isfinite(t.data[i]))
            throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i) +
                               " of " + t.shape.str());
    }
    // finite data whose magnitudes overflow the probe accumulator
    throw NumericError(std::string(op) + ": values overflow the finite range of " + t.shape.str());
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> conv2d(const TensorPtr<Real>& input, const TensorPtr<Real>& kernel,
                       int stride, int padding, const TensorPtr<Real>& bias) {
    const Shape in = input->shape;
    const Shape ks = kernel->shape;
    const ConvDims d = conv_dims(in, ks, stride, padding);
    if (bias && (bias->shape.c != ks.n || bias->shape.n != 1 || bias->shape.h != 1 || bias->shape.w != 1))
        throw ShapeError("conv2d: bias shape " + bias->shape.str() + " does not match Cout=" + std::to_string(ks.n));

    auto out = make_tensor<Real>({in.n, ks.n, d.out_h, d.out_w},
                                 wants_grad(input) || wants_grad(kernel) || wants_grad(bias));
    const int ohw = d.out_h * d.out_w;
    std::vector<Real> col(static_cast<std::size_t>(d.ck) * ohw);
    for (int n = 0; n < in.n; ++n) {
        im2col(input->data.data() + in.index(n, 0, 0, 0), in, ks, stride, padding, d, col.data());
        Real* y = out->data.data() + out->shape.index(n, 0, 0, 0);
        gemm_nn(kernel->data.data(), col.data(), y, ks.n, d.ck, ohw);
        if (bias) {
            for (int co = 0; co < ks.n; ++co) {
                const Real b = bias->data[static_cast<std::size_t>(co)];
                Real* yc = y + static_cast<std::int64_t>(co) * ohw;
                for (int i = 0; i < ohw; ++i) yc[i] += b;
            }
        }
    }
    check_finite(*out, "conv2d");

    record_if_needed<Real>(out, [input, kernel, bias, out, stride, padding, d]() {
        if (out->grad.empty()) return;
        const Shape in = input->shape;
        const Shape ks = kernel->shape;
        const int ohw = d.out_h * d.out_w;
        const bool need_dx = input->requires_grad;
        const bool need_dw = kernel->requires_grad;
        if (need_dx) input->ensure_grad();
        if (need_dw) kernel->ensure_grad();
        std::vector<Real> col(static_cast<std::size_t>(d.ck) * ohw);
        std::vector<Real> dcol(need_dx ? col.size() : 0);
        for (int n = 0; n < in.n; ++n) {
            const Real* dy = out->grad.data() + out->shape.index(n, 0, 0, 0);
            if (need_dw) {
                im2col(input->data.data() + in.index(n, 0, 0, 0), in, ks, stride, padding, d, col.data());
                gemm_nt(dy, col.data(), kernel->grad.data(), ks.n, ohw, d.ck);
            }
            if (need_dx) {
                std::fill(dcol.begin(), dcol.end(), Real(0));
                gemm_tn(kernel->data.data(), dy, dcol.data(), d.ck, ks.n, ohw);
                col2im_add(dcol.data(), in, ks, stride, padding, d,
                           input->grad.data() + in.index(n, 0, 0, 0));
            }
        }
        if (bias && bias->requires_grad) {
            bias->ensure_grad();
            for (int n = 0; n < in.n; ++n) {
                const Real* dy = out->grad.data() + out->shape.index(n, 0, 0, 0);
                for (int co = 0; co < ks.n; ++co) {
                    double acc = 0.0;
                    const Real* dyc = dy + static_cast<std::int64_t>(co) * ohw;
                    for (int i = 0; i < ohw; ++i) acc += dyc[i];
                    bias->grad[static_cast<std::size_t>(co)] += static_cast<Real>(acc);
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

namespace {

template <class Real>
TensorPtr<Real> pool2d_rect(const TensorPtr<Real>& input, PoolMode mode, int wh, int ww,
                            int sh, int sw) {
    const Shape in = input->shape;
    if (wh < 1 || ww < 1 || sh < 1 || sw < 1) throw ShapeError("pool2d: window and stride must be >= 1");
    if (wh > in.h || ww > in.w)
        throw ShapeError("pool2d: window " + std::to_string(wh) + "x" + std::to_string(ww) +
                         " larger than input " + in.str());
    const int oh = (in.h - wh) / sh + 1;
    const int ow = (in.w - ww) / sw + 1;
    auto out = make_tensor<Real>({in.n, in.c, oh, ow}, wants_grad(input));

    // max mode records argmax flat offsets for the backward pass
    auto argmax = std::make_shared<std::vector<std::int64_t>>();
    if (mode == PoolMode::Max) argmax->resize(static_cast<std::size_t>(out->numel()));

    for (int n = 0; n < in.n; ++n) {
        for (int c = 0; c < in.c; ++c) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const int y0 = oy * sh, x0 = ox * sw;
                    if (mode == PoolMode::Avg) {
                        double acc = 0.0;
                        for (int dy = 0; dy < wh; ++dy)
                            for (int dx = 0; dx < ww; ++dx)
                                acc += input->at(n, c, y0 + dy, x0 + dx);
                        out->at(n, c, oy, ox) = static_cast<Real>(acc / (static_cast<double>(wh) * ww));
                    } else {
                        Real best = input->at(n, c, y0, x0);
                        std::int64_t best_idx = in.index(n, c, y0, x0);
                        for (int dy = 0; dy < wh; ++dy) {
                            for (int dx = 0; dx < ww; ++dx) {
                                const Real v = input->at(n, c, y0 + dy, x0 + dx);
                                if (v > best) { // strict: first-found wins ties
                                    best = v;
                                    best_idx = in.index(n, c, y0 + dy, x0 + dx);
                                }
                            }
                        }
                        out->at(n, c, oy, ox) = best;
                        (*argmax)[static_cast<std::size_t>(out->shape.index(n, c, oy, ox))] = best_idx;
                    }
                }
            }
        }
    }
    check_finite(*out, "pool2d");

    record_if_needed<Real>(out, [input, out, mode, wh, ww, sh, sw, argmax]() {
        if (out->grad.empty() || !input->requires_grad) return;
        input->ensure_grad();
        const Shape in = input->shape;
        const Shape os = out->shape;
        if (mode == PoolMode::Max) {
            for (std::int64_t i = 0; i < out->numel(); ++i)
                input->grad[static_cast<std::size_t>((*argmax)[static_cast<std::size_t>(i)])] +=
                    out->grad[static_cast<std::size_t>(i)];
        } else {
            const Real inv = Real(1) / (static_cast<Real>(wh) * static_cast<Real>(ww));
            for (int n = 0; n < os.n; ++n)
                for (int c = 0; c < os.c; ++c)
                    for (int oy = 0; oy < os.h; ++oy)
                        for (int ox = 0; ox < os.w; ++ox) {
                            const Real g = out->grad[static_cast<std::size_t>(os.index(n, c, oy, ox))] * inv;
                            for (int dy = 0; dy < wh; ++dy)
                                for (int dx = 0; dx < ww; ++dx)
                                    input->grad[static_cast<std::size_t>(
                                        in.index(n, c, oy * sh + dy, ox * sw + dx))] += g;
                        }
        }
    });
    return out;
}

} // namespace

template <class Real>
TensorPtr<Real> pool2d(const TensorPtr<Real>& input, PoolMode mode, int window, int stride) {
    return pool2d_rect(input, mode, window, window, stride, stride);
}

template <class Real>
TensorPtr<Real> global_pool2d(const TensorPtr<Real>& input, PoolMode mode) {
    return pool2d_rect(input, mode, input->shape.h, input->shape.w, input->shape.h, input->shape.w);
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> dense(const TensorPtr<Real>& input, const TensorPtr<Real>& weight,
                      const TensorPtr<Real>& bias) {
    const Shape in = input->shape;
    const Shape ws = weight->shape;
    if (ws.n != 1 || ws.c != 1)
        throw ShapeError("dense: weight must be [1,1,Din,Dout], got " + ws.str());
    if (ws.h != in.w)
        throw ShapeError("dense: inner dimensions disagree, input " + in.str() + " vs weight " + ws.str());
    const int din = ws.h, dout = ws.w;
    if (bias && (bias->shape.w != dout || bias->shape.numel() != dout))
        throw ShapeError("dense: bias shape " + bias->shape.str() + " does not match Dout=" + std::to_string(dout));

    const int rows = in.n * in.c * in.h;
    auto out = make_tensor<Real>({in.n, in.c, in.h, dout},
                                 wants_grad(input) || wants_grad(weight) || wants_grad(bias));
    gemm_nn(input->data.data(), weight->data.data(), out->data.data(), rows, din, dout);
    if (bias) {
        for (int r = 0; r < rows; ++r) {
            Real* y = out->data.data() + static_cast<std::int64_t>(r) * dout;
            for (int j = 0; j < dout; ++j) y[j] += bias->data[static_cast<std::size_t>(j)];
        }
    }
    check_finite(*out, "dense");

    record_if_needed<Real>(out, [input, weight, bias, out, rows, din, dout]() {
        if (out->grad.empty()) return;
        if (input->requires_grad) {
            input->ensure_grad();
            gemm_nt(out->grad.data(), weight->data.data(), input->grad.data(), rows, dout, din);
        }
        if (weight->requires_grad) {
            weight->ensure_grad();
            gemm_tn(input->data.data(), out->grad.data(), weight->grad.data(), din, rows, dout);
        }
        if (bias && bias->requires_grad) {
            bias->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const Real* dy = out->grad.data() + static_cast<std::int64_t>(r) * dout;
                for (int j = 0; j < dout; ++j) bias->grad[static_cast<std::size_t>(j)] += dy[j];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> relu(const TensorPtr<Real>& input) {
    auto out = make_tensor<Real>(input->shape, wants_grad(input));
    for (std::size_t i = 0; i < input->data.size(); ++i)
        out->data[i] = input->data[i] > Real(0) ? input->data[i] : Real(0);
    check_finite(*out, "relu");
    record_if_needed<Real>(out, [input, out]() {
        if (out->grad.empty() || !input->requires_grad) return;
        input->ensure_grad();
        for (std::size_t i = 0; i < input->data.size(); ++i)
            if (input->data[i] > Real(0)) input->grad[i] += out->grad[i];
    });
    return out;
}

template <class Real>
TensorPtr<Real> sigmoid(const TensorPtr<Real>& input) {
    auto out = make_tensor<Real>(input->shape, wants_grad(input));
    for (std::size_t i = 0; i < input->data.size(); ++i) {
        const Real x = input->data[i];
        out->data[i] = x >= Real(0) ? Real(1) / (Real(1) + std::exp(-x))
                                    : std::exp(x) / (Real(1) + std::exp(x));
    }
    check_finite(*out, "sigmoid");
    record_if_needed<Real>(out, [input, out]() {
        if (out->grad.empty() || !input->requires_grad) return;
        input->ensure_grad();
        for (std::size_t i = 0; i < input->data.size(); ++i) {
            const Real y = out->data[i];
            input->grad[i] += out->grad[i] * y * (Real(1) - y);
        }
    });
    return out;
}

template <class Real>
TensorPtr<Real> softmax(const TensorPtr<Real>& input, SoftmaxAxis axis) {
    auto out = make_tensor<Real>(input->shape, wants_grad(input));
    for_each_line(input->shape, axis, [&](std::int64_t base, int len, std::int64_t stride) {
        Real mx = input->data[static_cast<std::size_t>(base)];
        for (int i = 1; i < len; ++i)
            mx = std::max(mx, input->data[static_cast<std::size_t>(base + i * stride)]);
        double sum = 0.0;
        for (int i = 0; i < len; ++i) {
            const Real e = std::exp(input->data[static_cast<std::size_t>(base + i * stride)] - mx);
            out->data[static_cast<std::size_t>(base + i * stride)] = e;
            sum += e;
        }
        const Real inv = static_cast<Real>(1.0 / sum);
        for (int i = 0; i < len; ++i) out->data[static_cast<std::size_t>(base + i * stride)] *= inv;
    });
    check_finite(*out, "softmax");
    record_if_needed<Real>(out, [input, out, axis]() {
        if (out->grad.empty() || !input->requires_grad) return;
        input->ensure_grad();
        for_each_line(input->shape, axis, [&](std::int64_t base, int len, std::int64_t stride) {
            double dot = 0.0;
            for (int i = 0; i < len; ++i) {
                const auto k = static_cast<std::size_t>(base + i * stride);
                dot += static_cast<double>(out->grad[k]) * out->data[k];
            }
            for (int i = 0; i < len; ++i) {
                const auto k = static_cast<std::size_t>(base + i * stride);
                input->grad[k] += out->data[k] * (out->grad[k] - static_cast<Real>(dot));
            }
        });
    });
    return out;
}

// ---------------------------------------------------------------------------
// resample
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> resample(const TensorPtr<Real>& input, int target_h, int target_w, ResampleMode mode) {
    const Shape in = input->shape;
    if (target_h < 1 || target_w < 1)
        throw ShapeError("resample: target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                         " must be >= 1x1");
    auto out = make_tensor<Real>({in.n, in.c, target_h, target_w}, wants_grad(input));
    const double sy = static_cast<double>(in.h) / target_h;
    const double sx = static_cast<double>(in.w) / target_w;
    const std::int64_t plane = static_cast<std::int64_t>(in.h) * in.w;
    const std::int64_t oplane = static_cast<std::int64_t>(target_h) * target_w;
    const int planes = in.n * in.c;

    if (mode == ResampleMode::Nearest) {
        auto src_index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(oplane));
        for (int oy = 0; oy < target_h; ++oy) {
            const int iy = std::clamp(static_cast<int>(std::floor((oy + 0.5) * sy)), 0, in.h - 1);
            for (int ox = 0; ox < target_w; ++ox) {
                const int ix = std::clamp(static_cast<int>(std::floor((ox + 0.5) * sx)), 0, in.w - 1);
                (*src_index)[static_cast<std::size_t>(oy) * target_w + ox] =
                    static_cast<std::int64_t>(iy) * in.w + ix;
            }
        }
        for (int p = 0; p < planes; ++p) {
            const Real* src = input->data.data() + p * plane;
            Real* dst = out->data.data() + p * oplane;
            for (std::int64_t i = 0; i < oplane; ++i) dst[i] = src[(*src_index)[static_cast<std::size_t>(i)]];
        }
        record_if_needed<Real>(out, [input, out, src_index, plane, oplane, planes]() {
            if (out->grad.empty() || !input->requires_grad) return;
            input->ensure_grad();
            for (int p = 0; p < planes; ++p) {
                const Real* dy = out->grad.data() + p * oplane;
                Real* dx = input->grad.data() + p * plane;
                for (std::int64_t i = 0; i < oplane; ++i)
                    dx[(*src_index)[static_cast<std::size_t>(i)]] += dy[i];
            }
        });
        return out;
    }

    // bilinear, align-corners=false: src = (dst + 0.5) * scale - 0.5
    struct Tap {
        int i0, i1;
        Real w1; // weight of i1; i0 gets (1-w1)
    };
    auto ytap = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(target_h));
    auto xtap = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(target_w));
    auto make_tap = [](int o, double scale, int limit) {
        const double s = (o + 0.5) * scale - 0.5;
        const int i0 = static_cast<int>(std::floor(s));
        Tap t;
        t.w1 = static_cast<Real>(s - i0);
        t.i0 = std::clamp(i0, 0, limit - 1);
        t.i1 = std::clamp(i0 + 1, 0, limit - 1);
        return t;
    };
    for (int oy = 0; oy < target_h; ++oy) (*ytap)[static_cast<std::size_t>(oy)] = make_tap(oy, sy, in.h);
    for (int ox = 0; ox < target_w; ++ox) (*xtap)[static_cast<std::size_t>(ox)] = make_tap(ox, sx, in.w);

    for (int p = 0; p < planes; ++p) {
        const Real* src = input->data.data() + p * plane;
        Real* dst = out->data.data() + p * oplane;
        for (int oy = 0; oy < target_h; ++oy) {
            const Tap& ty = (*ytap)[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < target_w; ++ox) {
                const Tap& tx = (*xtap)[static_cast<std::size_t>(ox)];
                const Real v00 = src[static_cast<std::int64_t>(ty.i0) * in.w + tx.i0];
                const Real v01 = src[static_cast<std::int64_t>(ty.i0) * in.w + tx.i1];
                const Real v10 = src[static_cast<std::int64_t>(ty.i1) * in.w + tx.i0];
                const Real v11 = src[static_cast<std::int64_t>(ty.i1) * in.w + tx.i1];
                dst[static_cast<std::int64_t>(oy) * target_w + ox] =
                    (Real(1) - ty.w1) * ((Real(1) - tx.w1) * v00 + tx.w1 * v01) +
                    ty.w1 * ((Real(1) - tx.w1) * v10 + tx.w1 * v11);
            }
        }
    }
    check_finite(*out, "resample");
    record_if_needed<Real>(out, [input, out, ytap, xtap, plane, oplane, planes]() {
        if (out->grad.empty() || !input->requires_grad) return;
        input->ensure_grad();
        const Shape in = input->shape;
        const Shape os = out->shape;
        for (int p = 0; p < planes; ++p) {
            const Real* dy = out->grad.data() + p * oplane;
            Real* dx = input->grad.data() + p * plane;
            for (int oy = 0; oy < os.h; ++oy) {
                const Tap& ty = (*ytap)[static_cast<std::size_t>(oy)];
                for (int ox = 0; ox < os.w; ++ox) {
                    const Tap& tx = (*xtap)[static_cast<std::size_t>(ox)];
                    const Real g = dy[static_cast<std::int64_t>(oy) * os.w + ox];
                    dx[static_cast<std::int64_t>(ty.i0) * in.w + tx.i0] += (Real(1) - ty.w1) * (Real(1) - tx.w1) * g;
                    dx[static_cast<std::int64_t>(ty.i0) * in.w + tx.i1] += (Real(1) - ty.w1) * tx.w1 * g;
                    dx[static_cast<std::int64_t>(ty.i1) * in.w + tx.i0] += ty.w1 * (Real(1) - tx.w1) * g;
                    dx[static_cast<std::int64_t>(ty.i1) * in.w + tx.i1] += ty.w1 * tx.w1 * g;
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// elementwise / layout
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> add(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    if (a->shape != b->shape)
        throw ShapeError("add: shape mismatch " + a->shape.str() + " vs " + b->shape.str());
    auto out = make_tensor<Real>(a->shape, wants_grad(a) || wants_grad(b));
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite(*out, "add");
    record_if_needed<Real>(out, [a, b, out]() {
        if (out->grad.empty()) return;
        if (a->requires_grad) {
            a->ensure_grad();
            add_into(a->grad, out->grad);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            add_into(b->grad, out->grad);
        }
    });
    return out;
}

template <class Real>
TensorPtr<Real> scale(const TensorPtr<Real>& a, Real factor) {
    auto out = make_tensor<Real>(a->shape, wants_grad(a));
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * factor;
    check_finite(*out, "scale");
    record_if_needed<Real>(out, [a, out, factor]() {
        if (out->grad.empty() || !a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i] * factor;
    });
    return out;
}

template <class Real>
TensorPtr<Real> scale_channels(const TensorPtr<Real>& x, const TensorPtr<Real>& gate) {
    const Shape in = x->shape;
    if (gate->shape.n != in.n || gate->shape.c != in.c || gate->shape.h != 1 || gate->shape.w != 1)
        throw ShapeError("scale_channels: gate " + gate->shape.str() + " does not match input " + in.str());
    auto out = make_tensor<Real>(in, wants_grad(x) || wants_grad(gate));
    const std::int64_t plane = static_cast<std::int64_t>(in.h) * in.w;
    for (int n = 0; n < in.n; ++n)
        for (int c = 0; c < in.c; ++c) {
            const Real g = gate->at(n, c, 0, 0);
            const Real* src = x->data.data() + in.index(n, c, 0, 0);
            Real* dst = out->data.data() + in.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i] * g;
        }
    check_finite(*out, "scale_channels");
    record_if_needed<Real>(out, [x, gate, out]() {
        if (out->grad.empty()) return;
        const Shape in = x->shape;
        const std::int64_t plane = static_cast<std::int64_t>(in.h) * in.w;
        if (x->requires_grad) x->ensure_grad();
        if (gate->requires_grad) gate->ensure_grad();
        for (int n = 0; n < in.n; ++n)
            for (int c = 0; c < in.c; ++c) {
                const std::int64_t base = in.index(n, c, 0, 0);
                const Real g = gate->at(n, c, 0, 0);
                if (x->requires_grad)
                    for (std::int64_t i = 0; i < plane; ++i)
                        x->grad[static_cast<std::size_t>(base + i)] +=
                            out->grad[static_cast<std::size_t>(base + i)] * g;
                if (gate->requires_grad) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < plane; ++i)
                        acc += static_cast<double>(out->grad[static_cast<std::size_t>(base + i)]) *
                               x->data[static_cast<std::size_t>(base + i)];
                    gate->grad[static_cast<std::size_t>(gate->shape.index(n, c, 0, 0))] += static_cast<Real>(acc);
                }
            }
    });
    return out;
}

template <class Real>
TensorPtr<Real> concat_channels(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    const Shape as = a->shape, bs = b->shape;
    if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
        throw ShapeError("concat_channels: " + as.str() + " vs " + bs.str());
    auto out = make_tensor<Real>({as.n, as.c + bs.c, as.h, as.w}, wants_grad(a) || wants_grad(b));
    const std::int64_t plane = static_cast<std::int64_t>(as.h) * as.w;
    for (int n = 0; n < as.n; ++n) {
        std::copy_n(a->data.data() + as.index(n, 0, 0, 0), as.c * plane,
                    out->data.data() + out->shape.index(n, 0, 0, 0));
        std::copy_n(b->data.data() + bs.index(n, 0, 0, 0), bs.c * plane,
                    out->data.data() + out->shape.index(n, as.c, 0, 0));
    }
    record_if_needed<Real>(out, [a, b, out, plane]() {
        if (out->grad.empty()) return;
        const Shape as = a->shape, bs = b->shape;
        if (a->requires_grad) a->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        for (int n = 0; n < as.n; ++n) {
            if (a->requires_grad) {
                const Real* src = out->grad.data() + out->shape.index(n, 0, 0, 0);
                Real* dst = a->grad.data() + as.index(n, 0, 0, 0);
                for (std::int64_t i = 0; i < as.c * plane; ++i) dst[i] += src[i];
            }
            if (b->requires_grad) {
                const Real* src = out->grad.data() + out->shape.index(n, as.c, 0, 0);
                Real* dst = b->grad.data() + bs.index(n, 0, 0, 0);
                for (std::int64_t i = 0; i < bs.c * plane; ++i) dst[i] += src[i];
            }
        }
    });
    return out;
}

template <class Real>
TensorPtr<Real> reshape(const TensorPtr<Real>& x, Shape target) {
    if (target.numel() != x->numel())
        throw ShapeError("reshape: " + x->shape.str() + " -> " + target.str() + " changes element count");
    auto out = make_tensor<Real>(target, wants_grad(x));
    out->data = x->data;
    record_if_needed<Real>(out, [x, out]() {
        if (out->grad.empty() || !x->requires_grad) return;
        x->ensure_grad();
        add_into(x->grad, out->grad);
    });
    return out;
}

namespace {

// generic gather permutation: out[i] = x[map[i]]
template <class Real>
TensorPtr<Real> permute_gather(const TensorPtr<Real>& x, Shape target,
                               std::shared_ptr<std::vector<std::int64_t>> map, const char* op) {
    auto out = make_tensor<Real>(target, wants_grad(x));
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = x->data[static_cast<std::size_t>((*map)[i])];
    record_if_needed<Real>(out, [x, out, map]() {
        if (out->grad.empty() || !x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < out->data.size(); ++i)
            x->grad[static_cast<std::size_t>((*map)[i])] += out->grad[i];
    });
    (void)op;
    return out;
}

} // namespace

template <class Real>
TensorPtr<Real> nchw_to_tokens(const TensorPtr<Real>& x) {
    const Shape in = x->shape;
    const int t = in.h * in.w;
    Shape target{in.n, 1, t, in.c};
    auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(in.numel()));
    std::size_t i = 0;
    for (int n = 0; n < in.n; ++n)
        for (int tok = 0; tok < t; ++tok)
            for (int c = 0; c < in.c; ++c)
                (*map)[i++] = in.index(n, c, tok / in.w, tok % in.w);
    return permute_gather(x, target, std::move(map), "nchw_to_tokens");
}

template <class Real>
TensorPtr<Real> tokens_to_nchw(const TensorPtr<Real>& x, int h, int w) {
    const Shape in = x->shape; // [N,1,T,C]
    if (in.c != 1 || in.h != h * w)
        throw ShapeError("tokens_to_nchw: input " + in.str() + " does not hold " + std::to_string(h * w) +
                         " tokens");
    Shape target{in.n, in.w, h, w};
    auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(in.numel()));
    std::size_t i = 0;
    for (int n = 0; n < in.n; ++n)
        for (int c = 0; c < in.w; ++c)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    (*map)[i++] = in.index(n, 0, y * w + xx, c);
    return permute_gather(x, target, std::move(map), "tokens_to_nchw");
}

template <class Real>
TensorPtr<Real> split_heads(const TensorPtr<Real>& x, int heads) {
    const Shape in = x->shape; // [N,1,T,heads*d]
    if (in.c != 1 || in.w % heads != 0)
        throw ShapeError("split_heads: input " + in.str() + " not divisible into " + std::to_string(heads) +
                         " heads");
    const int d = in.w / heads;
    Shape target{in.n, heads, in.h, d};
    auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(in.numel()));
    std::size_t i = 0;
    for (int n = 0; n < in.n; ++n)
        for (int hd = 0; hd < heads; ++hd)
            for (int tok = 0; tok < in.h; ++tok)
                for (int m = 0; m < d; ++m)
                    (*map)[i++] = in.index(n, 0, tok, hd * d + m);
    return permute_gather(x, target, std::move(map), "split_heads");
}

template <class Real>
TensorPtr<Real> merge_heads(const TensorPtr<Real>& x) {
    const Shape in = x->shape; // [N,heads,T,d]
    Shape target{in.n, 1, in.h, in.c * in.w};
    auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(in.numel()));
    std::size_t i = 0;
    for (int n = 0; n < in.n; ++n)
        for (int tok = 0; tok < in.h; ++tok)
            for (int hd = 0; hd < in.c; ++hd)
                for (int m = 0; m < in.w; ++m)
                    (*map)[i++] = in.index(n, hd, tok, m);
    return permute_gather(x, target, std::move(map), "merge_heads");
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> matmul(const TensorPtr<Real>& a, const TensorPtr<Real>& b, bool transpose_b) {
    const Shape as = a->shape, bs = b->shape;
    const bool broadcast = (bs.n == 1 && bs.c == 1);
    if (!broadcast && (bs.n != as.n || bs.c != as.c))
        throw ShapeError("matmul: batch dims disagree, " + as.str() + " vs " + bs.str());
    const int M = as.h, K = as.w;
    const int bk = transpose_b ? bs.w : bs.h;
    const int N = transpose_b ? bs.h : bs.w;
    if (bk != K)
        throw ShapeError("matmul: inner dimensions disagree, " + as.str() + " vs " + bs.str() +
                         (transpose_b ? " (b transposed)" : ""));
    auto out = make_tensor<Real>({as.n, as.c, M, N}, wants_grad(a) || wants_grad(b));
    const std::int64_t a_sl = static_cast<std::int64_t>(M) * K;
    const std::int64_t b_sl = static_cast<std::int64_t>(bs.h) * bs.w;
    const std::int64_t o_sl = static_cast<std::int64_t>(M) * N;
    const int batches = as.n * as.c;
    for (int s = 0; s < batches; ++s) {
        const Real* pa = a->data.data() + s * a_sl;
        const Real* pb = b->data.data() + (broadcast ? 0 : s * b_sl);
        Real* po = out->data.data() + s * o_sl;
        if (transpose_b)
            gemm_nt(pa, pb, po, M, K, N);
        else
            gemm_nn(pa, pb, po, M, K, N);
    }
    check_finite(*out, "matmul");

    record_if_needed<Real>(out, [a, b, out, transpose_b, broadcast, M, K, N, a_sl, b_sl, o_sl, batches]() {
        if (out->grad.empty()) return;
        if (a->requires_grad) a->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        for (int s = 0; s < batches; ++s) {
            const Real* pa = a->data.data() + s * a_sl;
            const Real* pb = b->data.data() + (broadcast ? 0 : s * b_sl);
            const Real* dy = out->grad.data() + s * o_sl;
            if (a->requires_grad) {
                Real* da = a->grad.data() + s * a_sl;
                if (transpose_b)
                    gemm_nn(dy, pb, da, M, N, K); // dA = dY * B
                else
                    gemm_nt(dy, pb, da, M, N, K); // dA = dY * B^T
            }
            if (b->requires_grad) {
                Real* db = b->grad.data() + (broadcast ? 0 : s * b_sl);
                if (transpose_b)
                    gemm_tn(dy, pa, db, N, M, K); // dB = dY^T * A
                else
                    gemm_tn(pa, dy, db, K, M, N); // dB = A^T * dY
            }
        }
    });
    return out;
}

template <class Real>
TensorPtr<Real> reduce_sum(const TensorPtr<Real>& x) {
    auto out = make_tensor<Real>({1, 1, 1, 1}, wants_grad(x));
    double acc = 0.0;
    for (const Real v : x->data) acc += v;
    out->data[0] = static_cast<Real>(acc);
    check_finite(*out, "reduce_sum");
    record_if_needed<Real>(out, [x, out]() {
        if (out->grad.empty() || !x->requires_grad) return;
        x->ensure_grad();
        const Real g = out->grad[0];
        for (auto& v : x->grad) v += g;
    });
    return out;
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> batchnorm2d(const TensorPtr<Real>& x, const TensorPtr<Real>& gamma,
                            const TensorPtr<Real>& beta, const TensorPtr<Real>& running_mean,
                            const TensorPtr<Real>& running_var, bool training,
                            Real momentum, Real eps, bool update_running) {
    const Shape in = x->shape;
    if (gamma->shape.c != in.c || beta->shape.c != in.c || running_mean->shape.c != in.c ||
        running_var->shape.c != in.c)
        throw ShapeError("batchnorm2d: parameter channels do not match input " + in.str());
    const std::int64_t plane = static_cast<std::int64_t>(in.h) * in.w;
    const std::int64_t m = static_cast<std::int64_t>(in.n) * plane;

    auto out = make_tensor<Real>(in, wants_grad(x) || wants_grad(gamma) || wants_grad(beta));
    auto xhat = std::make_shared<std::vector<Real>>(x->data.size());
    auto inv_std = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(in.c));

    for (int c = 0; c < in.c; ++c) {
        Real mean, var;
        if (training) {
            double s = 0.0;
            for (int n = 0; n < in.n; ++n) {
                const Real* p = x->data.data() + in.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) s += p[i];
            }
            mean = static_cast<Real>(s / static_cast<double>(m));
            double v = 0.0;
            for (int n = 0; n < in.n; ++n) {
                const Real* p = x->data.data() + in.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double d = static_cast<double>(p[i]) - mean;
                    v += d * d;
                }
            }
            var = static_cast<Real>(v / static_cast<double>(m));
            if (update_running) {
                auto& rm = running_mean->data[static_cast<std::size_t>(c)];
                auto& rv = running_var->data[static_cast<std::size_t>(c)];
                rm = (Real(1) - momentum) * rm + momentum * mean;
                rv = (Real(1) - momentum) * rv + momentum * var;
            }
        } else {
            mean = running_mean->data[static_cast<std::size_t>(c)];
            var = running_var->data[static_cast<std::size_t>(c)];
        }
        const Real inv = Real(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(c)] = inv;
        const Real g = gamma->data[static_cast<std::size_t>(c)];
        const Real b = beta->data[static_cast<std::size_t>(c)];
        for (int n = 0; n < in.n; ++n) {
            const std::int64_t base = in.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) {
                const Real xh = (x->data[static_cast<std::size_t>(base + i)] - mean) * inv;
                (*xhat)[static_cast<std::size_t>(base + i)] = xh;
                out->data[static_cast<std::size_t>(base + i)] = g * xh + b;
            }
        }
    }
    check_finite(*out, "batchnorm2d");

    record_if_needed<Real>(out, [x, gamma, beta, out, xhat, inv_std, training, m, plane]() {
        if (out->grad.empty()) return;
        const Shape in = x->shape;
        if (x->requires_grad) x->ensure_grad();
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        for (int c = 0; c < in.c; ++c) {
            double sum_dy = 0.0, sum_dy_xh = 0.0;
            for (int n = 0; n < in.n; ++n) {
                const std::int64_t base = in.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) {
                    const auto k = static_cast<std::size_t>(base + i);
                    sum_dy += out->grad[k];
                    sum_dy_xh += static_cast<double>(out->grad[k]) * (*xhat)[k];
                }
            }
            if (gamma->requires_grad)
                gamma->grad[static_cast<std::size_t>(c)] += static_cast<Real>(sum_dy_xh);
            if (beta->requires_grad) beta->grad[static_cast<std::size_t>(c)] += static_cast<Real>(sum_dy);
            if (!x->requires_grad) continue;
            const Real g = gamma->data[static_cast<std::size_t>(c)];
            const Real inv = (*inv_std)[static_cast<std::size_t>(c)];
            if (training) {
                const Real mean_dy = static_cast<Real>(sum_dy / static_cast<double>(m));
                const Real mean_dy_xh = static_cast<Real>(sum_dy_xh / static_cast<double>(m));
                for (int n = 0; n < in.n; ++n) {
                    const std::int64_t base = in.index(n, c, 0, 0);
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const auto k = static_cast<std::size_t>(base + i);
                        x->grad[k] += g * inv * (out->grad[k] - mean_dy - (*xhat)[k] * mean_dy_xh);
                    }
                }
            } else {
                for (int n = 0; n < in.n; ++n) {
                    const std::int64_t base = in.index(n, c, 0, 0);
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const auto k = static_cast<std::size_t>(base + i);
                        x->grad[k] += g * inv * out->grad[k];
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// relative-position scores
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> rel_pos_scores(const TensorPtr<Real>& q, const TensorPtr<Real>& rel_h,
                               const TensorPtr<Real>& rel_w, int grid) {
    const Shape qs = q->shape; // [N,heads,T,dk]
    const int t = grid * grid;
    const int dk = qs.w;
    if (qs.h != t)
        throw ShapeError("rel_pos_scores: q " + qs.str() + " does not hold " + std::to_string(t) + " tokens");
    const int table = 2 * grid - 1;
    if (rel_h->shape.h != table || rel_h->shape.w != dk || rel_w->shape.h != table || rel_w->shape.w != dk)
        throw ShapeError("rel_pos_scores: offset tables " + rel_h->shape.str() + "/" + rel_w->shape.str() +
                         " do not match grid " + std::to_string(grid) + ", dk " + std::to_string(dk));

    // rsum[(dy+S-1)*table + (dx+S-1)] = rel_h[dy] + rel_w[dx]
    auto rsum = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(table) * table * dk);
    for (int a = 0; a < table; ++a)
        for (int b = 0; b < table; ++b) {
            Real* dst = rsum->data() + (static_cast<std::int64_t>(a) * table + b) * dk;
            const Real* rh = rel_h->data.data() + static_cast<std::int64_t>(a) * dk;
            const Real* rw = rel_w->data.data() + static_cast<std::int64_t>(b) * dk;
            for (int mth = 0; mth < dk; ++mth) dst[mth] = rh[mth] + rw[mth];
        }

    auto out = make_tensor<Real>({qs.n, qs.c, t, t}, wants_grad(q));
    for (int n = 0; n < qs.n; ++n)
        for (int hd = 0; hd < qs.c; ++hd)
            for (int i = 0; i < t; ++i) {
                const Real* qi = q->data.data() + qs.index(n, hd, i, 0);
                Real* row = out->data.data() + out->shape.index(n, hd, i, 0);
                const int yi = i / grid, xi = i % grid;
                for (int j = 0; j < t; ++j) {
                    const int dy = (j / grid) - yi + grid - 1;
                    const int dx = (j % grid) - xi + grid - 1;
                    const Real* r = rsum->data() + (static_cast<std::int64_t>(dy) * table + dx) * dk;
                    Real acc = Real(0);
                    for (int mth = 0; mth < dk; ++mth) acc += qi[mth] * r[mth];
                    row[j] = acc;
                }
            }
    check_finite(*out, "rel_pos_scores");

    record_if_needed<Real>(out, [q, out, rsum, grid]() {
        if (out->grad.empty() || !q->requires_grad) return;
        q->ensure_grad();
        const Shape qs = q->shape;
        const int t = grid * grid, dk = qs.w, table = 2 * grid - 1;
        for (int n = 0; n < qs.n; ++n)
            for (int hd = 0; hd < qs.c; ++hd)
                for (int i = 0; i < t; ++i) {
                    Real* dq = q->grad.data() + qs.index(n, hd, i, 0);
                    const Real* drow = out->grad.data() + out->shape.index(n, hd, i, 0);
                    const int yi = i / grid, xi = i % grid;
                    for (int j = 0; j < t; ++j) {
                        const Real g = drow[j];
                        if (g == Real(0)) continue;
                        const int dy = (j / grid) - yi + grid - 1;
                        const int dx = (j % grid) - xi + grid - 1;
                        const Real* r = rsum->data() + (static_cast<std::int64_t>(dy) * table + dx) * dk;
                        for (int mth = 0; mth < dk; ++mth) dq[mth] += g * r[mth];
                    }
                }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Dice loss
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> dice_loss_with_logits(const TensorPtr<Real>& logits, const TensorPtr<Real>& target,
                                      Real smooth) {
    const Shape in = logits->shape;
    if (target->shape != in)
        throw ShapeError("dice_loss: logits " + in.str() + " vs target " + target->shape.str());

    auto probs = std::make_shared<std::vector<Real>>(logits->data.size());
    for (std::size_t i = 0; i < logits->data.size(); ++i) {
        const Real x = logits->data[i];
        (*probs)[i] = x >= Real(0) ? Real(1) / (Real(1) + std::exp(-x))
                                   : std::exp(x) / (Real(1) + std::exp(x));
    }

    const std::int64_t plane = static_cast<std::int64_t>(in.h) * in.w;
    auto inter = std::make_shared<std::vector<double>>(static_cast<std::size_t>(in.c)); // 2*sum(p g)+s
    auto denom = std::make_shared<std::vector<double>>(static_cast<std::size_t>(in.c)); // sum p+sum g+s
    double loss = 0.0;
    for (int c = 0; c < in.c; ++c) {
        double spg = 0.0, sp = 0.0, sg = 0.0;
        for (int n = 0; n < in.n; ++n) {
            const std::int64_t base = in.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) {
                const auto k = static_cast<std::size_t>(base + i);
                const double p = (*probs)[k];
                const double g = target->data[k];
                spg += p * g;
                sp += p;
                sg += g;
            }
        }
        (*inter)[static_cast<std::size_t>(c)] = 2.0 * spg + smooth;
        (*denom)[static_cast<std::size_t>(c)] = sp + sg + smooth;
        loss += 1.0 - (*inter)[static_cast<std::size_t>(c)] / (*denom)[static_cast<std::size_t>(c)];
    }
    auto out = make_tensor<Real>({1, 1, 1, 1}, wants_grad(logits));
    out->data[0] = static_cast<Real>(loss / in.c);
    check_finite(*out, "dice_loss");

    record_if_needed<Real>(out, [logits, target, out, probs, inter, denom]() {
        if (out->grad.empty() || !logits->requires_grad) return;
        logits->ensure_grad();
        const Shape in = logits->shape;
        const std::int64_t plane = static_cast<std::int64_t>(in.h) * in.w;
        const Real g0 = out->grad[0];
        for (int c = 0; c < in.c; ++c) {
            const double num = (*inter)[static_cast<std::size_t>(c)];
            const double den = (*denom)[static_cast<std::size_t>(c)];
            for (int n = 0; n < in.n; ++n) {
                const std::int64_t base = in.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) {
                    const auto k = static_cast<std::size_t>(base + i);
                    const double p = (*probs)[k];
                    const double g = target->data[k];
                    // d/dp of (1 - num/den), then through the sigmoid
                    const double dldp = -(2.0 * g * den - num) / (den * den) / in.c;
                    logits->grad[k] += g0 * static_cast<Real>(dldp * p * (1.0 - p));
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define HBA_INSTANTIATE_OPS(Real)                                                                      \
    template void check_finite<Real>(const Tensor<Real>&, const char*);                                \
    template TensorPtr<Real> conv2d<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&, int, int,   \
                                          const TensorPtr<Real>&);                                     \
    template TensorPtr<Real> pool2d<Real>(const TensorPtr<Real>&, PoolMode, int, int);                 \
    template TensorPtr<Real> global_pool2d<Real>(const TensorPtr<Real>&, PoolMode);                    \
    template TensorPtr<Real> dense<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&,               \
                                         const TensorPtr<Real>&);                                      \
    template TensorPtr<Real> relu<Real>(const TensorPtr<Real>&);                                       \
    template TensorPtr<Real> sigmoid<Real>(const TensorPtr<Real>&);                                    \
    template TensorPtr<Real> softmax<Real>(const TensorPtr<Real>&, SoftmaxAxis);                       \
    template TensorPtr<Real> resample<Real>(const TensorPtr<Real>&, int, int, ResampleMode);           \
    template TensorPtr<Real> add<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&);                \
    template TensorPtr<Real> scale<Real>(const TensorPtr<Real>&, Real);                                \
    template TensorPtr<Real> scale_channels<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&);     \
    template TensorPtr<Real> concat_channels<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&);    \
    template TensorPtr<Real> reshape<Real>(const TensorPtr<Real>&, Shape);                             \
    template TensorPtr<Real> nchw_to_tokens<Real>(const TensorPtr<Real>&);                             \
    template TensorPtr<Real> tokens_to_nchw<Real>(const TensorPtr<Real>&, int, int);                   \
    template TensorPtr<Real> split_heads<Real>(const TensorPtr<Real>&, int);                           \
    template TensorPtr<Real> merge_heads<Real>(const TensorPtr<Real>&);                                \
    template TensorPtr<Real> matmul<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&, bool);       \
    template TensorPtr<Real> reduce_sum<Real>(const TensorPtr<Real>&);                                 \
    template TensorPtr<Real> batchnorm2d<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&,         \
                                               const TensorPtr<Real>&, const TensorPtr<Real>&,         \
                                               const TensorPtr<Real>&, bool, Real, Real, bool);        \
    template TensorPtr<Real> rel_pos_scores<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&,      \
                                                  const TensorPtr<Real>&, int);                        \
    template TensorPtr<Real> dice_loss_with_logits<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&, \
                                                         Real);

HBA_INSTANTIATE_OPS(float)
HBA_INSTANTIATE_OPS(double)

#undef HBA_INSTANTIATE_OPS

} // namespace hba
