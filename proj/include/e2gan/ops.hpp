#pragma once

#include <algorithm>
#include <cmath>
#include <memory>

#include "e2gan/autograd.hpp"

namespace e2gan {
namespace ops {

using detail::make_op;
using detail::Node;

namespace loops {

// Valid output range for index arithmetic `out*stride + k - pad` landing in
// [0, in). Used by conv gather loops and transpose-conv scatter loops.
inline int64_t range_lo(int64_t pad, int64_t k, int64_t stride) {
    const int64_t num = pad - k;
    return num <= 0 ? 0 : (num + stride - 1) / stride;
}

inline int64_t range_hi(int64_t in, int64_t pad, int64_t k, int64_t stride, int64_t extent) {
    const int64_t num = in - 1 + pad - k;
    if (num < 0) return -1;
    return std::min(extent - 1, num / stride);
}

}  // namespace loops

template <typename T>
Var<T> constant(Tensor<T> value) {
    return Var<T>(std::move(value), false);
}

template <typename T>
Var<T> detach(const Var<T>& v) {
    return Var<T>(v.val(), false);
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "add");
    auto an = a.node(), bn = b.node();
    return make_op<T>(
        {an, bn},
        [&](Node<T>& o) {
            o.value = an->value;
            const T* pb = bn->value.data();
            T* po = o.value.data();
            for (int64_t i = 0; i < o.value.numel(); ++i) po[i] += pb[i];
        },
        [an, bn](Node<T>& o) {
            const T* g = o.grad.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad().data();
                for (int64_t i = 0; i < o.grad.numel(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t i = 0; i < o.grad.numel(); ++i) gb[i] += g[i];
            }
        });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "sub");
    auto an = a.node(), bn = b.node();
    return make_op<T>(
        {an, bn},
        [&](Node<T>& o) {
            o.value = an->value;
            const T* pb = bn->value.data();
            T* po = o.value.data();
            for (int64_t i = 0; i < o.value.numel(); ++i) po[i] -= pb[i];
        },
        [an, bn](Node<T>& o) {
            const T* g = o.grad.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad().data();
                for (int64_t i = 0; i < o.grad.numel(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t i = 0; i < o.grad.numel(); ++i) gb[i] -= g[i];
            }
        });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "mul");
    auto an = a.node(), bn = b.node();
    return make_op<T>(
        {an, bn},
        [&](Node<T>& o) {
            o.value = an->value;
            const T* pb = bn->value.data();
            T* po = o.value.data();
            for (int64_t i = 0; i < o.value.numel(); ++i) po[i] *= pb[i];
        },
        [an, bn](Node<T>& o) {
            const T* g = o.grad.data();
            const T* va = an->value.data();
            const T* vb = bn->value.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad().data();
                for (int64_t i = 0; i < o.grad.numel(); ++i) ga[i] += g[i] * vb[i];
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t i = 0; i < o.grad.numel(); ++i) gb[i] += g[i] * va[i];
            }
        });
}

template <typename T>
Var<T> scale(const Var<T>& a, T k) {
    auto an = a.node();
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            o.value = an->value;
            for (auto& v : o.value.vec()) v *= k;
        },
        [an, k](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            for (int64_t i = 0; i < o.grad.numel(); ++i) ga[i] += k * g[i];
        });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    return scale(a, T(-1));
}

// Adds a per-(batch, channel) scalar to a feature map: x[b,c,h,w] + v[b,c].
template <typename T>
Var<T> add_channel_vec(const Var<T>& x, const Var<T>& v) {
    const auto& xs = x.val().shape();
    if (x.val().rank() != 4 || v.val().rank() != 2 || v.val().dim(0) != xs[0] ||
        v.val().dim(1) != xs[1])
        throw ShapeError("add_channel_vec: feature " + x.val().shape_str() + " vs vec " +
                         v.val().shape_str());
    auto xn = x.node(), vn = v.node();
    const int64_t plane = xs[2] * xs[3];
    return make_op<T>(
        {xn, vn},
        [&](Node<T>& o) {
            o.value = xn->value;
            T* po = o.value.data();
            const T* pv = vn->value.data();
            for (int64_t bc = 0; bc < xs[0] * xs[1]; ++bc)
                for (int64_t i = 0; i < plane; ++i) po[bc * plane + i] += pv[bc];
        },
        [xn, vn, plane](Node<T>& o) {
            const T* g = o.grad.data();
            if (xn->requires_grad) {
                T* gx = xn->ensure_grad().data();
                for (int64_t i = 0; i < o.grad.numel(); ++i) gx[i] += g[i];
            }
            if (vn->requires_grad) {
                T* gv = vn->ensure_grad().data();
                const int64_t groups = vn->value.numel();
                for (int64_t bc = 0; bc < groups; ++bc) {
                    T s = T(0);
                    for (int64_t i = 0; i < plane; ++i) s += g[bc * plane + i];
                    gv[bc] += s;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(const Var<T>& a) {
    auto an = a.node();
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            o.value = an->value;
            for (auto& v : o.value.vec())
                if (v < T(0)) v = T(0);
        },
        [an](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            const T* x = an->value.data();
            for (int64_t i = 0; i < o.grad.numel(); ++i)
                if (x[i] > T(0)) ga[i] += g[i];
        });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
    auto an = a.node();
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            o.value = an->value;
            for (auto& v : o.value.vec())
                if (v < T(0)) v *= slope;
        },
        [an, slope](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            const T* x = an->value.data();
            for (int64_t i = 0; i < o.grad.numel(); ++i)
                ga[i] += g[i] * (x[i] > T(0) ? T(1) : slope);
        });
}

template <typename T>
Var<T> tanh_act(const Var<T>& a) {
    auto an = a.node();
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            o.value = an->value;
            for (auto& v : o.value.vec()) v = std::tanh(v);
        },
        [an](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            const T* y = o.value.data();
            for (int64_t i = 0; i < o.grad.numel(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
        });
}

template <typename T>
inline T sigmoid_scalar(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
inline T softplus_scalar(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// x * sigmoid(x); smooth gate for the feed-forward block.
template <typename T>
Var<T> silu(const Var<T>& a) {
    auto an = a.node();
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            o.value = an->value;
            for (auto& v : o.value.vec()) v = v * sigmoid_scalar(v);
        },
        [an](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            const T* x = an->value.data();
            for (int64_t i = 0; i < o.grad.numel(); ++i) {
                const T s = sigmoid_scalar(x[i]);
                ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
            }
        });
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
    auto an = a.node();
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            o.value = an->value;
            for (auto& v : o.value.vec()) v = softplus_scalar(v);
        },
        [an](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            const T* x = an->value.data();
            for (int64_t i = 0; i < o.grad.numel(); ++i) ga[i] += g[i] * sigmoid_scalar(x[i]);
        });
}

template <typename T>
Var<T> abs_op(const Var<T>& a) {
    auto an = a.node();
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            o.value = an->value;
            for (auto& v : o.value.vec()) v = std::abs(v);
        },
        [an](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            const T* x = an->value.data();
            for (int64_t i = 0; i < o.grad.numel(); ++i)
                ga[i] += g[i] * (x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0)));
        });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    auto an = a.node();
    const int64_t n = an->value.numel();
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            T s = T(0);
            for (const auto& v : an->value.vec()) s += v;
            o.value = Tensor<T>::full({1}, s / static_cast<T>(n));
        },
        [an, n](Node<T>& o) {
            if (!an->requires_grad) return;
            const T g = o.grad[0] / static_cast<T>(n);
            T* ga = an->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int64_t> shape) {
    auto an = a.node();
    return make_op<T>(
        {an},
        [&](Node<T>& o) { o.value = an->value.reshaped(std::move(shape)); },
        [an](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            for (int64_t i = 0; i < o.grad.numel(); ++i) ga[i] += g[i];
        });
}

// [B,C,H,W] -> [B, H*W, C] token view for attention.
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
    const auto& s = x.val().shape();
    if (x.val().rank() != 4) throw ShapeError("to_tokens expects rank-4, got " + x.val().shape_str());
    const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    auto xn = x.node();
    return make_op<T>(
        {xn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, H * W, C});
            const T* px = xn->value.data();
            T* po = o.value.data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < H * W; ++i)
                        po[(b * H * W + i) * C + c] = px[(b * C + c) * H * W + i];
        },
        [xn, B, C, H, W](Node<T>& o) {
            if (!xn->requires_grad) return;
            T* gx = xn->ensure_grad().data();
            const T* g = o.grad.data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < H * W; ++i)
                        gx[(b * C + c) * H * W + i] += g[(b * H * W + i) * C + c];
        });
}

// [B, H*W, C] -> [B,C,H,W].
template <typename T>
Var<T> from_tokens(const Var<T>& x, int64_t H, int64_t W) {
    const auto& s = x.val().shape();
    if (x.val().rank() != 3 || s[1] != H * W)
        throw ShapeError("from_tokens: tokens " + x.val().shape_str());
    const int64_t B = s[0], C = s[2];
    auto xn = x.node();
    return make_op<T>(
        {xn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, C, H, W});
            const T* px = xn->value.data();
            T* po = o.value.data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < H * W; ++i)
                        po[(b * C + c) * H * W + i] = px[(b * H * W + i) * C + c];
        },
        [xn, B, C, H, W](Node<T>& o) {
            if (!xn->requires_grad) return;
            T* gx = xn->ensure_grad().data();
            const T* g = o.grad.data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < H * W; ++i)
                        gx[(b * H * W + i) * C + c] += g[(b * C + c) * H * W + i];
        });
}

// Concatenates token sequences along the row axis: [B,N,C] + [B,M,C].
template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.val().shape();
    const auto& sb = b.val().shape();
    if (a.val().rank() != 3 || b.val().rank() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
        throw ShapeError("concat_rows: " + a.val().shape_str() + " vs " + b.val().shape_str());
    const int64_t B = sa[0], N = sa[1], M = sb[1], C = sa[2];
    auto an = a.node(), bn = b.node();
    return make_op<T>(
        {an, bn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, N + M, C});
            const T* pa = an->value.data();
            const T* pb = bn->value.data();
            T* po = o.value.data();
            for (int64_t bt = 0; bt < B; ++bt) {
                std::copy(pa + bt * N * C, pa + (bt + 1) * N * C, po + bt * (N + M) * C);
                std::copy(pb + bt * M * C, pb + (bt + 1) * M * C, po + bt * (N + M) * C + N * C);
            }
        },
        [an, bn, B, N, M, C](Node<T>& o) {
            const T* g = o.grad.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t i = 0; i < N * C; ++i)
                        ga[bt * N * C + i] += g[bt * (N + M) * C + i];
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t i = 0; i < M * C; ++i)
                        gb[bt * M * C + i] += g[bt * (N + M) * C + N * C + i];
            }
        });
}

// Channel concatenation of two feature maps: [B,C1,H,W] + [B,C2,H,W].
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.val().shape();
    const auto& sb = b.val().shape();
    if (a.val().rank() != 4 || b.val().rank() != 4 || sa[0] != sb[0] || sa[2] != sb[2] ||
        sa[3] != sb[3])
        throw ShapeError("concat_channels: " + a.val().shape_str() + " vs " + b.val().shape_str());
    const int64_t B = sa[0], C1 = sa[1], C2 = sb[1], plane = sa[2] * sa[3];
    auto an = a.node(), bn = b.node();
    return make_op<T>(
        {an, bn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, C1 + C2, sa[2], sa[3]});
            const T* pa = an->value.data();
            const T* pb = bn->value.data();
            T* po = o.value.data();
            for (int64_t bt = 0; bt < B; ++bt) {
                std::copy(pa + bt * C1 * plane, pa + (bt + 1) * C1 * plane,
                          po + bt * (C1 + C2) * plane);
                std::copy(pb + bt * C2 * plane, pb + (bt + 1) * C2 * plane,
                          po + bt * (C1 + C2) * plane + C1 * plane);
            }
        },
        [an, bn, B, C1, C2, plane](Node<T>& o) {
            const T* g = o.grad.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t i = 0; i < C1 * plane; ++i)
                        ga[bt * C1 * plane + i] += g[bt * (C1 + C2) * plane + i];
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t i = 0; i < C2 * plane; ++i)
                        gb[bt * C2 * plane + i] += g[bt * (C1 + C2) * plane + C1 * plane + i];
            }
        });
}

// Slice along the last axis; used to split the gated feed-forward halves.
template <typename T>
Var<T> slice_last(const Var<T>& a, int64_t start, int64_t len) {
    const auto& s = a.val().shape();
    const int64_t L = s.back();
    if (start < 0 || start + len > L)
        throw ShapeError("slice_last out of range on " + a.val().shape_str());
    const int64_t rows = a.val().numel() / L;
    auto an = a.node();
    std::vector<int64_t> out_shape = s;
    out_shape.back() = len;
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            o.value = Tensor<T>(out_shape);
            const T* pa = an->value.data();
            T* po = o.value.data();
            for (int64_t r = 0; r < rows; ++r)
                std::copy(pa + r * L + start, pa + r * L + start + len, po + r * len);
        },
        [an, start, len, L, rows](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < len; ++j) ga[r * L + start + j] += g[r * len + j];
        });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// y = x W^T + b with W stored [out, in]; x may be [N, in] or [B, N, in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& xs = x.val().shape();
    const auto& ws = w.val().shape();
    const int64_t in = ws[1], out = ws[0];
    if (xs.back() != in)
        throw ShapeError("linear: input " + x.val().shape_str() + " vs weight " +
                         w.val().shape_str());
    const int64_t rows = x.val().numel() / in;
    std::vector<int64_t> out_shape = xs;
    out_shape.back() = out;
    auto xn = x.node(), wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    return make_op<T>(
        {xn, wn, bn},
        [&](Node<T>& o) {
            o.value = Tensor<T>(out_shape);
            const T* px = xn->value.data();
            const T* pw = wn->value.data();
            T* po = o.value.data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = px + r * in;
                T* yr = po + r * out;
                for (int64_t oo = 0; oo < out; ++oo) {
                    const T* wr = pw + oo * in;
                    T acc = bn ? bn->value[oo] : T(0);
                    for (int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
                    yr[oo] = acc;
                }
            }
        },
        [xn, wn, bn, rows, in, out](Node<T>& o) {
            const T* g = o.grad.data();
            const T* px = xn->value.data();
            const T* pw = wn->value.data();
            if (xn->requires_grad) {
                T* gx = xn->ensure_grad().data();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t oo = 0; oo < out; ++oo) {
                        const T gv = g[r * out + oo];
                        if (gv == T(0)) continue;
                        const T* wr = pw + oo * in;
                        T* gxr = gx + r * in;
                        for (int64_t i = 0; i < in; ++i) gxr[i] += gv * wr[i];
                    }
            }
            if (wn->requires_grad) {
                T* gw = wn->ensure_grad().data();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t oo = 0; oo < out; ++oo) {
                        const T gv = g[r * out + oo];
                        if (gv == T(0)) continue;
                        const T* xr = px + r * in;
                        T* gwr = gw + oo * in;
                        for (int64_t i = 0; i < in; ++i) gwr[i] += gv * xr[i];
                    }
            }
            if (bn && bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t oo = 0; oo < out; ++oo) gb[oo] += g[r * out + oo];
            }
        });
}

// Batched matmul [B,N,K] x [B,K,M] -> [B,N,M].
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.val().shape();
    const auto& sb = b.val().shape();
    if (a.val().rank() != 3 || b.val().rank() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
        throw ShapeError("bmm: " + a.val().shape_str() + " x " + b.val().shape_str());
    const int64_t B = sa[0], N = sa[1], K = sa[2], M = sb[2];
    auto an = a.node(), bn = b.node();
    return make_op<T>(
        {an, bn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, N, M});
            const T* pa = an->value.data();
            const T* pb = bn->value.data();
            T* po = o.value.data();
            for (int64_t bt = 0; bt < B; ++bt)
                for (int64_t n = 0; n < N; ++n) {
                    T* yr = po + (bt * N + n) * M;
                    for (int64_t k = 0; k < K; ++k) {
                        const T av = pa[(bt * N + n) * K + k];
                        if (av == T(0)) continue;
                        const T* br = pb + (bt * K + k) * M;
                        for (int64_t m = 0; m < M; ++m) yr[m] += av * br[m];
                    }
                }
        },
        [an, bn, B, N, K, M](Node<T>& o) {
            const T* g = o.grad.data();
            const T* pa = an->value.data();
            const T* pb = bn->value.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t k = 0; k < K; ++k) {
                            const T* gr = g + (bt * N + n) * M;
                            const T* br = pb + (bt * K + k) * M;
                            T acc = T(0);
                            for (int64_t m = 0; m < M; ++m) acc += gr[m] * br[m];
                            ga[(bt * N + n) * K + k] += acc;
                        }
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t k = 0; k < K; ++k) {
                            const T av = pa[(bt * N + n) * K + k];
                            if (av == T(0)) continue;
                            const T* gr = g + (bt * N + n) * M;
                            T* gbr = gb + (bt * K + k) * M;
                            for (int64_t m = 0; m < M; ++m) gbr[m] += av * gr[m];
                        }
            }
        });
}

// Batched matmul with transposed rhs: [B,N,K] x [B,M,K] -> [B,N,M].
template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.val().shape();
    const auto& sb = b.val().shape();
    if (a.val().rank() != 3 || b.val().rank() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
        throw ShapeError("bmm_nt: " + a.val().shape_str() + " x " + b.val().shape_str());
    const int64_t B = sa[0], N = sa[1], K = sa[2], M = sb[1];
    auto an = a.node(), bn = b.node();
    return make_op<T>(
        {an, bn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, N, M});
            const T* pa = an->value.data();
            const T* pb = bn->value.data();
            T* po = o.value.data();
            for (int64_t bt = 0; bt < B; ++bt)
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t m = 0; m < M; ++m) {
                        const T* ar = pa + (bt * N + n) * K;
                        const T* br = pb + (bt * M + m) * K;
                        T acc = T(0);
                        for (int64_t k = 0; k < K; ++k) acc += ar[k] * br[k];
                        po[(bt * N + n) * M + m] = acc;
                    }
        },
        [an, bn, B, N, K, M](Node<T>& o) {
            const T* g = o.grad.data();
            const T* pa = an->value.data();
            const T* pb = bn->value.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t m = 0; m < M; ++m) {
                            const T gv = g[(bt * N + n) * M + m];
                            if (gv == T(0)) continue;
                            const T* br = pb + (bt * M + m) * K;
                            T* gar = ga + (bt * N + n) * K;
                            for (int64_t k = 0; k < K; ++k) gar[k] += gv * br[k];
                        }
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t m = 0; m < M; ++m) {
                            const T gv = g[(bt * N + n) * M + m];
                            if (gv == T(0)) continue;
                            const T* ar = pa + (bt * N + n) * K;
                            T* gbr = gb + (bt * M + m) * K;
                            for (int64_t k = 0; k < K; ++k) gbr[k] += gv * ar[k];
                        }
            }
        });
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& a) {
    const int64_t L = a.val().shape().back();
    const int64_t rows = a.val().numel() / L;
    auto an = a.node();
    return make_op<T>(
        {an},
        [&](Node<T>& o) {
            o.value = an->value;
            T* po = o.value.data();
            for (int64_t r = 0; r < rows; ++r) {
                T* row = po + r * L;
                T mx = row[0];
                for (int64_t i = 1; i < L; ++i) mx = std::max(mx, row[i]);
                T z = T(0);
                for (int64_t i = 0; i < L; ++i) {
                    row[i] = std::exp(row[i] - mx);
                    z += row[i];
                }
                for (int64_t i = 0; i < L; ++i) row[i] /= z;
            }
        },
        [an, rows, L](Node<T>& o) {
            if (!an->requires_grad) return;
            T* ga = an->ensure_grad().data();
            const T* g = o.grad.data();
            const T* y = o.value.data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* yr = y + r * L;
                const T* gr = g + r * L;
                T dot = T(0);
                for (int64_t i = 0; i < L; ++i) dot += gr[i] * yr[i];
                T* gar = ga + r * L;
                for (int64_t i = 0; i < L; ++i) gar[i] += yr[i] * (gr[i] - dot);
            }
        });
}

// ---------------------------------------------------------------------------
// Convolutions (weights stored [in, out, kh, kw])
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride, int64_t pad) {
    const auto& xs = x.val().shape();
    const auto& ws = w.val().shape();
    if (x.val().rank() != 4 || w.val().rank() != 4 || xs[1] != ws[0])
        throw ShapeError("conv2d: input " + x.val().shape_str() + " vs weight " +
                         w.val().shape_str());
    const int64_t B = xs[0], I = ws[0], O = ws[1], KH = ws[2], KW = ws[3];
    const int64_t H = xs[2], W = xs[3];
    const int64_t P = (H + 2 * pad - KH) / stride + 1;
    const int64_t Q = (W + 2 * pad - KW) / stride + 1;
    if (P <= 0 || Q <= 0)
        throw ShapeError("conv2d: kernel larger than padded input " + x.val().shape_str());
    auto xn = x.node(), wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    return make_op<T>(
        {xn, wn, bn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, O, P, Q});
            const T* px = xn->value.data();
            const T* pw = wn->value.data();
            T* po = o.value.data();
            if (bn) {
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t oo = 0; oo < O; ++oo) {
                        const T bias = bn->value[oo];
                        T* plane = po + (bt * O + oo) * P * Q;
                        for (int64_t i = 0; i < P * Q; ++i) plane[i] = bias;
                    }
            }
            for (int64_t bt = 0; bt < B; ++bt)
                for (int64_t oo = 0; oo < O; ++oo) {
                    T* yplane = po + (bt * O + oo) * P * Q;
                    for (int64_t i = 0; i < I; ++i) {
                        const T* xplane = px + (bt * I + i) * H * W;
                        const T* wk = pw + (i * O + oo) * KH * KW;
                        for (int64_t u = 0; u < KH; ++u) {
                            const int64_t plo = loops::range_lo(pad, u, stride);
                            const int64_t phi = loops::range_hi(H, pad, u, stride, P);
                            for (int64_t v = 0; v < KW; ++v) {
                                const T wv = wk[u * KW + v];
                                if (wv == T(0)) continue;
                                const int64_t qlo = loops::range_lo(pad, v, stride);
                                const int64_t qhi = loops::range_hi(W, pad, v, stride, Q);
                                for (int64_t p = plo; p <= phi; ++p) {
                                    const int64_t ih = p * stride + u - pad;
                                    const T* xrow = xplane + ih * W + v - pad;
                                    T* yrow = yplane + p * Q;
                                    for (int64_t q = qlo; q <= qhi; ++q)
                                        yrow[q] += wv * xrow[q * stride];
                                }
                            }
                        }
                    }
                }
        },
        [xn, wn, bn, B, I, O, KH, KW, H, W, P, Q, stride, pad](Node<T>& o) {
            const T* g = o.grad.data();
            const T* px = xn->value.data();
            const T* pw = wn->value.data();
            if (bn && bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t oo = 0; oo < O; ++oo) {
                        const T* gplane = g + (bt * O + oo) * P * Q;
                        T s = T(0);
                        for (int64_t i = 0; i < P * Q; ++i) s += gplane[i];
                        gb[oo] += s;
                    }
            }
            if (wn->requires_grad) {
                T* gw = wn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t oo = 0; oo < O; ++oo) {
                        const T* gplane = g + (bt * O + oo) * P * Q;
                        for (int64_t i = 0; i < I; ++i) {
                            const T* xplane = px + (bt * I + i) * H * W;
                            T* gwk = gw + (i * O + oo) * KH * KW;
                            for (int64_t u = 0; u < KH; ++u) {
                                const int64_t plo = loops::range_lo(pad, u, stride);
                                const int64_t phi = loops::range_hi(H, pad, u, stride, P);
                                for (int64_t v = 0; v < KW; ++v) {
                                    const int64_t qlo = loops::range_lo(pad, v, stride);
                                    const int64_t qhi = loops::range_hi(W, pad, v, stride, Q);
                                    T acc = T(0);
                                    for (int64_t p = plo; p <= phi; ++p) {
                                        const int64_t ih = p * stride + u - pad;
                                        const T* xrow = xplane + ih * W + v - pad;
                                        const T* grow = gplane + p * Q;
                                        for (int64_t q = qlo; q <= qhi; ++q)
                                            acc += grow[q] * xrow[q * stride];
                                    }
                                    gwk[u * KW + v] += acc;
                                }
                            }
                        }
                    }
            }
            if (xn->requires_grad) {
                T* gx = xn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t oo = 0; oo < O; ++oo) {
                        const T* gplane = g + (bt * O + oo) * P * Q;
                        for (int64_t i = 0; i < I; ++i) {
                            T* gxplane = gx + (bt * I + i) * H * W;
                            const T* wk = pw + (i * O + oo) * KH * KW;
                            for (int64_t u = 0; u < KH; ++u) {
                                const int64_t plo = loops::range_lo(pad, u, stride);
                                const int64_t phi = loops::range_hi(H, pad, u, stride, P);
                                for (int64_t v = 0; v < KW; ++v) {
                                    const T wv = wk[u * KW + v];
                                    if (wv == T(0)) continue;
                                    const int64_t qlo = loops::range_lo(pad, v, stride);
                                    const int64_t qhi = loops::range_hi(W, pad, v, stride, Q);
                                    for (int64_t p = plo; p <= phi; ++p) {
                                        const int64_t ih = p * stride + u - pad;
                                        T* gxrow = gxplane + ih * W + v - pad;
                                        const T* grow = gplane + p * Q;
                                        for (int64_t q = qlo; q <= qhi; ++q)
                                            gxrow[q * stride] += wv * grow[q];
                                    }
                                }
                            }
                        }
                    }
            }
        });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride,
                        int64_t pad, int64_t out_pad) {
    const auto& xs = x.val().shape();
    const auto& ws = w.val().shape();
    if (x.val().rank() != 4 || w.val().rank() != 4 || xs[1] != ws[0])
        throw ShapeError("conv_transpose2d: input " + x.val().shape_str() + " vs weight " +
                         w.val().shape_str());
    const int64_t B = xs[0], I = ws[0], O = ws[1], KH = ws[2], KW = ws[3];
    const int64_t H = xs[2], W = xs[3];
    const int64_t P = (H - 1) * stride - 2 * pad + KH + out_pad;
    const int64_t Q = (W - 1) * stride - 2 * pad + KW + out_pad;
    if (P <= 0 || Q <= 0) throw ShapeError("conv_transpose2d: empty output");
    auto xn = x.node(), wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    return make_op<T>(
        {xn, wn, bn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, O, P, Q});
            const T* px = xn->value.data();
            const T* pw = wn->value.data();
            T* po = o.value.data();
            if (bn) {
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t oo = 0; oo < O; ++oo) {
                        const T bias = bn->value[oo];
                        T* plane = po + (bt * O + oo) * P * Q;
                        for (int64_t i = 0; i < P * Q; ++i) plane[i] = bias;
                    }
            }
            for (int64_t bt = 0; bt < B; ++bt)
                for (int64_t oo = 0; oo < O; ++oo) {
                    T* yplane = po + (bt * O + oo) * P * Q;
                    for (int64_t i = 0; i < I; ++i) {
                        const T* xplane = px + (bt * I + i) * H * W;
                        const T* wk = pw + (i * O + oo) * KH * KW;
                        for (int64_t u = 0; u < KH; ++u) {
                            const int64_t hlo = loops::range_lo(pad, u, stride);
                            const int64_t hhi = loops::range_hi(P, pad, u, stride, H);
                            for (int64_t v = 0; v < KW; ++v) {
                                const T wv = wk[u * KW + v];
                                if (wv == T(0)) continue;
                                const int64_t wlo = loops::range_lo(pad, v, stride);
                                const int64_t whi = loops::range_hi(Q, pad, v, stride, W);
                                for (int64_t h = hlo; h <= hhi; ++h) {
                                    const int64_t oh = h * stride + u - pad;
                                    T* yrow = yplane + oh * Q + v - pad;
                                    const T* xrow = xplane + h * W;
                                    for (int64_t wi = wlo; wi <= whi; ++wi)
                                        yrow[wi * stride] += wv * xrow[wi];
                                }
                            }
                        }
                    }
                }
        },
        [xn, wn, bn, B, I, O, KH, KW, H, W, P, Q, stride, pad](Node<T>& o) {
            const T* g = o.grad.data();
            const T* px = xn->value.data();
            const T* pw = wn->value.data();
            if (bn && bn->requires_grad) {
                T* gb = bn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t oo = 0; oo < O; ++oo) {
                        const T* gplane = g + (bt * O + oo) * P * Q;
                        T s = T(0);
                        for (int64_t i = 0; i < P * Q; ++i) s += gplane[i];
                        gb[oo] += s;
                    }
            }
            if (wn->requires_grad) {
                T* gw = wn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t oo = 0; oo < O; ++oo) {
                        const T* gplane = g + (bt * O + oo) * P * Q;
                        for (int64_t i = 0; i < I; ++i) {
                            const T* xplane = px + (bt * I + i) * H * W;
                            T* gwk = gw + (i * O + oo) * KH * KW;
                            for (int64_t u = 0; u < KH; ++u) {
                                const int64_t hlo = loops::range_lo(pad, u, stride);
                                const int64_t hhi = loops::range_hi(P, pad, u, stride, H);
                                for (int64_t v = 0; v < KW; ++v) {
                                    const int64_t wlo = loops::range_lo(pad, v, stride);
                                    const int64_t whi = loops::range_hi(Q, pad, v, stride, W);
                                    T acc = T(0);
                                    for (int64_t h = hlo; h <= hhi; ++h) {
                                        const int64_t oh = h * stride + u - pad;
                                        const T* grow = gplane + oh * Q + v - pad;
                                        const T* xrow = xplane + h * W;
                                        for (int64_t wi = wlo; wi <= whi; ++wi)
                                            acc += xrow[wi] * grow[wi * stride];
                                    }
                                    gwk[u * KW + v] += acc;
                                }
                            }
                        }
                    }
            }
            if (xn->requires_grad) {
                T* gx = xn->ensure_grad().data();
                for (int64_t bt = 0; bt < B; ++bt)
                    for (int64_t oo = 0; oo < O; ++oo) {
                        const T* gplane = g + (bt * O + oo) * P * Q;
                        for (int64_t i = 0; i < I; ++i) {
                            T* gxplane = gx + (bt * I + i) * H * W;
                            const T* wk = pw + (i * O + oo) * KH * KW;
                            for (int64_t u = 0; u < KH; ++u) {
                                const int64_t hlo = loops::range_lo(pad, u, stride);
                                const int64_t hhi = loops::range_hi(P, pad, u, stride, H);
                                for (int64_t v = 0; v < KW; ++v) {
                                    const T wv = wk[u * KW + v];
                                    if (wv == T(0)) continue;
                                    const int64_t wlo = loops::range_lo(pad, v, stride);
                                    const int64_t whi = loops::range_hi(Q, pad, v, stride, W);
                                    for (int64_t h = hlo; h <= hhi; ++h) {
                                        const int64_t oh = h * stride + u - pad;
                                        const T* grow = gplane + oh * Q + v - pad;
                                        T* gxrow = gxplane + h * W;
                                        for (int64_t wi = wlo; wi <= whi; ++wi)
                                            gxrow[wi] += wv * grow[wi * stride];
                                    }
                                }
                            }
                        }
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail_norm {

// Shared backward for layers normalizing over contiguous groups of size n:
// dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
template <typename T>
void normalized_group_backward(const T* g, const T* xhat, const T* gamma, T inv, int64_t n,
                               int64_t gamma_stride, T* gx) {
    T sum_g = T(0), sum_gx = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const T dxhat = g[i] * gamma[i * gamma_stride];
        sum_g += dxhat;
        sum_gx += dxhat * xhat[i];
    }
    const T mg = sum_g / static_cast<T>(n);
    const T mgx = sum_gx / static_cast<T>(n);
    for (int64_t i = 0; i < n; ++i) {
        const T dxhat = g[i] * gamma[i * gamma_stride];
        gx[i] += inv * (dxhat - mg - xhat[i] * mgx);
    }
}

}  // namespace detail_norm

// Per-(batch, channel) normalization over the spatial plane, affine params
// gamma/beta of length C.
template <typename T>
Var<T> instance_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       T eps = T(1e-5)) {
    const auto& xs = x.val().shape();
    if (x.val().rank() != 4) throw ShapeError("instance_norm2d expects rank-4");
    const int64_t B = xs[0], C = xs[1], plane = xs[2] * xs[3];
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto xhat = std::make_shared<Tensor<T>>();
    auto invs = std::make_shared<std::vector<T>>();
    return make_op<T>(
        {xn, gn, bn},
        [&](Node<T>& o) {
            o.value = Tensor<T>(xs);
            *xhat = Tensor<T>(xs);
            invs->assign(static_cast<size_t>(B * C), T(0));
            const T* px = xn->value.data();
            T* po = o.value.data();
            T* ph = xhat->data();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                const T* xr = px + bc * plane;
                T m = T(0);
                for (int64_t i = 0; i < plane; ++i) m += xr[i];
                m /= static_cast<T>(plane);
                T var = T(0);
                for (int64_t i = 0; i < plane; ++i) {
                    const T d = xr[i] - m;
                    var += d * d;
                }
                var /= static_cast<T>(plane);
                const T inv = T(1) / std::sqrt(var + eps);
                (*invs)[static_cast<size_t>(bc)] = inv;
                const int64_t c = bc % C;
                const T gm = gn->value[c];
                const T bt = bn->value[c];
                T* hr = ph + bc * plane;
                T* yr = po + bc * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    hr[i] = (xr[i] - m) * inv;
                    yr[i] = gm * hr[i] + bt;
                }
            }
        },
        [xn, gn, bn, xhat, invs, B, C, plane](Node<T>& o) {
            const T* g = o.grad.data();
            const T* ph = xhat->data();
            if (gn->requires_grad || bn->requires_grad) {
                T* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
                T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                for (int64_t bc = 0; bc < B * C; ++bc) {
                    const int64_t c = bc % C;
                    const T* gr = g + bc * plane;
                    const T* hr = ph + bc * plane;
                    T sg = T(0), sgh = T(0);
                    for (int64_t i = 0; i < plane; ++i) {
                        sg += gr[i];
                        sgh += gr[i] * hr[i];
                    }
                    if (gg) gg[c] += sgh;
                    if (gb) gb[c] += sg;
                }
            }
            if (xn->requires_grad) {
                T* gx = xn->ensure_grad().data();
                for (int64_t bc = 0; bc < B * C; ++bc) {
                    const int64_t c = bc % C;
                    const T gm = gn->value[c];
                    // Constant gamma across the group; stride 0 broadcast.
                    detail_norm::normalized_group_backward(
                        g + bc * plane, ph + bc * plane, &gm, (*invs)[static_cast<size_t>(bc)],
                        plane, 0, gx + bc * plane);
                }
            }
        });
}

// Normalizes over the last axis; gamma/beta of that length.
template <typename T>
Var<T> layer_norm_lastdim(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                          T eps = T(1e-5)) {
    const int64_t L = x.val().shape().back();
    const int64_t rows = x.val().numel() / L;
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto xhat = std::make_shared<Tensor<T>>();
    auto invs = std::make_shared<std::vector<T>>();
    return make_op<T>(
        {xn, gn, bn},
        [&](Node<T>& o) {
            o.value = Tensor<T>(x.val().shape());
            *xhat = Tensor<T>(x.val().shape());
            invs->assign(static_cast<size_t>(rows), T(0));
            const T* px = xn->value.data();
            T* po = o.value.data();
            T* ph = xhat->data();
            const T* pg = gn->value.data();
            const T* pb = bn->value.data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = px + r * L;
                T m = T(0);
                for (int64_t i = 0; i < L; ++i) m += xr[i];
                m /= static_cast<T>(L);
                T var = T(0);
                for (int64_t i = 0; i < L; ++i) {
                    const T d = xr[i] - m;
                    var += d * d;
                }
                var /= static_cast<T>(L);
                const T inv = T(1) / std::sqrt(var + eps);
                (*invs)[static_cast<size_t>(r)] = inv;
                T* hr = ph + r * L;
                T* yr = po + r * L;
                for (int64_t i = 0; i < L; ++i) {
                    hr[i] = (xr[i] - m) * inv;
                    yr[i] = pg[i] * hr[i] + pb[i];
                }
            }
        },
        [xn, gn, bn, xhat, invs, rows, L](Node<T>& o) {
            const T* g = o.grad.data();
            const T* ph = xhat->data();
            if (gn->requires_grad || bn->requires_grad) {
                T* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
                T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * L;
                    const T* hr = ph + r * L;
                    for (int64_t i = 0; i < L; ++i) {
                        if (gg) gg[i] += gr[i] * hr[i];
                        if (gb) gb[i] += gr[i];
                    }
                }
            }
            if (xn->requires_grad) {
                T* gx = xn->ensure_grad().data();
                const T* pg = gn->value.data();
                for (int64_t r = 0; r < rows; ++r)
                    detail_norm::normalized_group_backward(g + r * L, ph + r * L, pg,
                                                           (*invs)[static_cast<size_t>(r)], L, 1,
                                                           gx + r * L);
            }
        });
}

// ---------------------------------------------------------------------------
// Pooling (2x2, stride 2). Indices record the argmax for exact unpooling.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> max_pool2x2(const Var<T>& x, std::shared_ptr<Tensor<int64_t>>& indices_out) {
    const auto& xs = x.val().shape();
    if (x.val().rank() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0)
        throw ShapeError("max_pool2x2 needs even spatial dims, got " + x.val().shape_str());
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int64_t P = H / 2, Q = W / 2;
    auto xn = x.node();
    auto idx = std::make_shared<Tensor<int64_t>>(std::vector<int64_t>{B, C, P, Q});
    indices_out = idx;
    return make_op<T>(
        {xn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, C, P, Q});
            const T* px = xn->value.data();
            T* po = o.value.data();
            int64_t* pi = idx->data();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                const T* xplane = px + bc * H * W;
                T* yplane = po + bc * P * Q;
                int64_t* iplane = pi + bc * P * Q;
                for (int64_t p = 0; p < P; ++p)
                    for (int64_t q = 0; q < Q; ++q) {
                        int64_t best = (2 * p) * W + 2 * q;
                        T bv = xplane[best];
                        for (int du = 0; du < 2; ++du)
                            for (int dv = 0; dv < 2; ++dv) {
                                const int64_t pos = (2 * p + du) * W + 2 * q + dv;
                                if (xplane[pos] > bv) {
                                    bv = xplane[pos];
                                    best = pos;
                                }
                            }
                        yplane[p * Q + q] = bv;
                        iplane[p * Q + q] = best;
                    }
            }
        },
        [xn, idx, B, C, H, W, P, Q](Node<T>& o) {
            if (!xn->requires_grad) return;
            T* gx = xn->ensure_grad().data();
            const T* g = o.grad.data();
            const int64_t* pi = idx->data();
            for (int64_t bc = 0; bc < B * C; ++bc)
                for (int64_t i = 0; i < P * Q; ++i)
                    gx[bc * H * W + pi[bc * P * Q + i]] += g[bc * P * Q + i];
        });
}

template <typename T>
Var<T> max_unpool2x2(const Var<T>& x, std::shared_ptr<Tensor<int64_t>> indices, int64_t H,
                     int64_t W) {
    const auto& xs = x.val().shape();
    if (x.val().rank() != 4 || !indices || !indices->same_shape(*indices) ||
        indices->shape() != xs)
        throw ShapeError("max_unpool2x2: indices do not match input " + x.val().shape_str());
    const int64_t B = xs[0], C = xs[1], P = xs[2], Q = xs[3];
    auto xn = x.node();
    return make_op<T>(
        {xn},
        [&](Node<T>& o) {
            o.value = Tensor<T>({B, C, H, W});
            const T* px = xn->value.data();
            T* po = o.value.data();
            const int64_t* pi = indices->data();
            for (int64_t bc = 0; bc < B * C; ++bc)
                for (int64_t i = 0; i < P * Q; ++i)
                    po[bc * H * W + pi[bc * P * Q + i]] = px[bc * P * Q + i];
        },
        [xn, indices, B, C, H, W, P, Q](Node<T>& o) {
            if (!xn->requires_grad) return;
            T* gx = xn->ensure_grad().data();
            const T* g = o.grad.data();
            const int64_t* pi = indices->data();
            for (int64_t bc = 0; bc < B * C; ++bc)
                for (int64_t i = 0; i < P * Q; ++i)
                    gx[bc * P * Q + i] += g[bc * H * W + pi[bc * P * Q + i]];
        });
}

}  // namespace ops
}  // namespace e2gan
