// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include "roimatch/nn/autograd.hpp"
#include "roimatch/parallel.hpp"

namespace roimatch::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

// Fills col[K x (c1-c0)] for output columns [c0, c1) of image `x_n`.
template <typename T>
void im2col_block(const T* x_n, int cin, int h, int w, int kh, int kw, int stride, int pad,
                  int wo, int64_t c0, int64_t c1, T* col) {
    const int64_t mblk = c1 - c0;
    int64_t row = 0;
    for (int ci = 0; ci < cin; ++ci) {
        const T* plane = x_n + static_cast<int64_t>(ci) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx, ++row) {
                T* dst = col + row * mblk;
                for (int64_t m = 0; m < mblk; ++m) {
                    const int64_t oc = c0 + m;
                    const int oy = static_cast<int>(oc / wo);
                    const int ox = static_cast<int>(oc % wo);
                    const int iy = oy * stride - pad + ky;
                    const int ix = ox * stride - pad + kx;
                    dst[m] = (iy >= 0 && ix >= 0 && iy < h && ix < w)
                                 ? plane[static_cast<int64_t>(iy) * w + ix]
                                 : T(0);
                }
            }
        }
    }
}

template <typename T>
void col2im_block(const T* col, int cin, int h, int w, int kh, int kw, int stride, int pad,
                  int wo, int64_t c0, int64_t c1, T* dx_n) {
    const int64_t mblk = c1 - c0;
    int64_t row = 0;
    for (int ci = 0; ci < cin; ++ci) {
        T* plane = dx_n + static_cast<int64_t>(ci) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx, ++row) {
                const T* src = col + row * mblk;
                for (int64_t m = 0; m < mblk; ++m) {
                    const int64_t oc = c0 + m;
                    const int oy = static_cast<int>(oc / wo);
                    const int ox = static_cast<int>(oc % wo);
                    const int iy = oy * stride - pad + ky;
                    const int ix = ox * stride - pad + kx;
                    if (iy >= 0 && ix >= 0 && iy < h && ix < w) {
                        plane[static_cast<int64_t>(iy) * w + ix] += src[m];
                    }
                }
            }
        }
    }
}

constexpr int64_t kConvBlockCols = 1536;

}  // namespace detail

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, int stride,
                         int pad) {
    check(x.ndim() == 4 && w.ndim() == 4, "conv2d expects NCHW input and OIHW weight");
    const int n = static_cast<int>(x.shape[0]), cin = static_cast<int>(x.shape[1]);
    const int h = static_cast<int>(x.shape[2]), wd = static_cast<int>(x.shape[3]);
    const int cout = static_cast<int>(w.shape[0]), kh = static_cast<int>(w.shape[2]);
    const int kw = static_cast<int>(w.shape[3]);
    check(w.shape[1] == cin, "conv2d: channel mismatch");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    check(ho > 0 && wo > 0, "conv2d: output would be empty");
    const int64_t m = static_cast<int64_t>(ho) * wo;
    const int64_t k = static_cast<int64_t>(cin) * kh * kw;

    Tensor<T> y({n, cout, ho, wo});
    const int64_t nblocks = (m + detail::kConvBlockCols - 1) / detail::kConvBlockCols;
    parallel_for(n * nblocks, [&](int64_t task) {
        const int64_t img = task / nblocks;
        const int64_t blk = task % nblocks;
        const int64_t c0 = blk * detail::kConvBlockCols;
        const int64_t c1 = std::min(m, c0 + detail::kConvBlockCols);
        std::vector<T> col(static_cast<size_t>(k * (c1 - c0)));
        detail::im2col_block(x.ptr() + img * cin * h * wd, cin, h, wd, kh, kw, stride, pad, wo,
                             c0, c1, col.data());
        CMapMat<T> wm(w.ptr(), cout, k);
        CMapMat<T> cm(col.data(), k, c1 - c0);
        StridedMap<T> ym(y.ptr() + img * cout * m + c0, cout, c1 - c0, Eigen::OuterStride<>(m));
        ym.noalias() = wm * cm;
        if (b != nullptr) {
            for (int co = 0; co < cout; ++co) {
                ym.row(co).array() += (*b)[co];
            }
        }
    });
    return y;
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    Tensor<T> y = conv2d_forward<T>(x->val, w->val, b ? &b->val : nullptr, stride, pad);
    std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
    auto node = make_node<T>(std::move(y), std::move(parents), nullptr);
    if (!node->needs_grad) return node;

    Node<T>* self = node.get();
    Var<T> px = x, pw = w, pb = b;
    node->back = [self, px, pw, pb, stride, pad]() {
        const Tensor<T>& xv = px->val;
        const Tensor<T>& wv = pw->val;
        const int n = static_cast<int>(xv.shape[0]), cin = static_cast<int>(xv.shape[1]);
        const int h = static_cast<int>(xv.shape[2]), wd = static_cast<int>(xv.shape[3]);
        const int cout = static_cast<int>(wv.shape[0]), kh = static_cast<int>(wv.shape[2]);
        const int kw = static_cast<int>(wv.shape[3]);
        const int ho = static_cast<int>(self->val.shape[2]), wo = static_cast<int>(self->val.shape[3]);
        const int64_t m = static_cast<int64_t>(ho) * wo;
        const int64_t k = static_cast<int64_t>(cin) * kh * kw;

        const bool need_x = px->needs_grad;
        const bool need_w = pw->needs_grad;
        if (need_x) px->ensure_grad();
        if (need_w) pw->ensure_grad();

        // Per-image weight-gradient partials, reduced in fixed order so the
        // result does not depend on the thread count.
        std::vector<Tensor<T>> dw_parts;
        if (need_w) dw_parts.assign(n, Tensor<T>({cout, k}));

        parallel_for(n, [&](int64_t img) {
            std::vector<T> col(static_cast<size_t>(k * m));
            detail::im2col_block(xv.ptr() + img * cin * h * wd, cin, h, wd, kh, kw, stride, pad,
                                 wo, 0, m, col.data());
            CStridedMap<T> gy(self->grad.ptr() + img * cout * m, cout, m, Eigen::OuterStride<>(m));
            if (need_w) {
                CMapMat<T> cm(col.data(), k, m);
                MapMat<T> dwm(dw_parts[img].ptr(), cout, k);
                dwm.noalias() = gy * cm.transpose();
            }
            if (need_x) {
                std::vector<T> dcol(static_cast<size_t>(k * m));
                CMapMat<T> wm(wv.ptr(), cout, k);
                MapMat<T> dcm(dcol.data(), k, m);
                dcm.noalias() = wm.transpose() * gy;
                detail::col2im_block(dcol.data(), cin, h, wd, kh, kw, stride, pad, wo, 0, m,
                                     px->grad.ptr() + img * cin * h * wd);
            }
        });
        if (need_w) {
            for (int img = 0; img < n; ++img) {
                T* dst = pw->grad.ptr();
                const T* src = dw_parts[img].ptr();
                for (int64_t i = 0; i < pw->grad.numel(); ++i) dst[i] += src[i];
            }
        }
        if (pb && pb->needs_grad) {
            pb->ensure_grad();
            for (int img = 0; img < n; ++img) {
                for (int co = 0; co < cout; ++co) {
                    const T* g = self->grad.ptr() + (static_cast<int64_t>(img) * cout + co) * m;
                    T acc = T(0);
                    for (int64_t i = 0; i < m; ++i) acc += g[i];
                    pb->grad[co] += acc;
                }
            }
        }
    };
    return node;
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, int factor) {
    check(x->val.ndim() == 4, "avg_pool2d expects NCHW");
    const int64_t n = x->val.shape[0], c = x->val.shape[1];
    const int64_t h = x->val.shape[2], w = x->val.shape[3];
    check(h % factor == 0 && w % factor == 0, "avg_pool2d: size not divisible by factor");
    const int64_t ho = h / factor, wo = w / factor;
    Tensor<T> y({n, c, ho, wo});
    const T inv = T(1) / static_cast<T>(factor * factor);
    for (int64_t p = 0; p < n * c; ++p) {
        const T* src = x->val.ptr() + p * h * w;
        T* dst = y.ptr() + p * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
            for (int64_t ox = 0; ox < wo; ++ox) {
                T acc = T(0);
                for (int ky = 0; ky < factor; ++ky) {
                    const T* row = src + (oy * factor + ky) * w + ox * factor;
                    for (int kx = 0; kx < factor; ++kx) acc += row[kx];
                }
                dst[oy * wo + ox] = acc * inv;
            }
        }
    }
    return unary_op<T>(x, std::move(y), [factor, inv](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const int64_t n = px->val.shape[0], c = px->val.shape[1];
        const int64_t h = px->val.shape[2], w = px->val.shape[3];
        const int64_t ho = h / factor, wo = w / factor;
        for (int64_t p = 0; p < n * c; ++p) {
            const T* g = self->grad.ptr() + p * ho * wo;
            T* dst = px->grad.ptr() + p * h * w;
            for (int64_t oy = 0; oy < ho; ++oy) {
                for (int64_t ox = 0; ox < wo; ++ox) {
                    const T gv = g[oy * wo + ox] * inv;
                    for (int ky = 0; ky < factor; ++ky) {
                        T* row = dst + (oy * factor + ky) * w + ox * factor;
                        for (int kx = 0; kx < factor; ++kx) row[kx] += gv;
                    }
                }
            }
        }
    });
}

// Max pooling on a plain tensor (used to bring the prompt mask to a pyramid
// level's resolution; no gradient flows through the mask).
template <typename T>
Tensor<T> max_pool_to(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
    check(x.ndim() == 4, "max_pool_to expects NCHW");
    const int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    check(h % out_h == 0 && w % out_w == 0, "max_pool_to: non-integer pooling factor");
    const int64_t fy = h / out_h, fx = w / out_w;
    Tensor<T> y({n, c, out_h, out_w});
    for (int64_t p = 0; p < n * c; ++p) {
        const T* src = x.ptr() + p * h * w;
        T* dst = y.ptr() + p * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            for (int64_t ox = 0; ox < out_w; ++ox) {
                T best = src[oy * fy * w + ox * fx];
                for (int64_t ky = 0; ky < fy; ++ky) {
                    const T* row = src + (oy * fy + ky) * w + ox * fx;
                    for (int64_t kx = 0; kx < fx; ++kx) best = std::max(best, row[kx]);
                }
                dst[oy * out_w + ox] = best;
            }
        }
    }
    return y;
}

// Bilinear resize (half-pixel centers, matching the common framework default).
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int64_t out_h, int64_t out_w) {
    check(x->val.ndim() == 4, "upsample_bilinear expects NCHW");
    const int64_t n = x->val.shape[0], c = x->val.shape[1];
    const int64_t h = x->val.shape[2], w = x->val.shape[3];

    struct Tap {
        int64_t i0, i1;
        T w0, w1;
    };
    auto make_taps = [](int64_t in, int64_t out) {
        std::vector<Tap> taps(out);
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (int64_t o = 0; o < out; ++o) {
            double s = (o + 0.5) * scale - 0.5;
            s = std::max(0.0, std::min(s, static_cast<double>(in - 1)));
            const int64_t i0 = static_cast<int64_t>(std::floor(s));
            const int64_t i1 = std::min(i0 + 1, in - 1);
            const T w1 = static_cast<T>(s - static_cast<double>(i0));
            taps[o] = {i0, i1, T(1) - w1, w1};
        }
        return taps;
    };
    auto ytaps = std::make_shared<std::vector<Tap>>(make_taps(h, out_h));
    auto xtaps = std::make_shared<std::vector<Tap>>(make_taps(w, out_w));

    Tensor<T> y({n, c, out_h, out_w});
    parallel_for(n * c, [&](int64_t p) {
        const T* src = x->val.ptr() + p * h * w;
        T* dst = y.ptr() + p * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const Tap& ty = (*ytaps)[oy];
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const Tap& tx = (*xtaps)[ox];
                dst[oy * out_w + ox] = ty.w0 * (tx.w0 * src[ty.i0 * w + tx.i0] +
                                                tx.w1 * src[ty.i0 * w + tx.i1]) +
                                       ty.w1 * (tx.w0 * src[ty.i1 * w + tx.i0] +
                                                tx.w1 * src[ty.i1 * w + tx.i1]);
            }
        }
    });
    return unary_op<T>(x, std::move(y), [ytaps, xtaps](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const int64_t n = px->val.shape[0], c = px->val.shape[1];
        const int64_t h = px->val.shape[2], w = px->val.shape[3];
        const int64_t out_h = self->val.shape[2], out_w = self->val.shape[3];
        parallel_for(n * c, [&](int64_t p) {
            const T* g = self->grad.ptr() + p * out_h * out_w;
            T* dst = px->grad.ptr() + p * h * w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                const Tap& ty = (*ytaps)[oy];
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    const Tap& tx = (*xtaps)[ox];
                    const T gv = g[oy * out_w + ox];
                    dst[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * gv;
                    dst[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * gv;
                    dst[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * gv;
                    dst[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * gv;
                }
            }
        });
    });
}

// ---------------------------------------------------------------------------
// Dense / attention primitives
// ---------------------------------------------------------------------------

// x [..., Din] * w[Dout, Din]^T + b -> [..., Dout]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const int64_t din = w->val.shape[1], dout = w->val.shape[0];
    check(x->val.shape.back() == din, "linear: input dim mismatch");
    const int64_t rows = x->val.numel() / din;
    Shape out_shape = x->val.shape;
    out_shape.back() = dout;
    Tensor<T> y(out_shape);
    {
        CMapMat<T> xm(x->val.ptr(), rows, din);
        CMapMat<T> wm(w->val.ptr(), dout, din);
        MapMat<T> ym(y.ptr(), rows, dout);
        ym.noalias() = xm * wm.transpose();
        if (b) {
            check(b->val.numel() == dout, "linear: bias dim mismatch");
            for (int64_t r = 0; r < rows; ++r) {
                for (int64_t j = 0; j < dout; ++j) ym(r, j) += b->val[j];
            }
        }
    }
    std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
    auto node = make_node<T>(std::move(y), std::move(parents), nullptr);
    if (!node->needs_grad) return node;
    Node<T>* self = node.get();
    Var<T> px = x, pw = w, pb = b;
    node->back = [self, px, pw, pb, rows, din, dout]() {
        CMapMat<T> gy(self->grad.ptr(), rows, dout);
        if (px->needs_grad) {
            px->ensure_grad();
            MapMat<T> gx(px->grad.ptr(), rows, din);
            CMapMat<T> wm(pw->val.ptr(), dout, din);
            gx.noalias() += gy * wm;
        }
        if (pw->needs_grad) {
            pw->ensure_grad();
            MapMat<T> gw(pw->grad.ptr(), dout, din);
            CMapMat<T> xm(px->val.ptr(), rows, din);
            gw.noalias() += gy.transpose() * xm;
        }
        if (pb && pb->needs_grad) {
            pb->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                for (int64_t j = 0; j < dout; ++j) pb->grad[j] += gy(r, j);
            }
        }
    };
    return node;
}

// Batched matmul; y[b] = a[b] * b[b], shapes [B,M,K] x [B,K,N] -> [B,M,N].
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    check(a->val.ndim() == 3 && b->val.ndim() == 3 && a->val.shape[0] == b->val.shape[0] &&
              a->val.shape[2] == b->val.shape[1],
          "bmm: want [B,M,K] x [B,K,N]");
    const int64_t bs = a->val.shape[0], m = a->val.shape[1], k = a->val.shape[2],
                  n = b->val.shape[2];
    Tensor<T> y({bs, m, n});
    parallel_for(bs, [&](int64_t i) {
        CMapMat<T> am(a->val.ptr() + i * m * k, m, k);
        CMapMat<T> bm(b->val.ptr() + i * k * n, k, n);
        MapMat<T> ym(y.ptr() + i * m * n, m, n);
        ym.noalias() = am * bm;
    });
    return binary_op<T>(a, b, std::move(y), [bs, m, k, n](Node<T>* self, Node<T>* pa, Node<T>* pb) {
        if (pa->needs_grad) pa->ensure_grad();
        if (pb->needs_grad) pb->ensure_grad();
        parallel_for(bs, [&](int64_t i) {
            CMapMat<T> gy(self->grad.ptr() + i * m * n, m, n);
            if (pa->needs_grad) {
                MapMat<T> ga(pa->grad.ptr() + i * m * k, m, k);
                CMapMat<T> bm(pb->val.ptr() + i * k * n, k, n);
                ga.noalias() += gy * bm.transpose();
            }
            if (pb->needs_grad) {
                MapMat<T> gb(pb->grad.ptr() + i * k * n, k, n);
                CMapMat<T> am(pa->val.ptr() + i * m * k, m, k);
                gb.noalias() += am.transpose() * gy;
            }
        });
    });
}

// y[b] = a[b] * b[b]^T, shapes [B,M,K] x [B,N,K] -> [B,M,N].
template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b) {
    check(a->val.ndim() == 3 && b->val.ndim() == 3 && a->val.shape[0] == b->val.shape[0] &&
              a->val.shape[2] == b->val.shape[2],
          "bmm_nt: want [B,M,K] x [B,N,K]");
    const int64_t bs = a->val.shape[0], m = a->val.shape[1], k = a->val.shape[2],
                  n = b->val.shape[1];
    Tensor<T> y({bs, m, n});
    parallel_for(bs, [&](int64_t i) {
        CMapMat<T> am(a->val.ptr() + i * m * k, m, k);
        CMapMat<T> bm(b->val.ptr() + i * n * k, n, k);
        MapMat<T> ym(y.ptr() + i * m * n, m, n);
        ym.noalias() = am * bm.transpose();
    });
    return binary_op<T>(a, b, std::move(y), [bs, m, k, n](Node<T>* self, Node<T>* pa, Node<T>* pb) {
        if (pa->needs_grad) pa->ensure_grad();
        if (pb->needs_grad) pb->ensure_grad();
        parallel_for(bs, [&](int64_t i) {
            CMapMat<T> gy(self->grad.ptr() + i * m * n, m, n);
            if (pa->needs_grad) {
                MapMat<T> ga(pa->grad.ptr() + i * m * k, m, k);
                CMapMat<T> bm(pb->val.ptr() + i * n * k, n, k);
                ga.noalias() += gy * bm;
            }
            if (pb->needs_grad) {
                MapMat<T> gb(pb->grad.ptr() + i * n * k, n, k);
                CMapMat<T> am(pa->val.ptr() + i * m * k, m, k);
                gb.noalias() += gy.transpose() * am;
            }
        });
    });
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
    const int64_t d = x->val.shape.back();
    const int64_t rows = x->val.numel() / d;
    Tensor<T> y = x->val;
    parallel_for(rows, [&](int64_t r) {
        T* row = y.ptr() + r * d;
        T mx = row[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < d; ++j) row[j] *= inv;
    });
    return unary_op<T>(x, std::move(y), [d, rows](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        parallel_for(rows, [&](int64_t r) {
            const T* yrow = self->val.ptr() + r * d;
            const T* grow = self->grad.ptr() + r * d;
            T* dst = px->grad.ptr() + r * d;
            T dot = T(0);
            for (int64_t j = 0; j < d; ++j) dot += yrow[j] * grow[j];
            for (int64_t j = 0; j < d; ++j) dst[j] += yrow[j] * (grow[j] - dot);
        });
    });
}

// LayerNorm over the last dimension with learnable gamma/beta.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const int64_t d = x->val.shape.back();
    check(gamma->val.numel() == d && beta->val.numel() == d, "layer_norm: affine dim mismatch");
    const int64_t rows = x->val.numel() / d;
    Tensor<T> y(x->val.shape);
    auto xhat = std::make_shared<Tensor<T>>(x->val.shape);
    auto inv_std = std::make_shared<Tensor<T>>(Shape{rows});
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = x->val.ptr() + r * d;
        T mean = T(0);
        for (int64_t j = 0; j < d; ++j) mean += src[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (int64_t j = 0; j < d; ++j) var += (src[j] - mean) * (src[j] - mean);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        T* xh = xhat->ptr() + r * d;
        T* dst = y.ptr() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            xh[j] = (src[j] - mean) * is;
            dst[j] = xh[j] * gamma->val[j] + beta->val[j];
        }
    }
    auto node = make_node<T>(std::move(y), {x, gamma, beta}, nullptr);
    if (!node->needs_grad) return node;
    Node<T>* self = node.get();
    Var<T> px = x, pg = gamma, pb = beta;
    node->back = [self, px, pg, pb, xhat, inv_std, d, rows]() {
        if (px->needs_grad) px->ensure_grad();
        if (pg->needs_grad) pg->ensure_grad();
        if (pb->needs_grad) pb->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* g = self->grad.ptr() + r * d;
            const T* xh = xhat->ptr() + r * d;
            if (pg->needs_grad || pb->needs_grad) {
                for (int64_t j = 0; j < d; ++j) {
                    if (pg->needs_grad) pg->grad[j] += g[j] * xh[j];
                    if (pb->needs_grad) pb->grad[j] += g[j];
                }
            }
            if (px->needs_grad) {
                T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                for (int64_t j = 0; j < d; ++j) {
                    const T dxh = g[j] * pg->val[j];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh[j];
                }
                const T inv_d = T(1) / static_cast<T>(d);
                T* dst = px->grad.ptr() + r * d;
                for (int64_t j = 0; j < d; ++j) {
                    const T dxh = g[j] * pg->val[j];
                    dst[j] += (*inv_std)[r] *
                              (dxh - sum_dxhat * inv_d - xh[j] * sum_dxhat_xhat * inv_d);
                }
            }
        }
    };
    return node;
}

// [N, L, D] -> [N*H, L, D/H]
template <typename T>
Var<T> split_heads(const Var<T>& x, int heads) {
    check(x->val.ndim() == 3 && x->val.shape[2] % heads == 0, "split_heads: bad shape");
    const int64_t n = x->val.shape[0], l = x->val.shape[1], d = x->val.shape[2];
    const int64_t dh = d / heads;
    Tensor<T> y({n * heads, l, dh});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t hh = 0; hh < heads; ++hh) {
            for (int64_t t = 0; t < l; ++t) {
                const T* src = x->val.ptr() + (i * l + t) * d + hh * dh;
                T* dst = y.ptr() + ((i * heads + hh) * l + t) * dh;
                std::copy(src, src + dh, dst);
            }
        }
    }
    return unary_op<T>(x, std::move(y), [heads](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const int64_t n = px->val.shape[0], l = px->val.shape[1], d = px->val.shape[2];
        const int64_t dh = d / heads;
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t hh = 0; hh < heads; ++hh) {
                for (int64_t t = 0; t < l; ++t) {
                    const T* g = self->grad.ptr() + ((i * heads + hh) * l + t) * dh;
                    T* dst = px->grad.ptr() + (i * l + t) * d + hh * dh;
                    for (int64_t j = 0; j < dh; ++j) dst[j] += g[j];
                }
            }
        }
    });
}

// [N*H, L, Dh] -> [N, L, H*Dh]
template <typename T>
Var<T> merge_heads(const Var<T>& x, int heads) {
    check(x->val.ndim() == 3 && x->val.shape[0] % heads == 0, "merge_heads: bad shape");
    const int64_t n = x->val.shape[0] / heads, l = x->val.shape[1], dh = x->val.shape[2];
    const int64_t d = dh * heads;
    Tensor<T> y({n, l, d});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t hh = 0; hh < heads; ++hh) {
            for (int64_t t = 0; t < l; ++t) {
                const T* src = x->val.ptr() + ((i * heads + hh) * l + t) * dh;
                T* dst = y.ptr() + (i * l + t) * d + hh * dh;
                std::copy(src, src + dh, dst);
            }
        }
    }
    return unary_op<T>(x, std::move(y), [heads](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const int64_t nh = px->val.shape[0], l = px->val.shape[1], dh = px->val.shape[2];
        const int64_t n = nh / heads, d = dh * heads;
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t hh = 0; hh < heads; ++hh) {
                for (int64_t t = 0; t < l; ++t) {
                    const T* g = self->grad.ptr() + (i * l + t) * d + hh * dh;
                    T* dst = px->grad.ptr() + ((i * heads + hh) * l + t) * dh;
                    for (int64_t j = 0; j < dh; ++j) dst[j] += g[j];
                }
            }
        }
    });
}

// [N,C,H,W] -> [N, H*W, C] row-major tokens.
template <typename T>
Var<T> tokens_from_map(const Var<T>& x) {
    check(x->val.ndim() == 4, "tokens_from_map expects NCHW");
    const int64_t n = x->val.shape[0], c = x->val.shape[1], h = x->val.shape[2],
                  w = x->val.shape[3];
    Tensor<T> y({n, h * w, c});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* src = x->val.ptr() + (i * c + ch) * h * w;
            T* dst = y.ptr() + i * h * w * c + ch;
            for (int64_t p = 0; p < h * w; ++p) dst[p * c] = src[p];
        }
    }
    return unary_op<T>(x, std::move(y), [](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const int64_t n = px->val.shape[0], c = px->val.shape[1];
        const int64_t hw = px->val.shape[2] * px->val.shape[3];
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t ch = 0; ch < c; ++ch) {
                const T* g = self->grad.ptr() + i * hw * c + ch;
                T* dst = px->grad.ptr() + (i * c + ch) * hw;
                for (int64_t p = 0; p < hw; ++p) dst[p] += g[p * c];
            }
        }
    });
}

// [N, L, C] tokens -> [N,C,h,w] map with L = h*w.
template <typename T>
Var<T> map_from_tokens(const Var<T>& x, int64_t h, int64_t w) {
    check(x->val.ndim() == 3 && x->val.shape[1] == h * w, "map_from_tokens: bad grid");
    const int64_t n = x->val.shape[0], c = x->val.shape[2];
    Tensor<T> y({n, c, h, w});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* src = x->val.ptr() + i * h * w * c + ch;
            T* dst = y.ptr() + (i * c + ch) * h * w;
            for (int64_t p = 0; p < h * w; ++p) dst[p] = src[p * c];
        }
    }
    return unary_op<T>(x, std::move(y), [h, w](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const int64_t n = px->val.shape[0], c = px->val.shape[2];
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t ch = 0; ch < c; ++ch) {
                const T* g = self->grad.ptr() + (i * c + ch) * h * w;
                T* dst = px->grad.ptr() + i * h * w * c + ch;
                for (int64_t p = 0; p < h * w; ++p) dst[p * c] += g[p];
            }
        }
    });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    check(!xs.empty(), "concat_channels: empty input");
    const int64_t n = xs[0]->val.shape[0], h = xs[0]->val.shape[2], w = xs[0]->val.shape[3];
    int64_t ctotal = 0;
    for (const auto& x : xs) {
        check(x->val.ndim() == 4 && x->val.shape[0] == n && x->val.shape[2] == h &&
                  x->val.shape[3] == w,
              "concat_channels: shape mismatch");
        ctotal += x->val.shape[1];
    }
    Tensor<T> y({n, ctotal, h, w});
    int64_t coff = 0;
    for (const auto& x : xs) {
        const int64_t c = x->val.shape[1];
        for (int64_t i = 0; i < n; ++i) {
            std::copy(x->val.ptr() + i * c * h * w, x->val.ptr() + (i + 1) * c * h * w,
                      y.ptr() + (i * ctotal + coff) * h * w);
        }
        coff += c;
    }
    std::vector<Var<T>> parents = xs;
    auto node = make_node<T>(std::move(y), std::move(parents), nullptr);
    if (!node->needs_grad) return node;
    Node<T>* self = node.get();
    std::vector<Var<T>> kept = xs;
    node->back = [self, kept, n, h, w, ctotal]() {
        int64_t coff = 0;
        for (const auto& x : kept) {
            const int64_t c = x->val.shape[1];
            if (x->needs_grad) {
                x->ensure_grad();
                for (int64_t i = 0; i < n; ++i) {
                    const T* g = self->grad.ptr() + (i * ctotal + coff) * h * w;
                    T* dst = x->grad.ptr() + i * c * h * w;
                    for (int64_t j = 0; j < c * h * w; ++j) dst[j] += g[j];
                }
            }
            coff += c;
        }
    };
    return node;
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int64_t c0, int64_t c1) {
    check(x->val.ndim() == 4 && c0 >= 0 && c1 <= x->val.shape[1] && c0 < c1,
          "slice_channels: bad range");
    const int64_t n = x->val.shape[0], c = x->val.shape[1], h = x->val.shape[2],
                  w = x->val.shape[3];
    const int64_t cs = c1 - c0;
    Tensor<T> y({n, cs, h, w});
    for (int64_t i = 0; i < n; ++i) {
        std::copy(x->val.ptr() + (i * c + c0) * h * w, x->val.ptr() + (i * c + c1) * h * w,
                  y.ptr() + i * cs * h * w);
    }
    return unary_op<T>(x, std::move(y), [c0, cs](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const int64_t n = px->val.shape[0], c = px->val.shape[1];
        const int64_t hw = px->val.shape[2] * px->val.shape[3];
        for (int64_t i = 0; i < n; ++i) {
            const T* g = self->grad.ptr() + i * cs * hw;
            T* dst = px->grad.ptr() + (i * c + c0) * hw;
            for (int64_t j = 0; j < cs * hw; ++j) dst[j] += g[j];
        }
    });
}

// One image of a batch as [1, ...]; contiguous slice along dim 0.
template <typename T>
Var<T> slice_batch(const Var<T>& x, int64_t index) {
    check(x->val.ndim() >= 1 && index >= 0 && index < x->val.shape[0], "slice_batch: bad index");
    const int64_t stride = x->val.numel() / x->val.shape[0];
    Shape s = x->val.shape;
    s[0] = 1;
    Tensor<T> y(s);
    std::copy(x->val.ptr() + index * stride, x->val.ptr() + (index + 1) * stride, y.ptr());
    return unary_op<T>(x, std::move(y), [index, stride](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const T* g = self->grad.ptr();
        T* dst = px->grad.ptr() + index * stride;
        for (int64_t i = 0; i < stride; ++i) dst[i] += g[i];
    });
}

// x[N,C,H,W] * mask[N,1,H,W] broadcast over channels; mask is a constant.
template <typename T>
Var<T> mul_mask(const Var<T>& x, Tensor<T> mask) {
    check(x->val.ndim() == 4 && mask.ndim() == 4 && mask.shape[1] == 1 &&
              mask.shape[0] == x->val.shape[0] && mask.shape[2] == x->val.shape[2] &&
              mask.shape[3] == x->val.shape[3],
          "mul_mask: want x[N,C,H,W], mask[N,1,H,W]");
    const int64_t n = x->val.shape[0], c = x->val.shape[1];
    const int64_t hw = x->val.shape[2] * x->val.shape[3];
    Tensor<T> y = x->val;
    for (int64_t i = 0; i < n; ++i) {
        const T* m = mask.ptr() + i * hw;
        for (int64_t ch = 0; ch < c; ++ch) {
            T* dst = y.ptr() + (i * c + ch) * hw;
            for (int64_t p = 0; p < hw; ++p) dst[p] *= m[p];
        }
    }
    auto mp = std::make_shared<Tensor<T>>(std::move(mask));
    return unary_op<T>(x, std::move(y), [mp](Node<T>* self, Node<T>* px) {
        px->ensure_grad();
        const int64_t n = px->val.shape[0], c = px->val.shape[1];
        const int64_t hw = px->val.shape[2] * px->val.shape[3];
        for (int64_t i = 0; i < n; ++i) {
            const T* m = mp->ptr() + i * hw;
            for (int64_t ch = 0; ch < c; ++ch) {
                const T* g = self->grad.ptr() + (i * c + ch) * hw;
                T* dst = px->grad.ptr() + (i * c + ch) * hw;
                for (int64_t p = 0; p < hw; ++p) dst[p] += g[p] * m[p];
            }
        }
    });
}

// Scaled dot-product attention on plain tensors, row-chunked so the full
// attention matrix is never materialized. Inference-only path for large token
// counts (e.g. grid sampling disabled).
template <typename T>
Tensor<T> sdpa_nograd(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T scale) {
    const int64_t b = q.shape[0], lq = q.shape[1], dh = q.shape[2], lk = k.shape[1];
    Tensor<T> out({b, lq, dh});
    constexpr int64_t kRowChunk = 512;
    for (int64_t i = 0; i < b; ++i) {
        CMapMat<T> km(k.ptr() + i * lk * dh, lk, dh);
        CMapMat<T> vm(v.ptr() + i * lk * dh, lk, dh);
        const int64_t nchunks = (lq + kRowChunk - 1) / kRowChunk;
        parallel_for(nchunks, [&](int64_t chunk) {
            const int64_t r0 = chunk * kRowChunk;
            const int64_t r1 = std::min(lq, r0 + kRowChunk);
            CMapMat<T> qm(q.ptr() + (i * lq + r0) * dh, r1 - r0, dh);
            RowMat<T> scores = (qm * km.transpose()) * scale;
            for (int64_t r = 0; r < scores.rows(); ++r) {
                const T mx = scores.row(r).maxCoeff();
                scores.row(r) = (scores.row(r).array() - mx).exp();
                scores.row(r) /= scores.row(r).sum();
            }
            MapMat<T> om(out.ptr() + (i * lq + r0) * dh, r1 - r0, dh);
            om.noalias() = scores * vm;
        });
    }
    return out;
}

}  // namespace roimatch::nn
