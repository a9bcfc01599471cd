#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <type_traits>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "etrnlp/tensor.hpp"

namespace etrnlp {

namespace detail {

// C[M x N] += A[M x K] * B[K x N]. Each output element accumulates over k in
// ascending order (left-associated within the unrolled step), so results are
// bitwise reproducible regardless of blocking.
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* __restrict c, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* __restrict crow = c + i * n;
        std::int64_t kk = 0;
        for (; kk + 4 <= k; kk += 4) {
            const T a0 = arow[kk], a1 = arow[kk + 1], a2 = arow[kk + 2], a3 = arow[kk + 3];
            const T* b0 = b + kk * n;
            const T* b1 = b0 + n;
            const T* b2 = b1 + n;
            const T* b3 = b2 + n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        for (; kk < k; ++kk) {
            const T av = arow[kk];
            if (av == T(0)) continue;
            const T* brow = b + kk * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[K x N] += A^T * B with A[M x K], B[M x N]; ascending-m reduction order.
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* __restrict c, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
    for (std::int64_t kk = 0; kk < k; ++kk) {
        T* __restrict crow = c + kk * n;
        std::int64_t i = 0;
        for (; i + 4 <= m; i += 4) {
            const T a0 = a[i * k + kk], a1 = a[(i + 1) * k + kk], a2 = a[(i + 2) * k + kk],
                    a3 = a[(i + 3) * k + kk];
            const T* b0 = b + i * n;
            const T* b1 = b0 + n;
            const T* b2 = b1 + n;
            const T* b3 = b2 + n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        for (; i < m; ++i) {
            const T av = a[i * k + kk];
            if (av == T(0)) continue;
            const T* brow = b + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void transpose(const T* src, T* dst, std::int64_t rows, std::int64_t cols) {
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t col = 0; col < cols; ++col) dst[col * rows + r] = src[r * cols + col];
}

}  // namespace detail

struct ConvSpec {
    std::int64_t stride = 1;
    std::int64_t pad = 0;
    std::int64_t groups = 1;
};

// Intra-op worker count for convolution (1 or 2). Work splits into fixed
// batch halves with per-thread accumulation buffers reduced in a fixed order,
// so results are reproducible run to run.
inline int& conv_threads() {
    static int v = 2;
    return v;
}

namespace detail {

// Splitting is only worth a thread spawn for convolution calls with enough
// arithmetic behind them.
inline constexpr std::int64_t kSplitWorkThreshold = std::int64_t(1) << 21;

template <typename Fn>
void split_batch(std::int64_t n, std::int64_t work, Fn&& fn) {
    if (conv_threads() >= 2 && n >= 8 && work >= kSplitWorkThreshold) {
        const std::int64_t mid = n / 2;
        std::thread worker([&]() { fn(0, mid, 0); });
        fn(mid, n, 1);
        worker.join();
    } else {
        fn(0, n, 0);
    }
}

}  // namespace detail

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t pad, std::int64_t k,
                                    std::int64_t stride) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Gathers the patch matrix for one sample and one channel group:
// col[(ci*kh + ky)*kw + kx][ho*W_out + wo], zero-filled outside the input.
// Rows are copied in contiguous in-bounds segments at stride 1.
template <typename T>
void im2col(const TensorT<T>& x, std::int64_t n, std::int64_t c0, std::int64_t cg,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t h_out, std::int64_t w_out, T* col) {
    const std::int64_t H = x.shape.h;
    const std::int64_t W = x.shape.w;
    const std::int64_t patch = h_out * w_out;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < cg; ++ci) {
        const T* chan = x.data.data() + x.idx(n, c0 + ci, 0, 0);
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx, ++row) {
                T* out = col + row * patch;
                for (std::int64_t ho = 0; ho < h_out; ++ho) {
                    const std::int64_t hi = ho * stride - pad + ky;
                    T* dst = out + ho * w_out;
                    if (hi < 0 || hi >= H) {
                        std::fill(dst, dst + w_out, T(0));
                        continue;
                    }
                    const T* src = chan + hi * W;
                    if (stride == 1) {
                        // wi = wo - pad + kx in bounds for wo in [lo, hi_excl)
                        const std::int64_t lo = std::max<std::int64_t>(0, pad - kx);
                        const std::int64_t hi_excl =
                            std::min<std::int64_t>(w_out, W + pad - kx);
                        std::fill(dst, dst + lo, T(0));
                        if (hi_excl > lo) {
                            std::copy_n(src + lo - pad + kx, hi_excl - lo, dst + lo);
                        }
                        std::fill(dst + std::max(lo, hi_excl), dst + w_out, T(0));
                    } else {
                        for (std::int64_t wo = 0; wo < w_out; ++wo) {
                            const std::int64_t wi = wo * stride - pad + kx;
                            dst[wo] = (wi >= 0 && wi < W) ? src[wi] : T(0);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* col, std::int64_t n, std::int64_t c0, std::int64_t cg, std::int64_t kh,
                std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t h_out,
                std::int64_t w_out, TensorT<T>& dx) {
    const std::int64_t H = dx.shape.h;
    const std::int64_t W = dx.shape.w;
    const std::int64_t patch = h_out * w_out;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < cg; ++ci) {
        T* chan = dx.grad.data() + dx.idx(n, c0 + ci, 0, 0);
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx, ++row) {
                const T* src = col + row * patch;
                for (std::int64_t ho = 0; ho < h_out; ++ho) {
                    const std::int64_t hi = ho * stride - pad + ky;
                    if (hi < 0 || hi >= H) continue;
                    T* drow = chan + hi * W;
                    const T* srow = src + ho * w_out;
                    if (stride == 1) {
                        const std::int64_t lo = std::max<std::int64_t>(0, pad - kx);
                        const std::int64_t hi_excl =
                            std::min<std::int64_t>(w_out, W + pad - kx);
                        for (std::int64_t wo = lo; wo < hi_excl; ++wo) {
                            drow[wo - pad + kx] += srow[wo];
                        }
                    } else {
                        for (std::int64_t wo = 0; wo < w_out; ++wo) {
                            const std::int64_t wi = wo * stride - pad + kx;
                            if (wi >= 0 && wi < W) drow[wi] += srow[wo];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Grouped 2-d convolution, weight layout [C_out, C_in/groups, kh, kw].
template <typename T>
TensorPtrT<T> conv2d(TapeT<T>* tape, const TensorPtrT<T>& x, const TensorPtrT<T>& w,
                     const std::type_identity_t<TensorPtrT<T>>& b, ConvSpec spec) {
    const std::int64_t N = x->shape.n, C_in = x->shape.c, H = x->shape.h, W = x->shape.w;
    const std::int64_t C_out = w->shape.n, kh = w->shape.h, kw = w->shape.w;
    const std::int64_t g = spec.groups;
    if (spec.stride < 1 || spec.pad < 0 || g < 1) {
        throw std::invalid_argument("conv2d: stride must be >= 1, pad >= 0, groups >= 1");
    }
    if (C_in % g != 0 || C_out % g != 0) {
        throw std::invalid_argument("conv2d: channels (" + std::to_string(C_in) + "->" +
                                    std::to_string(C_out) + ") not divisible by groups " +
                                    std::to_string(g));
    }
    if (w->shape.c != C_in / g) {
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(w->shape.c) +
                                    " input channels per group, got " + std::to_string(C_in / g));
    }
    if (b && b->numel() != C_out) {
        throw std::invalid_argument("conv2d: bias length must equal C_out");
    }
    const std::int64_t h_out = conv_out_extent(H, spec.pad, kh, spec.stride);
    const std::int64_t w_out = conv_out_extent(W, spec.pad, kw, spec.stride);
    if (h_out <= 0 || w_out <= 0) {
        throw std::invalid_argument("conv2d: degenerate output " + std::to_string(h_out) + "x" +
                                    std::to_string(w_out) + " for input " + x->shape.str());
    }

    const std::int64_t cg_in = C_in / g;
    const std::int64_t cg_out = C_out / g;
    const std::int64_t K = cg_in * kh * kw;
    const std::int64_t P = h_out * w_out;
    // For a 1x1 stride-1 unpadded kernel the patch matrix is the input group
    // slice itself; skip the gather entirely.
    const bool direct = (kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0);

    const std::int64_t split_work = N * C_out * K * P;
    auto out = make_tensor<T>(Shape{N, C_out, h_out, w_out});
    detail::split_batch(N, split_work, [&](std::int64_t n0, std::int64_t n1, int) {
        std::vector<T> col(direct ? 0 : static_cast<std::size_t>(K * P));
        for (std::int64_t n = n0; n < n1; ++n) {
            for (std::int64_t gi = 0; gi < g; ++gi) {
                const T* colp;
                if (direct) {
                    colp = x->data.data() + x->idx(n, gi * cg_in, 0, 0);
                } else {
                    detail::im2col(*x, n, gi * cg_in, cg_in, kh, kw, spec.stride, spec.pad,
                                   h_out, w_out, col.data());
                    colp = col.data();
                }
                const T* wrow = w->data.data() + gi * cg_out * K;
                T* orow = out->data.data() + out->idx(n, gi * cg_out, 0, 0);
                detail::gemm_nn_acc(wrow, colp, orow, cg_out, K, P);
            }
            if (b) {
                for (std::int64_t oc = 0; oc < C_out; ++oc) {
                    T* orow = out->data.data() + out->idx(n, oc, 0, 0);
                    const T bv = b->data[static_cast<std::size_t>(oc)];
                    for (std::int64_t p = 0; p < P; ++p) orow[p] += bv;
                }
            }
        }
    });

    if (tape) {
        auto stride = spec.stride, pad = spec.pad;
        tape->record(
            b ? std::vector<TensorPtrT<T>>{x, w, b} : std::vector<TensorPtrT<T>>{x, w}, out,
            [=]() {
                const bool need_dx = tape->needs_grad(x);
                const bool need_dw = tape->needs_grad(w);
                const bool need_db = b && tape->needs_grad(b);
                if (need_db) {
                    b->ensure_grad();
                    for (std::int64_t n = 0; n < N; ++n)
                        for (std::int64_t oc = 0; oc < C_out; ++oc) {
                            const T* grow = out->grad.data() + out->idx(n, oc, 0, 0);
                            T acc(0);
                            for (std::int64_t p = 0; p < P; ++p) acc += grow[p];
                            b->grad[static_cast<std::size_t>(oc)] += acc;
                        }
                }
                if (!need_dx && !need_dw) return;
                if (need_dx) x->ensure_grad();
                if (need_dw) w->ensure_grad();
                const bool split = conv_threads() >= 2 && N >= 8 &&
                                   split_work >= detail::kSplitWorkThreshold;
                const int workers = split ? 2 : 1;
                std::vector<std::vector<T>> dw_parts(
                    need_dw ? static_cast<std::size_t>(workers) : 0,
                    std::vector<T>(w->data.size(), T(0)));
                detail::split_batch(N, split_work, [&](std::int64_t n0, std::int64_t n1,
                                                       int worker) {
                    std::vector<T> colbuf(direct ? 0 : static_cast<std::size_t>(K * P));
                    std::vector<T> colT(need_dw ? static_cast<std::size_t>(K * P) : 0);
                    std::vector<T> dcol((need_dx && !direct) ? static_cast<std::size_t>(K * P)
                                                             : 0);
                    T* dw = need_dw ? dw_parts[static_cast<std::size_t>(worker)].data()
                                    : nullptr;
                    for (std::int64_t n = n0; n < n1; ++n) {
                        for (std::int64_t gi = 0; gi < g; ++gi) {
                            const T* grow = out->grad.data() + out->idx(n, gi * cg_out, 0, 0);
                            if (need_dw) {
                                const T* colp;
                                if (direct) {
                                    colp = x->data.data() + x->idx(n, gi * cg_in, 0, 0);
                                } else {
                                    detail::im2col(*x, n, gi * cg_in, cg_in, kh, kw, stride, pad,
                                                   h_out, w_out, colbuf.data());
                                    colp = colbuf.data();
                                }
                                detail::transpose(colp, colT.data(), K, P);
                                detail::gemm_nn_acc(grow, colT.data(), dw + gi * cg_out * K,
                                                    cg_out, P, K);
                            }
                            if (need_dx) {
                                if (direct) {
                                    detail::gemm_tn_acc(
                                        w->data.data() + gi * cg_out * K, grow,
                                        x->grad.data() + x->idx(n, gi * cg_in, 0, 0), cg_out, K,
                                        P);
                                } else {
                                    std::fill(dcol.begin(), dcol.end(), T(0));
                                    detail::gemm_tn_acc(w->data.data() + gi * cg_out * K, grow,
                                                        dcol.data(), cg_out, K, P);
                                    detail::col2im_acc(dcol.data(), n, gi * cg_in, cg_in, kh, kw,
                                                       stride, pad, h_out, w_out, *x);
                                }
                            }
                        }
                    }
                });
                if (need_dw) {
                    for (const auto& part : dw_parts) {  // fixed reduction order
                        for (std::size_t i = 0; i < part.size(); ++i) w->grad[i] += part[i];
                    }
                }
            });
    }
    return out;
}

enum class PoolKind { avg, max };

namespace detail {

template <typename T>
void check_pool_geometry(const TensorT<T>& x, std::int64_t k, std::int64_t stride,
                         std::int64_t pad) {
    if (k < 1 || stride < 1 || pad < 0) {
        throw std::invalid_argument("pool2d: k >= 1, stride >= 1, pad >= 0 required");
    }
    if (pad >= k) {
        throw std::invalid_argument("pool2d: window of size " + std::to_string(k) +
                                    " exceeded by padding " + std::to_string(pad));
    }
    if (conv_out_extent(x.shape.h, pad, k, stride) <= 0 ||
        conv_out_extent(x.shape.w, pad, k, stride) <= 0) {
        throw std::invalid_argument("pool2d: window exceeds padded input " + x.shape.str());
    }
}

}  // namespace detail

// Average pooling sums over the padded window and divides by k*k
// (zero padding contributes to the mean); backward spreads grad/(k*k)
// over the in-bounds window positions.
template <typename T>
TensorPtrT<T> avg_pool2d(TapeT<T>* tape, const TensorPtrT<T>& x, std::int64_t k,
                         std::int64_t stride, std::int64_t pad) {
    detail::check_pool_geometry(*x, k, stride, pad);
    const std::int64_t N = x->shape.n, C = x->shape.c, H = x->shape.h, W = x->shape.w;
    const std::int64_t h_out = conv_out_extent(H, pad, k, stride);
    const std::int64_t w_out = conv_out_extent(W, pad, k, stride);
    auto out = make_tensor<T>(Shape{N, C, h_out, w_out});
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t ho = 0; ho < h_out; ++ho)
                for (std::int64_t wo = 0; wo < w_out; ++wo) {
                    T acc(0);
                    for (std::int64_t ky = 0; ky < k; ++ky) {
                        const std::int64_t hi = ho * stride - pad + ky;
                        if (hi < 0 || hi >= H) continue;
                        for (std::int64_t kx = 0; kx < k; ++kx) {
                            const std::int64_t wi = wo * stride - pad + kx;
                            if (wi < 0 || wi >= W) continue;
                            acc += x->at(n, c, hi, wi);
                        }
                    }
                    out->at(n, c, ho, wo) = acc * inv;
                }
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c)
                    for (std::int64_t ho = 0; ho < h_out; ++ho)
                        for (std::int64_t wo = 0; wo < w_out; ++wo) {
                            const T gv = out->grad[static_cast<std::size_t>(
                                             out->idx(n, c, ho, wo))] *
                                         inv;
                            for (std::int64_t ky = 0; ky < k; ++ky) {
                                const std::int64_t hi = ho * stride - pad + ky;
                                if (hi < 0 || hi >= H) continue;
                                for (std::int64_t kx = 0; kx < k; ++kx) {
                                    const std::int64_t wi = wo * stride - pad + kx;
                                    if (wi < 0 || wi >= W) continue;
                                    x->grad[static_cast<std::size_t>(x->idx(n, c, hi, wi))] += gv;
                                }
                            }
                        }
        });
    }
    return out;
}

struct PoolIndices {
    std::int64_t in_h = 0;
    std::int64_t in_w = 0;
    std::vector<std::int64_t> pos;  // flat h*W+w argmax per output element
};

// Max pooling; ties resolve to the first window position in row-major scan
// order so the backward route is deterministic.
template <typename T>
std::pair<TensorPtrT<T>, std::shared_ptr<PoolIndices>> max_pool2d_indices(
    TapeT<T>* tape, const TensorPtrT<T>& x, std::int64_t k, std::int64_t stride,
    std::int64_t pad) {
    detail::check_pool_geometry(*x, k, stride, pad);
    const std::int64_t N = x->shape.n, C = x->shape.c, H = x->shape.h, W = x->shape.w;
    const std::int64_t h_out = conv_out_extent(H, pad, k, stride);
    const std::int64_t w_out = conv_out_extent(W, pad, k, stride);
    auto out = make_tensor<T>(Shape{N, C, h_out, w_out});
    auto idx = std::make_shared<PoolIndices>();
    idx->in_h = H;
    idx->in_w = W;
    idx->pos.resize(static_cast<std::size_t>(out->numel()));
    std::size_t oi = 0;
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t ho = 0; ho < h_out; ++ho)
                for (std::int64_t wo = 0; wo < w_out; ++wo, ++oi) {
                    T best(0);
                    std::int64_t best_pos = -1;
                    for (std::int64_t ky = 0; ky < k; ++ky) {
                        const std::int64_t hi = ho * stride - pad + ky;
                        if (hi < 0 || hi >= H) continue;
                        for (std::int64_t kx = 0; kx < k; ++kx) {
                            const std::int64_t wi = wo * stride - pad + kx;
                            if (wi < 0 || wi >= W) continue;
                            const T v = x->at(n, c, hi, wi);
                            if (best_pos < 0 || v > best) {
                                best = v;
                                best_pos = hi * W + wi;
                            }
                        }
                    }
                    out->data[oi] = best;
                    idx->pos[oi] = best_pos;
                }
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            const std::int64_t plane = H * W;
            std::size_t oi2 = 0;
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    T* gx = x->grad.data() + (n * C + c) * plane;
                    for (std::int64_t p = 0; p < h_out * w_out; ++p, ++oi2) {
                        gx[idx->pos[oi2]] += out->grad[oi2];
                    }
                }
        });
    }
    return {out, idx};
}

template <typename T>
TensorPtrT<T> pool2d(TapeT<T>* tape, const TensorPtrT<T>& x, PoolKind kind, std::int64_t k,
                     std::int64_t stride, std::int64_t pad) {
    if (kind == PoolKind::avg) return avg_pool2d(tape, x, k, stride, pad);
    return max_pool2d_indices(tape, x, k, stride, pad).first;
}

// Scatter of pooled values back to the recorded argmax positions; the inverse
// of max_pool2d_indices for non-overlapping windows.
template <typename T>
TensorPtrT<T> max_unpool2d(TapeT<T>* tape, const TensorPtrT<T>& x,
                           const std::shared_ptr<PoolIndices>& idx) {
    const std::int64_t N = x->shape.n, C = x->shape.c;
    const std::int64_t patch = x->shape.h * x->shape.w;
    if (idx->pos.size() != static_cast<std::size_t>(x->numel())) {
        throw std::invalid_argument("max_unpool2d: index count does not match input");
    }
    auto out = make_tensor<T>(Shape{N, C, idx->in_h, idx->in_w});
    const std::int64_t plane = idx->in_h * idx->in_w;
    std::size_t xi = 0;
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            T* dst = out->data.data() + (n * C + c) * plane;
            for (std::int64_t p = 0; p < patch; ++p, ++xi) dst[idx->pos[xi]] += x->data[xi];
        }
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            std::size_t xi2 = 0;
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* src = out->grad.data() + (n * C + c) * plane;
                    for (std::int64_t p = 0; p < patch; ++p, ++xi2)
                        x->grad[xi2] += src[idx->pos[xi2]];
                }
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> global_avg_pool(TapeT<T>* tape, const TensorPtrT<T>& x) {
    const std::int64_t N = x->shape.n, C = x->shape.c, plane = x->shape.h * x->shape.w;
    auto out = make_tensor<T>(Shape{N, C, 1, 1});
    const T inv = T(1) / static_cast<T>(plane);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* src = x->data.data() + (n * C + c) * plane;
            T acc(0);
            for (std::int64_t p = 0; p < plane; ++p) acc += src[p];
            out->at(n, c, 0, 0) = acc * inv;
        }
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T gv = out->grad[static_cast<std::size_t>(n * C + c)] * inv;
                    T* gx = x->grad.data() + (n * C + c) * plane;
                    for (std::int64_t p = 0; p < plane; ++p) gx[p] += gv;
                }
        });
    }
    return out;
}

// Batch normalization over NCHW with per-channel affine. Training mode
// normalizes by (biased) batch statistics and folds them into the running
// estimates; eval mode normalizes by the running estimates.
template <typename T>
TensorPtrT<T> batchnorm2d(TapeT<T>* tape, const TensorPtrT<T>& x, const TensorPtrT<T>& scale,
                          const TensorPtrT<T>& shift,
                          const std::type_identity_t<TensorPtrT<T>>& running_mean,
                          const std::type_identity_t<TensorPtrT<T>>& running_var, bool train,
                          T momentum, T eps) {
    const std::int64_t N = x->shape.n, C = x->shape.c, plane = x->shape.h * x->shape.w;
    if (scale->numel() != C || shift->numel() != C) {
        throw std::invalid_argument("batchnorm2d: scale/shift length must equal channel count");
    }
    if (!(eps > T(0))) throw std::invalid_argument("batchnorm2d: eps must be > 0");
    const std::int64_t m = N * plane;

    std::vector<T> mean(static_cast<std::size_t>(C), T(0));
    std::vector<T> var(static_cast<std::size_t>(C), T(0));
    if (train) {
        for (std::int64_t c = 0; c < C; ++c) {
            T acc(0);
            for (std::int64_t n = 0; n < N; ++n) {
                const T* src = x->data.data() + (n * C + c) * plane;
                for (std::int64_t p = 0; p < plane; ++p) acc += src[p];
            }
            mean[static_cast<std::size_t>(c)] = acc / static_cast<T>(m);
        }
        for (std::int64_t c = 0; c < C; ++c) {
            const T mu = mean[static_cast<std::size_t>(c)];
            T acc(0);
            for (std::int64_t n = 0; n < N; ++n) {
            const T* src = x->data.data() + (n * C + c) * plane;
                for (std::int64_t p = 0; p < plane; ++p) {
                    const T d = src[p] - mu;
                    acc += d * d;
                }
            }
            var[static_cast<std::size_t>(c)] = acc / static_cast<T>(m);
        }
        if (running_mean && running_var) {
            for (std::int64_t c = 0; c < C; ++c) {
                auto ci = static_cast<std::size_t>(c);
                running_mean->data[ci] = (T(1) - momentum) * running_mean->data[ci] +
                                         momentum * mean[ci];
                running_var->data[ci] = (T(1) - momentum) * running_var->data[ci] +
                                        momentum * var[ci];
            }
        }
    } else {
        if (!running_mean || !running_var) {
            throw std::invalid_argument("batchnorm2d: eval mode requires running statistics");
        }
        mean.assign(running_mean->data.begin(), running_mean->data.end());
        var.assign(running_var->data.begin(), running_var->data.end());
    }

    auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c)
        (*invstd)[static_cast<std::size_t>(c)] =
            T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + eps);

    auto out = make_tensor<T>(x->shape);
    auto xhat = std::make_shared<std::vector<T>>(x->data.size());
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            const T mu = mean[ci], is = (*invstd)[ci], g = scale->data[ci], be = shift->data[ci];
            const std::size_t base = static_cast<std::size_t>((n * C + c) * plane);
            for (std::int64_t p = 0; p < plane; ++p) {
                const T xn = (x->data[base + p] - mu) * is;
                (*xhat)[base + p] = xn;
                out->data[base + p] = xn * g + be;
            }
        }

    if (tape) {
        tape->record({x, scale, shift}, out, [=]() {
            const bool need_dx = tape->needs_grad(x);
            const bool need_dscale = tape->needs_grad(scale);
            const bool need_dshift = tape->needs_grad(shift);
            if (!need_dx && !need_dscale && !need_dshift) return;
            std::vector<T> sum_dy(static_cast<std::size_t>(C), T(0));
            std::vector<T> sum_dy_xhat(static_cast<std::size_t>(C), T(0));
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const std::size_t base = static_cast<std::size_t>((n * C + c) * plane);
                    T s1(0), s2(0);
                    for (std::int64_t p = 0; p < plane; ++p) {
                        const T dy = out->grad[base + p];
                        s1 += dy;
                        s2 += dy * (*xhat)[base + p];
                    }
                    sum_dy[static_cast<std::size_t>(c)] += s1;
                    sum_dy_xhat[static_cast<std::size_t>(c)] += s2;
                }
            if (need_dshift) {
                shift->ensure_grad();
                for (std::int64_t c = 0; c < C; ++c)
                    shift->grad[static_cast<std::size_t>(c)] += sum_dy[static_cast<std::size_t>(c)];
            }
            if (need_dscale) {
                scale->ensure_grad();
                for (std::int64_t c = 0; c < C; ++c)
                    scale->grad[static_cast<std::size_t>(c)] +=
                        sum_dy_xhat[static_cast<std::size_t>(c)];
            }
            if (need_dx) {
                x->ensure_grad();
                const T mf = static_cast<T>(m);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const auto ci = static_cast<std::size_t>(c);
                        const T gscale = scale->data[ci] * (*invstd)[ci];
                        const std::size_t base = static_cast<std::size_t>((n * C + c) * plane);
                        if (train) {
                            const T sdy = sum_dy[ci], sdyx = sum_dy_xhat[ci];
                            for (std::int64_t p = 0; p < plane; ++p) {
                                const T dy = out->grad[base + p];
                                x->grad[base + p] +=
                                    gscale * (dy - sdy / mf - (*xhat)[base + p] * sdyx / mf);
                            }
                        } else {
                            for (std::int64_t p = 0; p < plane; ++p)
                                x->grad[base + p] += gscale * out->grad[base + p];
                        }
                    }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> relu(TapeT<T>* tape, const TensorPtrT<T>& x) {
    auto out = make_tensor<T>(x->shape);
    for (std::size_t i = 0; i < x->data.size(); ++i)
        out->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            for (std::size_t i = 0; i < x->data.size(); ++i)
                if (x->data[i] > T(0)) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename T>
T sigmoid_scalar(T z) {
    if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
    const T e = std::exp(z);
    return e / (T(1) + e);
}

template <typename T>
TensorPtrT<T> sigmoid(TapeT<T>* tape, const TensorPtrT<T>& x) {
    auto out = make_tensor<T>(x->shape);
    for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = sigmoid_scalar(x->data[i]);
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            for (std::size_t i = 0; i < x->data.size(); ++i) {
                const T s = out->data[i];
                x->grad[i] += out->grad[i] * s * (T(1) - s);
            }
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> add(TapeT<T>* tape, const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (!(a->shape == b->shape)) {
        throw std::invalid_argument("add: shape mismatch " + a->shape.str() + " vs " +
                                    b->shape.str());
    }
    auto out = make_tensor<T>(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (tape) {
        tape->record({a, b}, out, [=]() {
            if (tape->needs_grad(a)) {
                a->ensure_grad();
                for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i];
            }
            if (tape->needs_grad(b)) {
                b->ensure_grad();
                for (std::size_t i = 0; i < b->data.size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> sub(TapeT<T>* tape, const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (!(a->shape == b->shape)) {
        throw std::invalid_argument("sub: shape mismatch " + a->shape.str() + " vs " +
                                    b->shape.str());
    }
    auto out = make_tensor<T>(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (tape) {
        tape->record({a, b}, out, [=]() {
            if (tape->needs_grad(a)) {
                a->ensure_grad();
                for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i];
            }
            if (tape->needs_grad(b)) {
                b->ensure_grad();
                for (std::size_t i = 0; i < b->data.size(); ++i) b->grad[i] -= out->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> mul(TapeT<T>* tape, const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (!(a->shape == b->shape)) {
        throw std::invalid_argument("mul: shape mismatch " + a->shape.str() + " vs " +
                                    b->shape.str());
    }
    auto out = make_tensor<T>(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (tape) {
        tape->record({a, b}, out, [=]() {
            if (tape->needs_grad(a)) {
                a->ensure_grad();
                for (std::size_t i = 0; i < a->data.size(); ++i)
                    a->grad[i] += out->grad[i] * b->data[i];
            }
            if (tape->needs_grad(b)) {
                b->ensure_grad();
                for (std::size_t i = 0; i < b->data.size(); ++i)
                    b->grad[i] += out->grad[i] * a->data[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> scale_by(TapeT<T>* tape, const TensorPtrT<T>& a, T s) {
    auto out = make_tensor<T>(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * s;
    if (tape) {
        tape->record({a}, out, [=]() {
            if (!tape->needs_grad(a)) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i] * s;
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> sum_all(TapeT<T>* tape, const TensorPtrT<T>& a) {
    T acc(0);
    for (T v : a->data) acc += v;
    auto out = scalar_tensor(acc);
    if (tape) {
        tape->record({a}, out, [=]() {
            if (!tape->needs_grad(a)) return;
            a->ensure_grad();
            const T g = out->grad[0];
            for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += g;
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> mean_all(TapeT<T>* tape, const TensorPtrT<T>& a) {
    return scale_by(tape, sum_all(tape, a), T(1) / static_cast<T>(a->numel()));
}

template <typename T>
TensorPtrT<T> concat_channels(TapeT<T>* tape, const std::vector<TensorPtrT<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const std::int64_t N = parts[0]->shape.n, H = parts[0]->shape.h, W = parts[0]->shape.w;
    std::int64_t C = 0;
    for (const auto& p : parts) {
        if (p->shape.n != N || p->shape.h != H || p->shape.w != W) {
            throw std::invalid_argument("concat_channels: mismatched shapes");
        }
        C += p->shape.c;
    }
    auto out = make_tensor<T>(Shape{N, C, H, W});
    const std::int64_t plane = H * W;
    for (std::int64_t n = 0; n < N; ++n) {
        std::int64_t c0 = 0;
        for (const auto& p : parts) {
            const std::size_t len = static_cast<std::size_t>(p->shape.c * plane);
            std::copy_n(p->data.data() + n * p->shape.c * plane, len,
                        out->data.data() + out->idx(n, c0, 0, 0));
            c0 += p->shape.c;
        }
    }
    if (tape) {
        tape->record(parts, out, [=]() {
            for (std::int64_t n = 0; n < N; ++n) {
                std::int64_t c0 = 0;
                for (const auto& p : parts) {
                    if (tape->needs_grad(p)) {
                        p->ensure_grad();
                        const std::size_t len = static_cast<std::size_t>(p->shape.c * plane);
                        const T* src = out->grad.data() + out->idx(n, c0, 0, 0);
                        T* dst = p->grad.data() + n * p->shape.c * plane;
                        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                    }
                    c0 += p->shape.c;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> slice_channels(TapeT<T>* tape, const TensorPtrT<T>& x, std::int64_t c0,
                             std::int64_t count) {
    const std::int64_t N = x->shape.n, C = x->shape.c, plane = x->shape.h * x->shape.w;
    if (c0 < 0 || count < 1 || c0 + count > C) {
        throw std::invalid_argument("slice_channels: range [" + std::to_string(c0) + ", " +
                                    std::to_string(c0 + count) + ") outside " +
                                    std::to_string(C) + " channels");
    }
    auto out = make_tensor<T>(Shape{N, count, x->shape.h, x->shape.w});
    for (std::int64_t n = 0; n < N; ++n) {
        std::copy_n(x->data.data() + (n * C + c0) * plane,
                    static_cast<std::size_t>(count * plane),
                    out->data.data() + n * count * plane);
    }
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n) {
                const T* src = out->grad.data() + n * count * plane;
                T* dst = x->grad.data() + (n * C + c0) * plane;
                for (std::int64_t i = 0; i < count * plane; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

// Permutation interleaving primitive outputs: input channel p*c_in + c
// (primitive p, source channel c) moves to c*k + p, so each contiguous group
// of k channels holds one feature from every primitive.
inline std::vector<std::int64_t> shuffle_permutation(std::int64_t channels, std::int64_t k) {
    if (k < 1 || channels % k != 0) {
        throw std::invalid_argument("channel_shuffle: " + std::to_string(channels) +
                                    " channels not divisible by k=" + std::to_string(k));
    }
    const std::int64_t c_in = channels / k;
    std::vector<std::int64_t> src_of(static_cast<std::size_t>(channels));
    for (std::int64_t j = 0; j < channels; ++j) {
        const std::int64_t c = j / k;
        const std::int64_t p = j % k;
        src_of[static_cast<std::size_t>(j)] = p * c_in + c;
    }
    return src_of;
}

template <typename T>
TensorPtrT<T> permute_channels(TapeT<T>* tape, const TensorPtrT<T>& x,
                               const std::vector<std::int64_t>& src_of) {
    const std::int64_t N = x->shape.n, C = x->shape.c, plane = x->shape.h * x->shape.w;
    if (static_cast<std::int64_t>(src_of.size()) != C) {
        throw std::invalid_argument("permute_channels: permutation length mismatch");
    }
    auto out = make_tensor<T>(x->shape);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t j = 0; j < C; ++j) {
            std::copy_n(x->data.data() + (n * C + src_of[static_cast<std::size_t>(j)]) * plane,
                        static_cast<std::size_t>(plane), out->data.data() + (n * C + j) * plane);
        }
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t j = 0; j < C; ++j) {
                    const T* src = out->grad.data() + (n * C + j) * plane;
                    T* dst = x->grad.data() +
                             (n * C + src_of[static_cast<std::size_t>(j)]) * plane;
                    for (std::int64_t p = 0; p < plane; ++p) dst[p] += src[p];
                }
        });
    }
    return out;
}

template <typename T>
TensorPtrT<T> channel_shuffle(TapeT<T>* tape, const TensorPtrT<T>& x, std::int64_t k) {
    return permute_channels(tape, x, shuffle_permutation(x->shape.c, k));
}

// Per-channel spatial displacement with zero fill at vacated positions.
// offsets[c] = (dy, dx): content of channel c moves down dy rows, right dx cols.
template <typename T>
TensorPtrT<T> shift_channels(TapeT<T>* tape, const TensorPtrT<T>& x,
                             const std::vector<std::pair<int, int>>& offsets) {
    const std::int64_t N = x->shape.n, C = x->shape.c, H = x->shape.h, W = x->shape.w;
    if (static_cast<std::int64_t>(offsets.size()) != C) {
        throw std::invalid_argument("shift_channels: offset table length mismatch");
    }
    auto out = make_tensor<T>(x->shape);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const auto [dy, dx] = offsets[static_cast<std::size_t>(c)];
            for (std::int64_t y = 0; y < H; ++y) {
                const std::int64_t sy = y - dy;
                if (sy < 0 || sy >= H) continue;
                for (std::int64_t x2 = 0; x2 < W; ++x2) {
                    const std::int64_t sx = x2 - dx;
                    if (sx < 0 || sx >= W) continue;
                    out->at(n, c, y, x2) = x->at(n, c, sy, sx);
                }
            }
        }
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const auto [dy, dx] = offsets[static_cast<std::size_t>(c)];
                    for (std::int64_t y = 0; y < H; ++y) {
                        const std::int64_t sy = y - dy;
                        if (sy < 0 || sy >= H) continue;
                        for (std::int64_t x2 = 0; x2 < W; ++x2) {
                            const std::int64_t sx = x2 - dx;
                            if (sx < 0 || sx >= W) continue;
                            x->grad[static_cast<std::size_t>(x->idx(n, c, sy, sx))] +=
                                out->grad[static_cast<std::size_t>(out->idx(n, c, y, x2))];
                        }
                    }
                }
        });
    }
    return out;
}

// Broadcast add of a per-channel-and-position mask over the batch dimension.
template <typename T>
TensorPtrT<T> add_broadcast_n(TapeT<T>* tape, const TensorPtrT<T>& x, const TensorPtrT<T>& m) {
    if (m->shape.n != 1 || m->shape.c != x->shape.c || m->shape.h != x->shape.h ||
        m->shape.w != x->shape.w) {
        throw std::invalid_argument("add_broadcast_n: mask shape " + m->shape.str() +
                                    " incompatible with " + x->shape.str());
    }
    const std::int64_t N = x->shape.n;
    const std::int64_t chw = x->shape.c * x->shape.h * x->shape.w;
    auto out = make_tensor<T>(x->shape);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < chw; ++i)
            out->data[static_cast<std::size_t>(n * chw + i)] =
                x->data[static_cast<std::size_t>(n * chw + i)] +
                m->data[static_cast<std::size_t>(i)];
    if (tape) {
        tape->record({x, m}, out, [=]() {
            if (tape->needs_grad(x)) {
                x->ensure_grad();
                for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += out->grad[i];
            }
            if (tape->needs_grad(m)) {
                m->ensure_grad();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t i = 0; i < chw; ++i)
                        m->grad[static_cast<std::size_t>(i)] +=
                            out->grad[static_cast<std::size_t>(n * chw + i)];
            }
        });
    }
    return out;
}

// Zeroes the channels whose mask entry is 0; mask fixed for the run.
template <typename T>
TensorPtrT<T> mask_channels(TapeT<T>* tape, const TensorPtrT<T>& x,
                            const std::vector<std::uint8_t>& keep) {
    const std::int64_t N = x->shape.n, C = x->shape.c, plane = x->shape.h * x->shape.w;
    if (static_cast<std::int64_t>(keep.size()) != C) {
        throw std::invalid_argument("mask_channels: mask length must equal channel count");
    }
    auto out = make_tensor<T>(x->shape);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            if (!keep[static_cast<std::size_t>(c)]) continue;
            std::copy_n(x->data.data() + (n * C + c) * plane, static_cast<std::size_t>(plane),
                        out->data.data() + (n * C + c) * plane);
        }
    if (tape) {
        tape->record({x}, out, [=]() {
            if (!tape->needs_grad(x)) return;
            x->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    if (!keep[static_cast<std::size_t>(c)]) continue;
                    const T* src = out->grad.data() + (n * C + c) * plane;
                    T* dst = x->grad.data() + (n * C + c) * plane;
                    for (std::int64_t p = 0; p < plane; ++p) dst[p] += src[p];
                }
        });
    }
    return out;
}

// Numerically stable mean binary cross-entropy on logits.
template <typename T>
TensorPtrT<T> bce_with_logits_mean(TapeT<T>* tape, const TensorPtrT<T>& logits,
                                   const TensorPtrT<T>& targets) {
    if (!(logits->shape == targets->shape)) {
        throw std::invalid_argument("bce_with_logits: shape mismatch");
    }
    T acc(0);
    for (std::size_t i = 0; i < logits->data.size(); ++i) {
        const T z = logits->data[i];
        const T y = targets->data[i];
        acc += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    const T inv = T(1) / static_cast<T>(logits->numel());
    auto out = scalar_tensor(acc * inv);
    if (tape) {
        tape->record({logits}, out, [=]() {
            if (!tape->needs_grad(logits)) return;
            logits->ensure_grad();
            const T g = out->grad[0] * inv;
            for (std::size_t i = 0; i < logits->data.size(); ++i)
                logits->grad[i] += g * (sigmoid_scalar(logits->data[i]) - targets->data[i]);
        });
    }
    return out;
}

// Mean absolute error; subgradient 0 at exact ties.
template <typename T>
TensorPtrT<T> l1_loss_mean(TapeT<T>* tape, const TensorPtrT<T>& pred,
                           const TensorPtrT<T>& target) {
    if (!(pred->shape == target->shape)) throw std::invalid_argument("l1_loss: shape mismatch");
    T acc(0);
    for (std::size_t i = 0; i < pred->data.size(); ++i)
        acc += std::abs(pred->data[i] - target->data[i]);
    const T inv = T(1) / static_cast<T>(pred->numel());
    auto out = scalar_tensor(acc * inv);
    if (tape) {
        tape->record({pred}, out, [=]() {
            if (!tape->needs_grad(pred)) return;
            pred->ensure_grad();
            const T g = out->grad[0] * inv;
            for (std::size_t i = 0; i < pred->data.size(); ++i) {
                const T d = pred->data[i] - target->data[i];
                if (d > T(0)) pred->grad[i] += g;
                else if (d < T(0)) pred->grad[i] -= g;
            }
        });
    }
    return out;
}

}  // namespace etrnlp
