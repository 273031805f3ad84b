#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "gex/parallel.hpp"

// Raw dense kernels, templated on the scalar type. The float instantiation
// is the production path; tests may instantiate double for high-precision
// gradient verification. All loops have a fixed traversal order: for conv,
// the per-output-element summation runs channel-major, then kernel row,
// then kernel column, regardless of tiling or worker count.

namespace gex::detail {

using std::int64_t;

// ---------------------------------------------------------------- gemm ----

// C[M x P] += A[M x K] * B[K x P], all row-major. The inner accumulation
// over k is ascending for every output element; tiles only split P.
template <typename T>
void gemm_acc(int64_t M, int64_t K, int64_t P, const T* A, const T* B, T* C) {
    constexpr int64_t PT = 768;
    for (int64_t p0 = 0; p0 < P; p0 += PT) {
        const int64_t pl = std::min(PT, P - p0);
        int64_t m = 0;
        for (; m + 4 <= M; m += 4) {
            T* __restrict c0 = C + (m + 0) * P + p0;
            T* __restrict c1 = C + (m + 1) * P + p0;
            T* __restrict c2 = C + (m + 2) * P + p0;
            T* __restrict c3 = C + (m + 3) * P + p0;
            const T* a0 = A + (m + 0) * K;
            const T* a1 = A + (m + 1) * K;
            const T* a2 = A + (m + 2) * K;
            const T* a3 = A + (m + 3) * K;
            for (int64_t k = 0; k < K; ++k) {
                const T w0 = a0[k], w1 = a1[k], w2 = a2[k], w3 = a3[k];
                const T* __restrict b = B + k * P + p0;
                for (int64_t p = 0; p < pl; ++p) {
                    c0[p] += w0 * b[p];
                    c1[p] += w1 * b[p];
                    c2[p] += w2 * b[p];
                    c3[p] += w3 * b[p];
                }
            }
        }
        for (; m < M; ++m) {
            T* __restrict c0 = C + m * P + p0;
            const T* a0 = A + m * K;
            for (int64_t k = 0; k < K; ++k) {
                const T w0 = a0[k];
                const T* __restrict b = B + k * P + p0;
                for (int64_t p = 0; p < pl; ++p) c0[p] += w0 * b[p];
            }
        }
    }
}

// Blocked transpose: dst[P x K] = src[K x P].
template <typename T>
void transpose(int64_t K, int64_t P, const T* src, T* dst) {
    constexpr int64_t B = 32;
    for (int64_t k0 = 0; k0 < K; k0 += B)
        for (int64_t p0 = 0; p0 < P; p0 += B) {
            const int64_t kl = std::min(K, k0 + B), pl = std::min(P, p0 + B);
            for (int64_t k = k0; k < kl; ++k)
                for (int64_t p = p0; p < pl; ++p) dst[p * K + k] = src[k * P + p];
        }
}

// ---------------------------------------------------------------- conv ----

struct ConvGeom {
    int N, Cin, H, W;
    int Cout, kh, kw;
    int stride, pad;
    int groups;
    int Ho, Wo;

    int cg() const { return Cin / groups; }    // input channels per group
    int cog() const { return Cout / groups; }  // output channels per group
    int64_t patch() const { return static_cast<int64_t>(cg()) * kh * kw; }
    int64_t out_plane() const { return static_cast<int64_t>(Ho) * Wo; }
    bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// col[(cg*kh+r)*kw+c][oy*Wo+ox] = x[n][g*Cg+cg][oy*s-p+r][ox*s-p+c], 0 outside.
template <typename T>
void im2col(const ConvGeom& g, const T* x_nc, T* col) {
    const int64_t P = g.out_plane();
    for (int cg = 0; cg < g.cg(); ++cg) {
        const T* xc = x_nc + static_cast<int64_t>(cg) * g.H * g.W;
        for (int r = 0; r < g.kh; ++r) {
            for (int c = 0; c < g.kw; ++c) {
                T* row = col + ((static_cast<int64_t>(cg) * g.kh + r) * g.kw + c) * P;
                for (int oy = 0; oy < g.Ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + r;
                    T* dst = row + static_cast<int64_t>(oy) * g.Wo;
                    if (iy < 0 || iy >= g.H) {
                        std::fill(dst, dst + g.Wo, T(0));
                        continue;
                    }
                    const T* src = xc + static_cast<int64_t>(iy) * g.W;
                    int ox = 0;
                    // leading out-of-range columns
                    for (; ox < g.Wo && ox * g.stride - g.pad + c < 0; ++ox) dst[ox] = T(0);
                    if (g.stride == 1) {
                        int ix = ox - g.pad + c;
                        const int n_in = std::min(g.Wo - ox, g.W - ix);
                        if (n_in > 0) {
                            std::memcpy(dst + ox, src + ix, sizeof(T) * n_in);
                            ox += n_in;
                        }
                    } else {
                        for (; ox < g.Wo; ++ox) {
                            const int ix = ox * g.stride - g.pad + c;
                            if (ix >= g.W) break;
                            dst[ox] = src[ix];
                        }
                    }
                    for (; ox < g.Wo; ++ox) dst[ox] = T(0);
                }
            }
        }
    }
}

// Scatter-add of a column gradient back into the input gradient plane block.
template <typename T>
void col2im_add(const ConvGeom& g, const T* col, T* dx_nc) {
    const int64_t P = g.out_plane();
    for (int cg = 0; cg < g.cg(); ++cg) {
        T* xc = dx_nc + static_cast<int64_t>(cg) * g.H * g.W;
        for (int r = 0; r < g.kh; ++r) {
            for (int c = 0; c < g.kw; ++c) {
                const T* row = col + ((static_cast<int64_t>(cg) * g.kh + r) * g.kw + c) * P;
                for (int oy = 0; oy < g.Ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + r;
                    if (iy < 0 || iy >= g.H) continue;
                    const T* src = row + static_cast<int64_t>(oy) * g.Wo;
                    T* dstrow = xc + static_cast<int64_t>(iy) * g.W;
                    for (int ox = 0; ox < g.Wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + c;
                        if (ix < 0 || ix >= g.W) continue;
                        dstrow[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// Images per task; fixed so partial reductions are worker-count invariant.
inline constexpr int64_t kConvGrain = 8;

template <typename T>
void conv2d_forward(const ConvGeom& g, const T* x, const T* w, const T* bias, T* y) {
    const int64_t K = g.patch(), P = g.out_plane();
    const int64_t in_img = static_cast<int64_t>(g.Cin) * g.H * g.W;
    const int64_t out_img = static_cast<int64_t>(g.Cout) * P;
    parallel_for(g.N, kConvGrain, [&](int64_t lo, int64_t hi) {
        std::vector<T> col;
        if (!g.is_pointwise()) col.resize(static_cast<std::size_t>(K * P));
        for (int64_t n = lo; n < hi; ++n) {
            for (int gi = 0; gi < g.groups; ++gi) {
                const T* x_nc = x + n * in_img + static_cast<int64_t>(gi) * g.cg() * g.H * g.W;
                const T* colp = x_nc;
                if (!g.is_pointwise()) {
                    im2col(g, x_nc, col.data());
                    colp = col.data();
                }
                T* out = y + n * out_img + static_cast<int64_t>(gi) * g.cog() * P;
                for (int co = 0; co < g.cog(); ++co) {
                    const T b = bias ? bias[gi * g.cog() + co] : T(0);
                    std::fill(out + co * P, out + (co + 1) * P, b);
                }
                gemm_acc(g.cog(), K, P, w + static_cast<int64_t>(gi) * g.cog() * K, colp, out);
            }
        }
    });
}

// Any of dx/dw/db may be null. dw/db accumulation is chunked by fixed image
// ranges and reduced in chunk order.
template <typename T>
void conv2d_backward(const ConvGeom& g, const T* x, const T* w, const T* dy,
                     T* dx, T* dw, T* db) {
    const int64_t K = g.patch(), P = g.out_plane();
    const int64_t in_img = static_cast<int64_t>(g.Cin) * g.H * g.W;
    const int64_t out_img = static_cast<int64_t>(g.Cout) * P;
    const int64_t wsize = static_cast<int64_t>(g.Cout) * K;

    // W transposed per group: wt[g][k][cog]
    std::vector<T> wt;
    if (dx) {
        wt.resize(static_cast<std::size_t>(wsize));
        for (int gi = 0; gi < g.groups; ++gi)
            transpose(g.cog(), K, w + static_cast<int64_t>(gi) * g.cog() * K,
                      wt.data() + static_cast<int64_t>(gi) * g.cog() * K);
    }

    const int64_t nchunks = (g.N + kConvGrain - 1) / kConvGrain;
    std::vector<std::vector<T>> dw_parts, db_parts;
    if (nchunks > 1) {
        if (dw) dw_parts.assign(static_cast<std::size_t>(nchunks),
                                std::vector<T>(static_cast<std::size_t>(wsize), T(0)));
        if (db) db_parts.assign(static_cast<std::size_t>(nchunks),
                                std::vector<T>(static_cast<std::size_t>(g.Cout), T(0)));
    }

    ThreadPool::instance().run_chunks(nchunks, [&](int64_t chunk) {
        const int64_t lo = chunk * kConvGrain;
        const int64_t hi = std::min<int64_t>(g.N, lo + kConvGrain);
        T* dwp = dw ? (nchunks > 1 ? dw_parts[chunk].data() : dw) : nullptr;
        T* dbp = db ? (nchunks > 1 ? db_parts[chunk].data() : db) : nullptr;
        std::vector<T> col, colT, dcol;
        if (!g.is_pointwise()) col.resize(static_cast<std::size_t>(K * P));
        if (dwp) colT.resize(static_cast<std::size_t>(K * P));
        if (dx && !g.is_pointwise()) dcol.resize(static_cast<std::size_t>(K * P));
        for (int64_t n = lo; n < hi; ++n) {
            for (int gi = 0; gi < g.groups; ++gi) {
                const T* x_nc = x + n * in_img + static_cast<int64_t>(gi) * g.cg() * g.H * g.W;
                const T* dyg = dy + n * out_img + static_cast<int64_t>(gi) * g.cog() * P;
                const T* colp = x_nc;
                if (!g.is_pointwise()) {
                    im2col(g, x_nc, col.data());
                    colp = col.data();
                }
                if (dwp) {
                    transpose(K, P, colp, colT.data());
                    gemm_acc(g.cog(), P, K, dyg, colT.data(),
                             dwp + static_cast<int64_t>(gi) * g.cog() * K);
                }
                if (dbp) {
                    for (int co = 0; co < g.cog(); ++co) {
                        const T* r = dyg + co * P;
                        T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
                        int64_t p = 0;
                        for (; p + 4 <= P; p += 4) {
                            s0 += r[p];
                            s1 += r[p + 1];
                            s2 += r[p + 2];
                            s3 += r[p + 3];
                        }
                        for (; p < P; ++p) s0 += r[p];
                        dbp[gi * g.cog() + co] += ((s0 + s1) + (s2 + s3));
                    }
                }
                if (dx) {
                    T* dx_nc = dx + n * in_img + static_cast<int64_t>(gi) * g.cg() * g.H * g.W;
                    const T* wtg = wt.data() + static_cast<int64_t>(gi) * g.cog() * K;
                    if (g.is_pointwise()) {
                        gemm_acc(K, g.cog(), P, wtg, dyg, dx_nc);
                    } else {
                        std::fill(dcol.begin(), dcol.end(), T(0));
                        gemm_acc(K, g.cog(), P, wtg, dyg, dcol.data());
                        col2im_add(g, dcol.data(), dx_nc);
                    }
                }
            }
        }
    });

    if (nchunks > 1) {
        for (int64_t c = 0; c < nchunks; ++c) {
            if (dw)
                for (int64_t i = 0; i < wsize; ++i) dw[i] += dw_parts[c][i];
            if (db)
                for (int i = 0; i < g.Cout; ++i) db[i] += db_parts[c][i];
        }
    }
}

// ---------------------------------------------------------------- pool ----

struct PoolGeom {
    int N, C, H, W;
    int kh, kw;
    int stride;
    int padT, padL;  // trailing pad implied by the output size
    int Ho, Wo;
};

template <typename T>
void pool_avg_forward(const PoolGeom& g, const T* x, T* y) {
    const int64_t planes = static_cast<int64_t>(g.N) * g.C;
    const T inv = T(1) / (T(g.kh) * T(g.kw));  // count-include-pad divisor
    parallel_for(planes, 16, [&](int64_t lo, int64_t hi) {
        for (int64_t pl = lo; pl < hi; ++pl) {
            const T* xp = x + pl * g.H * g.W;
            T* yp = y + pl * g.Ho * g.Wo;
            for (int oy = 0; oy < g.Ho; ++oy) {
                const int y0 = oy * g.stride - g.padT;
                const int ylo = std::max(0, y0), yhi = std::min(g.H, y0 + g.kh);
                for (int ox = 0; ox < g.Wo; ++ox) {
                    const int x0 = ox * g.stride - g.padL;
                    const int xlo = std::max(0, x0), xhi = std::min(g.W, x0 + g.kw);
                    T s = 0;
                    for (int iy = ylo; iy < yhi; ++iy) {
                        const T* row = xp + static_cast<int64_t>(iy) * g.W;
                        for (int ix = xlo; ix < xhi; ++ix) s += row[ix];
                    }
                    yp[static_cast<int64_t>(oy) * g.Wo + ox] = s * inv;
                }
            }
        }
    });
}

template <typename T>
void pool_avg_backward(const PoolGeom& g, const T* dy, T* dx) {
    const int64_t planes = static_cast<int64_t>(g.N) * g.C;
    const T inv = T(1) / (T(g.kh) * T(g.kw));
    parallel_for(planes, 16, [&](int64_t lo, int64_t hi) {
        for (int64_t pl = lo; pl < hi; ++pl) {
            const T* dyp = dy + pl * g.Ho * g.Wo;
            T* dxp = dx + pl * g.H * g.W;
            for (int oy = 0; oy < g.Ho; ++oy) {
                const int y0 = oy * g.stride - g.padT;
                const int ylo = std::max(0, y0), yhi = std::min(g.H, y0 + g.kh);
                for (int ox = 0; ox < g.Wo; ++ox) {
                    const int x0 = ox * g.stride - g.padL;
                    const int xlo = std::max(0, x0), xhi = std::min(g.W, x0 + g.kw);
                    const T gv = dyp[static_cast<int64_t>(oy) * g.Wo + ox] * inv;
                    for (int iy = ylo; iy < yhi; ++iy) {
                        T* row = dxp + static_cast<int64_t>(iy) * g.W;
                        for (int ix = xlo; ix < xhi; ++ix) row[ix] += gv;
                    }
                }
            }
        }
    });
}

// Padded positions excluded from the max; first element in row-major scan
// order wins ties. argm stores the flat (iy*W+ix) winner per output.
template <typename T>
void pool_max_forward(const PoolGeom& g, const T* x, T* y, std::int32_t* argm) {
    const int64_t planes = static_cast<int64_t>(g.N) * g.C;
    parallel_for(planes, 16, [&](int64_t lo, int64_t hi) {
        for (int64_t pl = lo; pl < hi; ++pl) {
            const T* xp = x + pl * g.H * g.W;
            T* yp = y + pl * g.Ho * g.Wo;
            std::int32_t* ap = argm + pl * g.Ho * g.Wo;
            for (int oy = 0; oy < g.Ho; ++oy) {
                const int y0 = oy * g.stride - g.padT;
                const int ylo = std::max(0, y0), yhi = std::min(g.H, y0 + g.kh);
                for (int ox = 0; ox < g.Wo; ++ox) {
                    const int x0 = ox * g.stride - g.padL;
                    const int xlo = std::max(0, x0), xhi = std::min(g.W, x0 + g.kw);
                    T best = -std::numeric_limits<T>::infinity();
                    std::int32_t bidx = -1;
                    for (int iy = ylo; iy < yhi; ++iy) {
                        const T* row = xp + static_cast<int64_t>(iy) * g.W;
                        for (int ix = xlo; ix < xhi; ++ix) {
                            if (row[ix] > best) {
                                best = row[ix];
                                bidx = static_cast<std::int32_t>(iy * g.W + ix);
                            }
                        }
                    }
                    yp[static_cast<int64_t>(oy) * g.Wo + ox] = best;
                    ap[static_cast<int64_t>(oy) * g.Wo + ox] = bidx;
                }
            }
        }
    });
}

template <typename T>
void pool_max_backward(const PoolGeom& g, const T* dy, const std::int32_t* argm, T* dx) {
    const int64_t planes = static_cast<int64_t>(g.N) * g.C;
    const int64_t op = static_cast<int64_t>(g.Ho) * g.Wo;
    parallel_for(planes, 16, [&](int64_t lo, int64_t hi) {
        for (int64_t pl = lo; pl < hi; ++pl) {
            const T* dyp = dy + pl * op;
            const std::int32_t* ap = argm + pl * op;
            T* dxp = dx + pl * g.H * g.W;
            for (int64_t o = 0; o < op; ++o)
                if (ap[o] >= 0) dxp[ap[o]] += dyp[o];
        }
    });
}

// -------------------------------------------------------------- interp ----

template <typename T>
void interp_nearest_forward(int N, int C, int H, int W, int Ho, int Wo,
                            const T* x, T* y) {
    const int64_t planes = static_cast<int64_t>(N) * C;
    parallel_for(planes, 32, [&](int64_t lo, int64_t hi) {
        for (int64_t pl = lo; pl < hi; ++pl) {
            const T* xp = x + pl * H * W;
            T* yp = y + pl * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy) {
                const int iy = static_cast<int>((static_cast<int64_t>(oy) * H) / Ho);
                const T* src = xp + static_cast<int64_t>(iy) * W;
                T* dst = yp + static_cast<int64_t>(oy) * Wo;
                for (int ox = 0; ox < Wo; ++ox)
                    dst[ox] = src[(static_cast<int64_t>(ox) * W) / Wo];
            }
        }
    });
}

template <typename T>
void interp_nearest_backward(int N, int C, int H, int W, int Ho, int Wo,
                             const T* dy, T* dx) {
    const int64_t planes = static_cast<int64_t>(N) * C;
    parallel_for(planes, 32, [&](int64_t lo, int64_t hi) {
        for (int64_t pl = lo; pl < hi; ++pl) {
            const T* dyp = dy + pl * Ho * Wo;
            T* dxp = dx + pl * H * W;
            for (int oy = 0; oy < Ho; ++oy) {
                const int iy = static_cast<int>((static_cast<int64_t>(oy) * H) / Ho);
                T* dst = dxp + static_cast<int64_t>(iy) * W;
                const T* src = dyp + static_cast<int64_t>(oy) * Wo;
                for (int ox = 0; ox < Wo; ++ox)
                    dst[(static_cast<int64_t>(ox) * W) / Wo] += src[ox];
            }
        }
    });
}

// --------------------------------------------------------- elementwise ----

template <typename T, typename F>
void map_unary(int64_t n, const T* x, T* y, F&& f) {
    parallel_for(n, 1 << 16, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) y[i] = f(x[i]);
    });
}

// ----------------------------------------------------------- batchnorm ----

// Stats accumulate in double per channel, sequentially, so results do not
// depend on the worker count (channels are whole units of work).
template <typename T>
void bn_forward_train(int N, int C, int64_t plane, const T* x, const T* gamma,
                      const T* beta, T eps, T* y, T* xhat, T* mean_out, T* inv_out) {
    const int64_t cnt = static_cast<int64_t>(N) * plane;
    const int64_t cstride = static_cast<int64_t>(C) * plane;
    parallel_for(C, 4, [&](int64_t lo, int64_t hi) {
        for (int64_t c = lo; c < hi; ++c) {
            double s = 0.0, s2 = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* p = x + n * cstride + c * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const double v = p[i];
                    s += v;
                    s2 += v * v;
                }
            }
            const double mu = s / cnt;
            double var = s2 / cnt - mu * mu;
            if (var < 0.0) var = 0.0;
            const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
            mean_out[c] = static_cast<T>(mu);
            inv_out[c] = static_cast<T>(inv);
            const T g = gamma[c], b = beta[c], m = static_cast<T>(mu), iv = static_cast<T>(inv);
            for (int n = 0; n < N; ++n) {
                const T* p = x + n * cstride + c * plane;
                T* xh = xhat + n * cstride + c * plane;
                T* yo = y + n * cstride + c * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const T h = (p[i] - m) * iv;
                    xh[i] = h;
                    yo[i] = g * h + b;
                }
            }
        }
    });
}

template <typename T>
void bn_backward_train(int N, int C, int64_t plane, const T* dy, const T* xhat,
                       const T* gamma, const T* inv, T* dx, T* dgamma, T* dbeta) {
    const int64_t cnt = static_cast<int64_t>(N) * plane;
    const int64_t cstride = static_cast<int64_t>(C) * plane;
    parallel_for(C, 4, [&](int64_t lo, int64_t hi) {
        for (int64_t c = lo; c < hi; ++c) {
            double sdy = 0.0, sdyx = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* d = dy + n * cstride + c * plane;
                const T* xh = xhat + n * cstride + c * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sdy += d[i];
                    sdyx += static_cast<double>(d[i]) * xh[i];
                }
            }
            if (dgamma) dgamma[c] += static_cast<T>(sdyx);
            if (dbeta) dbeta[c] += static_cast<T>(sdy);
            if (dx) {
                const T k = gamma[c] * inv[c];
                const T mdy = static_cast<T>(sdy / cnt);
                const T mdyx = static_cast<T>(sdyx / cnt);
                for (int n = 0; n < N; ++n) {
                    const T* d = dy + n * cstride + c * plane;
                    const T* xh = xhat + n * cstride + c * plane;
                    T* o = dx + n * cstride + c * plane;
                    for (int64_t i = 0; i < plane; ++i)
                        o[i] += k * (d[i] - mdy - xh[i] * mdyx);
                }
            }
        }
    });
}

template <typename T>
void bn_forward_eval(int N, int C, int64_t plane, const T* x, const T* gamma,
                     const T* beta, const T* rmean, const T* rvar, T eps, T* y) {
    const int64_t cstride = static_cast<int64_t>(C) * plane;
    parallel_for(C, 8, [&](int64_t lo, int64_t hi) {
        for (int64_t c = lo; c < hi; ++c) {
            const T inv = T(1) / std::sqrt(rvar[c] + eps);
            const T g = gamma[c] * inv;
            const T b = beta[c] - gamma[c] * rmean[c] * inv;
            for (int n = 0; n < N; ++n) {
                const T* p = x + n * cstride + c * plane;
                T* o = y + n * cstride + c * plane;
                for (int64_t i = 0; i < plane; ++i) o[i] = g * p[i] + b;
            }
        }
    });
}

}  // namespace gex::detail
