#pragma once

#include <limits>

#include "ts/autodiff.hpp"

namespace ts::nn {

inline int64_t conv_out_size(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Unpack x (C,H,W) into cols (C*kh*kw, OH*OW); out-of-bounds reads are zero.
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t OH, int64_t OW, T* cols) {
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                T* row = cols + ((c * kh + ki) * kw + kj) * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    int64_t iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= H) {
                        for (int64_t ox = 0; ox < OW; ++ox) row[oy * OW + ox] = T(0);
                        continue;
                    }
                    const T* xr = x + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        int64_t ix = ox * stride + kj - pad;
                        row[oy * OW + ox] = (ix >= 0 && ix < W) ? xr[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_acc(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* dx) {
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                const T* row = cols + ((c * kh + ki) * kw + kj) * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    int64_t iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= H) continue;
                    T* xr = dx + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        int64_t ix = ox * stride + kj - pad;
                        if (ix >= 0 && ix < W) xr[ix] += row[oy * OW + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// 2-d convolution via im2col + matmul. x (B,C,H,W), w (K,C,kh,kw), bias (K).
template <class T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias, int64_t stride,
               int64_t pad) {
    const auto& xv = x->value;
    const auto& wv = w->value;
    if (xv.rank() != 4 || wv.rank() != 4 || xv.shape[1] != wv.shape[1])
        throw ContractError("conv2d: x " + shape_str(xv.shape) + " w " + shape_str(wv.shape));
    int64_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    int64_t K = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
    int64_t OH = conv_out_size(H, kh, stride, pad);
    int64_t OW = conv_out_size(W, kw, stride, pad);
    if (OH <= 0 || OW <= 0) throw ContractError("conv2d: empty output");
    int64_t CKK = C * kh * kw;

    TensorT<T> out(Shape{B, K, OH, OW}, T(0));
    std::vector<T> cols(static_cast<size_t>(CKK * OH * OW));
    for (int64_t b = 0; b < B; ++b) {
        detail::im2col(xv.ptr() + b * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
                       cols.data());
        matmul_acc(wv.ptr(), cols.data(), out.ptr() + b * K * OH * OW, K, CKK, OH * OW);
    }
    if (bias) {
        if (bias->value.numel() != K) throw ContractError("conv2d: bias dim mismatch");
        for (int64_t b = 0; b < B; ++b)
            for (int64_t k = 0; k < K; ++k) {
                T bv = bias->value.data[k];
                T* o = out.ptr() + (b * K + k) * OH * OW;
                for (int64_t i = 0; i < OH * OW; ++i) o[i] += bv;
            }
    }
    std::vector<VarT<T>> parents{x, w};
    if (bias) parents.push_back(bias);
    return make_node<T>(std::move(out), std::move(parents),
        [B, C, H, W, K, kh, kw, stride, pad, OH, OW, CKK](NodeT<T>& self) {
            auto& px = self.parents[0];
            auto& pw = self.parents[1];
            const auto& g = self.grad;
            std::vector<T> cols(static_cast<size_t>(CKK * OH * OW));
            std::vector<T> dcols;
            if (px->needs_grad) dcols.resize(static_cast<size_t>(CKK * OH * OW));
            for (int64_t b = 0; b < B; ++b) {
                const T* gb = g.ptr() + b * K * OH * OW;
                if (pw->needs_grad) {
                    detail::im2col(px->value.ptr() + b * C * H * W, C, H, W, kh, kw, stride, pad,
                                   OH, OW, cols.data());
                    matmul_acc_bt(gb, cols.data(), pw->ensure_grad().ptr(), K, OH * OW, CKK);
                }
                if (px->needs_grad) {
                    std::fill(dcols.begin(), dcols.end(), T(0));
                    matmul_acc_at(pw->value.ptr(), gb, dcols.data(), CKK, K, OH * OW);
                    detail::col2im_acc(dcols.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                                       px->ensure_grad().ptr() + b * C * H * W);
                }
            }
            if (self.parents.size() == 3 && self.parents[2]->needs_grad) {
                auto& gb2 = self.parents[2]->ensure_grad();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t k = 0; k < K; ++k) {
                        const T* o = g.ptr() + (b * K + k) * OH * OW;
                        T s = 0;
                        for (int64_t i = 0; i < OH * OW; ++i) s += o[i];
                        gb2.data[k] += s;
                    }
            }
        }, "conv2d");
}

template <class T>
VarT<T> maxpool2d(const VarT<T>& x, int64_t k, int64_t stride, int64_t pad) {
    const auto& xv = x->value;
    if (xv.rank() != 4) throw ContractError("maxpool2d: need (B,C,H,W)");
    int64_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    int64_t OH = conv_out_size(H, k, stride, pad);
    int64_t OW = conv_out_size(W, k, stride, pad);
    TensorT<T> out(Shape{B, C, OH, OW});
    std::vector<int64_t> argmax(static_cast<size_t>(B * C * OH * OW));
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* xp = xv.ptr() + bc * H * W;
        T* op = out.ptr() + bc * OH * OW;
        int64_t* am = argmax.data() + bc * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                int64_t best_idx = -1;
                for (int64_t ki = 0; ki < k; ++ki) {
                    int64_t iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t kj = 0; kj < k; ++kj) {
                        int64_t ix = ox * stride + kj - pad;
                        if (ix < 0 || ix >= W) continue;
                        T v = xp[iy * W + ix];
                        if (v > best) {
                            best = v;
                            best_idx = iy * W + ix;
                        }
                    }
                }
                op[oy * OW + ox] = best;
                am[oy * OW + ox] = best_idx;
            }
    }
    return make_node<T>(std::move(out), {x}, [B, C, H, W, OH, OW, argmax = std::move(argmax)](
                                                 NodeT<T>& self) {
        auto& px = self.parents[0];
        if (!px->needs_grad) return;
        auto& gx = px->ensure_grad();
        for (int64_t bc = 0; bc < B * C; ++bc)
            for (int64_t i = 0; i < OH * OW; ++i) {
                int64_t src = argmax[bc * OH * OW + i];
                if (src >= 0) gx.data[bc * H * W + src] += self.grad.data[bc * OH * OW + i];
            }
    }, "maxpool");
}

// (B,C,H,W) -> (B,C)
template <class T>
VarT<T> global_avgpool(const VarT<T>& x) {
    const auto& xv = x->value;
    if (xv.rank() != 4) throw ContractError("global_avgpool: need (B,C,H,W)");
    int64_t B = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
    TensorT<T> out(Shape{B, C});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* xp = xv.ptr() + bc * HW;
        T s = 0;
        for (int64_t i = 0; i < HW; ++i) s += xp[i];
        out.data[bc] = s / static_cast<T>(HW);
    }
    return make_node<T>(std::move(out), {x}, [B, C, HW](NodeT<T>& self) {
        auto& px = self.parents[0];
        if (!px->needs_grad) return;
        auto& gx = px->ensure_grad();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            T g = self.grad.data[bc] / static_cast<T>(HW);
            T* gp = gx.ptr() + bc * HW;
            for (int64_t i = 0; i < HW; ++i) gp[i] += g;
        }
    }, "avgpool");
}

// Nearest-neighbour 2x upsample.
template <class T>
VarT<T> upsample2(const VarT<T>& x) {
    const auto& xv = x->value;
    if (xv.rank() != 4) throw ContractError("upsample2: need (B,C,H,W)");
    int64_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    TensorT<T> out(Shape{B, C, 2 * H, 2 * W});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* xp = xv.ptr() + bc * H * W;
        T* op = out.ptr() + bc * 4 * H * W;
        for (int64_t y = 0; y < 2 * H; ++y)
            for (int64_t xq = 0; xq < 2 * W; ++xq)
                op[y * 2 * W + xq] = xp[(y / 2) * W + (xq / 2)];
    }
    return make_node<T>(std::move(out), {x}, [B, C, H, W](NodeT<T>& self) {
        auto& px = self.parents[0];
        if (!px->needs_grad) return;
        auto& gx = px->ensure_grad();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            const T* gp = self.grad.ptr() + bc * 4 * H * W;
            T* dp = gx.ptr() + bc * H * W;
            for (int64_t y = 0; y < 2 * H; ++y)
                for (int64_t xq = 0; xq < 2 * W; ++xq) dp[(y / 2) * W + (xq / 2)] += gp[y * 2 * W + xq];
        }
    }, "upsample2");
}

// Running statistics owned by the model, updated as a training side effect.
template <class T>
struct BnStats {
    TensorT<T> mean;
    TensorT<T> var;
    explicit BnStats(int64_t channels = 0)
        : mean(channels ? TensorT<T>(Shape{channels}, T(0)) : TensorT<T>()),
          var(channels ? TensorT<T>(Shape{channels}, T(1)) : TensorT<T>()) {}
};

// Batch normalization over (B,H,W) per channel. In training mode the batch
// statistics normalize and the running stats are updated; in inference mode
// the frozen running stats are used.
template <class T>
VarT<T> batchnorm2d(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta,
                    BnStats<T>* stats, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    const auto& xv = x->value;
    if (xv.rank() != 4) throw ContractError("batchnorm2d: need (B,C,H,W)");
    int64_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw ContractError("batchnorm2d: gamma/beta dim mismatch");
    int64_t N = B * H * W;
    int64_t HW = H * W;

    TensorT<T> mean(Shape{C}), inv_std(Shape{C});
    if (training) {
        for (int64_t c = 0; c < C; ++c) {
            T m = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* p = xv.ptr() + (b * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) m += p[i];
            }
            m /= static_cast<T>(N);
            T v = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* p = xv.ptr() + (b * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    T d = p[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<T>(N);
            mean.data[c] = m;
            inv_std.data[c] = T(1) / std::sqrt(v + eps);
            if (stats) {
                stats->mean.data[c] = (T(1) - momentum) * stats->mean.data[c] + momentum * m;
                stats->var.data[c] = (T(1) - momentum) * stats->var.data[c] + momentum * v;
            }
        }
    } else {
        if (!stats) throw ContractError("batchnorm2d: inference requires running stats");
        for (int64_t c = 0; c < C; ++c) {
            mean.data[c] = stats->mean.data[c];
            inv_std.data[c] = T(1) / std::sqrt(stats->var.data[c] + eps);
        }
    }

    TensorT<T> out(xv.shape);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* p = xv.ptr() + (b * C + c) * HW;
            T* o = out.ptr() + (b * C + c) * HW;
            T m = mean.data[c], is = inv_std.data[c];
            T gm = gamma->value.data[c], bt = beta->value.data[c];
            for (int64_t i = 0; i < HW; ++i) o[i] = gm * (p[i] - m) * is + bt;
        }

    return make_node<T>(std::move(out), {x, gamma, beta},
        [B, C, HW, N, training, mean = std::move(mean), inv_std = std::move(inv_std)](
            NodeT<T>& self) {
            auto& px = self.parents[0];
            auto& pg = self.parents[1];
            auto& pb = self.parents[2];
            const auto& g = self.grad;
            const auto& xval = px->value;
            for (int64_t c = 0; c < C; ++c) {
                T m = mean.data[c], is = inv_std.data[c];
                T sum_g = 0, sum_gx = 0;
                for (int64_t b = 0; b < B; ++b) {
                    const T* gp = g.ptr() + (b * C + c) * HW;
                    const T* xp = xval.ptr() + (b * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        sum_g += gp[i];
                        sum_gx += gp[i] * (xp[i] - m) * is;
                    }
                }
                if (pg->needs_grad) pg->ensure_grad().data[c] += sum_gx;
                if (pb->needs_grad) pb->ensure_grad().data[c] += sum_g;
                if (px->needs_grad) {
                    auto& gx = px->ensure_grad();
                    T gm = pg->value.data[c];
                    for (int64_t b = 0; b < B; ++b) {
                        const T* gp = g.ptr() + (b * C + c) * HW;
                        const T* xp = xval.ptr() + (b * C + c) * HW;
                        T* dp = gx.ptr() + (b * C + c) * HW;
                        if (training) {
                            T invN = T(1) / static_cast<T>(N);
                            for (int64_t i = 0; i < HW; ++i) {
                                T xh = (xp[i] - m) * is;
                                dp[i] += gm * is * (gp[i] - invN * sum_g - xh * invN * sum_gx);
                            }
                        } else {
                            for (int64_t i = 0; i < HW; ++i) dp[i] += gm * is * gp[i];
                        }
                    }
                }
            }
        }, "batchnorm2d");
}

}  // namespace ts::nn
