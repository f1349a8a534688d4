#pragma once

// Dtype-templated numeric kernels. Plain loops arranged so the hot inner loop
// runs over contiguous memory; the compiler vectorizes these at -O3.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace metafew::kern {

template <class T>
void add(const T* a, const T* b, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
}

template <class T>
void sub(const T* a, const T* b, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
}

template <class T>
void mul(const T* a, const T* b, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
}

template <class T>
void scale(const T* a, T c, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = a[i] * c;
}

template <class T>
void add_scalar(const T* a, T c, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = a[i] + c;
}

template <class T>
void pow_const(const T* a, T c, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = std::pow(a[i], c);
}

template <class T>
void log_e(const T* a, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = std::log(a[i]);
}

template <class T>
void exp_e(const T* a, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = std::exp(a[i]);
}

template <class T>
void relu(const T* a, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = a[i] > T(0) ? a[i] : T(0);
}

template <class T>
void heaviside(const T* a, T* o, int64_t n) {
  // subgradient convention: 0 at the kink
  for (int64_t i = 0; i < n; ++i) o[i] = a[i] > T(0) ? T(1) : T(0);
}

template <class T>
void matmul(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  std::fill(c, c + m * n, T(0));
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      T aik = arow[kk];
      const T* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

template <class T>
void transpose2d(const T* a, T* o, int64_t r, int64_t c) {
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) o[j * r + i] = a[i * c + j];
}

template <class T>
void sum_rows(const T* a, T* o, int64_t b, int64_t d) {
  std::fill(o, o + d, T(0));
  for (int64_t i = 0; i < b; ++i) {
    const T* row = a + i * d;
    for (int64_t j = 0; j < d; ++j) o[j] += row[j];
  }
}

template <class T>
void broadcast_rows(const T* v, T* o, int64_t b, int64_t d) {
  for (int64_t i = 0; i < b; ++i) std::copy(v, v + d, o + i * d);
}

template <class T>
void sum_cols(const T* a, T* o, int64_t b, int64_t d) {
  for (int64_t i = 0; i < b; ++i) {
    T s = T(0);
    const T* row = a + i * d;
    for (int64_t j = 0; j < d; ++j) s += row[j];
    o[i] = s;
  }
}

template <class T>
void broadcast_cols(const T* v, T* o, int64_t b, int64_t d) {
  for (int64_t i = 0; i < b; ++i) std::fill(o + i * d, o + (i + 1) * d, v[i]);
}

template <class T>
void softmax(const T* z, T* p, int64_t b, int64_t n) {
  for (int64_t i = 0; i < b; ++i) {
    const T* row = z + i * n;
    T* prow = p + i * n;
    T mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (int64_t j = 0; j < n; ++j) {
      prow[j] = std::exp(row[j] - mx);
      s += prow[j];
    }
    T inv = T(1) / s;
    for (int64_t j = 0; j < n; ++j) prow[j] *= inv;
  }
}

// mean over rows of [logsumexp(row) - row[label]]
template <class T>
T softmax_xent(const T* z, const int32_t* y, int64_t b, int64_t n) {
  T acc = T(0);
  for (int64_t i = 0; i < b; ++i) {
    const T* row = z + i * n;
    T mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (int64_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    acc += mx + std::log(s) - row[y[i]];
  }
  return acc / T(b);
}

// C += A * B, saxpy form (no zero fill)
template <class T>
void matmul_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      T aik = arow[kk];
      const T* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// one sample, stride 1: colT (OH*OW, IC*KH*KW) from x (IC,IH,IW)
template <class T>
void im2colT_s1(const T* x, T* colT, int64_t IC, int64_t IH, int64_t IW, int64_t KH, int64_t KW,
                int64_t pad, int64_t OH, int64_t OW) {
  int64_t K = IC * KH * KW;
  for (int64_t oh = 0; oh < OH; ++oh)
    for (int64_t ow = 0; ow < OW; ++ow) {
      T* row = colT + (oh * OW + ow) * K;
      int64_t idx = 0;
      for (int64_t ic = 0; ic < IC; ++ic) {
        const T* xc = x + ic * IH * IW;
        for (int64_t kh = 0; kh < KH; ++kh) {
          int64_t ih = oh - pad + kh;
          if (ih < 0 || ih >= IH) {
            for (int64_t kw = 0; kw < KW; ++kw) row[idx++] = T(0);
            continue;
          }
          const T* xrow = xc + ih * IW;
          for (int64_t kw = 0; kw < KW; ++kw) {
            int64_t iw = ow - pad + kw;
            row[idx++] = (iw >= 0 && iw < IW) ? xrow[iw] : T(0);
          }
        }
      }
    }
}

// one sample, stride 1: col (IC*KH*KW, OH*OW) from x (IC,IH,IW)
template <class T>
void im2col_s1(const T* x, T* col, int64_t IC, int64_t IH, int64_t IW, int64_t KH, int64_t KW,
               int64_t pad, int64_t OH, int64_t OW) {
  for (int64_t ic = 0; ic < IC; ++ic)
    for (int64_t kh = 0; kh < KH; ++kh)
      for (int64_t kw = 0; kw < KW; ++kw) {
        T* crow = col + ((ic * KH + kh) * KW + kw) * OH * OW;
        const T* xc = x + ic * IH * IW;
        int64_t lo = std::max<int64_t>(0, pad - kw);
        int64_t hi = std::min<int64_t>(OW, IW + pad - kw);
        for (int64_t oh = 0; oh < OH; ++oh) {
          int64_t ih = oh - pad + kh;
          T* dst = crow + oh * OW;
          if (ih < 0 || ih >= IH) {
            std::fill(dst, dst + OW, T(0));
            continue;
          }
          const T* src = xc + ih * IW - pad + kw;
          if (lo > 0) std::fill(dst, dst + lo, T(0));
          for (int64_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow];
          if (hi < OW) std::fill(dst + hi, dst + OW, T(0));
        }
      }
}

// adjoint of im2col_s1: scatter-add col back into x
template <class T>
void col2im_s1(const T* col, T* x, int64_t IC, int64_t IH, int64_t IW, int64_t KH, int64_t KW,
               int64_t pad, int64_t OH, int64_t OW) {
  for (int64_t ic = 0; ic < IC; ++ic)
    for (int64_t kh = 0; kh < KH; ++kh)
      for (int64_t kw = 0; kw < KW; ++kw) {
        const T* crow = col + ((ic * KH + kh) * KW + kw) * OH * OW;
        T* xc = x + ic * IH * IW;
        int64_t lo = std::max<int64_t>(0, pad - kw);
        int64_t hi = std::min<int64_t>(OW, IW + pad - kw);
        for (int64_t oh = 0; oh < OH; ++oh) {
          int64_t ih = oh - pad + kh;
          if (ih < 0 || ih >= IH) continue;
          T* dst = xc + ih * IW - pad + kw;
          const T* src = crow + oh * OW;
          for (int64_t ow = lo; ow < hi; ++ow) dst[ow] += src[ow];
        }
      }
}

// valid output range for one kernel tap: iw = ow*stride - pad + kw in [0, IW)
inline void tap_bounds(int64_t kw, int64_t stride, int64_t pad, int64_t IW, int64_t OW,
                       int64_t& lo, int64_t& hi) {
  if (stride == 1) {
    lo = std::max<int64_t>(0, pad - kw);
    hi = std::min<int64_t>(OW, IW + pad - kw);
  } else {
    lo = 0;
    while (lo < OW && lo * stride - pad + kw < 0) ++lo;
    hi = OW;
    while (hi > lo && (hi - 1) * stride - pad + kw >= IW) --hi;
  }
}

// NCHW convolution, kernel (OC,IC,KH,KW); bounds hoisted out of the inner
// loop so it vectorizes
template <class T>
void conv2d_direct(const T* x, const T* w, T* y, int64_t B, int64_t IC, int64_t IH, int64_t IW,
            int64_t OC, int64_t KH, int64_t KW, int64_t stride, int64_t pad, int64_t OH,
            int64_t OW) {
  std::fill(y, y + B * OC * OH * OW, T(0));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t oc = 0; oc < OC; ++oc)
      for (int64_t ic = 0; ic < IC; ++ic) {
        const T* xc = x + (b * IC + ic) * IH * IW;
        T* yc = y + (b * OC + oc) * OH * OW;
        const T* wc = w + (oc * IC + ic) * KH * KW;
        for (int64_t kh = 0; kh < KH; ++kh)
          for (int64_t kw = 0; kw < KW; ++kw) {
            T wv = wc[kh * KW + kw];
            if (wv == T(0)) continue;
            int64_t lo, hi;
            tap_bounds(kw, stride, pad, IW, OW, lo, hi);
            for (int64_t oh = 0; oh < OH; ++oh) {
              int64_t ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= IH) continue;
              const T* xrow = xc + ih * IW - pad + kw;
              T* yrow = yc + oh * OW;
              if (stride == 1) {
                for (int64_t ow = lo; ow < hi; ++ow) yrow[ow] += wv * xrow[ow];
              } else {
                for (int64_t ow = lo; ow < hi; ++ow) yrow[ow] += wv * xrow[ow * stride];
              }
            }
          }
      }
}

// gradient w.r.t. conv input: scatter of g through the kernel
template <class T>
void conv2d_dx_direct(const T* g, const T* w, T* dx, int64_t B, int64_t IC, int64_t IH, int64_t IW,
               int64_t OC, int64_t KH, int64_t KW, int64_t stride, int64_t pad, int64_t OH,
               int64_t OW) {
  std::fill(dx, dx + B * IC * IH * IW, T(0));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t oc = 0; oc < OC; ++oc)
      for (int64_t ic = 0; ic < IC; ++ic) {
        const T* gc = g + (b * OC + oc) * OH * OW;
        T* dxc = dx + (b * IC + ic) * IH * IW;
        const T* wc = w + (oc * IC + ic) * KH * KW;
        for (int64_t kh = 0; kh < KH; ++kh)
          for (int64_t kw = 0; kw < KW; ++kw) {
            T wv = wc[kh * KW + kw];
            if (wv == T(0)) continue;
            int64_t lo, hi;
            tap_bounds(kw, stride, pad, IW, OW, lo, hi);
            for (int64_t oh = 0; oh < OH; ++oh) {
              int64_t ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= IH) continue;
              const T* grow = gc + oh * OW;
              T* dxrow = dxc + ih * IW - pad + kw;
              if (stride == 1) {
                for (int64_t ow = lo; ow < hi; ++ow) dxrow[ow] += wv * grow[ow];
              } else {
                for (int64_t ow = lo; ow < hi; ++ow) dxrow[ow * stride] += wv * grow[ow];
              }
            }
          }
      }
}

// gradient w.r.t. conv kernel
template <class T>
void conv2d_dw_direct(const T* x, const T* g, T* dw, int64_t B, int64_t IC, int64_t IH, int64_t IW,
               int64_t OC, int64_t KH, int64_t KW, int64_t stride, int64_t pad, int64_t OH,
               int64_t OW) {
  std::fill(dw, dw + OC * IC * KH * KW, T(0));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t oc = 0; oc < OC; ++oc)
      for (int64_t ic = 0; ic < IC; ++ic) {
        const T* xc = x + (b * IC + ic) * IH * IW;
        const T* gc = g + (b * OC + oc) * OH * OW;
        T* wc = dw + (oc * IC + ic) * KH * KW;
        for (int64_t kh = 0; kh < KH; ++kh)
          for (int64_t kw = 0; kw < KW; ++kw) {
            int64_t lo, hi;
            tap_bounds(kw, stride, pad, IW, OW, lo, hi);
            T acc = T(0);
            for (int64_t oh = 0; oh < OH; ++oh) {
              int64_t ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= IH) continue;
              const T* xrow = xc + ih * IW - pad + kw;
              const T* grow = gc + oh * OW;
              if (stride == 1) {
                for (int64_t ow = lo; ow < hi; ++ow) acc += xrow[ow] * grow[ow];
              } else {
                for (int64_t ow = lo; ow < hi; ++ow) acc += xrow[ow * stride] * grow[ow];
              }
            }
            wc[kh * KW + kw] += acc;
          }
      }
}

// stride-1 convolutions run as per-sample im2col + matmul; the direct loops
// remain for general strides
template <class T>
void conv2d(const T* x, const T* w, T* y, int64_t B, int64_t IC, int64_t IH, int64_t IW,
            int64_t OC, int64_t KH, int64_t KW, int64_t stride, int64_t pad, int64_t OH,
            int64_t OW) {
  if (stride != 1) {
    conv2d_direct(x, w, y, B, IC, IH, IW, OC, KH, KW, stride, pad, OH, OW);
    return;
  }
  int64_t K = IC * KH * KW, P = OH * OW;
  std::vector<T> col(size_t(K * P));
  for (int64_t b = 0; b < B; ++b) {
    im2col_s1(x + b * IC * IH * IW, col.data(), IC, IH, IW, KH, KW, pad, OH, OW);
    matmul(w, col.data(), y + b * OC * P, OC, K, P);
  }
}

template <class T>
void conv2d_dx(const T* g, const T* w, T* dx, int64_t B, int64_t IC, int64_t IH, int64_t IW,
               int64_t OC, int64_t KH, int64_t KW, int64_t stride, int64_t pad, int64_t OH,
               int64_t OW) {
  if (stride != 1) {
    conv2d_dx_direct(g, w, dx, B, IC, IH, IW, OC, KH, KW, stride, pad, OH, OW);
    return;
  }
  int64_t K = IC * KH * KW, P = OH * OW;
  std::vector<T> wt(size_t(K * OC));
  transpose2d(w, wt.data(), OC, K);
  std::vector<T> dcol(size_t(K * P));
  std::fill(dx, dx + B * IC * IH * IW, T(0));
  for (int64_t b = 0; b < B; ++b) {
    matmul(wt.data(), g + b * OC * P, dcol.data(), K, OC, P);
    col2im_s1(dcol.data(), dx + b * IC * IH * IW, IC, IH, IW, KH, KW, pad, OH, OW);
  }
}

template <class T>
void conv2d_dw(const T* x, const T* g, T* dw, int64_t B, int64_t IC, int64_t IH, int64_t IW,
               int64_t OC, int64_t KH, int64_t KW, int64_t stride, int64_t pad, int64_t OH,
               int64_t OW) {
  if (stride != 1) {
    conv2d_dw_direct(x, g, dw, B, IC, IH, IW, OC, KH, KW, stride, pad, OH, OW);
    return;
  }
  int64_t K = IC * KH * KW, P = OH * OW;
  std::vector<T> colT(size_t(P * K));
  std::fill(dw, dw + OC * K, T(0));
  for (int64_t b = 0; b < B; ++b) {
    im2colT_s1(x + b * IC * IH * IW, colT.data(), IC, IH, IW, KH, KW, pad, OH, OW);
    matmul_acc(g + b * OC * P, colT.data(), dw, OC, P, K);
  }
}

// 2x2/stride-2 max pooling; ties keep the lowest flat index
template <class T>
void maxpool2x2(const T* x, T* y, int32_t* idx, int64_t BC, int64_t IH, int64_t IW, int64_t OH,
                int64_t OW) {
  for (int64_t p = 0; p < BC; ++p) {
    const T* xp = x + p * IH * IW;
    T* yp = y + p * OH * OW;
    int32_t* ip = idx + p * OH * OW;
    for (int64_t oh = 0; oh < OH; ++oh)
      for (int64_t ow = 0; ow < OW; ++ow) {
        int64_t base = (oh * 2) * IW + ow * 2;
        T best = xp[base];
        int64_t besti = base;
        const int64_t cand[3] = {base + 1, base + IW, base + IW + 1};
        for (int64_t c : cand) {
          if (xp[c] > best) {
            best = xp[c];
            besti = c;
          }
        }
        yp[oh * OW + ow] = best;
        ip[oh * OW + ow] = int32_t(p * IH * IW + besti);
      }
  }
}

template <class T>
void pool_scatter(const T* g, const int32_t* idx, T* o, int64_t n_in, int64_t n_out) {
  std::fill(o, o + n_in, T(0));
  for (int64_t i = 0; i < n_out; ++i) o[idx[i]] += g[i];
}

template <class T>
void pool_gather(const T* x, const int32_t* idx, T* o, int64_t n_out) {
  for (int64_t i = 0; i < n_out; ++i) o[i] = x[idx[i]];
}

template <class T>
void gap(const T* x, T* y, int64_t BC, int64_t HW) {
  T inv = T(1) / T(HW);
  for (int64_t p = 0; p < BC; ++p) {
    T s = T(0);
    const T* xp = x + p * HW;
    for (int64_t i = 0; i < HW; ++i) s += xp[i];
    y[p] = s * inv;
  }
}

template <class T>
void spatial_broadcast(const T* v, T* o, int64_t BC, int64_t HW) {
  for (int64_t p = 0; p < BC; ++p) std::fill(o + p * HW, o + (p + 1) * HW, v[p]);
}

// mean over all axes except the channel axis (axis 1 for 4D, axis 1 for 2D)
template <class T>
void channel_mean(const T* x, T* o, int64_t B, int64_t C, int64_t HW) {
  std::fill(o, o + C, T(0));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const T* xp = x + (b * C + c) * HW;
      T s = T(0);
      for (int64_t i = 0; i < HW; ++i) s += xp[i];
      o[c] += s;
    }
  T inv = T(1) / T(B * HW);
  for (int64_t c = 0; c < C; ++c) o[c] *= inv;
}

template <class T>
void channel_broadcast(const T* v, T* o, int64_t B, int64_t C, int64_t HW) {
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) std::fill(o + (b * C + c) * HW, o + (b * C + c + 1) * HW, v[c]);
}

}  // namespace metafew::kern
