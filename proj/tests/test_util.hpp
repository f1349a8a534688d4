#pragma once

// Shared helpers for the test suites: independent oracles and random tensors.

#include <cmath>
#include <vector>

#include "metafew/common.hpp"
#include "metafew/tensor.hpp"

namespace testutil {

using metafew::Dtype;
using metafew::ParamSet;
using metafew::Rng;
using metafew::Shape;
using metafew::Tensor;

inline Tensor random_tensor(const Shape& s, Rng& rng, Dtype dt = Dtype::f64, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::zeros(s, dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(size_t(i), rng.uniform(lo, hi));
  return t;
}

// Brute-force direct convolution, written independently of the library kernels
// (separate index arithmetic, no shared code) so it can serve as an oracle.
inline std::vector<double> conv2d_oracle(const std::vector<double>& x,
                                         const std::vector<double>& w, int64_t B, int64_t IC,
                                         int64_t IH, int64_t IW, int64_t OC, int64_t KH,
                                         int64_t KW, int64_t stride, int64_t pad) {
  int64_t OH = (IH + 2 * pad - KH) / stride + 1;
  int64_t OW = (IW + 2 * pad - KW) / stride + 1;
  std::vector<double> y(size_t(B * OC * OH * OW), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t oc = 0; oc < OC; ++oc)
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (int64_t ic = 0; ic < IC; ++ic)
            for (int64_t kh = 0; kh < KH; ++kh)
              for (int64_t kw = 0; kw < KW; ++kw) {
                int64_t ih = oh * stride + kh - pad;
                int64_t iw = ow * stride + kw - pad;
                if (ih < 0 || ih >= IH || iw < 0 || iw >= IW) continue;
                acc += x[size_t(((b * IC + ic) * IH + ih) * IW + iw)] *
                       w[size_t(((oc * IC + ic) * KH + kh) * KW + kw)];
              }
          y[size_t(((b * OC + oc) * OH + oh) * OW + ow)] = acc;
        }
  return y;
}

inline double rel_err(double got, double want) {
  double denom = std::max(std::abs(want), 1e-8);
  return std::abs(got - want) / denom;
}

// max relative error between an autodiff GradMap and an oracle GradMap
inline double max_rel_err(const metafew::GradMap& got, const metafew::GradMap& want,
                          double abs_floor = 1e-6) {
  double worst = 0.0;
  for (auto& kv : want) {
    const Tensor& g = got.at(kv.first);
    for (int64_t i = 0; i < kv.second.numel(); ++i) {
      double a = g.at(size_t(i)), b = kv.second.at(size_t(i));
      if (std::abs(a - b) < abs_floor) continue;
      worst = std::max(worst, std::abs(a - b) / std::max(std::abs(b), abs_floor));
    }
  }
  return worst;
}

}  // namespace testutil
