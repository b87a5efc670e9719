// SPDX-License-Identifier: Apache-2.0
//
// Image-shaped autodiff ops: conv2d over [C,H,W] and bilinear sampling of
// feature maps. Hand-written backward passes, covered by gradcheck tests.
#pragma once

#include "soq/png.hpp"
#include "soq/tensor.hpp"

namespace soq::ad {

// x: [Cin,H,W], W: [Cout,Cin,kh,kw], b: [Cout]; zero padding
inline Var conv2d(const Var& x, const Var& W, const Var& b, int stride, int pad) {
    SOQ_REQUIRE(x->shape.size() == 3 && W->shape.size() == 4, "conv2d: rank");
    const int64_t cin = x->shape[0], h = x->shape[1], w = x->shape[2];
    const int64_t cout = W->shape[0], kh = W->shape[2], kw = W->shape[3];
    SOQ_REQUIRE(W->shape[1] == cin, "conv2d: channel mismatch");
    SOQ_REQUIRE(b->size() == cout, "conv2d: bias size");
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (w + 2 * pad - kw) / stride + 1;
    SOQ_REQUIRE(ho > 0 && wo > 0, "conv2d: output collapses");

    std::vector<double> out(static_cast<size_t>(cout * ho * wo));
    for (int64_t co = 0; co < cout; ++co) {
        double* oc = &out[co * ho * wo];
        for (int64_t i = 0; i < ho * wo; ++i) oc[i] = b->val[co];
        for (int64_t ci = 0; ci < cin; ++ci) {
            const double* xc = &x->val[ci * h * w];
            for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                    const double wv = W->val[((co * cin + ci) * kh + ky) * kw + kx];
                    if (wv == 0.0) continue;
                    for (int64_t oy = 0; oy < ho; ++oy) {
                        const int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        const double* xrow = &xc[iy * w];
                        double* orow = &oc[oy * wo];
                        for (int64_t ox = 0; ox < wo; ++ox) {
                            const int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
        }
    }
    return detail::op({cout, ho, wo}, std::move(out), {x, W, b},
                      [x, W, b, cin, h, w, cout, kh, kw, ho, wo, stride, pad](Node& n) {
                          if (b->requires_grad) {
                              b->ensure_grad();
                              for (int64_t co = 0; co < cout; ++co) {
                                  double s = 0.0;
                                  const double* gc = &n.grad[co * ho * wo];
                                  for (int64_t i = 0; i < ho * wo; ++i) s += gc[i];
                                  b->grad[co] += s;
                              }
                          }
                          for (int64_t co = 0; co < cout; ++co) {
                              const double* gc = &n.grad[co * ho * wo];
                              for (int64_t ci = 0; ci < cin; ++ci) {
                                  const double* xc = &x->val[ci * h * w];
                                  double* xg = x->requires_grad ? &x->grad[ci * h * w] : nullptr;
                                  for (int64_t ky = 0; ky < kh; ++ky)
                                      for (int64_t kx = 0; kx < kw; ++kx) {
                                          const int64_t widx = ((co * cin + ci) * kh + ky) * kw + kx;
                                          const double wv = W->val[widx];
                                          double wgrad = 0.0;
                                          for (int64_t oy = 0; oy < ho; ++oy) {
                                              const int64_t iy = oy * stride - pad + ky;
                                              if (iy < 0 || iy >= h) continue;
                                              const double* grow = &gc[oy * wo];
                                              const double* xrow = &xc[iy * w];
                                              double* xgrow = xg ? &xg[iy * w] : nullptr;
                                              for (int64_t ox = 0; ox < wo; ++ox) {
                                                  const int64_t ix = ox * stride - pad + kx;
                                                  if (ix < 0 || ix >= w) continue;
                                                  const double g = grow[ox];
                                                  wgrad += g * xrow[ix];
                                                  if (xgrow) xgrow[ix] += g * wv;
                                              }
                                          }
                                          if (W->requires_grad) {
                                              W->ensure_grad();
                                              W->grad[widx] += wgrad;
                                          }
                                      }
                              }
                          }
                      });
}

// map: [C,Hf,Wf]; coords: [K,2] as (col,row) in feature-lattice units.
// Border-clamped bilinear; differentiable in both map and coords.
inline Var bilinear_sample(const Var& map, const Var& coords) {
    SOQ_REQUIRE(map->shape.size() == 3, "bilinear_sample: map rank");
    SOQ_REQUIRE(coords->cols() == 2, "bilinear_sample: coords must be Kx2");
    const int64_t C = map->shape[0], H = map->shape[1], W = map->shape[2];
    const int64_t K = coords->rows();
    std::vector<double> out(static_cast<size_t>(K * C));

    struct Tap {
        int64_t x0, x1, y0, y1;
        double fx, fy;
    };
    std::vector<Tap> taps(static_cast<size_t>(K));
    for (int64_t k = 0; k < K; ++k) {
        double u = coords->val[k * 2 + 0];
        double v = coords->val[k * 2 + 1];
        u = std::min(std::max(u, 0.0), static_cast<double>(W - 1));
        v = std::min(std::max(v, 0.0), static_cast<double>(H - 1));
        Tap t;
        t.x0 = static_cast<int64_t>(std::floor(u));
        t.y0 = static_cast<int64_t>(std::floor(v));
        t.x0 = std::min(t.x0, W - 1);
        t.y0 = std::min(t.y0, H - 1);
        t.x1 = std::min(t.x0 + 1, W - 1);
        t.y1 = std::min(t.y0 + 1, H - 1);
        t.fx = u - static_cast<double>(t.x0);
        t.fy = v - static_cast<double>(t.y0);
        taps[k] = t;
        for (int64_t c = 0; c < C; ++c) {
            const double* mc = &map->val[c * H * W];
            const double v00 = mc[t.y0 * W + t.x0], v01 = mc[t.y0 * W + t.x1];
            const double v10 = mc[t.y1 * W + t.x0], v11 = mc[t.y1 * W + t.x1];
            out[k * C + c] = (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) +
                             t.fy * ((1 - t.fx) * v10 + t.fx * v11);
        }
    }
    return detail::op({K, C}, std::move(out), {map, coords},
                      [map, coords, taps, C, H, W, K](Node& n) {
                          for (int64_t k = 0; k < K; ++k) {
                              const Tap& t = taps[k];
                              double du = 0.0, dv = 0.0;
                              for (int64_t c = 0; c < C; ++c) {
                                  const double g = n.grad[k * C + c];
                                  if (g == 0.0) continue;
                                  const double* mc = &map->val[c * H * W];
                                  const double v00 = mc[t.y0 * W + t.x0], v01 = mc[t.y0 * W + t.x1];
                                  const double v10 = mc[t.y1 * W + t.x0], v11 = mc[t.y1 * W + t.x1];
                                  if (map->requires_grad) {
                                      map->ensure_grad();
                                      double* mg = &map->grad[c * H * W];
                                      mg[t.y0 * W + t.x0] += g * (1 - t.fy) * (1 - t.fx);
                                      mg[t.y0 * W + t.x1] += g * (1 - t.fy) * t.fx;
                                      mg[t.y1 * W + t.x0] += g * t.fy * (1 - t.fx);
                                      mg[t.y1 * W + t.x1] += g * t.fy * t.fx;
                                  }
                                  du += g * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                                  dv += g * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                              }
                              if (coords->requires_grad) {
                                  coords->ensure_grad();
                                  coords->grad[k * 2 + 0] += du;
                                  coords->grad[k * 2 + 1] += dv;
                              }
                          }
                      });
}

// image (u8 RGB) to a [3,H,W] constant in [0,1]
inline Var image_to_var(const soq::Image& img) {
    const int64_t H = img.height, W = img.width;
    std::vector<double> v(static_cast<size_t>(3 * H * W));
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                v[(c * H + y) * W + x] = img.rgb[(y * W + x) * 3 + c] / 255.0;
    return constant({3, H, W}, std::move(v));
}

}  // namespace soq::ad
