#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cascade/rng.hpp"

namespace cascade {

// (batch, channels, height, width) tensor of 32-bit floats, row-major.
struct Tensor4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<float> v;

  Tensor4() = default;
  Tensor4(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_,
          float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_), v(n_ * c_ * h_ * w_, fill) {}

  std::size_t size() const { return n * c * h * w; }
  std::size_t idx(std::size_t in, std::size_t ic, std::size_t iy,
                  std::size_t ix) const {
    return ((in * c + ic) * h + iy) * w + ix;
  }
  float& at(std::size_t in, std::size_t ic, std::size_t iy, std::size_t ix) {
    return v[idx(in, ic, iy, ix)];
  }
  float at(std::size_t in, std::size_t ic, std::size_t iy,
           std::size_t ix) const {
    return v[idx(in, ic, iy, ix)];
  }
  bool same_shape(const Tensor4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
};

// One learnable tensor with its gradient and momentum buffers.
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> w, g, m;

  Param() = default;
  Param(std::string nm, std::vector<std::size_t> shp)
      : name(std::move(nm)), shape(std::move(shp)) {
    std::size_t cnt = 1;
    for (std::size_t s : shape) cnt *= s;
    w.assign(cnt, 0.0f);
    g.assign(cnt, 0.0f);
    m.assign(cnt, 0.0f);
  }
  std::size_t count() const { return w.size(); }
};

// He-style scaled uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
// drawn in element order from the given stream.
void he_uniform_init(Param& p, std::size_t fan_in, Rng& rng);

// v <- momentum * v + g ; w <- w - lr * v ; g <- 0
void sgd_step(Param& p, double lr, double momentum);

///// Layers /////

struct Conv2d {
  std::size_t in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;
  Param weight;  // (out_ch, in_ch, k, k)
  Param bias;    // (out_ch)

  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in_ch_, std::size_t out_ch_,
         std::size_t k_, std::size_t stride_, std::size_t pad_, Rng& rng);

  Tensor4 forward(const Tensor4& x) const;
  // Accumulates weight/bias grads, returns grad w.r.t. x.
  Tensor4 backward(const Tensor4& x, const Tensor4& gout);
};

struct Affine {
  std::size_t in_dim = 0, out_dim = 0;
  Param weight;  // (out_dim, in_dim)
  Param bias;    // (out_dim)

  Affine() = default;
  Affine(const std::string& name, std::size_t in_dim_, std::size_t out_dim_,
         Rng& rng);

  Tensor4 forward(const Tensor4& x) const;  // x flattened to (n, in_dim)
  Tensor4 backward(const Tensor4& x, const Tensor4& gout);
};

Tensor4 relu(const Tensor4& x);
Tensor4 relu_backward(const Tensor4& x, const Tensor4& gout);

Tensor4 maxpool2(const Tensor4& x);
Tensor4 maxpool2_backward(const Tensor4& x, const Tensor4& gout);

Tensor4 sigmoid(const Tensor4& x);
// gout is w.r.t. the sigmoid output y.
Tensor4 sigmoid_backward(const Tensor4& y, const Tensor4& gout);

Tensor4 bilinear_upsample(const Tensor4& x, std::size_t factor);
Tensor4 bilinear_upsample_backward(std::size_t in_h, std::size_t in_w,
                                   std::size_t factor, const Tensor4& gout);

Tensor4 global_avg_pool(const Tensor4& x);
Tensor4 global_avg_pool_backward(std::size_t h, std::size_t w,
                                 const Tensor4& gout);

///// Loss /////

struct LossResult {
  double loss = 0.0;
  Tensor4 grad;  // dL/dpred, exactly 0 where mask == 0
};

// L = mean over unmasked voxels of -(1-w) y log yhat - w (1-y) log(1-yhat),
// with yhat clamped to [1e-7, 1-1e-7]. mask == nullptr means all voxels
// contribute; the all-ones-mask path performs the identical float operations
// as the no-mask path.
LossResult weighted_masked_bce(const Tensor4& pred, const Tensor4& target,
                               double w, const Tensor4* mask);

}  // namespace cascade
