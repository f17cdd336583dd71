#include "cascade/nn.hpp"

#include <algorithm>
#include <cmath>

#include "cascade/errors.hpp"
#include "cascade/threading.hpp"

namespace cascade {

void he_uniform_init(Param& p, std::size_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (float& x : p.w) x = static_cast<float>(rng.uniform(-limit, limit));
}

void sgd_step(Param& p, double lr, double momentum) {
  if (!(lr > 0.0)) throw ParamError("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ParamError("momentum must lie in [0, 1)");
  const auto mf = static_cast<float>(momentum);
  const auto lf = static_cast<float>(lr);
  for (std::size_t i = 0; i < p.w.size(); ++i) {
    p.m[i] = mf * p.m[i] + p.g[i];
    p.w[i] -= lf * p.m[i];
    p.g[i] = 0.0f;
  }
}

///// Conv2d /////

Conv2d::Conv2d(const std::string& name, std::size_t in_ch_, std::size_t out_ch_,
               std::size_t k_, std::size_t stride_, std::size_t pad_, Rng& rng)
    : in_ch(in_ch_),
      out_ch(out_ch_),
      k(k_),
      stride(stride_),
      pad(pad_),
      weight(name + ".weight", {out_ch_, in_ch_, k_, k_}),
      bias(name + ".bias", {out_ch_}) {
  if (in_ch == 0 || out_ch == 0 || k == 0 || stride == 0)
    throw ParamError("conv dims must be positive");
  he_uniform_init(weight, in_ch * k * k, rng);
}

Tensor4 Conv2d::forward(const Tensor4& x) const {
  if (x.c != in_ch) throw ShapeError("conv input channel mismatch");
  if (x.h + 2 * pad < k || x.w + 2 * pad < k)
    throw ShapeError("conv input smaller than kernel");
  const std::size_t oh = (x.h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (x.w + 2 * pad - k) / stride + 1;
  Tensor4 out(x.n, out_ch, oh, ow);
  // One thread owns each (n, oc, oy) row; inner accumulation order is fixed.
  parallel_for(x.n * out_ch * oh, [&](std::size_t job) {
    const std::size_t oy = job % oh;
    const std::size_t oc = (job / oh) % out_ch;
    const std::size_t in = job / (oh * out_ch);
    for (std::size_t ox = 0; ox < ow; ++ox) {
      float acc = bias.w[oc];
      for (std::size_t ic = 0; ic < in_ch; ++ic)
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) -
                          static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(x.h)) continue;
          const float* xrow = &x.v[x.idx(in, ic, iy, 0)];
          const float* wrow = &weight.w[((oc * in_ch + ic) * k + ky) * k];
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) -
                            static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(x.w)) continue;
            acc += wrow[kx] * xrow[ix];
          }
        }
      out.at(in, oc, oy, ox) = acc;
    }
  });
  return out;
}

Tensor4 Conv2d::backward(const Tensor4& x, const Tensor4& gout) {
  const std::size_t oh = gout.h, ow = gout.w;
  if (gout.c != out_ch || gout.n != x.n)
    throw ShapeError("conv backward shape mismatch");
  // Weight grads: gather over (n, oy, ox) per weight element.
  parallel_for(weight.count(), [&](std::size_t wi) {
    const std::size_t kx = wi % k;
    const std::size_t ky = (wi / k) % k;
    const std::size_t ic = (wi / (k * k)) % in_ch;
    const std::size_t oc = wi / (k * k * in_ch);
    float acc = 0.0f;
    for (std::size_t in = 0; in < x.n; ++in)
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const long iy =
            static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(x.h)) continue;
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const long ix =
              static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(x.w)) continue;
          acc += gout.at(in, oc, oy, ox) * x.at(in, ic, iy, ix);
        }
      }
    weight.g[wi] += acc;
  });
  for (std::size_t oc = 0; oc < out_ch; ++oc) {
    float acc = 0.0f;
    for (std::size_t in = 0; in < x.n; ++in)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          acc += gout.at(in, oc, oy, ox);
    bias.g[oc] += acc;
  }
  // Input grads: gather over (oc, ky, kx) per input element.
  Tensor4 gin(x.n, x.c, x.h, x.w);
  parallel_for(x.n * in_ch * x.h, [&](std::size_t job) {
    const std::size_t iy = job % x.h;
    const std::size_t ic = (job / x.h) % in_ch;
    const std::size_t in = job / (x.h * in_ch);
    for (std::size_t ix = 0; ix < x.w; ++ix) {
      float acc = 0.0f;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long t = static_cast<long>(iy + pad) - static_cast<long>(ky);
        if (t < 0 || t % static_cast<long>(stride) != 0) continue;
        const std::size_t oy = static_cast<std::size_t>(t) / stride;
        if (oy >= oh) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long u = static_cast<long>(ix + pad) - static_cast<long>(kx);
          if (u < 0 || u % static_cast<long>(stride) != 0) continue;
          const std::size_t ox = static_cast<std::size_t>(u) / stride;
          if (ox >= ow) continue;
          for (std::size_t oc = 0; oc < out_ch; ++oc)
            acc += weight.w[((oc * in_ch + ic) * k + ky) * k + kx] *
                   gout.at(in, oc, oy, ox);
        }
      }
      gin.at(in, ic, iy, ix) = acc;
    }
  });
  return gin;
}

///// Affine /////

Affine::Affine(const std::string& name, std::size_t in_dim_,
               std::size_t out_dim_, Rng& rng)
    : in_dim(in_dim_),
      out_dim(out_dim_),
      weight(name + ".weight", {out_dim_, in_dim_}),
      bias(name + ".bias", {out_dim_}) {
  if (in_dim == 0 || out_dim == 0) throw ParamError("affine dims must be positive");
  he_uniform_init(weight, in_dim, rng);
}

Tensor4 Affine::forward(const Tensor4& x) const {
  if (x.c * x.h * x.w != in_dim) throw ShapeError("affine input dim mismatch");
  Tensor4 out(x.n, out_dim, 1, 1);
  for (std::size_t in = 0; in < x.n; ++in)
    for (std::size_t o = 0; o < out_dim; ++o) {
      float acc = bias.w[o];
      const float* xrow = &x.v[in * in_dim];
      const float* wrow = &weight.w[o * in_dim];
      for (std::size_t d = 0; d < in_dim; ++d) acc += wrow[d] * xrow[d];
      out.at(in, o, 0, 0) = acc;
    }
  return out;
}

Tensor4 Affine::backward(const Tensor4& x, const Tensor4& gout) {
  if (gout.c != out_dim || gout.n != x.n)
    throw ShapeError("affine backward shape mismatch");
  for (std::size_t o = 0; o < out_dim; ++o) {
    for (std::size_t d = 0; d < in_dim; ++d) {
      float acc = 0.0f;
      for (std::size_t in = 0; in < x.n; ++in)
        acc += gout.at(in, o, 0, 0) * x.v[in * in_dim + d];
      weight.g[o * in_dim + d] += acc;
    }
    float bacc = 0.0f;
    for (std::size_t in = 0; in < x.n; ++in) bacc += gout.at(in, o, 0, 0);
    bias.g[o] += bacc;
  }
  Tensor4 gin(x.n, x.c, x.h, x.w);
  for (std::size_t in = 0; in < x.n; ++in)
    for (std::size_t d = 0; d < in_dim; ++d) {
      float acc = 0.0f;
      for (std::size_t o = 0; o < out_dim; ++o)
        acc += weight.w[o * in_dim + d] * gout.at(in, o, 0, 0);
      gin.v[in * in_dim + d] = acc;
    }
  return gin;
}

///// Elementwise and pooling /////

Tensor4 relu(const Tensor4& x) {
  Tensor4 out = x;
  for (float& v : out.v) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor4 relu_backward(const Tensor4& x, const Tensor4& gout) {
  if (!x.same_shape(gout)) throw ShapeError("relu backward shape mismatch");
  Tensor4 gin(x.n, x.c, x.h, x.w);
  for (std::size_t i = 0; i < x.v.size(); ++i)
    gin.v[i] = x.v[i] > 0.0f ? gout.v[i] : 0.0f;  // subgradient at 0 is 0
  return gin;
}

Tensor4 maxpool2(const Tensor4& x) {
  if (x.h % 2 != 0 || x.w % 2 != 0)
    throw ShapeError("maxpool2 requires even spatial dims");
  Tensor4 out(x.n, x.c, x.h / 2, x.w / 2);
  parallel_for(x.n * x.c, [&](std::size_t plane) {
    const std::size_t in = plane / x.c;
    const std::size_t ic = plane % x.c;
    for (std::size_t oy = 0; oy < out.h; ++oy)
      for (std::size_t ox = 0; ox < out.w; ++ox) {
        float best = x.at(in, ic, 2 * oy, 2 * ox);
        best = std::max(best, x.at(in, ic, 2 * oy, 2 * ox + 1));
        best = std::max(best, x.at(in, ic, 2 * oy + 1, 2 * ox));
        best = std::max(best, x.at(in, ic, 2 * oy + 1, 2 * ox + 1));
        out.at(in, ic, oy, ox) = best;
      }
  });
  return out;
}

Tensor4 maxpool2_backward(const Tensor4& x, const Tensor4& gout) {
  if (gout.h != x.h / 2 || gout.w != x.w / 2 || gout.n != x.n || gout.c != x.c)
    throw ShapeError("maxpool2 backward shape mismatch");
  Tensor4 gin(x.n, x.c, x.h, x.w);
  parallel_for(x.n * x.c, [&](std::size_t plane) {
    const std::size_t in = plane / x.c;
    const std::size_t ic = plane % x.c;
    for (std::size_t oy = 0; oy < gout.h; ++oy)
      for (std::size_t ox = 0; ox < gout.w; ++ox) {
        // first max in row-major window order receives the gradient
        std::size_t by = 2 * oy, bx = 2 * ox;
        float best = x.at(in, ic, by, bx);
        const std::size_t ys[3] = {2 * oy, 2 * oy + 1, 2 * oy + 1};
        const std::size_t xs[3] = {2 * ox + 1, 2 * ox, 2 * ox + 1};
        for (int t = 0; t < 3; ++t)
          if (x.at(in, ic, ys[t], xs[t]) > best) {
            best = x.at(in, ic, ys[t], xs[t]);
            by = ys[t];
            bx = xs[t];
          }
        gin.at(in, ic, by, bx) = gout.at(in, ic, oy, ox);
      }
  });
  return gin;
}

Tensor4 sigmoid(const Tensor4& x) {
  Tensor4 out = x;
  for (float& v : out.v) {
    if (v >= 0.0f) {
      v = 1.0f / (1.0f + std::exp(-v));
    } else {
      const float e = std::exp(v);
      v = e / (1.0f + e);
    }
  }
  return out;
}

Tensor4 sigmoid_backward(const Tensor4& y, const Tensor4& gout) {
  if (!y.same_shape(gout)) throw ShapeError("sigmoid backward shape mismatch");
  Tensor4 gin(y.n, y.c, y.h, y.w);
  for (std::size_t i = 0; i < y.v.size(); ++i)
    gin.v[i] = y.v[i] * (1.0f - y.v[i]) * gout.v[i];
  return gin;
}

///// Bilinear resize (align-corners) /////

namespace {

bool power_of_two(std::size_t f) { return f >= 2 && (f & (f - 1)) == 0; }

// For each output index: source low index and interpolation weight t so that
// out = a + t*(b - a); this form reproduces constants exactly.
void axis_table(std::size_t in, std::size_t out, std::vector<std::size_t>& i0,
                std::vector<float>& t) {
  i0.resize(out);
  t.resize(out);
  for (std::size_t j = 0; j < out; ++j) {
    if (in == 1 || out == 1) {
      i0[j] = 0;
      t[j] = 0.0f;
      continue;
    }
    const double pos = static_cast<double>(j) * static_cast<double>(in - 1) /
                       static_cast<double>(out - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    if (lo >= in - 1) lo = in - 2;
    i0[j] = lo;
    t[j] = static_cast<float>(pos - static_cast<double>(lo));
  }
}

}  // namespace

Tensor4 bilinear_upsample(const Tensor4& x, std::size_t factor) {
  if (!power_of_two(factor))
    throw ShapeError("upsample factor must be a power of two >= 2");
  const std::size_t oh = x.h * factor, ow = x.w * factor;
  std::vector<std::size_t> y0, x0;
  std::vector<float> ty, tx;
  axis_table(x.h, oh, y0, ty);
  axis_table(x.w, ow, x0, tx);
  Tensor4 out(x.n, x.c, oh, ow);
  parallel_for(x.n * x.c, [&](std::size_t plane) {
    const std::size_t in = plane / x.c;
    const std::size_t ic = plane % x.c;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::size_t ylo = y0[oy];
      const std::size_t yhi = ylo + 1 < x.h ? ylo + 1 : ylo;
      const float wy = ty[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t xlo = x0[ox];
        const std::size_t xhi = xlo + 1 < x.w ? xlo + 1 : xlo;
        const float wx = tx[ox];
        const float a = x.at(in, ic, ylo, xlo);
        const float b = x.at(in, ic, ylo, xhi);
        const float c = x.at(in, ic, yhi, xlo);
        const float d = x.at(in, ic, yhi, xhi);
        const float top = a + wx * (b - a);
        const float bot = c + wx * (d - c);
        out.at(in, ic, oy, ox) = top + wy * (bot - top);
      }
    }
  });
  return out;
}

Tensor4 bilinear_upsample_backward(std::size_t in_h, std::size_t in_w,
                                   std::size_t factor, const Tensor4& gout) {
  if (!power_of_two(factor))
    throw ShapeError("upsample factor must be a power of two >= 2");
  if (gout.h != in_h * factor || gout.w != in_w * factor)
    throw ShapeError("upsample backward shape mismatch");
  std::vector<std::size_t> y0, x0;
  std::vector<float> ty, tx;
  axis_table(in_h, gout.h, y0, ty);
  axis_table(in_w, gout.w, x0, tx);
  Tensor4 gin(gout.n, gout.c, in_h, in_w);
  // Transpose map scattered per plane; planes are independent jobs.
  parallel_for(gout.n * gout.c, [&](std::size_t plane) {
    const std::size_t in = plane / gout.c;
    const std::size_t ic = plane % gout.c;
    for (std::size_t oy = 0; oy < gout.h; ++oy) {
      const std::size_t ylo = y0[oy];
      const std::size_t yhi = ylo + 1 < in_h ? ylo + 1 : ylo;
      const float wy = ty[oy];
      for (std::size_t ox = 0; ox < gout.w; ++ox) {
        const std::size_t xlo = x0[ox];
        const std::size_t xhi = xlo + 1 < in_w ? xlo + 1 : xlo;
        const float wx = tx[ox];
        const float g = gout.at(in, ic, oy, ox);
        gin.at(in, ic, ylo, xlo) += (1.0f - wy) * (1.0f - wx) * g;
        gin.at(in, ic, ylo, xhi) += (1.0f - wy) * wx * g;
        gin.at(in, ic, yhi, xlo) += wy * (1.0f - wx) * g;
        gin.at(in, ic, yhi, xhi) += wy * wx * g;
      }
    }
  });
  return gin;
}

///// Global average pooling /////

Tensor4 global_avg_pool(const Tensor4& x) {
  Tensor4 out(x.n, x.c, 1, 1);
  const float scale = 1.0f / static_cast<float>(x.h * x.w);
  for (std::size_t in = 0; in < x.n; ++in)
    for (std::size_t ic = 0; ic < x.c; ++ic) {
      float acc = 0.0f;
      for (std::size_t iy = 0; iy < x.h; ++iy)
        for (std::size_t ix = 0; ix < x.w; ++ix) acc += x.at(in, ic, iy, ix);
      out.at(in, ic, 0, 0) = acc * scale;
    }
  return out;
}

Tensor4 global_avg_pool_backward(std::size_t h, std::size_t w,
                                 const Tensor4& gout) {
  if (gout.h != 1 || gout.w != 1)
    throw ShapeError("global_avg_pool backward expects (n,c,1,1) grads");
  Tensor4 gin(gout.n, gout.c, h, w);
  const float scale = 1.0f / static_cast<float>(h * w);
  for (std::size_t in = 0; in < gout.n; ++in)
    for (std::size_t ic = 0; ic < gout.c; ++ic) {
      const float g = gout.at(in, ic, 0, 0) * scale;
      for (std::size_t iy = 0; iy < h; ++iy)
        for (std::size_t ix = 0; ix < w; ++ix) gin.at(in, ic, iy, ix) = g;
    }
  return gin;
}

///// Weighted masked BCE /////

LossResult weighted_masked_bce(const Tensor4& pred, const Tensor4& target,
                               double w, const Tensor4* mask) {
  if (!pred.same_shape(target)) throw ShapeError("bce pred/target shape mismatch");
  if (mask && !pred.same_shape(*mask)) throw ShapeError("bce mask shape mismatch");
  if (!(w > 0.0) || !(w < 1.0)) throw ParamError("bce weight must lie in (0,1)");
  constexpr double kEps = 1e-7;

  std::size_t support = 0;
  if (mask) {
    for (float v : mask->v) support += (v != 0.0f);
    if (support == 0) throw DegenerateMask("loss mask has empty support");
  } else {
    support = pred.size();
  }

  LossResult res;
  res.grad = Tensor4(pred.n, pred.c, pred.h, pred.w);
  const double inv = 1.0 / static_cast<double>(support);
  double acc = 0.0;  // 64-bit accumulation in index order
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    if (mask && mask->v[i] == 0.0f) continue;  // grad stays exactly 0
    const double yhat =
        std::min(1.0 - kEps, std::max(kEps, static_cast<double>(pred.v[i])));
    const double y = static_cast<double>(target.v[i]);
    acc += -(1.0 - w) * y * std::log(yhat) -
           w * (1.0 - y) * std::log(1.0 - yhat);
    const double d = -(1.0 - w) * y / yhat + w * (1.0 - y) / (1.0 - yhat);
    res.grad.v[i] = static_cast<float>(d * inv);
  }
  res.loss = acc * inv;
  return res;
}

}  // namespace cascade
