#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cascade/checkpoint.hpp"
#include "cascade/errors.hpp"
#include "cascade/gradcheck.hpp"
#include "cascade/nn.hpp"

using namespace cascade;

namespace {

Tensor4 random_tensor(std::size_t n, std::size_t c, std::size_t h,
                      std::size_t w, Rng& rng, double lo = -1.0,
                      double hi = 1.0) {
  Tensor4 t(n, c, h, w);
  for (auto& v : t.v) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

double projection_loss(const Tensor4& out, const Tensor4& proj) {
  double acc = 0.0;
  for (std::size_t i = 0; i < out.v.size(); ++i)
    acc += static_cast<double>(out.v[i]) * static_cast<double>(proj.v[i]);
  return acc;
}

}  // namespace

///// conv2d /////

TEST_CASE("conv2d 1x1 identity kernel reproduces the input") {
  Rng rng(1);
  Conv2d conv("c", 1, 1, 1, 1, 0, rng);
  conv.weight.w[0] = 1.0f;
  conv.bias.w[0] = 0.0f;
  Tensor4 x = random_tensor(2, 1, 5, 5, rng);
  Tensor4 y = conv.forward(x);
  CHECK(y.same_shape(x));
  CHECK(y.v == x.v);
}

TEST_CASE("conv2d all-ones 3x3 on a one-hot input marks the neighborhood") {
  Rng rng(2);
  Conv2d conv("c", 1, 1, 3, 1, 1, rng);
  for (auto& w : conv.weight.w) w = 1.0f;
  conv.bias.w[0] = 0.0f;
  Tensor4 x(1, 1, 5, 5);
  x.at(0, 0, 2, 1) = 1.0f;
  Tensor4 y = conv.forward(x);
  for (std::size_t iy = 0; iy < 5; ++iy)
    for (std::size_t ix = 0; ix < 5; ++ix) {
      const bool nb = iy + 1 >= 2 && iy <= 3 && ix + 1 >= 1 && ix <= 2;
      CHECK(y.at(0, 0, iy, ix) == (nb ? 1.0f : 0.0f));
    }
}

TEST_CASE("conv2d rejects channel mismatches") {
  Rng rng(3);
  Conv2d conv("c", 2, 4, 3, 1, 1, rng);
  Tensor4 x(1, 3, 8, 8);
  CHECK_THROWS_AS(conv.forward(x), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(4);
  Conv2d conv("c", 3, 2, 3, 1, 1, rng);
  Tensor4 x = random_tensor(2, 3, 6, 6, rng);
  Tensor4 proj = random_tensor(2, 2, 6, 6, rng);
  Param xp("input", {x.v.size()});
  xp.w = x.v;

  auto run = [&](const std::vector<float>& xv) {
    Tensor4 in = x;
    in.v = xv;
    return conv.forward(in);
  };
  auto grad_fn = [&] {
    std::fill(conv.weight.g.begin(), conv.weight.g.end(), 0.0f);
    std::fill(conv.bias.g.begin(), conv.bias.g.end(), 0.0f);
    Tensor4 in = x;
    in.v = xp.w;
    Tensor4 gin = conv.backward(in, proj);
    xp.g = gin.v;
  };
  auto loss_fn = [&] { return projection_loss(run(xp.w), proj); };

  Rng pick(5);
  auto rep = grad_check({&conv.weight, &conv.bias, &xp}, grad_fn, loss_fn, 24,
                        pick, 1e-3, 1e-3);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-3);
}

///// relu / maxpool / sigmoid /////

TEST_CASE("relu clamps negatives and its subgradient at 0 is 0") {
  Tensor4 x(1, 1, 1, 3);
  x.v = {-5.0f, 0.0f, 5.0f};
  Tensor4 y = relu(x);
  CHECK(y.v[0] == 0.0f);
  CHECK(y.v[1] == 0.0f);
  CHECK(y.v[2] == 5.0f);
  Tensor4 g(1, 1, 1, 3, 1.0f);
  Tensor4 gin = relu_backward(x, g);
  CHECK(gin.v[0] == 0.0f);
  CHECK(gin.v[1] == 0.0f);
  CHECK(gin.v[2] == 1.0f);
}

TEST_CASE("maxpool2 takes window maxima and routes grads to first argmax") {
  Tensor4 x(1, 1, 2, 2);
  x.v = {1.0f, 2.0f, 3.0f, 4.0f};
  Tensor4 y = maxpool2(x);
  CHECK(y.h == 1);
  CHECK(y.w == 1);
  CHECK(y.v[0] == 4.0f);

  Tensor4 tie(1, 1, 2, 2);
  tie.v = {7.0f, 7.0f, 7.0f, 7.0f};
  Tensor4 g(1, 1, 1, 1);
  g.v = {1.0f};
  Tensor4 gin = maxpool2_backward(tie, g);
  CHECK(gin.v[0] == 1.0f);  // first index in row-major order wins the tie
  CHECK(gin.v[1] == 0.0f);
  CHECK(gin.v[2] == 0.0f);
  CHECK(gin.v[3] == 0.0f);

  Tensor4 odd(1, 1, 3, 4);
  CHECK_THROWS_AS(maxpool2(odd), ShapeError);
}

TEST_CASE("maxpool2 gradient matches finite differences on gap-protected input") {
  Rng rng(6);
  Tensor4 x(1, 2, 6, 6);
  // distinct per-window offsets keep FD perturbations from crossing argmaxes
  for (std::size_t ic = 0; ic < 2; ++ic)
    for (std::size_t wy = 0; wy < 3; ++wy)
      for (std::size_t wx = 0; wx < 3; ++wx) {
        std::vector<float> offs = {0.0f, 0.5f, 1.0f, 1.5f};
        rng.shuffle(offs);
        for (int t = 0; t < 4; ++t)
          x.at(0, ic, 2 * wy + t / 2, 2 * wx + t % 2) =
              offs[t] + static_cast<float>(rng.uniform(0.0, 0.3));
      }
  Tensor4 proj = random_tensor(1, 2, 3, 3, rng);
  Param xp("input", {x.v.size()});
  xp.w = x.v;
  auto grad_fn = [&] {
    Tensor4 in = x;
    in.v = xp.w;
    xp.g = maxpool2_backward(in, proj).v;
  };
  auto loss_fn = [&] {
    Tensor4 in = x;
    in.v = xp.w;
    return projection_loss(maxpool2(in), proj);
  };
  Rng pick(7);
  auto rep = grad_check({&xp}, grad_fn, loss_fn, 30, pick, 1e-3, 1e-3);
  CHECK(rep.pass);
}

TEST_CASE("sigmoid hits 0.5 at zero and matches finite differences") {
  Tensor4 x(1, 1, 1, 1);
  Tensor4 y = sigmoid(x);
  CHECK(y.v[0] == 0.5f);

  Rng rng(8);
  Tensor4 xr = random_tensor(1, 2, 4, 4, rng, -3.0, 3.0);
  Tensor4 proj = random_tensor(1, 2, 4, 4, rng);
  Param xp("input", {xr.v.size()});
  xp.w = xr.v;
  auto grad_fn = [&] {
    Tensor4 in = xr;
    in.v = xp.w;
    xp.g = sigmoid_backward(sigmoid(in), proj).v;
  };
  auto loss_fn = [&] {
    Tensor4 in = xr;
    in.v = xp.w;
    return projection_loss(sigmoid(in), proj);
  };
  Rng pick(9);
  auto rep = grad_check({&xp}, grad_fn, loss_fn, 20, pick, 1e-3, 1e-3);
  CHECK(rep.pass);
}

///// bilinear upsample /////

TEST_CASE("bilinear upsample preserves constants exactly") {
  Tensor4 x(1, 1, 3, 3, 3.0f);
  Tensor4 y = bilinear_upsample(x, 4);
  CHECK(y.h == 12);
  CHECK(y.w == 12);
  for (float v : y.v) CHECK(v == 3.0f);
}

TEST_CASE("bilinear upsample matches align-corners closed form on 2x2") {
  Tensor4 x(1, 1, 2, 2);
  x.v = {0.0f, 1.0f, 0.0f, 1.0f};
  Tensor4 y = bilinear_upsample(x, 2);
  REQUIRE(y.h == 4);
  REQUIRE(y.w == 4);
  for (std::size_t iy = 0; iy < 4; ++iy) {
    CHECK(y.at(0, 0, iy, 0) == doctest::Approx(0.0).epsilon(1e-7));
    CHECK(y.at(0, 0, iy, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    CHECK(y.at(0, 0, iy, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
    CHECK(y.at(0, 0, iy, 3) == doctest::Approx(1.0).epsilon(1e-7));
  }
  CHECK_THROWS_AS(bilinear_upsample(x, 3), ShapeError);
  CHECK_THROWS_AS(bilinear_upsample(x, 0), ShapeError);
}

TEST_CASE("bilinear upsample gradient matches finite differences") {
  Rng rng(10);
  Tensor4 x = random_tensor(1, 2, 3, 4, rng);
  Tensor4 proj = random_tensor(1, 2, 6, 8, rng);
  Param xp("input", {x.v.size()});
  xp.w = x.v;
  auto grad_fn = [&] {
    xp.g = bilinear_upsample_backward(3, 4, 2, proj).v;
  };
  auto loss_fn = [&] {
    Tensor4 in = x;
    in.v = xp.w;
    return projection_loss(bilinear_upsample(in, 2), proj);
  };
  Rng pick(11);
  auto rep = grad_check({&xp}, grad_fn, loss_fn, 24, pick, 1e-3, 1e-3);
  CHECK(rep.pass);
}

///// affine / global_avg_pool /////

TEST_CASE("affine with identity weights is the identity map") {
  Rng rng(12);
  Affine aff("a", 4, 4, rng);
  std::fill(aff.weight.w.begin(), aff.weight.w.end(), 0.0f);
  for (std::size_t i = 0; i < 4; ++i) aff.weight.w[i * 4 + i] = 1.0f;
  std::fill(aff.bias.w.begin(), aff.bias.w.end(), 0.0f);
  Tensor4 x = random_tensor(2, 4, 1, 1, rng);
  Tensor4 y = aff.forward(x);
  CHECK(y.v == x.v);
}

TEST_CASE("linear-only net gradient error sits at 64-bit noise level") {
  Rng rng(13);
  Affine aff("a", 6, 4, rng);
  Tensor4 x = random_tensor(2, 6, 1, 1, rng);
  Tensor4 proj = random_tensor(2, 4, 1, 1, rng);
  auto grad_fn = [&] {
    std::fill(aff.weight.g.begin(), aff.weight.g.end(), 0.0f);
    std::fill(aff.bias.g.begin(), aff.bias.g.end(), 0.0f);
    aff.backward(x, proj);
  };
  // the loss is replicated in 64-bit so FD noise reflects double rounding
  auto loss_fn = [&] {
    double acc = 0.0;
    for (std::size_t in = 0; in < 2; ++in)
      for (std::size_t o = 0; o < 4; ++o) {
        double s = aff.bias.w[o];
        for (std::size_t d = 0; d < 6; ++d)
          s += static_cast<double>(aff.weight.w[o * 6 + d]) * x.v[in * 6 + d];
        acc += s * proj.at(in, o, 0, 0);
      }
    return acc;
  };
  Rng pick(14);
  auto rep = grad_check({&aff.weight, &aff.bias}, grad_fn, loss_fn, 28, pick,
                        1e-3, 1e-5);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("global_avg_pool of a constant channel returns the constant") {
  Tensor4 x(1, 2, 3, 3);
  for (std::size_t i = 0; i < 9; ++i) x.v[i] = 4.0f;
  for (std::size_t i = 9; i < 18; ++i) x.v[i] = -2.0f;
  Tensor4 y = global_avg_pool(x);
  CHECK(y.at(0, 0, 0, 0) == 4.0f);
  CHECK(y.at(0, 1, 0, 0) == -2.0f);
}

TEST_CASE("affine and global_avg_pool gradients match finite differences") {
  Rng rng(15);
  Affine aff("a", 8, 3, rng);
  Tensor4 x = random_tensor(2, 2, 2, 2, rng);
  Tensor4 proj = random_tensor(2, 3, 1, 1, rng);
  Param xp("input", {x.v.size()});
  xp.w = x.v;
  auto grad_fn = [&] {
    std::fill(aff.weight.g.begin(), aff.weight.g.end(), 0.0f);
    std::fill(aff.bias.g.begin(), aff.bias.g.end(), 0.0f);
    Tensor4 in = x;
    in.v = xp.w;
    xp.g = aff.backward(in, proj).v;
  };
  auto loss_fn = [&] {
    Tensor4 in = x;
    in.v = xp.w;
    return projection_loss(aff.forward(in), proj);
  };
  Rng pick(16);
  auto rep = grad_check({&aff.weight, &aff.bias, &xp}, grad_fn, loss_fn, 24,
                        pick, 1e-3, 1e-3);
  CHECK(rep.pass);

  Tensor4 proj2 = random_tensor(2, 2, 1, 1, rng);
  Param xp2("input", {x.v.size()});
  xp2.w = x.v;
  auto grad_fn2 = [&] {
    xp2.g = global_avg_pool_backward(2, 2, proj2).v;
  };
  auto loss_fn2 = [&] {
    Tensor4 in = x;
    in.v = xp2.w;
    return projection_loss(global_avg_pool(in), proj2);
  };
  auto rep2 = grad_check({&xp2}, grad_fn2, loss_fn2, 16, pick, 1e-3, 1e-3);
  CHECK(rep2.pass);
}

///// weighted masked BCE /////

TEST_CASE("bce frozen value: y=1, yhat=0.5, w=0.5") {
  Tensor4 pred(1, 1, 1, 1);
  pred.v = {0.5f};
  Tensor4 target(1, 1, 1, 1);
  target.v = {1.0f};
  auto res = weighted_masked_bce(pred, target, 0.5, nullptr);
  CHECK(res.loss == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("bce at a perfect prediction is at the clamp-noise level") {
  Tensor4 pred(1, 1, 1, 2);
  pred.v = {1.0f, 0.0f};
  Tensor4 target(1, 1, 1, 2);
  target.v = {1.0f, 0.0f};
  auto res = weighted_masked_bce(pred, target, 0.3, nullptr);
  CHECK(res.loss >= 0.0);
  CHECK(res.loss < 1e-6);
}

TEST_CASE("bce masked voxels have bitwise-zero gradients") {
  Rng rng(17);
  Tensor4 pred = random_tensor(1, 3, 4, 4, rng, 0.05, 0.95);
  Tensor4 target(1, 3, 4, 4);
  for (auto& t : target.v) t = rng.uniform() < 0.5 ? 1.0f : 0.0f;
  Tensor4 mask(1, 3, 4, 4);
  for (auto& m : mask.v) m = rng.uniform() < 0.5 ? 1.0f : 0.0f;
  mask.v[0] = 1.0f;  // ensure support nonempty
  auto res = weighted_masked_bce(pred, target, 0.4, &mask);
  for (std::size_t i = 0; i < mask.v.size(); ++i) {
    if (mask.v[i] == 0.0f) {
      CHECK(std::signbit(res.grad.v[i]) == false);
      CHECK(res.grad.v[i] == 0.0f);
    }
  }
}

TEST_CASE("bce with an all-ones mask is bit-identical to no mask") {
  Rng rng(18);
  Tensor4 pred = random_tensor(2, 3, 5, 5, rng, 0.01, 0.99);
  Tensor4 target(2, 3, 5, 5);
  for (auto& t : target.v) t = rng.uniform() < 0.5 ? 1.0f : 0.0f;
  Tensor4 ones(2, 3, 5, 5, 1.0f);
  auto masked = weighted_masked_bce(pred, target, 0.25, &ones);
  auto plain = weighted_masked_bce(pred, target, 0.25, nullptr);
  CHECK(masked.loss == plain.loss);
  CHECK(masked.grad.v == plain.grad.v);
}

TEST_CASE("bce rejects empty masks and bad weights") {
  Tensor4 pred(1, 1, 1, 1, 0.5f);
  Tensor4 target(1, 1, 1, 1, 1.0f);
  Tensor4 zeros(1, 1, 1, 1, 0.0f);
  CHECK_THROWS_AS(weighted_masked_bce(pred, target, 0.5, &zeros),
                  DegenerateMask);
  CHECK_THROWS_AS(weighted_masked_bce(pred, target, 0.0, nullptr), ParamError);
  CHECK_THROWS_AS(weighted_masked_bce(pred, target, 1.0, nullptr), ParamError);
}

TEST_CASE("bce gradient matches finite differences") {
  Rng rng(19);
  Tensor4 pred = random_tensor(1, 2, 4, 4, rng, 0.05, 0.95);
  Tensor4 target(1, 2, 4, 4);
  for (auto& t : target.v) t = rng.uniform() < 0.5 ? 1.0f : 0.0f;
  Param xp("pred", {pred.v.size()});
  xp.w = pred.v;
  auto grad_fn = [&] {
    Tensor4 in = pred;
    in.v = xp.w;
    xp.g = weighted_masked_bce(in, target, 0.35, nullptr).grad.v;
  };
  auto loss_fn = [&] {
    Tensor4 in = pred;
    in.v = xp.w;
    return weighted_masked_bce(in, target, 0.35, nullptr).loss;
  };
  Rng pick(20);
  auto rep = grad_check({&xp}, grad_fn, loss_fn, 24, pick, 1e-4, 1e-3);
  CHECK(rep.pass);
}

///// sgd /////

TEST_CASE("sgd plain step, zero gradient, and momentum recurrence") {
  Param p("p", {1});
  p.g[0] = 1.0f;
  sgd_step(p, 0.1, 0.0);
  CHECK(p.w[0] == doctest::Approx(-0.1).epsilon(1e-7));

  Param q("q", {3});
  sgd_step(q, 0.5, 0.9);  // zero gradient: parameters unchanged
  CHECK(q.w == std::vector<float>{0.0f, 0.0f, 0.0f});

  Param r("r", {1});
  r.g[0] = 1.0f;
  sgd_step(r, 1.0, 0.9);
  CHECK(r.w[0] == doctest::Approx(-1.0).epsilon(1e-7));
  r.g[0] = 1.0f;
  sgd_step(r, 1.0, 0.9);
  CHECK(r.w[0] == doctest::Approx(-2.9).epsilon(1e-6));

  CHECK_THROWS_AS(sgd_step(p, 0.0, 0.0), ParamError);
  CHECK_THROWS_AS(sgd_step(p, 0.1, 1.0), ParamError);
}

///// grad_check negative control /////

TEST_CASE("grad_check fails when the analytic gradient is scaled by 2") {
  Rng rng(21);
  Conv2d conv("c", 2, 2, 3, 1, 1, rng);
  Tensor4 x = random_tensor(1, 2, 5, 5, rng);
  Tensor4 proj = random_tensor(1, 2, 5, 5, rng);
  auto grad_fn = [&] {
    std::fill(conv.weight.g.begin(), conv.weight.g.end(), 0.0f);
    std::fill(conv.bias.g.begin(), conv.bias.g.end(), 0.0f);
    conv.backward(x, proj);
  };
  auto loss_fn = [&] { return projection_loss(conv.forward(x), proj); };
  Rng pick(22);
  auto good = grad_check({&conv.weight, &conv.bias}, grad_fn, loss_fn, 16,
                         pick, 1e-3, 1e-3, 1.0);
  CHECK(good.pass);
  auto bad = grad_check({&conv.weight, &conv.bias}, grad_fn, loss_fn, 16, pick,
                        1e-3, 1e-3, 2.0);
  CHECK(!bad.pass);
}

///// checkpoints /////

TEST_CASE("checkpoint round trip is bit-exact and validates metadata") {
  auto dir = std::filesystem::temp_directory_path() / "cascade_ckpt_tests";
  std::filesystem::create_directories(dir);
  Rng rng(23);
  Param a("net.conv1.weight", {4, 3, 3, 3});
  Param b("net.conv1.bias", {4});
  he_uniform_init(a, 27, rng);
  he_uniform_init(b, 4, rng);
  const std::vector<float> aw = a.w, bw = b.w;

  const std::string path = (dir / "ck").string();
  nlohmann::json hp = {{"lr", 0.01}, {"stages", {8, 16}}};
  save_checkpoint(path,
                  {{a.name, a.shape, &a.w}, {b.name, b.shape, &b.w}}, hp);

  nlohmann::json hp2 = read_checkpoint_hyperparams(path);
  CHECK(hp2["lr"] == 0.01);

  std::fill(a.w.begin(), a.w.end(), 0.0f);
  std::fill(b.w.begin(), b.w.end(), 0.0f);
  load_checkpoint(path, {{a.name, a.shape, &a.w}, {b.name, b.shape, &b.w}});
  CHECK(a.w == aw);
  CHECK(b.w == bw);

  // wrong name / wrong shape / truncated payload
  CHECK_THROWS_AS(
      load_checkpoint(path, {{"other", a.shape, &a.w}, {b.name, b.shape, &b.w}}),
      FormatError);
  CHECK_THROWS_AS(load_checkpoint(
                      path, {{a.name, {4, 3, 9}, &a.w}, {b.name, b.shape, &b.w}}),
                  FormatError);
  std::filesystem::resize_file(path + ".bin", 4 * (a.w.size() + b.w.size()) - 8);
  CHECK_THROWS_AS(
      load_checkpoint(path, {{a.name, a.shape, &a.w}, {b.name, b.shape, &b.w}}),
      FormatError);
}
