#include "cascade/crf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cascade/errors.hpp"
#include "cascade/threading.hpp"

namespace cascade {

namespace {

constexpr double kProbClamp = 1e-7;

double clamp_prob(double p) {
  return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
}

}  // namespace

void validate_params(const CrfParams& p) {
  if (!(p.w_app >= 0.0) || !std::isfinite(p.w_app) || !(p.w_smooth >= 0.0) ||
      !std::isfinite(p.w_smooth))
    throw ParamError("kernel weights must be finite and non-negative");
  if (!(p.theta_spatial_app > 0.0) || !(p.theta_intensity > 0.0) ||
      !(p.theta_spatial_smooth > 0.0))
    throw ParamError("kernel bandwidths must be strictly positive");
  if (p.iterations == 0) throw ParamError("iterations must be positive");
  if (p.max_voxels == 0) throw ParamError("max_voxels must be positive");
  if (p.block_depth == 0) throw ParamError("block_depth must be positive");
  if (p.block_overlap >= p.block_depth)
    throw ParamError("block_overlap must be smaller than block_depth");
}

void to_json(nlohmann::json& j, const CrfParams& p) {
  j = nlohmann::json{{"w_app", p.w_app},
                     {"w_smooth", p.w_smooth},
                     {"theta_spatial_app", p.theta_spatial_app},
                     {"theta_intensity", p.theta_intensity},
                     {"theta_spatial_smooth", p.theta_spatial_smooth},
                     {"iterations", p.iterations},
                     {"max_voxels", p.max_voxels},
                     {"block_depth", p.block_depth},
                     {"block_overlap", p.block_overlap}};
}

void from_json(const nlohmann::json& j, CrfParams& p) {
  p.w_app = j.value("w_app", p.w_app);
  p.w_smooth = j.value("w_smooth", p.w_smooth);
  p.theta_spatial_app = j.value("theta_spatial_app", p.theta_spatial_app);
  p.theta_intensity = j.value("theta_intensity", p.theta_intensity);
  p.theta_spatial_smooth =
      j.value("theta_spatial_smooth", p.theta_spatial_smooth);
  p.iterations = j.value("iterations", p.iterations);
  p.max_voxels = j.value("max_voxels", p.max_voxels);
  p.block_depth = j.value("block_depth", p.block_depth);
  p.block_overlap = j.value("block_overlap", p.block_overlap);
}

///// Model assembly /////

CrfModel build_crf(const Volume& prob, const Volume& image,
                   const CrfParams& params) {
  validate_params(params);
  if (!(prob.shape == image.shape))
    throw ShapeError("probability and image volumes must share a shape");

  CrfModel model;
  model.shape = prob.shape;
  model.spacing = prob.spacing;
  model.params = params;
  const std::size_t n = prob.shape.count();
  model.unary_bg.resize(n);
  model.unary_fg.resize(n);
  model.intensity.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = clamp_prob(prob.data[i]);
    model.unary_fg[i] = static_cast<float>(-std::log(p));
    model.unary_bg[i] = static_cast<float>(-std::log(1.0 - p));
    model.intensity[i] = image.data[i];
  }
  return model;
}

double pair_potential(const CrfModel& model, std::size_t i, std::size_t j) {
  const auto& s = model.shape;
  const auto coord = [&](std::size_t v, double& z, double& y, double& x) {
    z = static_cast<double>(v / (s.ny * s.nx)) * model.spacing.sz;
    y = static_cast<double>((v / s.nx) % s.ny) * model.spacing.sy;
    x = static_cast<double>(v % s.nx) * model.spacing.sx;
  };
  double zi, yi, xi, zj, yj, xj;
  coord(i, zi, yi, xi);
  coord(j, zj, yj, xj);
  const double d2 = (zi - zj) * (zi - zj) + (yi - yj) * (yi - yj) +
                    (xi - xj) * (xi - xj);
  const double di = static_cast<double>(model.intensity[i]) -
                    static_cast<double>(model.intensity[j]);
  const auto& p = model.params;
  const double app =
      p.w_app * std::exp(-d2 / (2.0 * p.theta_spatial_app *
                                p.theta_spatial_app) -
                         di * di / (2.0 * p.theta_intensity *
                                    p.theta_intensity));
  const double smooth =
      p.w_smooth * std::exp(-d2 / (2.0 * p.theta_spatial_smooth *
                                   p.theta_spatial_smooth));
  return app + smooth;
}

double energy(const CrfModel& model, const Mask& labeling) {
  if (!(labeling.shape == model.shape))
    throw ShapeError("labeling shape does not match the CRF model");
  const std::size_t n = model.shape.count();
  double e = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    e += labeling.data[i] != 0.0f ? model.unary_fg[i] : model.unary_bg[i];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if ((labeling.data[i] != 0.0f) != (labeling.data[j] != 0.0f))
        e += pair_potential(model, i, j);
  return e;
}

///// Mean-field inference /////

namespace {

// Per-axis Gaussian contributions -(d * spacing)^2 / (2 theta^2), floored at
// -kAxisCap per axis so no argument leaves exp_core's domain and every factor
// and partial product stays a normal float (no denormal stalls in the far
// field). The floor only touches kernel values below ~5e-7, far under the
// marginals' resolution. The z/y axes and the whole smoothness kernel are
// separable, so they enter as precomputed exp factors; only the x appearance
// axis stays in argument form, fused with the intensity term into the single
// per-pair exponential.
constexpr float kAxisCap = 14.5f;
constexpr float kIntensityCap = 43.5f;  // floor for the intensity exponent

std::vector<float> axis_arg_table(std::size_t n, double spacing,
                                  double theta) {
  std::vector<float> t(n);
  for (std::size_t d = 0; d < n; ++d) {
    const double dist = static_cast<double>(d) * spacing;
    const double a = -dist * dist / (2.0 * theta * theta);
    t[d] = std::max(static_cast<float>(a), -kAxisCap);
  }
  return t;
}

std::vector<float> axis_exp_table(std::size_t n, double spacing,
                                  double theta) {
  auto t = axis_arg_table(n, spacing, theta);
  for (float& v : t) v = std::exp(v);
  return t;
}

// Hot O(N) sweep for one voxel, cloned for wider SIMD where the host CPU
// supports it. Dispatch is resolved once per process, so results stay
// bit-identical across runs and thread counts on a given machine.
#if defined(__x86_64__) && defined(__has_attribute)
#if __has_attribute(target_clones)
#define CASCADE_TARGET_CLONES \
  __attribute__((target_clones("avx512f,fma", "avx2,fma", "default")))
#endif
#endif
#ifndef CASCADE_TARGET_CLONES
#define CASCADE_TARGET_CLONES
#endif

struct SweepCtx {
  std::size_t nz, ny, nx;
  const float *ez_a, *ey_a;  // z/y appearance exp factors
  const float *ez_s, *ey_s;  // z/y smoothness exp factors
  const float *intensity, *delta;
  float wa, ws, ni2t;
};

// sum_j k(i,j) * delta[j] over the whole block, j == i included. ra holds the
// x appearance axis in argument form, rs the x smoothness axis as factors,
// both already resolved to |xi - xj| order; kb is scratch of length nx.
CASCADE_TARGET_CLONES
double message_sweep(const SweepCtx& c, std::size_t zi, std::size_t yi,
                     float ii, const float* ra, const float* rs, float* kb) {
  double msg = 0.0;
  for (std::size_t zj = 0; zj < c.nz; ++zj) {
    const std::size_t dz = zi > zj ? zi - zj : zj - zi;
    for (std::size_t yj = 0; yj < c.ny; ++yj) {
      const std::size_t dy = yi > yj ? yi - yj : yj - yi;
      const float ca = c.wa * c.ez_a[dz] * c.ey_a[dy];
      const float cs = c.ws * c.ez_s[dz] * c.ey_s[dy];
      const std::size_t base = (zj * c.ny + yj) * c.nx;
      const float* irow = c.intensity + base;
      for (std::size_t xj = 0; xj < c.nx; ++xj) {
        const float di = ii - irow[xj];
        const float ti = di * di * c.ni2t;
        const float tic = ti > -kIntensityCap ? ti : -kIntensityCap;
        kb[xj] = ca * detail::exp_core(ra[xj] + tic) + cs * rs[xj];
      }
      // Four fixed partial sums break the serial add-latency chain; the
      // grouping is part of the algorithm, so results stay reproducible.
      const float* drow = c.delta + base;
      double m0 = 0.0, m1 = 0.0, m2 = 0.0, m3 = 0.0;
      std::size_t xj = 0;
      for (; xj + 4 <= c.nx; xj += 4) {
        m0 += static_cast<double>(kb[xj]) * drow[xj];
        m1 += static_cast<double>(kb[xj + 1]) * drow[xj + 1];
        m2 += static_cast<double>(kb[xj + 2]) * drow[xj + 2];
        m3 += static_cast<double>(kb[xj + 3]) * drow[xj + 3];
      }
      for (; xj < c.nx; ++xj)
        m0 += static_cast<double>(kb[xj]) * drow[xj];
      msg += (m0 + m1) + (m2 + m3);
    }
  }
  return msg;
}

void softmax_init(const CrfModel& model, MarginalField& q) {
  const std::size_t n = model.shape.count();
  q.q_bg.resize(n);
  q.q_fg.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double tb = -static_cast<double>(model.unary_bg[i]);
    const double tf = -static_cast<double>(model.unary_fg[i]);
    const double m = std::max(tb, tf);
    const double eb = std::exp(tb - m), ef = std::exp(tf - m);
    q.q_bg[i] = eb / (eb + ef);
    q.q_fg[i] = ef / (eb + ef);
  }
}

}  // namespace

MarginalField mean_field_infer(const CrfModel& model) {
  validate_params(model.params);
  const std::size_t n = model.shape.count();
  if (n > model.params.max_voxels)
    throw SizeError("volume exceeds the dense CRF cap of " +
                    std::to_string(model.params.max_voxels) + " voxels");

  MarginalField q;
  softmax_init(model, q);
  if (model.params.w_app == 0.0 && model.params.w_smooth == 0.0) return q;

  const auto& s = model.shape;
  const auto& p = model.params;
  const auto ez_a = axis_exp_table(s.nz, model.spacing.sz, p.theta_spatial_app);
  const auto ey_a = axis_exp_table(s.ny, model.spacing.sy, p.theta_spatial_app);
  const auto ax_a = axis_arg_table(s.nx, model.spacing.sx, p.theta_spatial_app);
  const auto ez_s =
      axis_exp_table(s.nz, model.spacing.sz, p.theta_spatial_smooth);
  const auto ey_s =
      axis_exp_table(s.ny, model.spacing.sy, p.theta_spatial_smooth);
  const auto ex_s =
      axis_exp_table(s.nx, model.spacing.sx, p.theta_spatial_smooth);
  const float wa = static_cast<float>(p.w_app);
  const float ws = static_cast<float>(p.w_smooth);
  const float ni2t = static_cast<float>(
      -1.0 / (2.0 * p.theta_intensity * p.theta_intensity));

  // The binary Potts update only needs the message difference
  // sum_j k(i,j) (Q_j(fg) - Q_j(bg)), so carry one balance channel.
  std::vector<float> delta(n);
  std::vector<double> next_fg(n);
  for (std::size_t it = 0; it < p.iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i)
      delta[i] = static_cast<float>(q.q_fg[i] - q.q_bg[i]);
    SweepCtx ctx{s.nz,           s.ny,           s.nx,
                 ez_a.data(),    ey_a.data(),    ez_s.data(),
                 ey_s.data(),    model.intensity.data(), delta.data(),
                 wa,             ws,             ni2t};
    parallel_for(n, [&](std::size_t i) {
      const std::size_t zi = i / (s.ny * s.nx);
      const std::size_t yi = (i / s.nx) % s.ny;
      const std::size_t xi = i % s.nx;
      std::vector<float> kbuf(s.nx), row_a(s.nx), row_s(s.nx);
      for (std::size_t xj = 0; xj < s.nx; ++xj) {
        const std::size_t dx = xi > xj ? xi - xj : xj - xi;
        row_a[xj] = ax_a[dx];
        row_s[xj] = ex_s[dx];
      }
      double msg = message_sweep(ctx, zi, yi, model.intensity[i],
                                 row_a.data(), row_s.data(), kbuf.data());
      // Remove the j == i contribution the sweep just added (same float
      // expression with all-ones spatial factors and exp_core(-0.0f) == 1,
      // so cancellation is exact).
      const float k_self =
          wa * ez_a[0] * ey_a[0] * detail::exp_core(ax_a[0] + -0.0f) +
          ws * ez_s[0] * ey_s[0] * ex_s[0];
      msg -= static_cast<double>(k_self) * delta[i];

      // Q_i(fg) = sigma((u_bg - u_fg) + (msg_bg - msg_fg)).
      const double logit = static_cast<double>(model.unary_bg[i]) -
                           static_cast<double>(model.unary_fg[i]) + msg;
      next_fg[i] = logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit))
                                : std::exp(logit) / (1.0 + std::exp(logit));
    });
    for (std::size_t i = 0; i < n; ++i) {
      q.q_fg[i] = next_fg[i];
      q.q_bg[i] = 1.0 - next_fg[i];
    }
  }
  return q;
}

Mask map_labeling(const CrfModel& model, const MarginalField& q) {
  Mask m;
  m.shape = model.shape;
  m.spacing = model.spacing;
  m.data.resize(model.shape.count());
  for (std::size_t i = 0; i < m.data.size(); ++i)
    m.data[i] = q.q_fg[i] > q.q_bg[i] ? 1.0f : 0.0f;
  return m;
}

Mask exhaustive_map(const CrfModel& model) {
  const std::size_t n = model.shape.count();
  if (n > 20) throw SizeError("exhaustive MAP is limited to 20 voxels");
  Mask candidate;
  candidate.shape = model.shape;
  candidate.spacing = model.spacing;
  candidate.data.resize(n);
  Mask best = candidate;
  double best_e = std::numeric_limits<double>::infinity();
  for (std::uint64_t bits = 0; bits < (1ull << n); ++bits) {
    for (std::size_t i = 0; i < n; ++i)
      candidate.data[i] = (bits >> i) & 1ull ? 1.0f : 0.0f;
    const double e = energy(model, candidate);
    if (e < best_e) {
      best_e = e;
      best = candidate;
    }
  }
  return best;
}

///// Block-wise refinement /////

Volume refine(const Volume& prob, const Volume& image,
              const CrfParams& params) {
  validate_params(params);
  if (!(prob.shape == image.shape))
    throw ShapeError("probability and image volumes must share a shape");
  const auto& s = prob.shape;
  const std::size_t slice = s.ny * s.nx;
  if (slice > params.max_voxels)
    throw SizeError("a single slice exceeds the dense CRF cap");

  // Depth shrinks until a block fits the cap; overlap shrinks with it.
  const std::size_t depth =
      std::min({params.block_depth, s.nz, params.max_voxels / slice});
  const std::size_t overlap = std::min(params.block_overlap, depth - 1);
  const std::size_t stride = depth - overlap;

  std::vector<std::size_t> starts;
  for (std::size_t z0 = 0;; z0 += stride) {
    if (z0 + depth >= s.nz) {
      starts.push_back(s.nz - depth);
      break;
    }
    starts.push_back(z0);
  }

  std::vector<double> acc(s.count(), 0.0);
  std::vector<std::uint32_t> hits(s.count(), 0);
  for (std::size_t z0 : starts) {
    Volume pblk, iblk;
    pblk.shape = {depth, s.ny, s.nx};
    pblk.spacing = prob.spacing;
    iblk.shape = pblk.shape;
    iblk.spacing = prob.spacing;
    pblk.data.assign(prob.data.begin() + static_cast<long>(z0 * slice),
                     prob.data.begin() + static_cast<long>((z0 + depth) *
                                                           slice));
    iblk.data.assign(image.data.begin() + static_cast<long>(z0 * slice),
                     image.data.begin() + static_cast<long>((z0 + depth) *
                                                            slice));
    CrfModel model = build_crf(pblk, iblk, params);
    MarginalField q = mean_field_infer(model);
    for (std::size_t v = 0; v < depth * slice; ++v) {
      acc[z0 * slice + v] += q.q_fg[v];
      hits[z0 * slice + v] += 1;
    }
  }

  Volume out;
  out.shape = s;
  out.spacing = prob.spacing;
  out.data.resize(s.count());
  for (std::size_t v = 0; v < s.count(); ++v)
    out.data[v] = static_cast<float>(acc[v] / static_cast<double>(hits[v]));
  return out;
}

}  // namespace cascade
