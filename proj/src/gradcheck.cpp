#include "cascade/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cascade {

GradCheckReport grad_check(const std::vector<Param*>& params,
                           const std::function<void()>& grad_fn,
                           const std::function<double()>& loss_fn,
                           std::size_t samples_per_tensor, Rng& rng,
                           double eps_scale, double tol,
                           double analytic_scale) {
  grad_fn();
  std::vector<std::vector<float>> analytic;
  analytic.reserve(params.size());
  for (const Param* p : params) analytic.push_back(p->g);

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    std::vector<std::size_t> picks(p.count());
    std::iota(picks.begin(), picks.end(), 0);
    if (picks.size() > samples_per_tensor) {
      rng.shuffle(picks);
      picks.resize(samples_per_tensor);
    }
    for (std::size_t i : picks) {
      const float orig = p.w[i];
      const double eps =
          eps_scale * std::max(1.0, std::fabs(static_cast<double>(orig)));
      p.w[i] = static_cast<float>(orig + eps);
      const double lp = loss_fn();
      p.w[i] = static_cast<float>(orig - eps);
      const double lm = loss_fn();
      p.w[i] = orig;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double ga = static_cast<double>(analytic[pi][i]) * analytic_scale;
      const double rel = std::fabs(ga - numeric) /
                         std::max({1.0, std::fabs(ga), std::fabs(numeric)});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = p.name;
        rep.worst_index = i;
        rep.worst_analytic = ga;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace cascade
