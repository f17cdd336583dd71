#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cascade/nn.hpp"

namespace cascade {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool pass = false;
};

// Compares analytic gradients against central finite differences on a random
// subsample of entries per parameter tensor.
//   grad_fn  — zeroes and repopulates every p->g (one backward pass)
//   loss_fn  — recomputes the scalar loss at the current parameter values
//   eps_scale — perturbation is eps_scale * max(1, |p|)
//   analytic_scale — multiplies the analytic gradient before comparison;
//     anything but 1.0 must make the check fail (negative-control hook).
// rel_err = |ga - gn| / max(1, |ga|, |gn|); pass iff max over samples <= tol.
GradCheckReport grad_check(const std::vector<Param*>& params,
                           const std::function<void()>& grad_fn,
                           const std::function<double()>& loss_fn,
                           std::size_t samples_per_tensor, Rng& rng,
                           double eps_scale, double tol,
                           double analytic_scale = 1.0);

}  // namespace cascade
