// Central finite-difference gradient checking.
//
// The numeric side only ever calls the forward pass, so it stays independent
// of the backward implementation it certifies. Relative error uses
// |a - n| / max(|a|, |n|, 1e-6), reported as the max over coordinates.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>

#include "fvlab/tape.hpp"
#include "fvlab/tensor.hpp"

namespace fvlab {

// Builds the scalar objective on a graph given the node id of x.
// The same builder serves both the analytic pass (x as leaf) and the
// numeric evaluations (x as constant).
using ScalarFn = std::function<int(Graph&, int x_id)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::int64_t worst_coord = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

inline float eval_scalar(const ScalarFn& f, const Tensor& x) {
  Graph g;
  const int id = g.constant(x);
  return g.value(f(g, id)).data[0];
}

inline GradCheckResult finite_diff_check(const ScalarFn& f, Tensor x, float eps) {
  if (eps <= 0.0f) fail("finite_diff_check: eps must be > 0, got ", eps);
  Tensor probe = x;
  probe.grad.clear();
  {
    Graph g;
    const int id = g.leaf(probe);
    const int loss = f(g, id);
    if (g.value(loss).numel() != 1)
      fail("finite_diff_check: objective must be scalar, got ",
           shape_str(g.value(loss).shape));
    g.backward(loss);
  }

  GradCheckResult r;
  Tensor work = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const float orig = work.data[static_cast<std::size_t>(i)];
    work.data[static_cast<std::size_t>(i)] = orig + eps;
    const double fp = eval_scalar(f, work);
    work.data[static_cast<std::size_t>(i)] = orig - eps;
    const double fm = eval_scalar(f, work);
    work.data[static_cast<std::size_t>(i)] = orig;

    const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
    const double analytic =
        probe.grad.empty() ? 0.0 : static_cast<double>(probe.grad[static_cast<std::size_t>(i)]);
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
    const double rel = std::fabs(analytic - numeric) / denom;
    if (rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_coord = i;
      r.analytic_at_worst = analytic;
      r.numeric_at_worst = numeric;
    }
  }
  return r;
}

}  // namespace fvlab
