#pragma once

// Central finite-difference gradient checking. The graph is rebuilt from the
// current parameter values on every probe, so the builder must close over the
// same ag::Var parameter nodes it perturbs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dgseg/autodiff.hpp"
#include "dgseg/rng.hpp"
#include "dgseg/types.hpp"

namespace gradcheck {

using dgseg::Index;
using dgseg::Mat;
using dgseg::Scalar;

struct Result {
  Scalar max_rel_err = 0.0;
  Scalar max_abs_err = 0.0;
  std::string worst;   // "<param>(r,c): analytic=..., fd=..."
  int probes = 0;
};

struct Target {
  std::string name;
  dgseg::ag::Var var;
};

// Error relative to the gradient magnitude, floored at 1e-3 so that the
// roundoff noise floor of the difference quotient itself (about eps*f/step,
// ~1e-9 absolute for these losses) cannot register on near-zero entries.
inline Scalar rel_err(Scalar a, Scalar f) {
  return std::abs(a - f) / std::max({Scalar(1e-3), std::abs(a), std::abs(f)});
}

// Checks d(builder())/d(entry) for sampled entries of each target against a
// central difference with the given step. max_probes_per_param <= 0 checks
// every entry.
inline Result check(const std::function<dgseg::ag::Var()>& builder,
                    const std::vector<Target>& targets, dgseg::Rng& rng,
                    int max_probes_per_param = 6, Scalar step = 1e-5) {
  auto root = builder();
  for (const auto& t : targets) {
    t.var->grad.setZero(t.var->value.rows(), t.var->value.cols());
    t.var->grad_ready = true;
  }
  dgseg::ag::backward(root);
  std::vector<Mat> analytic;
  for (const auto& t : targets) analytic.push_back(t.var->grad);

  Result res;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    const auto& t = targets[ti];
    const Index total = t.var->value.size();
    std::vector<Index> entries;
    if (max_probes_per_param <= 0 ||
        total <= static_cast<Index>(max_probes_per_param)) {
      for (Index i = 0; i < total; ++i) entries.push_back(i);
    } else {
      for (int i = 0; i < max_probes_per_param; ++i)
        entries.push_back(static_cast<Index>(
            rng.uniform_int(static_cast<std::uint64_t>(total))));
    }
    for (Index flat : entries) {
      const Index r = flat % t.var->value.rows();
      const Index c = flat / t.var->value.rows();
      const Scalar saved = t.var->value(r, c);
      t.var->value(r, c) = saved + step;
      const Scalar fp = builder()->value(0, 0);
      t.var->value(r, c) = saved - step;
      const Scalar fm = builder()->value(0, 0);
      t.var->value(r, c) = saved;
      const Scalar fd = (fp - fm) / (2.0 * step);
      const Scalar ana = analytic[ti](r, c);
      const Scalar re = rel_err(ana, fd);
      ++res.probes;
      res.max_abs_err = std::max(res.max_abs_err, std::abs(ana - fd));
      if (re > res.max_rel_err) {
        res.max_rel_err = re;
        res.worst = t.name + "(" + std::to_string(r) + "," +
                    std::to_string(c) + "): analytic=" + std::to_string(ana) +
                    ", fd=" + std::to_string(fd);
      }
    }
  }
  return res;
}

}  // namespace gradcheck
