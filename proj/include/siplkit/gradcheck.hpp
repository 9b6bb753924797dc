// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "siplkit/autodiff.hpp"
#include "siplkit/rng.hpp"

namespace siplkit {

struct CheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Denominator floor: rel = |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
  /// 0 checks every entry; otherwise a seeded sample of this many per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t sample_seed = 0;
};

/// Scalar objective built on a fresh tape each call. It must fetch parameters
/// through tape.param() so perturbations are observed.
using Objective = std::function<Var<double>(Tape<double>&)>;

/// Compares analytic gradients of `f` with central differences
/// (f(θ+eps·e_i) − f(θ−eps·e_i)) / (2·eps), in 64-bit arithmetic.
inline CheckReport grad_check(const Objective& f, const std::vector<Parameter<double>*>& params,
                              const GradCheckOptions& opt = {}) {
  if (!(opt.eps > 1e-6 && opt.eps < 1e-2)) throw Error("grad_check: eps must lie in (1e-6, 1e-2)");
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape(true);
    tape.backward(f(tape));
  }
  for (auto* p : params) {
    if (!p->grad.all_finite()) throw NonFiniteGradient("non-finite analytic gradient in " + p->name);
  }

  auto eval = [&f] {
    Tape<double> tape(false);
    return f(tape).value().item();
  };

  CheckReport rep;
  Rng rng(opt.sample_seed);
  for (auto* p : params) {
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_entries_per_param > 0 && idx.size() > opt.max_entries_per_param) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(opt.max_entries_per_param);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      const double orig = p->value[i];
      p->value[i] = orig + opt.eps;
      const double fp = eval();
      p->value[i] = orig - opt.eps;
      const double fm = eval();
      p->value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double analytic = p->grad[i];
      const double abs_err = std::abs(analytic - numeric);
      const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error || rep.entries_checked == 0) {
        rep.max_rel_error = std::max(rep.max_rel_error, rel);
        rep.worst_param = p->name;
        rep.worst_index = i;
      }
      ++rep.entries_checked;
    }
  }
  rep.passed = rep.max_rel_error < opt.tol;
  return rep;
}

inline CheckReport grad_check(const Objective& f, const std::vector<Parameter<double>*>& params, double eps,
                              double tol) {
  GradCheckOptions opt;
  opt.eps = eps;
  opt.tol = tol;
  return grad_check(f, params, opt);
}

}  // namespace siplkit
