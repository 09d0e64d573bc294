// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <functional>

#include "caustic/core.hpp"

namespace caustic {

// Objective callback: returns the value at x and, when grad is non-null,
// writes the gradient. May return +infinity for infeasible points; the line
// search treats those as insufficient decrease.
using Objective = std::function<double(const std::vector<double>& x, std::vector<double>* grad)>;

struct SolverOptions {
  int memory = 10;
  int max_iterations = 500;
  double grad_tolerance = 0;  // <= 0: defaults to 1e-7 * (1 + |f(x0)|)
  double armijo_c = 1e-4;
  double step_shrink = 0.5;
  int max_backtracks = 60;
};

enum class SolveStatus { Converged, MaxIterations, StalledLineSearch };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Converged:
      return "converged";
    case SolveStatus::MaxIterations:
      return "max-iterations";
    default:
      return "stalled-line-search";
  }
}

struct IterationRecord {
  int iteration;
  double value;
  double grad_norm;
  double step;
};

struct SolveResult {
  std::vector<double> x;
  double value = 0;
  int iterations = 0;
  int evaluations = 0;
  SolveStatus status = SolveStatus::Converged;
  std::vector<IterationRecord> log;
};

// Limited-memory BFGS with Armijo backtracking. Every accepted iterate has a
// finite value no larger than its predecessor, so barrier-guarded feasibility
// is preserved along the run. One quadratic-interpolation refinement follows
// each accepted step; on quadratic objectives it lands on the exact 1-D
// minimizer, which keeps the method equivalent to CG there.
inline SolveResult minimize(const Objective& f, std::vector<double> x0, const SolverOptions& opts,
                            bool keep_log = false) {
  const std::size_t n = x0.size();
  SolveResult res;
  std::vector<double> g(n), x_new(n), g_new(n), x_ref(n);
  double fx = f(x0, &g);
  ++res.evaluations;
  if (!std::isfinite(fx)) throw Error("infeasible start: objective is not finite at x0");

  const double gtol = opts.grad_tolerance > 0 ? opts.grad_tolerance : 1e-7 * (1.0 + std::fabs(fx));
  auto inf_norm = [](const std::vector<double>& v) {
    double m = 0;
    for (double a : v) m = std::max(m, std::fabs(a));
    return m;
  };

  struct Pair {
    std::vector<double> s, y;
    double rho;
  };
  std::deque<Pair> mem;
  std::vector<double> d(n);

  res.status = SolveStatus::MaxIterations;
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    const double gnorm = inf_norm(g);
    if (keep_log) res.log.push_back({it, fx, gnorm, 0});
    if (gnorm <= gtol) {
      res.status = SolveStatus::Converged;
      break;
    }

    // two-loop recursion
    d.assign(g.begin(), g.end());
    std::vector<double> alpha(mem.size());
    for (std::size_t k = mem.size(); k-- > 0;) {
      const Pair& p = mem[k];
      double sd = 0;
      for (std::size_t i = 0; i < n; ++i) sd += p.s[i] * d[i];
      alpha[k] = p.rho * sd;
      for (std::size_t i = 0; i < n; ++i) d[i] -= alpha[k] * p.y[i];
    }
    if (!mem.empty()) {
      const Pair& p = mem.back();
      double yy = 0, sy = 0;
      for (std::size_t i = 0; i < n; ++i) {
        yy += p.y[i] * p.y[i];
        sy += p.s[i] * p.y[i];
      }
      const double scale = sy / yy;
      for (double& v : d) v *= scale;
    }
    for (std::size_t k = 0; k < mem.size(); ++k) {
      const Pair& p = mem[k];
      double yd = 0;
      for (std::size_t i = 0; i < n; ++i) yd += p.y[i] * d[i];
      const double beta = p.rho * yd;
      for (std::size_t i = 0; i < n; ++i) d[i] += (alpha[k] - beta) * p.s[i];
    }
    for (double& v : d) v = -v;

    double slope = 0;
    for (std::size_t i = 0; i < n; ++i) slope += g[i] * d[i];
    if (slope >= 0) {  // not a descent direction: restart from steepest descent
      mem.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      slope = 0;
      for (std::size_t i = 0; i < n; ++i) slope += g[i] * d[i];
      if (slope >= 0) {
        res.status = SolveStatus::Converged;
        break;
      }
    }

    double step = 1.0;
    if (it == 0) {
      const double dn = inf_norm(d);
      if (dn > 1.0) step = 1.0 / dn;
    }
    double f_trial = 0;
    bool accepted = false;
    for (int bt = 0; bt < opts.max_backtracks; ++bt) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = x0[i] + step * d[i];
      f_trial = f(x_new, nullptr);
      ++res.evaluations;
      if (std::isfinite(f_trial) && f_trial <= fx + opts.armijo_c * step * slope) {
        accepted = true;
        break;
      }
      step *= opts.step_shrink;
    }
    if (!accepted) {
      res.status = SolveStatus::StalledLineSearch;
      break;
    }

    // quadratic interpolation through f(0), f'(0), f(step)
    const double curv = f_trial - fx - slope * step;
    if (curv > 0) {
      const double refined = -slope * step * step / (2.0 * curv);
      if (refined > 0 && std::fabs(refined - step) > 1e-12 * step) {
        for (std::size_t i = 0; i < n; ++i) x_ref[i] = x0[i] + refined * d[i];
        const double f_ref = f(x_ref, nullptr);
        ++res.evaluations;
        if (std::isfinite(f_ref) && f_ref < f_trial) {
          step = refined;
          x_new.swap(x_ref);
          f_trial = f_ref;
        }
      }
    }

    const double f_new = f(x_new, &g_new);
    ++res.evaluations;

    Pair p;
    p.s.resize(n);
    p.y.resize(n);
    double sy = 0, snorm2 = 0, ynorm2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      p.s[i] = x_new[i] - x0[i];
      p.y[i] = g_new[i] - g[i];
      sy += p.s[i] * p.y[i];
      snorm2 += p.s[i] * p.s[i];
      ynorm2 += p.y[i] * p.y[i];
    }
    if (sy > 1e-12 * std::sqrt(snorm2) * std::sqrt(ynorm2)) {  // curvature guard
      p.rho = 1.0 / sy;
      mem.push_back(std::move(p));
      if (static_cast<int>(mem.size()) > opts.memory) mem.pop_front();
    }
    x0.swap(x_new);
    g.swap(g_new);
    fx = f_new;
    if (keep_log && !res.log.empty()) res.log.back().step = step;
  }
  res.x = std::move(x0);
  res.value = fx;
  res.iterations = it;
  return res;
}

}  // namespace caustic
