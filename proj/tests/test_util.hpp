#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "das/rng.hpp"
#include "das/tensor.hpp"

namespace das_test {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline das::Tensor random_tensor(das::Shape shape, das::Rng& rng,
                                 double scale = 1.0) {
  das::Tensor t = das::Tensor::zeros(std::move(shape));
  for (double& v : t.values_mut()) v = scale * rng.gaussian();
  return t;
}

/// Central finite differences against tape gradients. `build` must rerun
/// the whole forward from the current parameter values and return the
/// scalar loss; it is evaluated both under a tape (analytic pass) and
/// without one (numeric probes).
inline double max_grad_rel_err(const std::function<das::Tensor()>& build,
                               std::vector<das::Parameter> params,
                               double eps = 1e-6) {
  for (das::Parameter& p : params) p.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    das::Tape tape;
    das::TapeScope scope(tape);
    das::Tensor loss = build();
    tape.backward(loss);
  }
  for (das::Parameter& p : params) {
    if (p.tensor().has_grad()) {
      auto g = p.tensor().grad();
      analytic.emplace_back(g.begin(), g.end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
    p.zero_grad();
  }

  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto w = params[pi].tensor().values_mut();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double orig = w[k];
      w[k] = orig + eps;
      const double fp = build().item();
      w[k] = orig - eps;
      const double fm = build().item();
      w[k] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      max_err = std::max(max_err, rel_err(analytic[pi][k], numeric));
    }
  }
  return max_err;
}

inline std::vector<std::byte> snapshot_bytes(const das::Tensor& t) {
  auto vals = t.values();
  const std::byte* p = reinterpret_cast<const std::byte*>(vals.data());
  return std::vector<std::byte>(p, p + vals.size() * sizeof(double));
}

}  // namespace das_test
