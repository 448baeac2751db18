#pragma once

// Central finite-difference oracle for tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "lectrack/nncore.hpp"

namespace lectrack::testing {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst;  // "param[index]"
  std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / scale;
}

// `loss` records a scalar on the given tape using the store's parameters.
// Central differences at h and h/2 are combined by Richardson extrapolation (error O(h^4)).
inline GradCheckResult grad_check(nn::ParamStore& store, const std::function<nn::Var(nn::Tape&)>& loss,
                                  double h = 1e-4) {
  store.zero_grad();
  {
    nn::Tape tape;
    tape.backward(loss(tape));
  }
  auto value = [&] {
    nn::Tape tape;
    return tape.value(loss(tape))[0];
  };
  GradCheckResult r;
  for (auto& p : store.params()) {
    auto data = p.value.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      auto central = [&](double step) {
        data[i] = saved + step;
        const double up = value();
        data[i] = saved - step;
        const double down = value();
        data[i] = saved;
        return (up - down) / (2 * step);
      };
      const double numeric = (4 * central(h / 2) - central(h)) / 3;
      const double err = relative_error(p.grad.data()[i], numeric);
      ++r.checked;
      if (err > r.max_relative_error) {
        r.max_relative_error = err;
        r.worst = p.name + "[" + std::to_string(i) + "] analytic " + std::to_string(p.grad.data()[i]) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

}  // namespace lectrack::testing
