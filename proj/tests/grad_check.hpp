#pragma once

// Central finite-difference oracle shared by the gradient tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "vitmae/random.hpp"
#include "vitmae/tensor.hpp"
#include "vitmae/vit.hpp"

namespace vitmae::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "name[index] analytic numeric" of the largest error
};

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares `param`'s analytic gradient against central differences of
/// `loss_fn` at the given coordinates. `loss_fn` must recompute the forward
/// pass from the parameter's current values.
inline GradCheckResult check_coordinates(Tensor<double>& param, const std::vector<double>& analytic,
                                         const std::vector<std::size_t>& coords,
                                         const std::function<double()>& loss_fn, double h = 1e-5,
                                         double floor = 1e-6) {
  GradCheckResult r;
  auto values = param.mutable_data();
  for (std::size_t c : coords) {
    const double saved = values[c];
    values[c] = saved + h;
    const double up = loss_fn();
    values[c] = saved - h;
    const double down = loss_fn();
    values[c] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double err = relative_error(analytic[c], numeric, floor);
    if (err > r.max_rel_error || r.worst.empty()) {
      std::ostringstream os;
      os << "[" << c << "] analytic " << analytic[c] << " numeric " << numeric;
      r.worst = os.str();
    }
    r.max_rel_error = std::max(r.max_rel_error, err);
    ++r.coordinates;
  }
  return r;
}

/// Full check of every coordinate of every input.
inline GradCheckResult check_all(std::vector<Tensor<double>> inputs,
                                 const std::function<Tensor<double>()>& forward, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  forward().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  GradCheckResult total;
  auto loss = [&] { return forward().item(); };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> coords(inputs[i].numel());
    for (std::size_t c = 0; c < coords.size(); ++c) coords[c] = c;
    auto r = check_coordinates(inputs[i], analytic[i], coords, loss, h);
    total.max_rel_error = std::max(total.max_rel_error, r.max_rel_error);
    total.coordinates += r.coordinates;
  }
  return total;
}

/// Samples `per_tensor` coordinates from every parameter tensor and compares
/// them with central differences of `loss_fn`.
inline GradCheckResult check_parameters(ParameterSet<double>& params, const std::function<Tensor<double>()>& loss_fn,
                                        std::size_t per_tensor, std::uint64_t seed, double h = 1e-5,
                                        double floor = 1e-6) {
  params.zero_grad();
  loss_fn().backward();
  Rng rng(seed, "grad-check");
  GradCheckResult total;
  auto scalar_loss = [&] { return loss_fn().item(); };
  for (auto& e : params.entries()) {
    std::vector<double> analytic(e.tensor.numel(), 0.0);
    if (e.tensor.has_grad()) analytic.assign(e.tensor.grad().begin(), e.tensor.grad().end());
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < std::min(per_tensor, e.tensor.numel()); ++i) coords.push_back(rng.below(e.tensor.numel()));
    auto r = check_coordinates(e.tensor, analytic, coords, scalar_loss, h, floor);
    if (r.max_rel_error >= total.max_rel_error) total.worst = e.name + r.worst;
    total.max_rel_error = std::max(total.max_rel_error, r.max_rel_error);
    total.coordinates += r.coordinates;
  }
  return total;
}

}  // namespace vitmae::testing
