#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wavbert/error.hpp"
#include "wavbert/nn.hpp"
#include "wavbert/rng.hpp"

namespace wavbert {

struct GradcheckOptions {
  double sample_fraction = 0.01;
  // Central difference half-width. Full-model losses sit near 70 while many
  // gradients are below 1e-6, so a 1e-5 step drowns in rounding noise.
  double step = 1e-3;
  bool fourth_order = true;     // 4-point stencil; false = plain 2-point
  double tolerance = 1e-4;      // max relative error for a pass
  double denominator_floor = 1e-6;
  std::size_t max_parameters = 500000;
  std::uint64_t seed = 7;
};

struct GradcheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::size_t census = 0;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  GradcheckEntry worst;
  std::vector<GradcheckEntry> failures;
  bool passed = true;
  std::string warning;
};

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// `loss` must build a deterministic scalar on the current tape. Elements are
// sampled uniformly over the whole parameter set, plus one element from every
// tensor the uniform draw missed.
inline GradcheckReport gradcheck(const ParameterList& params, const std::function<Tensor()>& loss,
                                 const GradcheckOptions& opt = {}) {
  GradcheckReport report;
  report.census = params.census();
  if (report.census > opt.max_parameters) {
    throw CapacityError("gradcheck: " + std::to_string(report.census) + " parameters exceed the guard of " +
                        std::to_string(opt.max_parameters));
  }
  if (opt.sample_fraction <= 0.0) {
    report.warning = "sample_fraction is 0; nothing checked";
    return report;
  }

  // Analytic gradients.
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  {
    TapeScope scope;
    const Tensor l = loss();
    if (!std::isfinite(l.item())) throw NumericError("gradcheck: non-finite loss");
    backward(l);
  }

  // Sample (tensor, element) pairs.
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  Rng rng(opt.seed);
  const auto target = static_cast<std::size_t>(std::ceil(opt.sample_fraction * static_cast<double>(report.census)));
  std::vector<std::size_t> flat(report.census);
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = i;
  for (std::size_t i = 0; i < std::min(target, flat.size()); ++i) {
    std::swap(flat[i], flat[i + rng.below(flat.size() - i)]);
  }
  flat.resize(std::min(target, flat.size()));
  std::sort(flat.begin(), flat.end());
  std::vector<bool> covered(params.size(), false);
  {
    std::size_t tensor = 0, offset = 0;
    for (std::size_t f : flat) {
      while (f >= offset + params[tensor].tensor.numel()) offset += params[tensor++].tensor.numel();
      picks.emplace_back(tensor, f - offset);
      covered[tensor] = true;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!covered[i]) picks.emplace_back(i, rng.below(params[i].tensor.numel()));
  }

  NoGradGuard no_grad;
  for (const auto& [ti, ei] : picks) {
    Tensor t = params[ti].tensor;
    const double analytic = t.has_grad() ? t.grad()[ei] : 0.0;
    auto values = t.mutable_data();
    const double original = values[ei];
    auto at = [&](double delta) {
      values[ei] = original + delta;
      const double v = loss().item();
      values[ei] = original;
      return v;
    };
    const double h = opt.step;
    const double d1 = at(h) - at(-h);
    const double numeric =
        opt.fourth_order ? (8.0 * d1 - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h) : d1 / (2.0 * h);

    GradcheckEntry e{params[ti].name, ei, analytic, numeric,
                     relative_error(analytic, numeric, opt.denominator_floor)};
    ++report.checked;
    if (report.checked == 1 || std::isnan(e.rel_error) ||
        (!std::isnan(report.max_rel_error) && e.rel_error > report.max_rel_error)) {
      report.max_rel_error = e.rel_error;
      report.worst = e;
    }
    if (!(e.rel_error < opt.tolerance)) {
      report.passed = false;
      report.failures.push_back(e);
    }
  }
  return report;
}

}  // namespace wavbert
