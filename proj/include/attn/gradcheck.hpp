#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "attn/graph.hpp"

namespace attn {

// Relative error convention shared by every gradient check in the project:
// |a - n| / max(|a|, |n|, 1e-8).
inline double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double step = 0.0;
  double tolerance = 0.0;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_err);
    return w;
  }

  bool passed() const { return worst() < tolerance; }

  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (!(e.max_rel_err < tolerance)) out.push_back(e.param);
    return out;
  }
};

// Central finite differences of the named scalar output with respect to each
// listed input, element by element.
inline GradientMap finite_differences(const Graph& g,
                                      const std::map<std::string, Tensor>& bindings,
                                      std::string_view output,
                                      std::span<const std::string> wrt, double step) {
  check(step > 0.0, "finite_differences: step must be positive");
  Evaluation ev(g);
  for (const auto& [name, v] : bindings) ev.bind(name, v);
  const NodeId out_id = g.by_name(output);

  GradientMap result;
  for (const auto& name : wrt) {
    Tensor x = bindings.at(name);
    Tensor grad(x.shape);
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double orig = x.data[k];
      x.data[k] = orig + step;
      ev.bind(name, x);
      ev.run();
      const double fp = ev.value(out_id).data[0];
      x.data[k] = orig - step;
      ev.bind(name, x);
      ev.run();
      const double fm = ev.value(out_id).data[0];
      x.data[k] = orig;
      grad.data[k] = (fp - fm) / (2.0 * step);
    }
    ev.bind(name, x);
    result.emplace(name, std::move(grad));
  }
  return result;
}

// Compares a supplied gradient map against central differences. Split out
// from grad_check so a deliberately corrupted map can be fed through the
// same reporting path.
inline GradCheckReport grad_check_against(const Graph& g,
                                          const std::map<std::string, Tensor>& bindings,
                                          std::string_view output, const GradientMap& analytic,
                                          double step = 1e-5, double tolerance = 1e-4) {
  std::vector<std::string> wrt;
  for (const auto& [name, _] : analytic) wrt.push_back(name);
  const GradientMap numeric = finite_differences(g, bindings, output, wrt, step);

  GradCheckReport report;
  report.step = step;
  report.tolerance = tolerance;
  for (const auto& [name, a] : analytic) {
    const Tensor& n = numeric.at(name);
    GradCheckEntry e;
    e.param = name;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double rel = grad_rel_err(a.data[k], n.data[k]);
      if (rel >= e.max_rel_err) {
        e.max_rel_err = rel;
        e.worst_index = k;
        e.analytic = a.data[k];
        e.numeric = n.data[k];
      }
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

inline GradCheckReport grad_check(const Graph& g, const std::map<std::string, Tensor>& bindings,
                                  std::string_view output, std::span<const std::string> wrt,
                                  double step = 1e-5, double tolerance = 1e-4) {
  const GradientMap analytic = backward(g, bindings, output, wrt);
  return grad_check_against(g, bindings, output, analytic, step, tolerance);
}

}  // namespace attn
