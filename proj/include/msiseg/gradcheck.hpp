#pragma once

#include <string>
#include <vector>

#include "msiseg/graph.hpp"

namespace msiseg {

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-3;
  double worst = 0.0;
  bool pass = true;
};

// Verifies analytic parameter gradients against central finite differences.
// The whole procedure runs in double: loss is a fixed random weighting of the
// output (a plain sum would let sign errors cancel across symmetric paths),
// epsilon is 1e-4, and the relative error for each sampled element is
//   |g_analytic - g_fd| / max(|g_analytic|, |g_fd|, 1e-8).
// At most max_per_param elements are sampled per parameter (all, if fewer).
inline GradCheckReport grad_check(Graph<double>& graph, const Tensor<double>& input,
                                  double tolerance = 1e-3, size_t max_per_param = 24,
                                  uint64_t seed = 7) {
  constexpr double kEps = 1e-4;
  Rng rng(hash_combine(seed, 0x67726164));
  GradCheckReport report;
  report.tolerance = tolerance;

  const Tensor<double>& out0 = graph.forward(input, /*train=*/true);
  std::vector<double> loss_w(out0.numel());
  for (double& w : loss_w) w = rng.uniform() * 2.0 - 1.0;

  auto loss_of = [&](const Tensor<double>& out) {
    double acc = 0.0;
    for (size_t i = 0; i < out.numel(); ++i) acc += loss_w[i] * out.values[i];
    return acc;
  };

  Tensor<double> seed_grad(out0.shape);
  seed_grad.values = loss_w;
  graph.params().zero_grad();
  graph.backward(seed_grad);

  for (const std::string& name : graph.params().names()) {
    Param<double>& p = graph.params().get(name);
    if (!p.trainable) continue;
    GradCheckEntry entry;
    entry.param = name;
    const size_t n = p.tensor.numel();
    std::vector<size_t> picks;
    if (n <= max_per_param) {
      for (size_t i = 0; i < n; ++i) picks.push_back(i);
    } else {
      for (size_t k = 0; k < max_per_param; ++k)
        picks.push_back(static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n) - 1)));
    }
    for (size_t idx : picks) {
      const double saved = p.tensor.values[idx];
      p.tensor.values[idx] = saved + kEps;
      const double lp = loss_of(graph.forward(input, true));
      p.tensor.values[idx] = saved - kEps;
      const double lm = loss_of(graph.forward(input, true));
      p.tensor.values[idx] = saved;
      const double g_fd = (lp - lm) / (2.0 * kEps);
      const double g_an = p.tensor.grad[idx];
      const double rel = std::abs(g_an - g_fd) / std::max({std::abs(g_an), std::abs(g_fd), 1e-8});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      ++entry.checked;
    }
    report.worst = std::max(report.worst, entry.max_rel_err);
    if (entry.max_rel_err >= tolerance) report.pass = false;
    report.entries.push_back(std::move(entry));
  }
  // leave activations consistent with unperturbed parameters
  graph.forward(input, true);
  return report;
}

}  // namespace msiseg
