#include "consert/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "consert/errors.hpp"
#include "consert/rng.hpp"

namespace consert {
namespace {

double weighted_sum(const Tensor& out, const std::vector<float>& weights) {
  if (out.numel() == 1) return static_cast<double>(weights[0]) * out.wide_item();
  double total = 0.0;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    total += static_cast<double>(weights[i]) * static_cast<double>(d[i]);
  return total;
}

}  // namespace

GradCheckReport grad_check(const GradCheckFn& fn, std::vector<Tensor> leaves,
                           float epsilon, double tolerance,
                           std::uint64_t projection_seed) {
  if (!(epsilon > 0.0f)) throw ContractError("grad_check: epsilon must be positive");
  for (const Tensor& leaf : leaves) {
    if (!leaf.requires_grad()) {
      throw ContractError("grad_check: every probed leaf must require gradients");
    }
  }

  std::vector<float> weights;
  std::vector<std::vector<float>> analytic;
  {
    Tape tape;
    Tensor out = fn(tape, leaves);
    Rng rng(projection_seed);
    weights.resize(out.numel());
    for (float& w : weights) w = rng.normal(0.0f, 1.0f);
    Tensor projection = Tensor::from(out.shape(), weights);
    Tensor loss = tape.sum(tape.mul(out, projection));
    tape.backward(loss);
    for (Tensor& leaf : leaves) {
      auto g = leaf.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }

  GradCheckReport report;
  double total_diff_sq = 0.0, total_analytic_sq = 0.0, total_numeric_sq = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    auto values = leaf.mutable_data();
    double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
    for (std::size_t e = 0; e < values.size(); ++e) {
      const float original = values[e];
      const float plus = original + epsilon;
      const float minus = original - epsilon;
      double f_plus = 0.0, f_minus = 0.0;
      try {
        values[e] = plus;
        {
          Tape probe(GradMode::kDisabled);
          f_plus = weighted_sum(fn(probe, leaves), weights);
        }
        values[e] = minus;
        {
          Tape probe(GradMode::kDisabled);
          f_minus = weighted_sum(fn(probe, leaves), weights);
        }
      } catch (const NumericError& err) {
        values[e] = original;
        throw NumericError(std::string(err.what()) + " while probing leaf " +
                           std::to_string(li) + " element " + std::to_string(e));
      }
      values[e] = original;
      const double numeric =
          (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
      if (!std::isfinite(numeric)) {
        throw NumericError("grad_check: non-finite central difference at leaf " +
                           std::to_string(li) + " element " + std::to_string(e));
      }
      const double a = analytic[li][e];
      diff_sq += (a - numeric) * (a - numeric);
      analytic_sq += a * a;
      numeric_sq += numeric * numeric;
      report.max_abs_error = std::max(report.max_abs_error, std::fabs(a - numeric));
    }
    total_diff_sq += diff_sq;
    total_analytic_sq += analytic_sq;
    total_numeric_sq += numeric_sq;
    const double denom =
        std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), 1e-8});
    const double rel = std::sqrt(diff_sq) / denom;
    report.per_leaf_relative_error.push_back(rel);
    if (rel >= report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_leaf = li;
    }
  }
  report.global_relative_error =
      std::sqrt(total_diff_sq) /
      std::max({std::sqrt(total_analytic_sq), std::sqrt(total_numeric_sq), 1e-8});
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace consert
