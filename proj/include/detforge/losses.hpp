#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "detforge/errors.hpp"

namespace detforge {

/// Row-major n x c logits; class c-1 is background.
struct LogitsBatch {
  std::size_t n = 0;
  std::size_t c = 0;
  std::vector<double> values;
  std::vector<std::size_t> targets;

  std::span<const double> row(std::size_t i) const { return {values.data() + i * c, c}; }
};

struct ClassWeights {
  std::vector<double> w;
};

struct LossOutput {
  double value = 0.0;
  std::vector<double> grad;  // same shape as the differentiated input
};

/// w_c = 1 - n_c / sum(n).
inline ClassWeights class_weights(std::span<const std::int64_t> counts) {
  std::int64_t total = 0;
  for (auto n : counts) {
    if (n < 0) throw ValidationError("class counts must be non-negative");
    total += n;
  }
  if (total <= 0) throw ValidationError("class counts sum to zero");
  ClassWeights out;
  out.w.reserve(counts.size());
  // one rounding: the correctly rounded value of (total - n) / total
  for (auto n : counts) out.w.push_back(double(total - n) / double(total));
  return out;
}

namespace detail {

// log(1e-38): floor for log-probabilities so gradients stay finite.
inline const double kLogFloor = std::log(1e-38);

inline void check_batch(const LogitsBatch& b) {
  if (b.c == 0 || b.values.size() != b.n * b.c || b.targets.size() != b.n)
    throw ValidationError("logits batch shape mismatch");
  for (double v : b.values)
    if (!std::isfinite(v)) throw ValidationError("non-finite logit");
  for (auto t : b.targets)
    if (t >= b.c) throw ValidationError("target class out of range");
}

/// Softmax of one row into `probs`; returns log p[target].
inline double log_softmax_row(std::span<const double> z, std::size_t target, std::span<double> probs) {
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    probs[j] = std::exp(z[j] - m);
    sum += probs[j];
  }
  for (double& p : probs) p /= sum;
  return z[target] - m - std::log(sum);
}

/// Shared driver for softmax losses whose per-sample value depends only on
/// log p_t. `per_sample(logp)` returns {loss, dloss/dlogp}; `weight(i)`
/// scales sample i and the batch is normalised by the summed weight.
template <class PerSample, class Weight>
LossOutput softmax_family(const LogitsBatch& b, PerSample per_sample, Weight weight) {
  check_batch(b);
  LossOutput out;
  out.grad.assign(b.values.size(), 0.0);
  double norm = 0.0;
  for (std::size_t i = 0; i < b.n; ++i) norm += weight(i);
  if (norm <= 0.0) return out;

  std::vector<double> probs(b.c);
  for (std::size_t i = 0; i < b.n; ++i) {
    const std::size_t t = b.targets[i];
    double logp = log_softmax_row(b.row(i), t, probs);
    const bool floored = logp < kLogFloor;
    if (floored) logp = kLogFloor;
    const auto [loss, dlogp] = per_sample(logp);
    const double scale = weight(i) / norm;
    out.value += scale * loss;
    if (floored) continue;
    // d logp_t / d z_j = [j == t] - p_j
    for (std::size_t j = 0; j < b.c; ++j)
      out.grad[i * b.c + j] = scale * dlogp * ((j == t ? 1.0 : 0.0) - probs[j]);
  }
  return out;
}

struct LossAndSlope {
  double loss;
  double dlogp;
};

}  // namespace detail

/// Mean softmax cross entropy.
inline LossOutput cross_entropy(const LogitsBatch& b) {
  return detail::softmax_family(
      b, [](double logp) { return detail::LossAndSlope{-logp, -1.0}; }, [](std::size_t) { return 1.0; });
}

/// Cross entropy with per-sample weight w[target], normalised by the sum of
/// applied weights. An all-zero weight batch yields zero loss and gradient.
inline LossOutput weighted_cross_entropy(const LogitsBatch& b, const ClassWeights& weights) {
  if (weights.w.size() != b.c) throw ValidationError("class weight count does not match class count");
  detail::check_batch(b);
  return detail::softmax_family(
      b, [](double logp) { return detail::LossAndSlope{-logp, -1.0}; },
      [&](std::size_t i) { return weights.w[b.targets[i]]; });
}

/// Mean of -(1 - p_t)^gamma * log(p_t), p_t the softmax probability of the
/// target class. No alpha balancing.
inline LossOutput focal_loss(const LogitsBatch& b, double gamma = 2.0) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ValidationError("gamma must be a finite non-negative number");
  return detail::softmax_family(
      b,
      [gamma](double logp) {
        const double q = -std::expm1(logp);  // 1 - p_t, accurate near p_t = 1
        if (gamma == 0.0) return detail::LossAndSlope{-logp, -1.0};
        const double mod = std::pow(q, gamma);
        // d/dlogp of -(q^g) logp, with dq/dlogp = -p
        const double p = std::exp(logp);
        const double dmod = q > 0.0 ? gamma * std::pow(q, gamma - 1.0) * p * logp : 0.0;
        return detail::LossAndSlope{-mod * logp, dmod - mod};
      },
      [](std::size_t) { return 1.0; });
}

/// Elementwise smooth L1 (Huber with transition at beta), mean over elements.
inline LossOutput smooth_l1(std::span<const double> pred, std::span<const double> target, double beta = 1.0) {
  if (pred.size() != target.size()) throw ValidationError("smooth_l1 length mismatch");
  if (!(beta > 0.0)) throw ValidationError("beta must be positive");
  LossOutput out;
  out.grad.resize(pred.size());
  if (pred.empty()) return out;
  const double inv_n = 1.0 / double(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    const double ad = std::fabs(d);
    if (ad < beta) {
      out.value += 0.5 * d * d / beta;
      out.grad[i] = d / beta * inv_n;
    } else {
      out.value += ad - 0.5 * beta;
      out.grad[i] = (d > 0.0 ? 1.0 : -1.0) * inv_n;
    }
  }
  out.value *= inv_n;
  return out;
}

/// Max over entries of |analytic - numeric| / max(1e-12, |numeric|), the
/// numeric gradient taken by central differences of width 2*step.
inline double grad_check(const std::function<LossOutput(std::span<const double>)>& loss_fn,
                         std::vector<double> x, double step) {
  if (!(step > 0.0)) throw ValidationError("step must be positive");
  const auto analytic = loss_fn(x).grad;
  if (analytic.size() != x.size()) throw ValidationError("gradient shape does not match input");
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = loss_fn(x).value;
    x[i] = saved - step;
    const double down = loss_fn(x).value;
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / std::max(1e-12, std::fabs(numeric)));
  }
  return worst;
}

/// Gradient check over the logits of a batch, targets held fixed.
inline double grad_check(const std::function<LossOutput(const LogitsBatch&)>& loss_fn, const LogitsBatch& batch,
                         double step) {
  return grad_check(
      [&](std::span<const double> v) {
        LogitsBatch b = batch;
        b.values.assign(v.begin(), v.end());
        return loss_fn(b);
      },
      batch.values, step);
}

}  // namespace detforge
