#include "catgrad/estimators.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace catgrad {

const char* estimator_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::Reinforce: return "reinforce";
    case EstimatorKind::Rloo: return "rloo";
    case EstimatorKind::Scater: return "scater";
    case EstimatorKind::Indecater: return "indecater";
    case EstimatorKind::Leg: return "leg";
    case EstimatorKind::GumbelSoftmax: return "gs";
  }
  return "?";
}

EstimatorKind estimator_from_name(const std::string& name) {
  if (name == "reinforce") return EstimatorKind::Reinforce;
  if (name == "rloo") return EstimatorKind::Rloo;
  if (name == "scater") return EstimatorKind::Scater;
  if (name == "indecater" || name == "indecater-fresh") return EstimatorKind::Indecater;
  if (name == "leg") return EstimatorKind::Leg;
  if (name == "gs" || name == "gumbel_softmax") return EstimatorKind::GumbelSoftmax;
  throw std::invalid_argument("unknown estimator: " + name);
}

double AnnealSchedule::at(std::int64_t step) const {
  if (step < 0) throw std::invalid_argument("annealing step must be >= 0");
  const double tau = initial * std::pow(decay_factor, static_cast<double>(step / period));
  return std::max(floor, tau);
}

void AnnealSchedule::validate() const {
  if (!(initial > floor) || !(floor > 0.0))
    throw std::invalid_argument("annealing requires initial > floor > 0");
  if (!(decay_factor > 0.0) || decay_factor > 1.0)
    throw std::invalid_argument("annealing decay factor must be in (0, 1]");
  if (period < 1) throw std::invalid_argument("annealing period must be >= 1");
}

double anneal(const AnnealSchedule& schedule, std::int64_t step) {
  return schedule.at(step);
}

void EstimatorConfig::validate() const {
  if (n_samples < 1) throw std::invalid_argument("sample count must be >= 1");
  if (kind == EstimatorKind::Rloo && n_samples < 2)
    throw std::invalid_argument("RLOO requires at least two samples");
  if (kind == EstimatorKind::GumbelSoftmax && !(temperature > 0.0))
    throw std::invalid_argument("temperature must be positive");
}

// ---------------------------------------------------------------------------
// Score-function baselines
// ---------------------------------------------------------------------------

GradEstimate reinforce_on_batch(const Factorisation& fact, const FunctionOracle& f,
                                const SampleBatch& batch) {
  const std::int64_t n = batch.rows();
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  GradEstimate est;
  est.grad = fact.zero_grad();
  est.samples_drawn = n;
  est.function_evals = n;
  const Vec fs = f.eval_batch(batch);
  Assignment x(batch.cols());
  for (std::int64_t i = 0; i < n; ++i) {
    x = batch.row(i).transpose();
    add_scaled_score(est.grad, fact, x, fs[i] / static_cast<double>(n));
  }
  est.value_estimate = fs.mean();
  return est;
}

GradEstimate rloo_on_batch(const Factorisation& fact, const FunctionOracle& f,
                           const SampleBatch& batch) {
  const std::int64_t n = batch.rows();
  if (n < 2) throw std::invalid_argument("RLOO requires at least two samples");
  GradEstimate est;
  est.grad = fact.zero_grad();
  est.samples_drawn = n;
  est.function_evals = n;
  const Vec fs = f.eval_batch(batch);
  const double total = fs.sum();
  Assignment x(batch.cols());
  for (std::int64_t i = 0; i < n; ++i) {
    x = batch.row(i).transpose();
    const double baseline = (total - fs[i]) / static_cast<double>(n - 1);
    add_scaled_score(est.grad, fact, x, (fs[i] - baseline) / static_cast<double>(n));
  }
  est.value_estimate = total / static_cast<double>(n);
  return est;
}

GradEstimate reinforce(const Factorisation& fact, const FunctionOracle& f,
                       std::int64_t n, Rng& rng) {
  return reinforce_on_batch(fact, f, sample_ancestral(fact, n, rng));
}

GradEstimate rloo(const Factorisation& fact, const FunctionOracle& f, std::int64_t n,
                  Rng& rng) {
  if (n < 2) throw std::invalid_argument("RLOO requires at least two samples");
  return rloo_on_batch(fact, f, sample_ancestral(fact, n, rng));
}

// ---------------------------------------------------------------------------
// Summed-category estimators
// ---------------------------------------------------------------------------

namespace {

std::int64_t category_evals(const Factorisation& fact, std::int64_t n) {
  std::int64_t e = 0;
  for (int k : fact.cards()) e += k * n;
  return e;
}

// block.row(row) += scale * sum_delta dp(delta)/dtheta * vals[delta]
//                 = scale * (p .* vals - (p . vals) p)
// for the softmax probability row p; returns the mixture p . vals.
double add_jacobian_weighted(Mat& block, int row, const Mat& probs, const Vec& vals,
                             double scale) {
  const auto p = probs.row(row);
  const double mix = p.dot(vals);
  block.row(row) += scale * (p.array() * (vals.transpose().array() - mix)).matrix();
  return mix;
}

}  // namespace

GradEstimate indecater_on_batch(const Factorisation& fact, const FunctionOracle& f,
                                const SampleBatch& shared) {
  if (fact.kind() != FactorKind::Independent)
    throw std::invalid_argument("IndeCateR requires independent factors");
  const std::int64_t n = shared.rows();
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  const int dims = fact.num_vars();
  GradEstimate est;
  est.grad = fact.zero_grad();
  est.samples_drawn = n;
  est.function_evals = category_evals(fact, n);
  double value = 0.0;
  SampleBatch candidates;
  for (int d = 0; d < dims; ++d) {
    const int k = fact.cards()[static_cast<std::size_t>(d)];
    candidates.resize(n * k, dims);
    for (std::int64_t i = 0; i < n; ++i)
      for (int delta = 0; delta < k; ++delta) {
        candidates.row(i * k + delta) = shared.row(i);
        candidates(i * k + delta, d) = delta;
      }
    const Vec fs = f.eval_batch(candidates);
    Vec means = Vec::Zero(k);
    for (std::int64_t i = 0; i < n; ++i) means += fs.segment(i * k, k);
    means /= static_cast<double>(n);
    value += add_jacobian_weighted(est.grad.block(d), 0, fact.probs(d), means, 1.0);
  }
  est.value_estimate = dims > 0 ? value / dims : 0.0;
  return est;
}

GradEstimate indecater(const Factorisation& fact, const FunctionOracle& f,
                       std::int64_t n, Rng& rng, bool fresh_per_variable) {
  if (fact.kind() != FactorKind::Independent)
    throw std::invalid_argument("IndeCateR requires independent factors");
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  if (!fresh_per_variable) return indecater_on_batch(fact, f, sample_ancestral(fact, n, rng));

  const int dims = fact.num_vars();
  GradEstimate est;
  est.grad = fact.zero_grad();
  est.samples_drawn = n * dims;
  est.function_evals = category_evals(fact, n);
  double value = 0.0;
  SampleBatch batch, candidates;
  for (int d = 0; d < dims; ++d) {
    sample_ancestral_into(batch, fact, n, rng);
    const int k = fact.cards()[static_cast<std::size_t>(d)];
    candidates.resize(n * k, dims);
    for (std::int64_t i = 0; i < n; ++i)
      for (int delta = 0; delta < k; ++delta) {
        candidates.row(i * k + delta) = batch.row(i);
        candidates(i * k + delta, d) = delta;
      }
    const Vec fs = f.eval_batch(candidates);
    Vec means = Vec::Zero(k);
    for (std::int64_t i = 0; i < n; ++i) means += fs.segment(i * k, k);
    means /= static_cast<double>(n);
    value += add_jacobian_weighted(est.grad.block(d), 0, fact.probs(d), means, 1.0);
  }
  est.value_estimate = dims > 0 ? value / dims : 0.0;
  return est;
}

GradEstimate scater(const Factorisation& fact, const FunctionOracle& f, std::int64_t n,
                    Rng& rng, bool fresh_per_variable) {
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  const int dims = fact.num_vars();
  const bool chain = fact.kind() == FactorKind::Chain;
  GradEstimate est;
  est.grad = fact.zero_grad();
  est.samples_drawn = fresh_per_variable ? n * dims : n;
  est.function_evals = category_evals(fact, n);

  SampleBatch base;
  if (!fresh_per_variable) sample_ancestral_into(base, fact, n, rng);

  double value = 0.0;
  Assignment cand(dims);
  Vec fvals;
  for (int d = 0; d < dims; ++d) {
    const int k = fact.cards()[static_cast<std::size_t>(d)];
    fvals.resize(k);
    for (std::int64_t i = 0; i < n; ++i) {
      int base_value = -1;
      if (fresh_per_variable) {
        sample_prefix_into(cand, fact, d, rng);
        if (!chain) {
          // The suffix conditional does not depend on the substituted
          // category; one draw serves all of them.
          sample_suffix_into(cand, fact, d, rng);
        }
      } else {
        cand = base.row(i).transpose();
        base_value = cand[d];
      }
      const int row = fact.parent_row(d, cand);
      for (int delta = 0; delta < k; ++delta) {
        cand[d] = delta;
        if (chain && delta != base_value) sample_suffix_into(cand, fact, d, rng);
        fvals[delta] = f(cand);
        if (!fresh_per_variable && chain && delta != base_value) {
          // Restore the shared suffix for the next category.
          for (int j = d + 1; j < dims; ++j) cand[j] = base(i, j);
        }
      }
      const double mix = add_jacobian_weighted(est.grad.block(d), row, fact.probs(d),
                                               fvals, 1.0 / static_cast<double>(n));
      value += mix / static_cast<double>(n);
    }
  }
  est.value_estimate = dims > 0 ? value / dims : 0.0;
  return est;
}

// ---------------------------------------------------------------------------
// Local Expectation Gradients
// ---------------------------------------------------------------------------

Vec leg_weights(const Factorisation& fact, const Assignment& pivot, int d) {
  const int k = fact.cards()[static_cast<std::size_t>(d)];
  const int row = fact.parent_row(d, pivot);
  Vec num(k);
  if (fact.kind() == FactorKind::Independent) {
    // The product over downstream factors is constant in the substituted
    // category and cancels in the normalisation.
    num = fact.probs(d).row(row).transpose();
  } else {
    Assignment x = pivot;
    for (int delta = 0; delta < k; ++delta) {
      x[d] = delta;
      double prod = fact.probs(d)(row, delta);
      for (int j = d + 1; j < fact.num_vars(); ++j)
        prod *= fact.probs(j)(fact.parent_row(j, x), x[j]);
      num[delta] = prod;
    }
  }
  const double den = num.sum();
  if (!(den > 0.0)) throw std::runtime_error("LEG weighting distribution underflowed");
  return num / den;
}

GradEstimate leg_on_pivots(const Factorisation& fact, const FunctionOracle& f,
                           const SampleBatch& pivots) {
  const std::int64_t n = pivots.rows();
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  const int dims = fact.num_vars();
  GradEstimate est;
  est.grad = fact.zero_grad();
  est.samples_drawn = n;
  est.function_evals = category_evals(fact, n);
  double value = 0.0;
  Assignment pivot(dims), cand(dims);
  Vec fvals;
  for (std::int64_t i = 0; i < n; ++i) {
    pivot = pivots.row(i).transpose();
    for (int d = 0; d < dims; ++d) {
      const int k = fact.cards()[static_cast<std::size_t>(d)];
      const Vec w = leg_weights(fact, pivot, d);
      const int row = fact.parent_row(d, pivot);
      fvals.resize(k);
      cand = pivot;
      for (int delta = 0; delta < k; ++delta) {
        cand[d] = delta;
        fvals[delta] = f(cand);
      }
      // sum_delta w_delta f_delta dlog p(delta | prefix) = t - sum(t) p,
      // with t = w .* f.
      const Vec t = w.cwiseProduct(fvals);
      const double s = t.sum();
      est.grad.block(d).row(row) +=
          (t.transpose() - s * fact.probs(d).row(row)) / static_cast<double>(n);
      value += s / static_cast<double>(n);
    }
  }
  est.value_estimate = dims > 0 ? value / dims : 0.0;
  return est;
}

GradEstimate leg(const Factorisation& fact, const FunctionOracle& f, std::int64_t n,
                 Rng& rng) {
  return leg_on_pivots(fact, f, sample_ancestral(fact, n, rng));
}

// ---------------------------------------------------------------------------
// Gumbel-Softmax
// ---------------------------------------------------------------------------

Vec gumbel_softmax_sample(const Eigen::Ref<const Vec>& logits, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  Vec z(logits.size());
  for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = (logits[k] + rng.gumbel()) / tau;
  return softmax_row(z);
}

Mat sample_gumbel_noise(const LogitTable& table, std::int64_t n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  std::int64_t cols = 0;
  for (int k : table.cards) cols += k;
  Mat noise(n, cols);
  for (std::int64_t i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < cols; ++c) noise(i, c) = rng.gumbel();
  return noise;
}

namespace {

// Relaxed forward pass for one noise row; writes the soft assignment of each
// variable into `soft` (buffers reused across calls, scalar loops since the
// per-variable category counts are small).
void relaxed_sample_row(const LogitTable& table, const Mat& noise, std::int64_t i,
                        double tau, std::vector<Vec>& soft) {
  Eigen::Index off = 0;
  for (std::size_t d = 0; d < table.rows.size(); ++d) {
    const Vec& theta = table.rows[d];
    const Eigen::Index k = theta.size();
    Vec& s = soft[d];
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < k; ++j) {
      s[j] = (theta[j] + noise(i, off + j)) / tau;
      m = std::max(m, s[j]);
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
      s[j] = std::exp(s[j] - m);
      z += s[j];
    }
    for (Eigen::Index j = 0; j < k; ++j) s[j] /= z;
    off += k;
  }
}

}  // namespace

double gumbel_softmax_value_with_noise(const LogitTable& table, const FunctionOracle& f,
                                       const Mat& noise, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  const auto& relax = f.relaxation();
  const std::int64_t n = noise.rows();
  std::vector<Vec> soft(table.rows.size());
  for (std::size_t d = 0; d < soft.size(); ++d) soft[d].resize(table.rows[d].size());
  double value = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    relaxed_sample_row(table, noise, i, tau, soft);
    value += relax.value(soft);
  }
  return value / static_cast<double>(n);
}

GradEstimate gumbel_softmax_grad_with_noise(const LogitTable& table,
                                            const FunctionOracle& f, const Mat& noise,
                                            double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  const auto& relax = f.relaxation();
  const std::int64_t n = noise.rows();
  const int dims = table.num_vars();

  GradEstimate est;
  std::vector<Mat> blocks;
  blocks.reserve(static_cast<std::size_t>(dims));
  for (int k : table.cards) blocks.push_back(Mat::Zero(1, k));
  est.grad = GradTable(std::move(blocks));
  est.samples_drawn = n;
  est.function_evals = n;

  std::vector<Vec> soft(static_cast<std::size_t>(dims));
  std::vector<Vec> fgrad(static_cast<std::size_t>(dims));
  for (int d = 0; d < dims; ++d)
    soft[static_cast<std::size_t>(d)].resize(table.cards[static_cast<std::size_t>(d)]);
  Vec contrib;
  double value = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    relaxed_sample_row(table, noise, i, tau, soft);
    const double val = relax.value(soft);
    if (std::isfinite(val)) value += val / static_cast<double>(n);
    relax.grad(soft, fgrad);
    for (int d = 0; d < dims; ++d) {
      const Vec& s = soft[static_cast<std::size_t>(d)];
      const Vec& u = fgrad[static_cast<std::size_t>(d)];
      // Chain rule through softmax((theta + g)/tau):
      // d val / d theta_j = s_j (u_j - u.s) / tau.
      const double us = u.dot(s);
      contrib = (s.array() * (u.array() - us)).matrix() / tau;
      if (contrib.allFinite())
        est.grad.block(d).row(0) += contrib.transpose() / static_cast<double>(n);
      // Diverging per-sample entries are dropped (treated as zero).
    }
  }
  est.value_estimate = value;
  return est;
}

GradEstimate gumbel_softmax_grad(const LogitTable& table, const FunctionOracle& f,
                                 std::int64_t n, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  const Mat noise = sample_gumbel_noise(table, n, rng);
  return gumbel_softmax_grad_with_noise(table, f, noise, tau);
}

// ---------------------------------------------------------------------------
// Dispatch and bias/variance evaluation
// ---------------------------------------------------------------------------

GradEstimate estimate(const EstimatorConfig& config, const Factorisation& fact,
                      const FunctionOracle& f, Rng& rng) {
  config.validate();
  switch (config.kind) {
    case EstimatorKind::Reinforce:
      return reinforce(fact, f, config.n_samples, rng);
    case EstimatorKind::Rloo:
      return rloo(fact, f, config.n_samples, rng);
    case EstimatorKind::Scater:
      return scater(fact, f, config.n_samples, rng, config.fresh_per_variable);
    case EstimatorKind::Indecater:
      return indecater(fact, f, config.n_samples, rng, config.fresh_per_variable);
    case EstimatorKind::Leg:
      return leg(fact, f, config.n_samples, rng);
    case EstimatorKind::GumbelSoftmax:
      return gumbel_softmax_grad(fact.independent_table(), f, config.n_samples,
                                 config.temperature, rng);
  }
  throw std::logic_error("unreachable estimator kind");
}

double BiasVarianceReport::max_bias_in_se() const {
  double worst = 0.0;
  for (Eigen::Index c = 0; c < bias.size(); ++c) {
    const double se = std::sqrt(variance[c] / static_cast<double>(trials));
    // Coordinates with (numerically) zero variance must be exact to 1e-12.
    const double denom = std::max(se, 1e-12 / 5.0);
    worst = std::max(worst, std::abs(bias[c]) / denom);
  }
  return worst;
}

BiasVarianceReport bias_variance(const EstimatorConfig& config, const Factorisation& fact,
                                 const FunctionOracle& f, std::int64_t trials, Rng& rng,
                                 std::int64_t budget) {
  if (trials < 2) throw std::invalid_argument("bias_variance requires trials >= 2");
  const GradTable oracle = exact_gradient(fact, f, budget);
  const std::int64_t coords = oracle.size();

  // Moments are accumulated about the first trial's estimate; near-exact
  // estimators would otherwise lose their tiny variance to cancellation
  // against an O(1) mean.
  Vec shift(coords);
  Vec s1 = Vec::Zero(coords), s2 = Vec::Zero(coords);
  Vec s3 = Vec::Zero(coords), s4 = Vec::Zero(coords);
  std::int64_t samples = 0, evals = 0;
  for (std::int64_t t = 0; t < trials; ++t) {
    Rng trial_rng = rng.split(static_cast<std::uint64_t>(t));
    const GradEstimate est = estimate(config, fact, f, trial_rng);
    samples = est.samples_drawn;
    evals = est.function_evals;
    Eigen::Index c = 0;
    if (t == 0) {
      est.grad.for_each([&](double v) { shift[c++] = v; });
      continue;  // zero contribution to the shifted sums
    }
    est.grad.for_each([&](double v) {
      const double d = v - shift[c];
      const double d2 = d * d;
      s1[c] += d;
      s2[c] += d2;
      s3[c] += d2 * d;
      s4[c] += d2 * d2;
      ++c;
    });
  }

  const double n = static_cast<double>(trials);
  BiasVarianceReport rep;
  rep.trials = trials;
  rep.samples_per_estimate = samples;
  rep.function_evals_per_estimate = evals;
  rep.mean = shift + s1 / n;
  rep.bias = rep.mean - oracle.flatten();
  rep.variance.resize(coords);
  rep.variance_se.resize(coords);
  for (Eigen::Index c = 0; c < coords; ++c) {
    const double d1 = s1[c] / n;
    const double m2 = std::max(0.0, s2[c] / n - d1 * d1);
    rep.variance[c] = m2 * n / (n - 1.0);
    const double m4 =
        std::max(0.0, s4[c] / n - 4.0 * d1 * s3[c] / n + 6.0 * d1 * d1 * s2[c] / n -
                          3.0 * d1 * d1 * d1 * d1);
    rep.variance_se[c] = std::sqrt(std::max(0.0, m4 - m2 * m2) / n);
  }
  rep.bias_norm = rep.bias.norm();
  rep.bias_se_norm = std::sqrt(rep.variance.sum() / n);
  rep.total_variance = rep.variance.sum();
  rep.total_variance_se = std::sqrt(rep.variance_se.squaredNorm());
  return rep;
}

}  // namespace catgrad
