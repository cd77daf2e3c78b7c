#pragma once

#include <cstdint>
#include <vector>

#include "catgrad/categorical.hpp"
#include "catgrad/rng.hpp"

namespace catgrad {

// A gradient estimate with its cost accounting. function_evals counts calls
// to f (sum_d K_d * N for the summed-category estimators, N otherwise);
// samples_drawn counts declared sample sets (N, or N*D when fresh sample
// sets are drawn per variable). value_estimate is the estimator's own
// estimate of E[f] (a convex combination over categories for the
// summed-category estimators, the plain sample mean otherwise).
struct GradEstimate {
  GradTable grad;
  std::int64_t samples_drawn = 0;
  std::int64_t function_evals = 0;
  double value_estimate = 0.0;
};

enum class EstimatorKind { Reinforce, Rloo, Scater, Indecater, Leg, GumbelSoftmax };

const char* estimator_name(EstimatorKind k);
EstimatorKind estimator_from_name(const std::string& name);

// tau(step) = max(floor, initial * decay_factor^floor(step / period)).
struct AnnealSchedule {
  double initial = 1.0;
  double decay_factor = 1.0;
  std::int64_t period = 1;
  double floor = 0.0;

  double at(std::int64_t step) const;
  void validate() const;
};

double anneal(const AnnealSchedule& schedule, std::int64_t step);

struct EstimatorConfig {
  EstimatorKind kind = EstimatorKind::Indecater;
  std::int64_t n_samples = 1;
  bool fresh_per_variable = false;  // Indecater / Scater only
  double temperature = 1.0;         // GumbelSoftmax only
  AnnealSchedule anneal;            // GumbelSoftmax only; applied by callers

  void validate() const;
};

// ---------------------------------------------------------------------------
// Deterministic cores over given sample batches. These carry the estimator
// arithmetic; the sampling front ends below draw the batches.
// ---------------------------------------------------------------------------

// (1/N) sum_n f(x_n) * score(x_n).
GradEstimate reinforce_on_batch(const Factorisation& fact, const FunctionOracle& f,
                                const SampleBatch& batch);

// Leave-one-out baseline b_n = mean_{m != n} f(x_m); requires N >= 2.
GradEstimate rloo_on_batch(const Factorisation& fact, const FunctionOracle& f,
                           const SampleBatch& batch);

// Summed-category estimate with shared samples: for each variable d the
// batch row's coordinate d is replaced by every category, weighted by the
// analytic softmax Jacobian. Independent factorisations only.
GradEstimate indecater_on_batch(const Factorisation& fact, const FunctionOracle& f,
                                const SampleBatch& shared);

// Local-expectation estimate on given pivot samples: every variable is
// marginalised against the rest of the pivot under the normalised-product
// weighting distribution.
GradEstimate leg_on_pivots(const Factorisation& fact, const FunctionOracle& f,
                           const SampleBatch& pivots);

// Weighting distribution p(X_d = . | pivot_{!=d}) as a normalised product of
// the factor probabilities; sums to one.
Vec leg_weights(const Factorisation& fact, const Assignment& pivot, int d);

// ---------------------------------------------------------------------------
// Sampling front ends
// ---------------------------------------------------------------------------

GradEstimate reinforce(const Factorisation& fact, const FunctionOracle& f,
                       std::int64_t n, Rng& rng);
GradEstimate rloo(const Factorisation& fact, const FunctionOracle& f, std::int64_t n,
                  Rng& rng);

// Structured summed-category estimator for chain or independent
// factorisations: per variable, prefixes are sampled from the factorisation
// and suffixes are sampled conditionally on each substituted category.
// With fresh_per_variable, prefixes and suffixes are re-drawn for every
// variable; otherwise one base batch is shared across variables (suffixes
// are re-drawn only where the substituted category changes the conditional,
// i.e. never for independent factorisations).
GradEstimate scater(const Factorisation& fact, const FunctionOracle& f, std::int64_t n,
                    Rng& rng, bool fresh_per_variable = false);

// Independent-factorisation specialisation of scater; errors on chains.
GradEstimate indecater(const Factorisation& fact, const FunctionOracle& f,
                       std::int64_t n, Rng& rng, bool fresh_per_variable = false);

// Local Expectation Gradients with N pivot samples shared across variables.
GradEstimate leg(const Factorisation& fact, const FunctionOracle& f, std::int64_t n,
                 Rng& rng);

// ---------------------------------------------------------------------------
// Gumbel-Softmax
// ---------------------------------------------------------------------------

// softmax((logits + g) / tau) with g i.i.d. standard Gumbel.
Vec gumbel_softmax_sample(const Eigen::Ref<const Vec>& logits, double tau, Rng& rng);

// Gumbel noise for n relaxed samples of every category slot, packed as an
// n x sum(K_d) matrix (variable blocks in order). Draw order is row by row,
// variable by variable, category by category; exposed so objectives can be
// frozen for finite-difference checks.
Mat sample_gumbel_noise(const LogitTable& table, std::int64_t n, Rng& rng);

// Pathwise gradient of (1/N) sum_n f~(softmax((theta + g_n)/tau)) w.r.t. the
// logits. Biased. Non-finite per-sample contributions are replaced by zeros.
GradEstimate gumbel_softmax_grad_with_noise(const LogitTable& table,
                                            const FunctionOracle& f, const Mat& noise,
                                            double tau);
double gumbel_softmax_value_with_noise(const LogitTable& table, const FunctionOracle& f,
                                       const Mat& noise, double tau);
GradEstimate gumbel_softmax_grad(const LogitTable& table, const FunctionOracle& f,
                                 std::int64_t n, double tau, Rng& rng);

// ---------------------------------------------------------------------------
// Dispatch and bias/variance evaluation
// ---------------------------------------------------------------------------

GradEstimate estimate(const EstimatorConfig& config, const Factorisation& fact,
                      const FunctionOracle& f, Rng& rng);

struct BiasVarianceReport {
  Vec mean;        // per coordinate, estimator mean over trials
  Vec bias;        // mean - exact gradient
  Vec variance;    // per-coordinate sample variance
  Vec variance_se; // standard error of each variance estimate
  double bias_norm = 0.0;          // L2 norm of the bias vector
  double bias_se_norm = 0.0;       // sqrt(sum_c variance_c / trials)
  double total_variance = 0.0;     // sum of per-coordinate variances
  double total_variance_se = 0.0;  // sqrt(sum_c variance_se_c^2)
  std::int64_t trials = 0;
  std::int64_t samples_per_estimate = 0;
  std::int64_t function_evals_per_estimate = 0;

  // Largest per-coordinate |bias| measured in standard errors of the mean
  // (coordinates with zero variance must be exact to 1e-12).
  double max_bias_in_se() const;
};

// Runs the estimator `trials` times on streams split from `rng` and compares
// against the enumeration oracle.
BiasVarianceReport bias_variance(const EstimatorConfig& config, const Factorisation& fact,
                                 const FunctionOracle& f, std::int64_t trials, Rng& rng,
                                 std::int64_t budget = kDefaultEnumBudget);

}  // namespace catgrad
