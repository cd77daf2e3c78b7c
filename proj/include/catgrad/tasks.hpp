#pragma once

#include <cstdint>
#include <vector>

#include "catgrad/categorical.hpp"
#include "catgrad/estimators.hpp"
#include "catgrad/nn.hpp"
#include "catgrad/rng.hpp"

namespace catgrad::tasks {

using nn::Mat;

// ---------------------------------------------------------------------------
// Synthetic exact-gradient benchmark: f(x) = sum_d |x_d - b_d| under directly
// parametrised independent categorical factors.
// ---------------------------------------------------------------------------
struct SynthExactTask {
  std::vector<int> cards;
  Eigen::VectorXi targets;  // b_d, one element of each variable's domain
  LogitTable logits;

  double objective(const Assignment& x) const;
  Factorisation factorisation() const { return Factorisation::independent(logits); }
  // Discrete form plus a relaxation where categories enter through their
  // expected index under the soft assignment.
  FunctionOracle oracle() const;

  static SynthExactTask random(std::vector<int> cards, std::uint64_t seed);
  static SynthExactTask fig1a(std::uint64_t seed);  // D=12, K=3
  static SynthExactTask fig1b(std::uint64_t seed);  // D=6,  K=10
  static SynthExactTask fig1c(std::uint64_t seed);  // D=3,  K=100
};

// Shared relaxation builder for the absolute-distance objective.
FunctionOracle abs_distance_oracle(std::vector<int> cards, Eigen::VectorXi targets);

// ---------------------------------------------------------------------------
// Synthetic optimisation: maximise E[(1/D) sum_i (X_i - c)^2] over D
// independent binary variables, c = 0.499.
// ---------------------------------------------------------------------------
struct SynthOptTask {
  int dims = 200;
  double center = 0.499;

  double objective(const Assignment& x) const;
  FunctionOracle oracle() const;
  // Closed form: the objective is additive, so the expectation is a mean of
  // per-variable Bernoulli mixtures.
  double exact_objective(const LogitTable& logits) const;
  LogitTable uniform_init() const;
};

// ---------------------------------------------------------------------------
// Image helpers
// ---------------------------------------------------------------------------

// v > 0.5 -> 1 else 0; inputs must lie in [0, 1].
Mat binarize(const Mat& images);

// Seeded binary prototype images with bit-flip noise (rows are images).
Mat make_prototype_data(int n, int width, int n_prototypes, double flip_prob, Rng& rng);

// ---------------------------------------------------------------------------
// Discrete variational auto-encoder with Bernoulli latents and a
// Bernoulli(0.5) prior per latent bit.
// ---------------------------------------------------------------------------
struct DvaeModel {
  int data_width;
  int latent;
  nn::Mlp encoder;  // data -> latent logits (linear output)
  nn::Mlp decoder;  // latent bits -> data logits (linear output)

  DvaeModel(int data_width_, std::vector<int> enc_hidden, int latent_,
            std::vector<int> dec_hidden);
  void init_params(nn::ParamStore& store, Rng& rng) const;

  // Desk-scale default: 8x8 data, hidden 48/32, latent 16.
  static DvaeModel desk();
};

struct DvaeStepResult {
  double neg_elbo = 0.0;  // batch mean of -recon + KL
  double recon = 0.0;     // batch mean reconstruction log-likelihood
  double kl = 0.0;        // batch mean KL to the Bernoulli(0.5) prior
  std::int64_t samples_drawn = 0;   // summed over the batch
  std::int64_t function_evals = 0;  // decoder passes counted as f evals
};

// One ELBO step with a score-function estimator for the reconstruction term:
// per datum, the latent bits form an independent K=2 factorisation with
// logits (0, l_ij); f is the per-sample decoder log-likelihood. The KL term
// is closed-form per bit. Gradients of the negated ELBO accumulate into the
// store (encoder via the estimator plus the KL chain, decoder via backward
// over the drawn samples). Gumbel-Softmax configs route to the relaxed pass.
DvaeStepResult dvae_elbo(const DvaeModel& model, nn::ParamStore& store, const Mat& batch,
                         const EstimatorConfig& config, Rng& rng);

// Relaxed (Gumbel-Softmax) pass with pre-drawn logistic noise, one row per
// (datum, sample): s = sigmoid((l + noise) / tau) feeds the decoder.
DvaeStepResult dvae_elbo_gs_with_noise(const DvaeModel& model, nn::ParamStore& store,
                                       const Mat& batch, const Mat& noise, double tau);
DvaeStepResult dvae_elbo_gs(const DvaeModel& model, nn::ParamStore& store,
                            const Mat& batch, std::int64_t n, double tau, Rng& rng);

// ---------------------------------------------------------------------------
// Neural-symbolic sum-supervision task: classify each glyph in a sequence,
// supervise only the sum of the sampled class values.
// ---------------------------------------------------------------------------
struct Glyphs {
  Mat images;              // M x pixels, binary
  Eigen::VectorXi labels;  // class ids
  int n_classes = 0;
  int width = 0;
};

// One random binary template per class (rows).
Mat make_glyph_templates(int n_classes, int width, Rng& rng);

// Seeded glyph corpus: class templates plus bit-flip noise. Train and test
// corpora share templates and differ only in their noise draws.
Glyphs make_glyph_data(const Mat& templates, int n, double flip_prob, Rng& rng);

struct NesyDataset {
  Mat images;                // source images (owned)
  Eigen::VectorXi labels;    // per-image class ids
  Eigen::MatrixXi sequences; // S x D_seq, disjoint image indices
  Eigen::VectorXi sums;      // S sequence labels
  int n_classes = 0;
};

// Disjoint sequences of length d_seq (each source image used at most once),
// floor(M / d_seq) of them, labelled with the sum of their class values.
NesyDataset nesy_build_dataset(const Mat& images, const Eigen::VectorXi& labels,
                               int n_classes, int d_seq, Rng& rng);

struct NesyStepResult {
  double loss = 0.0;         // -log(max(E, eps))
  double expectation = 0.0;  // estimator's estimate of P(sum = label)
  std::int64_t samples_drawn = 0;
  std::int64_t function_evals = 0;
};

inline constexpr double kNesyExpectationFloor = 1e-7;

// One sequence step: the classifier maps each image to class logits, the
// configured estimator differentiates E[1{sum = label}] through the sampled
// class assignments, and the negative-log-likelihood gradient accumulates
// into the store. Gumbel-Softmax is rejected: the indicator has a zero
// derivative almost everywhere.
NesyStepResult nesy_nll(const nn::Mlp& classifier, nn::ParamStore& store,
                        const Mat& sequence_images, int sum_label,
                        const EstimatorConfig& config, Rng& rng);

// Sum accuracy of argmax classification over a dataset.
double nesy_sum_accuracy(const nn::Mlp& classifier, const nn::ParamStore& store,
                         const NesyDataset& data);

}  // namespace catgrad::tasks
