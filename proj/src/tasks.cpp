#include "catgrad/tasks.hpp"

#include <cmath>
#include <stdexcept>

namespace catgrad::tasks {

using nn::Tape;
using nn::Value;

// ---------------------------------------------------------------------------
// Synthetic exact-gradient benchmark
// ---------------------------------------------------------------------------

FunctionOracle abs_distance_oracle(std::vector<int> cards, Eigen::VectorXi targets) {
  auto discrete = [targets](const Assignment& x) {
    double s = 0.0;
    for (Eigen::Index d = 0; d < x.size(); ++d)
      s += std::abs(static_cast<double>(x[d] - targets[d]));
    return s;
  };
  FunctionOracle::Relaxation relax;
  relax.value = [targets](const std::vector<Vec>& soft) {
    double s = 0.0;
    for (std::size_t d = 0; d < soft.size(); ++d) {
      double e = 0.0;
      for (Eigen::Index k = 0; k < soft[d].size(); ++k) e += soft[d][k] * double(k);
      s += std::abs(e - double(targets[static_cast<Eigen::Index>(d)]));
    }
    return s;
  };
  relax.grad = [targets](const std::vector<Vec>& soft, std::vector<Vec>& out) {
    out.resize(soft.size());
    for (std::size_t d = 0; d < soft.size(); ++d) {
      double e = 0.0;
      for (Eigen::Index k = 0; k < soft[d].size(); ++k) e += soft[d][k] * double(k);
      const double sgn =
          (e - double(targets[static_cast<Eigen::Index>(d)])) >= 0.0 ? 1.0 : -1.0;
      out[d].resize(soft[d].size());
      for (Eigen::Index k = 0; k < soft[d].size(); ++k) out[d][k] = sgn * double(k);
    }
  };
  (void)cards;
  return FunctionOracle(discrete, relax);
}

double SynthExactTask::objective(const Assignment& x) const {
  double s = 0.0;
  for (Eigen::Index d = 0; d < x.size(); ++d)
    s += std::abs(static_cast<double>(x[d] - targets[d]));
  return s;
}

FunctionOracle SynthExactTask::oracle() const {
  return abs_distance_oracle(cards, targets);
}

SynthExactTask SynthExactTask::random(std::vector<int> cards, std::uint64_t seed) {
  Rng rng(seed);
  SynthExactTask task;
  task.cards = std::move(cards);
  task.logits = LogitTable::zeros(task.cards);
  for (auto& row : task.logits.rows)
    for (Eigen::Index k = 0; k < row.size(); ++k) row[k] = rng.normal();
  task.targets.resize(static_cast<Eigen::Index>(task.cards.size()));
  for (std::size_t d = 0; d < task.cards.size(); ++d)
    task.targets[static_cast<Eigen::Index>(d)] =
        static_cast<int>(rng.below(task.cards[d]));
  return task;
}

SynthExactTask SynthExactTask::fig1a(std::uint64_t seed) {
  return random(std::vector<int>(12, 3), seed);
}
SynthExactTask SynthExactTask::fig1b(std::uint64_t seed) {
  return random(std::vector<int>(6, 10), seed);
}
SynthExactTask SynthExactTask::fig1c(std::uint64_t seed) {
  return random(std::vector<int>(3, 100), seed);
}

// ---------------------------------------------------------------------------
// Synthetic optimisation
// ---------------------------------------------------------------------------

double SynthOptTask::objective(const Assignment& x) const {
  double s = 0.0;
  for (Eigen::Index d = 0; d < x.size(); ++d) {
    const double v = static_cast<double>(x[d]) - center;
    s += v * v;
  }
  return s / static_cast<double>(dims);
}

FunctionOracle SynthOptTask::oracle() const {
  const int d_count = dims;
  const double c = center;
  auto discrete = [d_count, c](const Assignment& x) {
    double s = 0.0;
    for (Eigen::Index d = 0; d < x.size(); ++d) {
      const double v = static_cast<double>(x[d]) - c;
      s += v * v;
    }
    return s / static_cast<double>(d_count);
  };
  FunctionOracle::Relaxation relax;
  relax.value = [d_count, c](const std::vector<Vec>& soft) {
    double s = 0.0;
    for (const Vec& sd : soft) {
      const double v = sd[1] - c;
      s += v * v;
    }
    return s / static_cast<double>(d_count);
  };
  relax.grad = [d_count, c](const std::vector<Vec>& soft, std::vector<Vec>& out) {
    out.resize(soft.size());
    for (std::size_t d = 0; d < soft.size(); ++d) {
      out[d].resize(2);
      out[d][0] = 0.0;
      out[d][1] = 2.0 * (soft[d][1] - c) / static_cast<double>(d_count);
    }
  };
  return FunctionOracle(discrete, relax);
}

double SynthOptTask::exact_objective(const LogitTable& logits) const {
  const double hit = (1.0 - center) * (1.0 - center);
  const double miss = center * center;
  double s = 0.0;
  for (const Vec& row : logits.rows) {
    const Vec p = softmax_row(row);
    s += p[0] * miss + p[1] * hit;
  }
  return s / static_cast<double>(dims);
}

LogitTable SynthOptTask::uniform_init() const {
  return LogitTable::zeros(std::vector<int>(static_cast<std::size_t>(dims), 2));
}

// ---------------------------------------------------------------------------
// Image helpers
// ---------------------------------------------------------------------------

Mat binarize(const Mat& images) {
  Mat out(images.rows(), images.cols());
  for (Eigen::Index r = 0; r < images.rows(); ++r)
    for (Eigen::Index c = 0; c < images.cols(); ++c) {
      const double v = images(r, c);
      if (!(v >= 0.0 && v <= 1.0))
        throw std::invalid_argument("binarize: pixel outside [0,1]");
      out(r, c) = v > 0.5 ? 1.0 : 0.0;
    }
  return out;
}

Mat make_prototype_data(int n, int width, int n_prototypes, double flip_prob, Rng& rng) {
  Mat protos(n_prototypes, width);
  for (int p = 0; p < n_prototypes; ++p)
    for (int c = 0; c < width; ++c) protos(p, c) = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Mat out(n, width);
  for (int i = 0; i < n; ++i) {
    const int p = static_cast<int>(rng.below(n_prototypes));
    for (int c = 0; c < width; ++c) {
      double v = protos(p, c);
      if (rng.uniform() < flip_prob) v = 1.0 - v;
      out(i, c) = v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// DVAE
// ---------------------------------------------------------------------------

namespace {

std::vector<nn::LayerSpec> dense_stack(const std::vector<int>& hidden, int out_width) {
  std::vector<nn::LayerSpec> layers;
  for (int h : hidden) layers.push_back({h, nn::Act::Relu});
  layers.push_back({out_width, nn::Act::None});
  return layers;
}

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// Row-wise Bernoulli log-likelihood of binary targets under logits.
Vec bernoulli_loglik_rows(const Mat& logits, const Mat& targets) {
  Vec out(logits.rows());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c)
      s += targets(r, c) * logits(r, c) - softplus(logits(r, c));
    out[r] = s;
  }
  return out;
}

// Latent bits as an independent K=2 factorisation with logits (0, l_j).
Factorisation latent_factorisation(const Eigen::Ref<const Eigen::RowVectorXd>& enc_row) {
  LogitTable t;
  const int latent = static_cast<int>(enc_row.size());
  t.cards.assign(static_cast<std::size_t>(latent), 2);
  t.rows.reserve(static_cast<std::size_t>(latent));
  for (int j = 0; j < latent; ++j) {
    Vec row(2);
    row << 0.0, enc_row[j];
    t.rows.push_back(std::move(row));
  }
  return Factorisation::independent(std::move(t));
}

}  // namespace

DvaeModel::DvaeModel(int data_width_, std::vector<int> enc_hidden, int latent_,
                     std::vector<int> dec_hidden)
    : data_width(data_width_),
      latent(latent_),
      encoder("enc", data_width_, dense_stack(enc_hidden, latent_)),
      decoder("dec", latent_, dense_stack(dec_hidden, data_width_)) {}

void DvaeModel::init_params(nn::ParamStore& store, Rng& rng) const {
  encoder.init_params(store, rng);
  decoder.init_params(store, rng);
}

DvaeModel DvaeModel::desk() { return DvaeModel(64, {48, 32}, 16, {32, 48}); }

DvaeStepResult dvae_elbo(const DvaeModel& model, nn::ParamStore& store, const Mat& batch,
                         const EstimatorConfig& config, Rng& rng) {
  if (batch.cols() != model.data_width)
    throw std::invalid_argument("dvae_elbo: batch width != model data width");
  if (config.kind == EstimatorKind::GumbelSoftmax)
    return dvae_elbo_gs(model, store, batch, config.n_samples, config.temperature, rng);
  config.validate();

  const Eigen::Index b = batch.rows();
  const int latent = model.latent;
  const std::int64_t n = config.n_samples;

  Tape enc_tape;
  Value enc_logits = model.encoder.forward(enc_tape, store, enc_tape.input(batch));
  const Mat& logits = enc_logits.data();  // b x latent

  // Closed-form KL per bit: q log(2q) + (1-q) log(2(1-q)).
  Mat q = logits.unaryExpr([](double l) { return 1.0 / (1.0 + std::exp(-l)); });
  double kl_total = 0.0;
  Mat upstream = Mat::Zero(b, latent);
  for (Eigen::Index i = 0; i < b; ++i)
    for (int j = 0; j < latent; ++j) {
      const double qq = q(i, j);
      const double l = logits(i, j);
      kl_total += qq * std::log(std::max(qq, 1e-300) * 2.0) +
                  (1.0 - qq) * std::log(std::max(1.0 - qq, 1e-300) * 2.0);
      upstream(i, j) = l * qq * (1.0 - qq);  // dKL/dl
    }

  // Per-datum reconstruction estimate: sample latents, run the configured
  // estimator with the decoder log-likelihood as f.
  Mat base_z(b * n, latent);
  double recon_total = 0.0;
  std::int64_t res_samples = 0, res_evals = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const Factorisation fact = latent_factorisation(logits.row(i));
    SampleBatch z = sample_ancestral(fact, n, rng);
    base_z.block(i * n, 0, n, latent) = z.cast<double>();

    const Mat target_row = batch.row(i);
    FunctionOracle f(
        [&](const Assignment& x) {
          const Mat zrow = x.transpose().cast<double>();
          return bernoulli_loglik_rows(model.decoder.forward_only(store, zrow),
                                       target_row)[0];
        });
    FunctionOracle fb = f;
    fb.set_batch([&](const SampleBatch& xs) {
      Mat zf = xs.cast<double>();
      Mat dec = model.decoder.forward_only(store, zf);
      Mat targets = target_row.replicate(xs.rows(), 1);
      return bernoulli_loglik_rows(dec, targets);
    });

    GradEstimate est;
    switch (config.kind) {
      case EstimatorKind::Reinforce:
        est = reinforce_on_batch(fact, fb, z);
        break;
      case EstimatorKind::Rloo:
        est = rloo_on_batch(fact, fb, z);
        break;
      case EstimatorKind::Leg:
        est = leg_on_pivots(fact, fb, z);
        break;
      case EstimatorKind::Scater:
      case EstimatorKind::Indecater:
        // Independent latents: the structured form coincides with the
        // summed-category one.
        est = config.fresh_per_variable ? indecater(fact, fb, n, rng, true)
                                        : indecater_on_batch(fact, fb, z);
        break;
      case EstimatorKind::GumbelSoftmax:
        break;  // handled above
    }
    res_samples += est.samples_drawn;
    res_evals += est.function_evals;
    // Negated ELBO: subtract the reconstruction gradient. d theta_1 / d l = 1.
    for (int j = 0; j < latent; ++j) upstream(i, j) -= est.grad.block(j)(0, 1);
  }

  // Decoder gradient over the drawn samples; also yields the reconstruction
  // value at those samples.
  Tape dec_tape;
  Value zin = dec_tape.input(base_z);
  Value dec_logits = model.decoder.forward(dec_tape, store, zin);
  Mat rep_targets(b * n, model.data_width);
  for (Eigen::Index i = 0; i < b; ++i)
    rep_targets.block(i * n, 0, n, model.data_width) = batch.row(i).replicate(n, 1);
  Value loglik = dec_tape.bernoulli_loglik_rowsum(dec_logits, rep_targets);
  recon_total = loglik.data().sum() / static_cast<double>(n);
  Value neg_recon = dec_tape.scale(dec_tape.mean_all(loglik), -1.0);
  dec_tape.backward(neg_recon);

  enc_tape.backward(enc_logits, upstream / static_cast<double>(b));

  DvaeStepResult res;
  res.recon = recon_total / static_cast<double>(b);
  res.kl = kl_total / static_cast<double>(b);
  res.neg_elbo = -res.recon + res.kl;
  res.samples_drawn = res_samples;
  res.function_evals = res_evals;
  return res;
}

DvaeStepResult dvae_elbo_gs_with_noise(const DvaeModel& model, nn::ParamStore& store,
                                       const Mat& batch, const Mat& noise, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (batch.cols() != model.data_width)
    throw std::invalid_argument("dvae_elbo_gs: batch width != model data width");
  const Eigen::Index b = batch.rows();
  const int latent = model.latent;
  if (noise.cols() != latent || noise.rows() % b != 0)
    throw std::invalid_argument("dvae_elbo_gs: noise shape mismatch");
  const Eigen::Index n = noise.rows() / b;

  Tape enc_tape;
  Value enc_logits = model.encoder.forward(enc_tape, store, enc_tape.input(batch));
  const Mat& logits = enc_logits.data();

  // Relaxed binary samples s = sigmoid((l + noise) / tau), one row per
  // (datum, sample).
  Mat soft(b * n, latent);
  for (Eigen::Index i = 0; i < b; ++i)
    for (Eigen::Index s = 0; s < n; ++s)
      for (int j = 0; j < latent; ++j) {
        const double z = (logits(i, j) + noise(i * n + s, j)) / tau;
        soft(i * n + s, j) = 1.0 / (1.0 + std::exp(-z));
      }

  Tape dec_tape;
  Value sin = dec_tape.input(soft);
  Value dec_logits = model.decoder.forward(dec_tape, store, sin);
  Mat rep_targets(b * n, model.data_width);
  for (Eigen::Index i = 0; i < b; ++i)
    rep_targets.block(i * n, 0, n, model.data_width) = batch.row(i).replicate(n, 1);
  Value loglik = dec_tape.bernoulli_loglik_rowsum(dec_logits, rep_targets);
  const double recon_total = loglik.data().sum() / static_cast<double>(n);
  Value neg_recon = dec_tape.scale(dec_tape.mean_all(loglik), -1.0);
  dec_tape.backward(neg_recon);
  const Mat& dsoft = dec_tape.grad(sin);

  // Chain to the encoder logits: ds/dl = s (1 - s) / tau; add the KL term.
  Mat q = logits.unaryExpr([](double l) { return 1.0 / (1.0 + std::exp(-l)); });
  double kl_total = 0.0;
  Mat upstream = Mat::Zero(b, latent);
  for (Eigen::Index i = 0; i < b; ++i)
    for (int j = 0; j < latent; ++j) {
      const double qq = q(i, j);
      kl_total += qq * std::log(std::max(qq, 1e-300) * 2.0) +
                  (1.0 - qq) * std::log(std::max(1.0 - qq, 1e-300) * 2.0);
      double acc = logits(i, j) * qq * (1.0 - qq) / static_cast<double>(b);
      for (Eigen::Index s = 0; s < n; ++s) {
        const double sv = soft(i * n + s, j);
        const double d = dsoft(i * n + s, j) * sv * (1.0 - sv) / tau;
        if (std::isfinite(d)) acc += d;  // diverging entries are dropped
      }
      upstream(i, j) = acc;
    }
  enc_tape.backward(enc_logits, upstream);

  DvaeStepResult res;
  res.recon = recon_total / static_cast<double>(b);
  res.kl = kl_total / static_cast<double>(b);
  res.neg_elbo = -res.recon + res.kl;
  res.samples_drawn = b * n;
  res.function_evals = b * n;
  return res;
}

DvaeStepResult dvae_elbo_gs(const DvaeModel& model, nn::ParamStore& store,
                            const Mat& batch, std::int64_t n, double tau, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  const Eigen::Index b = batch.rows();
  Mat noise(b * n, model.latent);
  for (Eigen::Index r = 0; r < noise.rows(); ++r)
    for (int j = 0; j < model.latent; ++j) {
      double u = rng.uniform();
      if (u < 1e-12) u = 1e-12;
      if (u > 1.0 - 1e-12) u = 1.0 - 1e-12;
      noise(r, j) = std::log(u) - std::log1p(-u);  // logistic = g1 - g0
    }
  return dvae_elbo_gs_with_noise(model, store, batch, noise, tau);
}

// ---------------------------------------------------------------------------
// Neural-symbolic sum task
// ---------------------------------------------------------------------------

Mat make_glyph_templates(int n_classes, int width, Rng& rng) {
  Mat templates(n_classes, width);
  for (int c = 0; c < n_classes; ++c)
    for (int p = 0; p < width; ++p) templates(c, p) = rng.uniform() < 0.5 ? 0.0 : 1.0;
  return templates;
}

Glyphs make_glyph_data(const Mat& templates, int n, double flip_prob, Rng& rng) {
  const int n_classes = static_cast<int>(templates.rows());
  const int width = static_cast<int>(templates.cols());
  Glyphs g;
  g.n_classes = n_classes;
  g.width = width;
  g.images.resize(n, width);
  g.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    const int c = i % n_classes;
    g.labels[i] = c;
    for (int p = 0; p < width; ++p) {
      double v = templates(c, p);
      if (rng.uniform() < flip_prob) v = 1.0 - v;
      g.images(i, p) = v;
    }
  }
  return g;
}

NesyDataset nesy_build_dataset(const Mat& images, const Eigen::VectorXi& labels,
                               int n_classes, int d_seq, Rng& rng) {
  const Eigen::Index m = images.rows();
  if (d_seq < 1) throw std::invalid_argument("sequence length must be >= 1");
  if (d_seq > m)
    throw std::invalid_argument("sequence length exceeds the number of source images");
  const Eigen::Index s = m / d_seq;

  std::vector<int> perm(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) perm[static_cast<std::size_t>(i)] = int(i);
  for (Eigen::Index i = 0; i < m - 1; ++i) {
    const Eigen::Index j = i + rng.below(m - i);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }

  NesyDataset data;
  data.images = images;
  data.labels = labels;
  data.n_classes = n_classes;
  data.sequences.resize(s, d_seq);
  data.sums.resize(s);
  for (Eigen::Index i = 0; i < s; ++i) {
    int sum = 0;
    for (int d = 0; d < d_seq; ++d) {
      const int idx = perm[static_cast<std::size_t>(i * d_seq + d)];
      data.sequences(i, d) = idx;
      sum += labels[idx];
    }
    data.sums[i] = sum;
  }
  return data;
}

NesyStepResult nesy_nll(const nn::Mlp& classifier, nn::ParamStore& store,
                        const Mat& sequence_images, int sum_label,
                        const EstimatorConfig& config, Rng& rng) {
  if (config.kind == EstimatorKind::GumbelSoftmax)
    throw std::invalid_argument("function has zero derivative almost everywhere");
  config.validate();
  const Eigen::Index d_seq = sequence_images.rows();

  Tape tape;
  Value logits = classifier.forward(tape, store, tape.input(sequence_images));
  const int classes = static_cast<int>(logits.data().cols());

  LogitTable t;
  t.cards.assign(static_cast<std::size_t>(d_seq), classes);
  for (Eigen::Index d = 0; d < d_seq; ++d)
    t.rows.push_back(logits.data().row(d).transpose());
  const Factorisation fact = Factorisation::independent(std::move(t));

  FunctionOracle f([sum_label](const Assignment& x) {
    return x.sum() == sum_label ? 1.0 : 0.0;
  });

  const GradEstimate est = estimate(config, fact, f, rng);
  const double floored = std::max(est.value_estimate, kNesyExpectationFloor);

  Mat upstream(d_seq, classes);
  for (Eigen::Index d = 0; d < d_seq; ++d)
    upstream.row(d) = -est.grad.block(static_cast<int>(d)).row(0) / floored;
  tape.backward(logits, upstream);

  NesyStepResult res;
  res.expectation = est.value_estimate;
  res.loss = -std::log(floored);
  res.samples_drawn = est.samples_drawn;
  res.function_evals = est.function_evals;
  return res;
}

double nesy_sum_accuracy(const nn::Mlp& classifier, const nn::ParamStore& store,
                         const NesyDataset& data) {
  const Eigen::Index s = data.sequences.rows();
  if (s == 0) return 0.0;
  Eigen::Index hits = 0;
  const int d_seq = static_cast<int>(data.sequences.cols());
  Mat seq(d_seq, data.images.cols());
  for (Eigen::Index i = 0; i < s; ++i) {
    for (int d = 0; d < d_seq; ++d) seq.row(d) = data.images.row(data.sequences(i, d));
    const Mat out = classifier.forward_only(store, seq);
    int sum = 0;
    for (int d = 0; d < d_seq; ++d) {
      int arg = 0;
      out.row(d).maxCoeff(&arg);
      sum += arg;
    }
    if (sum == data.sums[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(s);
}

}  // namespace catgrad::tasks
