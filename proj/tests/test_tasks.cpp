#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "catgrad/tasks.hpp"
#include "test_util.hpp"

using namespace catgrad;
using namespace catgrad::tasks;

TEST_CASE("absolute-distance objective values") {
  SynthExactTask task = SynthExactTask::fig1a(5);
  CHECK(task.cards.size() == 12);
  for (int k : task.cards) CHECK(k == 3);
  Assignment x = task.targets;
  CHECK(task.objective(x) == 0.0);

  SynthExactTask big;
  big.cards = {100, 100, 100};
  big.targets.resize(3);
  big.targets << 99, 99, 99;
  big.logits = LogitTable::zeros(big.cards);
  Assignment zero = Assignment::Zero(3);
  CHECK(big.objective(zero) == doctest::Approx(297.0));

  CHECK(SynthExactTask::fig1b(1).cards == std::vector<int>(6, 10));
  CHECK(SynthExactTask::fig1c(1).cards == std::vector<int>(3, 100));
}

TEST_CASE("synthetic optimisation objective values") {
  SynthOptTask task;
  task.dims = 200;
  Assignment ones = Assignment::Ones(200);
  CHECK(task.objective(ones) == doctest::Approx(0.251001).epsilon(1e-12));
  Assignment zeros = Assignment::Zero(200);
  CHECK(task.objective(zeros) == doctest::Approx(0.249001).epsilon(1e-12));

  CHECK(task.exact_objective(task.uniform_init()) ==
        doctest::Approx(0.250001).epsilon(1e-12));

  // Saturated logits: p(X=1) = 1 attains the maximum.
  LogitTable sat = task.uniform_init();
  for (auto& row : sat.rows) row << -60.0, 60.0;
  CHECK(task.exact_objective(sat) == doctest::Approx(0.251001).epsilon(1e-10));
}

TEST_CASE("synth-opt additive exactness against the closed form") {
  SynthOptTask task;
  task.dims = 200;
  Rng rng(17);
  LogitTable logits = task.uniform_init();
  for (auto& row : logits.rows) {
    row[0] = rng.normal();
    row[1] = rng.normal();
  }
  auto fact = Factorisation::independent(logits);
  // Closed-form gradient of the additive expectation, per variable.
  const double g0 = task.center * task.center;
  const double g1 = (1.0 - task.center) * (1.0 - task.center);
  GradEstimate est = indecater(fact, task.oracle(), 1, rng, false);
  for (int d = 0; d < task.dims; ++d) {
    const double p1 = softmax_row(logits.rows[static_cast<std::size_t>(d)])[1];
    const double p0 = 1.0 - p1;
    const double mix = p0 * g0 + p1 * g1;
    const double want0 = p0 * (g0 - mix) / task.dims;
    const double want1 = p1 * (g1 - mix) / task.dims;
    CHECK(std::abs(est.grad.block(d)(0, 0) - want0) < 1e-9);
    CHECK(std::abs(est.grad.block(d)(0, 1) - want1) < 1e-9);
  }
}

TEST_CASE("binarize follows the strictly-greater rule") {
  Mat in(1, 3);
  in << 0.6, 0.5, 0.0;
  Mat out = binarize(in);
  CHECK(out(0, 0) == 1.0);
  CHECK(out(0, 1) == 0.0);
  CHECK(out(0, 2) == 0.0);

  Mat bad(1, 1);
  bad << 1.25;
  CHECK_THROWS_AS(binarize(bad), std::invalid_argument);
}

TEST_CASE("prototype data is binary and seeded") {
  Rng a(3), b(3);
  Mat x = make_prototype_data(32, 64, 8, 0.05, a);
  Mat y = make_prototype_data(32, 64, 8, 0.05, b);
  CHECK((x.array() == y.array()).all());
  CHECK(((x.array() == 0.0) || (x.array() == 1.0)).all());
}

TEST_CASE("dvae KL term is zero at the prior and ln 2 when saturated") {
  DvaeModel model(6, {5}, 3, {5});
  nn::ParamStore store;
  Rng rng(7);
  model.init_params(store, rng);
  // Zero encoder output: q = 0.5 everywhere.
  store.value("enc.L0.W").setZero();
  store.value("enc.L0.b").setZero();
  store.value("enc.L1.W").setZero();
  store.value("enc.L1.b").setZero();
  Mat batch = Mat::Zero(2, 6);
  store.zero_grad();
  Rng step_rng(8);
  DvaeStepResult res = dvae_elbo(model, store, batch, {EstimatorKind::Indecater, 2}, step_rng);
  CHECK(std::abs(res.kl) < 1e-12);

  // Saturated q: KL per bit approaches ln 2.
  store.value("enc.L1.b").setConstant(40.0);
  store.zero_grad();
  Rng step_rng2(9);
  DvaeStepResult sat = dvae_elbo(model, store, batch, {EstimatorKind::Indecater, 2}, step_rng2);
  CHECK(sat.kl == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("dvae with a z-blind decoder has constant f and pure-KL encoder gradients") {
  DvaeModel model(5, {4}, 3, {4});
  nn::ParamStore store;
  Rng rng(11);
  model.init_params(store, rng);
  store.value("dec.L0.W").setZero();  // decoder ignores its input
  Mat batch(1, 5);
  batch << 1, 0, 1, 1, 0;

  store.zero_grad();
  Rng step_rng(12);
  DvaeStepResult res = dvae_elbo(model, store, batch, {EstimatorKind::Indecater, 2}, step_rng);

  // Reconstruction equals the closed form at the decoder's fixed output.
  const Mat out = model.decoder.forward_only(store, Mat::Zero(1, 3));
  double want = 0.0;
  for (int c = 0; c < 5; ++c) {
    const double sig = 1.0 / (1.0 + std::exp(-out(0, c)));
    want += batch(0, c) * std::log(sig) + (1 - batch(0, c)) * std::log(1 - sig);
  }
  CHECK(res.recon == doctest::Approx(want).epsilon(1e-10));

  // The estimator term vanishes (f constant in z), so encoder gradients come
  // from the KL chain alone; verify against finite differences of the KL.
  auto kl_only = [&](nn::ParamStore& s) {
    nn::Tape tape;
    nn::Value logits = model.encoder.forward(tape, s, tape.input(batch));
    double kl = 0.0;
    Mat up(1, 3);
    for (int j = 0; j < 3; ++j) {
      const double l = logits.data()(0, j);
      const double q = 1.0 / (1.0 + std::exp(-l));
      kl += q * std::log(2 * q) + (1 - q) * std::log(2 * (1 - q));
      up(0, j) = l * q * (1 - q);
    }
    tape.backward(logits, up);
    return kl;
  };
  nn::ParamStore ref;
  Rng rng2(11);
  model.init_params(ref, rng2);
  ref.value("dec.L0.W").setZero();
  ref.zero_grad();
  kl_only(ref);
  CHECK(store.grad("enc.L0.W").isApprox(ref.grad("enc.L0.W"), 1e-10));
  CHECK(store.grad("enc.L1.b").isApprox(ref.grad("enc.L1.b"), 1e-10));

  Rng fd_pick(13);
  auto rep = nn::finite_diff_check(ref, kl_only, 1e-4, 1e-4, 50, fd_pick);
  CHECK(rep.pass);
}

TEST_CASE("dvae mean gradient matches finite differences of the exact objective") {
  // Tiny enumerable latent space: average sampled gradients over many seeds
  // and compare with central differences of the exact expected loss.
  DvaeModel model(4, {3}, 2, {3});
  nn::ParamStore store;
  Rng rng(21);
  model.init_params(store, rng);
  Mat batch(2, 4);
  batch << 1, 0, 0, 1, 0, 1, 1, 0;

  auto exact_loss = [&](nn::ParamStore& s) {
    const Mat logits = model.encoder.forward_only(s, batch);
    double total = 0.0;
    for (int i = 0; i < 2; ++i) {
      double kl = 0.0, recon = 0.0;
      for (int z0 = 0; z0 < 2; ++z0)
        for (int z1 = 0; z1 < 2; ++z1) {
          const double q0 = 1.0 / (1.0 + std::exp(-logits(i, 0)));
          const double q1 = 1.0 / (1.0 + std::exp(-logits(i, 1)));
          const double pz = (z0 ? q0 : 1 - q0) * (z1 ? q1 : 1 - q1);
          Mat zrow(1, 2);
          zrow << double(z0), double(z1);
          const Mat out = model.decoder.forward_only(s, zrow);
          double ll = 0.0;
          for (int c = 0; c < 4; ++c) {
            const double sig = 1.0 / (1.0 + std::exp(-out(0, c)));
            ll += batch(i, c) * std::log(sig) + (1 - batch(i, c)) * std::log(1 - sig);
          }
          recon += pz * ll;
        }
      for (int j = 0; j < 2; ++j) {
        const double q = 1.0 / (1.0 + std::exp(-logits(i, j)));
        kl += q * std::log(2 * q) + (1 - q) * std::log(2 * (1 - q));
      }
      total += -recon + kl;
    }
    return total / 2.0;
  };

  // Mean sampled gradient over independent streams.
  const int trials = 600;
  std::vector<Mat> mean_grads;
  for (const auto& name : store.names()) {
    const Mat& v = store.value(name);
    mean_grads.push_back(Mat::Zero(v.rows(), v.cols()));
  }
  Rng trial_src(22);
  for (int t = 0; t < trials; ++t) {
    store.zero_grad();
    Rng trial = trial_src.split(static_cast<std::uint64_t>(t));
    dvae_elbo(model, store, batch, {EstimatorKind::Indecater, 2}, trial);
    std::size_t i = 0;
    for (const auto& name : store.names()) mean_grads[i++] += store.grad(name) / trials;
  }

  const double h = 1e-4;
  std::size_t pi = 0;
  for (const auto& name : store.names()) {
    const Mat& g = mean_grads[pi++];
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        double& p = store.value(name)(r, c);
        const double saved = p;
        p = saved + h;
        const double up = exact_loss(store);
        p = saved - h;
        const double dn = exact_loss(store);
        p = saved;
        const double fd = (up - dn) / (2 * h);
        // Monte Carlo band: decoder gradients are exact in expectation but
        // sampled; allow a loose absolute tolerance scaled to the values.
        CHECK(std::abs(g(r, c) - fd) < 0.05 * std::max(1.0, std::abs(fd)));
      }
  }
}

TEST_CASE("dvae relaxed pass matches finite differences under frozen noise") {
  DvaeModel model(5, {4}, 3, {4});
  nn::ParamStore store;
  Rng rng(31);
  model.init_params(store, rng);
  Mat batch(2, 5);
  batch << 1, 0, 1, 0, 1, 0, 1, 0, 1, 1;
  const double tau = 0.8;
  Mat noise(4, 3);  // 2 data x 2 samples
  Rng nrng(32);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) {
      const double u = std::clamp(nrng.uniform(), 1e-12, 1 - 1e-12);
      noise(r, c) = std::log(u) - std::log1p(-u);
    }
  auto loss = [&](nn::ParamStore& s) {
    return dvae_elbo_gs_with_noise(model, s, batch, noise, tau).neg_elbo;
  };
  Rng pick(33);
  auto rep = nn::finite_diff_check(store, loss, 1e-4, 1e-4, 60, pick);
  INFO("gs dvae: max rel err ", rep.max_rel_err, " at ", rep.worst_coord);
  CHECK(rep.pass);
}

TEST_CASE("dvae steps are deterministic given the seed") {
  DvaeModel model = DvaeModel::desk();
  auto run = [&] {
    nn::ParamStore store;
    Rng rng(41);
    model.init_params(store, rng);
    Mat batch = make_prototype_data(8, 64, 4, 0.05, rng);
    store.zero_grad();
    Rng step(42);
    dvae_elbo(model, store, batch, {EstimatorKind::Rloo, 2}, step);
    return store.flat_grad();
  };
  Vec a = run();
  Vec b = run();
  CHECK((a.array() == b.array()).all());
}

TEST_CASE("glyph data and sequence datasets") {
  Rng rng(51);
  Mat templates = make_glyph_templates(4, 16, rng);
  Glyphs g = make_glyph_data(templates, 24, 0.03, rng);
  CHECK(g.images.rows() == 24);
  CHECK(((g.images.array() == 0.0) || (g.images.array() == 1.0)).all());
  for (int i = 0; i < 24; ++i) CHECK(g.labels[i] == i % 4);

  Rng drng(52);
  NesyDataset data = nesy_build_dataset(g.images, g.labels, 4, 3, drng);
  CHECK(data.sequences.rows() == 8);
  // Disjoint cover: every index at most once.
  std::vector<int> seen(24, 0);
  for (int i = 0; i < data.sequences.rows(); ++i)
    for (int d = 0; d < 3; ++d) seen[static_cast<std::size_t>(data.sequences(i, d))]++;
  for (int v : seen) CHECK(v <= 1);
  for (int i = 0; i < data.sums.size(); ++i) {
    CHECK(data.sums[i] >= 0);
    CHECK(data.sums[i] <= 9);
  }

  // Same seed, same partition.
  Rng drng2(52);
  NesyDataset again = nesy_build_dataset(g.images, g.labels, 4, 3, drng2);
  CHECK((again.sequences.array() == data.sequences.array()).all());

  CHECK_THROWS_AS(nesy_build_dataset(g.images, g.labels, 4, 25, drng),
                  std::invalid_argument);
}

TEST_CASE("dataset sizing follows floor(M / D)") {
  Mat imgs = Mat::Zero(60000, 1);
  Eigen::VectorXi labels(60000);
  Rng rng(53);
  for (int i = 0; i < 60000; ++i) labels[i] = static_cast<int>(rng.below(10));
  Rng drng(54);
  NesyDataset data = nesy_build_dataset(imgs, labels, 10, 4, drng);
  CHECK(data.sequences.rows() == 15000);
  int max_sum = 0;
  for (int i = 0; i < data.sums.size(); ++i) max_sum = std::max(max_sum, data.sums[i]);
  CHECK(max_sum <= 36);
}

TEST_CASE("nesy loss values for degenerate classifiers") {
  // Uniform classifier over 10 classes, single digit: the summed-category
  // estimate is exact, loss = -ln 0.1.
  nn::Mlp classifier("cls", 4, {{10, nn::Act::None}});
  nn::ParamStore store;
  Rng rng(61);
  classifier.init_params(store, rng);
  store.value("cls.L0.W").setZero();
  store.value("cls.L0.b").setZero();
  Mat seq = Mat::Zero(1, 4);
  store.zero_grad();
  Rng step(62);
  NesyStepResult res = nesy_nll(classifier, store, seq, 3, {EstimatorKind::Indecater, 4}, step);
  CHECK(res.expectation == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(res.loss == doctest::Approx(-std::log(0.1)).epsilon(1e-12));

  // Two uniform digits, label 0: exact expectation is 0.01.
  auto fact = Factorisation::independent(LogitTable::zeros({10, 10}));
  FunctionOracle f([](const Assignment& x) { return x.sum() == 0 ? 1.0 : 0.0; });
  CHECK(exact_expectation(fact, f) == doctest::Approx(0.01).epsilon(1e-12));

  // A certain classifier gives E = 1, loss 0: saturate class 2 for both rows.
  nn::Mlp sure("sure", 4, {{10, nn::Act::None}});
  nn::ParamStore sstore;
  Rng rng2(63);
  sure.init_params(sstore, rng2);
  sstore.value("sure.L0.W").setZero();
  sstore.value("sure.L0.b").setZero();
  sstore.value("sure.L0.b")(0, 2) = 80.0;
  Mat seq2 = Mat::Zero(2, 4);
  sstore.zero_grad();
  Rng step2(64);
  NesyStepResult sres = nesy_nll(sure, sstore, seq2, 4, {EstimatorKind::Indecater, 2}, step2);
  CHECK(sres.expectation == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(sres.loss == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("nesy rejects gumbel-softmax with the documented error") {
  nn::Mlp classifier("cls", 4, {{4, nn::Act::None}});
  nn::ParamStore store;
  Rng rng(71);
  classifier.init_params(store, rng);
  Mat seq = Mat::Zero(2, 4);
  EstimatorConfig cfg;
  cfg.kind = EstimatorKind::GumbelSoftmax;
  cfg.n_samples = 4;
  Rng step(72);
  CHECK_THROWS_WITH_AS(nesy_nll(classifier, store, seq, 2, cfg, step),
                       "function has zero derivative almost everywhere",
                       std::invalid_argument);
}

TEST_CASE("nesy training improves sum accuracy on a tiny corpus") {
  Rng rng(81);
  Mat templates = make_glyph_templates(3, 16, rng);
  Glyphs g = make_glyph_data(templates, 90, 0.02, rng);
  NesyDataset train = nesy_build_dataset(g.images, g.labels, 3, 2, rng);
  Glyphs gt = make_glyph_data(templates, 30, 0.02, rng);
  NesyDataset test = nesy_build_dataset(gt.images, gt.labels, 3, 2, rng);

  nn::Mlp classifier("cls", 16, {{24, nn::Act::Relu}, {3, nn::Act::None}});
  nn::ParamStore store;
  classifier.init_params(store, rng);
  const double before = nesy_sum_accuracy(classifier, store, test);

  nn::Adam opt({1e-2});
  EstimatorConfig cfg{EstimatorKind::Indecater, 3, true};
  Rng step_rng(82);
  Mat seq(2, 16);
  for (int epoch = 0; epoch < 30; ++epoch) {
    for (int i = 0; i < train.sequences.rows(); ++i) {
      for (int d = 0; d < 2; ++d) seq.row(d) = train.images.row(train.sequences(i, d));
      store.zero_grad();
      nesy_nll(classifier, store, seq, train.sums[i], cfg, step_rng);
      opt.step(store);
    }
  }
  const double after = nesy_sum_accuracy(classifier, store, test);
  INFO("accuracy before ", before, " after ", after);
  CHECK(after > before);
  CHECK(after >= 0.8);
}
