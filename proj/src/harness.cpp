#include "catgrad/harness.hpp"

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace catgrad::harness {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunReport
// ---------------------------------------------------------------------------

void RunReport::add_summary(const std::string& name, double value) {
  summary.emplace_back(name, value);
}

bool RunReport::has_summary(const std::string& name) const {
  for (const auto& [k, v] : summary)
    if (k == name) return true;
  return false;
}

double RunReport::summary_value(const std::string& name) const {
  for (const auto& [k, v] : summary)
    if (k == name) return v;
  throw std::invalid_argument("no summary entry: " + name);
}

bool RunReport::same_numbers(const RunReport& other) const {
  if (experiment != other.experiment || arm != other.arm || version != other.version ||
      config_echo != other.config_echo || steps.size() != other.steps.size() ||
      summary.size() != other.summary.size())
    return false;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const StepRecord& a = steps[i];
    const StepRecord& b = other.steps[i];
    if (a.step != b.step || a.samples != b.samples ||
        a.function_evals != b.function_evals || a.diverged != b.diverged)
      return false;
    if (std::memcmp(&a.objective, &b.objective, sizeof(double)) != 0) return false;
    if (std::memcmp(&a.grad_variance, &b.grad_variance, sizeof(double)) != 0)
      return false;
  }
  for (std::size_t i = 0; i < summary.size(); ++i) {
    if (summary[i].first != other.summary[i].first) return false;
    const double a = summary[i].second, b = other.summary[i].second;
    if (std::memcmp(&a, &b, sizeof(double)) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Metrics serialisation
// ---------------------------------------------------------------------------

namespace {

void write_csv(const RunReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "step,objective,grad_variance,samples,function_evals,elapsed_ms,diverged\n";
  for (const StepRecord& s : r.steps) {
    out << s.step << ',' << fmt_double(s.objective) << ','
        << fmt_double(s.grad_variance) << ',' << s.samples << ',' << s.function_evals
        << ',' << fmt_double(s.elapsed_ms) << ',' << (s.diverged ? 1 : 0) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

RunReport read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("empty metrics file: " + path);
  const std::string header =
      "step,objective,grad_variance,samples,function_evals,elapsed_ms,diverged";
  if (line != header) throw std::runtime_error("unexpected CSV header in " + path);
  RunReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    StepRecord s;
    std::stringstream ss(line);
    std::string field;
    auto next = [&]() {
      if (!std::getline(ss, field, ','))
        throw std::runtime_error("short CSV row in " + path);
      return field;
    };
    s.step = std::stoll(next());
    s.objective = std::strtod(next().c_str(), nullptr);
    s.grad_variance = std::strtod(next().c_str(), nullptr);
    s.samples = std::stoll(next());
    s.function_evals = std::stoll(next());
    s.elapsed_ms = std::strtod(next().c_str(), nullptr);
    s.diverged = next() == "1";
    r.steps.push_back(s);
  }
  return r;
}

nlohmann::ordered_json step_to_json(const StepRecord& s) {
  return {{"step", s.step},
          {"objective", s.objective},
          {"grad_variance", s.grad_variance},
          {"samples", s.samples},
          {"function_evals", s.function_evals},
          {"elapsed_ms", s.elapsed_ms},
          {"diverged", s.diverged}};
}

void write_json(const RunReport& r, const std::string& path) {
  nlohmann::ordered_json j;
  j["experiment"] = r.experiment;
  j["arm"] = r.arm;
  j["version"] = r.version;
  j["config"] = r.config_echo;
  j["steps"] = nlohmann::ordered_json::array();
  for (const StepRecord& s : r.steps) j["steps"].push_back(step_to_json(s));
  j["summary"] = nlohmann::ordered_json::array();
  for (const auto& [k, v] : r.summary)
    j["summary"].push_back({{"name", k}, {"value", v}});
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

RunReport read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(in);
  RunReport r;
  r.experiment = j.value("experiment", "");
  r.arm = j.value("arm", "");
  r.version = j.value("version", "");
  r.config_echo = j.value("config", "");
  for (const auto& sj : j.at("steps")) {
    StepRecord s;
    s.step = sj.at("step").get<std::int64_t>();
    s.objective = sj.at("objective").get<double>();
    s.grad_variance = sj.at("grad_variance").get<double>();
    s.samples = sj.at("samples").get<std::int64_t>();
    s.function_evals = sj.at("function_evals").get<std::int64_t>();
    s.elapsed_ms = sj.at("elapsed_ms").get<double>();
    s.diverged = sj.at("diverged").get<bool>();
    r.steps.push_back(s);
  }
  for (const auto& sj : j.at("summary"))
    r.add_summary(sj.at("name").get<std::string>(), sj.at("value").get<double>());
  return r;
}

}  // namespace

void write_metrics(const RunReport& report, const std::string& path,
                   const std::string& format) {
  if (format == "csv")
    write_csv(report, path);
  else if (format == "json")
    write_json(report, path);
  else
    throw std::invalid_argument("unknown metrics format: " + format);
}

RunReport read_metrics(const std::string& path, const std::string& format) {
  if (format == "csv") return read_csv(path);
  if (format == "json") return read_json(path);
  throw std::invalid_argument("unknown metrics format: " + format);
}

// ---------------------------------------------------------------------------
// IDX loader
// ---------------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("truncated IDX file: " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

std::pair<Mat, Eigen::VectorXi> load_idx(const std::string& images_path,
                                         const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("cannot read " + images_path);
  if (read_be32(img, images_path) != 0x00000803u)
    throw std::runtime_error("not an IDX image file: " + images_path);
  const std::uint32_t n = read_be32(img, images_path);
  const std::uint32_t rows = read_be32(img, images_path);
  const std::uint32_t cols = read_be32(img, images_path);
  Mat images(n, static_cast<Eigen::Index>(rows) * cols);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    img.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(buf.size()));
    if (!img) throw std::runtime_error("truncated IDX file: " + images_path);
    for (std::size_t p = 0; p < buf.size(); ++p)
      images(i, static_cast<Eigen::Index>(p)) = buf[p] / 255.0;
  }

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("cannot read " + labels_path);
  if (read_be32(lab, labels_path) != 0x00000801u)
    throw std::runtime_error("not an IDX label file: " + labels_path);
  const std::uint32_t ln = read_be32(lab, labels_path);
  if (ln != n)
    throw std::runtime_error("IDX image/label counts differ: " + std::to_string(n) +
                             " vs " + std::to_string(ln));
  Eigen::VectorXi labels(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    unsigned char c;
    lab.read(reinterpret_cast<char*>(&c), 1);
    if (!lab) throw std::runtime_error("truncated IDX file: " + labels_path);
    labels[static_cast<Eigen::Index>(i)] = c;
  }
  return {std::move(images), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

void apply_arm_value(ArmConfig& arm, const std::string& key, const std::string& value) {
  if (key == "estimator") {
    arm.estimator.kind = estimator_from_name(value);
    if (value == "indecater-fresh") arm.estimator.fresh_per_variable = true;
  } else if (key == "samples") {
    arm.estimator.n_samples = std::stoll(value);
  } else if (key == "fresh") {
    arm.estimator.fresh_per_variable = value == "1" || value == "true";
  } else if (key == "lr") {
    arm.lr = std::stod(value);
  } else if (key == "optimizer") {
    if (value != "adam" && value != "rmsprop")
      throw std::invalid_argument("unknown optimizer: " + value);
    arm.optimizer = value;
  } else if (key == "tau0") {
    arm.estimator.temperature = std::stod(value);
    arm.estimator.anneal.initial = std::stod(value);
  } else if (key == "anneal_factor") {
    arm.estimator.anneal.decay_factor = std::stod(value);
  } else if (key == "anneal_period") {
    arm.estimator.anneal.period = std::stoll(value);
  } else if (key == "tau_floor") {
    arm.estimator.anneal.floor = std::stod(value);
  } else {
    throw std::invalid_argument("unknown arm key: " + key);
  }
}

}  // namespace

void apply_config_value(ExperimentConfig& config, const std::string& key,
                        const std::string& value) {
  if (key == "experiment") config.experiment = value;
  else if (key == "preset") config.preset = value;
  else if (key == "seed") config.seed = std::stoull(value);
  else if (key == "iterations" || key == "iters") config.iterations = std::stoll(value);
  else if (key == "trials") config.trials = std::stoll(value);
  else if (key == "log_every") config.log_every = std::stoll(value);
  else if (key == "probes") config.variance_probes = std::stoll(value);
  else if (key == "estimators") config.estimators = split_commas(value);
  else if (key == "out") config.out_path = value;
  else if (key == "format") {
    if (value != "csv" && value != "json")
      throw std::invalid_argument("unknown format: " + value);
    config.format = value;
  }
  else if (key == "synth_dims") config.synth_dims = std::stoll(value);
  else if (key == "dvae_batch") config.dvae_batch = std::stoll(value);
  else if (key == "dvae_data") config.dvae_data = std::stoll(value);
  else if (key == "nesy_dseq") config.nesy_dseq = std::stoll(value);
  else if (key == "nesy_classes") config.nesy_classes = std::stoll(value);
  else if (key == "nesy_train") config.nesy_train = std::stoll(value);
  else if (key == "nesy_test") config.nesy_test = std::stoll(value);
  else if (key == "idx_images") config.idx_images = value;
  else if (key == "idx_labels") config.idx_labels = value;
  else throw std::invalid_argument("unknown config key: " + key);
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  ExperimentConfig config;
  ArmConfig* current_arm = nullptr;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                    ": malformed section header");
      std::string section = trim(line.substr(1, line.size() - 2));
      if (section.rfind("arm ", 0) != 0)
        throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                    ": unknown section: " + section);
      ArmConfig arm;
      arm.name = trim(section.substr(4));
      if (arm.name.empty())
        throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                    ": arm section needs a name");
      config.custom_arms.push_back(arm);
      current_arm = &config.custom_arms.back();
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (current_arm)
        apply_arm_value(*current_arm, key, value);
      else
        apply_config_value(config, key, value);
    } catch (const std::exception& e) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " +
                                  e.what());
    }
  }
  return config;
}

// ---------------------------------------------------------------------------
// Default arms per experiment
// ---------------------------------------------------------------------------

namespace {

ArmConfig make_arm(std::string name, EstimatorKind kind, std::int64_t n, double lr,
                   std::string optimizer) {
  ArmConfig arm;
  arm.name = std::move(name);
  arm.estimator.kind = kind;
  arm.estimator.n_samples = n;
  arm.lr = lr;
  arm.optimizer = std::move(optimizer);
  return arm;
}

}  // namespace

std::vector<ArmConfig> default_arms(const ExperimentConfig& config) {
  std::vector<ArmConfig> arms;
  if (config.experiment == "bench-exact") {
    // Baselines get 1000 samples, the summed-category estimator one.
    arms.push_back(make_arm("reinforce", EstimatorKind::Reinforce, 1000, 0, "adam"));
    arms.push_back(make_arm("rloo", EstimatorKind::Rloo, 1000, 0, "adam"));
    ArmConfig gs = make_arm("gs", EstimatorKind::GumbelSoftmax, 1000, 0, "adam");
    gs.estimator.temperature = 1.0;
    arms.push_back(gs);
    arms.push_back(make_arm("indecater", EstimatorKind::Indecater, 1, 0, "adam"));
  } else if (config.experiment == "opt-synth") {
    arms.push_back(make_arm("indecater", EstimatorKind::Indecater, 2, 5.0, "rmsprop"));
    arms.push_back(make_arm("rloo-s", EstimatorKind::Rloo, 2, 1.0, "rmsprop"));
    const std::int64_t feval_match = 2 * 2 * config.synth_dims;  // K * N * D
    arms.push_back(
        make_arm("rloo-f", EstimatorKind::Rloo, feval_match, 5.0, "rmsprop"));
    ArmConfig gs =
        make_arm("gs", EstimatorKind::GumbelSoftmax, feval_match, 0.01, "rmsprop");
    gs.estimator.temperature = 0.1;
    gs.estimator.anneal = {0.1, std::exp(-0.05), 20, 0.01};
    arms.push_back(gs);
  } else if (config.experiment == "dvae") {
    arms.push_back(make_arm("indecater", EstimatorKind::Indecater, 2, 1e-4, "adam"));
    arms.push_back(make_arm("rloo-s", EstimatorKind::Rloo, 2, 1e-4, "adam"));
    const std::int64_t latent = config.idx_images.empty() ? 16 : 200;
    const std::int64_t feval_match = 2 * 2 * latent;
    arms.push_back(make_arm("rloo-f", EstimatorKind::Rloo, feval_match, 1e-4, "adam"));
    const std::int64_t steps_per_epoch =
        std::max<std::int64_t>(1, config.dvae_data / std::max<std::int64_t>(1, config.dvae_batch));
    for (auto [name, n] : {std::pair<const char*, std::int64_t>{"gs-s", 2},
                           {"gs-f", feval_match}}) {
      ArmConfig gs = make_arm(name, EstimatorKind::GumbelSoftmax, n, 1e-4, "adam");
      gs.estimator.temperature = 1.0;
      gs.estimator.anneal = {1.0, std::exp(-0.01), steps_per_epoch, 0.1};
      arms.push_back(gs);
    }
  } else if (config.experiment == "nesy") {
    ArmConfig fresh =
        make_arm("indecater-fresh", EstimatorKind::Indecater, 4, 1e-3, "adam");
    fresh.estimator.fresh_per_variable = true;
    arms.push_back(fresh);
    arms.push_back(make_arm("indecater", EstimatorKind::Indecater, 4, 1e-3, "adam"));
    arms.push_back(make_arm("rloo-s", EstimatorKind::Rloo, 4 * config.nesy_dseq, 1e-3,
                            "adam"));
    arms.push_back(make_arm("rloo-f", EstimatorKind::Rloo,
                            4 * config.nesy_dseq * config.nesy_classes, 1e-3, "adam"));
    ArmConfig gs = make_arm("gs", EstimatorKind::GumbelSoftmax, 4, 1e-3, "adam");
    gs.estimator.temperature = 1.0;
    arms.push_back(gs);
  } else {
    throw std::invalid_argument("unknown experiment id: " + config.experiment);
  }
  return arms;
}

// ---------------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------------

namespace {

std::vector<ArmConfig> resolve_arms(const ExperimentConfig& config) {
  std::vector<ArmConfig> arms =
      config.custom_arms.empty() ? default_arms(config) : config.custom_arms;
  if (config.estimators.empty()) return arms;
  std::vector<ArmConfig> filtered;
  for (const std::string& want : config.estimators) {
    bool found = false;
    for (const ArmConfig& arm : arms)
      if (arm.name == want) {
        filtered.push_back(arm);
        found = true;
      }
    if (!found) throw std::invalid_argument("unknown estimator arm: " + want);
  }
  return filtered;
}

std::string echo_config(const ExperimentConfig& config, const ArmConfig& arm,
                        std::int64_t iterations, std::int64_t log_every,
                        std::int64_t trials) {
  std::ostringstream os;
  os << "experiment=" << config.experiment << ";preset=" << config.preset
     << ";seed=" << config.seed << ";iterations=" << iterations
     << ";log_every=" << log_every << ";trials=" << trials << ";arm=" << arm.name
     << ";estimator=" << estimator_name(arm.estimator.kind)
     << ";samples=" << arm.estimator.n_samples
     << ";fresh=" << (arm.estimator.fresh_per_variable ? 1 : 0)
     << ";optimizer=" << arm.optimizer << ";lr=" << fmt_double(arm.lr);
  if (arm.estimator.kind == EstimatorKind::GumbelSoftmax)
    os << ";tau0=" << fmt_double(arm.estimator.anneal.initial)
       << ";anneal_factor=" << fmt_double(arm.estimator.anneal.decay_factor)
       << ";anneal_period=" << arm.estimator.anneal.period
       << ";tau_floor=" << fmt_double(arm.estimator.anneal.floor);
  return os.str();
}

class StepOptimizer {
 public:
  StepOptimizer(const ArmConfig& arm) {
    if (arm.optimizer == "adam")
      adam_.emplace(nn::AdamConfig{arm.lr, 0.9, 0.999, 1e-8});
    else
      rms_.emplace(nn::RmsPropConfig{arm.lr, 0.9, 1e-8});
  }
  void step(nn::ParamStore& store) {
    if (adam_)
      adam_->step(store);
    else
      rms_->step(store);
  }

 private:
  std::optional<nn::Adam> adam_;
  std::optional<nn::RmsProp> rms_;
};

// ---- bench-exact ----------------------------------------------------------

RunReport run_bench_exact_arm(const ExperimentConfig& config, const ArmConfig& arm) {
  tasks::SynthExactTask task = [&] {
    if (config.preset == "fig1a") return tasks::SynthExactTask::fig1a(config.seed);
    if (config.preset == "fig1b") return tasks::SynthExactTask::fig1b(config.seed);
    if (config.preset == "fig1c") return tasks::SynthExactTask::fig1c(config.seed);
    throw std::invalid_argument("unknown bench-exact preset: " + config.preset);
  }();
  const std::int64_t trials = config.trials < 0 ? 1000 : config.trials;
  RunReport report;
  report.experiment = config.experiment;
  report.arm = arm.name;
  report.config_echo = echo_config(config, arm, 0, 0, trials);

  const Factorisation fact = task.factorisation();
  const FunctionOracle oracle = task.oracle();
  Rng rng = Rng(config.seed).split(fnv1a(arm.name));
  const auto t0 = Clock::now();
  BiasVarianceReport bv = bias_variance(arm.estimator, fact, oracle, trials, rng);
  const double elapsed = ms_since(t0);

  report.add_summary("trials", static_cast<double>(bv.trials));
  report.add_summary("bias_norm", bv.bias_norm);
  report.add_summary("bias_se_norm", bv.bias_se_norm);
  report.add_summary("max_bias_in_se", bv.max_bias_in_se());
  report.add_summary("total_variance", bv.total_variance);
  report.add_summary("total_variance_se", bv.total_variance_se);
  report.add_summary("samples_per_estimate", static_cast<double>(bv.samples_per_estimate));
  report.add_summary("function_evals_per_estimate",
                     static_cast<double>(bv.function_evals_per_estimate));
  report.add_summary("elapsed_ms", elapsed);
  return report;
}

// ---- opt-synth -------------------------------------------------------------

Mat stack_single_rows(const GradTable& g) {
  Mat out(g.num_blocks(), g.num_blocks() > 0 ? g.block(0).cols() : 0);
  for (int d = 0; d < g.num_blocks(); ++d) out.row(d) = g.block(d).row(0);
  return out;
}

RunReport run_opt_synth_arm(const ExperimentConfig& config, const ArmConfig& arm) {
  tasks::SynthOptTask task;
  task.dims = static_cast<int>(config.synth_dims);
  const std::int64_t iterations = config.iterations < 0 ? 10000 : config.iterations;
  const std::int64_t log_every = config.log_every < 0 ? 100 : config.log_every;

  RunReport report;
  report.experiment = config.experiment;
  report.arm = arm.name;
  report.config_echo = echo_config(config, arm, iterations, log_every, 0);

  nn::ParamStore store;
  store.add("logits", task.dims, 2);
  StepOptimizer opt(arm);
  const FunctionOracle oracle = task.oracle();
  Rng arm_rng = Rng(config.seed).split(fnv1a(arm.name));
  Rng probe_src = Rng(config.seed).split(fnv1a(arm.name) ^ 0x706f6265ull);

  auto estimate_once = [&](std::int64_t iter, Rng& rng) {
    const LogitTable table = LogitTable::from_matrix(store.value("logits"));
    if (arm.estimator.kind == EstimatorKind::GumbelSoftmax) {
      const double tau = anneal(arm.estimator.anneal, iter);
      return gumbel_softmax_grad(table, oracle, arm.estimator.n_samples, tau, rng);
    }
    const Factorisation fact = Factorisation::independent(table);
    return estimate(arm.estimator, fact, oracle, rng);
  };

  auto record = [&](std::int64_t step, double elapsed, std::int64_t samples,
                    std::int64_t evals, bool diverged) {
    StepRecord rec;
    rec.step = step;
    rec.objective =
        task.exact_objective(LogitTable::from_matrix(store.value("logits")));
    Rng probe_rng = probe_src.split(static_cast<std::uint64_t>(step));
    rec.grad_variance = diverged
                            ? 0.0
                            : gradient_variance_probe(
                                  [&](Rng& r) {
                                    return estimate_once(step, r).grad.flatten();
                                  },
                                  config.variance_probes, probe_rng);
    rec.samples = samples;
    rec.function_evals = evals;
    rec.elapsed_ms = elapsed;
    rec.diverged = diverged;
    report.steps.push_back(rec);
  };

  record(0, 0.0, 0, 0, false);
  std::int64_t total_samples = 0, total_evals = 0;
  bool diverged = false;
  for (std::int64_t step = 1; step <= iterations && !diverged; ++step) {
    const auto t0 = Clock::now();
    GradEstimate est = estimate_once(step - 1, arm_rng);
    total_samples += est.samples_drawn;
    total_evals += est.function_evals;
    store.grad("logits") = -stack_single_rows(est.grad);
    try {
      opt.step(store);
    } catch (const std::runtime_error&) {
      diverged = true;
    }
    if (!store.values_finite()) diverged = true;
    const double elapsed = ms_since(t0);
    if (diverged || step % log_every == 0 || step == iterations)
      record(step, elapsed, est.samples_drawn, est.function_evals, diverged);
  }
  report.add_summary("final_objective", report.steps.back().objective);
  report.add_summary("total_samples", static_cast<double>(total_samples));
  report.add_summary("total_function_evals", static_cast<double>(total_evals));
  report.add_summary("diverged", diverged ? 1.0 : 0.0);
  return report;
}

// ---- dvae -------------------------------------------------------------------

RunReport run_dvae_arm(const ExperimentConfig& config, const ArmConfig& arm,
                       const Mat& data, const tasks::DvaeModel& model) {
  const std::int64_t iterations = config.iterations < 0 ? 2000 : config.iterations;
  const std::int64_t log_every = config.log_every < 0 ? 100 : config.log_every;
  const std::int64_t batch_size = config.dvae_batch;

  RunReport report;
  report.experiment = config.experiment;
  report.arm = arm.name;
  report.config_echo = echo_config(config, arm, iterations, log_every, 0);

  // Every arm starts from the same initialisation stream.
  nn::ParamStore store;
  Rng init_rng = Rng(config.seed).split(0x12171217ull);
  model.init_params(store, init_rng);
  StepOptimizer opt(arm);
  Rng arm_rng = Rng(config.seed).split(fnv1a(arm.name));
  Rng probe_src = Rng(config.seed).split(fnv1a(arm.name) ^ 0x706f6265ull);

  const Eigen::Index n_data = data.rows();
  auto make_batch = [&](std::int64_t step) {
    Mat batch(batch_size, data.cols());
    for (std::int64_t i = 0; i < batch_size; ++i)
      batch.row(i) = data.row((step * batch_size + i) % n_data);
    return batch;
  };
  const Mat eval_batch = make_batch(0);

  auto run_elbo = [&](const Mat& batch, std::int64_t step, Rng& rng) {
    if (arm.estimator.kind == EstimatorKind::GumbelSoftmax) {
      const double tau = anneal(arm.estimator.anneal, step);
      return tasks::dvae_elbo_gs(model, store, batch, arm.estimator.n_samples, tau,
                                 rng);
    }
    return tasks::dvae_elbo(model, store, batch, arm.estimator, rng);
  };

  auto record = [&](std::int64_t step, double elapsed, std::int64_t samples,
                    std::int64_t evals, bool diverged) {
    StepRecord rec;
    rec.step = step;
    Rng probe_rng = probe_src.split(static_cast<std::uint64_t>(step));
    if (!diverged) {
      store.zero_grad();
      Rng eval_rng = probe_rng.split(0xEEull);
      rec.objective = run_elbo(eval_batch, step, eval_rng).neg_elbo;
      rec.grad_variance = gradient_variance_probe(
          [&](Rng& r) {
            store.zero_grad();
            run_elbo(eval_batch, step, r);
            Vec g = store.flat_grad();
            store.zero_grad();
            return g;
          },
          config.variance_probes, probe_rng);
    }
    rec.samples = samples;
    rec.function_evals = evals;
    rec.elapsed_ms = elapsed;
    rec.diverged = diverged;
    report.steps.push_back(rec);
  };

  record(0, 0.0, 0, 0, false);
  std::int64_t total_samples = 0, total_evals = 0;
  bool diverged = false;
  for (std::int64_t step = 1; step <= iterations && !diverged; ++step) {
    const auto t0 = Clock::now();
    const Mat batch = make_batch(step - 1);
    store.zero_grad();
    std::int64_t samples = 0, evals = 0;
    try {
      tasks::DvaeStepResult res = run_elbo(batch, step - 1, arm_rng);
      samples = res.samples_drawn;
      evals = res.function_evals;
      opt.step(store);
    } catch (const std::runtime_error&) {
      diverged = true;
    }
    if (!store.values_finite()) diverged = true;
    total_samples += samples;
    total_evals += evals;
    const double elapsed = ms_since(t0);
    if (diverged || step % log_every == 0 || step == iterations)
      record(step, elapsed, samples, evals, diverged);
  }
  report.add_summary("initial_objective", report.steps.front().objective);
  report.add_summary("final_objective", report.steps.back().objective);
  double best = report.steps.front().objective;
  for (const auto& s : report.steps)
    if (!s.diverged && s.step > 0) best = std::min(best, s.objective);
  report.add_summary("best_objective", best);
  report.add_summary("total_samples", static_cast<double>(total_samples));
  report.add_summary("total_function_evals", static_cast<double>(total_evals));
  report.add_summary("diverged", diverged ? 1.0 : 0.0);
  return report;
}

// ---- nesy -------------------------------------------------------------------

RunReport run_nesy_arm(const ExperimentConfig& config, const ArmConfig& arm,
                       const tasks::NesyDataset& train, const tasks::NesyDataset& test,
                       const nn::Mlp& classifier) {
  const std::int64_t epochs = config.iterations < 0 ? 200 : config.iterations;
  const std::int64_t log_every = config.log_every < 0 ? 5 : config.log_every;

  RunReport report;
  report.experiment = config.experiment;
  report.arm = arm.name;
  report.config_echo = echo_config(config, arm, epochs, log_every, 0);

  nn::ParamStore store;
  Rng init_rng = Rng(config.seed).split(0x12171217ull);
  classifier.init_params(store, init_rng);
  StepOptimizer opt(arm);
  Rng arm_rng = Rng(config.seed).split(fnv1a(arm.name));
  Rng probe_src = Rng(config.seed).split(fnv1a(arm.name) ^ 0x706f6265ull);

  const Eigen::Index n_seq = train.sequences.rows();
  const int d_seq = static_cast<int>(train.sequences.cols());
  Mat seq(d_seq, train.images.cols());
  auto load_sequence = [&](const tasks::NesyDataset& data, Eigen::Index i, Mat& into) {
    for (int d = 0; d < d_seq; ++d)
      into.row(d) = data.images.row(data.sequences(i, d));
  };

  auto record = [&](std::int64_t epoch, double elapsed, std::int64_t samples,
                    std::int64_t evals, bool diverged) {
    StepRecord rec;
    rec.step = epoch;
    rec.objective = tasks::nesy_sum_accuracy(classifier, store, test);
    if (!diverged && n_seq > 0) {
      Rng probe_rng = probe_src.split(static_cast<std::uint64_t>(epoch));
      Mat probe_seq(d_seq, train.images.cols());
      load_sequence(train, 0, probe_seq);
      rec.grad_variance = gradient_variance_probe(
          [&](Rng& r) {
            store.zero_grad();
            tasks::nesy_nll(classifier, store, probe_seq, train.sums[0], arm.estimator,
                            r);
            Vec g = store.flat_grad();
            store.zero_grad();
            return g;
          },
          config.variance_probes, probe_rng);
    }
    rec.samples = samples;
    rec.function_evals = evals;
    rec.elapsed_ms = elapsed;
    rec.diverged = diverged;
    report.steps.push_back(rec);
  };

  // Gumbel-Softmax cannot differentiate the sum indicator; reject the arm
  // up front with the pipeline's own error.
  if (arm.estimator.kind == EstimatorKind::GumbelSoftmax) {
    try {
      store.zero_grad();
      load_sequence(train, 0, seq);
      tasks::nesy_nll(classifier, store, seq, train.sums[0], arm.estimator, arm_rng);
    } catch (const std::invalid_argument& e) {
      report.add_summary("rejected", 1.0);
      report.config_echo += std::string(";error=") + e.what();
      return report;
    }
  }

  record(0, 0.0, 0, 0, false);
  std::int64_t total_samples = 0, total_evals = 0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_seq));
  for (Eigen::Index i = 0; i < n_seq; ++i) order[static_cast<std::size_t>(i)] = i;
  bool diverged = false;
  for (std::int64_t epoch = 1; epoch <= epochs && !diverged; ++epoch) {
    const auto t0 = Clock::now();
    for (Eigen::Index i = 0; i < n_seq - 1; ++i) {
      const Eigen::Index j = i + arm_rng.below(n_seq - i);
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    std::int64_t samples = 0, evals = 0;
    try {
      for (Eigen::Index i = 0; i < n_seq; ++i) {
        load_sequence(train, order[static_cast<std::size_t>(i)], seq);
        store.zero_grad();
        tasks::NesyStepResult res =
            tasks::nesy_nll(classifier, store, seq,
                            train.sums[order[static_cast<std::size_t>(i)]],
                            arm.estimator, arm_rng);
        samples += res.samples_drawn;
        evals += res.function_evals;
        opt.step(store);
      }
    } catch (const std::runtime_error&) {
      diverged = true;
    }
    total_samples += samples;
    total_evals += evals;
    const double elapsed = ms_since(t0);
    if (diverged || epoch % log_every == 0 || epoch == epochs)
      record(epoch, elapsed, samples, evals, diverged);
  }
  report.add_summary("final_accuracy", report.steps.back().objective);
  double best = 0.0;
  for (const auto& s : report.steps) best = std::max(best, s.objective);
  report.add_summary("best_accuracy", best);
  report.add_summary("total_samples", static_cast<double>(total_samples));
  report.add_summary("total_function_evals", static_cast<double>(total_evals));
  report.add_summary("diverged", diverged ? 1.0 : 0.0);
  return report;
}

}  // namespace

std::vector<RunReport> run_experiment(const ExperimentConfig& config) {
  const std::vector<ArmConfig> arms = resolve_arms(config);
  std::vector<RunReport> reports;

  if (config.experiment == "bench-exact") {
    for (const ArmConfig& arm : arms)
      reports.push_back(run_bench_exact_arm(config, arm));
  } else if (config.experiment == "opt-synth") {
    for (const ArmConfig& arm : arms)
      reports.push_back(run_opt_synth_arm(config, arm));
  } else if (config.experiment == "dvae") {
    Mat data;
    if (!config.idx_images.empty()) {
      data = tasks::binarize(load_idx(config.idx_images, config.idx_labels).first);
    } else {
      Rng data_rng = Rng(config.seed).split(0xDA7Aull);
      data = tasks::make_prototype_data(static_cast<int>(config.dvae_data), 64, 8,
                                        0.05, data_rng);
    }
    const tasks::DvaeModel model =
        data.cols() == 784
            ? tasks::DvaeModel(784, {384, 256}, 200, {256, 384})
            : tasks::DvaeModel(static_cast<int>(data.cols()), {48, 32}, 16, {32, 48});
    for (const ArmConfig& arm : arms)
      reports.push_back(run_dvae_arm(config, arm, data, model));
  } else if (config.experiment == "nesy") {
    const int classes = static_cast<int>(config.nesy_classes);
    const int width = 16;
    Rng tmpl_rng = Rng(config.seed).split(0x731ull);
    const Mat templates = tasks::make_glyph_templates(classes, width, tmpl_rng);
    Rng train_rng = Rng(config.seed).split(0x732ull);
    tasks::Glyphs train_glyphs = tasks::make_glyph_data(
        templates, static_cast<int>(config.nesy_train), 0.03, train_rng);
    Rng test_rng = Rng(config.seed).split(0x733ull);
    tasks::Glyphs test_glyphs = tasks::make_glyph_data(
        templates, static_cast<int>(config.nesy_test), 0.03, test_rng);
    Rng train_ds_rng = Rng(config.seed).split(0x734ull);
    const tasks::NesyDataset train =
        tasks::nesy_build_dataset(train_glyphs.images, train_glyphs.labels, classes,
                                  static_cast<int>(config.nesy_dseq), train_ds_rng);
    Rng test_ds_rng = Rng(config.seed).split(0x735ull);
    const tasks::NesyDataset test =
        tasks::nesy_build_dataset(test_glyphs.images, test_glyphs.labels, classes,
                                  static_cast<int>(config.nesy_dseq), test_ds_rng);
    const nn::Mlp classifier("cls", width,
                             {{32, nn::Act::Relu}, {16, nn::Act::Relu},
                              {classes, nn::Act::None}});
    for (const ArmConfig& arm : arms)
      reports.push_back(run_nesy_arm(config, arm, train, test, classifier));
  } else {
    throw std::invalid_argument("unknown experiment id: " + config.experiment);
  }

  if (!config.out_path.empty()) {
    for (const RunReport& report : reports)
      write_metrics(report, config.out_path + "." + report.arm + "." + config.format,
                    config.format);
  }
  return reports;
}

double gradient_variance_probe(const std::function<Vec(Rng&)>& grad_fn,
                               std::int64_t probes, Rng& rng) {
  if (probes < 2) throw std::invalid_argument("variance probe requires probes >= 2");
  // Shifted moments about the first probe keep near-deterministic gradients
  // from losing their variance to cancellation.
  Vec shift, sum, sumsq;
  for (std::int64_t p = 0; p < probes; ++p) {
    Rng probe_rng = rng.split(static_cast<std::uint64_t>(p));
    const Vec g = grad_fn(probe_rng);
    if (p == 0) {
      shift = g;
      sum = Vec::Zero(g.size());
      sumsq = Vec::Zero(g.size());
      continue;
    }
    const Vec d = g - shift;
    sum += d;
    sumsq += d.cwiseProduct(d);
  }
  const double n = static_cast<double>(probes);
  double total = 0.0;
  for (Eigen::Index c = 0; c < sum.size(); ++c) {
    const double mean = sum[c] / n;
    const double m2 = std::max(0.0, sumsq[c] / n - mean * mean);
    total += m2 * n / (n - 1.0);
  }
  return total;
}

}  // namespace catgrad::harness
