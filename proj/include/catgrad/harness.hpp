#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "catgrad/estimators.hpp"
#include "catgrad/tasks.hpp"

namespace catgrad::harness {

inline constexpr const char* kVersionTag = "catgrad-0.1.0";

using nn::Mat;

// ---------------------------------------------------------------------------
// Run reports
// ---------------------------------------------------------------------------
struct StepRecord {
  std::int64_t step = 0;
  double objective = 0.0;
  double grad_variance = 0.0;
  std::int64_t samples = 0;         // drawn by the estimator during this step
  std::int64_t function_evals = 0;  // during this step
  double elapsed_ms = 0.0;          // wall clock, excluded from determinism
  bool diverged = false;
};

struct RunReport {
  std::string experiment;
  std::string arm;
  std::string version = kVersionTag;
  std::string config_echo;
  std::vector<StepRecord> steps;
  std::vector<std::pair<std::string, double>> summary;  // insertion-ordered

  void add_summary(const std::string& name, double value);
  bool has_summary(const std::string& name) const;
  double summary_value(const std::string& name) const;
  // Equality of every numeric field except elapsed_ms.
  bool same_numbers(const RunReport& other) const;
};

// CSV holds the step table (header row naming every field); JSON holds the
// full report as a single object with a `steps` array. Both round-trip
// exactly through read_metrics.
void write_metrics(const RunReport& report, const std::string& path,
                   const std::string& format);
RunReport read_metrics(const std::string& path, const std::string& format);

// ---------------------------------------------------------------------------
// IDX dataset files (big-endian magic 0x803 images / 0x801 labels); pixels
// scale to [0, 1] by 1/255.
// ---------------------------------------------------------------------------
std::pair<Mat, Eigen::VectorXi> load_idx(const std::string& images_path,
                                         const std::string& labels_path);

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------
struct ArmConfig {
  std::string name;
  EstimatorConfig estimator;
  std::string optimizer = "adam";  // adam | rmsprop
  double lr = 1e-3;
};

struct ExperimentConfig {
  std::string experiment;  // bench-exact | opt-synth | dvae | nesy
  std::string preset = "fig1a";
  std::uint64_t seed = 1;
  std::int64_t iterations = -1;  // steps (opt-synth/dvae) or epochs (nesy)
  std::int64_t trials = -1;      // bench-exact
  std::int64_t log_every = -1;
  std::int64_t variance_probes = 8;
  std::vector<std::string> estimators;  // arm filter; empty = all preset arms
  std::vector<ArmConfig> custom_arms;   // [arm NAME] sections, replace presets
  std::string out_path;
  std::string format = "csv";
  int verbosity = 0;

  // Desk-scale task sizing.
  std::int64_t synth_dims = 200;
  std::int64_t dvae_batch = 16;
  std::int64_t dvae_data = 512;
  std::int64_t nesy_dseq = 3;
  std::int64_t nesy_classes = 4;
  std::int64_t nesy_train = 600;
  std::int64_t nesy_test = 120;
  std::string idx_images;  // optional real image data for dvae
  std::string idx_labels;
};

// Flat key-value config file: `key = value` lines, `#` comments, and
// `[arm NAME]` sections whose keys configure one estimator arm.
ExperimentConfig parse_config_file(const std::string& path);
// Shared typed setter used by both the file parser and CLI overrides.
void apply_config_value(ExperimentConfig& config, const std::string& key,
                        const std::string& value);

// The paper-derived arms for each experiment preset.
std::vector<ArmConfig> default_arms(const ExperimentConfig& config);

std::vector<RunReport> run_experiment(const ExperimentConfig& config);

// Summed per-coordinate sample variance of a gradient re-estimated `probes`
// times at a fixed parameter point with independent streams.
double gradient_variance_probe(const std::function<Vec(Rng&)>& grad_fn,
                               std::int64_t probes, Rng& rng);

}  // namespace catgrad::harness
