#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metaof/config.hpp"
#include "metaof/feedback.hpp"
#include "metaof/maml.hpp"

namespace metaof::harness {

enum class ExperimentKind { Sinusoid, Classification, NoiseSweep, Feedback };

struct ClassificationSettings {
  tasks::SynthPoolConfig pool;      // meta-train classes
  int test_classes = 20;            // meta-test classes (synthetic)
  tasks::ClassTaskSpec task;
  std::string image_dir;            // optional real-image pool
  int image_side = 14;
  double image_test_fraction = 0.4;
};

struct FeedbackSettings {
  std::string base = "vanilla";     // vanilla | noise
  int iterations = 500;
  double outer_lr = 0.001;
  bool clamp_weights = false;
  int test_tasks = 5;               // targets per seed
};

struct SweepSettings {
  std::vector<double> sigmas = {1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5};
  int eval_step = -1;               // -1: largest of train.eval_steps
};

struct GapThresholds {
  int steps = 10;
  double ratio_threshold = 0.2;     // train-split adaptation gap below this...
  double test_factor = 3.0;         // ...and test adapted loss above this multiple
  double eps_div = 1e-12;
};

/// Everything a run needs; built from a flat config file.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Sinusoid;
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir;
  int threads = 1;

  std::vector<int> hidden = {40, 40};
  tasks::SinusoidConfig sinusoid;
  double augment_range = 2.0;
  ClassificationSettings classification;
  maml::TrainConfig train;
  maml::NoiseSpec noise;
  FeedbackSettings feedback;
  SweepSettings sweep;
  GapThresholds diagnose;

  config::Config source;

  /// Throws ConfigError naming the offending key.
  static ExperimentConfig from_config(const config::Config& cfg);
  static ExperimentConfig load(const std::filesystem::path& path);

  [[nodiscard]] bool is_classification() const;
  [[nodiscard]] nn::ModelSpec model_spec() const;
  /// Task source for one seed; `augment` enables CE-increasing target offsets.
  [[nodiscard]] std::unique_ptr<maml::TaskSource> make_source(std::uint64_t seed, bool augment = false) const;
  /// Training config for `seed` with outputs under output_dir.
  [[nodiscard]] maml::TrainConfig train_config(std::uint64_t seed) const;
  /// Noise spec of the "noise" variant (target defaults to inner).
  [[nodiscard]] maml::NoiseSpec variant_noise(const std::string& variant) const;
};

struct SplitGap {
  double zero_shot_loss = 0.0;
  double adapted_loss = 0.0;
  double ratio = 0.0;  // (L0 - Ln) / max(L0, eps)
};

struct GapReport {
  SplitGap train;
  SplitGap test;
  int steps = 0;
  bool memorized = false;
};

/// Zero-shot vs adapted query loss on both splits; flags memorization when the
/// model barely adapts on meta-train tasks yet does much worse on meta-test.
GapReport memorization_gap(const nn::ParameterSet& theta, const nn::ModelSpec& spec,
                           std::span<const tasks::Task> train_tasks,
                           std::span<const tasks::Task> test_tasks, double alpha,
                           const GapThresholds& thresholds);

struct AggregateRow {
  std::string phase;
  int outer_iter = 0;
  std::string split;
  int adapt_steps = 0;
  double loss_mean = 0.0;
  double loss_std = 0.0;      // across seeds
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;  // across seeds
  int seeds = 0;
};

/// Mean over seeds of per-seed rows sharing (phase, outer_iter, split, adapt_steps).
std::vector<AggregateRow> aggregate(std::span<const maml::MetricsRecord> records);

struct SweepRow {
  double sigma = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  std::vector<double> per_seed;
};

struct DiagnosticRow {
  std::uint64_t seed = 0;
  std::string variant;
  GapReport gap;
};

struct RunReport {
  std::vector<maml::MetricsRecord> records;
  std::vector<AggregateRow> aggregate;
  std::vector<SweepRow> sweep;
  std::vector<DiagnosticRow> diagnostics;
  std::string config_hash;
  double wall_seconds = 0.0;
  std::vector<std::string> warnings;
};

/// Runs the configured experiment and writes metrics.csv, aggregate.csv and
/// report.txt (plus sweep.csv / diagnostics.csv where applicable) into
/// cfg.output_dir. Output files other than report.txt are a pure function of
/// the config.
RunReport run_experiment(const ExperimentConfig& cfg);
RunReport run_experiment(const std::filesystem::path& config_path);

/// Noise of the configured target at each sigma (0 allowed), one training run per seed;
/// returns final meta-test accuracy mean/std across seeds per sigma.
std::vector<SweepRow> noise_sweep(const ExperimentConfig& base, std::span<const double> sigmas,
                                  std::vector<maml::MetricsRecord>* records = nullptr);

/// Per-seed result of one variant; exposed for the acceptance suite.
struct VariantResult {
  nn::ParameterSet theta;
  std::vector<maml::MetricsRecord> records;
};
VariantResult run_variant(const ExperimentConfig& cfg, const std::string& variant, std::uint64_t seed);

/// Loss (and accuracy) of `theta` adapted for n steps on a target task's
/// support set, evaluated on its query set.
std::vector<maml::EvalRow> evaluate_target(const nn::ParameterSet& theta, const tasks::Task& target,
                                           const nn::ModelSpec& spec, double alpha,
                                           std::span<const int> steps);

/// Meta-test target tasks used by the feedback variant for `seed`.
std::vector<tasks::Task> feedback_targets(const ExperimentConfig& cfg, const maml::TaskSource& source,
                                          std::uint64_t seed);

void write_metrics_csv(std::span<const maml::MetricsRecord> records, const std::filesystem::path& path);
void write_aggregate_csv(std::span<const AggregateRow> rows, const std::filesystem::path& path);
void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path);
void write_diagnostics_csv(std::span<const DiagnosticRow> rows, const std::filesystem::path& path);
std::vector<maml::MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

/// Output directory: explicit value, else $METAOF_OUTPUT_ROOT/<name>, else ./runs/<name>.
std::filesystem::path default_output_dir(const std::string& name);

std::string kind_name(ExperimentKind kind);

}  // namespace metaof::harness
