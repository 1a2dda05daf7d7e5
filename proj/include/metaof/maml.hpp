#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "metaof/nn.hpp"
#include "metaof/rng.hpp"
#include "metaof/tasks.hpp"

namespace metaof::maml {

using nn::Matrix;
using nn::ParameterSet;
using tasks::Task;

enum class NoiseTarget { None, Inner, Outer, Both };

/// Gaussian perturbation of parameter updates. Draws are i.i.d. per scalar
/// parameter and are added after the gradient term (phi = theta - a*g + eps).
struct NoiseSpec {
  double mean = 0.0;
  double inner_stddev = 7e-7;
  double outer_stddev = 2e-7;
  NoiseTarget target = NoiseTarget::None;
  double decay_factor = 0.5;
  /// Outer iterations between decays; 0 means half of the run (see resolved()).
  int decay_interval = 0;

  void validate() const;
  [[nodiscard]] bool inner_enabled() const {
    return (target == NoiseTarget::Inner || target == NoiseTarget::Both) && inner_stddev > 0.0;
  }
  [[nodiscard]] bool outer_enabled() const {
    return (target == NoiseTarget::Outer || target == NoiseTarget::Both) && outer_stddev > 0.0;
  }
  /// decay_factor ^ floor(t / decay_interval); requires a positive interval.
  [[nodiscard]] double decay_scale(int outer_iter) const;
  [[nodiscard]] double effective_inner_stddev(int outer_iter) const {
    return inner_stddev * decay_scale(outer_iter);
  }
  [[nodiscard]] double effective_outer_stddev(int outer_iter) const {
    return outer_stddev * decay_scale(outer_iter);
  }
  /// Copy with decay_interval filled in for a run of `outer_iterations`.
  [[nodiscard]] NoiseSpec resolved(int outer_iterations) const;

  static NoiseSpec none() {
    NoiseSpec n;
    n.target = NoiseTarget::None;
    return n;
  }
};

enum class GradientOrder { First, Second };
enum class OuterOptimizer { Sgd, Adam };

struct TrainConfig {
  double inner_lr = 0.01;
  double outer_lr = 0.001;
  int inner_steps = 1;
  int meta_batch = 4;
  int outer_iterations = 5000;
  GradientOrder order = GradientOrder::Second;
  std::uint64_t seed = 0;
  /// Sgd applies theta - beta * sum(grad); Adam rescales the same summed
  /// meta-gradient per coordinate.
  OuterOptimizer optimizer = OuterOptimizer::Sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  /// Evaluate every eval_interval outer iterations (0: only at the end).
  int eval_interval = 0;
  int eval_tasks = 100;
  std::vector<int> eval_steps = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  /// Write a checkpoint every checkpoint_interval iterations (0: never).
  int checkpoint_interval = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const;
};

/// Meta-training and meta-test task distributions.
class TaskSource {
 public:
  virtual ~TaskSource() = default;
  [[nodiscard]] virtual Task train_task(std::uint64_t seed) const = 0;
  [[nodiscard]] virtual Task test_task(std::uint64_t seed) const = 0;
  [[nodiscard]] virtual nn::Head head() const = 0;
};

/// Non-mutually-exclusive sinusoids: meta-training draws points from one of
/// the fixed per-interval families; meta-test tasks get fresh (A, phase).
class SinusoidSource : public TaskSource {
 public:
  SinusoidSource(tasks::SinusoidConfig cfg, std::uint64_t family_seed, bool augment = false,
                 double augment_range = 2.0);
  [[nodiscard]] Task train_task(std::uint64_t seed) const override;
  [[nodiscard]] Task test_task(std::uint64_t seed) const override;
  [[nodiscard]] nn::Head head() const override { return nn::Head::Regression; }
  [[nodiscard]] const std::vector<tasks::SinusoidFamily>& families() const { return families_; }
  [[nodiscard]] const tasks::SinusoidConfig& config() const { return cfg_; }

 private:
  tasks::SinusoidConfig cfg_;
  std::vector<tasks::SinusoidFamily> families_;
  bool augment_;
  double augment_range_;
};

/// Few-shot classification over disjoint meta-train and meta-test class
/// pools. Meta-test tasks are always intershuffled (novel classes).
class ClassificationSource : public TaskSource {
 public:
  ClassificationSource(tasks::ClassPool train_pool, tasks::ClassPool test_pool,
                       tasks::ClassTaskSpec spec, std::uint64_t partition_seed);
  [[nodiscard]] Task train_task(std::uint64_t seed) const override;
  [[nodiscard]] Task test_task(std::uint64_t seed) const override;
  [[nodiscard]] nn::Head head() const override { return nn::Head::Classification; }
  [[nodiscard]] const tasks::ClassPool& train_pool() const { return train_; }

 private:
  tasks::ClassPool train_;
  tasks::ClassPool test_;
  tasks::ClassTaskSpec spec_;
};

/// Task-specific loss on a split: MSE for regression, cross-entropy otherwise.
ad::Var split_loss(ad::Var output, const tasks::Split& split, nn::Head head);
double split_loss_value(const Matrix& output, const tasks::Split& split, nn::Head head);

/// Adapts `theta` on the tape by `steps` of phi <- phi - alpha*grad + eps.
/// With GradientOrder::Second the inner gradients are differentiable, so the
/// result depends on theta through them. `noise_draw` (may be empty) returns
/// the perturbation for a parameter shape.
using NoiseDraw = std::function<Matrix(Eigen::Index rows, Eigen::Index cols)>;
std::vector<ad::Var> adapt_on_tape(std::span<const ad::Var> theta, const tasks::Split& support,
                                   const nn::ModelSpec& spec, double alpha, int steps,
                                   GradientOrder order, const NoiseDraw& noise_draw);

/// Value-level inner adaptation. Noise is applied only when `noise` targets
/// the inner loop, with standard deviation `effective_stddev`, drawn from
/// `noise_rng`.
ParameterSet inner_adapt(const ParameterSet& theta, const tasks::Split& support,
                         const nn::ModelSpec& spec, double alpha, int steps, const NoiseSpec& noise,
                         double effective_stddev, Rng* noise_rng);

/// d L_query(phi(theta)) / d theta for one task, where phi comes from the
/// (noisy) inner adaptation on the support set.
std::vector<Matrix> task_meta_gradient(const ParameterSet& theta, const Task& task,
                                       const nn::ModelSpec& spec, const TrainConfig& cfg,
                                       const NoiseSpec& noise, int outer_iter,
                                       std::size_t task_index);

/// Elementwise N(mean, stddev) draws for each parameter array.
std::vector<Matrix> draw_noise(const ParameterSet& like, double mean, double stddev, Rng& rng);

/// sum_i task_meta_gradient(task i), accumulated in batch order.
std::vector<Matrix> meta_gradient(const ParameterSet& theta, std::span<const Task> batch,
                                  const nn::ModelSpec& spec, const TrainConfig& cfg,
                                  const NoiseSpec& noise, int outer_iter);

/// theta' = theta - beta * sum_i grad_i (+ outer noise).
ParameterSet meta_step(const ParameterSet& theta, std::span<const Task> batch,
                       const nn::ModelSpec& spec, const TrainConfig& cfg, const NoiseSpec& noise,
                       int outer_iter);

/// Adds the outer-loop perturbation for `outer_iter` when enabled.
void add_outer_noise(std::vector<Matrix>& values, const ParameterSet& like, const TrainConfig& cfg,
                     const NoiseSpec& noise, int outer_iter);

struct AdamState {
  explicit AdamState(const ParameterSet& like);
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  int t = 0;
};

/// Same meta-gradient and outer noise as meta_step, Adam update rule.
ParameterSet adam_meta_step(const ParameterSet& theta, std::span<const Task> batch,
                            const nn::ModelSpec& spec, const TrainConfig& cfg,
                            const NoiseSpec& noise, int outer_iter, AdamState& state);

struct MetricsRecord {
  std::uint64_t seed = 0;
  std::string phase;
  int outer_iter = 0;
  std::string split;
  int adapt_steps = 0;
  double loss_mean = 0.0;
  double loss_std = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
};

struct EvalRow {
  int adapt_steps = 0;
  std::vector<double> losses;      // one per task
  std::vector<double> accuracies;  // empty for regression
  double loss_mean = 0.0;
  double loss_std = 0.0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
};

/// Noise-free adaptation of a copy of theta for each step count; query loss
/// (and accuracy) aggregated over tasks. `adapt_steps` must contain 0.
std::vector<EvalRow> evaluate(const ParameterSet& theta, std::span<const Task> tasks,
                              const nn::ModelSpec& spec, double alpha,
                              std::span<const int> adapt_steps);

/// Seeds of the fixed held-out task samples used for periodic evaluation.
std::vector<Task> eval_tasks(const TaskSource& source, std::uint64_t seed, int count, bool test_split);
/// Seed of task `index` in the meta-batch of outer iteration `outer_iter`.
std::uint64_t batch_task_seed(std::uint64_t seed, int outer_iter, int index);
std::vector<Task> sample_batch(const TaskSource& source, std::uint64_t seed, int outer_iter, int size);

struct TrainResult {
  ParameterSet theta;
  std::vector<MetricsRecord> records;
};

/// Runs cfg.outer_iterations meta-steps from init_params(spec, cfg.seed),
/// evaluating on held-out meta-train and meta-test samples.
TrainResult train(const TrainConfig& cfg, const nn::ModelSpec& spec, const TaskSource& source,
                  const NoiseSpec& noise, const std::string& phase = "train");

/// Evaluation rows converted to metrics records.
std::vector<MetricsRecord> to_records(std::span<const EvalRow> rows, std::uint64_t seed,
                                      const std::string& phase, int outer_iter,
                                      const std::string& split);

double mean_of(std::span<const double> v);
/// Population standard deviation.
double stddev_of(std::span<const double> v);

}  // namespace metaof::maml
