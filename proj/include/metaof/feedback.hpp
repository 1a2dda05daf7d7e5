#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "metaof/maml.hpp"

namespace metaof::feedback {

using nn::ParameterSet;
using nn::Vector;
using tasks::Task;

/// Flattened support-set gradient of one meta-test task at the meta-trained
/// parameters. Captured once; the task itself is not needed afterwards.
struct TestGradient {
  Vector flat;
  std::string source;
  double norm = 0.0;
};

/// Gradient of T_new's support loss at theta_star. Throws NumericError when the
/// gradient is exactly zero (cosine weights would be undefined).
TestGradient record_test_gradient(const ParameterSet& theta_star, const Task& task,
                                  const nn::ModelSpec& spec, std::string source = "T_new");

/// a.b / (|a| |b|), clamped to [-1, 1]. Throws ContractError on length
/// mismatch and NumericError on a zero norm.
double cosine_sim(const Vector& a, const Vector& b);

struct FeedbackConfig {
  /// Clamp weights to [0, 1] instead of keeping negative similarities.
  bool clamp_weights = false;
  int iterations = 500;
  /// Noise during retraining (off by default; the feedback inner loop is plain SGD).
  maml::NoiseSpec noise = maml::NoiseSpec::none();
};

struct FeedbackStep {
  ParameterSet theta;
  std::vector<double> weights;  // h_i per task, batch order
};

/// Weight for task i given its flattened outer gradient.
using WeightFn = std::function<double(std::size_t task_index, const Vector& grad)>;

/// theta' = theta - beta * sum_i h_i * grad_i with h_i = weight(i, grad_i).
/// Zero-norm task gradients get h_i = 0.
FeedbackStep weighted_meta_step(const ParameterSet& theta, std::span<const Task> batch,
                                const nn::ModelSpec& spec, const maml::TrainConfig& cfg,
                                const maml::NoiseSpec& noise, int outer_iter, const WeightFn& weight);

/// One retraining step with h_i = cosine_sim(grad_i, test_grad).
FeedbackStep feedback_meta_step(const ParameterSet& theta, std::span<const Task> batch,
                                const TestGradient& test_grad, const nn::ModelSpec& spec,
                                const maml::TrainConfig& cfg, const FeedbackConfig& fb,
                                int outer_iter);

struct FeedbackResult {
  ParameterSet theta;
  TestGradient test_grad;
  std::vector<std::vector<double>> weights;  // per iteration
};

/// Records the test gradient once, then runs fb.iterations weighted meta-steps
/// over fresh meta-training batches. The batches use the data stream keyed by
/// cfg.seed and the "feedback" tag so they differ from the training batches.
FeedbackResult feedback_retrain(const ParameterSet& theta_star, const Task& new_task,
                                const nn::ModelSpec& spec, const maml::TrainConfig& cfg,
                                const FeedbackConfig& fb, const maml::TaskSource& source);

/// Same, starting from an already recorded gradient.
FeedbackResult feedback_retrain(const ParameterSet& theta_star, const TestGradient& test_grad,
                                const nn::ModelSpec& spec, const maml::TrainConfig& cfg,
                                const FeedbackConfig& fb, const maml::TaskSource& source);

/// Magic, u64 length, UTF-8 source label, float64 norm, little-endian float64 values.
void save_test_gradient(const TestGradient& g, const std::filesystem::path& path);
TestGradient load_test_gradient(const std::filesystem::path& path);

}  // namespace metaof::feedback
