#include "metaof/feedback.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "metaof/binio.hpp"
#include "metaof/error.hpp"

namespace metaof::feedback {

namespace {

constexpr char kGradMagic[9] = "MOGRAD01";

Vector flatten(const std::vector<nn::Matrix>& parts) {
  Eigen::Index n = 0;
  for (const auto& p : parts) n += p.size();
  Vector flat(n);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    flat.segment(at, p.size()) = Eigen::Map<const Vector>(p.data(), p.size());
    at += p.size();
  }
  return flat;
}

}  // namespace

TestGradient record_test_gradient(const ParameterSet& theta_star, const Task& task,
                                  const nn::ModelSpec& spec, std::string source) {
  require(task.support.size() > 0, "record_test_gradient: empty support set");
  ad::Tape tape;
  const auto vars = nn::to_vars(tape, theta_star);
  const ad::Var loss =
      maml::split_loss(nn::forward(vars, spec, tape.constant(task.support.inputs)), task.support, spec.head);
  TestGradient g;
  g.flat = flatten(tape.backward(loss, vars));
  g.norm = g.flat.norm();
  g.source = std::move(source);
  if (!std::isfinite(g.norm)) throw NumericError("record_test_gradient: non-finite gradient");
  if (g.norm == 0.0) {
    throw NumericError("record_test_gradient: zero gradient, parameters are already optimal for the task");
  }
  return g;
}

double cosine_sim(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), "cosine_sim: vector lengths differ");
  const double aa = a.squaredNorm();
  const double bb = b.squaredNorm();
  if (aa == 0.0 || bb == 0.0) throw NumericError("cosine_sim: zero-norm vector");
  // sqrt(aa * bb) keeps cosine_sim(g, g) exactly 1.
  const double c = a.dot(b) / std::sqrt(aa * bb);
  return std::clamp(c, -1.0, 1.0);
}

FeedbackStep weighted_meta_step(const ParameterSet& theta, std::span<const Task> batch,
                                const nn::ModelSpec& spec, const maml::TrainConfig& cfg,
                                const maml::NoiseSpec& noise, int outer_iter, const WeightFn& weight) {
  require(!batch.empty(), "feedback step: empty task batch");
  FeedbackStep step;
  std::vector<nn::Matrix> total;
  try {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto g = maml::task_meta_gradient(theta, batch[i], spec, cfg, noise, outer_iter, i);
      const Vector flat = flatten(g);
      const double h = flat.squaredNorm() == 0.0 ? 0.0 : weight(i, flat);
      step.weights.push_back(h);
      for (auto& part : g) part *= h;
      if (total.empty()) {
        total = std::move(g);
      } else {
        for (std::size_t k = 0; k < total.size(); ++k) total[k] += g[k];
      }
    }
  } catch (const NumericError& e) {
    throw NumericError("feedback iteration " + std::to_string(outer_iter) + ": " + e.what());
  }
  std::vector<nn::Matrix> next;
  next.reserve(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) next.push_back(theta.value(k) - cfg.outer_lr * total[k]);
  maml::add_outer_noise(next, theta, cfg, noise, outer_iter);
  step.theta = theta.with_values(std::move(next));
  return step;
}

FeedbackStep feedback_meta_step(const ParameterSet& theta, std::span<const Task> batch,
                                const TestGradient& test_grad, const nn::ModelSpec& spec,
                                const maml::TrainConfig& cfg, const FeedbackConfig& fb,
                                int outer_iter) {
  require(static_cast<std::size_t>(test_grad.flat.size()) == theta.parameter_count(),
          "feedback step: test gradient layout does not match the parameters");
  const auto noise = fb.noise.resolved(std::max(1, fb.iterations));
  return weighted_meta_step(theta, batch, spec, cfg, noise, outer_iter,
                            [&](std::size_t, const Vector& g) {
                              const double h = cosine_sim(g, test_grad.flat);
                              return fb.clamp_weights ? std::clamp(h, 0.0, 1.0) : h;
                            });
}

FeedbackResult feedback_retrain(const ParameterSet& theta_star, const TestGradient& test_grad,
                                const nn::ModelSpec& spec, const maml::TrainConfig& cfg,
                                const FeedbackConfig& fb, const maml::TaskSource& source) {
  require(fb.iterations >= 0, "feedback: iterations must be >= 0");
  FeedbackResult result{theta_star, test_grad, {}};
  for (int it = 0; it < fb.iterations; ++it) {
    std::vector<Task> batch;
    for (int i = 0; i < cfg.meta_batch; ++i) {
      batch.push_back(source.train_task(derive_seed(cfg.seed, "data.feedback",
                                                    static_cast<std::uint64_t>(it),
                                                    static_cast<std::uint64_t>(i))));
    }
    auto step = feedback_meta_step(result.theta, batch, test_grad, spec, cfg, fb, it);
    result.theta = std::move(step.theta);
    result.weights.push_back(std::move(step.weights));
  }
  return result;
}

FeedbackResult feedback_retrain(const ParameterSet& theta_star, const Task& new_task,
                                const nn::ModelSpec& spec, const maml::TrainConfig& cfg,
                                const FeedbackConfig& fb, const maml::TaskSource& source) {
  return feedback_retrain(theta_star, record_test_gradient(theta_star, new_task, spec), spec, cfg,
                          fb, source);
}

void save_test_gradient(const TestGradient& g, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  binio::put_magic(out, kGradMagic);
  binio::put_u64(out, static_cast<std::uint64_t>(g.flat.size()));
  binio::put_string(out, g.source);
  binio::put_f64(out, g.norm);
  for (Eigen::Index i = 0; i < g.flat.size(); ++i) binio::put_f64(out, g.flat(i));
  if (!out) throw IoError("write failed for " + path.string());
}

TestGradient load_test_gradient(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  binio::expect_magic(in, kGradMagic);
  const auto n = binio::get_u64(in);
  if (n > (1ULL << 32)) throw IoError("implausible gradient length in " + path.string());
  TestGradient g;
  g.source = binio::get_string(in);
  g.norm = binio::get_f64(in);
  g.flat.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < g.flat.size(); ++i) g.flat(i) = binio::get_f64(in);
  return g;
}

}  // namespace metaof::feedback
