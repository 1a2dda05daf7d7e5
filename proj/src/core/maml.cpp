#include "metaof/maml.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "metaof/error.hpp"

namespace metaof::maml {

// ------------------------------------------------------------------ configs

void NoiseSpec::validate() const {
  require(std::isfinite(mean), "noise: mean must be finite");
  require(inner_stddev >= 0.0 && outer_stddev >= 0.0, "noise: stddev must be >= 0");
  require(decay_factor > 0.0 && decay_factor <= 1.0, "noise: decay_factor must be in (0, 1]");
  require(decay_interval >= 0, "noise: decay_interval must be >= 0");
}

double NoiseSpec::decay_scale(int outer_iter) const {
  require(decay_interval > 0, "noise: decay_interval unresolved (call resolved())");
  return std::pow(decay_factor, outer_iter / decay_interval);
}

NoiseSpec NoiseSpec::resolved(int outer_iterations) const {
  NoiseSpec n = *this;
  if (n.decay_interval == 0) n.decay_interval = std::max(1, outer_iterations / 2);
  return n;
}

void TrainConfig::validate() const {
  require(inner_lr >= 0.0 && outer_lr >= 0.0, "train: learning rates must be >= 0");
  require(inner_steps >= 0, "train: inner_steps must be >= 0");
  require(meta_batch > 0, "train: meta_batch must be positive");
  require(outer_iterations >= 0, "train: outer_iterations must be >= 0");
  require(eval_interval >= 0 && checkpoint_interval >= 0, "train: intervals must be >= 0");
  require(eval_tasks > 0, "train: eval_tasks must be positive");
  require(std::find(eval_steps.begin(), eval_steps.end(), 0) != eval_steps.end(),
          "train: eval_steps must include 0");
}

// ------------------------------------------------------------- task sources

SinusoidSource::SinusoidSource(tasks::SinusoidConfig cfg, std::uint64_t family_seed, bool augment,
                               double augment_range)
    : cfg_(cfg),
      families_(tasks::make_sinusoid_families(cfg, family_seed)),
      augment_(augment),
      augment_range_(augment_range) {}

Task SinusoidSource::train_task(std::uint64_t seed) const {
  Rng pick(seed, "sinusoid.pick");
  const auto& fam = families_[pick.index(families_.size())];
  Task t = tasks::sample_sinusoid_points(cfg_, fam, seed);
  if (augment_) t = tasks::meta_augment_task(t, seed, augment_range_);
  return t;
}

Task SinusoidSource::test_task(std::uint64_t seed) const {
  return tasks::sample_sinusoid_task(cfg_, seed);
}

ClassificationSource::ClassificationSource(tasks::ClassPool train_pool, tasks::ClassPool test_pool,
                                           tasks::ClassTaskSpec spec, std::uint64_t partition_seed)
    : train_(std::move(train_pool)), test_(std::move(test_pool)), spec_(spec) {
  if (spec_.mode == tasks::LabelMode::Ordered) {
    train_.partitions = tasks::make_partitions(train_, spec_.k_way, partition_seed);
  }
}

Task ClassificationSource::train_task(std::uint64_t seed) const {
  return tasks::sample_classification_task(train_, spec_, seed);
}

Task ClassificationSource::test_task(std::uint64_t seed) const {
  tasks::ClassTaskSpec s = spec_;
  s.mode = tasks::LabelMode::Intershuffle;
  return tasks::sample_classification_task(test_, s, seed);
}

// -------------------------------------------------------------- primitives

ad::Var split_loss(ad::Var output, const tasks::Split& split, nn::Head head) {
  return head == nn::Head::Regression ? nn::mse_loss(output, split.targets)
                                      : nn::cross_entropy_loss(output, split.labels);
}

double split_loss_value(const Matrix& output, const tasks::Split& split, nn::Head head) {
  return head == nn::Head::Regression ? nn::mse_value(output, split.targets)
                                      : nn::cross_entropy_value(output, split.labels);
}

namespace {

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite ") + what);
}

}  // namespace

std::vector<ad::Var> adapt_on_tape(std::span<const ad::Var> theta, const tasks::Split& support,
                                   const nn::ModelSpec& spec, double alpha, int steps,
                                   GradientOrder order, const NoiseDraw& noise_draw) {
  require(support.size() > 0, "inner adaptation: empty support set");
  require(!theta.empty(), "inner adaptation: no parameters");
  ad::Tape& tape = *theta.front().tape();
  const ad::Var x = tape.constant(support.inputs);
  std::vector<ad::Var> phi(theta.begin(), theta.end());
  for (int s = 0; s < steps; ++s) {
    const ad::Var loss = split_loss(nn::forward(phi, spec, x), support, spec.head);
    check_finite(loss.value()(0, 0), "support loss");
    const auto grads = tape.gradients(loss, phi, order == GradientOrder::Second);
    for (std::size_t k = 0; k < phi.size(); ++k) {
      check_finite(grads[k].value(), "support gradient");
      phi[k] = phi[k] - alpha * grads[k];
      if (noise_draw) phi[k] = phi[k] + tape.constant(noise_draw(phi[k].rows(), phi[k].cols()));
    }
  }
  return phi;
}

ParameterSet inner_adapt(const ParameterSet& theta, const tasks::Split& support,
                         const nn::ModelSpec& spec, double alpha, int steps, const NoiseSpec& noise,
                         double effective_stddev, Rng* noise_rng) {
  NoiseDraw draw;
  if (noise.inner_enabled() && effective_stddev > 0.0) {
    require(noise_rng != nullptr, "inner_adapt: noise enabled without a noise stream");
    draw = [&](Eigen::Index r, Eigen::Index c) {
      Matrix m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = noise_rng->normal(noise.mean, effective_stddev);
      return m;
    };
  }
  ad::Tape tape;
  const auto vars = nn::to_vars(tape, theta);
  const auto phi = adapt_on_tape(vars, support, spec, alpha, steps, GradientOrder::First, draw);
  std::vector<Matrix> values;
  values.reserve(phi.size());
  for (const auto& p : phi) values.push_back(p.value());
  return theta.with_values(std::move(values));
}

std::vector<Matrix> draw_noise(const ParameterSet& like, double mean, double stddev, Rng& rng) {
  std::vector<Matrix> out;
  out.reserve(like.size());
  for (const auto& e : like.entries()) {
    Matrix m(e.value.rows(), e.value.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(mean, stddev);
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<Matrix> task_meta_gradient(const ParameterSet& theta, const Task& task,
                                       const nn::ModelSpec& spec, const TrainConfig& cfg,
                                       const NoiseSpec& noise, int outer_iter,
                                       std::size_t task_index) {
  Rng noise_rng(cfg.seed, "noise.inner", static_cast<std::uint64_t>(outer_iter), task_index);
  NoiseDraw draw;
  if (noise.inner_enabled()) {
    const double sd = noise.effective_inner_stddev(outer_iter);
    draw = [&noise_rng, &noise, sd](Eigen::Index r, Eigen::Index c) {
      Matrix m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = noise_rng.normal(noise.mean, sd);
      return m;
    };
  }

  ad::Tape tape;
  const auto vars = nn::to_vars(tape, theta);
  const auto phi = adapt_on_tape(vars, task.support, spec, cfg.inner_lr, cfg.inner_steps, cfg.order, draw);
  const ad::Var query_loss =
      split_loss(nn::forward(phi, spec, tape.constant(task.query.inputs)), task.query, spec.head);
  check_finite(query_loss.value()(0, 0), "query loss");
  auto grads = tape.backward(query_loss, vars);
  for (const auto& g : grads) check_finite(g, "meta-gradient");
  return grads;
}

std::vector<Matrix> meta_gradient(const ParameterSet& theta, std::span<const Task> batch,
                                  const nn::ModelSpec& spec, const TrainConfig& cfg,
                                  const NoiseSpec& noise, int outer_iter) {
  require(!batch.empty(), "meta_gradient: empty task batch");
  std::vector<Matrix> total;
  try {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto g = task_meta_gradient(theta, batch[i], spec, cfg, noise, outer_iter, i);
      if (total.empty()) {
        total = std::move(g);
      } else {
        for (std::size_t k = 0; k < total.size(); ++k) total[k] += g[k];
      }
    }
  } catch (const NumericError& e) {
    throw NumericError("outer iteration " + std::to_string(outer_iter) + ": " + e.what());
  }
  return total;
}

void add_outer_noise(std::vector<Matrix>& values, const ParameterSet& like, const TrainConfig& cfg,
                     const NoiseSpec& noise, int outer_iter) {
  if (!noise.outer_enabled()) return;
  Rng rng(cfg.seed, "noise.outer", static_cast<std::uint64_t>(outer_iter));
  const auto eps = draw_noise(like, noise.mean, noise.effective_outer_stddev(outer_iter), rng);
  for (std::size_t k = 0; k < values.size(); ++k) values[k] += eps[k];
}

ParameterSet meta_step(const ParameterSet& theta, std::span<const Task> batch,
                       const nn::ModelSpec& spec, const TrainConfig& cfg, const NoiseSpec& noise,
                       int outer_iter) {
  const auto total = meta_gradient(theta, batch, spec, cfg, noise, outer_iter);
  std::vector<Matrix> next;
  next.reserve(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) next.push_back(theta.value(k) - cfg.outer_lr * total[k]);
  add_outer_noise(next, theta, cfg, noise, outer_iter);
  return theta.with_values(std::move(next));
}

AdamState::AdamState(const ParameterSet& like) {
  for (const auto& e : like.entries()) {
    m.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
    v.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
  }
}

ParameterSet adam_meta_step(const ParameterSet& theta, std::span<const Task> batch,
                            const nn::ModelSpec& spec, const TrainConfig& cfg,
                            const NoiseSpec& noise, int outer_iter, AdamState& state) {
  const auto total = meta_gradient(theta, batch, spec, cfg, noise, outer_iter);
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, state.t);
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, state.t);
  std::vector<Matrix> next;
  next.reserve(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) {
    state.m[k] = cfg.adam_beta1 * state.m[k] + (1.0 - cfg.adam_beta1) * total[k];
    state.v[k] = cfg.adam_beta2 * state.v[k] + (1.0 - cfg.adam_beta2) * total[k].cwiseAbs2();
    const Matrix step = (state.m[k] / c1).array() / ((state.v[k] / c2).array().sqrt() + cfg.adam_epsilon);
    next.push_back(theta.value(k) - cfg.outer_lr * step);
  }
  add_outer_noise(next, theta, cfg, noise, outer_iter);
  return theta.with_values(std::move(next));
}

// --------------------------------------------------------------- evaluation

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

std::vector<EvalRow> evaluate(const ParameterSet& theta, std::span<const Task> tasks,
                              const nn::ModelSpec& spec, double alpha,
                              std::span<const int> adapt_steps) {
  require(std::find(adapt_steps.begin(), adapt_steps.end(), 0) != adapt_steps.end(),
          "evaluate: adapt_steps must include 0");
  std::vector<int> steps(adapt_steps.begin(), adapt_steps.end());
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  require(steps.front() >= 0, "evaluate: negative step count");

  std::vector<EvalRow> rows(steps.size());
  for (std::size_t r = 0; r < steps.size(); ++r) rows[r].adapt_steps = steps[r];

  const NoiseSpec quiet = NoiseSpec::none();
  for (const Task& task : tasks) {
    ParameterSet phi = theta;
    int done = 0;
    for (std::size_t r = 0; r < steps.size(); ++r) {
      phi = inner_adapt(phi, task.support, spec, alpha, steps[r] - done, quiet, 0.0, nullptr);
      done = steps[r];
      const Matrix out = nn::predict(phi, spec, task.query.inputs);
      const double loss = split_loss_value(out, task.query, spec.head);
      if (!std::isfinite(loss)) {
        throw NumericError("evaluation: non-finite query loss after " + std::to_string(done) + " steps");
      }
      rows[r].losses.push_back(loss);
      if (spec.head == nn::Head::Classification) {
        rows[r].accuracies.push_back(nn::accuracy(out, task.query.labels));
      }
    }
  }
  for (auto& row : rows) {
    row.loss_mean = mean_of(row.losses);
    row.loss_std = stddev_of(row.losses);
    row.accuracy_mean = mean_of(row.accuracies);
    row.accuracy_std = stddev_of(row.accuracies);
  }
  return rows;
}

std::vector<MetricsRecord> to_records(std::span<const EvalRow> rows, std::uint64_t seed,
                                      const std::string& phase, int outer_iter,
                                      const std::string& split) {
  std::vector<MetricsRecord> out;
  for (const auto& r : rows) {
    out.push_back({seed, phase, outer_iter, split, r.adapt_steps, r.loss_mean, r.loss_std,
                   r.accuracy_mean, r.accuracy_std});
  }
  return out;
}

std::vector<Task> eval_tasks(const TaskSource& source, std::uint64_t seed, int count, bool test_split) {
  std::vector<Task> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto s = derive_seed(seed, test_split ? "data.eval.test" : "data.eval.train",
                               static_cast<std::uint64_t>(i));
    out.push_back(test_split ? source.test_task(s) : source.train_task(s));
  }
  return out;
}

std::uint64_t batch_task_seed(std::uint64_t seed, int outer_iter, int index) {
  return derive_seed(seed, "data.train", static_cast<std::uint64_t>(outer_iter),
                     static_cast<std::uint64_t>(index));
}

std::vector<Task> sample_batch(const TaskSource& source, std::uint64_t seed, int outer_iter, int size) {
  std::vector<Task> batch;
  batch.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) batch.push_back(source.train_task(batch_task_seed(seed, outer_iter, i)));
  return batch;
}

TrainResult train(const TrainConfig& cfg, const nn::ModelSpec& spec, const TaskSource& source,
                  const NoiseSpec& noise_in, const std::string& phase) {
  cfg.validate();
  spec.validate();
  noise_in.validate();
  require(spec.head == source.head(), "train: model head does not match the task source");
  const NoiseSpec noise = noise_in.resolved(cfg.outer_iterations);

  TrainResult result;
  result.theta = nn::init_params(spec, cfg.seed);
  const auto train_eval = eval_tasks(source, cfg.seed, cfg.eval_tasks, false);
  const auto test_eval = eval_tasks(source, cfg.seed, cfg.eval_tasks, true);

  auto record = [&](int iter) {
    for (bool test : {false, true}) {
      const auto rows = evaluate(result.theta, test ? test_eval : train_eval, spec, cfg.inner_lr, cfg.eval_steps);
      auto recs = to_records(rows, cfg.seed, phase, iter, test ? "meta_test" : "meta_train");
      result.records.insert(result.records.end(), recs.begin(), recs.end());
    }
  };

  AdamState adam(result.theta);
  for (int t = 0; t < cfg.outer_iterations; ++t) {
    const auto batch = sample_batch(source, cfg.seed, t, cfg.meta_batch);
    result.theta = cfg.optimizer == OuterOptimizer::Adam
                       ? adam_meta_step(result.theta, batch, spec, cfg, noise, t, adam)
                       : meta_step(result.theta, batch, spec, cfg, noise, t);
    const int done = t + 1;
    if (cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done != cfg.outer_iterations) record(done);
    if (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && !cfg.checkpoint_dir.empty()) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      nn::save_params(result.theta, cfg.checkpoint_dir / (phase + "_iter" + std::to_string(done) + ".bin"));
    }
  }
  record(cfg.outer_iterations);
  return result;
}

}  // namespace metaof::maml
