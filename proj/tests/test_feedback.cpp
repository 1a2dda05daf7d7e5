#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "metaof/error.hpp"
#include "metaof/feedback.hpp"

using namespace metaof;
using namespace metaof::feedback;

namespace {

const nn::ModelSpec kSpec{1, {8, 8}, 1, nn::Head::Regression};

maml::TrainConfig small_config() {
  maml::TrainConfig cfg;
  cfg.meta_batch = 3;
  cfg.seed = 2;
  cfg.outer_lr = 0.01;
  return cfg;
}

Vector random_vector(Eigen::Index n, std::mt19937_64& gen) {
  std::normal_distribution<double> d;
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = d(gen);
  return v;
}

}  // namespace

TEST_CASE("cosine similarity properties") {
  std::mt19937_64 gen(31);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector a = random_vector(17, gen);
    const Vector b = random_vector(17, gen);
    const double h = cosine_sim(a, b);
    CHECK(h >= -1.0);
    CHECK(h <= 1.0);
    CHECK(cosine_sim(a, a) == 1.0);
    CHECK(cosine_sim(a, -a) == -1.0);
    CHECK(std::abs(cosine_sim(3.7 * a, 0.01 * b) - h) <= 1e-12);
    CHECK(std::abs(cosine_sim(b, a) - h) <= 1e-15);
  }
  CHECK_THROWS_AS(cosine_sim(Vector::Ones(3), Vector::Ones(4)), ContractError);
  CHECK_THROWS_AS(cosine_sim(Vector::Zero(3), Vector::Ones(3)), NumericError);
}

TEST_CASE("all-ones weights reproduce the vanilla meta-step") {
  maml::SinusoidSource source(tasks::SinusoidConfig{}, 4);
  const auto cfg = small_config();
  const auto theta = nn::init_params(kSpec, 3);
  const auto batch = maml::sample_batch(source, cfg.seed, 0, cfg.meta_batch);
  const auto step = weighted_meta_step(theta, batch, kSpec, cfg, maml::NoiseSpec::none(), 0,
                                       [](std::size_t, const Vector&) { return 1.0; });
  const auto vanilla = maml::meta_step(theta, batch, kSpec, cfg, maml::NoiseSpec::none(), 0);
  CHECK(step.theta == vanilla);
  CHECK(step.weights == std::vector<double>(3, 1.0));
}

TEST_CASE("zero weights leave theta unchanged") {
  maml::SinusoidSource source(tasks::SinusoidConfig{}, 4);
  const auto cfg = small_config();
  const auto theta = nn::init_params(kSpec, 3);
  const auto batch = maml::sample_batch(source, cfg.seed, 0, 2);
  const auto step = weighted_meta_step(theta, batch, kSpec, cfg, maml::NoiseSpec::none(), 0,
                                       [](std::size_t, const Vector&) { return 0.0; });
  CHECK(step.theta == theta);
}

TEST_CASE("feedback weights are cosines against the test gradient") {
  maml::SinusoidSource source(tasks::SinusoidConfig{}, 4);
  const auto cfg = small_config();
  const auto theta = nn::init_params(kSpec, 3);
  const auto target = source.test_task(99);
  const auto tg = record_test_gradient(theta, target, kSpec);
  CHECK(tg.norm == doctest::Approx(tg.flat.norm()));
  CHECK(tg.source == "T_new");

  const auto batch = maml::sample_batch(source, cfg.seed, 0, cfg.meta_batch);
  FeedbackConfig fb;
  const auto step = feedback_meta_step(theta, batch, tg, kSpec, cfg, fb, 0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto g = maml::task_meta_gradient(theta, batch[i], kSpec, cfg, maml::NoiseSpec::none(), 0, i);
    const auto flat = theta.with_values(g).flatten();
    CHECK(std::abs(step.weights[i] - cosine_sim(flat, tg.flat)) <= 1e-15);
    CHECK(step.weights[i] >= -1.0);
    CHECK(step.weights[i] <= 1.0);
  }

  // Scaling the stored gradient does not change the weights.
  TestGradient scaled = tg;
  scaled.flat *= 1e6;
  scaled.norm *= 1e6;
  const auto step2 = feedback_meta_step(theta, batch, scaled, kSpec, cfg, fb, 0);
  for (std::size_t i = 0; i < batch.size(); ++i) CHECK(std::abs(step2.weights[i] - step.weights[i]) <= 1e-12);

  fb.clamp_weights = true;
  const auto step3 = feedback_meta_step(theta, batch, tg, kSpec, cfg, fb, 0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(step3.weights[i] == std::clamp(step.weights[i], 0.0, 1.0));
  }
}

TEST_CASE("feedback step with the target's own gradient direction weights it fully") {
  maml::SinusoidSource source(tasks::SinusoidConfig{}, 4);
  auto cfg = small_config();
  cfg.inner_steps = 0;  // meta-gradient equals the plain query gradient
  const auto theta = nn::init_params(kSpec, 3);
  auto task = source.train_task(5);
  task.query = task.support;
  const auto tg = record_test_gradient(theta, task, kSpec);
  const std::vector<tasks::Task> batch = {task};
  const auto step = feedback_meta_step(theta, batch, tg, kSpec, cfg, FeedbackConfig{}, 0);
  CHECK(step.weights[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("zero gradients are rejected or weighted zero") {
  const nn::ModelSpec spec{1, {4}, 1, nn::Head::Regression};
  auto theta = nn::init_params(spec, 1);
  // All-zero parameters: relu kills every path except the output bias.
  theta = theta.unflatten(Vector::Zero(static_cast<Eigen::Index>(theta.parameter_count())));
  tasks::Task task = tasks::sample_sinusoid_task(tasks::SinusoidConfig{}, 1);
  task.support.targets.setZero();
  task.query.targets.setZero();
  CHECK_THROWS_AS(record_test_gradient(theta, task, spec), NumericError);

  auto cfg = small_config();
  cfg.inner_steps = 0;
  TestGradient tg{Vector::Ones(static_cast<Eigen::Index>(theta.parameter_count())), "x", 1.0};
  tg.norm = tg.flat.norm();
  const std::vector<tasks::Task> batch = {task};
  const auto step = feedback_meta_step(theta, batch, tg, spec, cfg, FeedbackConfig{}, 0);
  CHECK(step.weights[0] == 0.0);
  CHECK(step.theta == theta);
}

TEST_CASE("feedback retraining is deterministic and uses its own data stream") {
  maml::SinusoidSource source(tasks::SinusoidConfig{}, 4);
  const auto cfg = small_config();
  const auto theta = nn::init_params(kSpec, 3);
  const auto target = source.test_task(42);
  FeedbackConfig fb;
  fb.iterations = 5;
  const auto a = feedback_retrain(theta, target, kSpec, cfg, fb, source);
  const auto b = feedback_retrain(theta, a.test_grad, kSpec, cfg, fb, source);
  CHECK(a.theta == b.theta);
  CHECK(a.weights.size() == 5);
  CHECK_FALSE(a.theta == theta);
  fb.iterations = 0;
  CHECK(feedback_retrain(theta, target, kSpec, cfg, fb, source).theta == theta);
}

TEST_CASE("test gradient file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "metaof_test_grad.bin";
  std::mt19937_64 gen(3);
  TestGradient g{random_vector(11, gen), "task-7", 0.0};
  g.norm = g.flat.norm();
  save_test_gradient(g, path);
  const auto back = load_test_gradient(path);
  CHECK(back.flat == g.flat);
  CHECK(back.source == "task-7");
  CHECK(back.norm == g.norm);
  std::filesystem::resize_file(path, 20);
  CHECK_THROWS_AS(load_test_gradient(path), IoError);
}
