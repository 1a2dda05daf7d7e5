#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "metaof/error.hpp"
#include "metaof/harness.hpp"

using namespace metaof;
using namespace metaof::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "metaof_test_harness" / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig small(const std::string& extra, const fs::path& out) {
  std::string text =
      "experiment.seeds = 1, 2\n"
      "train.outer_iterations = 8\n"
      "train.eval_tasks = 4\n"
      "train.eval_steps = 0, 1, 3\n"
      "train.meta_batch = 2\n"
      "model.hidden = 8, 8\n"
      "feedback.iterations = 3\n"
      "feedback.test_tasks = 2\n"
      "diagnose.steps = 3\n";
  text += extra;
  text += "experiment.output_dir = " + out.string() + "\n";
  return ExperimentConfig::from_config(config::Config::parse(text));
}

}  // namespace

TEST_CASE("sinusoid experiment writes consistent outputs") {
  const auto out = scratch_dir("sin");
  const auto cfg = small("experiment.kind = sinusoid\nnoise.inner_stddev = 0.01\n", out);
  const auto report = run_experiment(cfg);
  for (const char* f : {"metrics.csv", "aggregate.csv", "report.txt", "diagnostics.csv"}) {
    CHECK(fs::exists(out / f));
  }

  const auto records = read_metrics_csv(out / "metrics.csv");
  REQUIRE(records.size() == report.records.size());
  std::map<std::string, int> phases;
  for (const auto& r : records) {
    ++phases[r.phase];
    CHECK(std::isfinite(r.loss_mean));
  }
  CHECK(phases.count("vanilla"));
  CHECK(phases.count("noise"));
  CHECK(phases.count("meta_augmentation"));
  CHECK(phases["feedback_before"] == 6);  // 2 seeds x 3 step counts
  CHECK(phases["feedback"] == 6);

  // aggregate rows are arithmetic means of per-seed rows.
  for (const auto& a : report.aggregate) {
    double sum = 0;
    int n = 0;
    for (const auto& r : records) {
      if (r.phase == a.phase && r.outer_iter == a.outer_iter && r.split == a.split && r.adapt_steps == a.adapt_steps) {
        sum += r.loss_mean;
        ++n;
      }
    }
    CHECK(n == a.seeds);
    CHECK(std::abs(sum / n - a.loss_mean) <= 1e-12);
  }

  const std::string text = slurp(out / "report.txt");
  CHECK(text.find("config_sha256: " + cfg.source.hash()) != std::string::npos);
  CHECK(report.diagnostics.size() == 6);  // 2 seeds x 3 training variants
}

TEST_CASE("re-running a config gives byte-identical metrics, with or without threads") {
  const auto a = scratch_dir("det_a");
  const auto b = scratch_dir("det_b");
  (void)run_experiment(small("experiment.kind = sinusoid\nexperiment.variants = vanilla, noise\n", a));
  (void)run_experiment(
      small("experiment.kind = sinusoid\nexperiment.variants = vanilla, noise\nexperiment.threads = 2\n", b));
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "aggregate.csv") == slurp(b / "aggregate.csv"));
}

TEST_CASE("classification experiment reports accuracy") {
  const auto out = scratch_dir("cls");
  const auto report = run_experiment(small("experiment.kind = classification\n", out));
  bool any = false;
  for (const auto& r : report.records) {
    CHECK(r.accuracy_mean >= 0.0);
    CHECK(r.accuracy_mean <= 1.0);
    any = any || r.accuracy_mean > 0.0;
  }
  CHECK(any);
}

TEST_CASE("noise sweep: one row per sigma; sigma 0 is the vanilla baseline") {
  const auto out = scratch_dir("sweep");
  auto cfg = small("experiment.kind = noise_sweep\nsweep.sigmas = 0.1, 0, 0.001\n", out);
  const auto report = run_experiment(cfg);
  REQUIRE(report.sweep.size() == 3);
  CHECK(report.sweep[1].sigma == 0.0);
  CHECK(fs::exists(out / "sweep.csv"));

  // sigma = 0 reproduces a vanilla training run.
  auto vcfg = small("experiment.kind = classification\nexperiment.variants = vanilla\n", scratch_dir("sweep_v"));
  const auto v = run_experiment(vcfg);
  std::vector<double> acc;
  for (const auto& r : v.records) {
    if (r.outer_iter == 8 && r.split == "meta_test" && r.adapt_steps == 3) acc.push_back(r.accuracy_mean);
  }
  CHECK(maml::mean_of(acc) == report.sweep[1].accuracy_mean);

  std::ifstream in(out / "sweep.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "sigma,accuracy_mean,accuracy_std");
}

TEST_CASE("noise sweep perturbs the configured loop") {
  auto cfg = small("experiment.kind = noise_sweep\nnoise.target = outer\n", scratch_dir("sweep_outer"));
  const std::vector<double> sigma = {0.05};
  const auto row = noise_sweep(cfg, sigma).front();

  auto ncfg = small("experiment.kind = classification\nexperiment.variants = noise\nnoise.target = outer\n"
                    "noise.outer_stddev = 0.05\n",
                    scratch_dir("sweep_outer_n"));
  const auto n = run_experiment(ncfg);
  std::vector<double> acc;
  for (const auto& r : n.records) {
    if (r.outer_iter == 8 && r.split == "meta_test" && r.adapt_steps == 3) acc.push_back(r.accuracy_mean);
  }
  CHECK(maml::mean_of(acc) == row.accuracy_mean);
}

TEST_CASE("memorization gap of an untrained model") {
  const auto cfg = small("experiment.kind = sinusoid\n", scratch_dir("gap"));
  const auto source = cfg.make_source(1);
  const auto theta = nn::init_params(cfg.model_spec(), 1);
  const auto tr = maml::eval_tasks(*source, 1, 20, false);
  const auto te = maml::eval_tasks(*source, 1, 20, true);
  const auto gap = memorization_gap(theta, cfg.model_spec(), tr, te, 0.01, cfg.diagnose);
  CHECK_FALSE(gap.memorized);
  CHECK(gap.train.zero_shot_loss > 0.0);
  CHECK(gap.train.ratio == doctest::Approx((gap.train.zero_shot_loss - gap.train.adapted_loss) /
                                           gap.train.zero_shot_loss));
}

TEST_CASE("verdict thresholds") {
  // A model that ignores the support set on train tasks but fails on test tasks.
  GapThresholds th;
  th.steps = 3;
  const auto cfg = small("experiment.kind = sinusoid\n", scratch_dir("gap2"));
  const auto source = cfg.make_source(1);
  const auto theta = nn::init_params(cfg.model_spec(), 1);
  const auto tr = maml::eval_tasks(*source, 1, 5, false);
  // alpha = 0: no adaptation at all, identical tasks on both sides.
  auto g = memorization_gap(theta, cfg.model_spec(), tr, tr, 0.0, th);
  CHECK(g.train.ratio == 0.0);
  CHECK_FALSE(g.memorized);  // test loss is not worse than train loss
}

TEST_CASE("default output directory honours the environment") {
  ::setenv("METAOF_OUTPUT_ROOT", "/tmp/metaof_root", 1);
  CHECK(default_output_dir("x") == fs::path("/tmp/metaof_root/x"));
  ::unsetenv("METAOF_OUTPUT_ROOT");
  CHECK(default_output_dir("x") == fs::path("runs/x"));
}

TEST_CASE("malformed metrics files are rejected") {
  const auto dir = scratch_dir("csv");
  fs::create_directories(dir);
  {
    std::ofstream(dir / "a.csv") << "not,a,metrics,file\n";
  }
  CHECK_THROWS_AS(read_metrics_csv(dir / "a.csv"), IoError);
  CHECK_THROWS_AS(read_metrics_csv(dir / "missing.csv"), IoError);
}
