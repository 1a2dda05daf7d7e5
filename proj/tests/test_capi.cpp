#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "metaof/metaof.h"

namespace fs = std::filesystem;

namespace {

const char* kConfig =
    "experiment.kind = sinusoid\n"
    "experiment.seeds = 3\n"
    "experiment.variants = vanilla\n"
    "train.outer_iterations = 5\n"
    "train.eval_tasks = 3\n"
    "train.eval_steps = 0, 1, 2\n"
    "model.hidden = 6\n"
    "feedback.iterations = 2\n"
    "diagnose.steps = 2\n";

}  // namespace

TEST_CASE("config handles and errors") {
  metaof_config* cfg = nullptr;
  CHECK(metaof_config_parse("a = 1\na = 2\n", &cfg) == METAOF_ERR_CONFIG);
  CHECK(std::string(metaof_last_error()).find("duplicate") != std::string::npos);
  CHECK(cfg == nullptr);
  CHECK(metaof_config_load("/nonexistent.cfg", &cfg) == METAOF_ERR_CONFIG);
  CHECK(metaof_config_parse(nullptr, &cfg) == METAOF_ERR_ARGUMENT);

  REQUIRE(metaof_config_parse(kConfig, &cfg) == METAOF_OK);
  CHECK(std::string(metaof_last_error()).empty());
  char hash[65];
  CHECK(metaof_config_hash(cfg, hash, sizeof hash) == METAOF_OK);
  CHECK(std::strlen(hash) == 64);
  char small[8];
  CHECK(metaof_config_hash(cfg, small, sizeof small) == METAOF_ERR_ARGUMENT);
  CHECK(metaof_config_validate(cfg) == METAOF_OK);
  CHECK(metaof_config_set(cfg, "train.order", "third") == METAOF_OK);
  CHECK(metaof_config_validate(cfg) == METAOF_ERR_CONFIG);
  CHECK(std::string(metaof_last_error()).find("train.order") != std::string::npos);
  metaof_config_free(cfg);
  metaof_config_free(nullptr);
  CHECK(std::string(metaof_status_name(METAOF_ERR_IO)) == "i/o error");
}

TEST_CASE("train, save, load, evaluate, feedback and diagnose") {
  const auto dir = fs::temp_directory_path() / "metaof_test_capi";
  fs::remove_all(dir);
  fs::create_directories(dir);

  metaof_config* cfg = nullptr;
  REQUIRE(metaof_config_parse(kConfig, &cfg) == METAOF_OK);
  metaof_params* p = nullptr;
  CHECK(metaof_train_variant(cfg, "bogus", 3, nullptr, &p) == METAOF_ERR_ARGUMENT);
  const auto metrics = (dir / "m.csv").string();
  REQUIRE(metaof_train_variant(cfg, "vanilla", 3, metrics.c_str(), &p) == METAOF_OK);
  CHECK(fs::exists(metrics));
  CHECK(metaof_params_count(p) == 6 + 6 + 6 + 1);

  const auto path = (dir / "p.bin").string();
  REQUIRE(metaof_params_save(p, path.c_str()) == METAOF_OK);
  metaof_params* q = nullptr;
  REQUIRE(metaof_params_load(path.c_str(), &q) == METAOF_OK);
  std::vector<double> a(metaof_params_count(p)), b(metaof_params_count(q));
  CHECK(metaof_params_values(p, a.data(), a.size()) == METAOF_OK);
  CHECK(metaof_params_values(q, b.data(), b.size()) == METAOF_OK);
  CHECK(a == b);
  CHECK(metaof_params_load((dir / "missing.bin").string().c_str(), &q) == METAOF_ERR_IO);

  double loss = -1;
  CHECK(metaof_evaluate(cfg, q, 3, (dir / "e.csv").string().c_str(), &loss) == METAOF_OK);
  CHECK(loss > 0.0);

  double before = 0, after = 0;
  metaof_params* r = nullptr;
  const auto grad = (dir / "g.bin").string();
  CHECK(metaof_feedback(cfg, q, 3, 0, grad.c_str(), &before, &after, &r) == METAOF_OK);
  CHECK(fs::exists(grad));
  CHECK(before > 0.0);
  CHECK(after > 0.0);
  CHECK(metaof_params_count(r) == metaof_params_count(q));

  metaof_gap gap{};
  CHECK(metaof_diagnose(cfg, q, 3, &gap) == METAOF_OK);
  CHECK(gap.steps == 2);

  // Parameters from a different architecture are rejected.
  metaof_config* other = nullptr;
  REQUIRE(metaof_config_parse("model.hidden = 4\n", &other) == METAOF_OK);
  CHECK(metaof_evaluate(other, q, 3, nullptr, &loss) == METAOF_ERR_CONFIG);

  metaof_params_free(r);
  metaof_params_free(q);
  metaof_params_free(p);
  metaof_config_free(other);
  metaof_config_free(cfg);
}

TEST_CASE("full run through the C API") {
  const auto dir = fs::temp_directory_path() / "metaof_test_capi_run";
  fs::remove_all(dir);
  metaof_config* cfg = nullptr;
  REQUIRE(metaof_config_parse(kConfig, &cfg) == METAOF_OK);
  metaof_report* rep = nullptr;
  REQUIRE(metaof_run(cfg, dir.string().c_str(), &rep) == METAOF_OK);
  CHECK(metaof_report_record_count(rep) == 6);  // 2 splits x 3 step counts
  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(std::string(metaof_report_output_dir(rep)) == dir.string());
  CHECK(metaof_report_diagnostic_count(rep) == 1);
  metaof_gap gap{};
  CHECK(metaof_report_diagnostic(rep, 0, &gap) == METAOF_OK);
  CHECK(metaof_report_diagnostic(rep, 5, &gap) == METAOF_ERR_ARGUMENT);
  CHECK(metaof_report_sweep_count(rep) == 0);
  metaof_report_free(rep);
  metaof_config_free(cfg);
}
