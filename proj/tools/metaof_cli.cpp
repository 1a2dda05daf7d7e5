// metaof command-line front end. Talks to the library through the C API only.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "metaof/metaof.h"

namespace {

// Exit codes: 0 ok, 1 internal, 2 usage/config, 3 i/o, 4 numeric.
int exit_code(metaof_status s) {
  switch (s) {
    case METAOF_OK: return 0;
    case METAOF_ERR_ARGUMENT:
    case METAOF_ERR_CONFIG: return 2;
    case METAOF_ERR_IO: return 3;
    case METAOF_ERR_NUMERIC: return 4;
    default: return 1;
  }
}

struct Failure {
  int code;
};

void check(metaof_status s) {
  if (s == METAOF_OK) return;
  std::fprintf(stderr, "metaof: %s: %s\n", metaof_status_name(s), metaof_last_error());
  throw Failure{exit_code(s)};
}

struct Handles {
  metaof_config* cfg = nullptr;
  metaof_params* params = nullptr;
  metaof_report* report = nullptr;
  ~Handles() {
    metaof_report_free(report);
    metaof_params_free(params);
    metaof_config_free(cfg);
  }
};

struct Options {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string variant = "vanilla";
  long long seed = -1;
  int target = 0;
  std::vector<std::string> overrides;
};

void load_config(const Options& o, Handles& h) {
  check(metaof_config_load(o.config.c_str(), &h.cfg));
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "metaof: --set expects key=value, got '%s'\n", kv.c_str());
      throw Failure{2};
    }
    check(metaof_config_set(h.cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
  }
  if (o.seed >= 0) check(metaof_config_set(h.cfg, "experiment.seeds", std::to_string(o.seed).c_str()));
  check(metaof_config_validate(h.cfg));
}

std::uint64_t seed_of(const Options& o) { return o.seed >= 0 ? static_cast<std::uint64_t>(o.seed) : 1; }

std::string out_dir(const Options& o, const char* name) {
  if (!o.out.empty()) return o.out;
  const char* root = std::getenv("METAOF_OUTPUT_ROOT");
  return (std::filesystem::path(root != nullptr && *root != '\0' ? root : "runs") / name).string();
}

void print_report(const metaof_report* r) {
  std::printf("wrote %zu metric rows to %s (%.1f s)\n", metaof_report_record_count(r), metaof_report_output_dir(r),
              metaof_report_wall_seconds(r));
  for (size_t i = 0; i < metaof_report_sweep_count(r); ++i) {
    double sigma = 0, mean = 0, sd = 0;
    check(metaof_report_sweep(r, i, &sigma, &mean, &sd));
    std::printf("sigma %-8g accuracy %.4f +- %.4f\n", sigma, mean, sd);
  }
}

void print_gap(const metaof_gap& g) {
  std::printf("steps %d\n", g.steps);
  std::printf("meta_train  zero-shot %.6g  adapted %.6g  ratio %.4f\n", g.train_zero_shot, g.train_adapted,
              g.train_ratio);
  std::printf("meta_test   zero-shot %.6g  adapted %.6g  ratio %.4f\n", g.test_zero_shot, g.test_adapted,
              g.test_ratio);
  std::printf("verdict: %s\n", g.memorized ? "memorization" : "adapts");
}

int cmd_train(const Options& o) {
  Handles h;
  load_config(o, h);
  if (o.checkpoint.empty()) {
    const std::string dir = o.out.empty() ? std::string() : o.out;
    check(metaof_run(h.cfg, dir.empty() ? nullptr : dir.c_str(), &h.report));
    print_report(h.report);
    return 0;
  }
  // Single variant and seed; final parameters go to the checkpoint path.
  const auto dir = out_dir(o, "train");
  std::filesystem::create_directories(dir);
  const auto metrics = (std::filesystem::path(dir) / "metrics.csv").string();
  check(metaof_train_variant(h.cfg, o.variant.c_str(), seed_of(o), metrics.c_str(), &h.params));
  check(metaof_params_save(h.params, o.checkpoint.c_str()));
  std::printf("saved %zu parameters to %s; metrics in %s\n", metaof_params_count(h.params), o.checkpoint.c_str(),
              metrics.c_str());
  return 0;
}

int cmd_evaluate(const Options& o) {
  Handles h;
  load_config(o, h);
  check(metaof_params_load(o.checkpoint.c_str(), &h.params));
  const auto dir = out_dir(o, "evaluate");
  std::filesystem::create_directories(dir);
  const auto metrics = (std::filesystem::path(dir) / "metrics.csv").string();
  double loss = 0;
  check(metaof_evaluate(h.cfg, h.params, seed_of(o), metrics.c_str(), &loss));
  std::printf("meta_test loss %.6g; metrics in %s\n", loss, metrics.c_str());
  return 0;
}

int cmd_feedback(const Options& o) {
  Handles h;
  load_config(o, h);
  check(metaof_params_load(o.checkpoint.c_str(), &h.params));
  const auto dir = std::filesystem::path(out_dir(o, "feedback"));
  std::filesystem::create_directories(dir);
  const auto grad = (dir / "test_gradient.bin").string();
  const auto theta = (dir / "theta_feedback.bin").string();
  double before = 0, after = 0;
  metaof_params* retrained = nullptr;
  check(metaof_feedback(h.cfg, h.params, seed_of(o), o.target, grad.c_str(), &before, &after, &retrained));
  const auto saved = metaof_params_save(retrained, theta.c_str());
  metaof_params_free(retrained);
  check(saved);
  std::printf("target %d query loss: before %.6g  after %.6g\n", o.target, before, after);
  std::printf("wrote %s and %s\n", grad.c_str(), theta.c_str());
  return 0;
}

int cmd_sweep(const Options& o) {
  Handles h;
  load_config(o, h);
  check(metaof_config_set(h.cfg, "experiment.kind", "noise_sweep"));
  check(metaof_run(h.cfg, o.out.empty() ? nullptr : o.out.c_str(), &h.report));
  print_report(h.report);
  return 0;
}

int cmd_diagnose(const Options& o) {
  Handles h;
  load_config(o, h);
  if (!o.checkpoint.empty()) {
    check(metaof_params_load(o.checkpoint.c_str(), &h.params));
  } else {
    check(metaof_train_variant(h.cfg, o.variant.c_str(), seed_of(o), nullptr, &h.params));
  }
  metaof_gap gap{};
  check(metaof_diagnose(h.cfg, h.params, seed_of(o), &gap));
  print_gap(gap);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metaof: MAML training with noise, meta-augmentation and feedback retraining"};
  app.set_version_flag("--version", metaof_version());
  app.require_subcommand(1);

  Options o;
  auto add_common = [&](CLI::App* sub, bool needs_checkpoint) {
    sub->add_option("-c,--config", o.config, "experiment config file")->required()->check(CLI::ExistingFile);
    sub->add_option("-s,--seed", o.seed, "run this seed only")->check(CLI::NonNegativeNumber);
    sub->add_option("-o,--out", o.out, "output directory");
    sub->add_option("--set", o.overrides, "override a config key (key=value)");
    auto* ck = sub->add_option("--checkpoint", o.checkpoint, "parameter file");
    if (needs_checkpoint) ck->required()->check(CLI::ExistingFile);
  };

  auto* train = app.add_subcommand("train", "run an experiment, or train one variant with --checkpoint");
  add_common(train, false);
  train->add_option("--variant", o.variant, "variant trained when --checkpoint is given")
      ->check(CLI::IsMember({"vanilla", "noise", "meta_augmentation"}));

  auto* evaluate = app.add_subcommand("evaluate", "evaluate saved parameters on held-out tasks");
  add_common(evaluate, true);

  auto* fb = app.add_subcommand("feedback", "retrain saved parameters towards one meta-test task");
  add_common(fb, true);
  fb->add_option("--target", o.target, "index of the meta-test target task")->check(CLI::NonNegativeNumber);

  auto* sweep = app.add_subcommand("sweep", "noise sweep over sigma");
  add_common(sweep, false);

  auto* diagnose = app.add_subcommand("diagnose", "memorization diagnostic");
  add_common(diagnose, false);
  diagnose->add_option("--variant", o.variant, "variant to train when no checkpoint is given")
      ->check(CLI::IsMember({"vanilla", "noise", "meta_augmentation"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(o);
    if (*evaluate) return cmd_evaluate(o);
    if (*fb) return cmd_feedback(o);
    if (*sweep) return cmd_sweep(o);
    if (*diagnose) return cmd_diagnose(o);
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "metaof: %s\n", e.what());
    return 1;
  }
  return 1;
}
