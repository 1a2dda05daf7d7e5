#include "metaof/metaof.h"

#include <algorithm>
#include <cstring>
#include <exception>
#include <string>

#include "metaof/error.hpp"
#include "metaof/harness.hpp"

struct metaof_config {
  metaof::config::Config cfg;
};

struct metaof_params {
  metaof::nn::ParameterSet params;
};

struct metaof_report {
  metaof::harness::RunReport report;
  std::string output_dir;
};

namespace {

using namespace metaof;

thread_local std::string g_last_error;

metaof_status fail(metaof_status status, const char* what) {
  g_last_error = what;
  return status;
}

// Maps library exceptions onto status codes.
template <class F>
metaof_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return METAOF_OK;
  } catch (const ConfigError& e) {
    return fail(METAOF_ERR_CONFIG, e.what());
  } catch (const IoError& e) {
    return fail(METAOF_ERR_IO, e.what());
  } catch (const NumericError& e) {
    return fail(METAOF_ERR_NUMERIC, e.what());
  } catch (const ContractError& e) {
    return fail(METAOF_ERR_ARGUMENT, e.what());
  } catch (const std::exception& e) {
    return fail(METAOF_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(METAOF_ERR_INTERNAL, "unknown error");
  }
}

void need(const void* p, const char* name) {
  if (p == nullptr) throw ContractError(std::string(name) + " must not be null");
}

int largest_step(const harness::ExperimentConfig& e) {
  return *std::max_element(e.train.eval_steps.begin(), e.train.eval_steps.end());
}

double loss_at(const std::vector<maml::EvalRow>& rows, int steps) {
  for (const auto& r : rows) {
    if (r.adapt_steps == steps) return r.loss_mean;
  }
  throw ContractError("no evaluation row for the requested step count");
}

void check_layout(const harness::ExperimentConfig& e, const nn::ParameterSet& p) {
  if (!p.same_layout(nn::init_params(e.model_spec(), 0))) {
    throw ConfigError("parameters do not match the configured model");
  }
}

}  // namespace

extern "C" {

const char* metaof_version(void) { return "1.0.0"; }

const char* metaof_last_error(void) { return g_last_error.c_str(); }

const char* metaof_status_name(metaof_status status) {
  switch (status) {
    case METAOF_OK: return "ok";
    case METAOF_ERR_ARGUMENT: return "invalid argument";
    case METAOF_ERR_CONFIG: return "config error";
    case METAOF_ERR_IO: return "i/o error";
    case METAOF_ERR_NUMERIC: return "numeric error";
    case METAOF_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

metaof_status metaof_config_load(const char* path, metaof_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new metaof_config{config::Config::load(path)};
  });
}

metaof_status metaof_config_parse(const char* text, metaof_config** out) {
  return guarded([&] {
    need(text, "text");
    need(out, "out");
    *out = new metaof_config{config::Config::parse(text)};
  });
}

metaof_status metaof_config_set(metaof_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    cfg->cfg.set(key, value);
  });
}

metaof_status metaof_config_validate(const metaof_config* cfg) {
  return guarded([&] {
    need(cfg, "cfg");
    (void)harness::ExperimentConfig::from_config(cfg->cfg);
  });
}

metaof_status metaof_config_hash(const metaof_config* cfg, char* buf, size_t size) {
  return guarded([&] {
    need(cfg, "cfg");
    need(buf, "buf");
    const std::string h = cfg->cfg.hash();
    if (size < h.size() + 1) throw ContractError("hash buffer needs 65 bytes");
    std::memcpy(buf, h.c_str(), h.size() + 1);
  });
}

void metaof_config_free(metaof_config* cfg) { delete cfg; }

metaof_status metaof_params_load(const char* path, metaof_params** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new metaof_params{nn::load_params(path)};
  });
}

metaof_status metaof_params_save(const metaof_params* params, const char* path) {
  return guarded([&] {
    need(params, "params");
    need(path, "path");
    nn::save_params(params->params, path);
  });
}

size_t metaof_params_count(const metaof_params* params) {
  return params == nullptr ? 0 : params->params.parameter_count();
}

metaof_status metaof_params_values(const metaof_params* params, double* buf, size_t size) {
  return guarded([&] {
    need(params, "params");
    need(buf, "buf");
    const auto flat = params->params.flatten();
    const auto n = std::min(size, static_cast<size_t>(flat.size()));
    std::copy_n(flat.data(), n, buf);
  });
}

void metaof_params_free(metaof_params* params) { delete params; }

metaof_status metaof_run(const metaof_config* cfg, const char* output_dir, metaof_report** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    auto e = harness::ExperimentConfig::from_config(cfg->cfg);
    if (output_dir != nullptr && *output_dir != '\0') e.output_dir = output_dir;
    if (e.output_dir.empty()) e.output_dir = harness::default_output_dir(harness::kind_name(e.kind));
    auto* r = new metaof_report{harness::run_experiment(e), e.output_dir.string()};
    *out = r;
  });
}

size_t metaof_report_record_count(const metaof_report* report) {
  return report == nullptr ? 0 : report->report.records.size();
}

double metaof_report_wall_seconds(const metaof_report* report) {
  return report == nullptr ? 0.0 : report->report.wall_seconds;
}

size_t metaof_report_diagnostic_count(const metaof_report* report) {
  return report == nullptr ? 0 : report->report.diagnostics.size();
}

static void fill_gap(const harness::GapReport& g, metaof_gap* out) {
  *out = {g.train.zero_shot_loss, g.train.adapted_loss, g.train.ratio, g.test.zero_shot_loss,
          g.test.adapted_loss,    g.test.ratio,         g.steps,       g.memorized ? 1 : 0};
}

metaof_status metaof_report_diagnostic(const metaof_report* report, size_t index, metaof_gap* out) {
  return guarded([&] {
    need(report, "report");
    need(out, "out");
    if (index >= report->report.diagnostics.size()) throw ContractError("diagnostic index out of range");
    fill_gap(report->report.diagnostics[index].gap, out);
  });
}

size_t metaof_report_sweep_count(const metaof_report* report) {
  return report == nullptr ? 0 : report->report.sweep.size();
}

metaof_status metaof_report_sweep(const metaof_report* report, size_t index, double* sigma, double* accuracy_mean,
                                  double* accuracy_std) {
  return guarded([&] {
    need(report, "report");
    if (index >= report->report.sweep.size()) throw ContractError("sweep index out of range");
    const auto& row = report->report.sweep[index];
    if (sigma) *sigma = row.sigma;
    if (accuracy_mean) *accuracy_mean = row.accuracy_mean;
    if (accuracy_std) *accuracy_std = row.accuracy_std;
  });
}

const char* metaof_report_output_dir(const metaof_report* report) {
  return report == nullptr ? "" : report->output_dir.c_str();
}

void metaof_report_free(metaof_report* report) { delete report; }

metaof_status metaof_train_variant(const metaof_config* cfg, const char* variant, uint64_t seed,
                                   const char* metrics_csv, metaof_params** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(variant, "variant");
    need(out, "out");
    const auto e = harness::ExperimentConfig::from_config(cfg->cfg);
    const std::string v = variant;
    if (v != "vanilla" && v != "noise" && v != "meta_augmentation") {
      throw ContractError("unknown training variant '" + v + "'");
    }
    auto res = harness::run_variant(e, v, seed);
    if (metrics_csv != nullptr) harness::write_metrics_csv(res.records, metrics_csv);
    *out = new metaof_params{std::move(res.theta)};
  });
}

metaof_status metaof_evaluate(const metaof_config* cfg, const metaof_params* params, uint64_t seed,
                              const char* metrics_csv, double* test_loss) {
  return guarded([&] {
    need(cfg, "cfg");
    need(params, "params");
    const auto e = harness::ExperimentConfig::from_config(cfg->cfg);
    check_layout(e, params->params);
    const auto source = e.make_source(seed);
    const auto spec = e.model_spec();
    std::vector<maml::MetricsRecord> records;
    double final_test = 0.0;
    for (bool test : {false, true}) {
      const auto tasks = maml::eval_tasks(*source, seed, e.train.eval_tasks, test);
      const auto rows = maml::evaluate(params->params, tasks, spec, e.train.inner_lr, e.train.eval_steps);
      auto recs = maml::to_records(rows, seed, "evaluate", 0, test ? "meta_test" : "meta_train");
      records.insert(records.end(), recs.begin(), recs.end());
      if (test) final_test = loss_at(rows, largest_step(e));
    }
    if (metrics_csv != nullptr) harness::write_metrics_csv(records, metrics_csv);
    if (test_loss != nullptr) *test_loss = final_test;
  });
}

metaof_status metaof_feedback(const metaof_config* cfg, const metaof_params* theta_star, uint64_t seed,
                              int target_index, const char* gradient_path, double* loss_before,
                              double* loss_after, metaof_params** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(theta_star, "theta_star");
    auto e = harness::ExperimentConfig::from_config(cfg->cfg);
    check_layout(e, theta_star->params);
    if (target_index < 0) throw ContractError("target_index must be >= 0");
    e.feedback.test_tasks = target_index + 1;
    const auto source = e.make_source(seed);
    const auto spec = e.model_spec();
    const auto target = harness::feedback_targets(e, *source, seed).back();

    auto tc = e.train_config(seed);
    tc.outer_lr = e.feedback.outer_lr;
    tc.seed = derive_seed(seed, "feedback.retrain", static_cast<std::uint64_t>(target_index));
    feedback::FeedbackConfig fb;
    fb.iterations = e.feedback.iterations;
    fb.clamp_weights = e.feedback.clamp_weights;
    auto res = feedback::feedback_retrain(theta_star->params, target, spec, tc, fb, *source);
    if (gradient_path != nullptr) feedback::save_test_gradient(res.test_grad, gradient_path);

    const int n = largest_step(e);
    if (loss_before != nullptr) {
      *loss_before = loss_at(harness::evaluate_target(theta_star->params, target, spec, e.train.inner_lr,
                                                      e.train.eval_steps), n);
    }
    if (loss_after != nullptr) {
      *loss_after = loss_at(harness::evaluate_target(res.theta, target, spec, e.train.inner_lr,
                                                     e.train.eval_steps), n);
    }
    if (out != nullptr) *out = new metaof_params{std::move(res.theta)};
  });
}

metaof_status metaof_diagnose(const metaof_config* cfg, const metaof_params* params, uint64_t seed,
                              metaof_gap* out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(params, "params");
    need(out, "out");
    const auto e = harness::ExperimentConfig::from_config(cfg->cfg);
    check_layout(e, params->params);
    const auto source = e.make_source(seed);
    const auto train_tasks = maml::eval_tasks(*source, seed, e.train.eval_tasks, false);
    const auto test_tasks = maml::eval_tasks(*source, seed, e.train.eval_tasks, true);
    fill_gap(harness::memorization_gap(params->params, e.model_spec(), train_tasks, test_tasks, e.train.inner_lr,
                                       e.diagnose),
             out);
  });
}

}  // extern "C"
