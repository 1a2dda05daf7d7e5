#include "metaof/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <map>
#include <sstream>
#include <tuple>

#include "metaof/error.hpp"
#include "metaof/rng.hpp"

namespace metaof::harness {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kVariants = {"vanilla", "noise", "meta_augmentation", "feedback"};

std::vector<std::string> split_names(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

int to_int_checked(const std::string& key, std::int64_t v, std::int64_t lo, std::int64_t hi) {
  if (v < lo || v > hi) {
    throw ConfigError(key + ": value " + std::to_string(v) + " out of range [" + std::to_string(lo) +
                      ", " + std::to_string(hi) + "]");
  }
  return static_cast<int>(v);
}

maml::NoiseTarget parse_target(const std::string& s) {
  if (s == "inner") return maml::NoiseTarget::Inner;
  if (s == "outer") return maml::NoiseTarget::Outer;
  if (s == "both") return maml::NoiseTarget::Both;
  return maml::NoiseTarget::None;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// Rethrows a ContractError from config-derived objects as a ConfigError.
template <class F>
void validate_as_config(const char* section, F&& f) {
  try {
    f();
  } catch (const ContractError& e) {
    throw ConfigError(std::string(section) + ": " + e.what());
  }
}

}  // namespace

std::string kind_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Sinusoid: return "sinusoid";
    case ExperimentKind::Classification: return "classification";
    case ExperimentKind::NoiseSweep: return "noise_sweep";
    case ExperimentKind::Feedback: return "feedback";
  }
  return "unknown";
}

// ------------------------------------------------------------------ config

ExperimentConfig ExperimentConfig::from_config(const config::Config& c) {
  ExperimentConfig e;
  e.source = c;

  const std::string kind =
      c.get_choice("experiment.kind", "sinusoid", {"sinusoid", "classification", "noise_sweep", "feedback"});
  if (kind == "sinusoid") e.kind = ExperimentKind::Sinusoid;
  if (kind == "classification") e.kind = ExperimentKind::Classification;
  if (kind == "noise_sweep") e.kind = ExperimentKind::NoiseSweep;
  if (kind == "feedback") e.kind = ExperimentKind::Feedback;

  // Which task family: sweep and feedback runs may use either.
  const std::string task_default =
      (e.kind == ExperimentKind::Classification || e.kind == ExperimentKind::NoiseSweep) ? "classification"
                                                                                         : "sinusoid";
  const std::string task = c.get_choice("experiment.task", task_default, {"sinusoid", "classification"});
  const bool classification = task == "classification";
  if (e.kind == ExperimentKind::Sinusoid && classification) {
    throw ConfigError("experiment.task: sinusoid experiments need sinusoid tasks");
  }
  if (e.kind == ExperimentKind::Classification && !classification) {
    throw ConfigError("experiment.task: classification experiments need classification tasks");
  }
  if (e.kind == ExperimentKind::NoiseSweep && !classification) {
    throw ConfigError("experiment.task: the noise sweep reports accuracy and needs classification tasks");
  }

  std::string variant_default = "vanilla,noise";
  if (e.kind == ExperimentKind::Sinusoid) variant_default = "vanilla,meta_augmentation,noise,feedback";
  if (e.kind == ExperimentKind::Feedback) variant_default = "feedback";
  e.variants = split_names(c.get_string("experiment.variants", variant_default));
  if (e.kind != ExperimentKind::NoiseSweep && e.variants.empty()) {
    throw ConfigError("experiment.variants: at least one variant is required");
  }
  for (const auto& v : e.variants) {
    if (std::find(kVariants.begin(), kVariants.end(), v) == kVariants.end()) {
      throw ConfigError("experiment.variants: unknown variant '" + v + "'");
    }
    if (v == "meta_augmentation" && classification) {
      throw ConfigError("experiment.variants: meta_augmentation applies to regression tasks only");
    }
  }
  if (e.kind == ExperimentKind::Feedback &&
      std::find(e.variants.begin(), e.variants.end(), "feedback") == e.variants.end()) {
    throw ConfigError("experiment.variants: a feedback experiment must include the feedback variant");
  }

  const auto seed_list = c.get_ints("experiment.seeds", {});
  if (!seed_list.empty()) {
    for (auto s : seed_list) {
      if (s < 0) throw ConfigError("experiment.seeds: seeds must be non-negative");
      e.seeds.push_back(static_cast<std::uint64_t>(s));
    }
  } else {
    const int count = to_int_checked("experiment.seed_count", c.get_int("experiment.seed_count", 10), 1, 100000);
    for (int s = 1; s <= count; ++s) e.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  e.output_dir = c.get_string("experiment.output_dir", "");
  e.threads = to_int_checked("experiment.threads", c.get_int("experiment.threads", 1), 1, 256);

  e.hidden.clear();
  for (auto h : c.get_ints("model.hidden", {40, 40})) e.hidden.push_back(to_int_checked("model.hidden", h, 1, 1 << 16));

  auto& s = e.sinusoid;
  s.amplitude_min = c.get_double("sinusoid.amplitude_min", s.amplitude_min);
  s.amplitude_max = c.get_double("sinusoid.amplitude_max", s.amplitude_max);
  s.phase_min = c.get_double("sinusoid.phase_min", s.phase_min);
  s.phase_max = c.get_double("sinusoid.phase_max", s.phase_max);
  s.domain_min = c.get_double("sinusoid.domain_min", s.domain_min);
  s.domain_max = c.get_double("sinusoid.domain_max", s.domain_max);
  s.interval_width = c.get_double("sinusoid.interval_width", s.interval_width);
  s.gap_width = c.get_double("sinusoid.gap_width", s.gap_width);
  s.interval_count = to_int_checked("sinusoid.interval_count", c.get_int("sinusoid.interval_count", s.interval_count), 1, 100000);
  s.k_shot = to_int_checked("sinusoid.k_shot", c.get_int("sinusoid.k_shot", s.k_shot), 1, 1 << 20);
  s.q_query = to_int_checked("sinusoid.q_query", c.get_int("sinusoid.q_query", s.q_query), 1, 1 << 20);
  e.augment_range = c.get_double("augment.offset_range", e.augment_range);
  if (e.augment_range < 0.0) throw ConfigError("augment.offset_range: must be >= 0");

  auto& cl = e.classification;
  cl.task.k_way = 0;  // k_way == 0 marks a regression experiment
  if (classification) {
    cl.pool.n_classes = to_int_checked("classification.n_classes", c.get_int("classification.n_classes", cl.pool.n_classes), 1, 1 << 20);
    cl.test_classes = to_int_checked("classification.test_classes", c.get_int("classification.test_classes", cl.test_classes), 1, 1 << 20);
    cl.pool.dim = to_int_checked("classification.dim", c.get_int("classification.dim", cl.pool.dim), 1, 1 << 20);
    cl.pool.samples_per_class = to_int_checked("classification.samples_per_class",
                                               c.get_int("classification.samples_per_class", cl.pool.samples_per_class), 1, 1 << 20);
    cl.pool.within_stddev = c.get_double("classification.within_stddev", cl.pool.within_stddev);
    cl.pool.center_stddev = c.get_double("classification.center_stddev", cl.pool.center_stddev);
    cl.pool.min_center_spacing = c.get_double("classification.min_center_spacing", cl.pool.min_center_spacing);
    cl.task.k_way = to_int_checked("classification.k_way", c.get_int("classification.k_way", 5), 1, 1 << 16);
    cl.task.k_shot = to_int_checked("classification.k_shot", c.get_int("classification.k_shot", 1), 1, 1 << 16);
    cl.task.q_query = to_int_checked("classification.q_query", c.get_int("classification.q_query", 5), 1, 1 << 16);
    cl.task.mode = c.get_choice("classification.mode", "ordered", {"ordered", "intershuffle"}) == "ordered"
                       ? tasks::LabelMode::Ordered
                       : tasks::LabelMode::Intershuffle;
    cl.image_dir = c.get_string("classification.image_dir", "");
    cl.image_side = to_int_checked("classification.image_side", c.get_int("classification.image_side", 14), 1, 4096);
    cl.image_test_fraction = c.get_double("classification.image_test_fraction", cl.image_test_fraction);
    if (cl.image_test_fraction <= 0.0 || cl.image_test_fraction >= 1.0) {
      throw ConfigError("classification.image_test_fraction: must be in (0, 1)");
  }
  }

  auto& t = e.train;
  t.inner_lr = c.get_double("train.inner_lr", t.inner_lr);
  t.outer_lr = c.get_double("train.outer_lr", t.outer_lr);
  t.inner_steps = to_int_checked("train.inner_steps", c.get_int("train.inner_steps", t.inner_steps), 0, 1000);
  t.meta_batch = to_int_checked("train.meta_batch", c.get_int("train.meta_batch", t.meta_batch), 1, 1 << 16);
  t.outer_iterations = to_int_checked("train.outer_iterations", c.get_int("train.outer_iterations", t.outer_iterations), 0, 1 << 30);
  t.order = c.get_choice("train.order", "second", {"first", "second"}) == "first" ? maml::GradientOrder::First
                                                                                  : maml::GradientOrder::Second;
  t.optimizer = c.get_choice("train.optimizer", "sgd", {"sgd", "adam"}) == "adam" ? maml::OuterOptimizer::Adam
                                                                                : maml::OuterOptimizer::Sgd;
  t.eval_interval = to_int_checked("train.eval_interval", c.get_int("train.eval_interval", 0), 0, 1 << 30);
  t.eval_tasks = to_int_checked("train.eval_tasks", c.get_int("train.eval_tasks", t.eval_tasks), 1, 1 << 20);
  t.eval_steps.clear();
  for (auto v : c.get_ints("train.eval_steps", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10})) {
    t.eval_steps.push_back(to_int_checked("train.eval_steps", v, 0, 100000));
  }
  t.checkpoint_interval = to_int_checked("train.checkpoint_interval", c.get_int("train.checkpoint_interval", 0), 0, 1 << 30);

  auto& n = e.noise;
  n.target = parse_target(c.get_choice("noise.target", "inner", {"inner", "outer", "both", "none"}));
  n.mean = c.get_double("noise.mean", n.mean);
  n.inner_stddev = c.get_double("noise.inner_stddev", n.inner_stddev);
  n.outer_stddev = c.get_double("noise.outer_stddev", n.outer_stddev);
  n.decay_factor = c.get_double("noise.decay_factor", n.decay_factor);
  n.decay_interval = to_int_checked("noise.decay_interval", c.get_int("noise.decay_interval", 0), 0, 1 << 30);

  auto& f = e.feedback;
  f.base = c.get_choice("feedback.base", f.base, {"vanilla", "noise"});
  f.iterations = to_int_checked("feedback.iterations", c.get_int("feedback.iterations", f.iterations), 0, 1 << 30);
  f.outer_lr = c.get_double("feedback.outer_lr", f.outer_lr);
  f.clamp_weights = c.get_bool("feedback.clamp_weights", f.clamp_weights);
  f.test_tasks = to_int_checked("feedback.test_tasks", c.get_int("feedback.test_tasks", f.test_tasks), 1, 1 << 16);
  if (f.outer_lr < 0.0) throw ConfigError("feedback.outer_lr: must be >= 0");

  e.sweep.sigmas = c.get_doubles("sweep.sigmas", e.sweep.sigmas);
  if (e.sweep.sigmas.empty()) throw ConfigError("sweep.sigmas: at least one value is required");
  for (double v : e.sweep.sigmas) {
    if (v < 0.0) throw ConfigError("sweep.sigmas: values must be >= 0");
  }
  e.sweep.eval_step = to_int_checked("sweep.eval_step", c.get_int("sweep.eval_step", -1), -1, 100000);

  auto& d = e.diagnose;
  d.steps = to_int_checked("diagnose.steps", c.get_int("diagnose.steps", d.steps), 1, 100000);
  d.ratio_threshold = c.get_double("diagnose.ratio_threshold", d.ratio_threshold);
  d.test_factor = c.get_double("diagnose.test_factor", d.test_factor);
  d.eps_div = c.get_double("diagnose.eps", d.eps_div);
  if (d.eps_div <= 0.0) throw ConfigError("diagnose.eps: must be positive");

  validate_as_config("sinusoid", [&] { e.sinusoid.validate(); });
  validate_as_config("train", [&] {
    e.train.validate();
    if (e.train.inner_lr <= 0.0 || e.train.outer_lr <= 0.0) throw ContractError("learning rates must be positive");
  });
  validate_as_config("noise", [&] { e.noise.validate(); });
  validate_as_config("model", [&] { e.model_spec().validate(); });
  if (e.is_classification()) {
    const int per_class = cl.task.k_shot + cl.task.q_query;
    if (cl.image_dir.empty() && cl.pool.samples_per_class < per_class) {
      throw ConfigError("classification.samples_per_class: must be >= k_shot + q_query");
    }
    if (cl.image_dir.empty() && (cl.pool.n_classes < cl.task.k_way || cl.test_classes < cl.task.k_way)) {
      throw ConfigError("classification.n_classes: each pool needs at least k_way classes");
    }
  }
  return e;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  return from_config(config::Config::load(path));
}

bool ExperimentConfig::is_classification() const { return classification.task.k_way > 0; }

nn::ModelSpec ExperimentConfig::model_spec() const {
  nn::ModelSpec spec;
  spec.hidden = hidden;
  if (is_classification()) {
    spec.head = nn::Head::Classification;
    spec.input_dim = classification.image_dir.empty() ? classification.pool.dim
                                                      : classification.image_side * classification.image_side;
    spec.output_dim = classification.task.k_way;
  } else {
    spec.head = nn::Head::Regression;
    spec.input_dim = 1;
    spec.output_dim = 1;
  }
  return spec;
}

std::unique_ptr<maml::TaskSource> ExperimentConfig::make_source(std::uint64_t seed, bool augment) const {
  if (!is_classification()) {
    return std::make_unique<maml::SinusoidSource>(sinusoid, derive_seed(seed, "families"), augment, augment_range);
  }
  const auto& cl = classification;
  tasks::ClassPool train_pool;
  tasks::ClassPool test_pool;
  if (cl.image_dir.empty()) {
    train_pool = tasks::synth_class_pool(cl.pool, derive_seed(seed, "pool.train"));
    auto test_cfg = cl.pool;
    test_cfg.n_classes = cl.test_classes;
    test_pool = tasks::synth_class_pool(test_cfg, derive_seed(seed, "pool.test"));
  } else {
    // Real images: classes are split once, in lexicographic order, so the
    // meta-test classes are the same for every seed.
    tasks::ClassPool all = tasks::load_image_pool(cl.image_dir, cl.image_side);
    const auto n = all.classes.size();
    const auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(n) * cl.image_test_fraction));
    if (n_test < static_cast<std::size_t>(cl.task.k_way) || n - n_test < static_cast<std::size_t>(cl.task.k_way)) {
      throw ConfigError("classification.image_dir: not enough classes for k_way in both splits");
    }
    train_pool.dim = test_pool.dim = all.dim;
    for (std::size_t i = 0; i < n; ++i) {
      (i < n - n_test ? train_pool : test_pool).classes.push_back(std::move(all.classes[i]));
    }
  }
  return std::make_unique<maml::ClassificationSource>(std::move(train_pool), std::move(test_pool), cl.task,
                                                      derive_seed(seed, "partitions"));
}

maml::TrainConfig ExperimentConfig::train_config(std::uint64_t seed) const {
  maml::TrainConfig t = train;
  t.seed = seed;
  if (t.checkpoint_interval > 0 && !output_dir.empty()) {
    t.checkpoint_dir = output_dir / "checkpoints" / ("seed" + std::to_string(seed));
  }
  return t;
}

maml::NoiseSpec ExperimentConfig::variant_noise(const std::string& variant) const {
  if (variant != "noise") return maml::NoiseSpec::none();
  maml::NoiseSpec n = noise;
  if (n.target == maml::NoiseTarget::None) n.target = maml::NoiseTarget::Inner;
  return n;
}

// -------------------------------------------------------------- diagnostics

namespace {

SplitGap split_gap(double l0, double ln, double eps) {
  return {l0, ln, (l0 - ln) / std::max(l0, eps)};
}

GapReport classify_gap(SplitGap train, SplitGap test, int steps, const GapThresholds& th) {
  GapReport r{train, test, steps, false};
  r.memorized = train.ratio < th.ratio_threshold && test.adapted_loss > th.test_factor * train.adapted_loss;
  return r;
}

}  // namespace

GapReport memorization_gap(const nn::ParameterSet& theta, const nn::ModelSpec& spec,
                           std::span<const tasks::Task> train_tasks,
                           std::span<const tasks::Task> test_tasks, double alpha,
                           const GapThresholds& th) {
  const std::vector<int> steps = {0, th.steps};
  const auto tr = maml::evaluate(theta, train_tasks, spec, alpha, steps);
  const auto te = maml::evaluate(theta, test_tasks, spec, alpha, steps);
  return classify_gap(split_gap(tr[0].loss_mean, tr[1].loss_mean, th.eps_div),
                      split_gap(te[0].loss_mean, te[1].loss_mean, th.eps_div), th.steps, th);
}

namespace {

// Gap from the final evaluation records of one run, when they contain the
// needed step counts.
std::optional<GapReport> gap_from_records(std::span<const maml::MetricsRecord> recs, int final_iter,
                                          const GapThresholds& th) {
  std::optional<double> v[2][2];
  for (const auto& r : recs) {
    if (r.outer_iter != final_iter) continue;
    const int split = r.split == "meta_train" ? 0 : (r.split == "meta_test" ? 1 : -1);
    if (split < 0) continue;
    if (r.adapt_steps == 0) v[split][0] = r.loss_mean;
    if (r.adapt_steps == th.steps) v[split][1] = r.loss_mean;
  }
  if (!v[0][0] || !v[0][1] || !v[1][0] || !v[1][1]) return std::nullopt;
  return classify_gap(split_gap(*v[0][0], *v[0][1], th.eps_div), split_gap(*v[1][0], *v[1][1], th.eps_div),
                      th.steps, th);
}

}  // namespace

// -------------------------------------------------------------- aggregation

std::vector<AggregateRow> aggregate(std::span<const maml::MetricsRecord> records) {
  using Key = std::tuple<std::string, int, std::string, int>;
  std::vector<Key> order;
  std::map<Key, std::vector<const maml::MetricsRecord*>> groups;
  for (const auto& r : records) {
    Key k{r.phase, r.outer_iter, r.split, r.adapt_steps};
    auto [it, inserted] = groups.try_emplace(k);
    if (inserted) order.push_back(k);
    it->second.push_back(&r);
  }
  std::vector<AggregateRow> out;
  for (const auto& k : order) {
    const auto& rows = groups[k];
    std::vector<double> loss;
    std::vector<double> acc;
    for (const auto* r : rows) {
      loss.push_back(r->loss_mean);
      acc.push_back(r->accuracy_mean);
    }
    out.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k), maml::mean_of(loss),
                   maml::stddev_of(loss), maml::mean_of(acc), maml::stddev_of(acc), static_cast<int>(rows.size())});
  }
  return out;
}

// ------------------------------------------------------------------ running

std::vector<maml::EvalRow> evaluate_target(const nn::ParameterSet& theta, const tasks::Task& target,
                                           const nn::ModelSpec& spec, double alpha,
                                           std::span<const int> steps) {
  return maml::evaluate(theta, std::span<const tasks::Task>(&target, 1), spec, alpha, steps);
}

std::vector<tasks::Task> feedback_targets(const ExperimentConfig& cfg, const maml::TaskSource& source,
                                          std::uint64_t seed) {
  std::vector<tasks::Task> out;
  for (int j = 0; j < cfg.feedback.test_tasks; ++j) {
    out.push_back(source.test_task(derive_seed(seed, "feedback.target", static_cast<std::uint64_t>(j))));
  }
  return out;
}

namespace {

struct SeedOutcome {
  std::vector<maml::MetricsRecord> records;
  std::vector<DiagnosticRow> diagnostics;
};

// Mean/std over target tasks of per-target evaluation rows.
std::vector<maml::MetricsRecord> target_records(const std::vector<std::vector<maml::EvalRow>>& per_target,
                                                std::uint64_t seed, const std::string& phase, int iter) {
  std::vector<maml::MetricsRecord> out;
  if (per_target.empty()) return out;
  for (std::size_t r = 0; r < per_target.front().size(); ++r) {
    std::vector<double> loss;
    std::vector<double> acc;
    for (const auto& rows : per_target) {
      loss.push_back(rows[r].loss_mean);
      acc.push_back(rows[r].accuracy_mean);
    }
    out.push_back({seed, phase, iter, "target", per_target.front()[r].adapt_steps, maml::mean_of(loss),
                   maml::stddev_of(loss), maml::mean_of(acc), maml::stddev_of(acc)});
  }
  return out;
}

SeedOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedOutcome out;
  std::map<std::string, nn::ParameterSet> trained;
  const auto spec = cfg.model_spec();

  auto train_variant = [&](const std::string& variant) -> const nn::ParameterSet& {
    auto it = trained.find(variant);
    if (it != trained.end()) return it->second;
    auto res = run_variant(cfg, variant, seed);
    out.records.insert(out.records.end(), res.records.begin(), res.records.end());
    if (auto gap = gap_from_records(res.records, cfg.train.outer_iterations, cfg.diagnose)) {
      out.diagnostics.push_back({seed, variant, *gap});
    }
    return trained.emplace(variant, std::move(res.theta)).first->second;
  };

  for (const auto& variant : cfg.variants) {
    if (variant != "feedback") {
      train_variant(variant);
      continue;
    }
    const auto& theta_star = train_variant(cfg.feedback.base);
    const auto source = cfg.make_source(seed);
    auto fb_train = cfg.train_config(seed);
    fb_train.outer_lr = cfg.feedback.outer_lr;
    feedback::FeedbackConfig fb;
    fb.iterations = cfg.feedback.iterations;
    fb.clamp_weights = cfg.feedback.clamp_weights;

    std::vector<std::vector<maml::EvalRow>> before;
    std::vector<std::vector<maml::EvalRow>> after;
    const auto targets = feedback_targets(cfg, *source, seed);
    for (std::size_t j = 0; j < targets.size(); ++j) {
      before.push_back(evaluate_target(theta_star, targets[j], spec, cfg.train.inner_lr, cfg.train.eval_steps));
      auto target_cfg = fb_train;
      target_cfg.seed = derive_seed(seed, "feedback.retrain", j);
      const auto res = feedback::feedback_retrain(theta_star, targets[j], spec, target_cfg, fb, *source);
      after.push_back(evaluate_target(res.theta, targets[j], spec, cfg.train.inner_lr, cfg.train.eval_steps));
    }
    auto b = target_records(before, seed, "feedback_before", 0);
    auto a = target_records(after, seed, "feedback", cfg.feedback.iterations);
    out.records.insert(out.records.end(), b.begin(), b.end());
    out.records.insert(out.records.end(), a.begin(), a.end());
  }
  return out;
}

template <class F>
auto for_each_seed(const std::vector<std::uint64_t>& seeds, int threads, F&& fn) {
  using R = decltype(fn(seeds.front()));
  std::vector<R> results(seeds.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) results[i] = fn(seeds[i]);
    return results;
  }
  // Fixed-size waves; results are merged in seed order regardless of schedule.
  for (std::size_t start = 0; start < seeds.size(); start += static_cast<std::size_t>(threads)) {
    std::vector<std::future<R>> wave;
    const auto end = std::min(seeds.size(), start + static_cast<std::size_t>(threads));
    for (std::size_t i = start; i < end; ++i) {
      wave.push_back(std::async(std::launch::async, [&fn, s = seeds[i]] { return fn(s); }));
    }
    for (std::size_t i = start; i < end; ++i) results[i] = wave[i - start].get();
  }
  return results;
}

void check_finite(std::span<const maml::MetricsRecord> records) {
  for (const auto& r : records) {
    if (!std::isfinite(r.loss_mean) || !std::isfinite(r.loss_std) || !std::isfinite(r.accuracy_mean) ||
        !std::isfinite(r.accuracy_std)) {
      throw NumericError("non-finite metric for phase " + r.phase + ", seed " + std::to_string(r.seed));
    }
  }
}

}  // namespace

VariantResult run_variant(const ExperimentConfig& cfg, const std::string& variant, std::uint64_t seed) {
  if (variant == "feedback") throw ContractError("run_variant: feedback is not a training variant");
  const auto source = cfg.make_source(seed, variant == "meta_augmentation");
  auto res = maml::train(cfg.train_config(seed), cfg.model_spec(), *source, cfg.variant_noise(variant), variant);
  return {std::move(res.theta), std::move(res.records)};
}

std::vector<SweepRow> noise_sweep(const ExperimentConfig& base, std::span<const double> sigmas,
                                  std::vector<maml::MetricsRecord>* records) {
  if (!base.is_classification()) throw ConfigError("noise sweep needs classification tasks");
  const int step = base.sweep.eval_step >= 0
                       ? base.sweep.eval_step
                       : *std::max_element(base.train.eval_steps.begin(), base.train.eval_steps.end());
  if (std::find(base.train.eval_steps.begin(), base.train.eval_steps.end(), step) == base.train.eval_steps.end()) {
    throw ConfigError("sweep.eval_step: must be one of train.eval_steps");
  }
  const auto spec = base.model_spec();
  std::vector<SweepRow> rows;
  for (double sigma : sigmas) {
    if (sigma < 0.0) throw ConfigError("sweep.sigmas: values must be >= 0");
    // sigma goes to whichever loop(s) noise.target names; inner when unset.
    maml::NoiseSpec noise = base.noise;
    if (noise.target == maml::NoiseTarget::None) noise.target = maml::NoiseTarget::Inner;
    noise.inner_stddev = sigma;
    noise.outer_stddev = sigma;
    if (sigma == 0.0) noise.target = maml::NoiseTarget::None;
    const std::string phase = "sigma=" + short_fmt(sigma);
    auto per_seed = for_each_seed(base.seeds, base.threads, [&](std::uint64_t seed) {
      const auto source = base.make_source(seed);
      return maml::train(base.train_config(seed), spec, *source, noise, phase).records;
    });
    SweepRow row;
    row.sigma = sigma;
    for (auto& recs : per_seed) {
      for (const auto& r : recs) {
        if (r.outer_iter == base.train.outer_iterations && r.split == "meta_test" && r.adapt_steps == step) {
          row.per_seed.push_back(r.accuracy_mean);
        }
      }
      if (records) records->insert(records->end(), recs.begin(), recs.end());
    }
    row.accuracy_mean = maml::mean_of(row.per_seed);
    row.accuracy_std = maml::stddev_of(row.per_seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

// -------------------------------------------------------------------- output

void write_metrics_csv(std::span<const maml::MetricsRecord> records, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "phase,outer_iter,split,adapt_steps,loss_mean,loss_std,accuracy_mean,accuracy_std,seed\n";
  for (const auto& r : records) {
    out << r.phase << ',' << r.outer_iter << ',' << r.split << ',' << r.adapt_steps << ',' << fmt(r.loss_mean)
        << ',' << fmt(r.loss_std) << ',' << fmt(r.accuracy_mean) << ',' << fmt(r.accuracy_std) << ',' << r.seed
        << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void write_aggregate_csv(std::span<const AggregateRow> rows, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "phase,outer_iter,split,adapt_steps,loss_mean,loss_std,accuracy_mean,accuracy_std,seeds\n";
  for (const auto& r : rows) {
    out << r.phase << ',' << r.outer_iter << ',' << r.split << ',' << r.adapt_steps << ',' << fmt(r.loss_mean)
        << ',' << fmt(r.loss_std) << ',' << fmt(r.accuracy_mean) << ',' << fmt(r.accuracy_std) << ',' << r.seeds
        << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void write_sweep_csv(std::span<const SweepRow> rows, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "sigma,accuracy_mean,accuracy_std\n";
  for (const auto& r : rows) out << fmt(r.sigma) << ',' << fmt(r.accuracy_mean) << ',' << fmt(r.accuracy_std) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

void write_diagnostics_csv(std::span<const DiagnosticRow> rows, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "seed,variant,steps,train_zero_shot,train_adapted,train_ratio,test_zero_shot,test_adapted,test_ratio,"
         "memorized\n";
  for (const auto& r : rows) {
    const auto& g = r.gap;
    out << r.seed << ',' << r.variant << ',' << g.steps << ',' << fmt(g.train.zero_shot_loss) << ','
        << fmt(g.train.adapted_loss) << ',' << fmt(g.train.ratio) << ',' << fmt(g.test.zero_shot_loss) << ','
        << fmt(g.test.adapted_loss) << ',' << fmt(g.test.ratio) << ',' << (g.memorized ? 1 : 0) << '\n';
  }
}

std::vector<maml::MetricsRecord> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("phase,outer_iter,split,adapt_steps", 0) != 0) throw IoError("not a metrics.csv file");
  std::vector<maml::MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 9) throw IoError("malformed metrics row: " + line);
    maml::MetricsRecord r;
    r.phase = f[0];
    r.outer_iter = std::stoi(f[1]);
    r.split = f[2];
    r.adapt_steps = std::stoi(f[3]);
    r.loss_mean = std::stod(f[4]);
    r.loss_std = std::stod(f[5]);
    r.accuracy_mean = std::stod(f[6]);
    r.accuracy_std = std::stod(f[7]);
    r.seed = std::stoull(f[8]);
    out.push_back(std::move(r));
  }
  return out;
}

fs::path default_output_dir(const std::string& name) {
  if (const char* root = std::getenv("METAOF_OUTPUT_ROOT"); root != nullptr && *root != '\0') {
    return fs::path(root) / name;
  }
  return fs::path("runs") / name;
}

namespace {

void write_report(const ExperimentConfig& cfg, const RunReport& report, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "experiment: " << kind_name(cfg.kind) << "\n";
  out << "config_sha256: " << report.config_hash << "\n";
  out << "seeds: " << cfg.seeds.size() << "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", report.wall_seconds);
  out << "wall_clock_seconds: " << buf << "\n";
  for (const auto& w : report.warnings) out << "warning: " << w << "\n";

  if (!report.sweep.empty()) {
    out << "\nnoise sweep, meta-test accuracy over seeds\n";
    for (const auto& r : report.sweep) {
      std::snprintf(buf, sizeof buf, "  sigma %-8g  %.4f +- %.4f", r.sigma, r.accuracy_mean, r.accuracy_std);
      out << buf << "\n";
    }
  }

  // Final evaluation per phase at the largest step count.
  const int steps = *std::max_element(cfg.train.eval_steps.begin(), cfg.train.eval_steps.end());
  bool header = false;
  for (const auto& r : report.aggregate) {
    if (r.adapt_steps != steps) continue;
    const bool final_train = r.outer_iter == cfg.train.outer_iterations && r.split != "target";
    if (!final_train && r.split != "target") continue;
    if (!header) {
      out << "\nfinal evaluation, " << steps << " adaptation steps (mean over seeds)\n";
      out << "  phase                split        loss        accuracy\n";
      header = true;
    }
    std::snprintf(buf, sizeof buf, "  %-20s %-12s %-11.5g %.4f", r.phase.c_str(), r.split.c_str(), r.loss_mean,
                  r.accuracy_mean);
    out << buf << "\n";
  }

  if (!report.diagnostics.empty()) {
    out << "\nmemorization diagnostic (" << cfg.diagnose.steps << " steps, ratio < " << cfg.diagnose.ratio_threshold
        << ", test > " << cfg.diagnose.test_factor << "x train)\n";
    std::map<std::string, std::pair<int, int>> verdicts;
    for (const auto& d : report.diagnostics) {
      auto& v = verdicts[d.variant];
      v.first += d.gap.memorized ? 1 : 0;
      v.second += 1;
    }
    for (const auto& [variant, v] : verdicts) {
      out << "  " << variant << ": memorized in " << v.first << " of " << v.second << " seeds\n";
    }
  }
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& cfg_in) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentConfig cfg = cfg_in;
  if (cfg.output_dir.empty()) cfg.output_dir = default_output_dir(kind_name(cfg.kind));
  fs::create_directories(cfg.output_dir);

  RunReport report;
  report.config_hash = cfg.source.hash();

  if (cfg.kind == ExperimentKind::NoiseSweep) {
    report.sweep = noise_sweep(cfg, cfg.sweep.sigmas, &report.records);
  } else {
    auto outcomes = for_each_seed(cfg.seeds, cfg.threads, [&](std::uint64_t seed) { return run_seed(cfg, seed); });
    for (auto& o : outcomes) {
      report.records.insert(report.records.end(), o.records.begin(), o.records.end());
      report.diagnostics.insert(report.diagnostics.end(), o.diagnostics.begin(), o.diagnostics.end());
    }
  }
  check_finite(report.records);
  report.aggregate = aggregate(report.records);
  for (const auto& k : cfg.source.unused_keys()) report.warnings.push_back("unused config key " + k);

  write_metrics_csv(report.records, cfg.output_dir / "metrics.csv");
  write_aggregate_csv(report.aggregate, cfg.output_dir / "aggregate.csv");
  if (!report.sweep.empty()) write_sweep_csv(report.sweep, cfg.output_dir / "sweep.csv");
  if (!report.diagnostics.empty()) write_diagnostics_csv(report.diagnostics, cfg.output_dir / "diagnostics.csv");
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_report(cfg, report, cfg.output_dir / "report.txt");
  return report;
}

RunReport run_experiment(const fs::path& config_path) {
  return run_experiment(ExperimentConfig::load(config_path));
}

}  // namespace metaof::harness
