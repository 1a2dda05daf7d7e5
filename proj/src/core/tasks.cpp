#include "metaof/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metaof/error.hpp"
#include "metaof/rng.hpp"

namespace metaof::tasks {

namespace {

/// Fisher-Yates on [0, n) using our own RNG calls so the result does not
/// depend on the standard library's shuffle implementation.
std::vector<int> permutation(std::size_t n, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.index(i)]);
  }
  return idx;
}

void fill_sinusoid(Split& split, int n, const Interval& iv, const SinusoidFamily& fam, Rng& rng) {
  split.inputs.resize(n, 1);
  split.targets.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(iv.lo, iv.hi);
    split.inputs(i, 0) = x;
    split.targets(i, 0) = fam.amplitude * std::sin(x - fam.phase);
  }
}

}  // namespace

void SinusoidConfig::validate() const {
  require(amplitude_min <= amplitude_max, "sinusoid: amplitude range is empty");
  require(phase_min <= phase_max, "sinusoid: phase range is empty");
  require(interval_width > 0.0 && gap_width >= 0.0, "sinusoid: bad interval geometry");
  require(interval_count > 0, "sinusoid: interval_count must be positive");
  require(k_shot > 0 && q_query > 0, "sinusoid: k_shot and q_query must be positive");
  const double last_hi = domain_min + (interval_count - 1) * (interval_width + gap_width) + interval_width;
  require(last_hi <= domain_max + 1e-12, "sinusoid: intervals exceed the domain");
}

std::vector<Interval> SinusoidConfig::intervals() const {
  std::vector<Interval> out;
  out.reserve(static_cast<std::size_t>(interval_count));
  for (int i = 0; i < interval_count; ++i) {
    const double lo = domain_min + i * (interval_width + gap_width);
    out.push_back({lo, lo + interval_width});
  }
  return out;
}

Task sample_sinusoid_points(const SinusoidConfig& cfg, const SinusoidFamily& family,
                            std::uint64_t seed) {
  cfg.validate();
  require(family.interval >= 0 && family.interval < cfg.interval_count,
          "sinusoid: interval id out of range");
  const Interval iv = cfg.intervals()[static_cast<std::size_t>(family.interval)];
  Rng rng(seed, "sinusoid.points");
  Task t;
  t.family = family;
  fill_sinusoid(t.support, cfg.k_shot, iv, family, rng);
  fill_sinusoid(t.query, cfg.q_query, iv, family, rng);
  return t;
}

Task sample_sinusoid_task(const SinusoidConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed, "sinusoid.family");
  SinusoidFamily fam;
  fam.interval = static_cast<int>(rng.index(static_cast<std::size_t>(cfg.interval_count)));
  fam.amplitude = rng.uniform(cfg.amplitude_min, cfg.amplitude_max);
  fam.phase = rng.uniform(cfg.phase_min, cfg.phase_max);
  return sample_sinusoid_points(cfg, fam, seed);
}

std::vector<SinusoidFamily> make_sinusoid_families(const SinusoidConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed, "sinusoid.families");
  std::vector<SinusoidFamily> out;
  for (int i = 0; i < cfg.interval_count; ++i) {
    SinusoidFamily f;
    f.interval = i;
    f.amplitude = rng.uniform(cfg.amplitude_min, cfg.amplitude_max);
    f.phase = rng.uniform(cfg.phase_min, cfg.phase_max);
    out.push_back(f);
  }
  return out;
}

Task shift_targets(const Task& task, double offset) {
  require(task.head() == nn::Head::Regression, "meta-augmentation applies to regression tasks only");
  Task out = task;
  out.support.targets.array() += offset;
  out.query.targets.array() += offset;
  out.target_offset += offset;
  return out;
}

Task meta_augment_task(const Task& task, std::uint64_t seed, double offset_range) {
  require(task.head() == nn::Head::Regression, "meta-augmentation applies to regression tasks only");
  Rng rng(seed, "augment");
  return shift_targets(task, rng.uniform(-offset_range, offset_range));
}

// ----------------------------------------------------------- classification

std::size_t ClassPool::min_samples_per_class() const {
  std::size_t m = classes.empty() ? 0 : classes.front().samples.size();
  for (const auto& c : classes) m = std::min(m, c.samples.size());
  return m;
}

Partitioning make_partitions(const ClassPool& pool, int k_way, std::uint64_t seed) {
  require(k_way > 0, "make_partitions: k_way must be positive");
  require(pool.class_count() >= static_cast<std::size_t>(k_way),
          "make_partitions: fewer classes than k_way");
  Rng rng(seed, "partitions");
  const auto order = permutation(pool.class_count(), rng);
  Partitioning p;
  p.k_way = k_way;
  const std::size_t full = pool.class_count() / static_cast<std::size_t>(k_way);
  for (std::size_t g = 0; g < full; ++g) {
    p.groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(g * k_way),
                          order.begin() + static_cast<std::ptrdiff_t>((g + 1) * k_way));
  }
  p.dropped.assign(order.begin() + static_cast<std::ptrdiff_t>(full * k_way), order.end());
  return p;
}

Task sample_classification_task(const ClassPool& pool, const ClassTaskSpec& spec, std::uint64_t seed) {
  require(spec.k_way > 0 && spec.k_shot > 0 && spec.q_query > 0,
          "classification task: k_way, k_shot and q_query must be positive");
  const std::size_t per_class = static_cast<std::size_t>(spec.k_shot + spec.q_query);
  Rng rng(seed, "classification.task");

  ClassFamily fam;
  fam.mode = spec.mode;
  std::vector<int> chosen;  // pool indices, position = label
  if (spec.mode == LabelMode::Ordered) {
    require(pool.partitions.has_value(), "ordered mode needs partitions (make_partitions)");
    require(pool.partitions->k_way == spec.k_way, "partition size differs from k_way");
    require(!pool.partitions->groups.empty(), "no partitions");
    const auto g = rng.index(pool.partitions->groups.size());
    fam.partition = static_cast<int>(g);
    chosen = pool.partitions->groups[g];
  } else {
    require(pool.class_count() >= static_cast<std::size_t>(spec.k_way), "fewer classes than k_way");
    const auto order = permutation(pool.class_count(), rng);
    std::vector<int> picked(order.begin(), order.begin() + spec.k_way);
    const auto labels = permutation(static_cast<std::size_t>(spec.k_way), rng);
    chosen.assign(static_cast<std::size_t>(spec.k_way), 0);
    for (int i = 0; i < spec.k_way; ++i) chosen[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] = picked[static_cast<std::size_t>(i)];
  }

  const int dim = pool.dim;
  Task t;
  t.support.inputs.resize(spec.k_way * spec.k_shot, dim);
  t.query.inputs.resize(spec.k_way * spec.q_query, dim);
  for (int label = 0; label < spec.k_way; ++label) {
    const auto& cls = pool.classes[static_cast<std::size_t>(chosen[static_cast<std::size_t>(label)])];
    require(cls.samples.size() >= per_class,
            "classification task: k_shot + q_query exceeds samples of class " + std::to_string(cls.id));
    const auto draw = permutation(cls.samples.size(), rng);
    for (int s = 0; s < spec.k_shot; ++s) {
      t.support.inputs.row(label * spec.k_shot + s) =
          cls.samples[static_cast<std::size_t>(draw[static_cast<std::size_t>(s)])].transpose();
    }
    for (int q = 0; q < spec.q_query; ++q) {
      t.query.inputs.row(label * spec.q_query + q) =
          cls.samples[static_cast<std::size_t>(draw[static_cast<std::size_t>(spec.k_shot + q)])].transpose();
    }
    fam.class_ids.push_back(cls.id);
  }
  // Rows are grouped by label.
  for (int label = 0; label < spec.k_way; ++label) {
    for (int s = 0; s < spec.k_shot; ++s) t.support.labels.push_back(label);
  }
  for (int label = 0; label < spec.k_way; ++label) {
    for (int q = 0; q < spec.q_query; ++q) t.query.labels.push_back(label);
  }
  t.family = std::move(fam);
  return t;
}

ClassPool synth_class_pool(const SynthPoolConfig& cfg, std::uint64_t seed) {
  require(cfg.n_classes > 0 && cfg.dim > 0 && cfg.samples_per_class > 0,
          "synth_class_pool: sizes must be positive");
  require(cfg.within_stddev > 0.0 && cfg.center_stddev > 0.0, "synth_class_pool: bad scales");
  Rng rng(seed, "synth.pool");
  const double min_dist = cfg.min_center_spacing * cfg.within_stddev;
  std::vector<Vector> centers;
  for (int c = 0; c < cfg.n_classes; ++c) {
    Vector center(cfg.dim);
    for (int attempt = 0;; ++attempt) {
      require(attempt < 100000, "synth_class_pool: cannot place centers with the requested spacing");
      for (int d = 0; d < cfg.dim; ++d) center(d) = rng.normal(0.0, cfg.center_stddev);
      const bool ok = std::all_of(centers.begin(), centers.end(),
                                  [&](const Vector& o) { return (o - center).norm() >= min_dist; });
      if (ok) break;
    }
    centers.push_back(center);
  }
  ClassPool pool;
  pool.dim = cfg.dim;
  for (int c = 0; c < cfg.n_classes; ++c) {
    ClassSamples cls;
    cls.id = c;
    cls.name = "synth" + std::to_string(c);
    for (int s = 0; s < cfg.samples_per_class; ++s) {
      Vector v(cfg.dim);
      for (int d = 0; d < cfg.dim; ++d) v(d) = centers[static_cast<std::size_t>(c)](d) + rng.normal(0.0, cfg.within_stddev);
      cls.samples.push_back(std::move(v));
    }
    pool.classes.push_back(std::move(cls));
  }
  return pool;
}

ClassPool synth_class_pool(int n_classes, int dim, int samples_per_class, std::uint64_t seed) {
  SynthPoolConfig cfg;
  cfg.n_classes = n_classes;
  cfg.dim = dim;
  cfg.samples_per_class = samples_per_class;
  return synth_class_pool(cfg, seed);
}

}  // namespace metaof::tasks
