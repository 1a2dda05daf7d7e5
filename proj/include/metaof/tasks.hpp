#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "metaof/nn.hpp"

namespace metaof::tasks {

using nn::Matrix;
using nn::Vector;

/// One side of a task: inputs (n x d) and either regression targets (n x 1)
/// or integer class labels.
struct Split {
  Matrix inputs;
  Matrix targets;
  std::vector<int> labels;

  [[nodiscard]] Eigen::Index size() const { return inputs.rows(); }
};

struct SinusoidFamily {
  int interval = 0;
  double amplitude = 1.0;
  double phase = 0.0;
};

enum class LabelMode { Ordered, Intershuffle };

struct ClassFamily {
  int partition = -1;  // -1 for intershuffled tasks
  std::vector<int> class_ids;  // class_ids[label]
  LabelMode mode = LabelMode::Ordered;
};

struct Task {
  Split support;
  Split query;
  std::variant<SinusoidFamily, ClassFamily> family;
  /// Offset added by meta-augmentation (0 when not augmented).
  double target_offset = 0.0;

  [[nodiscard]] nn::Head head() const {
    return std::holds_alternative<SinusoidFamily>(family) ? nn::Head::Regression
                                                          : nn::Head::Classification;
  }
};

// ---------------------------------------------------------------- sinusoids

struct Interval {
  double lo;
  double hi;
};

struct SinusoidConfig {
  double amplitude_min = 0.1;
  double amplitude_max = 5.0;
  double phase_min = 0.0;
  double phase_max = 3.14159265358979323846;
  double domain_min = -5.0;
  double domain_max = 5.0;
  double interval_width = 0.5;
  double gap_width = 0.5;
  int interval_count = 10;
  int k_shot = 5;
  int q_query = 10;

  void validate() const;
  /// [-5,-4.5], [-4,-3.5], ..., [4,4.5] with the defaults.
  [[nodiscard]] std::vector<Interval> intervals() const;
};

/// Fresh task: random interval, A ~ U[amplitude range], phase ~ U[phase range],
/// all x uniform in the chosen interval, y = A sin(x - phase).
Task sample_sinusoid_task(const SinusoidConfig& cfg, std::uint64_t seed);

/// New support/query draws for a fixed (interval, A, phase) family.
Task sample_sinusoid_points(const SinusoidConfig& cfg, const SinusoidFamily& family,
                            std::uint64_t seed);

/// One fixed (A, phase) per interval: the non-mutually-exclusive meta-training
/// task set, where a single function can fit every task.
std::vector<SinusoidFamily> make_sinusoid_families(const SinusoidConfig& cfg, std::uint64_t seed);

/// Adds one offset c ~ U[-range, range] to every support and query target.
/// Regression tasks only.
Task meta_augment_task(const Task& task, std::uint64_t seed, double offset_range = 2.0);
/// Same, with an explicit offset.
Task shift_targets(const Task& task, double offset);

// ----------------------------------------------------------- classification

struct ClassSamples {
  int id = 0;
  std::string name;
  std::vector<Vector> samples;
};

struct Partitioning {
  int k_way = 0;
  std::vector<std::vector<int>> groups;  // indices into ClassPool::classes
  std::vector<int> dropped;              // classes left over after chunking
};

struct ClassPool {
  std::vector<ClassSamples> classes;
  int dim = 0;
  std::optional<Partitioning> partitions;
  /// Files skipped or classes dropped during ingestion.
  std::vector<std::string> warnings;

  [[nodiscard]] std::size_t class_count() const { return classes.size(); }
  [[nodiscard]] std::size_t min_samples_per_class() const;
};

/// Shuffles classes with `seed` and chunks them into disjoint k-sized groups.
Partitioning make_partitions(const ClassPool& pool, int k_way, std::uint64_t seed);

struct ClassTaskSpec {
  LabelMode mode = LabelMode::Ordered;
  int k_way = 5;
  int k_shot = 1;
  int q_query = 5;
};

/// Ordered mode draws one partition and labels each class by its position in
/// the partition, so a class keeps one label in every task. Intershuffle mode
/// draws k classes from the pool and labels them by a fresh permutation.
Task sample_classification_task(const ClassPool& pool, const ClassTaskSpec& spec, std::uint64_t seed);

struct SynthPoolConfig {
  int n_classes = 20;
  int dim = 8;
  int samples_per_class = 20;
  double within_stddev = 1.0;
  double center_stddev = 4.0;
  double min_center_spacing = 6.0;  // in units of within_stddev
};

/// Isotropic Gaussian clusters, one per class, centers at least
/// min_center_spacing * within_stddev apart.
ClassPool synth_class_pool(const SynthPoolConfig& cfg, std::uint64_t seed);
ClassPool synth_class_pool(int n_classes, int dim, int samples_per_class, std::uint64_t seed);

/// Reads <root>/<class>/<image>; PGM (P2/P5) and PNG grayscale or RGB images
/// are accepted. Images are area-averaged to side x side, scaled to [0,1] and
/// flattened. Classes and files are visited in lexicographic order.
ClassPool load_image_pool(const std::filesystem::path& root, int side);

/// Area-averaging resize of a row-major grayscale image in [0,1].
Matrix downsample_area(const Matrix& image, int side);

/// CSV with header "class,samples".
void write_pool_stats(const ClassPool& pool, const std::filesystem::path& path);

}  // namespace metaof::tasks
