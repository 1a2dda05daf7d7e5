#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "metaof/autodiff.hpp"

namespace metaof::nn {

using ad::Matrix;
using Vector = Eigen::VectorXd;

enum class Head { Regression, Classification };

/// Fully connected rectifier network.
struct ModelSpec {
  int input_dim = 1;
  std::vector<int> hidden = {40, 40};
  int output_dim = 1;
  Head head = Head::Regression;

  /// Throws ContractError when the spec is malformed.
  void validate() const;
  [[nodiscard]] std::size_t layer_count() const { return hidden.size() + 1; }
};

/// Ordered, named parameter arrays. Layer l owns "l<l>.weight" (in x out) and
/// "l<l>.bias" (1 x out).
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Matrix value;
  };

  ParameterSet() = default;
  explicit ParameterSet(std::vector<Entry> entries);

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::size_t parameter_count() const;
  [[nodiscard]] const Entry& operator[](std::size_t i) const { return entries_[i]; }
  [[nodiscard]] const Matrix& value(std::size_t i) const { return entries_[i].value; }
  [[nodiscard]] const std::vector<Entry>& entries() const { return entries_; }
  [[nodiscard]] const Matrix& find(const std::string& name) const;

  /// Concatenation of all arrays in declaration order, row-major.
  [[nodiscard]] Vector flatten() const;
  /// Same names and shapes, values taken from `flat`.
  [[nodiscard]] ParameterSet unflatten(const Vector& flat) const;
  /// Same names and shapes, new values (shapes must match).
  [[nodiscard]] ParameterSet with_values(std::vector<Matrix> values) const;
  [[nodiscard]] bool same_layout(const ParameterSet& other) const;

  bool operator==(const ParameterSet& other) const;

 private:
  std::vector<Entry> entries_;
};

/// Weights from N(0, 0.01) truncated at +-2 sigma, zero biases.
ParameterSet init_params(const ModelSpec& spec, std::uint64_t seed);

/// Places each parameter on `tape` as a differentiable leaf.
std::vector<ad::Var> to_vars(ad::Tape& tape, const ParameterSet& params);

/// Network output for a batch `x` (n x input_dim). Regression returns n x 1
/// raw outputs, classification returns n x k logits.
ad::Var forward(std::span<const ad::Var> params, const ModelSpec& spec, ad::Var x);
/// Value-only evaluation.
Matrix predict(const ParameterSet& params, const ModelSpec& spec, const Matrix& x);

/// Mean-squared error against `targets` (n x 1).
ad::Var mse_loss(ad::Var predictions, const Matrix& targets);
/// Mean softmax cross-entropy of logits against integer labels.
ad::Var cross_entropy_loss(ad::Var logits, std::span<const int> labels);

double mse_value(const Matrix& predictions, const Matrix& targets);
double cross_entropy_value(const Matrix& logits, std::span<const int> labels);
/// Fraction of rows whose argmax equals the label.
double accuracy(const Matrix& logits, std::span<const int> labels);

/// Binary checkpoint: magic, entry table (length-prefixed UTF-8 names with
/// shapes), then little-endian float64 values in declaration order.
void save_params(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_params(const std::filesystem::path& path);

}  // namespace metaof::nn
