#include "metaof/nn.hpp"

#include <cmath>
#include <fstream>

#include "metaof/binio.hpp"
#include "metaof/error.hpp"
#include "metaof/rng.hpp"

namespace metaof::nn {

namespace {

constexpr char kParamMagic[9] = "MOPARAM1";
constexpr double kInitStddev = 0.01;
constexpr double kInitTruncation = 2.0;  // in standard deviations

}  // namespace

void ModelSpec::validate() const {
  require(input_dim > 0, "model: input_dim must be positive");
  require(output_dim > 0, "model: output_dim must be positive");
  for (int h : hidden) require(h > 0, "model: hidden sizes must be positive");
  require(head != Head::Regression || output_dim == 1, "model: regression head has output_dim 1");
  require(head != Head::Classification || output_dim >= 1, "model: classification needs k >= 1");
}

ParameterSet::ParameterSet(std::vector<Entry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      require(entries_[i].name != entries_[j].name, "duplicate parameter name " + entries_[i].name);
    }
  }
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

const Matrix& ParameterSet::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw ContractError("no parameter named " + name);
}

Vector ParameterSet::flatten() const {
  Vector flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index at = 0;
  for (const auto& e : entries_) {
    flat.segment(at, e.value.size()) = Eigen::Map<const Vector>(e.value.data(), e.value.size());
    at += e.value.size();
  }
  return flat;
}

ParameterSet ParameterSet::unflatten(const Vector& flat) const {
  require(static_cast<std::size_t>(flat.size()) == parameter_count(),
          "unflatten: vector length differs from parameter count");
  std::vector<Entry> out = entries_;
  Eigen::Index at = 0;
  for (auto& e : out) {
    Eigen::Map<Vector>(e.value.data(), e.value.size()) = flat.segment(at, e.value.size());
    at += e.value.size();
  }
  ParameterSet result;
  result.entries_ = std::move(out);
  return result;
}

ParameterSet ParameterSet::with_values(std::vector<Matrix> values) const {
  require(values.size() == entries_.size(), "with_values: entry count differs");
  ParameterSet result;
  result.entries_.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    require(values[i].rows() == entries_[i].value.rows() &&
                values[i].cols() == entries_[i].value.cols(),
            "with_values: shape differs for " + entries_[i].name);
    result.entries_.push_back(Entry{entries_[i].name, std::move(values[i])});
  }
  return result;
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) {
      return false;
    }
  }
  return true;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (!same_layout(other)) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].value != other.entries_[i].value) return false;
  }
  return true;
}

ParameterSet init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed, "init");
  std::vector<ParameterSet::Entry> entries;
  int fan_in = spec.input_dim;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const int fan_out = l < spec.hidden.size() ? spec.hidden[l] : spec.output_dim;
    Matrix w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      double z = 0.0;
      do {
        z = rng.normal(0.0, kInitStddev);
      } while (std::abs(z) > kInitTruncation * kInitStddev);
      w.data()[i] = z;
    }
    const std::string prefix = "l" + std::to_string(l);
    entries.push_back({prefix + ".weight", std::move(w)});
    entries.push_back({prefix + ".bias", Matrix::Zero(1, fan_out)});
    fan_in = fan_out;
  }
  return ParameterSet(std::move(entries));
}

std::vector<ad::Var> to_vars(ad::Tape& tape, const ParameterSet& params) {
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (const auto& e : params.entries()) vars.push_back(tape.variable(e.value));
  return vars;
}

ad::Var forward(std::span<const ad::Var> params, const ModelSpec& spec, ad::Var x) {
  require(params.size() == 2 * spec.layer_count(), "forward: parameter count does not match spec");
  require(x.cols() == spec.input_dim, "forward: input dimension mismatch");
  ad::Var h = x;
  const std::size_t layers = spec.layer_count();
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::matmul(h, params[2 * l]) + ad::broadcast_rows(params[2 * l + 1], h.rows());
    if (l + 1 < layers) h = ad::relu(h);
  }
  return h;
}

Matrix predict(const ParameterSet& params, const ModelSpec& spec, const Matrix& x) {
  require(params.size() == 2 * spec.layer_count(), "predict: parameter count does not match spec");
  require(x.cols() == spec.input_dim, "predict: input dimension mismatch");
  Matrix h = x;
  const std::size_t layers = spec.layer_count();
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix z = h * params.value(2 * l);
    z.rowwise() += params.value(2 * l + 1).row(0);
    h = l + 1 < layers ? Matrix(z.cwiseMax(0.0)) : std::move(z);
  }
  return h;
}

ad::Var mse_loss(ad::Var predictions, const Matrix& targets) {
  require(predictions.rows() > 0, "mse_loss: empty batch");
  require(predictions.rows() == targets.rows() && predictions.cols() == targets.cols(),
          "mse_loss: prediction/target shapes differ");
  ad::Var diff = predictions - predictions.tape()->constant(targets);
  return ad::scale(ad::sum(diff * diff), 1.0 / static_cast<double>(predictions.rows()));
}

namespace {

Matrix one_hot(std::span<const int> labels, Eigen::Index k) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < k, "label out of range");
    m(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return m;
}

}  // namespace

ad::Var cross_entropy_loss(ad::Var logits, std::span<const int> labels) {
  require(logits.rows() > 0, "cross_entropy_loss: empty batch");
  require(static_cast<std::size_t>(logits.rows()) == labels.size(),
          "cross_entropy_loss: batch sizes differ");
  ad::Var picked = ad::log_softmax(logits) * logits.tape()->constant(one_hot(labels, logits.cols()));
  return ad::scale(ad::sum(picked), -1.0 / static_cast<double>(logits.rows()));
}

double mse_value(const Matrix& predictions, const Matrix& targets) {
  require(predictions.rows() > 0, "mse: empty batch");
  require(predictions.rows() == targets.rows() && predictions.cols() == targets.cols(),
          "mse: prediction/target shapes differ");
  return (predictions - targets).squaredNorm() / static_cast<double>(predictions.rows());
}

double cross_entropy_value(const Matrix& logits, std::span<const int> labels) {
  require(logits.rows() > 0, "cross_entropy: empty batch");
  require(static_cast<std::size_t>(logits.rows()) == labels.size(), "cross_entropy: batch sizes differ");
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    require(label >= 0 && label < logits.cols(), "label out of range");
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    total += lse - logits(i, label);
  }
  return total / static_cast<double>(logits.rows());
}

double accuracy(const Matrix& logits, std::span<const int> labels) {
  require(logits.rows() > 0, "accuracy: empty batch");
  require(static_cast<std::size_t>(logits.rows()) == labels.size(), "accuracy: batch sizes differ");
  int correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

void save_params(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  binio::put_magic(out, kParamMagic);
  binio::put_u64(out, params.size());
  for (const auto& e : params.entries()) {
    binio::put_string(out, e.name);
    binio::put_u64(out, 2);
    binio::put_u64(out, static_cast<std::uint64_t>(e.value.rows()));
    binio::put_u64(out, static_cast<std::uint64_t>(e.value.cols()));
  }
  for (const auto& e : params.entries()) {
    for (Eigen::Index i = 0; i < e.value.size(); ++i) binio::put_f64(out, e.value.data()[i]);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

ParameterSet load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  binio::expect_magic(in, kParamMagic);
  const auto count = binio::get_u64(in);
  if (count > 4096) throw IoError("implausible parameter table size in " + path.string());
  std::vector<ParameterSet::Entry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = binio::get_string(in);
    const auto dims = binio::get_u64(in);
    if (dims != 2) throw IoError("only 2-d parameter arrays are supported");
    const auto rows = binio::get_u64(in);
    const auto cols = binio::get_u64(in);
    if (rows > (1u << 24) || cols > (1u << 24)) throw IoError("implausible parameter shape");
    entries.push_back({std::move(name), Matrix(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols))});
  }
  for (auto& e : entries) {
    for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] = binio::get_f64(in);
  }
  return ParameterSet(std::move(entries));
}

}  // namespace metaof::nn
