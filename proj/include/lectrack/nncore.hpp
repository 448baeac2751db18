#pragma once

// Minimal differentiable substrate: tensors, named parameters with ADAM state,
// a reverse-mode tape over vector-valued nodes, initialization, checkpoints.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lectrack::nn {

// Row-major matrix of doubles; a column vector has cols == 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct AdamConfig;

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;
};

// Named parameters in insertion order. Addresses are stable across add().
class ParamStore {
 public:
  Parameter& add(std::string name, std::size_t rows, std::size_t cols);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::deque<Parameter>& params() { return params_; }
  const std::deque<Parameter>& params() const { return params_; }

  void zero_grad();
  std::int64_t adam_steps() const { return adam_steps_; }
  std::size_t parameter_count() const;

  // Values only; gradients and optimizer state are ignored.
  bool same_values(const ParamStore& other) const;

 private:
  friend void adam_step(ParamStore&, const AdamConfig&);
  std::deque<Parameter> params_;
  std::int64_t adam_steps_ = 0;
};

struct Var {
  std::uint32_t index = UINT32_MAX;
  bool valid() const { return index != UINT32_MAX; }
};

// Records a forward computation and replays it backwards.
// Parameters referenced by a tape must outlive it.
class Tape {
 public:
  Var input(std::span<const double> values);

  // W x + b, W is out x in. `bias` may be null.
  Var affine(Parameter& weight, Var x, Parameter* bias);
  Var lookup(Parameter& table, std::size_t row);
  Var relu(Var x);
  Var tanh(Var x);
  Var sigmoid(Var x);
  Var mul(Var a, Var b);
  Var add(Var a, Var b);
  Var concat(Var a, Var b);
  Var slice(Var x, std::size_t offset, std::size_t length);
  Var sum(std::span<const Var> terms);
  Var softmax(Var logits);
  // Scalar -log softmax(logits)[target]; probabilities() gives the softmax.
  Var softmax_cross_entropy(Var logits, std::size_t target);

  std::span<const double> value(Var v) const;
  std::span<const double> probabilities(Var xent) const;
  std::span<const double> gradient(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Accumulates d(loss)/d(param) into every reachable Parameter::grad.
  void backward(Var loss);

 private:
  enum class Op : std::uint8_t {
    kInput, kAffine, kLookup, kRelu, kTanh, kSigmoid, kMul, kAdd,
    kConcat, kSlice, kSum, kSoftmax, kSoftmaxXent
  };
  struct Node {
    Op op;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::uint32_t> args;
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;
    std::size_t aux = 0;
    std::vector<double> extra;  // softmax probabilities for kSoftmaxXent
  };

  const Node& node(Var v) const;
  Var push(Node n);

  std::vector<Node> nodes_;
};

double sigmoid(double x);
// Max-subtracted softmax; the tape uses the same routine.
std::vector<double> softmax(std::span<const double> logits);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter " + param), param_(param) {}
  const std::string& parameter() const { return param_; }

 private:
  std::string param_;
};

// Bias-corrected ADAM update followed by zeroing the gradients. If any
// gradient entry is non-finite, throws before touching anything.
void adam_step(ParamStore& store, const AdamConfig& config);

// Rescales all gradients so their global L2 norm is at most max_norm
// (max_norm <= 0 disables). Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);
void scale_grad(ParamStore& store, double factor);

struct TensorInit {
  enum class Kind { kGaussian, kZero };
  std::string name;
  std::size_t fan_in = 1;
  Kind kind = Kind::kGaussian;
};

struct ConstantOverride {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 0;
  double value = 0.0;
};

// Gaussian tensors get N(0, 2/fan_in) entries; overrides apply afterwards.
struct InitSpec {
  std::vector<TensorInit> tensors;
  std::vector<ConstantOverride> overrides;
};

void init_params(ParamStore& store, const InitSpec& spec, std::mt19937_64& rng);

// Binary checkpoint: magic, version, then (name, rows, cols, values) per tensor.
void save_params(const ParamStore& store, const std::filesystem::path& path);
ParamStore load_params(const std::filesystem::path& path);
std::uint64_t params_hash(const ParamStore& store);

}  // namespace lectrack::nn
