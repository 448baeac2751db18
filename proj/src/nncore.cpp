#include "lectrack/nncore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "lectrack/kernels.hpp"
#include "lectrack/util.hpp"

namespace lectrack::nn {

Parameter& ParamStore::add(std::string name, std::size_t rows, std::size_t cols) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  if (rows == 0 || cols == 0) throw std::invalid_argument("empty parameter " + name);
  Parameter& p = params_.emplace_back();
  p.name = std::move(name);
  p.value = Tensor(rows, cols);
  p.grad = Tensor(rows, cols);
  p.first_moment = Tensor(rows, cols);
  p.second_moment = Tensor(rows, cols);
  return p;
}

Parameter& ParamStore::at(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range("no parameter named " + std::string(name));
}

const Parameter& ParamStore::at(std::string_view name) const {
  return const_cast<ParamStore*>(this)->at(name);
}

bool ParamStore::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const Parameter& p) { return p.name == name; });
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

bool ParamStore::same_values(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != other.params_[i].name) return false;
    if (!(params_[i].value == other.params_[i].value)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.index >= nodes_.size()) throw std::logic_error("variable not on this tape");
  return nodes_[v.index];
}

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::input(std::span<const double> values) {
  Node n{.op = Op::kInput};
  n.value.assign(values.begin(), values.end());
  return push(std::move(n));
}

Var Tape::affine(Parameter& weight, Var x, Parameter* bias) {
  const auto& in = node(x).value;
  const std::size_t rows = weight.value.rows(), cols = weight.value.cols();
  if (in.size() != cols)
    throw std::invalid_argument("affine: " + weight.name + " expects input of " +
                                std::to_string(cols) + ", got " + std::to_string(in.size()));
  if (bias && (bias->value.size() != rows))
    throw std::invalid_argument("affine: bias " + bias->name + " has wrong size");
  Node n{.op = Op::kAffine, .args = {x.index}, .weight = &weight, .bias = bias};
  n.value.resize(rows);
  kernels::gemv(weight.value.data(), rows, cols, in, n.value);
  if (bias) {
    const auto b = bias->value.data();
    for (std::size_t r = 0; r < rows; ++r) n.value[r] += b[r];
  }
  return push(std::move(n));
}

Var Tape::lookup(Parameter& table, std::size_t row) {
  if (row >= table.value.rows())
    throw std::out_of_range("lookup: row " + std::to_string(row) + " outside " + table.name);
  Node n{.op = Op::kLookup, .weight = &table, .aux = row};
  const auto r = table.value.row(row);
  n.value.assign(r.begin(), r.end());
  return push(std::move(n));
}

Var Tape::relu(Var x) {
  Node n{.op = Op::kRelu, .args = {x.index}};
  n.value = node(x).value;
  for (auto& v : n.value) v = v > 0.0 ? v : 0.0;
  return push(std::move(n));
}

Var Tape::tanh(Var x) {
  Node n{.op = Op::kTanh, .args = {x.index}};
  n.value = node(x).value;
  for (auto& v : n.value) v = std::tanh(v);
  return push(std::move(n));
}

Var Tape::sigmoid(Var x) {
  Node n{.op = Op::kSigmoid, .args = {x.index}};
  n.value = node(x).value;
  for (auto& v : n.value) v = nn::sigmoid(v);
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  const auto& va = node(a).value;
  const auto& vb = node(b).value;
  if (va.size() != vb.size()) throw std::invalid_argument("mul: size mismatch");
  Node n{.op = Op::kMul, .args = {a.index, b.index}};
  n.value.resize(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) n.value[i] = va[i] * vb[i];
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  const auto& va = node(a).value;
  const auto& vb = node(b).value;
  if (va.size() != vb.size()) throw std::invalid_argument("add: size mismatch");
  Node n{.op = Op::kAdd, .args = {a.index, b.index}};
  n.value.resize(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) n.value[i] = va[i] + vb[i];
  return push(std::move(n));
}

Var Tape::concat(Var a, Var b) {
  const auto& va = node(a).value;
  const auto& vb = node(b).value;
  Node n{.op = Op::kConcat, .args = {a.index, b.index}};
  n.value.reserve(va.size() + vb.size());
  n.value.insert(n.value.end(), va.begin(), va.end());
  n.value.insert(n.value.end(), vb.begin(), vb.end());
  return push(std::move(n));
}

Var Tape::slice(Var x, std::size_t offset, std::size_t length) {
  const auto& vx = node(x).value;
  if (offset + length > vx.size()) throw std::invalid_argument("slice: out of range");
  Node n{.op = Op::kSlice, .args = {x.index}, .aux = offset};
  n.value.assign(vx.begin() + offset, vx.begin() + offset + length);
  return push(std::move(n));
}

Var Tape::sum(std::span<const Var> terms) {
  if (terms.empty()) throw std::invalid_argument("sum: no terms");
  Node n{.op = Op::kSum};
  n.value.assign(node(terms[0]).value.size(), 0.0);
  for (Var t : terms) {
    const auto& vt = node(t).value;
    if (vt.size() != n.value.size()) throw std::invalid_argument("sum: size mismatch");
    for (std::size_t i = 0; i < vt.size(); ++i) n.value[i] += vt[i];
    n.args.push_back(t.index);
  }
  return push(std::move(n));
}

namespace {

// Returns log-sum-exp and fills probs.
double stable_softmax(std::span<const double> logits, std::vector<double>& probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  probs.resize(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - mx);
    z += probs[i];
  }
  for (auto& p : probs) p /= z;
  return mx + std::log(z);
}

}  // namespace

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  std::vector<double> probs;
  stable_softmax(logits, probs);
  return probs;
}

Var Tape::softmax(Var logits) {
  const auto& vl = node(logits).value;
  if (vl.empty()) throw std::invalid_argument("softmax: empty input");
  Node n{.op = Op::kSoftmax, .args = {logits.index}};
  stable_softmax(vl, n.value);
  return push(std::move(n));
}

Var Tape::softmax_cross_entropy(Var logits, std::size_t target) {
  const auto& vl = node(logits).value;
  if (target >= vl.size())
    throw std::invalid_argument("softmax_cross_entropy: target " + std::to_string(target) +
                                " outside " + std::to_string(vl.size()) + " classes");
  Node n{.op = Op::kSoftmaxXent, .args = {logits.index}, .aux = target};
  const double lse = stable_softmax(vl, n.extra);
  n.value = {lse - vl[target]};
  return push(std::move(n));
}

std::span<const double> Tape::value(Var v) const { return node(v).value; }

std::span<const double> Tape::probabilities(Var xent) const {
  const Node& n = node(xent);
  if (n.op != Op::kSoftmaxXent) throw std::logic_error("probabilities: not a cross-entropy node");
  return n.extra;
}

std::span<const double> Tape::gradient(Var v) const { return node(v).grad; }

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw std::logic_error("backward called before any forward computation");
  const Node& root = node(loss);
  if (root.value.size() != 1) throw std::logic_error("backward: loss must be a scalar");

  for (std::size_t i = 0; i <= loss.index; ++i) nodes_[i].grad.assign(nodes_[i].value.size(), 0.0);
  nodes_[loss.index].grad[0] = 1.0;

  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    const auto& g = n.grad;
    if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
    switch (n.op) {
      case Op::kInput:
        break;
      case Op::kAffine: {
        Node& x = nodes_[n.args[0]];
        Parameter& w = *n.weight;
        const std::size_t rows = w.value.rows(), cols = w.value.cols();
        kernels::outer_accumulate(w.grad.data(), rows, cols, g, x.value);
        kernels::gemv_transpose_accumulate(w.value.data(), rows, cols, g, x.grad);
        if (n.bias) {
          auto db = n.bias->grad.data();
          for (std::size_t r = 0; r < rows; ++r) db[r] += g[r];
        }
        break;
      }
      case Op::kLookup: {
        auto row = n.weight->grad.row(n.aux);
        for (std::size_t k = 0; k < g.size(); ++k) row[k] += g[k];
        break;
      }
      case Op::kRelu: {
        Node& x = nodes_[n.args[0]];
        for (std::size_t k = 0; k < g.size(); ++k)
          if (x.value[k] > 0.0) x.grad[k] += g[k];
        break;
      }
      case Op::kTanh: {
        Node& x = nodes_[n.args[0]];
        for (std::size_t k = 0; k < g.size(); ++k) x.grad[k] += g[k] * (1.0 - n.value[k] * n.value[k]);
        break;
      }
      case Op::kSigmoid: {
        Node& x = nodes_[n.args[0]];
        for (std::size_t k = 0; k < g.size(); ++k) x.grad[k] += g[k] * n.value[k] * (1.0 - n.value[k]);
        break;
      }
      case Op::kMul: {
        Node& a = nodes_[n.args[0]];
        Node& b = nodes_[n.args[1]];
        for (std::size_t k = 0; k < g.size(); ++k) {
          a.grad[k] += g[k] * b.value[k];
          b.grad[k] += g[k] * a.value[k];
        }
        break;
      }
      case Op::kAdd: {
        for (std::uint32_t arg : n.args) {
          Node& a = nodes_[arg];
          for (std::size_t k = 0; k < g.size(); ++k) a.grad[k] += g[k];
        }
        break;
      }
      case Op::kSum: {
        for (std::uint32_t arg : n.args) {
          Node& a = nodes_[arg];
          for (std::size_t k = 0; k < g.size(); ++k) a.grad[k] += g[k];
        }
        break;
      }
      case Op::kConcat: {
        Node& a = nodes_[n.args[0]];
        Node& b = nodes_[n.args[1]];
        const std::size_t na = a.value.size();
        for (std::size_t k = 0; k < na; ++k) a.grad[k] += g[k];
        for (std::size_t k = 0; k < b.value.size(); ++k) b.grad[k] += g[na + k];
        break;
      }
      case Op::kSlice: {
        Node& x = nodes_[n.args[0]];
        for (std::size_t k = 0; k < g.size(); ++k) x.grad[n.aux + k] += g[k];
        break;
      }
      case Op::kSoftmax: {
        Node& x = nodes_[n.args[0]];
        double dot = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) dot += n.value[k] * g[k];
        for (std::size_t k = 0; k < g.size(); ++k) x.grad[k] += n.value[k] * (g[k] - dot);
        break;
      }
      case Op::kSoftmaxXent: {
        Node& x = nodes_[n.args[0]];
        const double up = g[0];
        for (std::size_t k = 0; k < n.extra.size(); ++k) {
          const double onehot = k == n.aux ? 1.0 : 0.0;
          x.grad[k] += up * (n.extra[k] - onehot);
        }
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Optimization

void adam_step(ParamStore& store, const AdamConfig& config) {
  for (const auto& p : store.params_) {
    for (double g : p.grad.data())
      if (!std::isfinite(g)) throw NonFiniteGradient(p.name);
  }
  ++store.adam_steps_;
  const double t = static_cast<double>(store.adam_steps_);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (auto& p : store.params_) {
    auto w = p.value.data();
    auto g = p.grad.data();
    auto m = p.first_moment.data();
    auto v = p.second_moment.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.epsilon);
    }
    p.grad.fill(0.0);
  }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store.params())
    for (double g : p.grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) scale_grad(store, max_norm / norm);
  return norm;
}

void scale_grad(ParamStore& store, double factor) {
  for (auto& p : store.params())
    for (double& g : p.grad.data()) g *= factor;
}

void init_params(ParamStore& store, const InitSpec& spec, std::mt19937_64& rng) {
  for (const auto& t : spec.tensors) {
    Parameter& p = store.at(t.name);
    if (t.kind == TensorInit::Kind::kZero) {
      p.value.fill(0.0);
      continue;
    }
    if (t.fan_in == 0) throw std::invalid_argument("init: zero fan-in for " + t.name);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(t.fan_in)));
    for (double& v : p.value.data()) v = dist(rng);
  }
  for (const auto& o : spec.overrides) {
    auto d = store.at(o.name).value.data();
    if (o.end > d.size() || o.begin > o.end) throw std::invalid_argument("init: bad override range");
    std::fill(d.begin() + o.begin, d.begin() + o.end, o.value);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'L', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view& in, const std::string& where) {
  if (in.size() < sizeof(T)) throw DataError("truncated checkpoint " + where);
  T v;
  std::memcpy(&v, in.data(), sizeof(T));
  in.remove_prefix(sizeof(T));
  return v;
}

std::string encode(const ParamStore& store) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.params().size()));
  for (const auto& p : store.params()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put<std::uint64_t>(out, p.value.rows());
    put<std::uint64_t>(out, p.value.cols());
    for (double v : p.value.data()) put<double>(out, v);
  }
  return out;
}

}  // namespace

void save_params(const ParamStore& store, const std::filesystem::path& path) {
  write_file(path, encode(store));
}

ParamStore load_params(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string where = path.string();
  std::string_view in(bytes);
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0) throw DataError("not a checkpoint: " + where);
  in.remove_prefix(4);
  if (get<std::uint32_t>(in, where) != kVersion) throw DataError("unsupported checkpoint version: " + where);
  const auto count = get<std::uint32_t>(in, where);
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, where);
    if (in.size() < len) throw DataError("truncated checkpoint " + where);
    std::string name(in.substr(0, len));
    in.remove_prefix(len);
    const auto rows = get<std::uint64_t>(in, where);
    const auto cols = get<std::uint64_t>(in, where);
    Parameter& p = store.add(std::move(name), rows, cols);
    for (double& v : p.value.data()) v = get<double>(in, where);
  }
  if (!in.empty()) throw DataError("trailing bytes in checkpoint " + where);
  return store;
}

std::uint64_t params_hash(const ParamStore& store) { return fnv1a64(encode(store)); }

}  // namespace lectrack::nn
