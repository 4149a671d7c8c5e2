#include "cvslt/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace cvslt {

namespace {

using detail::Buffer;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

std::shared_ptr<detail::Node> new_node(Shape shape, Buffer value) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Builds an operation result. The closure is kept only when some input needs
// gradients and recording is enabled on this thread.
Tensor make_result(Shape shape, Buffer value, std::initializer_list<Tensor> inputs,
                   std::function<void(detail::Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(value));
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of input i, or an empty span when it needs none.
std::span<double> input_grad(detail::Node& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return {};
  return in->grad_buffer();
}

void require_same_numel(const Tensor& a, std::span<const std::uint8_t> mask, const char* what) {
  if (!mask.empty() && mask.size() != a.numel()) {
    throw DimensionError(std::string(what) + ": mask has " + std::to_string(mask.size()) +
                         " entries for shape " + shape_str(a.shape()));
  }
}

// Number of times `b` repeats inside `a` under suffix broadcasting.
std::size_t broadcast_repeats(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() &&
            std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " +
                         shape_str(sa));
  }
  return b.numel() == 0 ? 0 : a.numel() / b.numel();
}

template <class Forward, class Derivative>
Tensor unary(const Tensor& a, Forward f, Derivative df) {
  const auto x = a.values();
  Buffer y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(a.shape(), std::move(y), {a}, [df](detail::Node& self) {
    auto gx = input_grad(self, 0);
    if (gx.empty()) return;
    const auto& x = self.inputs[0]->value;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<double> detail::Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  node_ = new_node(std::move(shape), Buffer(values.begin(), values.end()));
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::ptrdiff_t axis) const { return shape()[normalize_axis(axis, rank())]; }

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::values() const { return node_->value; }

std::span<double> Tensor::data() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.clear(); }

std::uint64_t Tensor::id() const { return node_->id; }

Tensor Tensor::detach() const { return Tensor(new_node(shape(), node_->value)); }

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

namespace {

std::vector<detail::Node*> reachable(const Tensor& root) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node()};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in && in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });
  return order;
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  auto order = reachable(loss);
  for (auto* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto* n : order) {
    if (n->backward) n->backward(*n);
  }
}

std::vector<std::uint64_t> reachable_leaves(const Tensor& output) {
  std::vector<std::uint64_t> ids;
  if (!output.defined() || !output.requires_grad()) return ids;
  for (auto* n : reachable(output)) {
    if (!n->backward) ids.push_back(n->id);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// AttentionMask

AttentionMask AttentionMask::key_padding(std::span<const std::uint8_t> key_mask, std::size_t batch,
                                         std::size_t queries, std::size_t keys) {
  if (key_mask.size() != batch * keys) {
    throw DimensionError("key mask has " + std::to_string(key_mask.size()) + " entries, expected " +
                         std::to_string(batch * keys));
  }
  AttentionMask m{batch, queries, keys, std::vector<std::uint8_t>(batch * queries * keys)};
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t q = 0; q < queries; ++q)
      std::copy_n(key_mask.begin() + static_cast<std::ptrdiff_t>(b * keys), keys,
                  m.keep.begin() + static_cast<std::ptrdiff_t>((b * queries + q) * keys));
  return m;
}

AttentionMask AttentionMask::causal(std::span<const std::uint8_t> key_mask, std::size_t batch,
                                    std::size_t length) {
  auto m = key_padding(key_mask, batch, length, length);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t q = 0; q < length; ++q)
      for (std::size_t k = q + 1; k < length; ++k) m.keep[(b * length + q) * length + k] = 0;
  return m;
}

// ---------------------------------------------------------------------------
// ParameterStore

Tensor ParameterStore::add(const std::string& name, Tensor value) {
  if (name.empty()) throw ContractError("parameter name must not be empty");
  if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
  if (!value.requires_grad()) throw ContractError("parameter '" + name + "' must require gradients");
  index_.emplace(name, params_.size());
  by_node_.emplace(value.id(), params_.size());
  params_.push_back({name, value});
  return value;
}

Tensor ParameterStore::uniform(const std::string& name, Shape shape, double bound,
                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return add(name, Tensor(std::move(shape), std::move(v), true));
}

Tensor ParameterStore::normal(const std::string& name, Shape shape, double stddev,
                              std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return add(name, Tensor(std::move(shape), std::move(v), true));
}

Tensor ParameterStore::constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value, true));
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

std::string ParameterStore::name_of(std::uint64_t node_id) const {
  auto it = by_node_.find(node_id);
  return it == by_node_.end() ? std::string() : params_[it->second].name;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  if (b.rank() > a.rank()) return add(b, a);
  const auto reps = broadcast_repeats(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  const auto n = bv.size();
  Buffer y(av.begin(), av.end());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] += bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, [reps, n](detail::Node& self) {
    if (auto ga = input_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    if (auto gb = input_grad(self, 1); !gb.empty())
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[r * n + i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto reps = broadcast_repeats(a, b, "sub");
  const auto av = a.values();
  const auto bv = b.values();
  const auto n = bv.size();
  Buffer y(av.begin(), av.end());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] -= bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, [reps, n](detail::Node& self) {
    if (auto ga = input_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    if (auto gb = input_grad(self, 1); !gb.empty())
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < n; ++i) gb[i] -= self.grad[r * n + i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (b.rank() > a.rank()) return mul(b, a);
  const auto reps = broadcast_repeats(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  const auto n = bv.size();
  Buffer y(av.size());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] = av[r * n + i] * bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, [reps, n](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto ga = input_grad(self, 0); !ga.empty())
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < n; ++i) ga[r * n + i] += self.grad[r * n + i] * bv[i];
    if (auto gb = input_grad(self, 1); !gb.empty())
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[r * n + i] * av[r * n + i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  const auto v = a.values();
  double s = 0.0;
  for (double x : v) s += x;
  return make_result({}, {s}, {a}, [](detail::Node& self) {
    auto g = input_grad(self, 0);
    for (auto& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_last(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("sum_last on a scalar");
  const auto n = a.dim(-1);
  const auto rows = a.numel() / std::max<std::size_t>(n, 1);
  Shape out(a.shape().begin(), a.shape().end() - 1);
  const auto v = a.values();
  Buffer y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < n; ++i) y[r] += v[r * n + i];
  return make_result(std::move(out), std::move(y), {a}, [n, rows](detail::Node& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += self.grad[r];
  });
}

Tensor masked_mean(const Tensor& a, std::span<const std::uint8_t> mask) {
  require_same_numel(a, mask, "masked_mean");
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  if (m.empty()) m.assign(a.numel(), 1);
  const double count = static_cast<double>(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; }));
  if (count == 0) throw ContractError("masked_mean over an all-zero mask");
  const auto v = a.values();
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (m[i]) s += v[i];
  return make_result({}, {s / count}, {a}, [m = std::move(m), count](detail::Node& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    const double d = self.grad[0] / count;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (m[i]) g[i] += d;
  });
}

// ---------------------------------------------------------------------------
// Matrix products

Tensor matmul(const Tensor& a, const Tensor& b, Transpose transpose) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const bool tb = transpose == Transpose::kRight;
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t bk = tb ? b.dim(-1) : b.dim(-2);
  const std::size_t n = tb ? b.dim(-2) : b.dim(-1);
  const bool shared_b = b.rank() == 2;
  const bool batch_ok = shared_b || std::equal(a.shape().begin(), a.shape().end() - 2,
                                               b.shape().begin(), b.shape().end() - 2);
  if (k != bk || !batch_ok || (!shared_b && a.rank() != b.rank())) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + (tb ? "^T" : ""));
  }
  const std::size_t batch = a.numel() / (m * k == 0 ? 1 : m * k);
  Shape out(a.shape().begin(), a.shape().end() - 2);
  out.push_back(m);
  out.push_back(n);
  Buffer y(batch * m * n);
  const auto av = a.values();
  const auto bv = b.values();
  const auto br = static_cast<Eigen::Index>(tb ? n : k);
  const auto bc = static_cast<Eigen::Index>(tb ? k : n);
  if (shared_b) {
    ConstMap A(av.data(), static_cast<Eigen::Index>(batch * m), static_cast<Eigen::Index>(k));
    ConstMap B(bv.data(), br, bc);
    MutMap C(y.data(), static_cast<Eigen::Index>(batch * m), static_cast<Eigen::Index>(n));
    if (tb) C.noalias() = A * B.transpose();
    else C.noalias() = A * B;
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMap A(av.data() + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
      ConstMap B(bv.data() + i * k * n, br, bc);
      MutMap C(y.data() + i * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
      if (tb) C.noalias() = A * B.transpose();
      else C.noalias() = A * B;
    }
  }
  return make_result(std::move(out), std::move(y), {a, b},
                     [=](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    auto ga = input_grad(self, 0);
    auto gb = input_grad(self, 1);
    const std::size_t blocks = shared_b ? 1 : batch;
    const std::size_t rows = shared_b ? batch * m : m;
    const auto R = static_cast<Eigen::Index>(rows);
    const auto K = static_cast<Eigen::Index>(k);
    const auto N = static_cast<Eigen::Index>(n);
    for (std::size_t i = 0; i < blocks; ++i) {
      ConstMap A(av.data() + i * m * k, R, K);
      ConstMap B(bv.data() + (shared_b ? 0 : i * k * n), br, bc);
      ConstMap G(self.grad.data() + i * m * n, R, N);
      if (!ga.empty()) {
        MutMap GA(ga.data() + i * m * k, R, K);
        if (tb) GA.noalias() += G * B;
        else GA.noalias() += G * B.transpose();
      }
      if (!gb.empty()) {
        MutMap GB(gb.data() + (shared_b ? 0 : i * k * n), br, bc);
        if (tb) GB.noalias() += G.transpose() * A;
        else GB.noalias() += A.transpose() * G;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(0);
  const std::size_t out = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for output width " +
                         std::to_string(out));
  }
  const std::size_t rows = x.numel() / in;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  shape.push_back(out);
  Buffer y(rows * out);
  const auto R = static_cast<Eigen::Index>(rows);
  const auto I = static_cast<Eigen::Index>(in);
  const auto O = static_cast<Eigen::Index>(out);
  {
    ConstMap X(x.values().data(), R, I);
    ConstMap W(weight.values().data(), I, O);
    MutMap Y(y.data(), R, O);
    Y.noalias() = X * W;
    if (bias.defined()) {
      Eigen::Map<const Eigen::RowVectorXd> bvec(bias.values().data(), O);
      Y.rowwise() += bvec;
    }
  }
  const bool has_bias = bias.defined();
  auto fn = [R, I, O, has_bias](detail::Node& self) {
    ConstMap G(self.grad.data(), R, O);
    if (auto gx = input_grad(self, 0); !gx.empty()) {
      ConstMap W(self.inputs[1]->value.data(), I, O);
      MutMap GX(gx.data(), R, I);
      GX.noalias() += G * W.transpose();
    }
    if (auto gw = input_grad(self, 1); !gw.empty()) {
      ConstMap X(self.inputs[0]->value.data(), R, I);
      MutMap GW(gw.data(), I, O);
      GW.noalias() += X.transpose() * G;
    }
    if (has_bias) {
      if (auto gb = input_grad(self, 2); !gb.empty()) {
        Eigen::Map<Eigen::RowVectorXd> GB(gb.data(), O);
        GB += G.colwise().sum();
      }
    }
  };
  if (has_bias) return make_result(std::move(shape), std::move(y), {x, weight, bias}, fn);
  return make_result(std::move(shape), std::move(y), {x, weight}, fn);
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, std::ptrdiff_t axis_in) {
  const auto axis = normalize_axis(axis_in, x.rank());
  const auto& s = x.shape();
  const std::size_t n = s[axis];
  const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  const std::size_t outer = n * inner == 0 ? 0 : x.numel() / (n * inner);
  const auto v = x.values();
  Buffer y(v.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        y[base + i * inner] = std::exp(v[base + i * inner] - mx);
        z += y[base + i * inner];
      }
      for (std::size_t i = 0; i < n; ++i) y[base + i * inner] /= z;
    }
  }
  return make_result(s, std::move(y), {x}, [outer, inner, n](detail::Node& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += self.grad[base + i * inner] * self.value[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const auto j = base + i * inner;
          g[j] += self.value[j] * (self.grad[j] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  const auto v = x.values();
  Buffer y(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(row[i] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] = row[i] - lz;
  }
  return make_result(x.shape(), std::move(y), {x}, [rows, n](detail::Node& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t i = 0; i < n; ++i) gs += self.grad[r * n + i];
      for (std::size_t i = 0; i < n; ++i)
        g[r * n + i] += self.grad[r * n + i] - std::exp(self.value[r * n + i]) * gs;
    }
  });
}

Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask) {
  if (scores.rank() != 4 || scores.dim(0) != mask.batch || scores.dim(2) != mask.queries ||
      scores.dim(3) != mask.keys) {
    throw DimensionError("masked_softmax: scores " + shape_str(scores.shape()) +
                         " incompatible with mask [" + std::to_string(mask.batch) + "," +
                         std::to_string(mask.queries) + "," + std::to_string(mask.keys) + "]");
  }
  const std::size_t B = mask.batch, H = scores.dim(1), Q = mask.queries, K = mask.keys;
  const auto v = scores.values();
  Buffer y(v.size(), 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t q = 0; q < Q; ++q) {
        const std::size_t row = ((b * H + h) * Q + q) * K;
        const std::uint8_t* keep = mask.keep.data() + (b * Q + q) * K;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k)
          if (keep[k]) mx = std::max(mx, v[row + k]);
        if (mx == -std::numeric_limits<double>::infinity()) {
          throw ContractError("attention query " + std::to_string(q) + " of batch row " +
                              std::to_string(b) + " has no unmasked key");
        }
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          if (!keep[k]) continue;
          y[row + k] = std::exp(v[row + k] - mx);
          z += y[row + k];
        }
        for (std::size_t k = 0; k < K; ++k) y[row + k] /= z;
      }
    }
  }
  const std::size_t rows = B * H * Q;
  return make_result(scores.shape(), std::move(y), {scores}, [rows, K](detail::Node& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = self.value.data() + r * K;
      const double* d = self.grad.data() + r * K;
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += p[k] * d[k];
      for (std::size_t k = 0; k < K; ++k) g[r * K + k] += p[k] * (d[k] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = x.dim(-1);
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " for width " + std::to_string(n));
  }
  const std::size_t rows = x.numel() / n;
  const auto v = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  Buffer y(v.size());
  std::vector<double> xhat(v.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      xhat[r * n + i] = (row[i] - mu) * inv_std[r];
      y[r * n + i] = gv[i] * xhat[r * n + i] + bv[i];
    }
  }
  return make_result(
      x.shape(), std::move(y), {x, gamma, beta},
      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& gv = self.inputs[1]->value;
        auto gx = input_grad(self, 0);
        auto gg = input_grad(self, 1);
        auto gb = input_grad(self, 2);
        const double dn = static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * n;
          const double* xh = xhat.data() + r * n;
          if (!gg.empty())
            for (std::size_t i = 0; i < n; ++i) gg[i] += dy[i] * xh[i];
          if (!gb.empty())
            for (std::size_t i = 0; i < n; ++i) gb[i] += dy[i];
          if (gx.empty()) continue;
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const double d = dy[i] * gv[i];
            mean_d += d;
            mean_dx += d * xh[i];
          }
          mean_d /= dn;
          mean_dx /= dn;
          for (std::size_t i = 0; i < n; ++i)
            gx[r * n + i] += inv_std[r] * (dy[i] * gv[i] - mean_d - xh[i] * mean_dx);
        }
      });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  std::vector<double> m(x.numel());
  for (auto& v : m) v = keep(rng) ? s : 0.0;
  return mul(x, Tensor(x.shape(), std::move(m)));
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const auto v = x.values();
  return make_result(std::move(shape), Buffer(v.begin(), v.end()), {x},
                     [](detail::Node& self) {
                       auto g = input_grad(self, 0);
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  if (order.size() != r) throw DimensionError("permute order rank mismatch for " + shape_str(s));
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  Shape out(r);
  std::vector<std::size_t> src_stride(r);
  std::vector<bool> used(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (order[i] >= r || used[order[i]]) throw DimensionError("permute: invalid axis order");
    used[order[i]] = true;
    out[i] = s[order[i]];
    src_stride[i] = in_strides[order[i]];
  }
  // map[j] = source offset of output element j.
  const std::size_t n = x.numel();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t j = 0; j < n; ++j) {
    map[j] = src;
    for (std::size_t a = r; a-- > 0;) {
      ++idx[a];
      src += src_stride[a];
      if (idx[a] < out[a]) break;
      src -= src_stride[a] * out[a];
      idx[a] = 0;
    }
  }
  const auto v = x.values();
  Buffer y(n);
  for (std::size_t j = 0; j < n; ++j) y[j] = v[map[j]];
  return make_result(std::move(out), std::move(y), {x}, [map = std::move(map)](detail::Node& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    for (std::size_t j = 0; j < map.size(); ++j) g[map[j]] += self.grad[j];
  });
}

Tensor concat(const Tensor& a, const Tensor& b, std::ptrdiff_t axis_in) {
  const auto axis = normalize_axis(axis_in, a.rank());
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sa.size() == sb.size();
  for (std::size_t i = 0; ok && i < sa.size(); ++i) ok = (i == axis) || sa[i] == sb[i];
  if (!ok) throw DimensionError("concat " + shape_str(sa) + " with " + shape_str(sb));
  const std::size_t inner = shape_numel(Shape(sa.begin() + static_cast<std::ptrdiff_t>(axis) + 1, sa.end()));
  const std::size_t outer = shape_numel(Shape(sa.begin(), sa.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t ca = sa[axis] * inner;
  const std::size_t cb = sb[axis] * inner;
  Shape out = sa;
  out[axis] += sb[axis];
  const auto av = a.values();
  const auto bv = b.values();
  Buffer y(outer * (ca + cb));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data() + o * ca, ca, y.data() + o * (ca + cb));
    std::copy_n(bv.data() + o * cb, cb, y.data() + o * (ca + cb) + ca);
  }
  return make_result(std::move(out), std::move(y), {a, b}, [outer, ca, cb](detail::Node& self) {
    auto ga = input_grad(self, 0);
    auto gb = input_grad(self, 1);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* g = self.grad.data() + o * (ca + cb);
      if (!ga.empty())
        for (std::size_t i = 0; i < ca; ++i) ga[o * ca + i] += g[i];
      if (!gb.empty())
        for (std::size_t i = 0; i < cb; ++i) gb[o * cb + i] += g[ca + i];
    }
  });
}

Tensor slice(const Tensor& x, std::ptrdiff_t axis_in, std::size_t begin, std::size_t end) {
  const auto axis = normalize_axis(axis_in, x.rank());
  const auto& s = x.shape();
  if (begin > end || end > s[axis]) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for axis of size " + std::to_string(s[axis]));
  }
  const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t full = s[axis] * inner;
  const std::size_t off = begin * inner;
  const std::size_t len = (end - begin) * inner;
  Shape out = s;
  out[axis] = end - begin;
  const auto v = x.values();
  Buffer y(outer * len);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(v.data() + o * full + off, len, y.data() + o * len);
  return make_result(std::move(out), std::move(y), {x}, [outer, full, off, len](detail::Node& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len; ++i) g[o * full + off + i] += self.grad[o * len + i];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, Shape leading) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2");
  if (shape_numel(leading) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for leading shape " +
                         shape_str(leading));
  }
  const std::size_t V = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                       std::to_string(V));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  const auto tv = table.values();
  Buffer y(ids.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(tv.data() + rows[i] * d, d, y.data() + i * d);
  leading.push_back(d);
  return make_result(std::move(leading), std::move(y), {table}, [rows = std::move(rows), d](detail::Node& self) {
    auto g = input_grad(self, 0);
    if (g.empty()) return;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[rows[i] * d + j] += self.grad[i * d + j];
  });
}

// ---------------------------------------------------------------------------
// Losses

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                            double label_smoothing, std::span<const std::uint8_t> mask) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy_logits needs rank >= 1 logits");
  const std::size_t V = logits.dim(-1);
  const std::size_t rows = logits.numel() / V;
  if (targets.size() != rows || (!mask.empty() && mask.size() != rows)) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) +
                         " targets / " + std::to_string(mask.size()) + " mask entries for logits " +
                         shape_str(logits.shape()));
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("label smoothing must lie in [0,1)");
  if (label_smoothing > 0.0 && V < 2) throw ConfigError("label smoothing needs V >= 2");
  const double on = 1.0 - label_smoothing;
  const double off = V > 1 ? label_smoothing / static_cast<double>(V - 1) : 0.0;
  std::vector<std::uint8_t> active(rows, 1);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), active.begin());
  double count = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!active[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V) {
      throw IndexError("target id " + std::to_string(targets[r]) + " at step " + std::to_string(r) +
                       " outside vocabulary of size " + std::to_string(V));
    }
    count += 1.0;
  }
  if (count == 0.0) throw ContractError("cross_entropy_logits with no unmasked step");
  const auto v = logits.values();
  std::vector<double> probs(v.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!active[r]) continue;
    const double* row = v.data() + r * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t i = 0; i < V; ++i) z += std::exp(row[i] - mx);
    const double lz = mx + std::log(z);
    double loss = 0.0;
    for (std::size_t i = 0; i < V; ++i) {
      const double lp = row[i] - lz;
      probs[r * V + i] = std::exp(lp);
      const double w = static_cast<std::size_t>(targets[r]) == i ? on : off;
      if (w != 0.0) loss -= w * lp;
    }
    total += loss;
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result({}, {total / count}, {logits},
                     [probs = std::move(probs), tgt = std::move(tgt), active = std::move(active),
                      rows, V, on, off, count](detail::Node& self) {
                       auto g = input_grad(self, 0);
                       if (g.empty()) return;
                       const double s = self.grad[0] / count;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (!active[r]) continue;
                         for (std::size_t i = 0; i < V; ++i) {
                           const double q = static_cast<std::size_t>(tgt[r]) == i ? on : off;
                           g[r * V + i] += s * (probs[r * V + i] - q);
                         }
                       }
                     });
}

Tensor kl_categorical(const Tensor& teacher_logits, const Tensor& student_logits,
                      std::span<const std::uint8_t> mask) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("kl_categorical: teacher " + shape_str(teacher_logits.shape()) +
                         " vs student " + shape_str(student_logits.shape()));
  }
  const std::size_t V = student_logits.dim(-1);
  const std::size_t rows = student_logits.numel() / V;
  if (!mask.empty() && mask.size() != rows) {
    throw DimensionError("kl_categorical: mask has " + std::to_string(mask.size()) +
                         " entries for " + std::to_string(rows) + " rows");
  }
  std::vector<std::uint8_t> active(rows, 1);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), active.begin());
  const double count = static_cast<double>(
      std::count_if(active.begin(), active.end(), [](auto m) { return m != 0; }));
  if (count == 0.0) throw ContractError("kl_categorical with no unmasked row");
  const auto tv = teacher_logits.values();
  const auto sv = student_logits.values();
  std::vector<double> p(sv.size());  // student probabilities
  std::vector<double> q(tv.size());  // teacher probabilities
  double total = 0.0;
  auto log_norm = [V](const double* row) {
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t i = 0; i < V; ++i) z += std::exp(row[i] - mx);
    return mx + std::log(z);
  };
  for (std::size_t r = 0; r < rows; ++r) {
    if (!active[r]) continue;
    const double* t = tv.data() + r * V;
    const double* s = sv.data() + r * V;
    const double lzt = log_norm(t);
    const double lzs = log_norm(s);
    double kl = 0.0;
    for (std::size_t i = 0; i < V; ++i) {
      const double lq = t[i] - lzt;
      const double lp = s[i] - lzs;
      q[r * V + i] = std::exp(lq);
      p[r * V + i] = std::exp(lp);
      if (q[r * V + i] > 0.0) kl += q[r * V + i] * (lq - lp);
    }
    total += kl;
  }
  // Teacher is intentionally not recorded as an input.
  return make_result({}, {total / count}, {student_logits},
                     [p = std::move(p), q = std::move(q), active = std::move(active), rows, V,
                      count](detail::Node& self) {
                       auto g = input_grad(self, 0);
                       if (g.empty()) return;
                       const double s = self.grad[0] / count;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (!active[r]) continue;
                         for (std::size_t i = 0; i < V; ++i) g[r * V + i] += s * (p[r * V + i] - q[r * V + i]);
                       }
                     });
}

}  // namespace cvslt
