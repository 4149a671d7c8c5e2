#pragma once

// Dense float64 arrays with eager, tape-free reverse-mode differentiation.
//
// Every operation records its inputs and a backward closure on the result
// node when at least one input requires gradients and gradient recording is
// enabled. Node ids grow monotonically, so sorting the reachable set by
// descending id yields a valid reverse topological order for backward().
//
// Gradient semantics: backward() resets the gradients of intermediate nodes
// and then accumulates into leaf gradients. Calling backward() repeatedly on
// graphs that share leaves therefore sums their contributions until
// zero_grad() is called on the leaves.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cvslt/errors.hpp"

namespace cvslt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Node storage starts on a 64-byte boundary. Eigen picks its vectorized head
// and tail split from the actual address, so without a fixed alignment the
// same graph could round differently depending on heap state.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Returns the gradient buffer, allocating zeros on first use.
  std::span<double> grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the back.
  std::size_t dim(std::ptrdiff_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Mutable view for leaves: parameter updates and finite-difference probes.
  // Must not be used while a graph that reads this tensor awaits backward().
  std::span<double> data();
  double operator[](std::size_t flat_index) const { return values()[flat_index]; }
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  std::uint64_t id() const;
  // Leaf copy of the values with no history.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel; every training step allocates and frees the same large blocks.
/// No-op outside glibc.
void tune_allocator();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Populates gradients of every leaf reachable from `loss`.
/// Throws ContractError unless `loss` holds exactly one element.
void backward(const Tensor& loss);

/// Keep-mask for attention scores laid out as [batch, queries, keys].
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> keep;

  // Every query may see key j of its batch row iff key_mask[b*keys + j] != 0.
  static AttentionMask key_padding(std::span<const std::uint8_t> key_mask, std::size_t batch,
                                   std::size_t queries, std::size_t keys);
  // Key padding combined with the lower-triangular constraint j <= i.
  static AttentionMask causal(std::span<const std::uint8_t> key_mask, std::size_t batch,
                              std::size_t length);
  bool allowed(std::size_t b, std::size_t q, std::size_t k) const {
    return keep[(b * queries + q) * keys + k] != 0;
  }
};

/// Named trainable leaf.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Ordered collection of uniquely named parameters.
class ParameterStore {
 public:
  // Registers `value` (which must require gradients) under `name`.
  Tensor add(const std::string& name, Tensor value);
  Tensor uniform(const std::string& name, Shape shape, double bound, std::mt19937_64& rng);
  Tensor normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng);
  Tensor constant(const std::string& name, Shape shape, double value);

  const std::vector<Parameter>& all() const { return params_; }
  const Parameter* find(const std::string& name) const;
  // Name of the parameter whose leaf node has id `node_id`, or empty.
  std::string name_of(std::uint64_t node_id) const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::uint64_t, std::size_t> by_node_;
};

/// Leaf tensors requiring gradients that `output` depends on.
std::vector<std::uint64_t> reachable_leaves(const Tensor& output);

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops accept identical shapes or a right-hand
// side whose shape is a suffix of the left-hand shape (broadcast over the
// leading axes).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
// Gradient is zero where the input lies outside [lo, hi].
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Sums over the last axis, dropping it.
Tensor sum_last(const Tensor& a);
// sum(mask * a) / sum(mask); `mask` has one entry per element of `a`.
Tensor masked_mean(const Tensor& a, std::span<const std::uint8_t> mask);

enum class Transpose { kNone, kRight };

/// a: [..., m, k]; b: [k, n] (shared across the batch) or [..., k, n] with
/// identical leading axes. With Transpose::kRight, b is given as [..., n, k].
Tensor matmul(const Tensor& a, const Tensor& b, Transpose transpose = Transpose::kNone);
/// x: [..., in] times weight [in, out] plus optional bias [out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax(const Tensor& x, std::ptrdiff_t axis);
Tensor log_softmax(const Tensor& x);
/// Softmax over the last axis of scores [batch, heads, queries, keys] where
/// disallowed keys receive probability zero (equivalent to a -1e9 bias).
/// Throws ContractError for a query with no allowed key.
Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor concat(const Tensor& a, const Tensor& b, std::ptrdiff_t axis);
Tensor slice(const Tensor& x, std::ptrdiff_t axis, std::size_t begin, std::size_t end);
/// Rows of `table` [V, d] selected by `ids`; result shape is leading + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, Shape leading);

/// Mean token-level negative log-likelihood of `targets` under softmax(logits)
/// with label smoothing (target mass 1-s, s/(V-1) elsewhere). logits: [..., V].
/// Steps with mask == 0 are excluded; an empty mask counts every step.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                            double label_smoothing = 0.0, std::span<const std::uint8_t> mask = {});

/// Mean over unmasked rows of KL(softmax(teacher) || softmax(student)).
/// The teacher receives no gradient.
Tensor kl_categorical(const Tensor& teacher_logits, const Tensor& student_logits,
                      std::span<const std::uint8_t> mask = {});

}  // namespace cvslt
