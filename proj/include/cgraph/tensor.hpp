#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is an immutable value: a shape plus shared row-major storage.
// Differentiation is handled by a Tape that records one node per operation;
// gradients live in per-node buffers on the tape, never inside tensors.
// Operations record themselves only when at least one input is attached to
// a tape, so inference over plain constants has zero bookkeeping cost.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cgraph {

using Shape = std::vector<int>;

inline int numel(const Shape& s) {
  int n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct DimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ArgError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Raised when an episode violates a sampling precondition (e.g. the support
// mask loses all foreground after resizing); the sampler catches it and
// draws a fresh episode.
struct EpisodeSkip : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from(std::move(shape), {});
  }

  static Tensor full(Shape shape, T v) {
    std::vector<T> d(static_cast<std::size_t>(numel(shape)), v);
    return from(std::move(shape), std::move(d));
  }

  static Tensor scalar(T v) { return from(Shape{}, std::vector<T>{v}); }

  static Tensor from(Shape shape, std::vector<T> data) {
    const auto n = static_cast<std::size_t>(numel(shape));
    if (data.empty()) data.resize(n, T(0));
    if (data.size() != n)
      throw DimError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<T>>(std::move(data));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int size() const { return data_ ? static_cast<int>(data_->size()) : 0; }
  bool empty() const { return !data_; }

  std::span<const T> data() const {
    return data_ ? std::span<const T>(*data_) : std::span<const T>();
  }
  const T* ptr() const { return data_ ? data_->data() : nullptr; }

  T at(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  T operator()(int i, int j) const { return at(i * shape_[1] + j); }
  T operator()(int i, int j, int k) const {
    return at((i * shape_[1] + j) * shape_[2] + k);
  }
  T item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
    return at(0);
  }

  bool requires_grad() const { return node_ >= 0; }
  int node_id() const { return node_; }
  Tape<T>* tape() const { return tape_; }

  // Same storage, no tape attachment.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Reshape is a metadata change: the result aliases this tensor's storage
  // and tape node, so it costs nothing and needs no backward rule.
  Tensor reshaped(Shape s) const {
    if (numel(s) != size())
      throw DimError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  std::vector<T> to_vector() const {
    return data_ ? *data_ : std::vector<T>();
  }

 private:
  friend class Tape<T>;
  std::shared_ptr<const std::vector<T>> data_;
  Shape shape_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

// Records operations in execution order and replays their backward rules in
// reverse. One tape per training step; never shared across threads.
template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const T*)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Register a leaf (parameter) the gradient of which will be wanted.
  Tensor<T> watch(const Tensor<T>& src) {
    Tensor<T> t = src.detached();
    t.tape_ = this;
    t.node_ = push_node(nullptr, t.size());
    return t;
  }

  // Record an operation producing `data` with backward rule `back`.
  // `back(tape, gout)` must accumulate into the input nodes' buffers.
  Tensor<T> record(Shape shape, std::vector<T> data, BackFn back) {
    Tensor<T> t = Tensor<T>::from(std::move(shape), std::move(data));
    t.tape_ = this;
    t.node_ = push_node(std::move(back), t.size());
    return t;
  }

  // Reverse sweep from a scalar root. Leaf gradients are retrievable with
  // grad() afterwards; every operation upstream of the root participates.
  void backward(const Tensor<T>& root) {
    if (root.tape_ != this) throw ContractError("backward: root is not on this tape");
    if (root.size() != 1) throw ContractError("backward: root must be scalar, got " + shape_str(root.shape()));
    grad_buf(root.node_)[0] += T(1);
    for (int i = root.node_; i >= 0; --i) {
      auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.empty()) continue;
      if (auto& fn = nodes_[static_cast<std::size_t>(i)].back) fn(*this, g.data());
    }
  }

  bool has_grad(const Tensor<T>& t) const {
    return t.node_ >= 0 && !grads_[static_cast<std::size_t>(t.node_)].empty();
  }

  // Gradient of the root w.r.t. `t` as a constant tensor (zeros if the node
  // was never reached).
  Tensor<T> grad(const Tensor<T>& t) const {
    if (t.tape_ != this) throw ContractError("grad: tensor is not on this tape");
    const auto& g = grads_[static_cast<std::size_t>(t.node_)];
    if (g.empty()) return Tensor<T>::zeros(t.shape());
    return Tensor<T>::from(t.shape(), g);
  }

  // Accumulation buffer for node `id`, zero-initialized on first touch.
  std::span<T> accum(int id, int size) {
    if (id < 0) return {};
    auto& g = grad_buf(id);
    assert(static_cast<int>(g.size()) == size);
    (void)size;
    return g;
  }

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    BackFn back;
    int size;
  };

  int push_node(BackFn back, int size) {
    nodes_.push_back(Node{std::move(back), size});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<T>& grad_buf(int id) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(id)].size), T(0));
    return g;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
};

// The tape shared by a set of operands: null when all are constants,
// otherwise the single tape they agree on.
template <class T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> xs) {
  Tape<T>* tp = nullptr;
  for (const auto* x : xs) {
    if (!x->tape()) continue;
    if (tp && tp != x->tape())
      throw ContractError("operands belong to different tapes");
    tp = x->tape();
  }
  return tp;
}

}  // namespace cgraph
