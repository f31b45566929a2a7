#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fsat {

template <class T>
class Graph;

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return shape.empty() ? std::string("scalar") : os.str();
}

inline std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

template <class T>
struct TensorImpl {
  std::vector<int> shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;          // empty until first accumulation
  Graph<T>* graph = nullptr;    // producing graph, null for leaves
  int node = -1;                // node id within `graph`
};

// Dense tensor, rank <= 4, N x C x H x W layout for feature maps.
// Copying shares storage; ops return fresh tensors.
template <class T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape, T fill = T(0))
      : impl_(std::make_shared<TensorImpl<T>>()) {
    if (shape.size() > 4) throw std::invalid_argument("tensor: rank > 4 unsupported");
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<std::size_t>(shape_numel(impl_->shape)), fill);
  }

  TensorT(std::vector<int> shape, std::vector<T> values)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    if (shape.size() > 4) throw std::invalid_argument("tensor: rank > 4 unsupported");
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static TensorT scalar(T v) { return TensorT({1}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& vec() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  TensorT& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  // Gradient slot, allocated (zeroed) on demand.
  std::vector<T>& grad() {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  const std::vector<T>& grad() const { return impl_->grad; }
  bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
  void zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), T(0));
  }

  // Same storage, new shape; numel must match.
  TensorT reshaped_view(std::vector<int> shape) const {
    if (shape_numel(shape) != numel()) {
      throw std::invalid_argument("tensor: cannot view " + shape_str(this->shape()) + " as " +
                                  shape_str(shape));
    }
    TensorT out;
    out.impl_ = std::make_shared<TensorImpl<T>>(*impl_);
    out.impl_->shape = std::move(shape);
    out.impl_->graph = nullptr;
    out.impl_->node = -1;
    return out;
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

// Tape of executed primitive ops. Reverse traversal visits each recorded op
// exactly once, in reverse execution order. One graph per forward/backward
// pass, single thread.
template <class T>
class Graph {
 public:
  using Vjp = std::function<void(Graph&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph() { detach_outputs(); }

  void record(TensorT<T>& out, Vjp vjp) {
    out.impl_->graph = this;
    out.impl_->node = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{out, std::move(vjp)});
  }

  // True when gradient flowing into `t` would reach either a recorded op of
  // this graph or a requires_grad leaf.
  bool wants_grad(const TensorT<T>& t) const {
    if (!t.defined()) return false;
    if (t.impl_->graph == this && t.impl_->node >= 0) return true;
    return t.impl_->requires_grad;
  }

  // Gradient buffer of an op output during backward.
  std::vector<T>& node_grad(const TensorT<T>& out) {
    ensure_buffer(out.impl_->node, out.numel());
    return buf_[static_cast<std::size_t>(out.impl_->node)];
  }

  void deposit(const TensorT<T>& t, const T* g, std::int64_t n) {
    if (!t.defined()) return;
    if (t.impl_->graph == this && t.impl_->node >= 0) {
      ensure_buffer(t.impl_->node, n);
      auto& b = buf_[static_cast<std::size_t>(t.impl_->node)];
      for (std::int64_t i = 0; i < n; ++i) b[static_cast<std::size_t>(i)] += g[i];
      touched_[static_cast<std::size_t>(t.impl_->node)] = 1;
    } else if (t.impl_->requires_grad) {
      auto& dst = t.impl_->grad;
      if (dst.size() != t.impl_->data.size()) dst.assign(t.impl_->data.size(), T(0));
      for (std::int64_t i = 0; i < n; ++i) dst[static_cast<std::size_t>(i)] += g[i];
    }
  }

  void run_backward(const TensorT<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (loss.impl_->graph != this || loss.impl_->node < 0) {
      throw std::invalid_argument("backward: loss was not produced by this graph");
    }
    buf_.assign(nodes_.size(), {});
    touched_.assign(nodes_.size(), 0);
    const int last = loss.impl_->node;
    ensure_buffer(last, 1);
    buf_[static_cast<std::size_t>(last)][0] = T(1);
    touched_[static_cast<std::size_t>(last)] = 1;
    for (int i = last; i >= 0; --i) {
      if (touched_[static_cast<std::size_t>(i)]) nodes_[static_cast<std::size_t>(i)].vjp(*this);
    }
    buf_.clear();
    touched_.clear();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT<T> out;  // keeps the output impl (and its node id) alive
    Vjp vjp;
  };

  void ensure_buffer(int node, std::int64_t n) {
    auto& b = buf_[static_cast<std::size_t>(node)];
    if (static_cast<std::int64_t>(b.size()) != n) b.assign(static_cast<std::size_t>(n), T(0));
  }

  void detach_outputs() {
    for (auto& nd : nodes_) {
      if (nd.out.defined() && nd.out.impl_->graph == this) {
        nd.out.impl_->graph = nullptr;
        nd.out.impl_->node = -1;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> buf_;
  std::vector<char> touched_;
};

// Accumulates dLoss/dLeaf into every requires_grad leaf reachable from the
// tape. Repeated calls without zero_grad() accumulate.
template <class T>
void backward(const TensorT<T>& loss, Graph<T>& graph) {
  graph.run_backward(loss);
}

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace fsat
