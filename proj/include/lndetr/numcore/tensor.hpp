#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lndetr::numcore {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Raised by every op on incompatible operands. The message names the op and
// both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] void throw_shape_error(const char* op, const Shape& a, const Shape& b);

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  bool is_leaf = true;

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

// Dense row-major n-dimensional value. Copies share storage; use clone() for
// an independent value.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }
  bool has_grad() const { return impl_->has_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  T item() const;
  T at(std::int64_t flat) const { return impl_->data[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->is_leaf; }
  void set_requires_grad(bool flag);

  // Value copy with no graph attachment.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  TensorImpl<T>* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<T>>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Ordered tape of recorded operations. Backward walks the tape in exact
// reverse of record order.
template <typename T>
class Graph {
 public:
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;

  struct Record {
    const char* op;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    std::function<void()> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(const char* op, std::vector<ImplPtr> inputs, ImplPtr output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs every record's backward in reverse.
  // Rejects non-scalar losses.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  // Graph that ops record onto on this thread, or nullptr in inference mode.
  static Graph* current();
  static Graph*& current_slot();

 private:
  std::vector<Record> records_;
};

// Makes `graph` the recording target for the current thread while alive.
template <typename T>
class GraphScope {
 public:
  explicit GraphScope(Graph<T>& graph) : previous_(Graph<T>::current_slot()) {
    Graph<T>::current_slot() = &graph;
  }
  ~GraphScope() { Graph<T>::current_slot() = previous_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<T>* previous_;
};

// Disables recording on the current thread while alive.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Graph<T>::current_slot()) { Graph<T>::current_slot() = nullptr; }
  ~NoGradScope() { Graph<T>::current_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph<T>* previous_;
};

}  // namespace lndetr::numcore
