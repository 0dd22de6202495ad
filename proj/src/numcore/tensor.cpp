#include "lndetr/numcore/tensor.hpp"

#include <sstream>

namespace lndetr::numcore {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void throw_shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  for (auto extent : shape)
    if (extent < 0) throw ShapeError("tensor: negative extent in " + to_string(shape));
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->data.assign(static_cast<std::size_t>(numcore::numel(shape)), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (static_cast<std::int64_t>(values.size()) != numcore::numel(shape))
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("tensor: axis out of range for " + to_string(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->data.size() != 1)
    throw ShapeError("item: expected a single element, got shape " + to_string(shape()));
  return impl_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!impl_->is_leaf) throw std::logic_error("set_requires_grad: only leaves can be toggled");
  impl_->requires_grad = flag;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

template <typename T>
Graph<T>*& Graph<T>::current_slot() {
  thread_local Graph<T>* slot = nullptr;
  return slot;
}

template <typename T>
Graph<T>* Graph<T>::current() {
  return current_slot();
}

template <typename T>
void Graph<T>::record(const char* op, std::vector<ImplPtr> inputs, ImplPtr output,
                      std::function<void()> backward) {
  records_.push_back(Record{op, std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  auto* root = loss.impl();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output->has_grad()) continue;
    it->backward();
  }
  for (auto& rec : records_)
    for (auto& in : rec.inputs)
      if (in && in->requires_grad && in->is_leaf) in->ensure_grad();
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace lndetr::numcore
