#include "geopeft/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace geopeft {

namespace {
thread_local bool g_meta_mode = false;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

MetaScope::MetaScope() : previous_(g_meta_mode) { g_meta_mode = true; }
MetaScope::~MetaScope() { g_meta_mode = previous_; }
bool MetaScope::active() { return g_meta_mode; }

namespace detail {

template <typename T>
std::vector<T>& Node<T>::grad_buffer() {
    if (grad.empty() && !meta) grad.assign(shape_numel(shape), T(0));
    return grad;
}

template struct Node<float>;
template struct Node<double>;

}  // namespace detail

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    auto node = std::make_shared<detail::Node<T>>();
    node->meta = g_meta_mode;
    if (!node->meta) node->value.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("from_data: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
    return from_data({}, {value});
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
    if (!node_) throw std::logic_error("tensor is undefined");
    return node_->shape;
}

template <typename T>
std::size_t BasicTensor<T>::size(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

template <typename T>
bool BasicTensor<T>::is_meta() const { return node_ && node_->meta; }

template <typename T>
bool BasicTensor<T>::is_leaf() const { return node_ && node_->inputs.empty(); }

template <typename T>
const std::string& BasicTensor<T>::op() const { return node_->op; }

template <typename T>
std::span<const T> BasicTensor<T>::data() const { return node_->value; }

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
    if (!is_leaf()) throw std::logic_error("mutable_data on non-leaf tensor produced by " + node_->op);
    return node_->value;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    if (is_meta()) throw std::logic_error("item() on meta tensor");
    return node_->value[0];
}

template <typename T>
std::vector<T> BasicTensor<T>::to_vector() const { return node_->value; }

template <typename T>
bool BasicTensor<T>::requires_grad() const { return node_ && node_->requires_grad; }

template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
    if (!is_leaf()) throw std::logic_error("requires_grad can only be toggled on leaves");
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
}

template <typename T>
bool BasicTensor<T>::has_grad() const { return node_ && !node_->grad.empty(); }

template <typename T>
std::span<const T> BasicTensor<T>::grad() const { return node_->grad; }

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() { return node_->grad_buffer(); }

template <typename T>
void BasicTensor<T>::zero_grad() {
    if (node_) node_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->meta = node_->meta;
    node->requires_grad = node_->requires_grad;
    return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    auto t = clone();
    t.node_->requires_grad = false;
    return t;
}

template class BasicTensor<float>;
template class BasicTensor<double>;

template <typename T>
std::vector<detail::Node<T>*> topological_order(const BasicTensor<T>& root) {
    using N = detail::Node<T>;
    std::vector<N*> order;
    if (!root.defined() || !root.requires_grad()) return order;
    std::unordered_set<N*> seen;
    // Iterative post-order DFS; deep transformer graphs overflow recursion.
    std::vector<std::pair<N*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            N* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

template <typename T>
void backward(const BasicTensor<T>& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined root");
    if (root.numel() != 1) {
        throw ShapeError("backward: root must be scalar, got shape " + shape_str(root.shape()));
    }
    if (root.is_meta()) throw std::logic_error("backward: meta root");
    if (!root.requires_grad()) return;
    auto order = topological_order(root);
    root.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* node = *it;
        if (node->inputs.empty()) continue;
        if (node->backward && !node->grad.empty()) node->backward(*node);
        node->grad.clear();
        node->grad.shrink_to_fit();
    }
}

template <typename T>
double grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                  const BasicTensor<T>& point, double eps) {
    if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
    auto x = point.detach();
    x.set_requires_grad(true);
    auto y = f(x);
    if (y.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
    backward(y);
    std::vector<T> analytic(x.numel(), T(0));
    if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());

    const auto base = point.to_vector();
    double worst = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        auto plus = base;
        auto minus = base;
        plus[i] = static_cast<T>(plus[i] + eps);
        minus[i] = static_cast<T>(minus[i] - eps);
        const double step = static_cast<double>(plus[i]) - static_cast<double>(minus[i]);
        const double fp = f(BasicTensor<T>::from_data(point.shape(), plus)).item();
        const double fm = f(BasicTensor<T>::from_data(point.shape(), minus)).item();
        if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(static_cast<double>(analytic[i]))) {
            throw std::runtime_error("grad_check: non-finite value at coordinate " + std::to_string(i));
        }
        const double numeric = (fp - fm) / step;
        const double err = std::abs(static_cast<double>(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

template std::vector<detail::Node<float>*> topological_order(const BasicTensor<float>&);
template std::vector<detail::Node<double>*> topological_order(const BasicTensor<double>&);
template void backward(const BasicTensor<float>&);
template void backward(const BasicTensor<double>&);
template double grad_check(const std::function<BasicTensor<float>(const BasicTensor<float>&)>&,
                           const BasicTensor<float>&, double);
template double grad_check(const std::function<BasicTensor<double>(const BasicTensor<double>&)>&,
                           const BasicTensor<double>&, double);

}  // namespace geopeft
