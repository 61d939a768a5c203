#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace geopeft {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when a primitive receives inputs whose shapes it cannot combine.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;  // empty for meta tensors
    std::vector<T> grad;   // allocated lazily during backward
    bool requires_grad = false;
    bool meta = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward;

    std::vector<T>& grad_buffer();
};

}  // namespace detail

/// Shape-only execution. While a scope is alive on the current thread, new
/// tensors carry shapes but no storage and primitives skip their kernels.
/// Used to count parameters and activations of full-size backbones.
class MetaScope {
public:
    MetaScope();
    ~MetaScope();
    MetaScope(const MetaScope&) = delete;
    MetaScope& operator=(const MetaScope&) = delete;

    static bool active();

private:
    bool previous_;
};

/// Dense row-major tensor handle. Copies share the underlying node; use
/// clone() for an independent leaf.
template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    BasicTensor() = default;
    explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false);
    static BasicTensor scalar(T value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t size(std::size_t axis) const;
    std::size_t numel() const { return shape_numel(shape()); }
    bool is_meta() const;
    bool is_leaf() const;
    const std::string& op() const;

    std::span<const T> data() const;
    /// Writable storage; only legal on leaves (parameters and inputs).
    std::span<T> mutable_data();
    T item() const;
    std::vector<T> to_vector() const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const T> grad() const;
    std::span<T> mutable_grad();
    void zero_grad();

    /// Independent leaf with copied values; keeps requires_grad.
    BasicTensor clone() const;
    /// Leaf sharing nothing with the tape, requires_grad false.
    BasicTensor detach() const;

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Nodes reachable from root that take part in differentiation, ordered so
/// that every node appears after all of its inputs.
template <typename T>
std::vector<detail::Node<T>*> topological_order(const BasicTensor<T>& root);

/// Reverse-mode sweep from a scalar root. Leaves with requires_grad
/// accumulate into their grad buffers; intermediate grads are released.
template <typename T>
void backward(const BasicTensor<T>& root);

/// Central-difference check of the gradient of a scalar function.
/// Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
template <typename T>
double grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                  const BasicTensor<T>& point, double eps);

}  // namespace geopeft
