#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ibn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
};

/// Dense row-major f64 array. Copies share storage; use clone() for a deep copy.
class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape &shape() const { return impl_->shape; }
    std::size_t dim() const { return impl_->shape.size(); }
    std::size_t size(std::ptrdiff_t axis) const;
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    /// Direct write access; only meaningful for leaves (parameters, buffers).
    std::span<double> mutable_data() { return impl_->data; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value) { impl_->requires_grad = value; }

    /// Gradient buffer written by the last backward pass (empty if none).
    std::span<const double> grad() const { return impl_->grad; }

    Tensor clone() const;
    /// Same data, no gradient tracking.
    Tensor detach() const;

    TensorImpl *impl() const { return impl_.get(); }

  private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Receives the output tensor (with its gradient filled) and the operands.
using BackwardFn = std::function<void(const Tensor &out, std::span<const Tensor> inputs)>;

/// Tape of primitive applications in execution order, which is a topological order.
class Graph {
  public:
    struct Node {
        const char *op;
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };

    void record(const char *op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward);
    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node> &nodes() const { return nodes_; }
    void clear() { nodes_.clear(); }

  private:
    std::vector<Node> nodes_;
};

/// Graph that receives recorded nodes on this thread, or nullptr.
Graph *active_graph();

/// Makes `graph` the active recording target for the enclosing scope.
class GraphScope {
  public:
    explicit GraphScope(Graph &graph);
    ~GraphScope();
    GraphScope(const GraphScope &) = delete;
    GraphScope &operator=(const GraphScope &) = delete;

  private:
    Graph *previous_;
};

/// Suspends recording for the enclosing scope.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

  private:
    Graph *previous_;
};

/// Gradient of a scalar loss with respect to every requires_grad leaf of a graph.
class Gradients {
  public:
    bool contains(const Tensor &leaf) const;
    std::span<const double> of(const Tensor &leaf) const;
    std::size_t size() const { return grads_.size(); }

  private:
    friend Gradients backward(Graph &graph, const Tensor &loss);
    std::unordered_map<const TensorImpl *, std::vector<double>> grads_;
};

/// Reverse sweep over the tape. Each node is visited once; gradients of
/// intermediates are left in their grad() buffers.
Gradients backward(Graph &graph, const Tensor &loss);

/// Gradient buffer of `t`, allocated as zeros on first use. For backward rules.
std::span<double> grad_buffer(const Tensor &t);

/// True when any operand requires grad and a graph is active.
bool should_record(std::span<const Tensor> inputs);

} // namespace ibn
