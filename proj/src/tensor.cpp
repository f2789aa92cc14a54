#include "ibnorm/tensor.hpp"

#include "ibnorm/errors.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace ibn {

std::size_t shape_numel(const Shape &shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " elements");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> data(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
    return Tensor({values.size()}, std::vector<double>(values), requires_grad);
}

std::size_t Tensor::size(std::ptrdiff_t axis) const {
    const auto n = static_cast<std::ptrdiff_t>(dim());
    if (axis < 0)
        axis += n;
    if (axis < 0 || axis >= n)
        throw DimensionError("axis out of range for shape " + shape_str(shape()));
    return shape()[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
    if (numel() != 1)
        throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

// --- graph ------------------------------------------------------------------

namespace {
thread_local Graph *g_active = nullptr;
}

Graph *active_graph() { return g_active; }

GraphScope::GraphScope(Graph &graph) : previous_(g_active) { g_active = &graph; }
GraphScope::~GraphScope() { g_active = previous_; }

NoGradGuard::NoGradGuard() : previous_(g_active) { g_active = nullptr; }
NoGradGuard::~NoGradGuard() { g_active = previous_; }

bool should_record(std::span<const Tensor> inputs) {
    if (!g_active)
        return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor &t) { return t.requires_grad(); });
}

void Graph::record(const char *op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
    output.set_requires_grad(true);
    nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
}

std::span<double> grad_buffer(const Tensor &t) {
    auto *impl = t.impl();
    if (impl->grad.size() != impl->data.size())
        impl->grad.assign(impl->data.size(), 0.0);
    return impl->grad;
}

bool Gradients::contains(const Tensor &leaf) const { return grads_.count(leaf.impl()) != 0; }

std::span<const double> Gradients::of(const Tensor &leaf) const {
    auto it = grads_.find(leaf.impl());
    if (it == grads_.end())
        throw ContractError("no gradient recorded for tensor of shape " + shape_str(leaf.shape()));
    return it->second;
}

Gradients backward(Graph &graph, const Tensor &loss) {
    if (loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));

    const auto &nodes = graph.nodes();
    std::unordered_set<const TensorImpl *> produced, zeroed;
    produced.reserve(nodes.size());
    zeroed.reserve(2 * nodes.size());
    auto zero = [&zeroed](const Tensor &t) {
        if (zeroed.insert(t.impl()).second)
            t.impl()->grad.assign(t.numel(), 0.0);
    };
    bool found = false;
    for (const auto &node : nodes) {
        produced.insert(node.output.impl());
        found = found || node.output.impl() == loss.impl();
        zero(node.output);
        for (const auto &in : node.inputs)
            if (in.requires_grad())
                zero(in);
    }
    if (!found)
        throw ContractError("loss was not produced by this graph");

    loss.impl()->grad[0] = 1.0;
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it)
        it->backward(it->output, it->inputs);

    Gradients result;
    for (const auto &node : nodes)
        for (const auto &in : node.inputs)
            if (in.requires_grad() && !produced.count(in.impl()))
                result.grads_.try_emplace(in.impl(), in.impl()->grad);
    return result;
}

} // namespace ibn
