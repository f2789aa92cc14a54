#include "ibnorm/ops.hpp"

#include "ibnorm/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>

namespace ibn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[maybe_unused]] bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double d) { return std::isfinite(d); });
}

Tensor emit(const char *op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn fn) {
    Tensor out(std::move(shape), std::move(data));
#ifndef NDEBUG
    if (std::all_of(inputs.begin(), inputs.end(), [](const Tensor &t) { return all_finite(t.data()); }))
        assert(all_finite(out.data()) && "non-finite output from finite inputs");
#endif
    if (should_record(inputs))
        active_graph()->record(op, std::move(inputs), out, std::move(fn));
    return out;
}

void require_same_shape(const char *op, const Tensor &a, const Tensor &b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

std::size_t normalize_axis(const Tensor &x, std::ptrdiff_t axis) {
    const auto n = static_cast<std::ptrdiff_t>(x.dim());
    if (axis < 0)
        axis += n;
    if (axis < 0 || axis >= n)
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
    return static_cast<std::size_t>(axis);
}

struct AxisSplit {
    std::size_t outer, n, inner;
};

AxisSplit split_at(const Shape &shape, std::size_t axis) {
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i)
        s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i)
        s.inner *= shape[i];
    return s;
}

Shape reduced_shape(const Shape &shape, std::size_t axis, bool keepdim) {
    Shape out = shape;
    if (keepdim)
        out[axis] = 1;
    else
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    return out;
}

template <class F, class D>
Tensor unary(const char *op, const Tensor &x, F forward, D derivative) {
    std::vector<double> out(x.numel());
    auto xs = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = forward(xs[i]);
    return emit(op, x.shape(), std::move(out), {x},
                [derivative](const Tensor &o, std::span<const Tensor> in) {
                    if (!in[0].requires_grad())
                        return;
                    auto g = grad_buffer(in[0]);
                    auto go = o.grad();
                    auto xv = in[0].data();
                    auto ov = o.data();
                    for (std::size_t i = 0; i < g.size(); ++i)
                        g[i] += go[i] * derivative(xv[i], ov[i]);
                });
}

} // namespace

// --- elementwise binary ------------------------------------------------------

Tensor add(const Tensor &a, const Tensor &b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] + b[i];
    return emit("add", a.shape(), std::move(out), {a, b}, [](const Tensor &o, std::span<const Tensor> in) {
        auto go = o.grad();
        for (const auto &t : in) {
            if (!t.requires_grad())
                continue;
            auto g = grad_buffer(t);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go[i];
        }
    });
}

Tensor sub(const Tensor &a, const Tensor &b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] - b[i];
    return emit("sub", a.shape(), std::move(out), {a, b}, [](const Tensor &o, std::span<const Tensor> in) {
        auto go = o.grad();
        if (in[0].requires_grad()) {
            auto g = grad_buffer(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go[i];
        }
        if (in[1].requires_grad()) {
            auto g = grad_buffer(in[1]);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] -= go[i];
        }
    });
}

Tensor mul(const Tensor &a, const Tensor &b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] * b[i];
    return emit("mul", a.shape(), std::move(out), {a, b}, [](const Tensor &o, std::span<const Tensor> in) {
        auto go = o.grad();
        if (in[0].requires_grad()) {
            auto g = grad_buffer(in[0]);
            auto bv = in[1].data();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go[i] * bv[i];
        }
        if (in[1].requires_grad()) {
            auto g = grad_buffer(in[1]);
            auto av = in[0].data();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go[i] * av[i];
        }
    });
}

Tensor div(const Tensor &a, const Tensor &b) {
    require_same_shape("div", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (b[i] == 0.0)
            throw ContractError("div: zero denominator at index " + std::to_string(i));
        out[i] = a[i] / b[i];
    }
    return emit("div", a.shape(), std::move(out), {a, b}, [](const Tensor &o, std::span<const Tensor> in) {
        auto go = o.grad();
        auto bv = in[1].data();
        if (in[0].requires_grad()) {
            auto g = grad_buffer(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go[i] / bv[i];
        }
        if (in[1].requires_grad()) {
            auto g = grad_buffer(in[1]);
            auto ov = o.data();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] -= go[i] * ov[i] / bv[i];
        }
    });
}

Tensor scale(const Tensor &x, double factor) {
    return unary(
        "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor &x, double value) {
    return unary(
        "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

// --- matmul ------------------------------------------------------------------

Tensor matmul(const Tensor &a, const Tensor &b) {
    const bool batched = a.dim() == 3;
    if (!((a.dim() == 2 && b.dim() == 2) || (a.dim() == 3 && b.dim() == 3)))
        throw DimensionError("matmul: expected 2-D or 3-D operands, got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t batch = batched ? a.shape()[0] : 1;
    const std::size_t m = a.shape()[a.dim() - 2], k = a.shape()[a.dim() - 1];
    const std::size_t k2 = b.shape()[b.dim() - 2], n = b.shape()[b.dim() - 1];
    if (k != k2 || (batched && b.shape()[0] != batch))
        throw DimensionError("matmul: shape " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

    std::vector<double> out(batch * m * n);
    for (std::size_t bi = 0; bi < batch; ++bi) {
        ConstMap am(a.data().data() + bi * m * k, m, k);
        ConstMap bm(b.data().data() + bi * k * n, k, n);
        MutMap cm(out.data() + bi * m * n, m, n);
        cm.noalias() = am * bm;
    }
    Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
    return emit("matmul", std::move(shape), std::move(out), {a, b},
                [batch, m, k, n](const Tensor &o, std::span<const Tensor> in) {
                    for (std::size_t bi = 0; bi < batch; ++bi) {
                        ConstMap gc(o.grad().data() + bi * m * n, m, n);
                        if (in[0].requires_grad()) {
                            MutMap ga(grad_buffer(in[0]).data() + bi * m * k, m, k);
                            ConstMap bm(in[1].data().data() + bi * k * n, k, n);
                            ga.noalias() += gc * bm.transpose();
                        }
                        if (in[1].requires_grad()) {
                            MutMap gb(grad_buffer(in[1]).data() + bi * k * n, k, n);
                            ConstMap am(in[0].data().data() + bi * m * k, m, k);
                            gb.noalias() += am.transpose() * gc;
                        }
                    }
                });
}

// --- reductions --------------------------------------------------------------

Tensor sum_axis(const Tensor &x, std::ptrdiff_t axis_in, bool keepdim) {
    const auto axis = normalize_axis(x, axis_in);
    const auto s = split_at(x.shape(), axis);
    std::vector<double> out(s.outer * s.inner, 0.0);
    auto xs = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.n; ++j)
            for (std::size_t i = 0; i < s.inner; ++i)
                out[o * s.inner + i] += xs[(o * s.n + j) * s.inner + i];
    return emit("sum_axis", reduced_shape(x.shape(), axis, keepdim), std::move(out), {x},
                [s](const Tensor &o, std::span<const Tensor> in) {
                    if (!in[0].requires_grad())
                        return;
                    auto g = grad_buffer(in[0]);
                    auto go = o.grad();
                    for (std::size_t a = 0; a < s.outer; ++a)
                        for (std::size_t j = 0; j < s.n; ++j)
                            for (std::size_t i = 0; i < s.inner; ++i)
                                g[(a * s.n + j) * s.inner + i] += go[a * s.inner + i];
                });
}

Tensor mean_axis(const Tensor &x, std::ptrdiff_t axis, bool keepdim) {
    const auto n = x.size(axis);
    if (n == 0)
        throw ContractError("mean_axis over empty axis");
    return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor var_axis(const Tensor &x, std::ptrdiff_t axis_in, bool keepdim) {
    const auto axis = normalize_axis(x, axis_in);
    const auto s = split_at(x.shape(), axis);
    if (s.n == 0)
        throw ContractError("var_axis over empty axis");
    std::vector<double> mean(s.outer * s.inner, 0.0), out(s.outer * s.inner, 0.0);
    auto xs = x.data();
    const double inv = 1.0 / static_cast<double>(s.n);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.n; ++j)
            for (std::size_t i = 0; i < s.inner; ++i)
                mean[o * s.inner + i] += xs[(o * s.n + j) * s.inner + i] * inv;
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.n; ++j)
            for (std::size_t i = 0; i < s.inner; ++i) {
                const double d = xs[(o * s.n + j) * s.inner + i] - mean[o * s.inner + i];
                out[o * s.inner + i] += d * d * inv;
            }
    return emit("var_axis", reduced_shape(x.shape(), axis, keepdim), std::move(out), {x},
                [s, mean = std::move(mean)](const Tensor &o, std::span<const Tensor> in) {
                    if (!in[0].requires_grad())
                        return;
                    auto g = grad_buffer(in[0]);
                    auto go = o.grad();
                    auto xv = in[0].data();
                    const double c = 2.0 / static_cast<double>(s.n);
                    for (std::size_t a = 0; a < s.outer; ++a)
                        for (std::size_t j = 0; j < s.n; ++j)
                            for (std::size_t i = 0; i < s.inner; ++i) {
                                const auto idx = (a * s.n + j) * s.inner + i;
                                g[idx] += go[a * s.inner + i] * c * (xv[idx] - mean[a * s.inner + i]);
                            }
                });
}

Tensor sum_all(const Tensor &x) { return sum_axis(reshape(x, {x.numel()}), 0); }

Tensor mean_all(const Tensor &x) {
    if (x.numel() == 0)
        throw ContractError("mean_all of empty tensor");
    return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// --- elementwise unary -------------------------------------------------------

Tensor sqrt(const Tensor &x) {
    return unary(
        "sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor &x) {
    return unary(
        "abs", x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor sign(const Tensor &x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0);
    // Locally constant: never recorded.
    return Tensor(x.shape(), std::move(out));
}

Tensor tanh(const Tensor &x) {
    return unary(
        "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor ln1p(const Tensor &x) {
    return unary(
        "ln1p", x, [](double v) { return std::log1p(v); }, [](double v, double) { return 1.0 / (1.0 + v); });
}

Tensor exp(const Tensor &x) {
    return unary(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor relu(const Tensor &x) {
    return unary(
        "relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

// --- softmax -----------------------------------------------------------------

Tensor softmax_axis(const Tensor &x, std::ptrdiff_t axis_in) {
    const auto axis = normalize_axis(x, axis_in);
    const auto s = split_at(x.shape(), axis);
    std::vector<double> out(x.numel());
    auto xs = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
            double mx = -INFINITY;
            for (std::size_t j = 0; j < s.n; ++j)
                mx = std::max(mx, xs[at(j)]);
            double total = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) {
                out[at(j)] = std::exp(xs[at(j)] - mx);
                total += out[at(j)];
            }
            for (std::size_t j = 0; j < s.n; ++j)
                out[at(j)] /= total;
        }
    return emit("softmax_axis", x.shape(), std::move(out), {x}, [s](const Tensor &o, std::span<const Tensor> in) {
        if (!in[0].requires_grad())
            return;
        auto g = grad_buffer(in[0]);
        auto go = o.grad();
        auto y = o.data();
        for (std::size_t a = 0; a < s.outer; ++a)
            for (std::size_t i = 0; i < s.inner; ++i) {
                auto at = [&](std::size_t j) { return (a * s.n + j) * s.inner + i; };
                double dot = 0.0;
                for (std::size_t j = 0; j < s.n; ++j)
                    dot += go[at(j)] * y[at(j)];
                for (std::size_t j = 0; j < s.n; ++j)
                    g[at(j)] += y[at(j)] * (go[at(j)] - dot);
            }
    });
}

Tensor log_softmax_last(const Tensor &x) {
    if (x.dim() == 0)
        throw DimensionError("log_softmax_last on scalar");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    auto xs = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double *row = xs.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            total += std::exp(row[j] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < n; ++j)
            out[r * n + j] = row[j] - lse;
    }
    return emit("log_softmax", x.shape(), std::move(out), {x}, [rows, n](const Tensor &o, std::span<const Tensor> in) {
        if (!in[0].requires_grad())
            return;
        auto g = grad_buffer(in[0]);
        auto go = o.grad();
        auto y = o.data();
        for (std::size_t r = 0; r < rows; ++r) {
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                total += go[r * n + j];
            for (std::size_t j = 0; j < n; ++j)
                g[r * n + j] += go[r * n + j] - std::exp(y[r * n + j]) * total;
        }
    });
}

// --- shape ops ---------------------------------------------------------------

namespace {

/// Source offset for every target element of a broadcast.
std::vector<std::size_t> broadcast_index(const Shape &src, const Shape &dst) {
    const std::size_t nd = dst.size();
    std::vector<std::size_t> stride(nd, 0);
    std::size_t acc = 1;
    for (std::size_t k = 0; k < src.size(); ++k) {
        const std::size_t si = src.size() - 1 - k;
        const std::size_t di = nd - 1 - k;
        if (src[si] != 1)
            stride[di] = acc;
        acc *= src[si];
    }
    std::vector<std::size_t> index(shape_numel(dst));
    std::vector<std::size_t> counter(nd, 0);
    std::size_t offset = 0;
    for (std::size_t lin = 0; lin < index.size(); ++lin) {
        index[lin] = offset;
        for (std::size_t d = nd; d-- > 0;) {
            ++counter[d];
            offset += stride[d];
            if (counter[d] < dst[d])
                break;
            offset -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    return index;
}

} // namespace

Tensor broadcast_to(const Tensor &x, const Shape &shape) {
    if (x.dim() > shape.size())
        throw DimensionError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
    for (std::size_t k = 0; k < x.dim(); ++k) {
        const auto s = x.shape()[x.dim() - 1 - k];
        const auto d = shape[shape.size() - 1 - k];
        if (s != 1 && s != d)
            throw DimensionError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                                 shape_str(shape));
    }
    auto index = broadcast_index(x.shape(), shape);
    std::vector<double> out(index.size());
    auto xs = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = xs[index[i]];
    return emit("broadcast", shape, std::move(out), {x},
                [index = std::move(index)](const Tensor &o, std::span<const Tensor> in) {
                    if (!in[0].requires_grad())
                        return;
                    auto g = grad_buffer(in[0]);
                    auto go = o.grad();
                    for (std::size_t i = 0; i < index.size(); ++i)
                        g[index[i]] += go[i];
                });
}

Tensor reshape(const Tensor &x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    std::vector<double> out(x.data().begin(), x.data().end());
    return emit("reshape", std::move(shape), std::move(out), {x}, [](const Tensor &o, std::span<const Tensor> in) {
        if (!in[0].requires_grad())
            return;
        auto g = grad_buffer(in[0]);
        auto go = o.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += go[i];
    });
}

Tensor permute(const Tensor &x, const std::vector<std::size_t> &axes) {
    const std::size_t nd = x.dim();
    if (axes.size() != nd)
        throw DimensionError("permute: axis list length mismatch");
    std::vector<bool> seen(nd, false);
    for (auto a : axes) {
        if (a >= nd || seen[a])
            throw DimensionError("permute: invalid axis list");
        seen[a] = true;
    }
    std::vector<std::size_t> src_stride(nd, 1);
    for (std::size_t d = nd; d-- > 1;)
        src_stride[d - 1] = src_stride[d] * x.shape()[d];
    Shape out_shape(nd);
    std::vector<std::size_t> stride(nd);
    for (std::size_t d = 0; d < nd; ++d) {
        out_shape[d] = x.shape()[axes[d]];
        stride[d] = src_stride[axes[d]];
    }
    std::vector<std::size_t> index(x.numel());
    std::vector<std::size_t> counter(nd, 0);
    std::size_t offset = 0;
    for (std::size_t lin = 0; lin < index.size(); ++lin) {
        index[lin] = offset;
        for (std::size_t d = nd; d-- > 0;) {
            ++counter[d];
            offset += stride[d];
            if (counter[d] < out_shape[d])
                break;
            offset -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    std::vector<double> out(x.numel());
    auto xs = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = xs[index[i]];
    return emit("permute", std::move(out_shape), std::move(out), {x},
                [index = std::move(index)](const Tensor &o, std::span<const Tensor> in) {
                    if (!in[0].requires_grad())
                        return;
                    auto g = grad_buffer(in[0]);
                    auto go = o.grad();
                    for (std::size_t i = 0; i < index.size(); ++i)
                        g[index[i]] += go[i];
                });
}

Tensor transpose(const Tensor &x) {
    if (x.dim() < 2)
        throw DimensionError("transpose needs at least 2 axes");
    std::vector<std::size_t> axes(x.dim());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[x.dim() - 1], axes[x.dim() - 2]);
    return permute(x, axes);
}

// --- gathers -----------------------------------------------------------------

Tensor gather_rows(const Tensor &table, std::span<const std::size_t> ids) {
    if (table.dim() != 2)
        throw DimensionError("gather_rows: table must be 2-D");
    const std::size_t rows = table.shape()[0], d = table.shape()[1];
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= rows)
            throw DimensionError("gather_rows: index " + std::to_string(ids[i]) + " out of range");
        std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return emit("gather_rows", {ids.size(), d}, std::move(out), {table},
                [idx = std::move(idx), d](const Tensor &o, std::span<const Tensor> in) {
                    if (!in[0].requires_grad())
                        return;
                    auto g = grad_buffer(in[0]);
                    auto go = o.grad();
                    for (std::size_t i = 0; i < idx.size(); ++i)
                        for (std::size_t j = 0; j < d; ++j)
                            g[idx[i] * d + j] += go[i * d + j];
                });
}

Tensor pick(const Tensor &x, std::span<const std::size_t> ids) {
    if (x.dim() != 2 || x.shape()[0] != ids.size())
        throw DimensionError("pick: expected [n,c] with n == number of indices");
    const std::size_t c = x.shape()[1];
    std::vector<double> out(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= c)
            throw DimensionError("pick: index " + std::to_string(ids[i]) + " out of range");
        out[i] = x[i * c + ids[i]];
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return emit("pick", {ids.size()}, std::move(out), {x},
                [idx = std::move(idx), c](const Tensor &o, std::span<const Tensor> in) {
                    if (!in[0].requires_grad())
                        return;
                    auto g = grad_buffer(in[0]);
                    auto go = o.grad();
                    for (std::size_t i = 0; i < idx.size(); ++i)
                        g[i * c + idx[i]] += go[i];
                });
}

Tensor cross_entropy(const Tensor &logits, std::span<const std::size_t> targets) {
    return scale(mean_all(pick(log_softmax_last(logits), targets)), -1.0);
}

} // namespace ibn
