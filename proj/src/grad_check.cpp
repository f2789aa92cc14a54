#include "ibnorm/grad_check.hpp"

#include "ibnorm/errors.hpp"

#include <algorithm>
#include <cmath>

namespace ibn {

GradCheckResult grad_check(const ScalarFn &f, const Tensor &x, double eps) {
    Tensor probe = x.detach();
    probe.set_requires_grad(true);

    std::vector<double> analytic;
    {
        Graph graph;
        GraphScope scope(graph);
        Tensor loss = f(probe);
        if (graph.size() == 0) {
            // f does not depend on x through any recorded primitive.
            analytic.assign(x.numel(), 0.0);
        } else {
            auto grads = backward(graph, loss);
            if (grads.contains(probe)) {
                auto g = grads.of(probe);
                analytic.assign(g.begin(), g.end());
            } else {
                analytic.assign(x.numel(), 0.0);
            }
        }
    }

    NoGradGuard no_grad;
    GradCheckResult result;
    Tensor shifted = x.detach();
    auto data = shifted.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double orig = data[i];
        data[i] = orig + eps;
        const double up = f(shifted).item();
        data[i] = orig - eps;
        const double down = f(shifted).item();
        data[i] = orig;
        const double numeric = (up - down) / (2.0 * eps);
        if (std::isnan(numeric) || std::isnan(analytic[i]))
            throw NumericError("grad_check: NaN gradient at coordinate " + std::to_string(i));
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        const double err = std::abs(analytic[i] - numeric) / denom;
        if (err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst_index = i;
        }
    }
    return result;
}

} // namespace ibn
