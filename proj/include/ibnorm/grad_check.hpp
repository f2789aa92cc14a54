#pragma once

#include "ibnorm/tensor.hpp"

#include <cstddef>
#include <functional>

namespace ibn {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
};

using ScalarFn = std::function<Tensor(const Tensor &)>;

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences of step `eps`. Per coordinate the error is
/// |a - n| / max(|a|, |n|, 1e-8). Throws NumericError naming the coordinate
/// if either gradient is NaN.
GradCheckResult grad_check(const ScalarFn &f, const Tensor &x, double eps = 1e-5);

} // namespace ibn
