#pragma once

#include "ibnorm/compression.hpp"
#include "ibnorm/norm.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

// Self-check suite behind `ibnorm verify`.
namespace ibn::verify {

struct PropertyResult {
    std::string group;
    std::string name;
    bool passed = false;
    /// Offending values when the property fails, a short summary otherwise.
    std::string witness;
    double seconds = 0.0;

    std::string id() const { return group + "." + name; }
    nlohmann::json to_json() const;
};

struct Options {
    /// Substring matched against "group.name"; empty runs everything.
    std::string filter;
    /// Derivative rule under test. Swapping it is how mutations are injected.
    DerivativeFn derivative = f_lambda_derivative;
    std::uint64_t seed = 0;
};

std::vector<std::string> property_ids();
std::vector<PropertyResult> run(const Options &options);
nlohmann::json report(const std::vector<PropertyResult> &results);

/// Max relative error between reverse-mode and central-difference gradients of
/// a projected norm output, over the input and (if present) γ and β. The input
/// is redrawn until every standardized entry is more than 1e-3 from zero, which
/// keeps it away from the kinks of |x - mu| and of the power transform.
double norm_grad_error(const NormSpec &spec, std::mt19937_64 &rng, std::size_t rows = 4, std::size_t features = 6);

/// Every layer configuration covered by the gradient-fidelity check.
std::vector<NormSpec> grad_check_specs();

} // namespace ibn::verify
