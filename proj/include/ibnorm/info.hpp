#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

// Matrix-based Rényi (order 1) entropy and mutual information over batches of
// representations. A batch is an N x d matrix with one sample per row.
namespace ibn::info {

using Batch = Eigen::MatrixXd;

/// Symmetric PSD kernel similarity matrix over a batch.
struct GramMatrix {
    Eigen::MatrixXd entries;
    bool trace_normalized = false;

    std::size_t n() const { return static_cast<std::size_t>(entries.rows()); }
};

/// Diagonal 0/1 mask; active[i] is false once instance i has finished.
struct MaskMatrix {
    std::vector<bool> active;

    static MaskMatrix all_active(std::size_t n) { return {std::vector<bool>(n, true)}; }
    std::size_t active_count() const;
};

/// Rows scaled to unit l2 norm; zero rows stay zero.
Batch l2_normalize_rows(const Batch &u);

/// exp(-||u_i - u_j||^2 / (2 sigma^2)) over l2-normalized rows, not trace-normalized.
GramMatrix kernel_gram(const Batch &u, double sigma = 1.0);

/// Divides by the trace. Throws EstimationError if the trace is not positive.
GramMatrix trace_normalize(GramMatrix g);

/// kernel_gram followed by trace normalization. Requires N >= 2.
GramMatrix gram(const Batch &u, double sigma = 1.0);

/// M G M for the diagonal mask M (not renormalized).
GramMatrix apply_mask(const GramMatrix &g, const MaskMatrix &mask);

/// -sum_k l_k ln l_k over the spectrum of a trace-normalized Gram matrix, in nats.
double matrix_entropy(const GramMatrix &g);

/// Trace-normalized Hadamard product.
GramMatrix joint_gram(const GramMatrix &gu, const GramMatrix &gv);

/// H(U) + H(V) - H(U,V). With a mask, inactive rows and columns are zeroed in
/// both marginal Gram matrices before normalization. Not floored at zero.
double mutual_information(const Batch &u, const Batch &v, double sigma = 1.0,
                          const std::optional<MaskMatrix> &mask = std::nullopt);

/// Representations collected at one sampled timestep.
struct TimestepReps {
    /// layers[0] is the input representation T_0, layers[l] the output of the l-th norm.
    std::vector<Batch> layers;
    /// Label embeddings Y.
    Batch labels;
    std::optional<MaskMatrix> mask;
};

struct IBCell {
    std::size_t timestep = 0;
    std::size_t layer = 0; // 1-based
    double i_y = 0.0;
    double i_prev = 0.0;
};

/// Per (timestep, layer) estimates of I(Y;T_l) and I(T_{l-1};T_l) and their aggregate.
struct IBTrace {
    std::size_t layers = 0;
    std::size_t timesteps = 0;
    double beta = 1.0;
    double sigma = 1.0;
    /// Timestep-major, layer-minor.
    std::vector<IBCell> cells;
    /// Mean over timesteps of sum_l (i_y - beta * i_prev).
    double ib_value = 0.0;

    double contribution(const IBCell &cell) const { return cell.i_y - beta * cell.i_prev; }
    double recompute_ib_value() const;
    const IBCell &at(std::size_t timestep, std::size_t layer) const;

    nlohmann::json to_json() const;
    static IBTrace from_json(const nlohmann::json &j);
    /// Columns: timestep,layer,i_y,i_prev,ib_contrib
    std::string to_csv() const;
};

/// Fills an IBTrace from every timestep's T_0..T_L and labels.
IBTrace token_ib_value(std::span<const TimestepReps> reps, double beta = 1.0, double sigma = 1.0);

} // namespace ibn::info
