#include "ibnorm/info.hpp"

#include "ibnorm/errors.hpp"
#include "ibnorm/log.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <sstream>

namespace ibn::info {

namespace {
constexpr double kClipBelow = 1e-12;
constexpr double kNegativeTolerance = 1e-8;
} // namespace

std::size_t MaskMatrix::active_count() const {
    std::size_t n = 0;
    for (bool a : active)
        n += a ? 1 : 0;
    return n;
}

Batch l2_normalize_rows(const Batch &u) {
    Batch out = u;
    std::size_t zeros = 0;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double norm = out.row(i).norm();
        if (norm > 0.0)
            out.row(i) /= norm;
        else
            ++zeros;
    }
    if (zeros)
        log_info("gram: " + std::to_string(zeros) + " zero vector(s) left unnormalized");
    return out;
}

GramMatrix kernel_gram(const Batch &u, double sigma) {
    if (u.rows() < 2)
        throw ContractError("gram needs at least 2 samples, got " + std::to_string(u.rows()));
    if (!(sigma > 0.0))
        throw ContractError("gram bandwidth must be positive");
    const Batch x = l2_normalize_rows(u);
    const Eigen::Index n = x.rows();
    const Eigen::VectorXd sq = x.rowwise().squaredNorm();
    const Eigen::MatrixXd dots = x * x.transpose();
    const double scale = -1.0 / (2.0 * sigma * sigma);
    GramMatrix g;
    g.entries.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        g.entries(i, i) = 1.0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double d2 = std::max(0.0, sq(i) + sq(j) - 2.0 * dots(i, j));
            const double k = std::exp(scale * d2);
            g.entries(i, j) = k;
            g.entries(j, i) = k;
        }
    }
    return g;
}

GramMatrix trace_normalize(GramMatrix g) {
    const double tr = g.entries.trace();
    if (!(tr > 0.0))
        throw EstimationError("cannot trace-normalize a Gram matrix with non-positive trace");
    g.entries /= tr;
    g.trace_normalized = true;
    return g;
}

GramMatrix gram(const Batch &u, double sigma) { return trace_normalize(kernel_gram(u, sigma)); }

GramMatrix apply_mask(const GramMatrix &g, const MaskMatrix &mask) {
    if (mask.active.size() != g.n())
        throw DimensionError("mask size " + std::to_string(mask.active.size()) + " != Gram size " +
                             std::to_string(g.n()));
    GramMatrix out = g;
    for (std::size_t i = 0; i < g.n(); ++i) {
        if (mask.active[i])
            continue;
        out.entries.row(static_cast<Eigen::Index>(i)).setZero();
        out.entries.col(static_cast<Eigen::Index>(i)).setZero();
    }
    out.trace_normalized = false;
    return out;
}

double matrix_entropy(const GramMatrix &g) {
    if (!g.trace_normalized && std::abs(g.entries.trace() - 1.0) > 1e-9)
        throw ContractError("matrix_entropy requires a trace-normalized Gram matrix");
    const Eigen::MatrixXd sym = 0.5 * (g.entries + g.entries.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) {
        std::ostringstream os;
        os << "eigendecomposition failed (n=" << g.n() << ", max |entry|=" << sym.cwiseAbs().maxCoeff() << ")";
        throw NumericError(os.str());
    }
    double h = 0.0;
    for (Eigen::Index k = 0; k < solver.eigenvalues().size(); ++k) {
        double lam = solver.eigenvalues()(k);
        if (lam < -kNegativeTolerance) {
            std::ostringstream os;
            os.precision(17);
            os << "Gram matrix is not PSD: eigenvalue " << lam;
            throw NumericError(os.str());
        }
        lam = std::min(lam, 1.0);
        if (lam < kClipBelow)
            continue;
        h -= lam * std::log(lam);
    }
    return h;
}

GramMatrix joint_gram(const GramMatrix &gu, const GramMatrix &gv) {
    if (gu.n() != gv.n())
        throw DimensionError("joint_gram: sizes " + std::to_string(gu.n()) + " and " + std::to_string(gv.n()));
    GramMatrix joint;
    joint.entries = gu.entries.cwiseProduct(gv.entries);
    return trace_normalize(std::move(joint));
}

double mutual_information(const Batch &u, const Batch &v, double sigma, const std::optional<MaskMatrix> &mask) {
    if (u.rows() != v.rows())
        throw DimensionError("mutual_information: batch sizes differ");
    GramMatrix gu = kernel_gram(u, sigma);
    GramMatrix gv = kernel_gram(v, sigma);
    if (mask) {
        if (mask->active_count() < 2)
            throw EstimationError("mutual_information needs at least 2 active instances");
        gu = apply_mask(gu, *mask);
        gv = apply_mask(gv, *mask);
    }
    gu = trace_normalize(std::move(gu));
    gv = trace_normalize(std::move(gv));
    return matrix_entropy(gu) + matrix_entropy(gv) - matrix_entropy(joint_gram(gu, gv));
}

// --- IBTrace -----------------------------------------------------------------

double IBTrace::recompute_ib_value() const {
    if (timesteps == 0)
        return 0.0;
    double total = 0.0;
    for (const auto &cell : cells)
        total += contribution(cell);
    return total / static_cast<double>(timesteps);
}

const IBCell &IBTrace::at(std::size_t timestep, std::size_t layer) const {
    if (timestep >= timesteps || layer == 0 || layer > layers)
        throw ContractError("IBTrace::at out of range");
    return cells[timestep * layers + (layer - 1)];
}

nlohmann::json IBTrace::to_json() const {
    nlohmann::json grid = nlohmann::json::array();
    for (const auto &c : cells)
        grid.push_back({{"timestep", c.timestep},
                        {"layer", c.layer},
                        {"i_y", c.i_y},
                        {"i_prev", c.i_prev},
                        {"ib_contrib", contribution(c)}});
    return {{"layers", layers}, {"timesteps", timesteps}, {"beta", beta},
            {"sigma", sigma},   {"ib_value", ib_value},   {"grid", std::move(grid)}};
}

IBTrace IBTrace::from_json(const nlohmann::json &j) {
    IBTrace t;
    t.layers = j.at("layers").get<std::size_t>();
    t.timesteps = j.at("timesteps").get<std::size_t>();
    t.beta = j.at("beta").get<double>();
    t.sigma = j.at("sigma").get<double>();
    t.ib_value = j.at("ib_value").get<double>();
    for (const auto &c : j.at("grid"))
        t.cells.push_back({c.at("timestep").get<std::size_t>(), c.at("layer").get<std::size_t>(),
                           c.at("i_y").get<double>(), c.at("i_prev").get<double>()});
    if (t.cells.size() != t.layers * t.timesteps)
        throw ContractError("IBTrace JSON grid size does not match layers x timesteps");
    return t;
}

std::string IBTrace::to_csv() const {
    std::string out = "timestep,layer,i_y,i_prev,ib_contrib\n";
    char buf[160];
    for (const auto &c : cells) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g\n", c.timestep, c.layer, c.i_y, c.i_prev,
                      contribution(c));
        out += buf;
    }
    return out;
}

IBTrace token_ib_value(std::span<const TimestepReps> reps, double beta, double sigma) {
    if (reps.empty())
        throw ContractError("token_ib_value needs at least one timestep");
    const std::size_t depth = reps.front().layers.size();
    if (depth < 2)
        throw ContractError("token_ib_value needs T_0 and at least one layer");

    IBTrace trace;
    trace.layers = depth - 1;
    trace.timesteps = reps.size();
    trace.beta = beta;
    trace.sigma = sigma;
    trace.cells.reserve(trace.layers * trace.timesteps);
    for (std::size_t p = 0; p < reps.size(); ++p) {
        const auto &step = reps[p];
        if (step.layers.size() != depth)
            throw ContractError("timestep " + std::to_string(p) + " has " + std::to_string(step.layers.size()) +
                                " representation sets, expected " + std::to_string(depth));
        for (std::size_t l = 1; l < depth; ++l) {
            IBCell cell;
            cell.timestep = p;
            cell.layer = l;
            cell.i_y = mutual_information(step.labels, step.layers[l], sigma, step.mask);
            cell.i_prev = mutual_information(step.layers[l - 1], step.layers[l], sigma, step.mask);
            trace.cells.push_back(cell);
        }
    }
    trace.ib_value = trace.recompute_ib_value();
    return trace;
}

} // namespace ibn::info
