// Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion.
//
//   acceptance            run all
//   acceptance --only 3   run one
//
// Exit status is 0 iff every selected criterion passes.

#include "ibnorm/compression.hpp"
#include "ibnorm/distribution.hpp"
#include "ibnorm/info.hpp"
#include "ibnorm/norm.hpp"
#include "ibnorm/train.hpp"
#include "ibnorm/verify.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

using namespace ibn;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradMargin = 1e-3; // enforced inside verify::norm_grad_error
constexpr int kGradInputs = 50;
constexpr double kEquivTol = 1e-10;
constexpr double kEquivEps = 1e-14;
constexpr double kPureTol = 1e-10;
constexpr double kMixedTol = 1e-9;
constexpr double kGramTol = 1e-12;
constexpr double kTailThreshold = 2.5;

// Desk-scale training runs (criteria 8 and 9).
constexpr std::size_t kBatch = 8;
constexpr std::size_t kFrozenSteps = 2000;
constexpr double kFrozenLr = 1e-2;
constexpr std::size_t kProbeRows = 64;
constexpr std::size_t kProbeTimesteps = 8;
constexpr int kFrozenSeeds = 10;
constexpr int kFrozenWinsNeeded = 7;
constexpr std::size_t kAblationSteps = 1000;
constexpr double kAblationLr = 3e-3;
constexpr int kAblationSeeds = 5;

struct Outcome {
    bool passed = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 6) {
    std::ostringstream ss;
    ss.precision(prec);
    ss << v;
    return ss.str();
}

constexpr CompressionKind kKinds[] = {CompressionKind::S, CompressionKind::L, CompressionKind::T};
constexpr double kLambdas[] = {1.0, 2.0, 4.0, 8.0};

Outcome bounded_compression() {
    const auto grid = log_grid(1e-6, 1e3, 200);
    std::size_t checked = 0;
    for (auto k : kKinds)
        for (double lam : kLambdas)
            for (double r : grid) {
                const double f = f_lambda(k, r, lam);
                if (!(f >= 0.0 && f <= r / lam))
                    return {false, std::string(to_string(k)) + " lambda=" + fmt(lam) + " r=" + fmt(r, 17) +
                                       " f=" + fmt(f, 17) + " r/lambda=" + fmt(r / lam, 17)};
                ++checked;
            }
    return {true, std::to_string(checked) + " points"};
}

Outcome jacobian_bound() {
    const auto grid = log_grid(1e-6, 1e3, 200);
    double worst = -1.0;
    for (auto k : kKinds)
        for (double lam : kLambdas)
            for (double r : grid) {
                const double d = f_lambda_derivative(k, r, lam);
                if (!(d <= 1.0 / lam))
                    return {false, std::string(to_string(k)) + " lambda=" + fmt(lam) + " r=" + fmt(r, 17) +
                                       " f'=" + fmt(d, 17)};
                worst = std::max(worst, d * lam);
            }
    return {true, "max lambda*f' = " + fmt(worst, 17)};
}

Outcome gradient_fidelity() {
    std::mt19937_64 rng(3);
    double worst = 0.0;
    std::string worst_spec;
    static_assert(kGradMargin == 1e-3);
    for (const auto &spec : verify::grad_check_specs())
        for (int i = 0; i < kGradInputs; ++i) {
            const double e = verify::norm_grad_error(spec, rng);
            if (!(e <= worst)) {
                worst = e;
                worst_spec = spec.label();
            }
        }
    return {worst <= kGradRelTol, std::to_string(verify::grad_check_specs().size()) + " layers x " +
                                      std::to_string(kGradInputs) + " inputs, worst " + fmt(worst) + " (" +
                                      worst_spec + ")"};
}

Outcome layernorm_equivalence() {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 3.0);
    std::uniform_real_distribution<double> loglam(std::log(0.1), std::log(100.0));
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t width = 4 + t % 61;
        std::vector<double> xs(3 * width);
        for (auto &v : xs)
            v = n(rng) + 5.0;
        const double lam = std::exp(loglam(rng));
        const Tensor x({3, width}, xs);
        const Tensor a = layer_norm(x, NormSpec::layer_norm(kEquivEps, false), std::nullopt);
        const Tensor b = ibnorm(x, NormSpec::ibnorm(CompressionKind::S, lam, kEquivEps, false), std::nullopt);
        for (std::size_t i = 0; i < xs.size(); ++i)
            worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return {worst <= kEquivTol, "max |diff| = " + fmt(worst)};
}

Outcome entropy_anchors() {
    info::Batch same(6, 3);
    for (Eigen::Index i = 0; i < same.rows(); ++i)
        same.row(i) << 1.0, -2.0, 0.5;
    const double h_pure = info::matrix_entropy(info::gram(same));

    // Orthogonal unit rows with a narrow kernel: off-diagonal entries underflow to 0, so G = I/4.
    const double h_limit = info::matrix_entropy(info::gram(Eigen::MatrixXd::Identity(4, 4), 0.01));
    const double h_direct = info::matrix_entropy({Eigen::MatrixXd::Identity(4, 4) / 4.0, true});

    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    double asym = 0.0, trace_err = 0.0;
    for (int t = 0; t < 100; ++t) {
        info::Batch u(2 + t % 20, 1 + t % 7);
        for (Eigen::Index i = 0; i < u.size(); ++i)
            u.data()[i] = n(rng);
        const auto g = info::gram(u, 0.5 + 0.05 * t);
        asym = std::max(asym, (g.entries - g.entries.transpose()).cwiseAbs().maxCoeff());
        trace_err = std::max(trace_err, std::abs(g.entries.trace() - 1.0));
    }
    const bool ok = std::abs(h_pure) <= kPureTol && std::abs(h_limit - std::log(4.0)) <= kMixedTol &&
                    std::abs(h_direct - std::log(4.0)) <= kMixedTol && asym <= kGramTol && trace_err <= kGramTol;
    return {ok, "H(identical)=" + fmt(h_pure, 3) + " H(limit)=" + fmt(h_limit, 17) + " H(I/4)=" +
                    fmt(h_direct, 17) + " asym=" + fmt(asym, 3) + " |tr-1|=" + fmt(trace_err, 3)};
}

Outcome entropy_reduction() {
    std::string detail;
    bool ok = true;
    for (auto k : {CompressionKind::L, CompressionKind::T}) {
        int holds = 0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto xs = dist::draw_samples({}, 10000, seed);
            const Tensor y = compress(Tensor({xs.size()}, xs), {k, 4.0, xs.size()});
            holds += dist::knn_entropy(y.data()) <= dist::knn_entropy(xs) ? 1 : 0;
        }
        ok = ok && holds >= 19;
        detail += std::string(to_string(k)) + ": " + std::to_string(holds) + "/20 ";
    }
    return {ok, detail};
}

Outcome tail_compression() {
    dist::SweepConfig cfg;
    cfg.n_samples = 100000;
    cfg.seed = 0;
    const std::vector<NormSpec> specs{NormSpec::layer_norm(1e-5, false),
                                      NormSpec::ibnorm(CompressionKind::T, 4.0, 1e-5, false)};
    const auto res = dist::pipeline_density_sweep(cfg, specs);
    const double k_std = res[0].moments.excess_kurtosis, k_t = res[1].moments.excess_kurtosis;
    const double tail_std = dist::tail_mass(res[0].outputs, kTailThreshold);
    const double tail_t = dist::tail_mass(res[1].outputs, kTailThreshold);
    const bool a = k_t > k_std, b = tail_t <= tail_std;
    return {a && b, std::string("(a) ") + (a ? "holds" : "fails") + ": kurtosis T=" + fmt(k_t) + " std=" +
                        fmt(k_std) + "; (b) " + (b ? "holds" : "fails") + ": P(|out|>2.5) T=" + fmt(tail_t) +
                        " std=" + fmt(tail_std)};
}

DataSpec corpus() {
    DataSpec ds;
    ds.task = TaskKind::CharLM;
    ds.text_path = IBNORM_DATA_DIR "/milton.txt";
    return ds;
}

Outcome ib_direction() {
    const auto ds = corpus();
    int wins = 0;
    std::string detail;
    for (int seed = 0; seed < kFrozenSeeds; ++seed) {
        const auto data = make_dataset(ds, seed);
        const auto held_out = data.head(Split::Eval, kProbeRows);
        double ib[2];
        int i = 0;
        for (const auto &norm : {NormSpec::layer_norm(), NormSpec::ibnorm(CompressionKind::L, 4.0)}) {
            TrainConfig cfg;
            cfg.seed = seed;
            cfg.batch_size = kBatch;
            cfg.steps = kFrozenSteps;
            cfg.warmup_steps = kFrozenSteps / 20;
            cfg.eval_interval = kFrozenSteps;
            cfg.eval_rows = kProbeRows;
            cfg.freeze_except_norm = true;
            cfg.optimizer.learning_rate = kFrozenLr;
            auto run = train(ModelSpec::for_dataset(data, norm), cfg, data);
            ib[i++] = probe_ib(*run.model, held_out, 1.0, 1.0, kProbeTimesteps).ib_value;
        }
        const bool win = ib[1] >= ib[0];
        wins += win ? 1 : 0;
        std::printf("  seed %d: IB(IBNorm-L)=%.6f IB(LayerNorm)=%.6f %s\n", seed, ib[1], ib[0], win ? "win" : "loss");
        std::fflush(stdout);
    }
    detail = std::to_string(wins) + "/" + std::to_string(kFrozenSeeds) + " seed pairs";
    return {wins >= kFrozenWinsNeeded, detail};
}

Outcome ablation_direction() {
    const auto ds = corpus();
    int best4 = 0, affine_wins = 0;
    for (int seed = 0; seed < kAblationSeeds; ++seed) {
        const auto data = make_dataset(ds, seed);
        auto run = [&](double lam, bool affine) {
            TrainConfig cfg;
            cfg.seed = seed;
            cfg.batch_size = kBatch;
            cfg.steps = kAblationSteps;
            cfg.warmup_steps = kAblationSteps / 20;
            cfg.eval_interval = kAblationSteps;
            cfg.eval_rows = 0;
            cfg.optimizer.learning_rate = kAblationLr;
            const auto norm = NormSpec::ibnorm(CompressionKind::L, lam, 1e-5, affine);
            return train(ModelSpec::for_dataset(data, norm), cfg, data).metrics.back().eval_loss;
        };
        const double l05 = run(0.5, true), l4 = run(4.0, true), l8 = run(8.0, true), l4_bare = run(4.0, false);
        const bool b = l4 <= l05 && l4 <= l8, a = l4_bare >= l4;
        best4 += b ? 1 : 0;
        affine_wins += a ? 1 : 0;
        std::printf("  seed %d: eval loss lambda 0.5=%.6f 4=%.6f 8=%.6f no-affine(4)=%.6f\n", seed, l05, l4, l8,
                    l4_bare);
        std::fflush(stdout);
    }
    const int majority = kAblationSeeds / 2 + 1;
    return {best4 >= majority && affine_wins >= majority,
            "lambda=4 best in " + std::to_string(best4) + "/" + std::to_string(kAblationSeeds) +
                ", no-affine >= affine in " + std::to_string(affine_wins) + "/" + std::to_string(kAblationSeeds)};
}

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome determinism() {
    const auto root = fs::temp_directory_path() / "ibnorm_acceptance_10";
    fs::remove_all(root);
    std::vector<std::string> notes;
    bool ok = true;

    auto check = [&](const std::string &name, const ModelSpec &spec, TrainConfig cfg, const Dataset &data) {
        cfg.output_dir = (root / name / "a").string();
        auto a = train(spec, cfg, data);
        cfg.output_dir = (root / name / "b").string();
        auto b = train(spec, cfg, data);
        const bool csv = slurp(root / name / "a" / "metrics.csv") == slurp(root / name / "b" / "metrics.csv");

        const auto loaded = Checkpoint::load(root / name / "a" / "checkpoint.ibn");
        const auto held_out = data.head(Split::Eval, cfg.eval_rows);
        auto restored = restore_model(loaded);
        const auto x = evaluate(*a.model, held_out), y = evaluate(*restored, held_out);
        const bool bitwise = std::memcmp(&x.eval_loss, &y.eval_loss, sizeof(double)) == 0 &&
                             std::memcmp(&x.eval_metric, &y.eval_metric, sizeof(double)) == 0;
        ok = ok && csv && bitwise;
        notes.push_back(name + ": csv " + (csv ? "identical" : "DIFFERS") + ", round trip " +
                        (bitwise ? "bitwise" : "DIFFERS"));
    };

    DataSpec cls;
    cls.train_size = 1024;
    cls.eval_size = 256;
    const auto cls_data = make_dataset(cls, 9);
    TrainConfig cfg;
    cfg.seed = 9;
    cfg.steps = 100;
    cfg.eval_interval = 25;
    cfg.eval_rows = 128;
    check("mlp", ModelSpec::for_dataset(cls_data, NormSpec::ibnorm(CompressionKind::T, 4.0)), cfg, cls_data);
    check("mlp_batchnorm", ModelSpec::for_dataset(cls_data, NormSpec::batch_norm()), cfg, cls_data);

    const auto lm_data = make_dataset(corpus(), 9);
    auto lm = ModelSpec::for_dataset(lm_data, NormSpec::ibnorm(CompressionKind::L, 4.0));
    TrainConfig lm_cfg;
    lm_cfg.seed = 9;
    lm_cfg.batch_size = kBatch;
    lm_cfg.steps = 30;
    lm_cfg.eval_interval = 10;
    lm_cfg.eval_rows = 16;
    check("char_lm", lm, lm_cfg, lm_data);

    fs::remove_all(root);
    std::string detail;
    for (const auto &n : notes)
        detail += (detail.empty() ? "" : "; ") + n;
    return {ok, detail};
}

struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> run;
    /// Wall-clock budget in seconds; 0 means unbounded.
    double budget;
};

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Acceptance criteria"};
    int only = 0;
    app.add_option("--only", only, "Run a single criterion (1-10)")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria{
        {1, "bounded compression", bounded_compression, 1.0},
        {2, "jacobian bound", jacobian_bound, 1.0},
        {3, "gradient fidelity", gradient_fidelity, 30.0},
        {4, "IBNorm-S equals LayerNorm", layernorm_equivalence, 1.0},
        {5, "matrix-entropy anchors", entropy_anchors, 5.0},
        {6, "entropy reduction", entropy_reduction, 60.0},
        {7, "tail compression and kurtosis", tail_compression, 10.0},
        {8, "IB value direction (frozen backbone)", ib_direction, 0.0},
        {9, "lambda and affine ablation direction", ablation_direction, 0.0},
        {10, "determinism and persistence", determinism, 120.0},
    };

    bool all = true;
    for (const auto &c : criteria) {
        if (only != 0 && c.id != only)
            continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception &e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        if (c.budget > 0.0 && secs > c.budget) {
            o.passed = false;
            o.detail += "; over budget of " + fmt(c.budget) + " s";
        }
        std::printf("%s %d %s (%.2f s): %s\n", o.passed ? "PASS" : "FAIL", c.id, c.name.c_str(), secs,
                    o.detail.c_str());
        std::fflush(stdout);
        all = all && o.passed;
    }
    return all ? 0 : 1;
}
