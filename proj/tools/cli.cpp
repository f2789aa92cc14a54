#include "cli.hpp"

#include "ibnorm/checkpoint.hpp"
#include "ibnorm/compression.hpp"
#include "ibnorm/distribution.hpp"
#include "ibnorm/errors.hpp"
#include "ibnorm/train.hpp"
#include "ibnorm/verify.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

namespace ibn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[48];
    std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms));
    return out;
}

/// Everything a subcommand reports about itself. Written to <dir>/manifest.json.
struct Manifest {
    std::string subcommand;
    json config = json::object();
    std::uint64_t seed = 0;
    std::vector<fs::path> artifacts;
    std::string started_at = utc_now();
    fs::path dir;

    void write(int exit_status) const {
        if (dir.empty())
            return;
        json j{{"subcommand", subcommand},
               {"resolved_config", config},
               {"seed", seed},
               {"library_version", kLibraryVersion},
               {"started_at", started_at},
               {"finished_at", utc_now()},
               {"exit_status", exit_status},
               {"artifacts", json::array()}};
        for (const auto &a : artifacts)
            if (exit_status == kOk || fs::exists(a))
                j["artifacts"].push_back(a.string());
        fs::create_directories(dir);
        write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
    }
};

/// Default location for a subcommand's artifacts: $IBNORM_OUTPUT_ROOT or ./ibnorm-out.
fs::path output_root() {
    const char *env = std::getenv("IBNORM_OUTPUT_ROOT");
    return env && *env ? fs::path(env) : fs::path("ibnorm-out");
}

fs::path abs_path(const fs::path &p) { return fs::weakly_canonical(fs::absolute(p)); }

json parse_json_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot read config '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    try {
        return json::parse(text);
    } catch (const json::parse_error &e) {
        // e.byte is 1-based; report the position as line:column.
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        std::string what = e.what();
        if (auto p = what.find("syntax error"); p != std::string::npos)
            what = what.substr(p);
        throw ConfigError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + what);
    }
}

void write_text(const fs::path &path, const std::string &text, Manifest &m) {
    fs::create_directories(path.parent_path());
    write_file_atomic(path, text);
    m.artifacts.push_back(path);
}

std::vector<double> parse_values(const std::string &text) {
    std::vector<double> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception &) {
            used = 0;
        }
        if (used == 0 || item.find_first_not_of(" \t", used) != std::string::npos)
            throw ConfigError("--values: cannot parse '" + item + "'");
        out.push_back(v);
    }
    if (out.empty())
        throw ConfigError("--values is empty");
    return out;
}

/// File-name friendly form of a norm label: "ibnorm-l(4)*" -> "ibnorm-l_lambda4_star".
std::string slug(const std::string &label) {
    std::string s;
    for (char c : label) {
        if (c == '(')
            s += "_lambda";
        else if (c == '*')
            s += "_star";
        else if (c != ')')
            s += c;
    }
    return s;
}

// demo-compress ---------------------------------------------------------------

struct DemoArgs {
    std::string kind;
    double lambda = 0.0;
    std::string values = "-3,-1,0,1,3";
    std::size_t group_size = 0;
    std::string csv;
    std::string output_dir;
};

int demo_compress(const DemoArgs &a, Manifest &m, std::ostream &out) {
    const auto values = parse_values(a.values);
    CompressionParams p{parse_compression_kind(a.kind), a.lambda, a.group_size ? a.group_size : values.size()};
    p.validate();
    if (values.size() % p.group_size != 0)
        throw ConfigError("--group-size must divide the number of values");
    m.dir = a.output_dir.empty() ? output_root() / "demo-compress" : fs::path(a.output_dir);
    m.config = {{"kind", to_string(p.kind)}, {"lambda", p.lambda}, {"values", values}, {"group_size", p.group_size},
                {"csv", a.csv}};

    const std::size_t rows = values.size() / p.group_size;
    const Tensor y = compress(Tensor({rows, p.group_size}, values), p);
    std::ostringstream table;
    table << "x,mu,deviation,compressed\n";
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < p.group_size; ++j)
            mu += values[r * p.group_size + j];
        mu /= static_cast<double>(p.group_size);
        for (std::size_t j = 0; j < p.group_size; ++j) {
            const std::size_t i = r * p.group_size + j;
            table << fmt(values[i]) << ',' << fmt(mu) << ',' << fmt(values[i] - mu) << ',' << fmt(y[i]) << '\n';
        }
    }
    out << table.str();
    if (!a.csv.empty())
        write_text(a.csv, table.str(), m);
    return kOk;
}

// kde-sweep -------------------------------------------------------------------

struct SweepArgs {
    std::string config;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
};

NormSpec sweep_spec(const json &entry, double lambda, std::string &name) {
    if (entry.is_string()) {
        const auto s = entry.get<std::string>();
        if (s == "standardize") {
            name = s;
            return NormSpec::layer_norm(1e-5, false);
        }
        auto spec = parse_norm_name(s, lambda);
        name = slug(spec.label());
        return spec;
    }
    auto spec = norm_spec_from_json(entry);
    name = slug(spec.label());
    return spec;
}

int kde_sweep(const SweepArgs &a, Manifest &m, std::ostream &out) {
    const json cfg = parse_json_file(a.config);
    dist::SweepConfig base;
    base.n_samples = cfg.value("n_samples", base.n_samples);
    base.group_size = cfg.value("group_size", base.group_size);
    base.grid_points = cfg.value("grid_points", base.grid_points);
    if (cfg.contains("bandwidth") && !cfg["bandwidth"].is_null())
        base.bandwidth = cfg["bandwidth"].get<double>();
    base.seed = a.seed.value_or(cfg.value("seed", std::uint64_t{0}));
    const double lambda = cfg.value("lambda", 4.0);
    const double threshold = cfg.value("tail_threshold", 2.5);

    const json dists = cfg.value("distributions", json::array({"gaussian"}));
    const json spec_entries = cfg.value("specs", json::array({"standardize", "ibnorm-l", "ibnorm-t", "ibnorm-s"}));
    std::vector<NormSpec> specs;
    std::vector<std::string> names;
    json resolved_specs = json::array();
    for (const auto &e : spec_entries) {
        std::string name;
        specs.push_back(sweep_spec(e, lambda, name));
        names.push_back(name);
        resolved_specs.push_back(norm_spec_to_json(specs.back()));
    }

    m.dir = !a.output_dir.empty()              ? fs::path(a.output_dir)
            : cfg.contains("output_dir")       ? fs::path(cfg["output_dir"].get<std::string>())
                                               : output_root() / "kde-sweep";
    m.seed = base.seed;
    m.config = {{"n_samples", base.n_samples}, {"group_size", base.group_size}, {"grid_points", base.grid_points},
                {"bandwidth", base.bandwidth ? json(*base.bandwidth) : json(nullptr)},
                {"seed", base.seed}, {"lambda", lambda}, {"tail_threshold", threshold},
                {"specs", resolved_specs}, {"distributions", json::array()}, {"output_dir", m.dir.string()}};

    std::vector<std::pair<dist::SweepConfig, std::string>> runs;
    for (const auto &d : dists) {
        dist::SweepConfig c = base;
        if (d.is_string()) {
            c.distribution.kind = dist::parse_distribution(d.get<std::string>());
        } else {
            c.distribution.kind = dist::parse_distribution(d.at("kind").get<std::string>());
            c.distribution.location = d.value("location", c.distribution.location);
            c.distribution.scale = d.value("scale", c.distribution.scale);
        }
        const std::string dname = d.is_object() ? d.value("name", dist::to_string(c.distribution.kind))
                                                : dist::to_string(c.distribution.kind);
        m.config["distributions"].push_back({{"name", dname},
                                             {"kind", dist::to_string(c.distribution.kind)},
                                             {"location", c.distribution.location},
                                             {"scale", c.distribution.scale}});
        runs.emplace_back(c, dname);
    }

    std::set<std::string> seen;
    json summary = json::array();
    for (const auto &[c, dname] : runs) {
        const auto results = dist::pipeline_density_sweep(c, specs);
        for (std::size_t i = 0; i < results.size(); ++i) {
            const std::string file = dname + "_" + names[i] + ".csv";
            if (!seen.insert(file).second)
                throw ConfigError("two sweep entries map to the same file '" + file + "'");
            write_text(m.dir / file, results[i].curve.to_csv(), m);
            summary.push_back({{"distribution", dname},
                               {"spec", results[i].spec.label()},
                               {"curve", file},
                               {"bandwidth", results[i].curve.bandwidth},
                               {"moments", results[i].moments.to_json()},
                               {"tail_threshold", threshold},
                               {"tail_mass", dist::tail_mass(results[i].outputs, threshold)}});
            out << dname << ' ' << results[i].spec.label() << " excess_kurtosis="
                << fmt(results[i].moments.excess_kurtosis) << " -> " << (m.dir / file).string() << '\n';
        }
    }
    write_text(m.dir / "moments.json", summary.dump(2) + "\n", m);
    return kOk;
}

// train -----------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string norm;
    std::optional<double> lambda;
    std::vector<double> lambda_grid;
    bool freeze = false;
    std::vector<std::string> ablate;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::string output_dir;
};

NormSpec norm_from_entry(const json &entry, double lambda) {
    return entry.is_string() ? parse_norm_name(entry.get<std::string>(), lambda) : norm_spec_from_json(entry);
}

ModelSpec resolve_model(const json &m, const Dataset &data, NormSpec norm) {
    auto s = ModelSpec::for_dataset(data, std::move(norm));
    if (m.contains("topology"))
        s.topology = parse_topology(m["topology"].get<std::string>());
    s.layer_widths = m.value("layer_widths", s.layer_widths);
    s.n_blocks = m.value("n_blocks", s.n_blocks);
    s.d_model = m.value("d_model", s.d_model);
    s.n_heads = m.value("n_heads", s.n_heads);
    s.validate();
    return s;
}

int train_cmd(const TrainArgs &a, Manifest &m, std::ostream &out) {
    json cfg = a.config.empty() ? json::object() : parse_json_file(a.config);
    // A previous run's manifest works as a config.
    if (cfg.contains("resolved_config"))
        cfg = json(cfg["resolved_config"]);
    const fs::path base_dir = a.config.empty() ? fs::current_path() : abs_path(a.config).parent_path();

    auto data_spec = DataSpec::from_json(cfg.value("data", json::object()));
    if (data_spec.task == TaskKind::CharLM && !data_spec.text_path.empty() && fs::path(data_spec.text_path).is_relative())
        data_spec.text_path = abs_path(base_dir / data_spec.text_path).string();

    auto tc = TrainConfig::from_json(cfg.value("train", json::object()));
    if (a.seed)
        tc.seed = *a.seed;
    if (a.steps) {
        tc.steps = *a.steps;
        tc.warmup_steps = std::min(tc.warmup_steps, tc.steps);
    }
    if (a.freeze)
        tc.freeze_except_norm = true;
    tc.validate();

    const json model_cfg = cfg.value("model", json::object());
    NormSpec norm = model_cfg.contains("norm") ? norm_from_entry(model_cfg["norm"], a.lambda.value_or(4.0))
                                               : NormSpec::layer_norm();
    if (!a.norm.empty())
        norm = parse_norm_name(a.norm, a.lambda.value_or(4.0));
    if (a.lambda) {
        if (!norm.compression)
            throw ConfigError("--lambda applies to IBNorm only");
        norm.compression->lambda = *a.lambda;
    }
    for (const auto &ab : a.ablate) {
        if (ab == "order") {
            if (!norm.compression)
                throw ConfigError("--ablate order applies to IBNorm only");
            norm.order = NormOrder::StandardizeThenCompress;
        } else if (ab == "no-affine") {
            norm.affine = false;
        } else {
            throw ConfigError("unknown ablation '" + ab + "' (expected order or no-affine)");
        }
    }
    std::vector<double> grid = a.lambda_grid;
    if (grid.empty() && cfg.contains("lambda_grid"))
        grid = cfg["lambda_grid"].get<std::vector<double>>();
    if (!grid.empty() && !norm.compression)
        throw ConfigError("a lambda grid needs an IBNorm norm");
    norm.validate();

    const auto data = make_dataset(data_spec, tc.seed);
    const auto model = resolve_model(model_cfg, data, norm);

    const fs::path root = !a.output_dir.empty()    ? fs::path(a.output_dir)
                          : !tc.output_dir.empty() ? fs::path(tc.output_dir)
                                                   : output_root() / "train" /
                                                         (slug(norm.label()) + "_seed" + std::to_string(tc.seed));
    m.dir = root;
    m.seed = tc.seed;

    struct Run {
        ModelSpec model;
        TrainConfig train;
    };
    std::vector<Run> runs;
    if (grid.empty()) {
        tc.output_dir = abs_path(root).string();
        runs.push_back({model, tc});
    } else {
        for (double lam : grid) {
            Run r{model, tc};
            r.model.norm.compression->lambda = lam;
            r.model.validate();
            r.train.output_dir = abs_path(root / ("lambda_" + fmt(lam))).string();
            runs.push_back(std::move(r));
        }
    }

    m.config = run_config(runs.front().model, runs.front().train, data_spec);
    if (!grid.empty()) {
        m.config["lambda_grid"] = grid;
        m.config["train"]["output_dir"] = abs_path(root).string();
    }

    for (const auto &r : runs) {
        const auto result = train(r.model, r.train, data);
        const fs::path dir(r.train.output_dir);
        for (const char *f : {"metrics.csv", "timing.csv", "checkpoint.ibn", "run.json"})
            m.artifacts.push_back(dir / f);
        const auto &last = result.metrics.back();
        out << r.model.norm.label() << " seed=" << r.train.seed << " steps=" << r.train.steps
            << " eval_loss=" << fmt(last.eval_loss) << " -> " << dir.string() << '\n';
    }
    return kOk;
}

// probe-ib --------------------------------------------------------------------

struct ProbeArgs {
    std::string checkpoint;
    double beta = 1.0;
    double sigma = 1.0;
    std::size_t timesteps = 8;
    std::size_t rows = 64;
    std::string split = "eval";
    std::string output_dir;
};

int probe_cmd(const ProbeArgs &a, Manifest &m, std::ostream &out) {
    if (a.split != "eval" && a.split != "train")
        throw ConfigError("--split must be eval or train");
    const fs::path ckpt_path = abs_path(a.checkpoint);
    m.dir = a.output_dir.empty() ? ckpt_path.parent_path() / "probe_ib" : fs::path(a.output_dir);
    const auto ckpt = Checkpoint::load(ckpt_path);
    if (!ckpt.config.contains("data") || !ckpt.config.contains("train"))
        throw ConfigError("checkpoint config lacks data or train sections");
    m.seed = ckpt.config["train"].value("seed", std::uint64_t{0});
    m.config = {{"checkpoint", ckpt_path.string()}, {"beta", a.beta},         {"sigma", a.sigma},
                {"timesteps", a.timesteps},         {"rows", a.rows},         {"split", a.split},
                {"config_digest", ckpt.config_digest()}, {"output_dir", m.dir.string()}};

    const auto data = make_dataset(DataSpec::from_json(ckpt.config["data"]), m.seed);
    auto model = restore_model(ckpt);
    const auto batch = data.head(a.split == "eval" ? Split::Eval : Split::Train, a.rows);
    const auto trace = probe_ib(*model, batch, a.beta, a.sigma, a.timesteps);
    write_text(m.dir / "ib_trace.json", trace.to_json().dump(2) + "\n", m);
    write_text(m.dir / "ib_trace.csv", trace.to_csv(), m);
    out << "ib_value=" << fmt(trace.ib_value) << " layers=" << trace.layers << " timesteps=" << trace.timesteps
        << " -> " << m.dir.string() << '\n';
    return kOk;
}

// verify ----------------------------------------------------------------------

struct VerifyArgs {
    std::string filter;
    std::uint64_t seed = 0;
    std::string report;
    std::string output_dir;
    std::string mutate;
};

int verify_cmd(const VerifyArgs &a, Manifest &m, std::ostream &out) {
    verify::Options opt;
    opt.filter = a.filter;
    opt.seed = a.seed;
    if (a.mutate == "sign")
        opt.derivative = [](CompressionKind k, double r, double lambda) { return -f_lambda_derivative(k, r, lambda); };
    else if (a.mutate == "steep")
        opt.derivative = [](CompressionKind k, double r, double lambda) {
            return 2.0 * f_lambda_derivative(k, r, lambda);
        };
    else if (!a.mutate.empty())
        throw ConfigError("unknown mutation '" + a.mutate + "'");

    m.dir = a.output_dir.empty() ? output_root() / "verify" : fs::path(a.output_dir);
    m.seed = a.seed;
    const fs::path report = a.report.empty() ? m.dir / "verify_report.json" : fs::path(a.report);
    m.config = {{"filter", a.filter}, {"seed", a.seed}, {"report", report.string()}};
    if (!a.mutate.empty())
        m.config["mutation"] = a.mutate;

    const auto results = verify::run(opt);
    if (results.empty())
        throw ConfigError("--filter '" + a.filter + "' matches no property");
    bool ok = true;
    for (const auto &r : results) {
        out << (r.passed ? "PASS " : "FAIL ") << r.id() << ": " << r.witness << '\n';
        ok = ok && r.passed;
    }
    write_text(report, verify::report(results).dump(2) + "\n", m);
    return ok ? kOk : kFailure;
}

int finish(Manifest &m, int code, std::ostream &err) {
    try {
        m.write(code);
    } catch (const std::exception &e) {
        err << "cannot write manifest: " << e.what() << '\n';
        return code == kOk ? kFailure : code;
    }
    return code;
}

} // namespace

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
    CLI::App app{"Information-bottleneck normalization toolkit", "ibnorm"};
    app.require_subcommand(1);

    DemoArgs demo;
    auto *demo_cmd = app.add_subcommand("demo-compress", "Apply the compression operation to a list of values");
    demo_cmd->add_option("--kind", demo.kind, "S, L or T")->required();
    demo_cmd->add_option("--lambda", demo.lambda, "Compression strength (> 0)")->required();
    demo_cmd->add_option("--values", demo.values, "Comma-separated inputs");
    demo_cmd->add_option("--group-size", demo.group_size, "Values sharing one mean (default: all)");
    demo_cmd->add_option("--csv", demo.csv, "Also write the table here");
    demo_cmd->add_option("--output-dir", demo.output_dir, "Manifest directory");

    SweepArgs sweep;
    auto *sweep_cmd = app.add_subcommand("kde-sweep", "Density curves of normalized samples");
    sweep_cmd->add_option("--config", sweep.config, "JSON sweep config")->required();
    sweep_cmd->add_option("--output-dir", sweep.output_dir);
    sweep_cmd->add_option("--seed", sweep.seed);

    TrainArgs tr;
    auto *train_sub = app.add_subcommand("train", "Train a model and write metrics and a checkpoint");
    train_sub->add_option("--config", tr.config, "JSON run config (data, model, train sections)");
    train_sub->add_option("--norm", tr.norm, "layernorm, rmsnorm, batchnorm, normalnorm, ibnorm-s|l|t");
    train_sub->add_option("--lambda", tr.lambda, "IBNorm compression strength");
    train_sub->add_option("--lambda-grid", tr.lambda_grid, "One run per value, e.g. 0.5,4,8")->delimiter(',');
    train_sub->add_flag("--freeze-except-norm", tr.freeze, "Train only normalization parameters");
    train_sub->add_option("--ablate", tr.ablate, "order or no-affine")->delimiter(',');
    train_sub->add_option("--seed", tr.seed);
    train_sub->add_option("--steps", tr.steps);
    train_sub->add_option("--output-dir", tr.output_dir);

    ProbeArgs probe;
    auto *probe_sub = app.add_subcommand("probe-ib", "Token-level IB trace of a checkpoint");
    probe_sub->add_option("--checkpoint", probe.checkpoint)->required();
    probe_sub->add_option("--beta", probe.beta, "Redundancy weight")->capture_default_str();
    probe_sub->add_option("--sigma", probe.sigma, "Gaussian kernel bandwidth")->capture_default_str();
    probe_sub->add_option("--timesteps", probe.timesteps)->capture_default_str();
    probe_sub->add_option("--rows", probe.rows, "Held-out rows to probe")->capture_default_str();
    probe_sub->add_option("--split", probe.split, "eval or train")->capture_default_str();
    probe_sub->add_option("--output-dir", probe.output_dir);

    VerifyArgs ver;
    auto *verify_sub = app.add_subcommand("verify", "Run the property suite");
    verify_sub->add_option("--filter", ver.filter, "Substring of group.name");
    verify_sub->add_option("--seed", ver.seed);
    verify_sub->add_option("--report", ver.report, "JSON report path");
    verify_sub->add_option("--output-dir", ver.output_dir);
    verify_sub->add_option("--mutate", ver.mutate)->group("");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError &e) {
        const auto *sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << "error: " << e.what() << "\n" << sub->help();
        return kUsage;
    }

    Manifest m;
    m.subcommand = app.get_subcommands().front()->get_name();
    try {
        int code = kOk;
        if (*demo_cmd)
            code = demo_compress(demo, m, out);
        else if (*sweep_cmd)
            code = kde_sweep(sweep, m, out);
        else if (*train_sub)
            code = train_cmd(tr, m, out);
        else if (*probe_sub)
            code = probe_cmd(probe, m, out);
        else
            code = verify_cmd(ver, m, out);
        return finish(m, code, err);
    } catch (const ConfigError &e) {
        err << "config error: " << e.what() << '\n';
        return finish(m, kUsage, err);
    } catch (const ContractError &e) {
        err << "usage error: " << e.what() << '\n';
        return finish(m, kUsage, err);
    } catch (const IoError &e) {
        err << "io error: " << e.what() << '\n';
        return finish(m, kUsage, err);
    } catch (const json::exception &e) {
        err << "config error: " << e.what() << '\n';
        return finish(m, kUsage, err);
    } catch (const std::exception &e) {
        err << "error: " << e.what() << '\n';
        return finish(m, kFailure, err);
    }
}

} // namespace ibn::cli
