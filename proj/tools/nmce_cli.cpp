// nmce command-line tool: gen-data, train, eval, export, check.
//
// Exit codes: 0 ok, 1 usage or config error, 2 numerical abort, 3 check failure.

#include "nmce/config.hpp"
#include "nmce/data.hpp"
#include "nmce/evaluation.hpp"
#include "nmce/model.hpp"
#include "nmce/selfcheck.hpp"
#include "nmce/training.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace nmce;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitCheck = 3;

struct GenDataArgs {
    std::string generator;
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    Eigen::Index n = 1000;
    std::uint64_t stream = 0;
    // spiral
    double radius = SpiralParams{}.radius;
    double noise = SpiralParams{}.noise_sigma;
    // manifolds
    bool no_bias = false;
    Eigen::Index ambient_dim = ManifoldParams{}.ambient_dim;
    std::vector<Eigen::Index> latent_dims = ManifoldParams{}.latent_dims;
};

struct TrainArgs {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    Eigen::Index eval_n = 1000;
    std::int64_t log_every = 100;
};

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    std::string embeddings;
    std::uint64_t seed = 0;
};

struct ExportArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    std::size_t components = 3;
    std::size_t retrieve = 10;
};

std::ofstream open_out(const std::string& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    return os;
}

std::string meta_path(const std::string& csv) { return csv + ".meta"; }

void write_text(const std::string& path, const std::string& text)
{
    auto os = open_out(path);
    os << text;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const GenDataArgs& a)
{
    Dataset d;
    if (!a.config.empty()) {
        RunConfig cfg = load_config(a.config);
        if (a.seed_set) override_seed(cfg, a.seed);
        d = heldout_dataset(cfg.data, a.n);
    } else if (a.generator == "double-spiral") {
        SpiralParams p;
        p.n_per_arm = a.n;
        p.radius = a.radius;
        p.noise_sigma = a.noise;
        d = double_spiral(p, a.seed);
    } else if (a.generator == "random-mlp-manifolds") {
        ManifoldParams p;
        p.n_per_manifold = a.n;
        p.with_bias = !a.no_bias;
        p.ambient_dim = a.ambient_dim;
        p.latent_dims = a.latent_dims;
        d = random_mlp_manifolds(p, a.seed, a.stream);
    } else {
        std::cerr << "gen-data: unknown generator '" << a.generator
                  << "' (expected double-spiral or random-mlp-manifolds)\n";
        return kExitUsage;
    }
    save_csv(d, a.out);
    save_meta(d.meta, meta_path(a.out));
    std::cerr << "wrote " << d.size() << " points to " << a.out << '\n';
    return kExitOk;
}

Checkpoint load_model(const std::string& path) { return load_checkpoint(path); }

struct Evaluated {
    EncoderOutput out;
    std::vector<int> pred;
    MetricReport report;
};

Evaluated evaluate(const Checkpoint& ck, const Dataset& d, std::uint64_t seed)
{
    if (d.dim() != ck.spec.input_dim) {
        throw ShapeError("eval: dataset has " + std::to_string(d.dim()) + " columns but the checkpoint expects " +
                         std::to_string(ck.spec.input_dim));
    }
    Evaluated e{encode(ck.spec, ck.params, d.points), {}, {}};
    e.pred = argmax_labels(e.out.logits);
    std::optional<std::span<const int>> truth;
    if (d.labels) truth = std::span<const int>(*d.labels);
    e.report = evaluate_clustering(e.out.features.matrix(), e.pred, truth, seed);
    return e;
}

void write_eval_outputs(const Dataset& d, const Evaluated& e, const std::string& metrics_path,
                        const std::string& embeddings_path)
{
    {
        auto os = open_out(metrics_path);
        write_report(os, e.report);
    }
    auto os = open_out(embeddings_path);
    std::optional<std::span<const int>> truth;
    if (d.labels) truth = std::span<const int>(*d.labels);
    write_embeddings_csv(os, d.points, e.out.features.matrix(), e.pred, truth);
}

int cmd_train(const TrainArgs& a)
{
    RunConfig cfg = load_config(a.config);
    if (a.seed) override_seed(cfg, *a.seed);
    fs::create_directories(a.out);
    const fs::path dir(a.out);
    const std::string config_path = (dir / "config.cfg").string();
    const std::string checkpoint_path = (dir / "checkpoint.txt").string();
    const std::string history_path = (dir / "loss_history.csv").string();
    const std::string heldout_path = (dir / "heldout.csv").string();
    const std::string metrics_path = (dir / "metrics.txt").string();
    const std::string embeddings_path = (dir / "embeddings.csv").string();
    {
        auto os = open_out(config_path);
        write_config(os, cfg);
    }

    std::int64_t global_step = 0;
    const auto progress = [&](const StepRecord& r) {
        ++global_step;
        if (a.log_every > 0 && global_step % a.log_every == 0) {
            std::cerr << "step " << global_step << "  loss " << r.loss << "  R " << r.total_rate << "  Rc "
                      << r.cluster_rate << "  D " << r.constraint_d << '\n';
        }
    };
    const MultistageResult result = run_training(cfg, progress);
    double seconds = 0.0;
    for (const RunRecord& r : result.records) seconds += r.wall_clock_seconds;

    save_checkpoint(checkpoint_path, cfg.model, result.params);
    save_run_record_csv(result.records, history_path);

    const Dataset heldout = heldout_dataset(cfg.data, a.eval_n);
    save_csv(heldout, heldout_path);
    const Checkpoint ck{cfg.model, result.params};
    const Evaluated e = evaluate(ck, heldout, cfg.seed);
    write_eval_outputs(heldout, e, metrics_path, embeddings_path);

    std::ostringstream manifest;
    manifest << "tool: nmce " << NMCE_VERSION << '\n'
             << "seed: " << cfg.seed << '\n'
             << "config: " << config_path << '\n'
             << "checkpoint: " << checkpoint_path << '\n'
             << "loss_history: " << history_path << '\n'
             << "heldout: " << heldout_path << '\n'
             << "metrics: " << metrics_path << '\n'
             << "embeddings: " << embeddings_path << '\n'
             << "wall_clock_seconds: " << format_double(seconds) << '\n';
    write_text((dir / "manifest.txt").string(), manifest.str());
    std::cerr << "trained " << global_step << " steps in " << seconds << " s\n";
    if (e.report.acc) std::cerr << "held-out acc " << *e.report.acc << '\n';
    return kExitOk;
}

int cmd_eval(const EvalArgs& a)
{
    const Checkpoint ck = load_model(a.checkpoint);
    const Dataset d = load_csv(a.data);
    const Evaluated e = evaluate(ck, d, a.seed);
    const std::string embeddings = a.embeddings.empty() ? a.out + ".embeddings.csv" : a.embeddings;
    write_eval_outputs(d, e, a.out, embeddings);
    write_report(std::cout, e.report);
    return kExitOk;
}

int cmd_export(const ExportArgs& a)
{
    const Checkpoint ck = load_model(a.checkpoint);
    const Dataset d = load_csv(a.data);
    const Evaluated e = evaluate(ck, d, 0);
    fs::create_directories(a.out);
    const fs::path dir(a.out);
    const Matrix& z = e.out.features.matrix();
    {
        auto os = open_out((dir / "spectra.csv").string());
        write_spectra_csv(os, singular_spectrum(z, std::span<const int>(e.pred)));
    }
    auto os = open_out((dir / "pca_retrieval.csv").string());
    os << "cluster,component,sigma,rank,index\n";
    for (const ClusterComponents& cc : pca_component_retrieval(z, e.pred, a.components, a.retrieve)) {
        for (std::size_t c = 0; c < cc.components.size(); ++c) {
            const PrincipalComponent& pc = cc.components[c];
            for (std::size_t r = 0; r < pc.top_samples.size(); ++r) {
                os << cc.cluster << ',' << c << ',' << format_double(pc.sigma) << ',' << r << ','
                   << pc.top_samples[r] << '\n';
            }
        }
    }
    std::cerr << "wrote spectra.csv and pca_retrieval.csv to " << a.out << '\n';
    return kExitOk;
}

int cmd_check(std::uint64_t seed)
{
    const std::vector<CheckResult> results = run_self_checks(seed);
    print_check_table(std::cout, results);
    for (const CheckResult& r : results) {
        if (!r.passed) return kExitCheck;
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Neural manifold clustering and embedding"};
    app.set_version_flag("--version", std::string(NMCE_VERSION));
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a dataset as CSV plus a .meta sidecar");
    gen_cmd->add_option("generator", gen.generator, "double-spiral or random-mlp-manifolds");
    gen_cmd->add_option("--config", gen.config, "Take generator settings from a run config (held-out draw)");
    gen_cmd->add_option("--out", gen.out, "Output CSV path")->required();
    gen_cmd->add_option("--seed", gen.seed, "Generator seed")->each([&](const std::string&) { gen.seed_set = true; });
    gen_cmd->add_option("--n", gen.n, "Points per arm / manifold")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--stream", gen.stream, "Sample stream for random-mlp-manifolds");
    gen_cmd->add_option("--radius", gen.radius, "Spiral radius");
    gen_cmd->add_option("--noise", gen.noise, "Spiral noise sigma");
    gen_cmd->add_flag("--no-bias", gen.no_bias, "Generator networks without biases (intersecting manifolds)");
    gen_cmd->add_option("--ambient-dim", gen.ambient_dim, "Ambient dimension");
    gen_cmd->add_option("--latent-dims", gen.latent_dims, "Latent dimension of each manifold")->delimiter(',');

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Run the staged training described by a config");
    train_cmd->add_option("--config", train.config, "Run config (INI)")->required();
    train_cmd->add_option("--out", train.out, "Output directory")->required();
    train_cmd->add_option("--seed", train.seed, "Override the config seed");
    train_cmd->add_option("--eval-n", train.eval_n, "Held-out points per class")->check(CLI::PositiveNumber);
    train_cmd->add_option("--log-every", train.log_every, "Progress line every N steps (0: quiet)");

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Cluster a dataset with a checkpoint and report metrics");
    eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
    eval_cmd->add_option("--data", eval.data, "Dataset CSV")->required();
    eval_cmd->add_option("--out", eval.out, "Metric report path")->required();
    eval_cmd->add_option("--embeddings", eval.embeddings, "Embeddings CSV (default: <out>.embeddings.csv)");
    eval_cmd->add_option("--seed", eval.seed, "Seed for z-sim pair sampling");

    ExportArgs exp;
    auto* export_cmd = app.add_subcommand("export", "Write feature spectra and per-cluster PCA retrieval CSVs");
    export_cmd->add_option("--checkpoint", exp.checkpoint)->required();
    export_cmd->add_option("--data", exp.data, "Dataset CSV")->required();
    export_cmd->add_option("--out", exp.out, "Output directory")->required();
    export_cmd->add_option("--components", exp.components, "Principal directions per cluster");
    export_cmd->add_option("--retrieve", exp.retrieve, "Samples retrieved per direction");

    std::uint64_t check_seed = 0;
    auto* check_cmd = app.add_subcommand("check", "Gradient, identity and metric self-checks");
    check_cmd->add_option("--seed", check_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen_cmd) {
            if (gen.generator.empty() && gen.config.empty()) {
                std::cerr << "gen-data: give a generator name or --config\n" << gen_cmd->help();
                return kExitUsage;
            }
            return cmd_gen_data(gen);
        }
        if (*train_cmd) return cmd_train(train);
        if (*eval_cmd) return cmd_eval(eval);
        if (*export_cmd) return cmd_export(exp);
        if (*check_cmd) return cmd_check(check_seed);
    } catch (const ConfigError& e) {
        std::cerr << "config error:\n";
        for (const std::string& p : e.problems()) std::cerr << "  " << p << '\n';
        return kExitUsage;
    } catch (const TrainingAborted& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
