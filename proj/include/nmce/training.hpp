#pragma once

// Multistage trainer. Stage objectives:
//   TCR  - expand the total coding rate of both views while aligning them.
//   NMCE - cluster and embed: per-cluster rate minus total rate on view-averaged
//          features, plus the same alignment term.

#include "nmce/adam.hpp"
#include "nmce/autodiff.hpp"
#include "nmce/data.hpp"
#include "nmce/model.hpp"
#include "nmce/objectives.hpp"
#include "nmce/rng.hpp"

#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmce {

enum class Objective { tcr, nmce };

inline std::string objective_name(Objective o) { return o == Objective::tcr ? "tcr" : "nmce"; }

inline Objective parse_objective(const std::string& s)
{
    if (s == "tcr" || s == "TCR") return Objective::tcr;
    if (s == "nmce" || s == "NMCE") return Objective::nmce;
    throw std::invalid_argument("unknown objective '" + s + "' (expected tcr or nmce)");
}

struct StageConfig {
    Objective objective = Objective::nmce;
    double lr = 1e-3;
    double weight_decay = 1e-6;
    double epsilon = 0.01;
    double lambda = 100.0;
    Eigen::Index batch_size = 1024;
    std::int64_t steps = 1000;
    double gumbel_temperature = 1.0;
    std::uint64_t seed = 0;

    /// Problems as "field: message"; empty when valid.
    std::vector<std::string> problems() const
    {
        std::vector<std::string> out;
        if (!(lr >= 0.0)) out.push_back("lr: must be non-negative");
        if (!(weight_decay >= 0.0)) out.push_back("weight_decay: must be non-negative");
        if (!(epsilon > 0.0)) out.push_back("epsilon: must be positive");
        if (!(lambda >= 0.0)) out.push_back("lambda: must be non-negative");
        if (batch_size < 1) out.push_back("batch_size: must be at least 1");
        if (steps < 1) out.push_back("steps: must be at least 1");
        if (!(gumbel_temperature > 0.0)) out.push_back("gumbel_temperature: must be positive");
        return out;
    }

    void validate() const
    {
        const auto p = problems();
        if (!p.empty()) {
            throw std::invalid_argument("stage config: " + p.front());
        }
    }
};

struct StepRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    double total_rate = 0.0;
    double cluster_rate = 0.0;
    double constraint_d = 0.0;
};

struct RunRecord {
    Objective objective = Objective::nmce;
    std::vector<StepRecord> steps;
    Parameters final_params;
    double wall_clock_seconds = 0.0;
};

/// Non-finite loss or factorization failure during training.
class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(std::int64_t step, const StepRecord& last_finite, const std::string& cause)
        : std::runtime_error("training aborted at step " + std::to_string(step) + ": " + cause +
                             " (last finite: loss=" + format_double(last_finite.loss) +
                             " total_rate=" + format_double(last_finite.total_rate) +
                             " cluster_rate=" + format_double(last_finite.cluster_rate) +
                             " constraint_d=" + format_double(last_finite.constraint_d) + ")"),
          step_(step), last_finite_(last_finite)
    {
    }
    std::int64_t step() const { return step_; }
    const StepRecord& last_finite() const { return last_finite_; }

private:
    std::int64_t step_;
    StepRecord last_finite_;
};

// ---------------------------------------------------------------------------
// Batch sources

/// Supplies training batches and the augmentation noise level used to make views.
class BatchSource {
public:
    explicit BatchSource(double augment_sigma) : augment_sigma_(augment_sigma) {}
    virtual ~BatchSource() = default;

    virtual Matrix batch(Eigen::Index size, Rng& rng) const = 0;
    virtual Eigen::Index dim() const = 0;

    double augment_sigma() const { return augment_sigma_; }

private:
    double augment_sigma_;
};

/// Fresh double-spiral points for every batch.
class SpiralSource : public BatchSource {
public:
    SpiralSource(SpiralParams params, double augment_sigma) : BatchSource(augment_sigma), params_(params) {}

    Matrix batch(Eigen::Index size, Rng& rng) const override
    {
        SpiralParams p = params_;
        p.n_per_arm = std::max<Eigen::Index>(1, size / 2);
        return double_spiral(p, rng()).points;
    }
    Eigen::Index dim() const override { return 2; }

private:
    SpiralParams params_;
};

/// Fresh latent draws through a fixed set of generator networks.
class ManifoldSource : public BatchSource {
public:
    ManifoldSource(std::shared_ptr<const ManifoldGenerator> gen, double augment_sigma)
        : BatchSource(augment_sigma), gen_(std::move(gen))
    {
    }

    Matrix batch(Eigen::Index size, Rng& rng) const override
    {
        const auto n = static_cast<Eigen::Index>(gen_->manifolds());
        return gen_->sample(std::max<Eigen::Index>(1, size / n), rng).points;
    }
    Eigen::Index dim() const override { return gen_->params().ambient_dim; }

private:
    std::shared_ptr<const ManifoldGenerator> gen_;
};

/// Batches drawn without replacement from a fixed dataset; the whole set when
/// the batch size covers it.
class DatasetSource : public BatchSource {
public:
    DatasetSource(Matrix points, double augment_sigma) : BatchSource(augment_sigma), points_(std::move(points)) {}

    Matrix batch(Eigen::Index size, Rng& rng) const override
    {
        const Eigen::Index n = points_.rows();
        if (size >= n) {
            return points_;
        }
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        // partial Fisher-Yates
        Matrix out(size, points_.cols());
        for (Eigen::Index i = 0; i < size; ++i) {
            std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
            std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
            out.row(i) = points_.row(idx[static_cast<std::size_t>(i)]);
        }
        return out;
    }
    Eigen::Index dim() const override { return points_.cols(); }

private:
    Matrix points_;
};

// ---------------------------------------------------------------------------
// One optimizer step's worth of graph

struct StepGraph {
    LossTerms terms;
    std::vector<ad::Var> params;
};

/// Builds the loss for one batch of two views. Gumbel noise comes from `rng`.
inline StepGraph build_step_loss(ad::Tape& tape, const MlpSpec& spec, const Parameters& params,
                                 const Matrix& view1, const Matrix& view2, const StageConfig& cfg, Rng& rng)
{
    MlpSpec stage_spec = spec;
    stage_spec.gumbel_temperature = cfg.gumbel_temperature;
    StepGraph g;
    g.params = bind_parameters(tape, params);
    const GraphOutput out1 = forward(stage_spec, g.params, tape.constant(view1), true, rng);
    const GraphOutput out2 = forward(stage_spec, g.params, tape.constant(view2), true, rng);
    const CodingRateParams rate(cfg.epsilon, spec.feature_dim);
    if (cfg.objective == Objective::tcr) {
        g.terms = tcr_loss(out1.features, out2.features, rate, cfg.lambda);
    } else {
        ad::Var gamma_avg = ad::scale(ad::add(out1.assignment, out2.assignment), 0.5);
        g.terms = nmce_loss(out1.features, out2.features, gamma_avg, rate, cfg.lambda);
    }
    return g;
}

/// Called after every optimizer step; observation only.
using StepCallback = std::function<void(const StepRecord&)>;

/// Runs one stage of Adam on the configured objective. Deterministic given cfg.seed.
inline RunRecord train_stage(const MlpSpec& spec, Parameters params, const BatchSource& source,
                             const StageConfig& cfg, const StepCallback& on_step = {})
{
    spec.validate();
    cfg.validate();
    check_parameters(spec, params);
    if (source.dim() != spec.input_dim) {
        throw ShapeError("train_stage: data has " + std::to_string(source.dim()) + " dimensions, model expects " +
                         std::to_string(spec.input_dim));
    }

    const auto start = std::chrono::steady_clock::now();
    RunRecord record;
    record.objective = cfg.objective;
    record.steps.reserve(static_cast<std::size_t>(cfg.steps));
    AdamState adam;
    std::vector<Matrix> values = params.values();
    StepRecord last_finite;

    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(step));
        const Matrix x = source.batch(cfg.batch_size, rng);
        const Matrix view1 = gaussian_augment(x, source.augment_sigma(), rng);
        const Matrix view2 = gaussian_augment(x, source.augment_sigma(), rng);

        std::vector<Matrix> grads;
        StepRecord rec;
        rec.step = step;
        try {
            ad::Tape tape;
            StepGraph g = build_step_loss(tape, spec, params, view1, view2, cfg, rng);
            tape.backward(g.terms.loss);
            rec.loss = g.terms.loss.scalar();
            rec.total_rate = g.terms.total_rate;
            rec.cluster_rate = g.terms.cluster_rate;
            rec.constraint_d = g.terms.constraint;
            grads.reserve(g.params.size());
            for (const ad::Var& v : g.params) {
                grads.push_back(v.grad());
                require_finite(grads.back(), "gradient");
            }
        } catch (const NumericalError& e) {
            throw TrainingAborted(step, last_finite, e.what());
        }

        adam_step(values, grads, adam, cfg.lr, cfg.weight_decay);
        for (std::size_t k = 0; k < values.size(); ++k) {
            if (!values[k].allFinite()) {
                throw TrainingAborted(step, rec, "non-finite parameter " + params.tensors[k].name);
            }
            params.tensors[k].value = values[k];
        }
        record.steps.push_back(rec);
        last_finite = rec;
        if (on_step) on_step(rec);
    }

    record.final_params = std::move(params);
    record.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return record;
}

struct MultistageResult {
    Parameters params;
    std::vector<RunRecord> records;
};

/// Stages run in order; each starts from the previous stage's parameters with a
/// fresh optimizer state.
inline MultistageResult multistage_train(const MlpSpec& spec, Parameters params, const BatchSource& source,
                                         const std::vector<StageConfig>& stages, const StepCallback& on_step = {})
{
    if (stages.empty()) {
        throw std::invalid_argument("multistage_train: no stages configured");
    }
    MultistageResult out;
    for (const StageConfig& cfg : stages) {
        RunRecord rec = train_stage(spec, std::move(params), source, cfg, on_step);
        params = rec.final_params;
        out.records.push_back(std::move(rec));
    }
    out.params = std::move(params);
    return out;
}

// ---------------------------------------------------------------------------
// Recipes

/// Double spiral, single-stage NMCE. `desk` shortens the run (3000 steps, batch 1024).
inline std::vector<StageConfig> double_spiral_stages(bool desk, std::uint64_t seed)
{
    StageConfig s;
    s.objective = Objective::nmce;
    s.lr = 1e-3;
    s.weight_decay = 1e-6;
    s.epsilon = 0.01;
    s.lambda = 4000.0;
    s.batch_size = desk ? 1024 : 4096;
    s.steps = desk ? 3000 : 30000;
    s.seed = derive_seed(seed, 1);
    return {s};
}

/// Synthetic manifolds: TCR then NMCE, one third / two thirds of the step budget
/// (3000 total, or 1500 at desk scale).
inline std::vector<StageConfig> synthetic_stages(bool desk, std::uint64_t seed)
{
    const std::int64_t total = desk ? 1500 : 3000;
    StageConfig s1;
    s1.objective = Objective::tcr;
    s1.lr = 1e-3;
    s1.weight_decay = 1e-6;
    s1.epsilon = 0.01;
    s1.lambda = 100.0;
    s1.batch_size = desk ? 1024 : 4096;
    s1.steps = total / 3;
    s1.seed = derive_seed(seed, 1);
    StageConfig s2 = s1;
    s2.objective = Objective::nmce;
    s2.steps = total - s1.steps;
    s2.seed = derive_seed(seed, 2);
    return {s1, s2};
}

inline MlpSpec double_spiral_model()
{
    MlpSpec m;
    m.input_dim = 2;
    m.hidden_widths = {256, 256};
    m.activation = ad::Activation::elu();
    m.feature_dim = 6;
    m.n_clusters = 2;
    return m;
}

inline MlpSpec synthetic_model(Eigen::Index ambient_dim = 12)
{
    MlpSpec m;
    m.input_dim = ambient_dim;
    m.hidden_widths = {256, 256, 256};
    m.activation = ad::Activation::elu();
    m.feature_dim = 12;
    m.n_clusters = 2;
    return m;
}

// ---------------------------------------------------------------------------
// Loss history CSV

/// Steps are numbered consecutively across stages.
inline void write_run_record_csv(std::ostream& os, std::span<const RunRecord> records)
{
    os << "step,loss,total_rate,cluster_rate,constraint_d\n";
    std::int64_t offset = 0;
    for (const RunRecord& rec : records) {
        for (const StepRecord& s : rec.steps) {
            os << offset + s.step << ',' << format_double(s.loss) << ',' << format_double(s.total_rate) << ','
               << format_double(s.cluster_rate) << ',' << format_double(s.constraint_d) << '\n';
        }
        offset += static_cast<std::int64_t>(rec.steps.size());
    }
}

inline void write_run_record_csv(std::ostream& os, const RunRecord& rec)
{
    write_run_record_csv(os, std::span<const RunRecord>(&rec, 1));
}

inline void save_run_record_csv(std::span<const RunRecord> records, const std::string& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("run record: cannot open '" + path + "' for writing");
    }
    write_run_record_csv(os, records);
}

} // namespace nmce
