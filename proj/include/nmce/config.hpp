#pragma once

// Run configuration file: INI sections [run], [model], [data], [stage1], [stage2], ...
// Unknown keys are rejected so typos surface as errors with their field path.

#include "nmce/data.hpp"
#include "nmce/model.hpp"
#include "nmce/training.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmce {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<std::string> problems)
        : std::runtime_error(join(problems)), problems_(std::move(problems))
    {
    }
    const std::vector<std::string>& problems() const { return problems_; }

private:
    static std::string join(const std::vector<std::string>& p)
    {
        std::string s = "invalid config:";
        for (const auto& line : p) s += "\n  " + line;
        return s;
    }
    std::vector<std::string> problems_;
};

struct DataConfig {
    std::string generator = "double-spiral"; // double-spiral | random-mlp-manifolds | csv
    double augment_sigma = 0.05;
    std::uint64_t seed = 0;
    SpiralParams spiral;
    ManifoldParams manifolds;
    std::string csv_path;
};

struct RunConfig {
    std::uint64_t seed = 0;
    MlpSpec model;
    DataConfig data;
    std::vector<StageConfig> stages;
};

namespace detail {

class SectionReader {
public:
    SectionReader(const boost::property_tree::ptree* tree, std::string section, std::vector<std::string>& problems)
        : tree_(tree), section_(std::move(section)), problems_(problems)
    {
    }

    bool present() const { return tree_ != nullptr; }

    template <typename T>
    void read(const std::string& key, T& out)
    {
        seen_.insert(key);
        const std::optional<std::string> raw = raw_value(key);
        if (!raw) return;
        if (!parse(*raw, out)) {
            problems_.push_back(path(key) + ": cannot parse '" + *raw + "'");
        }
    }

    void read_list(const std::string& key, std::vector<Eigen::Index>& out)
    {
        seen_.insert(key);
        const std::optional<std::string> raw = raw_value(key);
        if (!raw) return;
        std::vector<Eigen::Index> values;
        std::stringstream ss(*raw);
        std::string item;
        while (std::getline(ss, item, ',')) {
            Eigen::Index v = 0;
            if (trim(item).empty()) continue;
            if (!parse(item, v)) {
                problems_.push_back(path(key) + ": cannot parse list entry '" + item + "'");
                return;
            }
            values.push_back(v);
        }
        out = std::move(values);
    }

    void reject_unknown()
    {
        if (!tree_) return;
        for (const auto& [key, child] : *tree_) {
            if (!seen_.count(key)) {
                problems_.push_back(path(key) + ": unknown key");
            }
        }
    }

    std::string path(const std::string& key) const { return section_ + "." + key; }
    void problem(const std::string& key, const std::string& msg) { problems_.push_back(path(key) + ": " + msg); }

private:
    std::optional<std::string> raw_value(const std::string& key) const
    {
        if (!tree_) return std::nullopt;
        auto child = tree_->get_child_optional(boost::property_tree::ptree::path_type(key, '\0'));
        if (!child) return std::nullopt;
        return trim(child->data());
    }

    static bool parse(const std::string& text, std::string& out)
    {
        out = trim(text);
        return true;
    }
    static bool parse(const std::string& text, bool& out)
    {
        const std::string s = trim(text);
        if (s == "true" || s == "1" || s == "yes") {
            out = true;
            return true;
        }
        if (s == "false" || s == "0" || s == "no") {
            out = false;
            return true;
        }
        return false;
    }
    template <typename T>
    static bool parse(const std::string& text, T& out)
    {
        return parse_number(text, out);
    }

    const boost::property_tree::ptree* tree_;
    std::string section_;
    std::vector<std::string>& problems_;
    std::set<std::string> seen_;
};

inline const boost::property_tree::ptree* section(const boost::property_tree::ptree& root, const std::string& name)
{
    auto child = root.get_child_optional(boost::property_tree::ptree::path_type(name, '\0'));
    return child ? &*child : nullptr;
}

inline std::string join_list(const std::vector<Eigen::Index>& v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

} // namespace detail

inline RunConfig parse_config(std::istream& is, const std::string& name = "<config>")
{
    boost::property_tree::ptree root;
    try {
        boost::property_tree::ini_parser::read_ini(is, root);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError({name + ": " + e.message() + " (line " + std::to_string(e.line()) + ")"});
    }

    std::vector<std::string> problems;
    RunConfig cfg;
    std::set<std::string> known_sections{"run", "model", "data"};

    detail::SectionReader run(detail::section(root, "run"), "run", problems);
    run.read("seed", cfg.seed);
    run.reject_unknown();

    detail::SectionReader model(detail::section(root, "model"), "model", problems);
    if (!model.present()) problems.push_back("model: missing section");
    model.read("input_dim", cfg.model.input_dim);
    model.read_list("hidden_widths", cfg.model.hidden_widths);
    std::string activation = activation_name(cfg.model.activation.kind);
    model.read("activation", activation);
    try {
        cfg.model.activation.kind = parse_activation(activation);
    } catch (const std::invalid_argument&) {
        model.problem("activation", "unknown activation '" + activation + "'");
    }
    model.read("activation_slope", cfg.model.activation.slope);
    model.read("feature_dim", cfg.model.feature_dim);
    model.read("n_clusters", cfg.model.n_clusters);
    model.read("gumbel_temperature", cfg.model.gumbel_temperature);
    model.reject_unknown();
    try {
        cfg.model.validate();
    } catch (const std::invalid_argument& e) {
        problems.push_back(std::string("model: ") + e.what());
    }

    detail::SectionReader data(detail::section(root, "data"), "data", problems);
    cfg.data.seed = cfg.seed;
    data.read("generator", cfg.data.generator);
    data.read("augment_sigma", cfg.data.augment_sigma);
    data.read("seed", cfg.data.seed);
    data.read("radius", cfg.data.spiral.radius);
    data.read("noise_sigma", cfg.data.spiral.noise_sigma);
    data.read("t_min", cfg.data.spiral.t_min);
    data.read("t_max", cfg.data.spiral.t_max);
    data.read_list("latent_dims", cfg.data.manifolds.latent_dims);
    data.read("with_bias", cfg.data.manifolds.with_bias);
    data.read("ambient_dim", cfg.data.manifolds.ambient_dim);
    data.read("hidden_width", cfg.data.manifolds.hidden_width);
    data.read("weight_scale", cfg.data.manifolds.weight_scale);
    data.read("bias_scale", cfg.data.manifolds.bias_scale);
    data.read("min_separation", cfg.data.manifolds.min_separation);
    data.read("path", cfg.data.csv_path);
    data.reject_unknown();
    if (cfg.data.generator != "double-spiral" && cfg.data.generator != "random-mlp-manifolds" &&
        cfg.data.generator != "csv") {
        data.problem("generator", "unknown generator '" + cfg.data.generator + "'");
    }
    if (cfg.data.generator == "csv" && cfg.data.csv_path.empty()) {
        data.problem("path", "required for the csv generator");
    }
    if (!(cfg.data.augment_sigma >= 0.0)) {
        data.problem("augment_sigma", "must be non-negative");
    }

    for (int k = 1;; ++k) {
        const std::string name_k = "stage" + std::to_string(k);
        const auto* tree = detail::section(root, name_k);
        if (!tree) break;
        known_sections.insert(name_k);
        detail::SectionReader stage(tree, name_k, problems);
        StageConfig s;
        s.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(k));
        std::string objective = objective_name(s.objective);
        stage.read("objective", objective);
        try {
            s.objective = parse_objective(objective);
        } catch (const std::invalid_argument&) {
            stage.problem("objective", "unknown objective '" + objective + "'");
        }
        stage.read("lr", s.lr);
        stage.read("weight_decay", s.weight_decay);
        stage.read("epsilon", s.epsilon);
        stage.read("lambda", s.lambda);
        stage.read("batch_size", s.batch_size);
        stage.read("steps", s.steps);
        s.gumbel_temperature = cfg.model.gumbel_temperature;
        stage.read("gumbel_temperature", s.gumbel_temperature);
        stage.read("seed", s.seed);
        stage.reject_unknown();
        for (const std::string& p : s.problems()) {
            problems.push_back(name_k + "." + p);
        }
        cfg.stages.push_back(s);
    }
    if (cfg.stages.empty()) {
        problems.push_back("stage1: at least one stage section is required");
    }
    for (const auto& [key, child] : root) {
        if (!known_sections.count(key)) {
            problems.push_back(key + ": unknown section");
        }
    }
    if (!problems.empty()) {
        throw ConfigError(std::move(problems));
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path)
{
    std::ifstream is(path);
    if (!is) {
        throw ConfigError({path + ": cannot open config file"});
    }
    return parse_config(is, path);
}

/// Writes a config that parse_config reads back to the same RunConfig.
inline void write_config(std::ostream& os, const RunConfig& cfg)
{
    const auto fmt = [](double v) { return format_double(v); };
    os << "[run]\nseed = " << cfg.seed << "\n\n";
    os << "[model]\n"
       << "input_dim = " << cfg.model.input_dim << '\n'
       << "hidden_widths = " << detail::join_list(cfg.model.hidden_widths) << '\n'
       << "activation = " << activation_name(cfg.model.activation.kind) << '\n'
       << "activation_slope = " << fmt(cfg.model.activation.slope) << '\n'
       << "feature_dim = " << cfg.model.feature_dim << '\n'
       << "n_clusters = " << cfg.model.n_clusters << '\n'
       << "gumbel_temperature = " << fmt(cfg.model.gumbel_temperature) << "\n\n";
    const DataConfig& d = cfg.data;
    os << "[data]\n"
       << "generator = " << d.generator << '\n'
       << "augment_sigma = " << fmt(d.augment_sigma) << '\n'
       << "seed = " << d.seed << '\n';
    if (d.generator == "double-spiral") {
        os << "radius = " << fmt(d.spiral.radius) << '\n'
           << "noise_sigma = " << fmt(d.spiral.noise_sigma) << '\n'
           << "t_min = " << fmt(d.spiral.t_min) << '\n'
           << "t_max = " << fmt(d.spiral.t_max) << '\n';
    } else if (d.generator == "random-mlp-manifolds") {
        os << "latent_dims = " << detail::join_list(d.manifolds.latent_dims) << '\n'
           << "with_bias = " << (d.manifolds.with_bias ? "true" : "false") << '\n'
           << "ambient_dim = " << d.manifolds.ambient_dim << '\n'
           << "hidden_width = " << d.manifolds.hidden_width << '\n'
           << "weight_scale = " << fmt(d.manifolds.weight_scale) << '\n'
           << "bias_scale = " << fmt(d.manifolds.bias_scale) << '\n'
           << "min_separation = " << fmt(d.manifolds.min_separation) << '\n';
    } else {
        os << "path = " << d.csv_path << '\n';
    }
    for (std::size_t k = 0; k < cfg.stages.size(); ++k) {
        const StageConfig& s = cfg.stages[k];
        os << "\n[stage" << k + 1 << "]\n"
           << "objective = " << objective_name(s.objective) << '\n'
           << "lr = " << fmt(s.lr) << '\n'
           << "weight_decay = " << fmt(s.weight_decay) << '\n'
           << "epsilon = " << fmt(s.epsilon) << '\n'
           << "lambda = " << fmt(s.lambda) << '\n'
           << "batch_size = " << s.batch_size << '\n'
           << "steps = " << s.steps << '\n'
           << "gumbel_temperature = " << fmt(s.gumbel_temperature) << '\n'
           << "seed = " << s.seed << '\n';
    }
}

/// Training batch source for a data config. Spiral and manifold data are generated online.
inline std::unique_ptr<BatchSource> make_batch_source(const DataConfig& d)
{
    if (d.generator == "double-spiral") {
        return std::make_unique<SpiralSource>(d.spiral, d.augment_sigma);
    }
    if (d.generator == "random-mlp-manifolds") {
        auto gen = std::make_shared<const ManifoldGenerator>(d.manifolds, d.seed);
        return std::make_unique<ManifoldSource>(std::move(gen), d.augment_sigma);
    }
    if (d.generator == "csv") {
        return std::make_unique<DatasetSource>(load_csv(d.csv_path).points, d.augment_sigma);
    }
    throw ConfigError({"data.generator: unknown generator '" + d.generator + "'"});
}

/// Parameters at the start of a run; seeded from the run seed.
inline Parameters initial_parameters(const RunConfig& cfg) { return init_mlp(cfg.model, derive_seed(cfg.seed, 0)); }

inline MultistageResult run_training(const RunConfig& cfg, const StepCallback& on_step = {})
{
    const auto source = make_batch_source(cfg.data);
    return multistage_train(cfg.model, initial_parameters(cfg), *source, cfg.stages, on_step);
}

/// Fresh evaluation data from the configured generator: a new spiral draw, or a
/// new sample stream from the same random manifolds. CSV data is returned as is.
inline Dataset heldout_dataset(const DataConfig& d, Eigen::Index n_per_class)
{
    if (d.generator == "double-spiral") {
        SpiralParams p = d.spiral;
        p.n_per_arm = n_per_class;
        return double_spiral(p, derive_seed(d.seed, 0x4e1d));
    }
    if (d.generator == "random-mlp-manifolds") {
        ManifoldParams p = d.manifolds;
        p.n_per_manifold = n_per_class;
        return random_mlp_manifolds(p, d.seed, 1);
    }
    if (d.generator == "csv") {
        return load_csv(d.csv_path);
    }
    throw ConfigError({"data.generator: unknown generator '" + d.generator + "'"});
}

/// Re-seeds every stage from a new run seed (the --seed override).
inline void override_seed(RunConfig& cfg, std::uint64_t seed)
{
    cfg.seed = seed;
    cfg.data.seed = seed;
    for (std::size_t k = 0; k < cfg.stages.size(); ++k) {
        cfg.stages[k].seed = derive_seed(seed, k + 1);
    }
}

} // namespace nmce
