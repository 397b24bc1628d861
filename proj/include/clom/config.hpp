#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "clom/csv.hpp"
#include "clom/dataset.hpp"
#include "clom/errors.hpp"
#include "clom/model.hpp"
#include "clom/protocol.hpp"

namespace clom {

// Seed tag for deriving the split seed from a run seed.
inline constexpr uint64_t kSeedTagSplit = 0x33;

struct SplitConfig {
    size_t base_count = 0;
    size_t sessions = 0;
    size_t classes_per_session = 0;
    size_t shots = 5;
};

struct AnalysisConfig {
    size_t top_k = 0;  // 0 = default_top_k(d)
    bool magnitude_activations = false;
    std::string checkpoint;            // default <output>/model.ckpt
    std::string reference_checkpoint;  // optional; enables relation deltas
    std::string tag = "model";
};

struct SweepConfig {
    bool enabled = false;
    std::string mode;  // "fixed" | "nm_pm"
    std::vector<double> nm_margins;
    std::vector<double> pm_margins;
};

// One structured config file drives every command; no environment state.
struct ExperimentConfig {
    std::string dataset_path;  // exactly one of path / synthetic
    bool has_synthetic = false;
    SyntheticSpec synthetic;
    SplitConfig split;
    ModelConfig model;  // input_dim filled from the dataset at run time
    TrainConfig train;
    AnalysisConfig analysis;
    SweepConfig sweep;
    std::string output_dir = "out";
    std::vector<uint64_t> seeds = {1};
    uint64_t hash = 0;  // FNV-1a of the canonical JSON dump
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                           const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value type for '" + key + "'");
    }
}

template <typename T>
T get_req(const json& obj, const std::string& key, const std::string& where) {
    if (!obj.contains(key))
        throw ConfigError("config: missing key '" + key + "' in " + where);
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value type for '" + key + "'");
    }
}

inline LossMode parse_loss_mode(const std::string& s) {
    if (s == "baseline") return LossMode::Baseline;
    if (s == "fixed_margin") return LossMode::FixedMargin;
    if (s == "nm_pm") return LossMode::NmPm;
    if (s == "nm_pm_relation") return LossMode::NmPmRelation;
    throw ConfigError("config: unknown loss_mode '" + s + "'");
}

inline MarginSpec parse_margin_pair(const json& obj, const std::string& where) {
    reject_unknown(obj, {"m_ave", "m_upper"}, where);
    MarginSpec spec;
    spec.m_ave = get_req<double>(obj, "m_ave", where);
    spec.m_upper = get_or<double>(obj, "m_upper", spec.m_ave);
    return spec;
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    using detail::get_or;
    using detail::get_req;
    using detail::reject_unknown;

    reject_unknown(j, {"dataset", "split", "model", "train", "analysis", "sweep",
                       "output", "seeds"},
                   "top level");
    ExperimentConfig cfg;
    cfg.hash = fnv1a64(j.dump());

    // dataset
    const auto& dj = j.contains("dataset") ? j.at("dataset") : nlohmann::json::object();
    reject_unknown(dj, {"path", "synthetic"}, "dataset");
    if (dj.contains("path") == dj.contains("synthetic"))
        throw ConfigError("config: dataset needs exactly one of 'path' or 'synthetic'");
    if (dj.contains("path")) {
        cfg.dataset_path = get_req<std::string>(dj, "path", "dataset");
    } else {
        const auto& sj = dj.at("synthetic");
        reject_unknown(sj,
                       {"n_groups", "classes_per_group", "dim", "within_group_angle",
                        "between_group_angle", "noise_sigma", "train_per_class",
                        "test_per_class", "seed"},
                       "dataset.synthetic");
        cfg.has_synthetic = true;
        cfg.synthetic.n_groups = get_req<size_t>(sj, "n_groups", "synthetic");
        cfg.synthetic.classes_per_group =
            get_req<size_t>(sj, "classes_per_group", "synthetic");
        cfg.synthetic.dim = get_req<size_t>(sj, "dim", "synthetic");
        cfg.synthetic.within_group_angle =
            get_req<double>(sj, "within_group_angle", "synthetic");
        cfg.synthetic.between_group_angle =
            get_req<double>(sj, "between_group_angle", "synthetic");
        cfg.synthetic.noise_sigma = get_req<double>(sj, "noise_sigma", "synthetic");
        cfg.synthetic.train_per_class =
            get_req<size_t>(sj, "train_per_class", "synthetic");
        cfg.synthetic.test_per_class =
            get_req<size_t>(sj, "test_per_class", "synthetic");
        cfg.synthetic.seed = get_or<uint64_t>(sj, "seed", 1);
        cfg.synthetic.validate();
    }

    // split
    const auto& pj = j.contains("split") ? j.at("split") : nlohmann::json::object();
    reject_unknown(pj, {"base_count", "sessions", "classes_per_session", "shots"},
                   "split");
    cfg.split.base_count = get_req<size_t>(pj, "base_count", "split");
    cfg.split.sessions = get_or<size_t>(pj, "sessions", 0);
    cfg.split.classes_per_session = get_or<size_t>(pj, "classes_per_session", 0);
    cfg.split.shots = get_or<size_t>(pj, "shots", 5);
    if (cfg.split.shots == 0) throw ConfigError("config: shots must be > 0");
    if (cfg.split.sessions > 0 && cfg.split.classes_per_session == 0)
        throw ConfigError("config: classes_per_session must be > 0 with sessions");

    // model
    const auto& mj = j.contains("model") ? j.at("model") : nlohmann::json::object();
    reject_unknown(mj, {"hidden", "d", "d_pm", "batchnorm", "renormalize_prototypes"},
                   "model");
    cfg.model.hidden = get_or<std::vector<size_t>>(mj, "hidden", {});
    cfg.model.d = get_req<size_t>(mj, "d", "model");
    cfg.model.d_pm = get_or<size_t>(mj, "d_pm", 0);
    cfg.model.use_batchnorm = get_or<bool>(mj, "batchnorm", true);
    cfg.model.renormalize_prototypes =
        get_or<bool>(mj, "renormalize_prototypes", true);
    if (cfg.model.d == 0) throw ConfigError("config: model.d must be > 0");

    // train
    const auto& tj = j.contains("train") ? j.at("train") : nlohmann::json::object();
    reject_unknown(tj,
                   {"loss_mode", "epochs", "batch_size", "lr", "momentum",
                    "weight_decay", "decay_epochs", "decay_factor", "tau", "lambda",
                    "nm", "pm", "prototype_base_classifier"},
                   "train");
    cfg.train.loss_mode =
        detail::parse_loss_mode(get_or<std::string>(tj, "loss_mode", "baseline"));
    cfg.train.epochs = get_or<size_t>(tj, "epochs", 100);
    cfg.train.batch_size = get_or<size_t>(tj, "batch_size", 64);
    cfg.train.sgd.learning_rate = get_or<double>(tj, "lr", 0.1);
    cfg.train.sgd.momentum = get_or<double>(tj, "momentum", 0.9);
    cfg.train.sgd.weight_decay = get_or<double>(tj, "weight_decay", 5e-4);
    cfg.train.sgd.decay_epochs =
        get_or<std::vector<size_t>>(tj, "decay_epochs", {});
    cfg.train.sgd.decay_factor = get_or<double>(tj, "decay_factor", 0.1);
    double tau = get_or<double>(tj, "tau", 16.0);
    if (!(tau > 0.0)) throw ConfigError("config: tau must be > 0");
    double lambda = get_or<double>(tj, "lambda", 1.0);
    cfg.train.prototype_base_classifier =
        get_or<bool>(tj, "prototype_base_classifier", true);

    bool needs_nm = cfg.train.loss_mode != LossMode::Baseline;
    bool needs_pm = loss_mode_uses_head(cfg.train.loss_mode);
    if (needs_nm && !tj.contains("nm"))
        throw ConfigError("config: loss_mode '" +
                          loss_mode_name(cfg.train.loss_mode) +
                          "' requires a train.nm margin spec");
    if (needs_pm && !tj.contains("pm"))
        throw ConfigError("config: loss_mode '" +
                          loss_mode_name(cfg.train.loss_mode) +
                          "' requires a train.pm margin spec");
    if (tj.contains("nm"))
        cfg.train.nm = detail::parse_margin_pair(tj.at("nm"), "train.nm");
    if (tj.contains("pm"))
        cfg.train.pm = detail::parse_margin_pair(tj.at("pm"), "train.pm");
    cfg.train.nm.tau = tau;
    cfg.train.pm.tau = tau;
    cfg.train.pm.lambda_pm = lambda;
    cfg.train.nm.validate();
    cfg.train.pm.validate();
    cfg.train.sgd.validate();
    if (cfg.train.epochs == 0) throw ConfigError("config: epochs must be > 0");
    if (cfg.train.batch_size == 0)
        throw ConfigError("config: batch_size must be > 0");
    if (needs_pm && cfg.model.d_pm == 0)
        throw ConfigError("config: model.d_pm must be > 0 for loss_mode '" +
                          loss_mode_name(cfg.train.loss_mode) + "'");

    // analysis
    const auto& aj =
        j.contains("analysis") ? j.at("analysis") : nlohmann::json::object();
    reject_unknown(aj,
                   {"top_k", "magnitude_activations", "checkpoint",
                    "reference_checkpoint", "tag"},
                   "analysis");
    cfg.analysis.top_k = get_or<size_t>(aj, "top_k", 0);
    cfg.analysis.magnitude_activations =
        get_or<bool>(aj, "magnitude_activations", false);
    cfg.analysis.checkpoint = get_or<std::string>(aj, "checkpoint", "");
    cfg.analysis.reference_checkpoint =
        get_or<std::string>(aj, "reference_checkpoint", "");
    cfg.analysis.tag = get_or<std::string>(aj, "tag", "model");

    // sweep
    if (j.contains("sweep")) {
        const auto& sj = j.at("sweep");
        reject_unknown(sj, {"mode", "nm_margins", "pm_margins"}, "sweep");
        cfg.sweep.enabled = true;
        cfg.sweep.mode = get_req<std::string>(sj, "mode", "sweep");
        if (cfg.sweep.mode != "fixed" && cfg.sweep.mode != "nm_pm")
            throw ConfigError("config: sweep.mode must be 'fixed' or 'nm_pm'");
        cfg.sweep.nm_margins =
            get_req<std::vector<double>>(sj, "nm_margins", "sweep");
        if (cfg.sweep.nm_margins.empty())
            throw ConfigError("config: sweep.nm_margins must not be empty");
        cfg.sweep.pm_margins =
            get_or<std::vector<double>>(sj, "pm_margins", {});
        if (cfg.sweep.mode == "nm_pm" && cfg.sweep.pm_margins.empty())
            throw ConfigError("config: sweep.mode 'nm_pm' needs pm_margins");
    }

    cfg.output_dir = get_or<std::string>(j, "output", "out");
    cfg.seeds = get_or<std::vector<uint64_t>>(j, "seeds", {1});
    if (cfg.seeds.empty()) throw ConfigError("config: seeds must not be empty");
    return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: parse failure in " + path + ": " + e.what());
    }
    return parse_config(j);
}

}  // namespace clom
