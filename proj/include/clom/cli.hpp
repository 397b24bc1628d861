#pragma once

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "clom/analysis.hpp"
#include "clom/checkpoint.hpp"
#include "clom/config.hpp"
#include "clom/csv.hpp"
#include "clom/dataset.hpp"
#include "clom/protocol.hpp"

namespace clom {

inline constexpr uint64_t kSeedTagSweepRef = 0x99;

namespace detail {

inline Dataset resolve_dataset(const ExperimentConfig& cfg) {
    return cfg.has_synthetic ? gen_synthetic(cfg.synthetic)
                             : load_dataset(cfg.dataset_path);
}

inline SessionSplit make_split(const ExperimentConfig& cfg, const Dataset& ds,
                               uint64_t run_seed) {
    return split_sessions(ds.train_y, ds.test_y, cfg.split.base_count,
                          cfg.split.sessions, cfg.split.classes_per_session,
                          cfg.split.shots, mix_seed(run_seed, kSeedTagSplit));
}

// out/<stem>.csv for the first seed, out/<stem>_seed<s>.csv for the rest
inline std::string seed_path(const std::string& dir, const std::string& stem,
                             const std::string& ext, uint64_t seed, bool first) {
    if (first) return dir + "/" + stem + ext;
    return dir + "/" + stem + "_seed" + std::to_string(seed) + ext;
}

// Base-class test samples of a model, with labels mapped to classifier
// column indices [0, n_base).
inline void gather_base_test(const ModelState& st, const Dataset& ds, Tensor& x,
                             std::vector<int>& col_labels) {
    std::unordered_map<int, int> col_of;
    for (size_t j = 0; j < st.n_base; ++j) col_of[st.class_ids[j]] = static_cast<int>(j);
    std::vector<size_t> rows;
    for (size_t i = 0; i < ds.test_y.size(); ++i)
        if (col_of.count(ds.test_y[i])) rows.push_back(i);
    if (rows.empty()) throw ConfigError("analysis: no test samples for base classes");
    x = Tensor(rows.size(), ds.test_x.cols());
    col_labels.resize(rows.size());
    for (size_t r = 0; r < rows.size(); ++r) {
        for (size_t j = 0; j < ds.test_x.cols(); ++j)
            x.at(r, j) = ds.test_x.at(rows[r], j);
        col_labels[r] = col_of[ds.test_y[rows[r]]];
    }
}

inline Tensor base_columns(const Tensor& W, size_t n_base) {
    Tensor out(W.rows(), n_base);
    for (size_t i = 0; i < W.rows(); ++i)
        for (size_t j = 0; j < n_base; ++j) out.at(i, j) = W.at(i, j);
    return out;
}

struct BranchAnalysis {
    PatternMetrics metrics;
    double a_ave_weights = 0.0;
    double a_ave_data = 0.0;
    std::vector<double> relations_weights;  // upper triangle, (i<j) order
};

inline BranchAnalysis analyze_branch(const Tensor& features,
                                     const std::vector<int>& col_labels,
                                     const Tensor& W_base, size_t top_k,
                                     bool magnitude) {
    BranchAnalysis out;
    out.metrics = compute_pattern_metrics(features, col_labels, W_base, top_k,
                                          magnitude);
    Tape tape;
    auto [A_w, upper] = class_relation_matrix(tape.transpose(W_base));
    out.a_ave_weights = A_w.a_ave;
    out.relations_weights = upper;
    auto [ids, protos] = compute_prototypes(features, col_labels, true);
    out.a_ave_data = class_relation_matrix(protos).first.a_ave;
    return out;
}

}  // namespace detail

inline void write_sessions_csv(const std::string& path,
                               const std::vector<SessionReport>& reports,
                               uint64_t config_hash, uint64_t seed) {
    CsvWriter csv(path, "session,overall,base,novel,n_classes,n_test", config_hash,
                  seed);
    for (const auto& r : reports)
        csv.row({std::to_string(r.session), format_f6(r.overall), format_f6(r.base),
                 r.novel ? format_f6(*r.novel) : std::string(),
                 std::to_string(r.n_classes), std::to_string(r.n_test)});
}

inline int cmd_gen(const ExperimentConfig& cfg) {
    if (!cfg.has_synthetic)
        throw ConfigError("gen: config must carry a dataset.synthetic block");
    Dataset ds = gen_synthetic(cfg.synthetic);
    save_dataset(ds, cfg.output_dir);
    std::cout << "gen: wrote " << ds.train_x.rows() << " train / "
              << ds.test_x.rows() << " test samples, " << ds.class_means.rows()
              << " classes to " << cfg.output_dir << "\n";
    return 0;
}

inline int cmd_train(const ExperimentConfig& cfg) {
    Dataset ds = detail::resolve_dataset(cfg);
    std::filesystem::create_directories(cfg.output_dir);
    for (size_t s = 0; s < cfg.seeds.size(); ++s) {
        uint64_t seed = cfg.seeds[s];
        SessionSplit split = detail::make_split(cfg, ds, seed);

        ModelConfig mc = cfg.model;
        mc.input_dim = ds.dim;
        mc.use_head = loss_mode_uses_head(cfg.train.loss_mode);
        TrainConfig tc = cfg.train;
        tc.seed = seed;

        Rng init_rng = Rng(seed).split(kSeedTagInit);
        ModelState model = make_model(mc, split.base_classes, init_rng);
        std::vector<size_t> rows;
        for (int cid : split.base_classes)
            for (size_t idx : split.train_indices.at(cid)) rows.push_back(idx);
        auto [x, y] = clom::detail::gather_rows(ds.train_x, ds.train_y, rows);
        std::vector<double> curve = train_base(model, x, y, tc);

        std::string ckpt =
            detail::seed_path(cfg.output_dir, "model", ".ckpt", seed, s == 0);
        save_checkpoint(model, ckpt);
        CsvWriter csv(detail::seed_path(cfg.output_dir, "loss", ".csv", seed, s == 0),
                      "epoch,loss", cfg.hash, seed);
        for (size_t e = 0; e < curve.size(); ++e)
            csv.row({std::to_string(e), format_f6(curve[e])});
        std::cout << "train: seed " << seed << " final loss "
                  << format_f6(curve.back()) << ", checkpoint " << ckpt << "\n";
    }
    return 0;
}

inline int cmd_protocol(const ExperimentConfig& cfg) {
    Dataset ds = detail::resolve_dataset(cfg);
    std::filesystem::create_directories(cfg.output_dir);
    for (size_t s = 0; s < cfg.seeds.size(); ++s) {
        uint64_t seed = cfg.seeds[s];
        SessionSplit split = detail::make_split(cfg, ds, seed);
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        ProtocolResult res = run_protocol(ds, split, cfg.model, tc);
        std::string path =
            detail::seed_path(cfg.output_dir, "sessions", ".csv", seed, s == 0);
        write_sessions_csv(path, res.reports, cfg.hash, seed);
        std::cout << "protocol: seed " << seed << " last-session overall "
                  << format_f6(res.reports.back().overall) << " -> " << path
                  << "\n";
    }
    return 0;
}

inline int cmd_analyze(const ExperimentConfig& cfg) {
    Dataset ds = detail::resolve_dataset(cfg);
    std::filesystem::create_directories(cfg.output_dir);
    std::string ckpt_path = cfg.analysis.checkpoint.empty()
                                ? cfg.output_dir + "/model.ckpt"
                                : cfg.analysis.checkpoint;
    ModelState model = load_checkpoint(ckpt_path);
    if (model.cfg.input_dim != ds.dim)
        throw ConfigError("analyze: checkpoint input width " +
                          std::to_string(model.cfg.input_dim) +
                          " != dataset dim " + std::to_string(ds.dim));

    Tensor x;
    std::vector<int> col_labels;
    detail::gather_base_test(model, ds, x, col_labels);

    Tape tape;
    Tensor f = forward_nm(tape, model, x, Mode::Eval).detached();
    size_t top_k_nm =
        cfg.analysis.top_k ? cfg.analysis.top_k : default_top_k(model.cfg.d);
    detail::BranchAnalysis nm = detail::analyze_branch(
        f, col_labels, detail::base_columns(model.w_nm, model.n_base), top_k_nm,
        cfg.analysis.magnitude_activations);

    CsvWriter csv(cfg.output_dir + "/analysis.csv", "metric,tag,value", cfg.hash,
                  cfg.seeds[0]);
    csv.row({"top_k", "nm", std::to_string(top_k_nm)});
    csv.row({"l1_sparsity", "nm", format_f6(nm.metrics.l1_mean)});
    csv.row({"mta", "nm", format_f6(nm.metrics.mta)});
    csv.row({"transferability", "nm", format_f6(nm.metrics.transferability)});
    csv.row({"a_ave", "nm_weights", format_f6(nm.a_ave_weights)});
    csv.row({"a_ave", "nm_data", format_f6(nm.a_ave_data)});

    if (model.cfg.use_head) {
        Tape t2;
        Tensor F = forward_pm(t2, model, f, Mode::Eval).detached();
        size_t top_k_pm =
            cfg.analysis.top_k ? cfg.analysis.top_k : default_top_k(model.cfg.d_pm);
        detail::BranchAnalysis pm = detail::analyze_branch(
            F, col_labels, detail::base_columns(model.w_pm, model.n_base),
            top_k_pm, cfg.analysis.magnitude_activations);
        csv.row({"top_k", "pm", std::to_string(top_k_pm)});
        csv.row({"l1_sparsity", "pm", format_f6(pm.metrics.l1_mean)});
        csv.row({"mta", "pm", format_f6(pm.metrics.mta)});
        csv.row({"transferability", "pm", format_f6(pm.metrics.transferability)});
        csv.row({"a_ave", "pm_weights", format_f6(pm.a_ave_weights)});
        csv.row({"a_ave", "pm_data", format_f6(pm.a_ave_data)});
    }

    if (!model.blocks.empty()) {
        Tape t3;
        Tensor simple = forward_first_hidden(t3, model, x, Mode::Eval).detached();
        csv.row({"cka_first_hidden", "self", format_f6(linear_cka(simple, f))});
    }

    if (!cfg.analysis.reference_checkpoint.empty()) {
        ModelState ref = load_checkpoint(cfg.analysis.reference_checkpoint);
        if (ref.n_base != model.n_base)
            throw ConfigError("analyze: reference base class count differs");
        detail::BranchAnalysis ref_nm = detail::analyze_branch(
            f, col_labels, detail::base_columns(ref.w_nm, ref.n_base), top_k_nm,
            cfg.analysis.magnitude_activations);
        RelationDelta delta = relation_delta(
            ref_nm.relations_weights, nm.relations_weights, cfg.analysis.tag);
        CsvWriter rel(cfg.output_dir + "/relations_" + cfg.analysis.tag + ".csv",
                      "r0,delta", cfg.hash, cfg.seeds[0]);
        for (size_t i = 0; i < delta.r0.size(); ++i)
            rel.row({format_f6(delta.r0[i]), format_f6(delta.delta[i])});
        if (!ref.blocks.empty()) {
            Tape t4;
            Tensor ref_simple =
                forward_first_hidden(t4, ref, x, Mode::Eval).detached();
            csv.row({"cka_first_hidden", "ref", format_f6(linear_cka(ref_simple, f))});
        }
    }
    std::cout << "analyze: wrote " << cfg.output_dir << "/analysis.csv\n";
    return 0;
}

inline int cmd_sweep(const ExperimentConfig& cfg) {
    if (!cfg.sweep.enabled)
        throw ConfigError("sweep: config must carry a sweep block");
    Dataset ds = detail::resolve_dataset(cfg);
    std::filesystem::create_directories(cfg.output_dir);
    bool dual = cfg.sweep.mode == "nm_pm";

    CsvWriter csv(cfg.output_dir + "/sweep.csv",
                  "mode,i,j,m_nm,m_pm,seed,session0_overall,last_overall,last_base,"
                  "last_novel,l1_nm,mta_nm,transferability_nm,a_ave_nm,"
                  "cka_first_hidden",
                  cfg.hash, cfg.seeds[0]);

    for (uint64_t base_seed : cfg.seeds) {
        SessionSplit split = detail::make_split(cfg, ds, base_seed);

        // margin-zero baseline of this seed: the simple-feature reference
        TrainConfig ref_tc = cfg.train;
        ref_tc.loss_mode = LossMode::Baseline;
        ref_tc.nm.m_ave = 0.0;
        ref_tc.seed = mix_seed(base_seed, kSeedTagSweepRef);
        ProtocolResult ref = run_protocol(ds, split, cfg.model, ref_tc);

        Tensor x;
        std::vector<int> col_labels;
        detail::gather_base_test(ref.model, ds, x, col_labels);
        Tape tape;
        Tensor f_simple =
            ref.model.blocks.empty()
                ? Tensor()
                : forward_first_hidden(tape, ref.model, x, Mode::Eval).detached();

        size_t nj = dual ? cfg.sweep.pm_margins.size() : 1;
        for (size_t i = 0; i < cfg.sweep.nm_margins.size(); ++i) {
            for (size_t jdx = 0; jdx < nj; ++jdx) {
                TrainConfig tc = cfg.train;
                tc.nm.m_ave = cfg.sweep.nm_margins[i];
                if (dual) {
                    tc.loss_mode = LossMode::NmPm;
                    tc.pm.m_ave = cfg.sweep.pm_margins[jdx];
                } else {
                    tc.loss_mode = LossMode::FixedMargin;
                }
                tc.seed = mix_seed(mix_seed(base_seed, i), jdx);
                ProtocolResult res = run_protocol(ds, split, cfg.model, tc);

                Tensor xc;
                std::vector<int> cl;
                detail::gather_base_test(res.model, ds, xc, cl);
                Tape t2;
                Tensor f = forward_nm(t2, res.model, xc, Mode::Eval).detached();
                size_t top_k = cfg.analysis.top_k
                                   ? cfg.analysis.top_k
                                   : default_top_k(res.model.cfg.d);
                detail::BranchAnalysis nm = detail::analyze_branch(
                    f, cl, detail::base_columns(res.model.w_nm, res.model.n_base),
                    top_k, cfg.analysis.magnitude_activations);

                std::string cka;
                if (f_simple.rows() > 0)
                    cka = format_f6(linear_cka(f_simple, f));

                const SessionReport& first = res.reports.front();
                const SessionReport& last = res.reports.back();
                csv.row({cfg.sweep.mode, std::to_string(i), std::to_string(jdx),
                         format_f6(cfg.sweep.nm_margins[i]),
                         dual ? format_f6(cfg.sweep.pm_margins[jdx]) : std::string(),
                         std::to_string(base_seed), format_f6(first.overall),
                         format_f6(last.overall), format_f6(last.base),
                         last.novel ? format_f6(*last.novel) : std::string(),
                         format_f6(nm.metrics.l1_mean), format_f6(nm.metrics.mta),
                         format_f6(nm.metrics.transferability),
                         format_f6(nm.a_ave_weights), cka});
            }
        }
    }
    std::cout << "sweep: wrote " << cfg.output_dir << "/sweep.csv\n";
    return 0;
}

}  // namespace clom
