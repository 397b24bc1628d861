#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "clom/dataset.hpp"
#include "clom/errors.hpp"
#include "clom/margins.hpp"
#include "clom/model.hpp"
#include "clom/rng.hpp"
#include "clom/sgd.hpp"
#include "clom/tensor.hpp"

namespace clom {

// RNG stream tags so model initialization and batch shuffling derive
// independent streams from one training seed.
inline constexpr uint64_t kSeedTagInit = 0x11;
inline constexpr uint64_t kSeedTagShuffle = 0x22;

enum class LossMode { Baseline, FixedMargin, NmPm, NmPmRelation };

inline bool loss_mode_uses_head(LossMode m) {
    return m == LossMode::NmPm || m == LossMode::NmPmRelation;
}

inline std::string loss_mode_name(LossMode m) {
    switch (m) {
        case LossMode::Baseline: return "baseline";
        case LossMode::FixedMargin: return "fixed_margin";
        case LossMode::NmPm: return "nm_pm";
        case LossMode::NmPmRelation: return "nm_pm_relation";
    }
    return "?";
}

struct TrainConfig {
    LossMode loss_mode = LossMode::Baseline;
    MarginSpec nm;  // m_ave doubles as the fixed margin in single-branch modes
    MarginSpec pm;
    size_t epochs = 100;
    size_t batch_size = 64;
    SgdConfig sgd;
    uint64_t seed = 1;
    // After freezing, replace the trained base classifier columns with
    // base-class prototypes from the frozen extractors. Learned columns and
    // prototype columns are otherwise not commensurate: prototypes of novel
    // classes sit on their feature-cone axes and systematically outscore the
    // off-axis learned directions on base samples.
    bool prototype_base_classifier = true;

    void validate() const {
        if (epochs == 0) throw ConfigError("train: epochs must be > 0");
        if (batch_size == 0) throw ConfigError("train: batch_size must be > 0");
        nm.validate();
        pm.validate();
        sgd.validate();
    }
};

// Base session plus K incremental sessions. Class lists are sorted and
// pairwise disjoint; novel classes carry exactly `shots` training indices.
struct SessionSplit {
    std::vector<int> base_classes;
    std::vector<std::vector<int>> session_classes;
    size_t shots = 5;
    std::map<int, std::vector<size_t>> train_indices;  // into the train set
    std::map<int, std::vector<size_t>> test_indices;   // into the test set
};

struct SessionReport {
    size_t session = 0;
    double overall = 0.0;
    double base = 0.0;
    std::optional<double> novel;  // absent at session 0
    size_t n_classes = 0;
    size_t n_test = 0;
    size_t base_correct = 0, base_total = 0;
    size_t novel_correct = 0, novel_total = 0;
};

inline SessionSplit split_sessions(const std::vector<int>& train_labels,
                                   const std::vector<int>& test_labels,
                                   size_t base_count, size_t session_count,
                                   size_t classes_per_session, size_t shots,
                                   uint64_t seed) {
    if (base_count < 2) throw ConfigError("split: need at least 2 base classes");
    if (shots == 0) throw ConfigError("split: shots must be > 0");

    std::map<int, std::vector<size_t>> train_by_class, test_by_class;
    for (size_t i = 0; i < train_labels.size(); ++i)
        train_by_class[train_labels[i]].push_back(i);
    for (size_t i = 0; i < test_labels.size(); ++i)
        test_by_class[test_labels[i]].push_back(i);

    std::vector<int> all_classes;
    for (const auto& [cid, _] : train_by_class) all_classes.push_back(cid);
    size_t needed = base_count + session_count * classes_per_session;
    if (needed > all_classes.size())
        throw ConfigError("split: need " + std::to_string(needed) +
                          " classes, dataset has " +
                          std::to_string(all_classes.size()));

    Rng rng(seed);
    rng.shuffle(all_classes);

    SessionSplit split;
    split.shots = shots;
    split.base_classes.assign(all_classes.begin(), all_classes.begin() + base_count);
    std::sort(split.base_classes.begin(), split.base_classes.end());
    size_t cursor = base_count;
    for (size_t k = 0; k < session_count; ++k) {
        std::vector<int> cls(all_classes.begin() + cursor,
                             all_classes.begin() + cursor + classes_per_session);
        std::sort(cls.begin(), cls.end());
        split.session_classes.push_back(cls);
        cursor += classes_per_session;
    }

    // per-class test counts must balance so the base/novel decomposition of
    // the overall accuracy is unambiguous
    size_t test_count = 0;
    auto check_class = [&](int cid) {
        auto it = test_by_class.find(cid);
        if (it == test_by_class.end())
            throw ConfigError("split: class " + std::to_string(cid) +
                              " has no test samples");
        if (test_count == 0) test_count = it->second.size();
        if (it->second.size() != test_count)
            throw ConfigError("split: per-class test counts are unbalanced");
        split.test_indices[cid] = it->second;
    };

    for (int cid : split.base_classes) {
        check_class(cid);
        split.train_indices[cid] = train_by_class[cid];
    }
    for (const auto& session : split.session_classes)
        for (int cid : session) {
            check_class(cid);
            auto pool = train_by_class[cid];
            if (pool.size() < shots)
                throw ConfigError("split: class " + std::to_string(cid) + " has " +
                                  std::to_string(pool.size()) +
                                  " train samples, need " + std::to_string(shots));
            Rng class_rng = rng.split(static_cast<uint64_t>(cid) + 1000);
            class_rng.shuffle(pool);
            pool.resize(shots);
            std::sort(pool.begin(), pool.end());
            split.train_indices[cid] = pool;
        }
    return split;
}

namespace detail {

inline std::pair<Tensor, std::vector<int>> gather_rows(
    const Tensor& x, const std::vector<int>& y, const std::vector<size_t>& rows) {
    Tensor out(rows.size(), x.cols());
    std::vector<int> labels(rows.size());
    for (size_t r = 0; r < rows.size(); ++r) {
        for (size_t j = 0; j < x.cols(); ++j) out.at(r, j) = x.at(rows[r], j);
        labels[r] = y[rows[r]];
    }
    return {out, labels};
}

}  // namespace detail

// Base-session training. Returns the per-epoch mean loss curve; the model is
// frozen on return.
inline std::vector<double> train_base(ModelState& st, const Tensor& x,
                                      const std::vector<int>& y,
                                      const TrainConfig& cfg) {
    cfg.validate();
    if (st.frozen) throw ConfigError("train_base: model is already frozen");
    if (loss_mode_uses_head(cfg.loss_mode) && !st.cfg.use_head)
        throw ConfigError("train_base: loss mode needs a model with a head");
    if (x.rows() != y.size()) throw DimError("train_base: label count mismatch");

    std::unordered_map<int, int> col_of;
    for (size_t j = 0; j < st.class_ids.size(); ++j)
        col_of[st.class_ids[j]] = static_cast<int>(j);
    std::set<int> seen;
    std::vector<int> cols(y.size());
    for (size_t i = 0; i < y.size(); ++i) {
        auto it = col_of.find(y[i]);
        if (it == col_of.end())
            throw ConfigError("train_base: label " + std::to_string(y[i]) +
                              " is not a registered base class");
        cols[i] = it->second;
        seen.insert(y[i]);
    }
    if (seen.size() != st.class_ids.size())
        throw ConfigError("train_base: training data does not cover all base classes");

    SgdOptimizer opt(cfg.sgd);
    auto params = trainable_parameters(st);
    Rng shuffle_rng = Rng(cfg.seed).split(kSeedTagShuffle);
    std::vector<size_t> order(x.rows());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> curve;
    curve.reserve(cfg.epochs);
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        size_t batch_index = 0;
        for (size_t start = 0; start < order.size();
             start += cfg.batch_size, ++batch_index) {
            size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<size_t> rows(order.begin() + start, order.begin() + stop);
            Tensor xb(rows.size(), x.cols());
            std::vector<int> yb(rows.size());
            for (size_t r = 0; r < rows.size(); ++r) {
                for (size_t j = 0; j < x.cols(); ++j) xb.at(r, j) = x.at(rows[r], j);
                yb[r] = cols[rows[r]];
            }

            try {
                Tape tape;
                Tensor f = forward_nm(tape, st, xb, Mode::Train);
                Tensor nm_logits =
                    cosine_logits(tape, f, normalize_columns(tape, st.w_nm));
                Tensor loss;
                switch (cfg.loss_mode) {
                    case LossMode::Baseline:
                    case LossMode::FixedMargin:
                        loss = fixed_margin_ce(tape, nm_logits, yb, cfg.nm.m_ave,
                                               cfg.nm.tau);
                        break;
                    case LossMode::NmPm: {
                        Tensor F = forward_pm(tape, st, f, Mode::Train);
                        Tensor pm_logits = cosine_logits(
                            tape, F, normalize_columns(tape, st.w_pm));
                        Tensor l_nm = fixed_margin_ce(tape, nm_logits, yb,
                                                      cfg.nm.m_ave, cfg.nm.tau);
                        Tensor l_pm = fixed_margin_ce(tape, pm_logits, yb,
                                                      cfg.pm.m_ave, cfg.pm.tau);
                        loss = tape.add(l_nm, tape.scale(l_pm, cfg.pm.lambda_pm));
                        break;
                    }
                    case LossMode::NmPmRelation: {
                        Tensor F = forward_pm(tape, st, f, Mode::Train);
                        Tensor pm_logits = cosine_logits(
                            tape, F, normalize_columns(tape, st.w_pm));
                        // margins come from a detached snapshot of the
                        // current classifier weights
                        AdjacencyMatrix A_nm =
                            adjacency_from_weights(st.w_nm.detached());
                        AdjacencyMatrix A_pm =
                            adjacency_from_weights(st.w_pm.detached());
                        loss = clom_loss(tape, nm_logits, pm_logits, yb, A_nm,
                                         A_pm, cfg.nm, cfg.pm);
                        break;
                    }
                }
                epoch_loss += loss.at(0, 0) * static_cast<double>(rows.size());
                for (auto& p : params) p.zero_grad();
                tape.backward(loss);
                opt.step(params, epoch);
            } catch (const NumericError& e) {
                throw NumericError("train_base: divergence at epoch " +
                                   std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index) + ": " + e.what());
            }
        }
        curve.push_back(epoch_loss / static_cast<double>(x.rows()));
    }
    freeze(st);

    if (cfg.prototype_base_classifier) {
        Tape tape;
        Tensor f = forward_nm(tape, st, x, Mode::Eval);
        auto replace = [&](Tensor& W, const Tensor& feats) {
            auto [ids, protos] = compute_prototypes(feats, y,
                                                    st.cfg.renormalize_prototypes);
            std::unordered_map<int, size_t> row_of;
            for (size_t r = 0; r < ids.size(); ++r) row_of[ids[r]] = r;
            for (size_t j = 0; j < st.class_ids.size(); ++j) {
                size_t r = row_of.at(st.class_ids[j]);
                for (size_t i = 0; i < W.rows(); ++i) W.at(i, j) = protos.at(r, i);
            }
        };
        replace(st.w_nm, f.detached());
        if (st.cfg.use_head) {
            Tensor F = forward_pm(tape, st, f, Mode::Eval);
            replace(st.w_pm, F.detached());
        }
    }
    return curve;
}

// Few-shot session absorption: prototypes of both branches from the frozen
// extractors in eval mode, appended as classifier columns.
inline void absorb_session(ModelState& st, const Tensor& x,
                           const std::vector<int>& y) {
    if (!st.frozen) throw ConfigError("absorb_session: model must be frozen");
    if (x.rows() == 0) return;
    Tape tape;
    Tensor f = forward_nm(tape, st, x, Mode::Eval);
    auto [ids, nm_protos] =
        compute_prototypes(f.detached(), y, st.cfg.renormalize_prototypes);
    Tensor pm_protos(ids.size(), st.cfg.d_pm);
    if (st.cfg.use_head) {
        Tensor F = forward_pm(tape, st, f, Mode::Eval);
        auto [ids_pm, protos] =
            compute_prototypes(F.detached(), y, st.cfg.renormalize_prototypes);
        pm_protos = protos;
    }
    extend_classifier(st, ids, nm_protos, pm_protos);
}

// Score every test sample against all registered classes. Two-branch models
// use the concatenated embedding, whose dot against a concatenated prototype
// is the sum of the per-branch cosines; ties break toward the lower class id.
inline SessionReport evaluate_session(ModelState& st, const Tensor& x,
                                      const std::vector<int>& y, size_t k) {
    if (x.rows() == 0) throw DimError("evaluate_session: no test samples");
    std::set<int> registered(st.class_ids.begin(), st.class_ids.end());
    for (int label : y)
        if (!registered.count(label))
            throw ConfigError("evaluate_session: test sample from unregistered class " +
                              std::to_string(label));
    std::set<int> base_set(st.class_ids.begin(),
                           st.class_ids.begin() + static_cast<long>(st.n_base));

    Tape tape;
    Tensor f = forward_nm(tape, st, x, Mode::Eval);
    Tensor scores = tape.matmul(f, st.w_nm);
    if (st.cfg.use_head) {
        Tensor F = forward_pm(tape, st, f, Mode::Eval);
        scores = tape.add(scores, tape.matmul(F, st.w_pm));
    }

    SessionReport rep;
    rep.session = k;
    rep.n_classes = st.class_ids.size();
    rep.n_test = x.rows();
    for (size_t i = 0; i < x.rows(); ++i) {
        double best = -HUGE_VAL;
        int best_id = 0;
        for (size_t j = 0; j < scores.cols(); ++j) {
            double s = scores.at(i, j);
            int cid = st.class_ids[j];
            if (s > best || (s == best && cid < best_id)) {
                best = s;
                best_id = cid;
            }
        }
        bool correct = best_id == y[i];
        if (base_set.count(y[i])) {
            ++rep.base_total;
            if (correct) ++rep.base_correct;
        } else {
            ++rep.novel_total;
            if (correct) ++rep.novel_correct;
        }
    }
    rep.overall = static_cast<double>(rep.base_correct + rep.novel_correct) /
                  static_cast<double>(rep.n_test);
    rep.base = rep.base_total
                   ? static_cast<double>(rep.base_correct) /
                         static_cast<double>(rep.base_total)
                   : 0.0;
    if (rep.novel_total)
        rep.novel = static_cast<double>(rep.novel_correct) /
                    static_cast<double>(rep.novel_total);
    return rep;
}

struct ProtocolResult {
    ModelState model;
    std::vector<double> loss_curve;
    std::vector<SessionReport> reports;
};

// The full FSCIL loop: base training, then per session absorb + evaluate
// over the cumulative test set of every class seen so far.
inline ProtocolResult run_protocol(const Dataset& ds, const SessionSplit& split,
                                   const ModelConfig& model_cfg,
                                   const TrainConfig& train_cfg) {
    ModelConfig cfg = model_cfg;
    cfg.input_dim = ds.dim;
    cfg.use_head = loss_mode_uses_head(train_cfg.loss_mode);

    Rng init_rng = Rng(train_cfg.seed).split(kSeedTagInit);
    ProtocolResult result;
    result.model = make_model(cfg, split.base_classes, init_rng);

    std::vector<size_t> base_rows;
    for (int cid : split.base_classes)
        for (size_t idx : split.train_indices.at(cid)) base_rows.push_back(idx);
    auto [base_x, base_y] = detail::gather_rows(ds.train_x, ds.train_y, base_rows);
    result.loss_curve = train_base(result.model, base_x, base_y, train_cfg);

    std::vector<size_t> test_rows;
    auto extend_test = [&](const std::vector<int>& classes) {
        for (int cid : classes)
            for (size_t idx : split.test_indices.at(cid)) test_rows.push_back(idx);
    };
    extend_test(split.base_classes);
    auto [test_x, test_y] = detail::gather_rows(ds.test_x, ds.test_y, test_rows);
    result.reports.push_back(evaluate_session(result.model, test_x, test_y, 0));

    for (size_t k = 0; k < split.session_classes.size(); ++k) {
        std::vector<size_t> session_rows;
        for (int cid : split.session_classes[k])
            for (size_t idx : split.train_indices.at(cid))
                session_rows.push_back(idx);
        auto [sx, sy] = detail::gather_rows(ds.train_x, ds.train_y, session_rows);
        absorb_session(result.model, sx, sy);

        extend_test(split.session_classes[k]);
        auto [tx, ty] = detail::gather_rows(ds.test_x, ds.test_y, test_rows);
        result.reports.push_back(evaluate_session(result.model, tx, ty, k + 1));
    }
    return result;
}

}  // namespace clom
