#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "clom/errors.hpp"
#include "clom/margins.hpp"
#include "clom/rng.hpp"
#include "clom/tensor.hpp"

namespace clom {

struct BatchNormLayer {
    Tensor gamma, beta;
    Tensor running_mean, running_var;  // initialized to (0, 1); never require grad

    static BatchNormLayer make(size_t d) {
        BatchNormLayer bn;
        bn.gamma = Tensor::full(1, d, 1.0);
        bn.gamma.set_requires_grad(true);
        bn.beta = Tensor(1, d, true);
        bn.running_mean = Tensor(1, d);
        bn.running_var = Tensor::full(1, d, 1.0);
        return bn;
    }
};

struct DenseBlock {
    Tensor W, b;
};

struct ModelConfig {
    size_t input_dim = 0;
    std::vector<size_t> hidden;  // hidden widths; each gets dense (+bn) + relu
    size_t d = 0;                // NM feature width
    size_t d_pm = 0;             // PM feature width (head output)
    bool use_head = true;
    bool use_batchnorm = true;
    bool renormalize_prototypes = true;
    double bn_eps = 1e-5;
    double bn_momentum = 0.9;

    void validate() const {
        if (input_dim == 0) throw ConfigError("model: input_dim must be > 0");
        if (d == 0) throw ConfigError("model: d must be > 0");
        if (use_head && d_pm == 0) throw ConfigError("model: d_pm must be > 0");
        for (size_t h : hidden)
            if (h == 0) throw ConfigError("model: hidden width must be > 0");
        if (!(bn_eps >= 0.0)) throw ConfigError("model: bn_eps must be >= 0");
        if (bn_momentum < 0.0 || bn_momentum >= 1.0)
            throw ConfigError("model: bn_momentum must be in [0, 1)");
    }
};

// Backbone f(.), head g(.) with F(x) = g(f(x)), and the two cosine
// classifiers. Classifier columns are stored raw during base training and
// normalized at use; freeze() normalizes them in place, after which every
// stored column is unit-norm (incremental columns are unit prototypes).
struct ModelState {
    ModelConfig cfg;
    std::vector<DenseBlock> blocks;      // hidden blocks
    std::vector<BatchNormLayer> block_bn;
    DenseBlock proj;                     // final dense to d, no activation
    DenseBlock head;                     // g(.): dense d -> d_pm
    BatchNormLayer head_bn;
    Tensor w_nm;                         // d x N
    Tensor w_pm;                         // d_pm x N (only when use_head)
    std::vector<int> class_ids;          // column -> class id
    size_t n_base = 0;
    bool frozen = false;

    size_t n_classes() const { return class_ids.size(); }
};

inline ModelState make_model(const ModelConfig& cfg,
                             const std::vector<int>& base_class_ids, Rng& rng) {
    cfg.validate();
    if (base_class_ids.size() < 2)
        throw ConfigError("model: need at least 2 base classes");
    ModelState st;
    st.cfg = cfg;
    size_t in = cfg.input_dim;
    for (size_t h : cfg.hidden) {
        DenseBlock blk;
        blk.W = he_normal(in, h, rng);
        blk.b = Tensor(1, h, true);
        st.blocks.push_back(blk);
        st.block_bn.push_back(BatchNormLayer::make(h));
        in = h;
    }
    st.proj.W = he_normal(in, cfg.d, rng);
    st.proj.b = Tensor(1, cfg.d, true);
    st.w_nm = he_normal(cfg.d, base_class_ids.size(), rng);
    if (cfg.use_head) {
        st.head.W = he_normal(cfg.d, cfg.d_pm, rng);
        st.head.b = Tensor(1, cfg.d_pm, true);
        st.head_bn = BatchNormLayer::make(cfg.d_pm);
        st.w_pm = he_normal(cfg.d_pm, base_class_ids.size(), rng);
    }
    st.class_ids = base_class_ids;
    st.n_base = base_class_ids.size();
    return st;
}

inline std::vector<Tensor> trainable_parameters(ModelState& st) {
    std::vector<Tensor> ps;
    for (size_t i = 0; i < st.blocks.size(); ++i) {
        ps.push_back(st.blocks[i].W);
        ps.push_back(st.blocks[i].b);
        if (st.cfg.use_batchnorm) {
            ps.push_back(st.block_bn[i].gamma);
            ps.push_back(st.block_bn[i].beta);
        }
    }
    ps.push_back(st.proj.W);
    ps.push_back(st.proj.b);
    ps.push_back(st.w_nm);
    if (st.cfg.use_head) {
        ps.push_back(st.head.W);
        ps.push_back(st.head.b);
        ps.push_back(st.head_bn.gamma);
        ps.push_back(st.head_bn.beta);
        ps.push_back(st.w_pm);
    }
    return ps;
}

// MLP forward up to and including hidden block `upto` (post-activation).
inline Tensor forward_hidden(Tape& tape, ModelState& st, const Tensor& x,
                             Mode mode, size_t upto) {
    if (x.cols() != st.cfg.input_dim)
        throw DimError("forward: input width " + std::to_string(x.cols()) +
                       " != configured " + std::to_string(st.cfg.input_dim));
    Tensor h = x;
    for (size_t i = 0; i <= upto && i < st.blocks.size(); ++i) {
        h = tape.dense(h, st.blocks[i].W, st.blocks[i].b);
        if (st.cfg.use_batchnorm)
            h = tape.batchnorm(h, st.block_bn[i].gamma, st.block_bn[i].beta,
                               st.block_bn[i].running_mean,
                               st.block_bn[i].running_var, mode, st.cfg.bn_eps,
                               st.cfg.bn_momentum);
        h = tape.relu(h);
    }
    return h;
}

// Post-activation output of the first hidden block; the "simple" feature
// used as the reference representation in the CKA analysis.
inline Tensor forward_first_hidden(Tape& tape, ModelState& st, const Tensor& x,
                                   Mode mode) {
    if (st.blocks.empty())
        throw ConfigError("forward_first_hidden: model has no hidden layer");
    return forward_hidden(tape, st, x, mode, 0);
}

// f(x): backbone MLP then row L2 normalization.
inline Tensor forward_nm(Tape& tape, ModelState& st, const Tensor& x, Mode mode) {
    Tensor h = st.blocks.empty()
                   ? x
                   : forward_hidden(tape, st, x, mode, st.blocks.size() - 1);
    if (st.blocks.empty() && x.cols() != st.cfg.input_dim)
        throw DimError("forward_nm: input width mismatch");
    h = tape.dense(h, st.proj.W, st.proj.b);
    return tape.l2_normalize_clamped(h);
}

// F(x) = g(f(x)): dense, batchnorm, relu, then row L2 normalization.
inline Tensor forward_pm(Tape& tape, ModelState& st, const Tensor& f_feat,
                         Mode mode) {
    if (!st.cfg.use_head) throw ConfigError("forward_pm: model has no head");
    if (f_feat.cols() != st.cfg.d)
        throw DimError("forward_pm: expected width " + std::to_string(st.cfg.d));
    Tensor h = tape.dense(f_feat, st.head.W, st.head.b);
    h = tape.batchnorm(h, st.head_bn.gamma, st.head_bn.beta,
                       st.head_bn.running_mean, st.head_bn.running_var, mode,
                       st.cfg.bn_eps, st.cfg.bn_momentum);
    h = tape.relu(h);
    return tape.l2_normalize_clamped(h);
}

// Row-wise [f | F]; each half keeps unit norm, so the whole row has norm
// sqrt(2) and its dot against a concatenated prototype decomposes into the
// sum of the per-branch cosines.
inline Tensor concat_embedding(Tape& tape, const Tensor& f_feat,
                               const Tensor& F_feat) {
    return tape.concat_cols(f_feat, F_feat);
}

// Per-class mean of feature rows, optionally re-normalized to unit length.
// Returns (sorted class ids, one prototype row per class).
inline std::pair<std::vector<int>, Tensor> compute_prototypes(
    const Tensor& features, const std::vector<int>& labels,
    bool renormalize = true) {
    if (features.rows() == 0) throw DimError("compute_prototypes: no samples");
    if (labels.size() != features.rows())
        throw DimError("compute_prototypes: label count mismatch");
    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

    size_t d = features.cols();
    std::vector<int> ids;
    Tensor protos(by_class.size(), d);
    size_t r = 0;
    for (const auto& [cid, rows] : by_class) {
        ids.push_back(cid);
        for (size_t i : rows)
            for (size_t j = 0; j < d; ++j)
                protos.at(r, j) += features.at(i, j) / static_cast<double>(rows.size());
        if (renormalize) {
            double s = 0.0;
            for (size_t j = 0; j < d; ++j) s += protos.at(r, j) * protos.at(r, j);
            double norm = std::sqrt(s);
            if (!(norm > 1e-12))
                throw NumericError("compute_prototypes: degenerate class mean for id " +
                                   std::to_string(cid));
            for (size_t j = 0; j < d; ++j) protos.at(r, j) /= norm;
        }
        ++r;
    }
    return {ids, protos};
}

// Append prototype columns for new classes to both classifiers.
inline void extend_classifier(ModelState& st, const std::vector<int>& ids,
                              const Tensor& nm_protos, const Tensor& pm_protos) {
    if (!st.frozen)
        throw ConfigError("extend_classifier: model must be frozen first");
    if (ids.empty()) return;
    if (nm_protos.rows() != ids.size() || nm_protos.cols() != st.cfg.d)
        throw DimError("extend_classifier: NM prototype shape mismatch");
    if (st.cfg.use_head &&
        (pm_protos.rows() != ids.size() || pm_protos.cols() != st.cfg.d_pm))
        throw DimError("extend_classifier: PM prototype shape mismatch");
    for (size_t a = 0; a < ids.size(); ++a) {
        if (std::find(st.class_ids.begin(), st.class_ids.end(), ids[a]) !=
            st.class_ids.end())
            throw ConfigError("extend_classifier: class id " +
                              std::to_string(ids[a]) + " already registered");
        for (size_t b = a + 1; b < ids.size(); ++b)
            if (ids[a] == ids[b])
                throw ConfigError("extend_classifier: duplicate class id in batch");
    }

    auto append_cols = [](const Tensor& W, const Tensor& rows) {
        Tensor out(W.rows(), W.cols() + rows.rows());
        for (size_t i = 0; i < W.rows(); ++i) {
            for (size_t j = 0; j < W.cols(); ++j) out.at(i, j) = W.at(i, j);
            for (size_t k = 0; k < rows.rows(); ++k)
                out.at(i, W.cols() + k) = rows.at(k, i);
        }
        return out;
    };
    st.w_nm = append_cols(st.w_nm, nm_protos);
    if (st.cfg.use_head) st.w_pm = append_cols(st.w_pm, pm_protos);
    st.class_ids.insert(st.class_ids.end(), ids.begin(), ids.end());
}

namespace detail {
inline void normalize_cols_inplace(Tensor& W) {
    for (size_t j = 0; j < W.cols(); ++j) {
        double s = 0.0;
        for (size_t i = 0; i < W.rows(); ++i) s += W.at(i, j) * W.at(i, j);
        double norm = std::sqrt(s);
        if (!(norm > 1e-12))
            throw NumericError("freeze: degenerate classifier column");
        for (size_t i = 0; i < W.rows(); ++i) W.at(i, j) /= norm;
    }
}
}  // namespace detail

// End of base training: classifier columns are normalized in place (the
// cosine classifier only ever used their directions) and every parameter
// stops requiring gradients. Backbone and head never change after this.
inline void freeze(ModelState& st) {
    detail::normalize_cols_inplace(st.w_nm);
    if (st.cfg.use_head) detail::normalize_cols_inplace(st.w_pm);
    for (auto& p : trainable_parameters(st)) p.set_requires_grad(false);
    st.frozen = true;
}

}  // namespace clom
