#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "clom/errors.hpp"
#include "clom/margins.hpp"
#include "clom/tensor.hpp"

namespace clom {

// 5% of the channels, at least one: the default "top classification
// weights" count, reported alongside every metric that uses it.
inline size_t default_top_k(size_t d) {
    return std::max<size_t>(1, static_cast<size_t>(
                                   std::ceil(0.05 * static_cast<double>(d))));
}

struct PatternMetrics {
    double l1_mean = 0.0;
    double mta = 0.0;
    double transferability = 0.0;
    size_t top_k = 0;
};

// Sorted inherent relations of the margin-zero model (r0, ascending) with
// the aligned relation deltas of some margin-m model.
struct RelationDelta {
    std::vector<double> r0;
    std::vector<double> delta;
    std::string margin_tag;
};

// Mean over rows of the L1 norm. For unit-norm rows this lives in
// [1, sqrt(d)]: 1 at a one-hot row, sqrt(d) at a maximally dense one.
inline double l1_sparsity(const Tensor& features) {
    if (features.rows() == 0) throw DimError("l1_sparsity: no rows");
    double total = 0.0;
    for (size_t i = 0; i < features.rows(); ++i)
        for (size_t j = 0; j < features.cols(); ++j)
            total += std::fabs(features.at(i, j));
    return total / static_cast<double>(features.rows());
}

namespace detail {

// Indices of the top_k entries of column `col` of W by (signed) weight,
// ties toward the lower channel index.
inline std::vector<size_t> top_weight_channels(const Tensor& W, size_t col,
                                               size_t top_k) {
    std::vector<size_t> idx(W.rows());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return W.at(a, col) > W.at(b, col);
    });
    idx.resize(top_k);
    return idx;
}

inline double activation(double v, bool magnitude) {
    return magnitude ? std::fabs(v) : v;
}

}  // namespace detail

// Mean Top Activation: per sample, the mean feature activation on the
// channels with the largest classifier weights of its ground-truth class.
inline double mta(const Tensor& features, const std::vector<int>& labels,
                  const Tensor& W, size_t top_k, bool magnitude = false) {
    if (features.rows() == 0) throw DimError("mta: no samples");
    if (labels.size() != features.rows()) throw DimError("mta: label count mismatch");
    if (W.rows() != features.cols()) throw DimError("mta: W rows must equal d");
    if (top_k == 0 || top_k > features.cols())
        throw ConfigError("mta: top_k must be in [1, d]");

    double total = 0.0;
    for (size_t i = 0; i < features.rows(); ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<size_t>(y) >= W.cols())
            throw DimError("mta: label " + std::to_string(y) + " out of range");
        auto channels = detail::top_weight_channels(W, static_cast<size_t>(y), top_k);
        double s = 0.0;
        for (size_t c : channels)
            s += detail::activation(features.at(i, c), magnitude);
        total += s / static_cast<double>(top_k);
    }
    return total / static_cast<double>(features.rows());
}

// Transferability: per class, the mean activation of that class's top-weight
// channels over all samples of other classes; averaged over classes.
inline double transferability(const Tensor& features, const std::vector<int>& labels,
                              const Tensor& W, size_t top_k,
                              bool magnitude = false) {
    if (features.rows() == 0) throw DimError("transferability: no samples");
    if (labels.size() != features.rows())
        throw DimError("transferability: label count mismatch");
    if (W.rows() != features.cols())
        throw DimError("transferability: W rows must equal d");
    if (top_k == 0 || top_k > features.cols())
        throw ConfigError("transferability: top_k must be in [1, d]");
    std::set<int> present(labels.begin(), labels.end());
    if (present.size() < 2)
        throw DimError("transferability: need samples from at least 2 classes");

    double class_total = 0.0;
    size_t class_count = 0;
    for (size_t c = 0; c < W.cols(); ++c) {
        auto channels = detail::top_weight_channels(W, c, top_k);
        double s = 0.0;
        size_t count = 0;
        for (size_t i = 0; i < features.rows(); ++i) {
            if (labels[i] == static_cast<int>(c)) continue;
            for (size_t ch : channels)
                s += detail::activation(features.at(i, ch), magnitude);
            ++count;
        }
        if (count == 0) continue;
        class_total += s / static_cast<double>(count * top_k);
        ++class_count;
    }
    return class_total / static_cast<double>(class_count);
}

inline PatternMetrics compute_pattern_metrics(const Tensor& features,
                                              const std::vector<int>& labels,
                                              const Tensor& W, size_t top_k,
                                              bool magnitude = false) {
    PatternMetrics m;
    m.top_k = top_k;
    m.l1_mean = l1_sparsity(features);
    m.mta = mta(features, labels, W, top_k, magnitude);
    m.transferability = transferability(features, labels, W, top_k, magnitude);
    return m;
}

// Pairwise cosine matrix of prototype rows plus the upper triangle flattened
// in (i < j) lexicographic order: (0,1), (0,2), ..., (1,2), ... Length is
// always N(N-1)/2.
inline std::pair<AdjacencyMatrix, std::vector<double>> class_relation_matrix(
    const Tensor& prototypes) {
    size_t N = prototypes.rows();
    if (N < 2) throw DimError("class_relation_matrix: need >= 2 prototypes");
    Tape tape;
    AdjacencyMatrix A = adjacency_from_weights(tape.transpose(prototypes));
    std::vector<double> upper;
    upper.reserve(N * (N - 1) / 2);
    for (size_t i = 0; i < N; ++i)
        for (size_t j = i + 1; j < N; ++j) upper.push_back(A.values.at(i, j));
    return {A, upper};
}

// Pair both relation lists, sort by ascending r0, and report r0 alongside
// delta = rm - r0 in that order.
inline RelationDelta relation_delta(const std::vector<double>& r0_list,
                                    const std::vector<double>& rm_list,
                                    std::string margin_tag = "") {
    if (r0_list.size() != rm_list.size())
        throw DimError("relation_delta: length mismatch");
    std::vector<size_t> idx(r0_list.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](size_t a, size_t b) { return r0_list[a] < r0_list[b]; });
    RelationDelta out;
    out.margin_tag = std::move(margin_tag);
    out.r0.reserve(idx.size());
    out.delta.reserve(idx.size());
    for (size_t i : idx) {
        out.r0.push_back(r0_list[i]);
        out.delta.push_back(rm_list[i] - r0_list[i]);
    }
    return out;
}

// Linear CKA between two representations of the same n inputs: column-center
// both, then |Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F). Symmetric, in [0, 1],
// invariant to isotropic scaling and orthogonal right-transformations.
inline double linear_cka(const Tensor& X, const Tensor& Y) {
    size_t n = X.rows();
    if (n < 2) throw DimError("linear_cka: need n >= 2 rows");
    if (Y.rows() != n) throw DimError("linear_cka: row counts differ");

    auto center = [&](const Tensor& M) {
        Tensor out(M.rows(), M.cols());
        for (size_t j = 0; j < M.cols(); ++j) {
            double mean = 0.0;
            for (size_t i = 0; i < M.rows(); ++i) mean += M.at(i, j);
            mean /= static_cast<double>(M.rows());
            for (size_t i = 0; i < M.rows(); ++i) out.at(i, j) = M.at(i, j) - mean;
        }
        return out;
    };
    Tensor Xc = center(X), Yc = center(Y);

    auto cross_fro2 = [](const Tensor& A, const Tensor& B) {
        // |B^T A|_F^2 without forming the product explicitly
        double total = 0.0;
        for (size_t p = 0; p < B.cols(); ++p)
            for (size_t q = 0; q < A.cols(); ++q) {
                double s = 0.0;
                for (size_t i = 0; i < A.rows(); ++i) s += B.at(i, p) * A.at(i, q);
                total += s * s;
            }
        return total;
    };
    double num = cross_fro2(Xc, Yc);
    double den_x = std::sqrt(cross_fro2(Xc, Xc));
    double den_y = std::sqrt(cross_fro2(Yc, Yc));
    if (!(den_x > 0.0) || !(den_y > 0.0))
        throw NumericError("linear_cka: zero-variance input");
    return num / (den_x * den_y);
}

}  // namespace clom
