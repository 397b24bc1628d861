#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "clom/errors.hpp"
#include "clom/tensor.hpp"

namespace clom {

// Margin hyperparameters for one classifier branch. m_ave is the margin at
// the average class relation, m_upper the margin at relation 1 (identical
// classes); tau is the softmax scale; lambda_pm weighs the PM branch in the
// combined objective and is only read there.
struct MarginSpec {
    double m_ave = 0.0;
    double m_upper = 0.0;
    double tau = 16.0;
    double lambda_pm = 1.0;

    void validate() const {
        if (!(tau > 0.0)) throw ConfigError("margin spec: tau must be > 0");
        if (lambda_pm < 0.0) throw ConfigError("margin spec: lambda must be >= 0");
    }
};

// Pairwise class cosine similarities with the cached off-diagonal mean.
struct AdjacencyMatrix {
    Tensor values;  // N x N, symmetric, diagonal 1 for unit prototypes
    double a_ave = 0.0;

    size_t n() const { return values.rows(); }
};

// logits[i][j] = <feature_i, w_j>. With unit-norm rows and columns (the
// caller's responsibility, via l2_normalize) these are cosine similarities.
inline Tensor cosine_logits(Tape& tape, const Tensor& features, const Tensor& W) {
    if (features.cols() != W.rows())
        throw DimError("cosine_logits: feature width " +
                       std::to_string(features.cols()) + " vs classifier rows " +
                       std::to_string(W.rows()));
    return tape.matmul(features, W);
}

// Normalize classifier columns to unit length (cosine classifier form).
inline Tensor normalize_columns(Tape& tape, const Tensor& W) {
    return tape.transpose(tape.l2_normalize(tape.transpose(W)));
}

namespace detail {

// Shared core of the margin losses. offsets is an n x N constant matrix
// added to the logits before scaling by tau:
//   loss = mean_i [ LSE_j tau*(z_ij + o_ij) - tau*(z_iy + o_iy) ]
// computed with per-row max subtraction. Gradient flows to the logits only;
// the offsets are constants.
inline Tensor offset_cross_entropy(Tape& tape, const Tensor& logits,
                                   const std::vector<int>& labels,
                                   const Tensor& offsets, double tau) {
    size_t n = logits.rows(), N = logits.cols();
    if (n == 0) throw DimError("margin loss: empty batch");
    if (labels.size() != n) throw DimError("margin loss: label count mismatch");
    if (!offsets.same_shape(logits))
        throw DimError("margin loss: offset shape mismatch");
    for (int y : labels)
        if (y < 0 || static_cast<size_t>(y) >= N)
            throw DimError("margin loss: label " + std::to_string(y) +
                           " outside [0, " + std::to_string(N) + ")");

    Tensor probs(n, N);  // softmax rows, kept for the backward rule
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double mx = -HUGE_VAL;
        for (size_t j = 0; j < N; ++j)
            mx = std::max(mx, tau * (logits.at(i, j) + offsets.at(i, j)));
        double z = 0.0;
        for (size_t j = 0; j < N; ++j) {
            double e = std::exp(tau * (logits.at(i, j) + offsets.at(i, j)) - mx);
            probs.at(i, j) = e;
            z += e;
        }
        for (size_t j = 0; j < N; ++j) probs.at(i, j) /= z;
        size_t y = static_cast<size_t>(labels[i]);
        double uy = tau * (logits.at(i, y) + offsets.at(i, y));
        total += std::log(z) + mx - uy;
    }

    Tensor out(1, 1, logits.requires_grad());
    out.at(0, 0) = total / static_cast<double>(n);
    check_finite(out, "margin loss");
    if (out.requires_grad())
        tape.record([logits = logits, out = out, probs, labels, tau]() mutable {
            if (!out.has_grad()) return;
            double g = out.grad()[0];
            auto& gl = logits.ensure_grad();
            size_t n = logits.rows(), N = logits.cols();
            double scale = g * tau / static_cast<double>(n);
            for (size_t i = 0; i < n; ++i) {
                for (size_t j = 0; j < N; ++j)
                    gl[i * N + j] += scale * probs.at(i, j);
                gl[i * N + static_cast<size_t>(labels[i])] -= scale;
            }
        });
    return out;
}

}  // namespace detail

// Fixed-margin cosine softmax: the margin m is subtracted from the
// ground-truth logit before scaling.
inline Tensor fixed_margin_ce(Tape& tape, const Tensor& logits,
                              const std::vector<int>& labels, double m,
                              double tau) {
    size_t N = logits.cols();
    if (N < 2) throw DimError("fixed_margin_ce: need N >= 2 classes");
    if (labels.size() != logits.rows())
        throw DimError("fixed_margin_ce: label count mismatch");
    Tensor offsets(logits.rows(), N);
    for (size_t i = 0; i < logits.rows(); ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<size_t>(y) >= N)
            throw DimError("fixed_margin_ce: label " + std::to_string(y) +
                           " outside [0, " + std::to_string(N) + ")");
        offsets.at(i, static_cast<size_t>(y)) = -m;
    }
    return detail::offset_cross_entropy(tape, logits, labels, offsets, tau);
}

// Per-pair margin softmax: the margin moves from the ground-truth logit to
// every other logit, margins[y][j] added to logit j of a sample labelled y.
// The margin matrix is a constant; no gradient flows through it.
inline Tensor logit_margin_ce(Tape& tape, const Tensor& logits,
                              const std::vector<int>& labels,
                              const Tensor& margins, double tau) {
    size_t N = logits.cols();
    if (margins.rows() != N || margins.cols() != N)
        throw DimError("logit_margin_ce: margin matrix must be " +
                       std::to_string(N) + "x" + std::to_string(N));
    if (labels.size() != logits.rows())
        throw DimError("logit_margin_ce: label count mismatch");
    Tensor offsets(logits.rows(), N);
    for (size_t i = 0; i < logits.rows(); ++i) {
        size_t y = static_cast<size_t>(labels[i]);
        if (y >= N)
            throw DimError("logit_margin_ce: label outside margin matrix");
        for (size_t j = 0; j < N; ++j)
            if (j != y) offsets.at(i, j) = margins.at(y, j);
    }
    return detail::offset_cross_entropy(tape, logits, labels, offsets, tau);
}

// Linear interpolation from a class relation to a margin, anchored at
// (a_ave -> m_ave) and (1 -> m_upper).
inline double relation_margin_map(double a_ij, double m_ave, double m_upper,
                                  double a_ave) {
    if (std::fabs(1.0 - a_ave) < 1e-6)
        throw NumericError(
            "relation_margin_map: degenerate class relations (a_ave ~ 1)");
    return m_ave + (m_upper - m_ave) / (1.0 - a_ave) * (a_ij - a_ave);
}

// Pairwise class cosines from classifier columns; a_ave is the mean over
// the N(N-1) off-diagonal entries.
inline AdjacencyMatrix adjacency_from_weights(const Tensor& W) {
    size_t d = W.rows(), N = W.cols();
    if (N < 2) throw DimError("adjacency_from_weights: need N >= 2 columns");
    std::vector<double> norms(N);
    for (size_t j = 0; j < N; ++j) {
        double s = 0.0;
        for (size_t i = 0; i < d; ++i) s += W.at(i, j) * W.at(i, j);
        norms[j] = std::sqrt(s);
        if (!(norms[j] > 1e-12))
            throw NumericError("adjacency_from_weights: near-zero column " +
                               std::to_string(j));
    }
    AdjacencyMatrix A;
    A.values = Tensor(N, N);
    double off_sum = 0.0;
    for (size_t j = 0; j < N; ++j) {
        A.values.at(j, j) = 1.0;
        for (size_t k = j + 1; k < N; ++k) {
            double dot = 0.0;
            for (size_t i = 0; i < d; ++i) dot += W.at(i, j) * W.at(i, k);
            double c = dot / (norms[j] * norms[k]);
            A.values.at(j, k) = c;
            A.values.at(k, j) = c;
            off_sum += 2.0 * c;
        }
    }
    A.a_ave = off_sum / (static_cast<double>(N) * static_cast<double>(N - 1));
    return A;
}

// Margin matrix for logit_margin_ce: entry (i, j) = m(A_ij) for i != j,
// diagonal left at 0 (unused).
inline Tensor build_margin_matrix(const AdjacencyMatrix& A, const MarginSpec& spec) {
    spec.validate();
    size_t N = A.n();
    Tensor m(N, N);
    for (size_t i = 0; i < N; ++i)
        for (size_t j = 0; j < N; ++j)
            if (i != j)
                m.at(i, j) = relation_margin_map(A.values.at(i, j), spec.m_ave,
                                                 spec.m_upper, A.a_ave);
    return m;
}

// Combined objective: relation-mapped margin loss on the NM branch plus
// lambda times the same on the PM branch.
inline Tensor clom_loss(Tape& tape, const Tensor& f_logits, const Tensor& F_logits,
                        const std::vector<int>& labels, const AdjacencyMatrix& A_nm,
                        const AdjacencyMatrix& A_pm, const MarginSpec& nm_spec,
                        const MarginSpec& pm_spec) {
    if (f_logits.rows() != F_logits.rows())
        throw DimError("clom_loss: branch batch sizes differ");
    Tensor m_nm = build_margin_matrix(A_nm, nm_spec);
    Tensor m_pm = build_margin_matrix(A_pm, pm_spec);
    Tensor l_nm = logit_margin_ce(tape, f_logits, labels, m_nm, nm_spec.tau);
    Tensor l_pm = logit_margin_ce(tape, F_logits, labels, m_pm, pm_spec.tau);
    return tape.add(l_nm, tape.scale(l_pm, pm_spec.lambda_pm));
}

}  // namespace clom
