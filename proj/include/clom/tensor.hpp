#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "clom/errors.hpp"
#include "clom/rng.hpp"

namespace clom {

// Dense rank-<=2 tensor of 64-bit reals, row-major. Copies share storage
// (handle semantics, like the usual framework tensors); use clone() for a
// deep copy. Gradients live next to the data and are allocated lazily on
// first accumulation.
class Tensor {
public:
    Tensor() : d_(std::make_shared<Data>()) {}

    Tensor(size_t rows, size_t cols, bool requires_grad = false)
        : d_(std::make_shared<Data>()) {
        d_->rows = rows;
        d_->cols = cols;
        d_->values.assign(rows * cols, 0.0);
        d_->requires_grad = requires_grad;
    }

    static Tensor from_vec(size_t rows, size_t cols, std::vector<double> v,
                           bool requires_grad = false) {
        if (v.size() != rows * cols)
            throw DimError("Tensor::from_vec: data length != rows*cols");
        Tensor t(rows, cols, requires_grad);
        t.d_->values = std::move(v);
        return t;
    }

    static Tensor from(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
        size_t r = rows.size();
        size_t c = r ? rows.begin()->size() : 0;
        Tensor t(r, c, requires_grad);
        size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw DimError("Tensor::from: ragged rows");
            for (double v : row) t.d_->values[i++] = v;
        }
        return t;
    }

    static Tensor full(size_t rows, size_t cols, double v) {
        Tensor t(rows, cols);
        t.d_->values.assign(rows * cols, v);
        return t;
    }

    static Tensor zeros(size_t rows, size_t cols) { return Tensor(rows, cols); }

    static Tensor identity(size_t n) {
        Tensor t(n, n);
        for (size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    size_t rows() const { return d_->rows; }
    size_t cols() const { return d_->cols; }
    size_t size() const { return d_->values.size(); }

    double& at(size_t i, size_t j) { return d_->values[i * d_->cols + j]; }
    double at(size_t i, size_t j) const { return d_->values[i * d_->cols + j]; }

    std::vector<double>& data() { return d_->values; }
    const std::vector<double>& data() const { return d_->values; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    bool has_grad() const { return !d_->grad.empty(); }

    std::vector<double>& grad() {
        if (d_->grad.empty())
            throw NumericError("Tensor::grad: no gradient accumulated");
        return d_->grad;
    }
    const std::vector<double>& grad() const {
        return const_cast<Tensor*>(this)->grad();
    }

    std::vector<double>& ensure_grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
        return d_->grad;
    }

    void zero_grad() {
        if (!d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
    }

    Tensor clone() const {
        Tensor t(rows(), cols(), requires_grad());
        t.d_->values = d_->values;
        return t;
    }

    // Value copy that is cut off from any gradient bookkeeping.
    Tensor detached() const {
        Tensor t(rows(), cols(), false);
        t.d_->values = d_->values;
        return t;
    }

    // Stable identity of the underlying storage; used for optimizer state
    // and for checking two handles alias the same tensor.
    const void* id() const { return d_.get(); }

    bool same_shape(const Tensor& o) const {
        return rows() == o.rows() && cols() == o.cols();
    }

private:
    struct Data {
        size_t rows = 0, cols = 0;
        std::vector<double> values;
        bool requires_grad = false;
        std::vector<double> grad;
    };
    std::shared_ptr<Data> d_;
};

inline void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": non-finite value produced");
}

inline std::string shape_str(const Tensor& t) {
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

// He-style scaled normal initialization for a dense weight of shape
// fan_in x fan_out.
inline Tensor he_normal(size_t fan_in, size_t fan_out, Rng& rng) {
    Tensor t(fan_in, fan_out, true);
    double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = scale * rng.next_normal();
    return t;
}

enum class Mode { Train, Eval };

// Reverse-mode tape. Operations are recorded in execution order, which is a
// topological order by construction (single-threaded graph building), and
// backward() replays the recorded closures in reverse, accumulating
// gradients additively into every requires_grad tensor.
class Tape {
public:
    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.cols() != b.rows())
            throw DimError("matmul: inner dimensions disagree (" + shape_str(a) +
                           " * " + shape_str(b) + ")");
        size_t n = a.rows(), k = a.cols(), m = b.cols();
        Tensor out(n, m, a.requires_grad() || b.requires_grad());
        for (size_t i = 0; i < n; ++i)
            for (size_t p = 0; p < k; ++p) {
                double av = a.at(i, p);
                if (av == 0.0) continue;
                for (size_t j = 0; j < m; ++j) out.at(i, j) += av * b.at(p, j);
            }
        check_finite(out, "matmul");
        if (out.requires_grad())
            record([a = a, b = b, out = out]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                size_t n = a.rows(), k = a.cols(), m = b.cols();
                if (a.requires_grad()) {
                    auto& ga = a.ensure_grad();
                    for (size_t i = 0; i < n; ++i)
                        for (size_t p = 0; p < k; ++p) {
                            double s = 0.0;
                            for (size_t j = 0; j < m; ++j)
                                s += g[i * m + j] * b.at(p, j);
                            ga[i * k + p] += s;
                        }
                }
                if (b.requires_grad()) {
                    auto& gb = b.ensure_grad();
                    for (size_t p = 0; p < k; ++p)
                        for (size_t j = 0; j < m; ++j) {
                            double s = 0.0;
                            for (size_t i = 0; i < n; ++i)
                                s += a.at(i, p) * g[i * m + j];
                            gb[p * m + j] += s;
                        }
                }
            });
        return out;
    }

    Tensor transpose(const Tensor& x) {
        Tensor out(x.cols(), x.rows(), x.requires_grad());
        for (size_t i = 0; i < x.rows(); ++i)
            for (size_t j = 0; j < x.cols(); ++j) out.at(j, i) = x.at(i, j);
        if (out.requires_grad())
            record([x = x, out = out]() mutable {
                if (!out.has_grad()) return;
                auto& gx = x.ensure_grad();
                size_t r = x.rows(), c = x.cols();
                const auto& g = out.grad();
                for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
            });
        return out;
    }

    Tensor add(const Tensor& a, const Tensor& b) {
        if (!a.same_shape(b))
            throw DimError("add: shape mismatch (" + shape_str(a) + " vs " +
                           shape_str(b) + ")");
        Tensor out(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
        for (size_t i = 0; i < a.size(); ++i)
            out.data()[i] = a.data()[i] + b.data()[i];
        check_finite(out, "add");
        if (out.requires_grad())
            record([a = a, b = b, out = out]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.ensure_grad();
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.ensure_grad();
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
            });
        return out;
    }

    // x: n x d, r: 1 x d, broadcast over rows
    Tensor add_rowvec(const Tensor& x, const Tensor& r) {
        if (r.rows() != 1 || r.cols() != x.cols())
            throw DimError("add_rowvec: bias must be 1x" + std::to_string(x.cols()) +
                           ", got " + shape_str(r));
        Tensor out(x.rows(), x.cols(), x.requires_grad() || r.requires_grad());
        for (size_t i = 0; i < x.rows(); ++i)
            for (size_t j = 0; j < x.cols(); ++j)
                out.at(i, j) = x.at(i, j) + r.at(0, j);
        check_finite(out, "add_rowvec");
        if (out.requires_grad())
            record([x = x, r = r, out = out]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                size_t n = x.rows(), d = x.cols();
                if (x.requires_grad()) {
                    auto& gx = x.ensure_grad();
                    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                }
                if (r.requires_grad()) {
                    auto& gr = r.ensure_grad();
                    for (size_t i = 0; i < n; ++i)
                        for (size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
                }
            });
        return out;
    }

    Tensor mul(const Tensor& a, const Tensor& b) {
        if (!a.same_shape(b))
            throw DimError("mul: shape mismatch (" + shape_str(a) + " vs " +
                           shape_str(b) + ")");
        Tensor out(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
        for (size_t i = 0; i < a.size(); ++i)
            out.data()[i] = a.data()[i] * b.data()[i];
        check_finite(out, "mul");
        if (out.requires_grad())
            record([a = a, b = b, out = out]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.ensure_grad();
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.ensure_grad();
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
                }
            });
        return out;
    }

    Tensor scale(const Tensor& x, double s) {
        Tensor out(x.rows(), x.cols(), x.requires_grad());
        for (size_t i = 0; i < x.size(); ++i) out.data()[i] = s * x.data()[i];
        check_finite(out, "scale");
        if (out.requires_grad())
            record([x = x, out = out, s]() mutable {
                if (!out.has_grad()) return;
                auto& gx = x.ensure_grad();
                const auto& g = out.grad();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
            });
        return out;
    }

    Tensor relu(const Tensor& x) {
        Tensor out(x.rows(), x.cols(), x.requires_grad());
        for (size_t i = 0; i < x.size(); ++i)
            out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
        if (out.requires_grad())
            record([x = x, out = out]() mutable {
                if (!out.has_grad()) return;
                auto& gx = x.ensure_grad();
                const auto& g = out.grad();
                for (size_t i = 0; i < g.size(); ++i)
                    if (x.data()[i] > 0.0) gx[i] += g[i];
            });
        return out;
    }

    // Row-wise L2 normalization. Rows with norm below `floor` are rejected.
    Tensor l2_normalize(const Tensor& x, double floor = 1e-12) {
        size_t n = x.rows(), d = x.cols();
        Tensor out(n, d, x.requires_grad());
        std::vector<double> norms(n);
        for (size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < d; ++j) s += x.at(i, j) * x.at(i, j);
            double r = std::sqrt(s);
            if (!(r > floor))
                throw NumericError("l2_normalize: row " + std::to_string(i) +
                                   " has degenerate norm");
            norms[i] = r;
            for (size_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) / r;
        }
        check_finite(out, "l2_normalize");
        if (out.requires_grad())
            record([x = x, out = out, norms]() mutable {
                if (!out.has_grad()) return;
                auto& gx = x.ensure_grad();
                const auto& g = out.grad();
                size_t n = x.rows(), d = x.cols();
                for (size_t i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (size_t j = 0; j < d; ++j)
                        dot += out.at(i, j) * g[i * d + j];
                    for (size_t j = 0; j < d; ++j)
                        gx[i * d + j] +=
                            (g[i * d + j] - out.at(i, j) * dot) / norms[i];
                }
            });
        return out;
    }

    // Like l2_normalize, but rows at or below the floor pass through as
    // zeros (and receive no gradient) instead of raising. Model forwards use
    // this form: a head activation can zero out an entire row, and a
    // zero-feature sample should score zero everywhere rather than abort
    // the run.
    Tensor l2_normalize_clamped(const Tensor& x, double floor = 1e-12) {
        size_t n = x.rows(), d = x.cols();
        Tensor out(n, d, x.requires_grad());
        std::vector<double> norms(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < d; ++j) s += x.at(i, j) * x.at(i, j);
            double r = std::sqrt(s);
            if (r > floor) {
                norms[i] = r;
                for (size_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) / r;
            }
        }
        check_finite(out, "l2_normalize_clamped");
        if (out.requires_grad())
            record([x = x, out = out, norms]() mutable {
                if (!out.has_grad()) return;
                auto& gx = x.ensure_grad();
                const auto& g = out.grad();
                size_t n = x.rows(), d = x.cols();
                for (size_t i = 0; i < n; ++i) {
                    if (norms[i] == 0.0) continue;
                    double dot = 0.0;
                    for (size_t j = 0; j < d; ++j)
                        dot += out.at(i, j) * g[i * d + j];
                    for (size_t j = 0; j < d; ++j)
                        gx[i * d + j] +=
                            (g[i * d + j] - out.at(i, j) * dot) / norms[i];
                }
            });
        return out;
    }

    Tensor sum(const Tensor& x) {
        Tensor out(1, 1, x.requires_grad());
        double s = 0.0;
        for (double v : x.data()) s += v;
        out.at(0, 0) = s;
        check_finite(out, "sum");
        if (out.requires_grad())
            record([x = x, out = out]() mutable {
                if (!out.has_grad()) return;
                auto& gx = x.ensure_grad();
                double g = out.grad()[0];
                for (double& v : gx) v += g;
            });
        return out;
    }

    Tensor mean(const Tensor& x) {
        if (x.size() == 0) throw DimError("mean: empty tensor");
        Tensor out(1, 1, x.requires_grad());
        double s = 0.0;
        for (double v : x.data()) s += v;
        out.at(0, 0) = s / static_cast<double>(x.size());
        check_finite(out, "mean");
        if (out.requires_grad())
            record([x = x, out = out]() mutable {
                if (!out.has_grad()) return;
                auto& gx = x.ensure_grad();
                double g = out.grad()[0] / static_cast<double>(x.size());
                for (double& v : gx) v += g;
            });
        return out;
    }

    Tensor concat_cols(const Tensor& a, const Tensor& b) {
        if (a.rows() != b.rows())
            throw DimError("concat_cols: row counts differ (" + shape_str(a) +
                           " vs " + shape_str(b) + ")");
        size_t n = a.rows(), p = a.cols(), q = b.cols();
        Tensor out(n, p + q, a.requires_grad() || b.requires_grad());
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = 0; j < p; ++j) out.at(i, j) = a.at(i, j);
            for (size_t j = 0; j < q; ++j) out.at(i, p + j) = b.at(i, j);
        }
        if (out.requires_grad())
            record([a = a, b = b, out = out]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                size_t n = a.rows(), p = a.cols(), q = b.cols();
                if (a.requires_grad()) {
                    auto& ga = a.ensure_grad();
                    for (size_t i = 0; i < n; ++i)
                        for (size_t j = 0; j < p; ++j)
                            ga[i * p + j] += g[i * (p + q) + j];
                }
                if (b.requires_grad()) {
                    auto& gb = b.ensure_grad();
                    for (size_t i = 0; i < n; ++i)
                        for (size_t j = 0; j < q; ++j)
                            gb[i * q + j] += g[i * (p + q) + p + j];
                }
            });
        return out;
    }

    // y = xW + b, bias broadcast over rows.
    Tensor dense(const Tensor& x, const Tensor& W, const Tensor& b) {
        return add_rowvec(matmul(x, W), b);
    }

    // Batch normalization over columns. Train mode standardizes by batch
    // statistics (variance denominator n, biased) and updates the running
    // buffers in place with the given momentum; eval mode standardizes by
    // the running buffers. running_mean/var must not require grad.
    Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     Tensor& running_mean, Tensor& running_var, Mode mode,
                     double eps, double momentum) {
        size_t n = x.rows(), d = x.cols();
        if (n == 0) throw DimError("batchnorm: empty batch");
        if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 ||
            beta.cols() != d)
            throw DimError("batchnorm: gamma/beta must be 1x" + std::to_string(d));
        if (running_mean.cols() != d || running_var.cols() != d)
            throw DimError("batchnorm: running stats width mismatch");
        if (running_mean.requires_grad() || running_var.requires_grad())
            throw DimError("batchnorm: running stats must not require grad");

        std::vector<double> mu(d), var(d);
        if (mode == Mode::Train) {
            for (size_t j = 0; j < d; ++j) {
                double m = 0.0;
                for (size_t i = 0; i < n; ++i) m += x.at(i, j);
                m /= static_cast<double>(n);
                double v = 0.0;
                for (size_t i = 0; i < n; ++i) {
                    double c = x.at(i, j) - m;
                    v += c * c;
                }
                v /= static_cast<double>(n);
                mu[j] = m;
                var[j] = v;
                running_mean.at(0, j) = momentum * running_mean.at(0, j) + (1.0 - momentum) * m;
                running_var.at(0, j) = momentum * running_var.at(0, j) + (1.0 - momentum) * v;
            }
        } else {
            for (size_t j = 0; j < d; ++j) {
                mu[j] = running_mean.at(0, j);
                var[j] = running_var.at(0, j);
            }
        }

        Tensor xhat(n, d);
        std::vector<double> inv_std(d);
        for (size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j)
                xhat.at(i, j) = (x.at(i, j) - mu[j]) * inv_std[j];

        bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Tensor out(n, d, rg);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j)
                out.at(i, j) = gamma.at(0, j) * xhat.at(i, j) + beta.at(0, j);
        check_finite(out, "batchnorm");

        if (rg)
            record([x = x, gamma = gamma, beta = beta, out = out, xhat, inv_std, mode]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                size_t n = x.rows(), d = x.cols();
                if (gamma.requires_grad()) {
                    auto& gg = gamma.ensure_grad();
                    for (size_t j = 0; j < d; ++j) {
                        double s = 0.0;
                        for (size_t i = 0; i < n; ++i)
                            s += g[i * d + j] * xhat.at(i, j);
                        gg[j] += s;
                    }
                }
                if (beta.requires_grad()) {
                    auto& gb = beta.ensure_grad();
                    for (size_t j = 0; j < d; ++j) {
                        double s = 0.0;
                        for (size_t i = 0; i < n; ++i) s += g[i * d + j];
                        gb[j] += s;
                    }
                }
                if (x.requires_grad()) {
                    auto& gx = x.ensure_grad();
                    if (mode == Mode::Train) {
                        // dL/dx through batch statistics (biased variance)
                        for (size_t j = 0; j < d; ++j) {
                            double sum_g = 0.0, sum_gx = 0.0;
                            for (size_t i = 0; i < n; ++i) {
                                double gh = g[i * d + j] * gamma.at(0, j);
                                sum_g += gh;
                                sum_gx += gh * xhat.at(i, j);
                            }
                            double inv_n = 1.0 / static_cast<double>(n);
                            for (size_t i = 0; i < n; ++i) {
                                double gh = g[i * d + j] * gamma.at(0, j);
                                gx[i * d + j] +=
                                    inv_std[j] * (gh - inv_n * sum_g -
                                                  xhat.at(i, j) * inv_n * sum_gx);
                            }
                        }
                    } else {
                        for (size_t i = 0; i < n; ++i)
                            for (size_t j = 0; j < d; ++j)
                                gx[i * d + j] +=
                                    g[i * d + j] * gamma.at(0, j) * inv_std[j];
                    }
                }
            });
        return out;
    }

    // Record a custom node (used by the loss functions).
    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    size_t size() const { return nodes_.size(); }

    // Seed d(loss)/d(loss) = 1 and replay recorded nodes in reverse. The
    // tape is consumed: nodes are discarded afterwards.
    void backward(Tensor loss) {
        if (loss.rows() != 1 || loss.cols() != 1)
            throw DimError("backward: loss must be a 1x1 scalar");
        loss.ensure_grad()[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

}  // namespace clom
