#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "clom/errors.hpp"
#include "clom/tensor.hpp"

namespace clom {

// Central finite differences of a scalar function of one tensor. This is
// the oracle every analytic gradient in the library is checked against; it
// only ever calls the forward path.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& fn,
                                     const Tensor& x, double h = 1e-5) {
    if (!(h > 0.0)) throw ConfigError("finite_difference_grad: h must be > 0");
    Tensor g(x.rows(), x.cols());
    for (size_t i = 0; i < x.size(); ++i) {
        Tensor hi = x.detached();
        Tensor lo = x.detached();
        hi.data()[i] += h;
        lo.data()[i] -= h;
        g.data()[i] = (fn(hi) - fn(lo)) / (2.0 * h);
    }
    return g;
}

// Worst-case relative error between two gradients, with an absolute floor
// of 1 in the denominator so near-zero entries compare absolutely.
inline double max_rel_error(const std::vector<double>& a,
                            const std::vector<double>& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double denom = std::max({1.0, std::fabs(a[i]), std::fabs(b[i])});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

}  // namespace clom
