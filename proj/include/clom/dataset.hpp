#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "clom/errors.hpp"
#include "clom/rng.hpp"
#include "clom/tensor.hpp"

namespace clom {

// Synthetic Gaussian-mixture dataset with controllable class relations:
// classes live in groups, and the within/between-group fields set the exact
// cosine similarity between class mean directions.
struct SyntheticSpec {
    size_t n_groups = 4;
    size_t classes_per_group = 5;
    size_t dim = 32;
    double within_group_angle = 0.6;   // cosine between means in one group
    double between_group_angle = 0.1;  // cosine between means across groups
    double noise_sigma = 0.3;
    size_t train_per_class = 100;
    size_t test_per_class = 40;
    uint64_t seed = 1;

    size_t n_classes() const { return n_groups * classes_per_group; }

    void validate() const {
        if (n_groups == 0 || classes_per_group == 0)
            throw ConfigError("synthetic: group counts must be > 0");
        if (!(noise_sigma > 0.0))
            throw ConfigError("synthetic: noise_sigma must be > 0");
        if (train_per_class == 0 || test_per_class == 0)
            throw ConfigError("synthetic: per-class sample counts must be > 0");
        if (within_group_angle < 0.0 || within_group_angle > 1.0)
            throw ConfigError("synthetic: within_group_angle must be in [0, 1]");
        if (between_group_angle < 0.0 || between_group_angle > within_group_angle)
            throw ConfigError(
                "synthetic: infeasible angle structure, need 0 <= between <= within");
        // mean construction spans 1 + n_groups + n_classes orthonormal directions
        if (dim < 1 + n_groups + n_classes())
            throw ConfigError(
                "synthetic: infeasible angle structure, dim must be >= 1 + "
                "n_groups + n_classes");
    }
};

struct Dataset {
    size_t dim = 0;
    Tensor train_x;
    std::vector<int> train_y;
    Tensor test_x;
    std::vector<int> test_y;
    Tensor class_means;  // one row per class id, present for generated data
    bool has_means = false;

    size_t n_classes() const {
        int top = -1;
        for (int y : train_y) top = std::max(top, y);
        return static_cast<size_t>(top + 1);
    }
};

namespace detail {

// Orthonormal set of `count` vectors in R^dim from seeded Gaussian draws,
// modified Gram-Schmidt with one re-orthogonalization pass.
inline std::vector<std::vector<double>> orthonormal_set(size_t count, size_t dim,
                                                        Rng& rng) {
    std::vector<std::vector<double>> basis;
    while (basis.size() < count) {
        std::vector<double> v(dim);
        for (double& e : v) e = rng.next_normal();
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& u : basis) {
                double dot = 0.0;
                for (size_t i = 0; i < dim; ++i) dot += v[i] * u[i];
                for (size_t i = 0; i < dim; ++i) v[i] -= dot * u[i];
            }
        double norm = 0.0;
        for (double e : v) norm += e * e;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue;  // essentially impossible; redraw
        for (double& e : v) e /= norm;
        basis.push_back(std::move(v));
    }
    return basis;
}

}  // namespace detail

// Class means: mu_{g,c} = a*(alpha*w + gamma*t_g) + b*v_{g,c} over an
// orthonormal frame {w, t_g, v_{g,c}}, with a^2 = within, a^2*alpha^2 =
// between. Same-group means then have cosine exactly `within`, cross-group
// means exactly `between`. Samples are mean + sigma * N(0, I).
inline Dataset gen_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    Rng basis_rng = rng.split(1);
    Rng sample_rng = rng.split(2);

    size_t G = spec.n_groups, C = spec.classes_per_group, D = spec.dim;
    size_t n_classes = G * C;
    auto frame = detail::orthonormal_set(1 + G + n_classes, D, basis_rng);
    const auto& w = frame[0];

    double a = std::sqrt(spec.within_group_angle);
    double b = std::sqrt(1.0 - spec.within_group_angle);
    double alpha =
        spec.within_group_angle > 0.0
            ? std::sqrt(spec.between_group_angle / spec.within_group_angle)
            : 0.0;
    double gamma = std::sqrt(std::max(0.0, 1.0 - alpha * alpha));

    Dataset ds;
    ds.dim = D;
    ds.class_means = Tensor(n_classes, D);
    ds.has_means = true;
    for (size_t g = 0; g < G; ++g) {
        const auto& t_g = frame[1 + g];
        for (size_t c = 0; c < C; ++c) {
            const auto& v = frame[1 + G + g * C + c];
            size_t cid = g * C + c;
            for (size_t i = 0; i < D; ++i)
                ds.class_means.at(cid, i) =
                    a * (alpha * w[i] + gamma * t_g[i]) + b * v[i];
        }
    }

    size_t n_train = n_classes * spec.train_per_class;
    size_t n_test = n_classes * spec.test_per_class;
    ds.train_x = Tensor(n_train, D);
    ds.test_x = Tensor(n_test, D);
    ds.train_y.reserve(n_train);
    ds.test_y.reserve(n_test);
    size_t tr = 0, te = 0;
    for (size_t cid = 0; cid < n_classes; ++cid) {
        for (size_t s = 0; s < spec.train_per_class; ++s, ++tr) {
            for (size_t i = 0; i < D; ++i)
                ds.train_x.at(tr, i) =
                    ds.class_means.at(cid, i) + spec.noise_sigma * sample_rng.next_normal();
            ds.train_y.push_back(static_cast<int>(cid));
        }
        for (size_t s = 0; s < spec.test_per_class; ++s, ++te) {
            for (size_t i = 0; i < D; ++i)
                ds.test_x.at(te, i) =
                    ds.class_means.at(cid, i) + spec.noise_sigma * sample_rng.next_normal();
            ds.test_y.push_back(static_cast<int>(cid));
        }
    }
    return ds;
}

// Bayes-optimal classification accuracy of the generating mixture: equal
// priors and isotropic noise make the nearest generating mean optimal.
inline double nearest_mean_accuracy(const Tensor& x, const std::vector<int>& y,
                                    const Tensor& means) {
    if (x.rows() == 0) throw DimError("nearest_mean_accuracy: no samples");
    size_t correct = 0;
    for (size_t i = 0; i < x.rows(); ++i) {
        double best = HUGE_VAL;
        size_t best_c = 0;
        for (size_t c = 0; c < means.rows(); ++c) {
            double d2 = 0.0;
            for (size_t j = 0; j < x.cols(); ++j) {
                double diff = x.at(i, j) - means.at(c, j);
                d2 += diff * diff;
            }
            if (d2 < best) {
                best = d2;
                best_c = c;
            }
        }
        if (static_cast<int>(best_c) == y[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(x.rows());
}

// ---- dataset files ----
// features: magic "CLM1", u32 n, u32 dim, then n*dim little-endian f64
// row-major. labels: CSV with header "index,label".

namespace detail {

inline void write_u32_le(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool read_u32_le(std::istream& is, uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
        (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    return true;
}

inline void write_f64_le(std::ostream& os, double d) {
    uint64_t v;
    static_assert(sizeof(v) == sizeof(d));
    std::memcpy(&v, &d, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool read_f64_le(std::istream& is, double& d) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    std::memcpy(&d, &v, 8);
    return true;
}

}  // namespace detail

inline void write_features_file(const std::string& path, const Tensor& x) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("features: cannot open for writing: " + path);
    os.write("CLM1", 4);
    detail::write_u32_le(os, static_cast<uint32_t>(x.rows()));
    detail::write_u32_le(os, static_cast<uint32_t>(x.cols()));
    for (double v : x.data()) detail::write_f64_le(os, v);
    if (!os) throw IoError("features: write failed: " + path);
}

inline Tensor read_features_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("features: cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "CLM1", 4) != 0)
        throw IoError("features: bad magic in " + path);
    uint32_t n, dim;
    if (!detail::read_u32_le(is, n) || !detail::read_u32_le(is, dim))
        throw IoError("features: truncated header in " + path);
    Tensor x(n, dim);
    for (size_t i = 0; i < x.size(); ++i)
        if (!detail::read_f64_le(is, x.data()[i]))
            throw IoError("features: truncated data in " + path);
    char extra;
    if (is.read(&extra, 1))
        throw IoError("features: trailing bytes in " + path);
    return x;
}

inline void write_labels_file(const std::string& path, const std::vector<int>& y) {
    std::ofstream os(path);
    if (!os) throw IoError("labels: cannot open for writing: " + path);
    os << "index,label\n";
    for (size_t i = 0; i < y.size(); ++i) os << i << "," << y[i] << "\n";
    if (!os) throw IoError("labels: write failed: " + path);
}

inline std::vector<int> read_labels_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("labels: cannot open: " + path);
    std::string line;
    if (!std::getline(is, line) || line != "index,label")
        throw IoError("labels: bad header in " + path);
    std::vector<int> y;
    size_t expect = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        size_t comma = line.find(',');
        if (comma == std::string::npos)
            throw IoError("labels: malformed row in " + path);
        try {
            size_t idx = std::stoull(line.substr(0, comma));
            if (idx != expect)
                throw IoError("labels: non-sequential index in " + path);
            y.push_back(std::stoi(line.substr(comma + 1)));
        } catch (const std::logic_error&) {
            throw IoError("labels: malformed row in " + path);
        }
        ++expect;
    }
    return y;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_features_file(dir + "/train_features.bin", ds.train_x);
    write_labels_file(dir + "/train_labels.csv", ds.train_y);
    write_features_file(dir + "/test_features.bin", ds.test_x);
    write_labels_file(dir + "/test_labels.csv", ds.test_y);
    if (ds.has_means) write_features_file(dir + "/means.bin", ds.class_means);
}

inline Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.train_x = read_features_file(dir + "/train_features.bin");
    ds.train_y = read_labels_file(dir + "/train_labels.csv");
    ds.test_x = read_features_file(dir + "/test_features.bin");
    ds.test_y = read_labels_file(dir + "/test_labels.csv");
    if (ds.train_y.size() != ds.train_x.rows())
        throw IoError("dataset: train label/feature count mismatch");
    if (ds.test_y.size() != ds.test_x.rows())
        throw IoError("dataset: test label/feature count mismatch");
    if (ds.test_x.cols() != ds.train_x.cols())
        throw IoError("dataset: train/test dimension mismatch");
    ds.dim = ds.train_x.cols();
    std::string means_path = dir + "/means.bin";
    if (std::filesystem::exists(means_path)) {
        ds.class_means = read_features_file(means_path);
        ds.has_means = true;
    }
    return ds;
}

}  // namespace clom
