#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "clom/errors.hpp"
#include "clom/tensor.hpp"

namespace clom {

struct SgdConfig {
    double learning_rate = 0.1;
    double momentum = 0.0;
    double weight_decay = 0.0;
    std::vector<size_t> decay_epochs;  // strictly increasing
    double decay_factor = 1.0;         // multiplier applied at each decay epoch

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("sgd: learning_rate must be > 0");
        if (momentum < 0.0 || momentum >= 1.0)
            throw ConfigError("sgd: momentum must be in [0, 1)");
        if (weight_decay < 0.0) throw ConfigError("sgd: weight_decay must be >= 0");
        if (!(decay_factor > 0.0 && decay_factor <= 1.0))
            throw ConfigError("sgd: decay_factor must be in (0, 1]");
        for (size_t i = 1; i < decay_epochs.size(); ++i)
            if (decay_epochs[i] <= decay_epochs[i - 1])
                throw ConfigError("sgd: decay_epochs must be strictly increasing");
    }
};

inline double lr_at_epoch(const SgdConfig& cfg, size_t epoch) {
    double lr = cfg.learning_rate;
    for (size_t e : cfg.decay_epochs)
        if (epoch >= e) lr *= cfg.decay_factor;
    return lr;
}

// Momentum SGD. velocity = momentum * velocity + grad + weight_decay * param;
// param -= lr(epoch) * velocity. Parameters without an accumulated gradient
// are skipped.
class SgdOptimizer {
public:
    explicit SgdOptimizer(SgdConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    const SgdConfig& config() const { return cfg_; }

    void step(std::vector<Tensor>& params, size_t epoch) {
        double lr = lr_at_epoch(cfg_, epoch);
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            const auto& g = p.grad();
            auto& v = velocity_[p.id()];
            if (v.size() != p.size()) v.assign(p.size(), 0.0);
            auto& w = p.data();
            for (size_t i = 0; i < w.size(); ++i) {
                v[i] = cfg_.momentum * v[i] + g[i] + cfg_.weight_decay * w[i];
                w[i] -= lr * v[i];
            }
            check_finite(p, "sgd_step");
        }
    }

private:
    SgdConfig cfg_;
    std::unordered_map<const void*, std::vector<double>> velocity_;
};

}  // namespace clom
