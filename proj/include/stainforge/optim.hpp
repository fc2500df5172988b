#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "stainforge/tensor.hpp"

namespace stainforge {

struct AdamConfig {
    double lr = 3e-5;          // paper default
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t warmup_steps = 100;  // paper default
    // Exponential decay over this many steps; trainers default it to the run
    // length. 0 disables decay.
    int64_t decay_horizon = 0;
    double decay_ratio = 0.1;  // lr multiplier reached at the horizon
};

// lr(step) = base * min(step/warmup, 1) * ratio^(min(step,horizon)/horizon)
inline double effective_lr(const AdamConfig& cfg, int64_t step) {
    double lr = cfg.lr;
    if (cfg.warmup_steps > 0)
        lr *= std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
    if (cfg.decay_horizon > 0) {
        double frac = std::min<double>(step, cfg.decay_horizon) /
                      static_cast<double>(cfg.decay_horizon);
        lr *= std::pow(cfg.decay_ratio, frac);
    }
    return lr;
}

template <class T>
struct OptimizerState {
    int64_t step = 0;
    std::vector<std::vector<T>> m;  // first moments, aligned with params
    std::vector<std::vector<T>> v;  // second moments
};

template <class T>
class Adam {
  public:
    Adam(std::vector<Tensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        state_.m.resize(params_.size());
        state_.v.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            state_.m[i].assign(params_[i].numel(), T(0));
            state_.v[i].assign(params_[i].numel(), T(0));
        }
    }

    const AdamConfig& config() const { return cfg_; }
    OptimizerState<T>& state() { return state_; }
    const OptimizerState<T>& state() const { return state_; }
    std::vector<Tensor<T>>& params() { return params_; }

    double current_lr() const { return effective_lr(cfg_, state_.step); }

    void step() {
        state_.step += 1;
        const double lr = effective_lr(cfg_, state_.step);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(state_.step));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(state_.step));
        for (size_t p = 0; p < params_.size(); ++p) {
            Tensor<T>& param = params_[p];
            if (!param.has_grad()) continue;  // untouched this step
            auto g = param.grad();
            auto vals = param.data();
            auto& m = state_.m[p];
            auto& v = state_.v[p];
            for (size_t i = 0; i < vals.size(); ++i) {
                T gi = g[i];
                if (!std::isfinite(static_cast<double>(gi)))
                    throw NumericError("adam_step: non-finite gradient encountered");
                m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
                v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                vals[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

  private:
    std::vector<Tensor<T>> params_;
    AdamConfig cfg_;
    OptimizerState<T> state_;
};

}  // namespace stainforge
