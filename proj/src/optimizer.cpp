#include "avseg/optimizer.hpp"

#include <cmath>

#include "avseg/errors.hpp"

namespace avseg {

AdamW::AdamW(NamedTensors params, const AdamWConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.lr > 0)) throw ConfigError("optimizer: learning rate must be positive");
    if (cfg_.weight_decay < 0) throw ConfigError("optimizer: weight decay must be >= 0");
    if (!(cfg_.beta1 >= 0 && cfg_.beta1 < 1 && cfg_.beta2 >= 0 && cfg_.beta2 < 1)) {
        throw ConfigError("optimizer: betas must lie in [0, 1)");
    }
    for (const auto& [name, p] : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        auto x = p.data_mut();
        const bool has = p.has_grad();
        auto g = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double gj = has ? g[j] : 0.0;
            m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            x[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * x[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

}  // namespace avseg
