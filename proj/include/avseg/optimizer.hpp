#pragma once

#include <string>
#include <vector>

#include "avseg/nn.hpp"

namespace avseg {

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias-corrected moments and decoupled weight decay:
//   x <- x - lr * (m_hat / (sqrt(v_hat) + eps) + wd * x)
class AdamW {
public:
    AdamW(NamedTensors params, const AdamWConfig& cfg);

    // Uses each parameter's current gradient (missing gradients count as zero).
    void step();
    void zero_grad();

    std::size_t steps_taken() const { return t_; }
    const NamedTensors& params() const { return params_; }
    const AdamWConfig& config() const { return cfg_; }

    // Moment buffers in parameter order, for checkpoints.
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    void set_steps_taken(std::size_t t) { t_ = t; }

private:
    NamedTensors params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace avseg
