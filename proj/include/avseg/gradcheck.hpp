#pragma once

// Central finite-difference checks of reverse-mode gradients.

#include <functional>
#include <string>
#include <vector>

#include "avseg/model.hpp"
#include "avseg/nn.hpp"

namespace avseg {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Below this norm on both sides, the absolute difference is compared instead.
    double tiny = 1e-7;
};

struct TensorCheck {
    std::string name;
    std::size_t entries = 0;
    double error = 0.0;  // relative unless both gradients are tiny
    bool relative = true;
};

struct GradCheckResult {
    std::string name;
    std::vector<TensorCheck> tensors;
    double max_error = 0.0;
    bool passed = false;
    double seconds = 0.0;
};

// ||a - n|| / max(||a||, ||n||) for analytic a and numeric n, falling back to
// ||a - n|| when both norms are below opts.tiny.
TensorCheck compare_gradients(const std::string& name, const std::vector<double>& analytic,
                              const std::vector<double>& numeric, const GradCheckOptions& opts);

// Perturbs every entry of every input in place and compares the central
// difference of loss() with the gradient from one backward pass.
GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss,
                                const NamedTensors& inputs, const GradCheckOptions& opts = {});

// Model configuration used by the full-model check.
ModelConfig gradcheck_model_config();

// Every differentiable primitive, block, loss and the full model at toy size.
std::vector<GradCheckResult> run_gradcheck_suite(
    const GradCheckOptions& opts = {}, const std::function<void(const GradCheckResult&)>& progress = {});

}  // namespace avseg
