#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "avseg/rng.hpp"
#include "avseg/tensor.hpp"

namespace avseg {

using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// y = x W + b over the last dimension. W is [in, out].
struct Linear {
    Tensor weight;
    Tensor bias;  // undefined when bias-free

    Tensor operator()(const Tensor& x) const;
    std::size_t in_features() const { return weight.shape()[0]; }
    std::size_t out_features() const { return weight.shape()[1]; }
    void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
Linear make_linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
Linear make_zero_linear(std::size_t in, std::size_t out, bool with_bias = true);

struct LayerNorm {
    Tensor gain;
    Tensor bias;
    double eps = 1e-5;

    Tensor operator()(const Tensor& x) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);
};

LayerNorm make_layer_norm(std::size_t dim);

inline std::string join_name(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace avseg
