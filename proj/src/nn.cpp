#include "avseg/nn.hpp"

#include <cmath>

#include "avseg/ops.hpp"

namespace avseg {

Tensor Linear::operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(join_name(prefix, "weight"), weight);
    if (bias.defined()) fn(join_name(prefix, "bias"), bias);
}

Linear make_linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = rng.uniform_tensor({in, out}, -bound, bound, true);
    if (with_bias) l.bias = Tensor::zeros({out}, true);
    return l;
}

Linear make_zero_linear(std::size_t in, std::size_t out, bool with_bias) {
    Linear l;
    l.weight = Tensor::zeros({in, out}, true);
    if (with_bias) l.bias = Tensor::zeros({out}, true);
    return l;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(join_name(prefix, "gain"), gain);
    fn(join_name(prefix, "bias"), bias);
}

LayerNorm make_layer_norm(std::size_t dim) {
    return LayerNorm{Tensor::ones({dim}, true), Tensor::zeros({dim}, true), 1e-5};
}

}  // namespace avseg
