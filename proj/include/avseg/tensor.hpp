#pragma once

// Dense float64 tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Values are immutable once an
// op has produced them; only gradient buffers (and parameter storage, through
// data_mut()) change afterwards. Graph recording is per thread.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace avseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::vector<double> grad;  // empty until first touched
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::size_t numel() const { return data->size(); }
    std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    // Negative axes count from the end.
    std::size_t size(int axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Direct write access for parameter updates and perturbation tests.
    // Never call this on a tensor that is part of a live graph you still
    // intend to differentiate.
    std::span<double> data_mut();
    std::vector<double> to_vector() const;
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    bool has_grad() const;
    // Empty span when no gradient has been accumulated.
    std::span<const double> grad() const;
    std::vector<double> grad_vector() const;  // zeros when absent
    void zero_grad();

    // Same storage, no history.
    Tensor detach() const;
    // Fresh storage, no history.
    Tensor clone(bool requires_grad = false) const;

    // Accumulates d(this)/d(leaf) into every reachable leaf that requires
    // grad. Only valid on single-element tensors.
    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Counts floating-point work issued by ops on the current thread while alive.
// Nested counters each see the work done during their own lifetime.
class FlopCounter {
public:
    FlopCounter();
    ~FlopCounter();
    FlopCounter(const FlopCounter&) = delete;
    FlopCounter& operator=(const FlopCounter&) = delete;

    std::uint64_t count() const;

private:
    std::uint64_t start_;
};

namespace detail {

void add_flops(std::uint64_t n);

// Builds an op result. The backward closure is attached only when graph
// recording is on and some parent requires grad.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::vector<Tensor> parents,
                   std::function<void(Node&)> backward);

// Result that aliases an existing storage buffer (reshape).
Tensor make_alias(Shape shape, std::shared_ptr<std::vector<double>> storage,
                  std::vector<Tensor> parents,
                  std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace avseg
