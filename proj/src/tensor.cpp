#include "avseg/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "avseg/errors.hpp"

namespace avseg {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_flops = 0;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
    if (grad.empty()) grad.assign(data->size(), 0.0);
    return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto s : shape) {
        if (s == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::make_shared<std::vector<double>>(std::move(values));
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }
Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return node_->shape;
}

std::size_t Tensor::size(int axis) const {
    const auto& s = shape();
    const int d = static_cast<int>(s.size());
    const int a = axis < 0 ? axis + d : axis;
    if (a < 0 || a >= d) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    return s[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return {node_->data->data(), node_->data->size()};
}

std::span<double> Tensor::data_mut() {
    if (!node_) throw ContractError("use of an undefined tensor");
    return {node_->data->data(), node_->data->size()};
}

std::vector<double> Tensor::to_vector() const {
    auto d = data();
    return {d.begin(), d.end()};
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return (*node_->data)[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
    std::size_t flat = 0;
    std::size_t i = 0;
    for (auto v : index) {
        if (v >= s[i]) throw DimensionError("index out of range for " + shape_str(s));
        flat = flat * s[i] + v;
        ++i;
    }
    return (*node_->data)[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return {node_->grad.data(), node_->grad.size()};
}

std::vector<double> Tensor::grad_vector() const {
    if (!has_grad()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<detail::Node>();
    n->shape = shape();
    n->data = node_->data;
    return Tensor(std::move(n));
}

Tensor Tensor::clone(bool requires_grad) const { return Tensor(shape(), to_vector(), requires_grad); }

void Tensor::backward() const {
    if (!node_) throw ContractError("backward() on an undefined tensor");
    if (numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior gradients are per-call; leaves accumulate across calls.
    for (auto* n : order) {
        if (n->backward) n->grad.assign(n->numel(), 0.0);
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

FlopCounter::FlopCounter() : start_(g_flops) {}
FlopCounter::~FlopCounter() = default;
std::uint64_t FlopCounter::count() const { return g_flops - start_; }

void detail::add_flops(std::uint64_t n) { g_flops += n; }

namespace {

Tensor attach(std::shared_ptr<detail::Node> node, std::vector<Tensor> parents,
              std::function<void(detail::Node&)> backward) {
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(parents.size());
            for (auto& p : parents) node->parents.push_back(p.node());
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

}  // namespace

Tensor detail::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                           std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::make_shared<std::vector<double>>(std::move(values));
    return attach(std::move(node), std::move(parents), std::move(backward));
}

Tensor detail::make_alias(Shape shape, std::shared_ptr<std::vector<double>> storage,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(storage);
    return attach(std::move(node), std::move(parents), std::move(backward));
}

}  // namespace avseg
