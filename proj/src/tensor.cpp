#include "vif/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "vif/error.hpp"

namespace vif {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::matmul_nt: return "matmul_nt";
        case OpKind::transpose: return "transpose";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::div: return "div";
        case OpKind::scale: return "scale";
        case OpKind::shift: return "shift";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::negate: return "negate";
        case OpKind::square: return "square";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::softplus: return "softplus";
        case OpKind::gelu: return "gelu";
        case OpKind::clamp: return "clamp";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::max_reduce: return "max_reduce";
        case OpKind::sum_lastdim: return "sum_lastdim";
        case OpKind::mean_rows: return "mean_rows";
        case OpKind::softmax_lastdim: return "softmax_lastdim";
        case OpKind::masked_softmax_lastdim: return "masked_softmax_lastdim";
        case OpKind::log_softmax_lastdim: return "log_softmax_lastdim";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::reshape: return "reshape";
        case OpKind::embedding: return "embedding";
        case OpKind::pick: return "pick";
        case OpKind::row_normalize: return "row_normalize";
        case OpKind::gaussian_render: return "gaussian_render";
        case OpKind::entropy: return "entropy";
    }
    return "?";
}

std::uint64_t detail::next_node_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

std::vector<double>& detail::Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

// ---- Tensor ---------------------------------------------------------------

namespace {

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor", "shape " + shape_str(shape) + " holds " +
                                           std::to_string(shape_numel(shape)) + " values, got " +
                                           std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->id = detail::next_node_id();
    return node;
}

const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
    if (!node) throw ContractError("tensor", "use of an undefined tensor");
    return *node;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_leaf({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) throw DimensionError("tensor", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
    if (!is_leaf()) throw ContractError("tensor", "only leaf tensors may be mutated");
    return node_->value;
}

double Tensor::item() const {
    const auto& n = checked(node_);
    if (n.value.size() != 1) throw DimensionError("tensor", "item() on tensor of shape " + shape_str(n.shape));
    return n.value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool on) {
    if (!is_leaf()) throw ContractError("tensor", "requires_grad can only be set on leaves");
    node_->requires_grad = on;
}

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::vector<double> Tensor::grad() const {
    const auto& n = checked(node_);
    if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
    return n.grad;
}

std::span<double> Tensor::mutable_grad() {
    checked(node_);
    return node_->grad_buffer();
}

void Tensor::zero_grad() {
    checked(node_);
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::is_leaf() const { return checked(node_).kind == OpKind::leaf; }
OpKind Tensor::op() const { return checked(node_).kind; }
std::uint64_t Tensor::id() const { return checked(node_).id; }

bool Tensor::all_finite() const {
    const auto& v = checked(node_).value;
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Tensor Tensor::detach() const {
    const auto& n = checked(node_);
    return Tensor(make_leaf(n.shape, n.value, false));
}

// ---- grad mode ------------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- graph traversal ------------------------------------------------------

namespace {

std::vector<detail::Node*> topo_order(detail::Node* root) {
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS; (node, next input index).
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }
    return order;
}

}  // namespace

Graph trace_graph(const Tensor& root) {
    Graph g;
    auto* node = root.node().get();
    if (!node) throw ContractError("autodiff", "trace of an undefined tensor");
    for (detail::Node* n : topo_order(node)) {
        GraphRecord rec{n->kind, {}, n->id};
        for (const auto& in : n->inputs) rec.inputs.push_back(in->id);
        g.nodes.push_back(std::move(rec));
    }
    return g;
}

void backward(const Tensor& root) {
    detail::Node* r = root.node().get();
    if (!r) throw ContractError("autodiff", "backward on an undefined tensor");
    if (!r->shape.empty()) throw ContractError("autodiff", "backward root must be a scalar of shape [], got " + shape_str(r->shape));
    if (!r->requires_grad) return;
    auto order = topo_order(r);
    r->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // The tape is single-use: release edges so intermediate buffers can go.
    for (detail::Node* n : order) {
        if (n->kind != OpKind::leaf) {
            n->backward = nullptr;
            n->inputs.clear();
        }
    }
}

}  // namespace vif
