#pragma once

// Dense f64 tensors with taped reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Nodes produced while grad mode
// is on and at least one input requires grad keep their inputs and a backward
// rule; backward() walks that graph once in reverse topological order and
// frees it. Leaves accumulate gradients across backward calls until
// zero_grad().
//
// Binary elementwise ops broadcast only along leading dimensions: one operand's
// shape must equal a suffix of the other's (a scalar [] is a suffix of any
// shape).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vif {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind : std::uint8_t {
    leaf,
    matmul,
    matmul_nt,
    transpose,
    add,
    sub,
    mul,
    div,
    scale,
    shift,
    exp,
    log,
    negate,
    square,
    sigmoid,
    softplus,
    gelu,
    clamp,
    sum,
    mean,
    max_reduce,
    sum_lastdim,
    mean_rows,
    softmax_lastdim,
    masked_softmax_lastdim,
    log_softmax_lastdim,
    layer_norm,
    concat,
    slice,
    reshape,
    embedding,
    pick,
    row_normalize,
    gaussian_render,
    entropy,
};

std::string_view op_name(OpKind kind);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first written
    bool requires_grad = false;
    OpKind kind = OpKind::leaf;
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer();
};

std::uint64_t next_node_id();

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Writable view; only leaves may be mutated (parameters, inputs).
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    // Zeros when no gradient has been written yet.
    std::vector<double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    bool is_leaf() const;
    OpKind op() const;
    std::uint64_t id() const;

    // NaN/Inf detector for the validity state.
    bool all_finite() const;
    // Value copy detached from any graph.
    Tensor detach() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Grad-mode switch. While a guard is alive no graph is recorded.
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

struct GraphRecord {
    OpKind kind;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output;
};

// Recorded graph reachable from root in topological order (inputs first).
struct Graph {
    std::vector<GraphRecord> nodes;
};

Graph trace_graph(const Tensor& root);

// Populates grads on every requires_grad leaf reachable from a scalar root.
void backward(const Tensor& root);

// ---- operations -----------------------------------------------------------

// a[..., M, K] x b[K, N] -> [..., M, N]
Tensor matmul(const Tensor& a, const Tensor& b);
// a[M, K] x b[N, K]^T -> [M, N]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor shift(const Tensor& a, double offset);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor negate(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor max_reduce(const Tensor& a);
Tensor sum_lastdim(const Tensor& a);
// a[M, N] -> [N], mean over rows.
Tensor mean_rows(const Tensor& a);

Tensor softmax_lastdim(const Tensor& a);
// visible holds 0/1 flags whose length is a suffix-size of a (e.g. a [H,T,T],
// visible [T,T]). Masked outputs are exactly 0; an all-masked row throws.
Tensor masked_softmax_lastdim(const Tensor& a, std::span<const std::uint8_t> visible);
Tensor log_softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);

// table[V, D] rows selected by ids -> [n, D]
Tensor embedding(const Tensor& table, std::span<const int> ids);
// a[M, N] -> [n] with out[i] = a[rows[i], cols[i]]
Tensor pick(const Tensor& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
// Divides each last-dim row by its sum; a row summing to <= 0 throws.
Tensor row_normalize(const Tensor& a);
// g[k, n] = exp(-|grid_n - centers_k|^2 / (2 spreads_k^2)); grid is [N, 2].
Tensor gaussian_render(const Tensor& centers, const Tensor& spreads, std::span<const double> grid);
// -sum p log p with 0 log 0 = 0.
Tensor entropy(const Tensor& p);

}  // namespace vif
