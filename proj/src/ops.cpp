#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "vif/error.hpp"
#include "vif/kernels.hpp"
#include "vif/tensor.hpp"

namespace vif {

namespace {

using detail::Node;
using Backward = std::function<void(Node&)>;

const Node& node_of(const Tensor& t) {
    if (!t.defined()) throw ContractError("tensor", "operation on an undefined tensor");
    return *t.node();
}

Tensor make_result(OpKind kind, Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs, Backward bw) {
    if (shape_numel(shape) != value.size()) {
        throw InvariantError("tensor", std::string(op_name(kind)) + " produced " + std::to_string(value.size()) +
                                           " values for shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->kind = kind;
    node->id = detail::next_node_id();
    bool needs = false;
    if (grad_enabled()) {
        for (const Tensor* t : inputs) needs = needs || node_of(*t).requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) node->inputs.push_back(t->node());
        node->backward = std::move(bw);
    }
    return Tensor(std::move(node));
}

Tensor make_result_n(OpKind kind, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                     Backward bw) {
    if (shape_numel(shape) != value.size()) {
        throw InvariantError("tensor", std::string(op_name(kind)) + " produced " + std::to_string(value.size()) +
                                           " values for shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->kind = kind;
    node->id = detail::next_node_id();
    bool needs = false;
    if (grad_enabled()) {
        for (const Tensor& t : inputs) needs = needs || node_of(t).requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        for (const Tensor& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(bw);
    }
    return Tensor(std::move(node));
}

// Input slot i of a recorded node, or nullptr when it needs no gradient.
Node* grad_target(Node& self, std::size_t i) {
    Node* in = self.inputs[i].get();
    return in->requires_grad ? in : nullptr;
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

std::size_t last_dim(const Tensor& a, const char* op) {
    if (a.rank() == 0) throw DimensionError("tensor", std::string(op) + " needs rank >= 1");
    return a.shape().back();
}

// ---- elementwise binary ---------------------------------------------------

enum class Bin { add, sub, mul, div };

Tensor binary(Bin kind, const Tensor& a, const Tensor& b) {
    const Node& na = node_of(a);
    const Node& nb = node_of(b);
    static constexpr OpKind kinds[] = {OpKind::add, OpKind::sub, OpKind::mul, OpKind::div};
    const OpKind op = kinds[static_cast<int>(kind)];
    Shape out_shape;
    if (is_suffix(nb.shape, na.shape)) {
        out_shape = na.shape;
    } else if (is_suffix(na.shape, nb.shape)) {
        out_shape = nb.shape;
    } else {
        throw DimensionError("tensor", std::string(op_name(op)) + " shapes " + shape_str(na.shape) + " and " +
                                           shape_str(nb.shape) + " are not leading-dim broadcastable");
    }
    const std::size_t n = shape_numel(out_shape);
    const std::size_t sa = na.value.size();
    const std::size_t sb = nb.value.size();
    const double* av = na.value.data();
    const double* bv = nb.value.data();
    std::vector<double> out(n);
    switch (kind) {
        case Bin::add:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i % sa] + bv[i % sb];
            break;
        case Bin::sub:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i % sa] - bv[i % sb];
            break;
        case Bin::mul:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i % sa] * bv[i % sb];
            break;
        case Bin::div:
            for (std::size_t i = 0; i < n; ++i) {
                const double d = bv[i % sb];
                if (d == 0.0) throw DomainError("tensor", "division by zero");
                out[i] = av[i % sa] / d;
            }
            break;
    }
    return make_result(op, std::move(out_shape), std::move(out), {&a, &b}, [kind, sa, sb](Node& self) {
        const std::size_t n = self.value.size();
        const auto& g = self.grad;
        Node* ia = grad_target(self, 0);
        Node* ib = grad_target(self, 1);
        const auto& avv = self.inputs[0]->value;
        const auto& bvv = self.inputs[1]->value;
        if (ia) {
            auto& ga = ia->grad_buffer();
            switch (kind) {
                case Bin::add:
                case Bin::sub:
                    if (sa == n) {
                        kernels::active().axpy(n, 1.0, g.data(), ga.data());
                    } else {
                        for (std::size_t i = 0; i < n; ++i) ga[i % sa] += g[i];
                    }
                    break;
                case Bin::mul:
                    for (std::size_t i = 0; i < n; ++i) ga[i % sa] += g[i] * bvv[i % sb];
                    break;
                case Bin::div:
                    for (std::size_t i = 0; i < n; ++i) ga[i % sa] += g[i] / bvv[i % sb];
                    break;
            }
        }
        if (ib) {
            auto& gb = ib->grad_buffer();
            switch (kind) {
                case Bin::add:
                    if (sb == n) {
                        kernels::active().axpy(n, 1.0, g.data(), gb.data());
                    } else {
                        for (std::size_t i = 0; i < n; ++i) gb[i % sb] += g[i];
                    }
                    break;
                case Bin::sub:
                    for (std::size_t i = 0; i < n; ++i) gb[i % sb] -= g[i];
                    break;
                case Bin::mul:
                    for (std::size_t i = 0; i < n; ++i) gb[i % sb] += g[i] * avv[i % sa];
                    break;
                case Bin::div:
                    for (std::size_t i = 0; i < n; ++i) {
                        const double d = bvv[i % sb];
                        gb[i % sb] -= g[i] * avv[i % sa] / (d * d);
                    }
                    break;
            }
        }
    });
}

// ---- elementwise unary ----------------------------------------------------

// dydx(x, y) gives the local derivative from input and output values.
template <class F, class D>
Tensor unary(OpKind op, const Tensor& a, F f, D dydx) {
    const Node& na = node_of(a);
    std::vector<double> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(na.value[i]);
    return make_result(op, na.shape, std::move(out), {&a}, [dydx](Node& self) {
        Node* ia = grad_target(self, 0);
        if (!ia) return;
        auto& ga = ia->grad_buffer();
        const auto& x = ia->value;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * dydx(x[i], self.value[i]);
    });
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

// ---- matmul family ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Node& na = node_of(a);
    const Node& nb = node_of(b);
    if (na.shape.size() < 2 || nb.shape.size() != 2) {
        throw DimensionError("tensor", "matmul needs a[...,M,K] and b[K,N], got " + shape_str(na.shape) + " x " +
                                           shape_str(nb.shape));
    }
    const std::size_t k = na.shape.back();
    if (nb.shape[0] != k) {
        throw DimensionError("tensor", "matmul inner dims differ: " + shape_str(na.shape) + " x " + shape_str(nb.shape));
    }
    const std::size_t n = nb.shape[1];
    const std::size_t m = na.value.size() / std::max<std::size_t>(k, 1);
    Shape out_shape = na.shape;
    out_shape.back() = n;
    std::vector<double> out(m * n, 0.0);
    if (k > 0) kernels::active().gemm(m, n, k, na.value.data(), k, nb.value.data(), n, out.data(), n, false);
    return make_result(OpKind::matmul, std::move(out_shape), std::move(out), {&a, &b}, [m, n, k](Node& self) {
        const auto& kt = kernels::active();
        if (Node* ia = grad_target(self, 0)) {
            // dA += G * B^T
            kt.gemm_nt(m, k, n, self.grad.data(), n, self.inputs[1]->value.data(), n, ia->grad_buffer().data(), k,
                       true);
        }
        if (Node* ib = grad_target(self, 1)) {
            // dB += A^T * G
            kt.gemm_tn(k, n, m, self.inputs[0]->value.data(), k, self.grad.data(), n, ib->grad_buffer().data(), n,
                       true);
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const Node& na = node_of(a);
    const Node& nb = node_of(b);
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[1]) {
        throw DimensionError("tensor", "matmul_nt needs a[M,K] and b[N,K], got " + shape_str(na.shape) + " x " +
                                           shape_str(nb.shape));
    }
    const std::size_t m = na.shape[0];
    const std::size_t k = na.shape[1];
    const std::size_t n = nb.shape[0];
    std::vector<double> out(m * n, 0.0);
    if (k > 0) kernels::active().gemm_nt(m, n, k, na.value.data(), k, nb.value.data(), k, out.data(), n, false);
    return make_result(OpKind::matmul_nt, {m, n}, std::move(out), {&a, &b}, [m, n, k](Node& self) {
        const auto& kt = kernels::active();
        if (Node* ia = grad_target(self, 0)) {
            // dA += G * B
            kt.gemm(m, k, n, self.grad.data(), n, self.inputs[1]->value.data(), k, ia->grad_buffer().data(), k, true);
        }
        if (Node* ib = grad_target(self, 1)) {
            // dB += G^T * A
            kt.gemm_tn(n, k, m, self.grad.data(), n, self.inputs[0]->value.data(), k, ib->grad_buffer().data(), k,
                       true);
        }
    });
}

Tensor transpose(const Tensor& a) {
    const Node& na = node_of(a);
    if (na.shape.size() != 2) throw DimensionError("tensor", "transpose needs rank 2, got " + shape_str(na.shape));
    const std::size_t r = na.shape[0];
    const std::size_t c = na.shape[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = na.value[i * c + j];
    return make_result(OpKind::transpose, {c, r}, std::move(out), {&a}, [r, c](Node& self) {
        Node* ia = grad_target(self, 0);
        if (!ia) return;
        auto& ga = ia->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
    });
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(Bin::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Bin::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Bin::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Bin::div, a, b); }

Tensor scale(const Tensor& a, double factor) {
    return unary(
        OpKind::scale, a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor shift(const Tensor& a, double offset) {
    return unary(
        OpKind::shift, a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
    return unary(
        OpKind::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double x : node_of(a).value) {
        if (!(x > 0.0)) throw DomainError("tensor", "log of nonpositive value " + std::to_string(x));
    }
    return unary(
        OpKind::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor negate(const Tensor& a) {
    return unary(
        OpKind::negate, a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor square(const Tensor& a) {
    return unary(
        OpKind::square, a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        OpKind::sigmoid, a,
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
    return unary(
        OpKind::softplus, a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
        [](double x, double) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        });
}

Tensor gelu(const Tensor& a) {
    return unary(
        OpKind::gelu, a, [](double x) { return x * normal_cdf(x); },
        [](double x, double) {
            const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
            return normal_cdf(x) + x * pdf;
        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw ContractError("tensor", "clamp with lo > hi");
    return unary(
        OpKind::clamp, a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
    const Node& na = node_of(a);
    double s = 0.0;
    for (double x : na.value) s += x;
    return make_result(OpKind::sum, {}, {s}, {&a}, [](Node& self) {
        Node* ia = grad_target(self, 0);
        if (!ia) return;
        const double g = self.grad[0];
        for (double& x : ia->grad_buffer()) x += g;
    });
}

Tensor mean(const Tensor& a) {
    const Node& na = node_of(a);
    if (na.value.empty()) throw DimensionError("tensor", "mean of an empty tensor");
    double s = 0.0;
    for (double x : na.value) s += x;
    const double inv = 1.0 / static_cast<double>(na.value.size());
    return make_result(OpKind::mean, {}, {s * inv}, {&a}, [inv](Node& self) {
        Node* ia = grad_target(self, 0);
        if (!ia) return;
        const double g = self.grad[0] * inv;
        for (double& x : ia->grad_buffer()) x += g;
    });
}

Tensor max_reduce(const Tensor& a) {
    const Node& na = node_of(a);
    if (na.value.empty()) throw DimensionError("tensor", "max of an empty tensor");
    const auto it = std::max_element(na.value.begin(), na.value.end());
    const std::size_t arg = static_cast<std::size_t>(it - na.value.begin());
    return make_result(OpKind::max_reduce, {}, {*it}, {&a}, [arg](Node& self) {
        if (Node* ia = grad_target(self, 0)) ia->grad_buffer()[arg] += self.grad[0];
    });
}

Tensor sum_lastdim(const Tensor& a) {
    const std::size_t n = last_dim(a, "sum_lastdim");
    const Node& na = node_of(a);
    const std::size_t rows = n ? na.value.size() / n : 0;
    Shape out_shape(na.shape.begin(), na.shape.end() - 1);
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r] += na.value[r * n + j];
    return make_result(OpKind::sum_lastdim, std::move(out_shape), std::move(out), {&a}, [rows, n](Node& self) {
        Node* ia = grad_target(self, 0);
        if (!ia) return;
        auto& ga = ia->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += self.grad[r];
    });
}

Tensor mean_rows(const Tensor& a) {
    const Node& na = node_of(a);
    if (na.shape.size() != 2 || na.shape[0] == 0) {
        throw DimensionError("tensor", "mean_rows needs a nonempty [M,N], got " + shape_str(na.shape));
    }
    const std::size_t m = na.shape[0];
    const std::size_t n = na.shape[1];
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += na.value[i * n + j];
    const double inv = 1.0 / static_cast<double>(m);
    for (double& x : out) x *= inv;
    return make_result(OpKind::mean_rows, {n}, std::move(out), {&a}, [m, n, inv](Node& self) {
        Node* ia = grad_target(self, 0);
        if (!ia) return;
        auto& ga = ia->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j] * inv;
    });
}

// ---- softmax family -----------------------------------------------------------

namespace {

void softmax_backward(Node& self, std::size_t n) {
    Node* ia = grad_target(self, 0);
    if (!ia) return;
    auto& ga = ia->grad_buffer();
    const std::size_t rows = n ? self.value.size() / n : 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * n;
        const double* g = self.grad.data() + r * n;
        double dotgy = 0.0;
        for (std::size_t j = 0; j < n; ++j) dotgy += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[j] * (g[j] - dotgy);
    }
}

}  // namespace

Tensor softmax_lastdim(const Tensor& a) {
    const std::size_t n = last_dim(a, "softmax_lastdim");
    const Node& na = node_of(a);
    const std::size_t rows = n ? na.value.size() / n : 0;
    std::vector<double> out(na.value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = na.value.data() + r * n;
        double* y = out.data() + r * n;
        const double mx = *std::max_element(x, x + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (y[j] = std::exp(x[j] - mx));
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
    }
    return make_result(OpKind::softmax_lastdim, na.shape, std::move(out), {&a},
                       [n](Node& self) { softmax_backward(self, n); });
}

Tensor masked_softmax_lastdim(const Tensor& a, std::span<const std::uint8_t> visible) {
    const std::size_t n = last_dim(a, "masked_softmax_lastdim");
    const Node& na = node_of(a);
    const std::size_t mlen = visible.size();
    if (mlen == 0 || mlen % n != 0 || na.value.size() % mlen != 0) {
        throw DimensionError("tensor", "mask of " + std::to_string(mlen) + " flags does not tile " + shape_str(na.shape));
    }
    const std::size_t rows = na.value.size() / n;
    std::vector<double> out(na.value.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = na.value.data() + r * n;
        const std::uint8_t* vis = visible.data() + (r * n) % mlen;
        double* y = out.data() + r * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (vis[j]) mx = std::max(mx, x[j]);
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw ContractError("tensor", "masked softmax row " + std::to_string(r) + " has no visible entry");
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (vis[j]) s += (y[j] = std::exp(x[j] - mx));
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
    }
    return make_result(OpKind::masked_softmax_lastdim, na.shape, std::move(out), {&a},
                       [n](Node& self) { softmax_backward(self, n); });
}

Tensor log_softmax_lastdim(const Tensor& a) {
    const std::size_t n = last_dim(a, "log_softmax_lastdim");
    const Node& na = node_of(a);
    const std::size_t rows = n ? na.value.size() / n : 0;
    std::vector<double> out(na.value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = na.value.data() + r * n;
        const double mx = *std::max_element(x, x + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[j] - lse;
    }
    return make_result(OpKind::log_softmax_lastdim, na.shape, std::move(out), {&a}, [n, rows](Node& self) {
        Node* ia = grad_target(self, 0);
        if (!ia) return;
        auto& ga = ia->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = self.grad.data() + r * n;
            double gs = 0.0;
            for (std::size_t j = 0; j < n; ++j) gs += g[j];
            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[j] - std::exp(self.value[r * n + j]) * gs;
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = last_dim(x, "layer_norm");
    const Node& nx = node_of(x);
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw DimensionError("tensor", "layer_norm gain/bias must be [" + std::to_string(d) + "]");
    }
    const std::size_t rows = d ? nx.value.size() / d : 0;
    std::vector<double> xhat(nx.value.size());
    std::vector<double> inv_std(rows);
    std::vector<double> out(nx.value.size());
    const double* gv = gain.data().data();
    const double* bv = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = nx.value.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mu) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    return make_result(OpKind::layer_norm, nx.shape, std::move(out), {&x, &gain, &bias},
                       [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           const auto& g = self.grad;
                           const auto& gv = self.inputs[1]->value;
                           if (Node* ig = grad_target(self, 1)) {
                               auto& gg = ig->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
                           }
                           if (Node* ib = grad_target(self, 2)) {
                               auto& gb = ib->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                           }
                           if (Node* ix = grad_target(self, 0)) {
                               auto& gx = ix->grad_buffer();
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   double s1 = 0.0;
                                   double s2 = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double gh = g[r * d + j] * gv[j];
                                       s1 += gh;
                                       s2 += gh * xhat[r * d + j];
                                   }
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double gh = g[r * d + j] * gv[j];
                                       gx[r * d + j] +=
                                           inv_std[r] * (gh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                                   }
                               }
                           }
                       });
}

// ---- structural -----------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("tensor", "concat of zero tensors");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw DimensionError("tensor", "concat axis out of range for " + shape_str(first));
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    std::vector<std::size_t> widths;  // per part: extent(axis) * inner
    std::size_t total_axis = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw DimensionError("tensor", "concat rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != first[i]) {
                throw DimensionError("tensor", "concat shape mismatch " + shape_str(s) + " vs " + shape_str(first));
            }
        }
        widths.push_back(s[axis] * inner);
        total_axis += s[axis];
    }
    Shape out_shape = first;
    out_shape[axis] = total_axis;
    const std::size_t row = total_axis * inner;
    std::vector<double> out(outer * row);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto v = parts[p].data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(v.data() + o * widths[p], widths[p], out.data() + o * row + offset);
        offset += widths[p];
    }
    return make_result_n(OpKind::concat, std::move(out_shape), std::move(out), parts,
                         [outer, row, widths](Node& self) {
                             std::size_t offset = 0;
                             for (std::size_t p = 0; p < widths.size(); ++p) {
                                 if (Node* ip = grad_target(self, p)) {
                                     auto& gp = ip->grad_buffer();
                                     for (std::size_t o = 0; o < outer; ++o)
                                         for (std::size_t j = 0; j < widths[p]; ++j)
                                             gp[o * widths[p] + j] += self.grad[o * row + offset + j];
                                 }
                                 offset += widths[p];
                             }
                         });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& s = a.shape();
    if (axis >= s.size() || start + length > s[axis]) {
        throw DimensionError("tensor", "slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                           ") on axis " + std::to_string(axis) + " of " + shape_str(s));
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t src_row = s[axis] * inner;
    const std::size_t dst_row = length * inner;
    const std::size_t off = start * inner;
    Shape out_shape = s;
    out_shape[axis] = length;
    std::vector<double> out(outer * dst_row);
    const auto v = a.data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(v.data() + o * src_row + off, dst_row, out.data() + o * dst_row);
    return make_result(OpKind::slice, std::move(out_shape), std::move(out), {&a},
                       [outer, src_row, dst_row, off](Node& self) {
                           Node* ia = grad_target(self, 0);
                           if (!ia) return;
                           auto& ga = ia->grad_buffer();
                           for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < dst_row; ++j)
                                   ga[o * src_row + off + j] += self.grad[o * dst_row + j];
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("tensor", "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(OpKind::reshape, std::move(shape), std::move(out), {&a}, [](Node& self) {
        Node* ia = grad_target(self, 0);
        if (!ia) return;
        auto& ga = ia->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    const Shape& s = table.shape();
    if (s.size() != 2) throw DimensionError("tensor", "embedding table must be [V,D], got " + shape_str(s));
    const std::size_t vocab = s[0];
    const std::size_t d = s[1];
    std::vector<int> idv(ids.begin(), ids.end());
    std::vector<double> out(idv.size() * d);
    const auto tv = table.data();
    for (std::size_t i = 0; i < idv.size(); ++i) {
        if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= vocab) {
            throw VocabError("tensor", "token id " + std::to_string(idv[i]) + " outside vocabulary of " +
                                           std::to_string(vocab));
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(idv[i]) * d, d, out.data() + i * d);
    }
    const std::size_t n = idv.size();
    return make_result(OpKind::embedding, {n, d}, std::move(out), {&table},
                       [idv = std::move(idv), d](Node& self) {
                           Node* it = grad_target(self, 0);
                           if (!it) return;
                           auto& gt = it->grad_buffer();
                           for (std::size_t i = 0; i < idv.size(); ++i)
                               for (std::size_t j = 0; j < d; ++j)
                                   gt[static_cast<std::size_t>(idv[i]) * d + j] += self.grad[i * d + j];
                       });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
    const Shape& s = a.shape();
    if (s.size() != 2 || rows.size() != cols.size()) {
        throw DimensionError("tensor", "pick needs a[M,N] and equal-length index lists");
    }
    std::vector<std::size_t> flat(rows.size());
    std::vector<double> out(rows.size());
    const auto v = a.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= s[0] || cols[i] >= s[1]) throw DimensionError("tensor", "pick index out of range");
        flat[i] = rows[i] * s[1] + cols[i];
        out[i] = v[flat[i]];
    }
    return make_result(OpKind::pick, {rows.size()}, std::move(out), {&a}, [flat = std::move(flat)](Node& self) {
        Node* ia = grad_target(self, 0);
        if (!ia) return;
        auto& ga = ia->grad_buffer();
        for (std::size_t i = 0; i < flat.size(); ++i) ga[flat[i]] += self.grad[i];
    });
}

Tensor row_normalize(const Tensor& a) {
    const std::size_t n = last_dim(a, "row_normalize");
    const Node& na = node_of(a);
    const std::size_t rows = n ? na.value.size() / n : 0;
    std::vector<double> sums(rows, 0.0);
    std::vector<double> out(na.value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += na.value[r * n + j];
        if (!(s > 0.0)) {
            throw ContractError("tensor", "row " + std::to_string(r) + " has nonpositive mass " + std::to_string(s) +
                                              " and cannot be normalized");
        }
        sums[r] = s;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = na.value[r * n + j] / s;
    }
    return make_result(OpKind::row_normalize, na.shape, std::move(out), {&a},
                       [n, rows, sums = std::move(sums)](Node& self) {
                           Node* ia = grad_target(self, 0);
                           if (!ia) return;
                           auto& ga = ia->grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* g = self.grad.data() + r * n;
                               const double* y = self.value.data() + r * n;
                               double gy = 0.0;
                               for (std::size_t j = 0; j < n; ++j) gy += g[j] * y[j];
                               for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += (g[j] - gy) / sums[r];
                           }
                       });
}

Tensor gaussian_render(const Tensor& centers, const Tensor& spreads, std::span<const double> grid) {
    const Shape& cs = centers.shape();
    if (cs.size() != 2 || cs[1] != 2) throw DimensionError("tensor", "centers must be [K,2], got " + shape_str(cs));
    const std::size_t k = cs[0];
    if (spreads.shape() != Shape{k}) throw DimensionError("tensor", "spreads must be [K] matching centers");
    if (grid.size() % 2 != 0) throw DimensionError("tensor", "grid coordinates must be [N,2]");
    const std::size_t n = grid.size() / 2;
    std::vector<double> coords(grid.begin(), grid.end());
    const auto c = centers.data();
    const auto sg = spreads.data();
    std::vector<double> out(k * n);
    for (std::size_t i = 0; i < k; ++i) {
        if (!(sg[i] > 0.0)) throw DomainError("tensor", "gaussian spread must be positive");
        const double inv = 1.0 / (2.0 * sg[i] * sg[i]);
        for (std::size_t j = 0; j < n; ++j) {
            const double dx = coords[2 * j] - c[2 * i];
            const double dy = coords[2 * j + 1] - c[2 * i + 1];
            out[i * n + j] = std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
    return make_result(OpKind::gaussian_render, {k, n}, std::move(out), {&centers, &spreads},
                       [k, n, coords = std::move(coords)](Node& self) {
                           Node* ic = grad_target(self, 0);
                           Node* is = grad_target(self, 1);
                           const auto& c = self.inputs[0]->value;
                           const auto& sg = self.inputs[1]->value;
                           for (std::size_t i = 0; i < k; ++i) {
                               const double s2 = sg[i] * sg[i];
                               double gcx = 0.0;
                               double gcy = 0.0;
                               double gs = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double gy = self.grad[i * n + j] * self.value[i * n + j];
                                   const double dx = coords[2 * j] - c[2 * i];
                                   const double dy = coords[2 * j + 1] - c[2 * i + 1];
                                   gcx += gy * dx / s2;
                                   gcy += gy * dy / s2;
                                   gs += gy * (dx * dx + dy * dy) / (s2 * sg[i]);
                               }
                               if (ic) {
                                   auto& gc = ic->grad_buffer();
                                   gc[2 * i] += gcx;
                                   gc[2 * i + 1] += gcy;
                               }
                               if (is) is->grad_buffer()[i] += gs;
                           }
                       });
}

Tensor entropy(const Tensor& p) {
    double h = 0.0;
    for (double x : p.data()) {
        if (x < 0.0) throw DomainError("tensor", "entropy of a negative probability");
        if (x > 0.0) h -= x * std::log(x);
    }
    return make_result(OpKind::entropy, {}, {h}, {&p}, [](Node& self) {
        Node* ip = grad_target(self, 0);
        if (!ip) return;
        auto& gp = ip->grad_buffer();
        const double g = self.grad[0];
        for (std::size_t i = 0; i < gp.size(); ++i) {
            const double x = ip->value[i];
            if (x > 0.0) gp[i] -= g * (std::log(x) + 1.0);
        }
    });
}

}  // namespace vif
