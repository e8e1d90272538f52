#include "latdial/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "latdial/errors.hpp"

namespace latdial {

namespace {

thread_local bool g_grad_enabled = true;
bool g_finite_checks = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

void require(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

void check_finite(const char* op, const std::vector<real>& data) {
    if (!g_finite_checks) return;
    for (real v : data) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

bool is_suffix(const Shape& full, const Shape& suffix) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.begin(), suffix.end(), full.end() - static_cast<long>(suffix.size()));
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const real* a, const real* b, real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        real* crow = c + i * n;
        const real* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const real av = arow[p];
            if (av == real(0)) continue;
            const real* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(const real* a, const real* b, real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const real* arow = a + i * k;
        real* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const real* brow = b + j * k;
            real acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const real* a, const real* b, real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const real* arow = a + i * k;
        const real* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const real av = arow[p];
            if (av == real(0)) continue;
            real* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), real(0), requires_grad); }

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<real>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                             " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(real value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<const real> Tensor::data() const { return node_->data; }
std::span<real> Tensor::mutable_data() { return node_->data; }

real Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const real> Tensor::grad() const { return node_->grad; }
std::span<real> Tensor::mutable_grad() { return node_->ensure_grad(); }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

void Tensor::backward() const {
    if (!node_) throw ContractError("backward() on undefined tensor");
    if (numel() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(shape()));
    if (node_->consumed) throw ContractError("backward() already ran on this graph");
    if (!node_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");

    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    for (Node* n : order) {
        if (n->backward) {
            n->backward = nullptr;
            n->parents.clear();
            if (n != node_.get()) n->grad.clear();
        }
    }
    node_->consumed = true;
}

// ---- graph plumbing -------------------------------------------------------------

Tensor detail::make_result(const char* op, Shape shape, std::vector<real> data, std::vector<Tensor> parents,
                           BackwardFn backward) {
    check_finite(op, data);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (g_grad_enabled) {
        const bool any = std::any_of(parents.begin(), parents.end(),
                                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            for (auto& p : parents) {
                if (p.defined()) node->parents.push_back(p.node());
            }
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }
void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }

AttentionMask AttentionMask::from_key_padding(std::size_t batch, std::size_t q_len, std::size_t k_len,
                                              std::span<const std::uint8_t> key_valid) {
    if (key_valid.size() != batch * k_len) throw DimensionError("key padding mask size mismatch");
    AttentionMask m{batch, q_len, k_len, std::vector<std::uint8_t>(batch * q_len * k_len)};
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t q = 0; q < q_len; ++q)
            std::copy_n(key_valid.begin() + static_cast<long>(b * k_len), k_len,
                        m.allowed.begin() + static_cast<long>((b * q_len + q) * k_len));
    return m;
}

AttentionMask AttentionMask::causal_with_prefix(std::size_t batch, std::size_t len, std::size_t prefix,
                                                bool memory_visible) {
    const std::size_t k_len = len + prefix;
    AttentionMask m{batch, len, k_len, std::vector<std::uint8_t>(batch * len * k_len)};
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t q = 0; q < len; ++q) {
            auto* row = m.allowed.data() + (b * len + q) * k_len;
            for (std::size_t k = 0; k < prefix; ++k) row[k] = memory_visible ? 1 : 0;
            for (std::size_t k = 0; k <= q; ++k) row[prefix + k] = 1;
        }
    return m;
}

// ---- ops ------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                                                shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    require(b.dim(0) == k, "matmul inner dimensions differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    std::vector<real> out(m * n, real(0));
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
        if (a.requires_grad()) {
            auto& ga = a.node()->ensure_grad();
            gemm_nt(self.grad.data(), b.data().data(), ga.data(), m, n, k);
        }
        if (b.requires_grad()) {
            auto& gb = b.node()->ensure_grad();
            gemm_tn(a.data().data(), self.grad.data(), gb.data(), m, k, n);
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require(weight.rank() == 2, "linear weight must be 2-D");
    const std::size_t in = weight.dim(0), out = weight.dim(1);
    require(x.rank() >= 1 && x.shape().back() == in,
            "linear input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
    if (bias.defined()) require(bias.rank() == 1 && bias.dim(0) == out, "linear bias shape mismatch");
    const std::size_t rows = x.numel() / in;
    std::vector<real> y(rows * out, real(0));
    if (bias.defined()) {
        for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), y.begin() + r * out);
    }
    gemm_nn(x.data().data(), weight.data().data(), y.data(), rows, in, out);
    Shape shape = x.shape();
    shape.back() = out;
    return detail::make_result("linear", std::move(shape), std::move(y), {x, weight, bias},
                               [x, weight, bias, rows, in, out](Node& self) {
                                   const real* gy = self.grad.data();
                                   if (x.requires_grad())
                                       gemm_nt(gy, weight.data().data(), x.node()->ensure_grad().data(), rows, out, in);
                                   if (weight.requires_grad())
                                       gemm_tn(x.data().data(), gy, weight.node()->ensure_grad().data(), rows, in, out);
                                   if (bias.defined() && bias.requires_grad()) {
                                       auto& gb = bias.node()->ensure_grad();
                                       for (std::size_t r = 0; r < rows; ++r)
                                           for (std::size_t j = 0; j < out; ++j) gb[j] += gy[r * out + j];
                                   }
                               });
}

namespace {

// Shared core for add/sub: out = a + sign * b, b broadcast over leading axes.
Tensor add_signed(const Tensor& a, const Tensor& b, real sign, const char* op) {
    const bool scalar_b = b.numel() == 1 && a.numel() != 1;
    if (!scalar_b && !is_suffix(a.shape(), b.shape())) {
        throw DimensionError(std::string(op) + ": cannot combine " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t n = a.numel(), nb = b.numel();
    std::vector<real> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] += sign * bd[i % nb];
    return detail::make_result(op, a.shape(), std::move(out), {a, b}, [a, b, sign, n, nb](Node& self) {
        if (a.requires_grad()) {
            auto& ga = a.node()->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.node()->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) gb[i % nb] += sign * self.grad[i];
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_signed(a, b, real(1), "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_signed(a, b, real(-1), "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.numel();
    std::vector<real> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [a, b, n](Node& self) {
        if (a.requires_grad()) {
            auto& ga = a.node()->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * b.data()[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.node()->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * a.data()[i];
        }
    });
}

Tensor scale(const Tensor& a, real factor) {
    std::vector<real> out(a.data().begin(), a.data().end());
    for (real& v : out) v *= factor;
    return detail::make_result("scale", a.shape(), std::move(out), {a}, [a, factor](Node& self) {
        auto& ga = a.node()->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * self.grad[i];
    });
}

Tensor sum(const Tensor& a) {
    real total = std::accumulate(a.data().begin(), a.data().end(), real(0));
    return detail::make_result("sum", {1}, {total}, {a}, [a](Node& self) {
        auto& ga = a.node()->ensure_grad();
        for (real& g : ga) g += self.grad[0];
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), real(1) / static_cast<real>(a.numel())); }

Tensor gelu(const Tensor& x) {
    const std::size_t n = x.numel();
    std::vector<real> out(n);
    constexpr real inv_sqrt2 = real(0.70710678118654752440);
    for (std::size_t i = 0; i < n; ++i) {
        const real v = x.data()[i];
        out[i] = real(0.5) * v * (real(1) + std::erf(v * inv_sqrt2));
    }
    return detail::make_result("gelu", x.shape(), std::move(out), {x}, [x, n](Node& self) {
        constexpr real inv_sqrt2pi = real(0.39894228040143267794);
        auto& gx = x.node()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const real v = x.data()[i];
            const real cdf = real(0.5) * (real(1) + std::erf(v * inv_sqrt2));
            const real pdf = inv_sqrt2pi * std::exp(real(-0.5) * v * v);
            gx[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor softmax(const Tensor& x, int axis) {
    const int r = static_cast<int>(x.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimensionError("softmax axis out of range");
    const std::size_t len = x.dim(static_cast<std::size_t>(axis));
    std::size_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(static_cast<std::size_t>(i));
    const std::size_t outer = x.numel() / (len * inner);
    std::vector<real> out(x.numel());
    const auto xd = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            real mx = xd[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
            real z = 0;
            for (std::size_t j = 0; j < len; ++j) z += out[base + j * inner] = std::exp(xd[base + j * inner] - mx);
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }
    auto y = std::make_shared<std::vector<real>>(out);
    return detail::make_result("softmax", x.shape(), std::move(out), {x},
                               [x, y, outer, inner, len](Node& self) {
                                   auto& gx = x.node()->ensure_grad();
                                   const auto& p = *y;
                                   for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t in = 0; in < inner; ++in) {
                                           const std::size_t base = o * len * inner + in;
                                           real dot = 0;
                                           for (std::size_t j = 0; j < len; ++j)
                                               dot += self.grad[base + j * inner] * p[base + j * inner];
                                           for (std::size_t j = 0; j < len; ++j) {
                                               const std::size_t i = base + j * inner;
                                               gx[i] += p[i] * (self.grad[i] - dot);
                                           }
                                       }
                               });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
    const std::size_t d = x.shape().back();
    require(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
            "layer_norm affine parameters must be [" + std::to_string(d) + "]");
    const std::size_t rows = x.numel() / d;
    std::vector<real> out(x.numel());
    auto xhat = std::make_shared<std::vector<real>>(x.numel());
    auto inv_std = std::make_shared<std::vector<real>>(rows);
    const auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const real* row = xd.data() + r * d;
        real mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<real>(d);
        real var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<real>(d);
        const real is = real(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const real h = (row[j] - mu) * is;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    return detail::make_result(
        "layer_norm", x.shape(), std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std, rows, d](Node& self) {
            const real* gy = self.grad.data();
            if (gain.requires_grad() || bias.requires_grad()) {
                auto& gg = gain.node()->ensure_grad();
                auto& gb = bias.node()->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
                        gb[j] += gy[r * d + j];
                    }
            }
            if (!x.requires_grad()) return;
            auto& gx = x.node()->ensure_grad();
            std::vector<real> dh(d);
            for (std::size_t r = 0; r < rows; ++r) {
                real m1 = 0, m2 = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    dh[j] = gy[r * d + j] * gain.data()[j];
                    m1 += dh[j];
                    m2 += dh[j] * (*xhat)[r * d + j];
                }
                m1 /= static_cast<real>(d);
                m2 /= static_cast<real>(d);
                for (std::size_t j = 0; j < d; ++j)
                    gx[r * d + j] += (*inv_std)[r] * (dh[j] - m1 - (*xhat)[r * d + j] * m2);
            }
        });
}

Tensor gather_rows(const Tensor& table, std::span<const int> idx) {
    require(table.rank() == 2, "gather_rows expects a 2-D table");
    const std::size_t rows = table.dim(0), d = table.dim(1);
    std::vector<int> ids(idx.begin(), idx.end());
    if (ids.empty()) throw DimensionError("gather_rows with no indices");
    std::vector<real> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows)
            throw IndexError("row id " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows));
        std::copy_n(table.data().begin() + static_cast<long>(static_cast<std::size_t>(ids[i]) * d), d,
                    out.begin() + static_cast<long>(i * d));
    }
    const std::size_t n = ids.size();
    return detail::make_result("gather_rows", {n, d}, std::move(out), {table},
                               [table, ids = std::move(ids), d](Node& self) {
                                   auto& g = table.node()->ensure_grad();
                                   for (std::size_t i = 0; i < ids.size(); ++i) {
                                       real* dst = g.data() + static_cast<std::size_t>(ids[i]) * d;
                                       const real* src = self.grad.data() + i * d;
                                       for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                   }
                               });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& out_shape) {
    if (shape_numel(out_shape) != ids.size()) throw DimensionError("embedding ids do not match requested shape");
    Shape shape = out_shape;
    shape.push_back(table.dim(1));
    return reshape(gather_rows(table, ids), std::move(shape));
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    std::vector<real> out(x.data().begin(), x.data().end());
    return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [x](Node& self) {
        auto& g = x.node()->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor concat_seq(const Tensor& a, const Tensor& b) {
    require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
            "concat_seq: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t batch = a.dim(0), la = a.dim(1), lb = b.dim(1), d = a.dim(2);
    const std::size_t l = la + lb;
    std::vector<real> out(batch * l * d);
    for (std::size_t i = 0; i < batch; ++i) {
        std::copy_n(a.data().begin() + static_cast<long>(i * la * d), la * d, out.begin() + static_cast<long>(i * l * d));
        std::copy_n(b.data().begin() + static_cast<long>(i * lb * d), lb * d,
                    out.begin() + static_cast<long>((i * l + la) * d));
    }
    return detail::make_result("concat_seq", {batch, l, d}, std::move(out), {a, b},
                               [a, b, batch, la, lb, l, d](Node& self) {
                                   for (std::size_t i = 0; i < batch; ++i) {
                                       const real* src = self.grad.data() + i * l * d;
                                       if (a.requires_grad()) {
                                           real* ga = a.node()->ensure_grad().data() + i * la * d;
                                           for (std::size_t j = 0; j < la * d; ++j) ga[j] += src[j];
                                       }
                                       if (b.requires_grad()) {
                                           real* gb = b.node()->ensure_grad().data() + i * lb * d;
                                           for (std::size_t j = 0; j < lb * d; ++j) gb[j] += src[la * d + j];
                                       }
                                   }
                               });
}

Tensor slice_last(const Tensor& x, std::size_t start, std::size_t len) {
    const std::size_t d = x.shape().back();
    require(len > 0 && start + len <= d, "slice_last out of range");
    const std::size_t rows = x.numel() / d;
    std::vector<real> out(rows * len);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(x.data().begin() + static_cast<long>(r * d + start), len, out.begin() + static_cast<long>(r * len));
    Shape shape = x.shape();
    shape.back() = len;
    return detail::make_result("slice_last", std::move(shape), std::move(out), {x},
                               [x, rows, d, start, len](Node& self) {
                                   auto& g = x.node()->ensure_grad();
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t j = 0; j < len; ++j)
                                           g[r * d + start + j] += self.grad[r * len + j];
                               });
}

Tensor select_position(const Tensor& x, std::size_t pos) {
    require(x.rank() == 3 && pos < x.dim(1), "select_position out of range");
    const std::size_t batch = x.dim(0), l = x.dim(1), d = x.dim(2);
    std::vector<real> out(batch * d);
    for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(x.data().begin() + static_cast<long>((b * l + pos) * d), d, out.begin() + static_cast<long>(b * d));
    return detail::make_result("select_position", {batch, d}, std::move(out), {x},
                               [x, batch, l, d, pos](Node& self) {
                                   auto& g = x.node()->ensure_grad();
                                   for (std::size_t b = 0; b < batch; ++b)
                                       for (std::size_t j = 0; j < d; ++j)
                                           g[(b * l + pos) * d + j] += self.grad[b * d + j];
                               });
}

Tensor scale_rows(const Tensor& x, std::span<const real> coeffs) {
    require(x.rank() >= 1 && coeffs.size() == x.dim(0), "scale_rows: one coefficient per row required");
    const std::size_t per = x.numel() / x.dim(0);
    std::vector<real> c(coeffs.begin(), coeffs.end());
    std::vector<real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c[i / per];
    return detail::make_result("scale_rows", x.shape(), std::move(out), {x}, [x, c = std::move(c), per](Node& self) {
        auto& g = x.node()->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c[i / per];
    });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, const AttentionMask& mask) {
    require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention expects [B, L, d] operands");
    const std::size_t batch = q.dim(0), lq = q.dim(1), d = q.dim(2), lk = k.dim(1);
    require(k.dim(0) == batch && v.dim(0) == batch && k.dim(2) == d && v.dim(2) == d && v.dim(1) == lk,
            "attention q/k/v shapes disagree");
    require(heads > 0 && d % heads == 0, "attention: model dim not divisible by head count");
    require(mask.batch == batch && mask.q_len == lq && mask.k_len == lk,
            "attention mask shape does not match [" + std::to_string(batch) + "x" + std::to_string(lq) + "x" +
                std::to_string(lk) + "]");
    const std::size_t dh = d / heads;
    const real sc = real(1) / std::sqrt(static_cast<real>(dh));
    auto probs = std::make_shared<std::vector<real>>(batch * heads * lq * lk, real(0));
    std::vector<real> out(batch * lq * d, real(0));
    const real* qd = q.data().data();
    const real* kd = k.data().data();
    const real* vd = v.data().data();
    std::vector<real> s(lk);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < lq; ++i) {
                const real* qi = qd + (b * lq + i) * d + h * dh;
                real mx = -std::numeric_limits<real>::infinity();
                bool any = false;
                for (std::size_t j = 0; j < lk; ++j) {
                    if (!mask(b, i, j)) continue;
                    const real* kj = kd + (b * lk + j) * d + h * dh;
                    real acc = 0;
                    for (std::size_t t = 0; t < dh; ++t) acc += qi[t] * kj[t];
                    s[j] = acc * sc;
                    mx = std::max(mx, s[j]);
                    any = true;
                }
                if (!any) continue;
                real* p = probs->data() + ((b * heads + h) * lq + i) * lk;
                real z = 0;
                for (std::size_t j = 0; j < lk; ++j) {
                    if (mask(b, i, j)) z += p[j] = std::exp(s[j] - mx);
                }
                real* oi = out.data() + (b * lq + i) * d + h * dh;
                for (std::size_t j = 0; j < lk; ++j) {
                    if (p[j] == real(0)) continue;
                    p[j] /= z;
                    const real* vj = vd + (b * lk + j) * d + h * dh;
                    for (std::size_t t = 0; t < dh; ++t) oi[t] += p[j] * vj[t];
                }
            }
    return detail::make_result(
        "attention", {batch, lq, d}, std::move(out), {q, k, v},
        [q, k, v, probs, batch, heads, lq, lk, d, dh, sc](Node& self) {
            real* gq = q.requires_grad() ? q.node()->ensure_grad().data() : nullptr;
            real* gk = k.requires_grad() ? k.node()->ensure_grad().data() : nullptr;
            real* gv = v.requires_grad() ? v.node()->ensure_grad().data() : nullptr;
            const real* qd = q.data().data();
            const real* kd = k.data().data();
            const real* vd = v.data().data();
            std::vector<real> dp(lk);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < lq; ++i) {
                        const real* p = probs->data() + ((b * heads + h) * lq + i) * lk;
                        const real* go = self.grad.data() + (b * lq + i) * d + h * dh;
                        real dot = 0;
                        for (std::size_t j = 0; j < lk; ++j) {
                            if (p[j] == real(0)) {
                                dp[j] = 0;
                                continue;
                            }
                            const real* vj = vd + (b * lk + j) * d + h * dh;
                            real acc = 0;
                            for (std::size_t t = 0; t < dh; ++t) acc += go[t] * vj[t];
                            dp[j] = acc;
                            dot += acc * p[j];
                            if (gv) {
                                real* gvj = gv + (b * lk + j) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) gvj[t] += p[j] * go[t];
                            }
                        }
                        const real* qi = qd + (b * lq + i) * d + h * dh;
                        real* gqi = gq ? gq + (b * lq + i) * d + h * dh : nullptr;
                        for (std::size_t j = 0; j < lk; ++j) {
                            if (p[j] == real(0)) continue;
                            const real ds = p[j] * (dp[j] - dot) * sc;
                            const real* kj = kd + (b * lk + j) * d + h * dh;
                            if (gqi)
                                for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
                            if (gk) {
                                real* gkj = gk + (b * lk + j) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
                            }
                        }
                    }
        });
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets, int ignore_id) {
    require(logits.rank() == 2, "cross_entropy_logits expects [n, |V|] logits");
    const std::size_t n = logits.dim(0), vocab = logits.dim(1);
    require(targets.size() == n, "cross_entropy_logits: one target per row required");
    std::vector<int> tg(targets.begin(), targets.end());
    std::size_t count = 0;
    for (int t : tg) {
        if (t == ignore_id) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= vocab)
            throw IndexError("target id " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
        ++count;
    }
    auto probs = std::make_shared<std::vector<real>>(n * vocab, real(0));
    real total = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (tg[r] == ignore_id) continue;
        const real* row = logits.data().data() + r * vocab;
        real mx = *std::max_element(row, row + vocab);
        real z = 0;
        real* p = probs->data() + r * vocab;
        for (std::size_t j = 0; j < vocab; ++j) z += p[j] = std::exp(row[j] - mx);
        for (std::size_t j = 0; j < vocab; ++j) p[j] /= z;
        total += -(row[tg[r]] - mx - std::log(z));
    }
    const real inv = count ? real(1) / static_cast<real>(count) : real(0);
    return detail::make_result("cross_entropy_logits", {1}, {total * inv}, {logits},
                               [logits, probs, tg = std::move(tg), ignore_id, n, vocab, inv](Node& self) {
                                   if (inv == real(0)) return;
                                   auto& g = logits.node()->ensure_grad();
                                   const real gs = self.grad[0] * inv;
                                   for (std::size_t r = 0; r < n; ++r) {
                                       if (tg[r] == ignore_id) continue;
                                       const real* p = probs->data() + r * vocab;
                                       real* gr = g.data() + r * vocab;
                                       for (std::size_t j = 0; j < vocab; ++j) gr[j] += gs * p[j];
                                       gr[tg[r]] -= gs;
                                   }
                               });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mse: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.numel();
    real total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const real diff = a.data()[i] - b.data()[i];
        total += diff * diff;
    }
    return detail::make_result("mse", {1}, {total / static_cast<real>(n)}, {a, b}, [a, b, n](Node& self) {
        const real gs = real(2) * self.grad[0] / static_cast<real>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const real diff = a.data()[i] - b.data()[i];
            if (a.requires_grad()) a.node()->ensure_grad()[i] += gs * diff;
            if (b.requires_grad()) b.node()->ensure_grad()[i] -= gs * diff;
        }
    });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator*(real s, const Tensor& a) { return scale(a, s); }

}  // namespace latdial
