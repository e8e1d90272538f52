#pragma once

// Dense tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Every op allocates a fresh
// node; the only mutation after construction is gradient accumulation (and
// parameter updates between graphs, done by the optimizer and loaders).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace latdial {

#ifdef LATDIAL_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, real value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
    static Tensor scalar(real value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const real> data() const;
    // Writable view for leaf tensors (optimizer updates, checkpoint loads).
    // Must not be used on a tensor whose graph is still pending backward().
    std::span<real> mutable_data();
    real item() const;
    real at(std::size_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const real> grad() const;
    std::span<real> mutable_grad();
    void zero_grad();

    // Same values, no graph history, no gradient.
    Tensor detach() const;

    // Accumulates d(this)/d(leaf) into every reachable leaf that requires grad.
    // `this` must be a scalar; the graph is released afterwards and a second
    // call on the same tensor throws ContractError.
    void backward() const;

    // Identity of the underlying node (two handles onto the same tensor).
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Op authors only.
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

  private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

using BackwardFn = std::function<void(Node& self)>;

struct Node {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;
    bool requires_grad = false;
    bool consumed = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    std::vector<real>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), real(0));
        return grad;
    }
};

// Builds an op result. Parents and the backward closure are only retained
// when gradient recording is on and some parent requires grad.
Tensor make_result(const char* op, Shape shape, std::vector<real> data,
                   std::vector<Tensor> parents, BackwardFn backward);

}  // namespace detail

// Disables graph recording for its lifetime (inference paths).
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

// Finite-value checking on every op output; on by default.
void set_finite_checks(bool enabled);
bool finite_checks();

// Allowed-attention pattern for `attention`, shape [batch, q_len, k_len].
struct AttentionMask {
    std::size_t batch = 0;
    std::size_t q_len = 0;
    std::size_t k_len = 0;
    std::vector<std::uint8_t> allowed;

    bool operator()(std::size_t b, std::size_t q, std::size_t k) const {
        return allowed[(b * q_len + q) * k_len + k] != 0;
    }

    // Keys allowed where key_valid[b * k_len + k] != 0, for every query.
    static AttentionMask from_key_padding(std::size_t batch, std::size_t q_len, std::size_t k_len,
                                          std::span<const std::uint8_t> key_valid);
    // Causal self-attention over `len` tokens with `prefix` always-visible
    // memory slots in front of the keys. `memory_visible=false` masks them out.
    static AttentionMask causal_with_prefix(std::size_t batch, std::size_t len, std::size_t prefix,
                                            bool memory_visible = true);
};

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * w[in, out] (+ bias[out])
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor{});

// Elementwise add. `b` may be a scalar or match a trailing suffix of a's shape
// (the leading-batch case); anything else is a DimensionError.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor gelu(const Tensor& x);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps = real(1e-5));

// Rows of a 2-D tensor selected by index, result [idx.size(), cols].
Tensor gather_rows(const Tensor& table, std::span<const int> idx);
// Table lookup reshaped to out_shape + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& out_shape);

Tensor reshape(const Tensor& x, Shape shape);
// Concatenate [B, La, d] and [B, Lb, d] along the sequence axis.
Tensor concat_seq(const Tensor& a, const Tensor& b);
// Columns [start, start+len) of the last axis.
Tensor slice_last(const Tensor& x, std::size_t start, std::size_t len);
// x[:, pos, :] for a [B, L, d] tensor.
Tensor select_position(const Tensor& x, std::size_t pos);
// Row b of x[B, ...] scaled by the constant coeffs[b].
Tensor scale_rows(const Tensor& x, std::span<const real> coeffs);

// Multi-head scaled dot-product attention over already-projected q/k/v.
// q [B, Lq, d], k and v [B, Lk, d]; rows with no allowed key output zeros.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask& mask);

// Mean over non-ignored rows of -log softmax(logits)[target]. All rows
// ignored gives 0 with zero gradient.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets, int ignore_id);
// Mean squared error over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator*(real s, const Tensor& a);

}  // namespace latdial
