#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace bfa {

// Dense NCHW shape. All tensors in the toolkit are 4-D; vectors and matrices
// ride in the trailing dimensions of a (1,1,H,W)-style shape.
struct Shape4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * static_cast<std::int64_t>(h) * w;
    }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
};

struct TensorImpl {
    Shape4 shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first touched by backward
    bool requires_grad = false;
};

// Shared-storage handle over a dense float32 buffer. Tensors are immutable
// once recorded on a tape; parameter updates happen between tapes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape4 s, bool requires_grad = false);
    static Tensor full(Shape4 s, float value);
    static Tensor from(Shape4 s, std::vector<float> values);
    static Tensor scalar(float value);

    bool defined() const { return impl_ != nullptr; }
    const Shape4& shape() const { return impl_->shape; }
    std::int64_t numel() const { return impl_->shape.numel(); }

    std::vector<float>& data() { return impl_->data; }
    const std::vector<float>& data() const { return impl_->data; }

    float& at(int n, int c, int h, int w);
    float at(int n, int c, int h, int w) const;

    // Value of a one-element tensor.
    float item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    // Gradient buffer, allocated (zero-filled) on first access.
    std::vector<float>& grad();
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad();

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape: a flat record of applied operations. Operations are
// recorded in application order, which is a topological order of the data
// flow; backward() replays them in exact reverse. Output (intermediate)
// gradients are cleared at the start of every backward pass while leaf
// gradients persist, so repeated backward calls accumulate into leaves.
class Tape {
public:
    void record(const Tensor& output, std::function<void()> backward);
    void backward(const Tensor& loss);
    void clear();
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::shared_ptr<TensorImpl> output;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
};

// Accumulates v into t's gradient if t participates in differentiation.
inline void accum_grad(const Tensor& t, std::int64_t i, float v) {
    if (t.impl()->requires_grad) {
        auto& g = t.impl()->grad;
        if (g.empty()) g.assign(static_cast<std::size_t>(t.numel()), 0.0f);
        g[static_cast<std::size_t>(i)] += v;
    }
}

// ---- random init ---------------------------------------------------------

Tensor randn(Shape4 s, std::mt19937& rng, float stddev = 1.0f);
Tensor rand_uniform(Shape4 s, std::mt19937& rng, float lo = 0.0f, float hi = 1.0f);

// ---- elementwise ops ------------------------------------------------------

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor div(Tape* tape, const Tensor& a, const Tensor& b);
Tensor minimum(Tape* tape, const Tensor& a, const Tensor& b);
Tensor maximum(Tape* tape, const Tensor& a, const Tensor& b);

Tensor add_scalar(Tape* tape, const Tensor& a, float s);
Tensor mul_scalar(Tape* tape, const Tensor& a, float s);

Tensor relu(Tape* tape, const Tensor& x);
Tensor silu(Tape* tape, const Tensor& x);
Tensor sigmoid(Tape* tape, const Tensor& x);
Tensor softplus(Tape* tape, const Tensor& x);
Tensor atan_op(Tape* tape, const Tensor& x);

// ---- reductions -----------------------------------------------------------

Tensor sum(Tape* tape, const Tensor& x);   // -> (1,1,1,1)
Tensor mean(Tape* tape, const Tensor& x);  // -> (1,1,1,1)

// ---- shape ops (all materialize copies) ------------------------------------

Tensor reshape(Tape* tape, const Tensor& x, Shape4 s);
Tensor concat_channels(Tape* tape, const std::vector<Tensor>& xs);
Tensor slice_channels(Tape* tape, const Tensor& x, int c_begin, int c_end);
Tensor transpose_hw(Tape* tape, const Tensor& x);  // (N,C,H,W) -> (N,C,W,H)

// Token layout for multi-head attention: (N, heads*d, H, W) <-> (N, heads, H*W, d).
Tensor nchw_to_heads(Tape* tape, const Tensor& x, int heads);
Tensor heads_to_nchw(Tape* tape, const Tensor& x, int h, int w);

// Per-channel scaling: x (N,C,H,W) * w (N,C,1,1), broadcast over H,W.
Tensor scale_channels(Tape* tape, const Tensor& x, const Tensor& w);
// Elementwise multiply with a spatial mask m (1,1,H,W), broadcast over N,C.
Tensor mul_bcast_hw(Tape* tape, const Tensor& x, const Tensor& m);

// Gathers columns x[n,:,y,x] for a list of (n,y,x) triples -> (1,C,1,M).
struct CellIndex {
    int n, y, x;
};
Tensor gather_hw(Tape* tape, const Tensor& x, const std::vector<CellIndex>& cells);

// ---- matrix ops -----------------------------------------------------------

// Strict 2-D product: a viewed as (M,K) must be (1,1,M,K), b (1,1,K,P).
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
// Batched product over the leading two axes: (N,C,M,K) x (N,C,K,P) -> (N,C,M,P).
Tensor bmm(Tape* tape, const Tensor& a, const Tensor& b);

// Row softmax over the last dimension, with max-subtraction for stability.
Tensor softmax_lastdim(Tape* tape, const Tensor& x);

// C += A(MxK) * B(KxP), row-major. Accumulation order over K matches the
// naive per-element loop, so results are bit-equal to a plain triple loop.
void sgemm_acc(int m, int k, int p, const float* a, const float* b, float* c);

}  // namespace bfa
