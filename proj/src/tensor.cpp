#include "bfa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "bfa/util.hpp"

namespace bfa {

std::string Shape4::str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape4 s, bool requires_grad) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
        throw std::invalid_argument("tensor: negative dimension in shape " + s.str());
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = s;
    t.impl_->data.assign(static_cast<std::size_t>(s.numel()), 0.0f);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape4 s, float value) {
    Tensor t = zeros(s);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from(Shape4 s, std::vector<float> values) {
    if (static_cast<std::int64_t>(values.size()) != s.numel()) {
        throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                    " does not match shape " + s.str());
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = s;
    t.impl_->data = std::move(values);
    return t;
}

Tensor Tensor::scalar(float value) { return from({1, 1, 1, 1}, {value}); }

float& Tensor::at(int n, int c, int h, int w) {
    const Shape4& s = impl_->shape;
    return impl_->data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * s.c + c) * s.h + h) * s.w + w)];
}

float Tensor::at(int n, int c, int h, int w) const {
    const Shape4& s = impl_->shape;
    return impl_->data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * s.c + c) * s.h + h) * s.w + w)];
}

float Tensor::item() const {
    if (numel() != 1) {
        throw std::invalid_argument("tensor: item() on non-scalar shape " + shape().str());
    }
    return impl_->data[0];
}

std::vector<float>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(static_cast<std::size_t>(numel()), 0.0f);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

// ---- Tape -------------------------------------------------------------------

void Tape::record(const Tensor& output, std::function<void()> backward) {
    nodes_.push_back({output.impl(), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + loss.shape().str());
    }
    // Intermediate grads are scratch space for this pass; leaf grads persist.
    for (auto& node : nodes_) {
        auto& g = node.output->grad;
        if (g.empty()) {
            g.assign(node.output->data.size(), 0.0f);
        } else {
            std::fill(g.begin(), g.end(), 0.0f);
        }
    }
    auto& lg = loss.impl()->grad;
    if (lg.empty()) lg.assign(1, 0.0f);
    lg[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->backward();
    }
}

void Tape::clear() { nodes_.clear(); }

// ---- random init ------------------------------------------------------------

Tensor randn(Shape4 s, std::mt19937& rng, float stddev) {
    Tensor t = Tensor::zeros(s);
    std::normal_distribution<float> dist(0.0f, stddev);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

Tensor rand_uniform(Shape4 s, std::mt19937& rng, float lo, float hi) {
    Tensor t = Tensor::zeros(s);
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

// ---- helpers ----------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!(a.shape() == b.shape())) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                                    b.shape().str());
    }
}

bool taped(Tape* tape, const Tensor& a) { return tape != nullptr && a.requires_grad(); }
bool taped(Tape* tape, const Tensor& a, const Tensor& b) {
    return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

// Shared skeleton for elementwise binary ops with per-element backward rules.
template <typename Fwd, typename Bwd>
Tensor ew_binary(Tape* tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    check_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = static_cast<std::size_t>(a.numel());
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    if (taped(tape, a, b)) {
        out.set_requires_grad(true);
        tape->record(out, [a, b, out, bwd] {
            const std::size_t m = static_cast<std::size_t>(out.numel());
            const float* go = out.impl()->grad.data();
            const float* xa = a.data().data();
            const float* xb = b.data().data();
            for (std::size_t i = 0; i < m; ++i) {
                float da = 0.0f, db = 0.0f;
                bwd(xa[i], xb[i], go[i], da, db);
                accum_grad(a, static_cast<std::int64_t>(i), da);
                accum_grad(b, static_cast<std::int64_t>(i), db);
            }
        });
    }
    return out;
}

template <typename Fwd, typename Bwd>
Tensor ew_unary(Tape* tape, const Tensor& x, Fwd fwd, Bwd bwd) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = static_cast<std::size_t>(x.numel());
    const float* px = x.data().data();
    float* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    if (taped(tape, x)) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, bwd] {
            const std::size_t m = static_cast<std::size_t>(out.numel());
            const float* go = out.impl()->grad.data();
            const float* xv = x.data().data();
            const float* yv = out.data().data();
            for (std::size_t i = 0; i < m; ++i) {
                accum_grad(x, static_cast<std::int64_t>(i), go[i] * bwd(xv[i], yv[i]));
            }
        });
    }
    return out;
}

}  // namespace

// ---- elementwise ops ----------------------------------------------------------

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    return ew_binary(
        tape, a, b, "add", [](float x, float y) { return x + y; },
        [](float, float, float g, float& da, float& db) {
            da = g;
            db = g;
        });
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    return ew_binary(
        tape, a, b, "sub", [](float x, float y) { return x - y; },
        [](float, float, float g, float& da, float& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    return ew_binary(
        tape, a, b, "mul", [](float x, float y) { return x * y; },
        [](float x, float y, float g, float& da, float& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(Tape* tape, const Tensor& a, const Tensor& b) {
    return ew_binary(
        tape, a, b, "div", [](float x, float y) { return x / y; },
        [](float x, float y, float g, float& da, float& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Tensor minimum(Tape* tape, const Tensor& a, const Tensor& b) {
    // Subgradient convention: ties route to the first argument.
    return ew_binary(
        tape, a, b, "minimum", [](float x, float y) { return std::min(x, y); },
        [](float x, float y, float g, float& da, float& db) {
            if (x <= y) da = g;
            else db = g;
        });
}

Tensor maximum(Tape* tape, const Tensor& a, const Tensor& b) {
    return ew_binary(
        tape, a, b, "maximum", [](float x, float y) { return std::max(x, y); },
        [](float x, float y, float g, float& da, float& db) {
            if (x >= y) da = g;
            else db = g;
        });
}

Tensor add_scalar(Tape* tape, const Tensor& a, float s) {
    return ew_unary(
        tape, a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Tensor mul_scalar(Tape* tape, const Tensor& a, float s) {
    return ew_unary(
        tape, a, [s](float x) { return x * s; }, [s](float, float) { return s; });
}

Tensor relu(Tape* tape, const Tensor& x) {
    return ew_unary(
        tape, x, [](float v) { return v > 0.0f ? v : 0.0f; },
        [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor silu(Tape* tape, const Tensor& x) {
    // y = x * sigmoid(x); dy/dx = s * (1 + x * (1 - s))
    return ew_unary(
        tape, x,
        [](float v) {
            const float s = 1.0f / (1.0f + std::exp(-v));
            return v * s;
        },
        [](float v, float) {
            const float s = 1.0f / (1.0f + std::exp(-v));
            return s * (1.0f + v * (1.0f - s));
        });
}

Tensor sigmoid(Tape* tape, const Tensor& x) {
    return ew_unary(
        tape, x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
        [](float, float y) { return y * (1.0f - y); });
}

Tensor softplus(Tape* tape, const Tensor& x) {
    // log(1+e^x), linearized above 20 to avoid overflow.
    return ew_unary(
        tape, x, [](float v) { return v > 20.0f ? v : std::log1p(std::exp(v)); },
        [](float v, float) { return 1.0f / (1.0f + std::exp(-v)); });
}

Tensor atan_op(Tape* tape, const Tensor& x) {
    return ew_unary(
        tape, x, [](float v) { return std::atan(v); },
        [](float v, float) { return 1.0f / (1.0f + v * v); });
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(Tape* tape, const Tensor& x) {
    Tensor out = Tensor::zeros({1, 1, 1, 1});
    float acc = 0.0f;
    for (float v : x.data()) acc += v;
    out.data()[0] = acc;
    if (taped(tape, x)) {
        out.set_requires_grad(true);
        tape->record(out, [x, out] {
            const float g = out.impl()->grad[0];
            const std::int64_t n = x.numel();
            for (std::int64_t i = 0; i < n; ++i) accum_grad(x, i, g);
        });
    }
    return out;
}

Tensor mean(Tape* tape, const Tensor& x) {
    if (x.numel() == 0) throw std::invalid_argument("mean: empty tensor");
    return mul_scalar(tape, sum(tape, x), 1.0f / static_cast<float>(x.numel()));
}

// ---- shape ops -------------------------------------------------------------------

Tensor reshape(Tape* tape, const Tensor& x, Shape4 s) {
    if (s.numel() != x.numel()) {
        throw std::invalid_argument("reshape: numel mismatch " + x.shape().str() + " -> " + s.str());
    }
    Tensor out = Tensor::from(s, x.data());
    if (taped(tape, x)) {
        out.set_requires_grad(true);
        tape->record(out, [x, out] {
            const std::int64_t n = x.numel();
            const float* go = out.impl()->grad.data();
            for (std::int64_t i = 0; i < n; ++i) accum_grad(x, i, go[i]);
        });
    }
    return out;
}

Tensor concat_channels(Tape* tape, const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
    const Shape4 s0 = xs[0].shape();
    int c_total = 0;
    for (const auto& x : xs) {
        const Shape4& s = x.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
            throw std::invalid_argument("concat_channels: spatial mismatch " + s0.str() + " vs " + s.str());
        }
        c_total += s.c;
    }
    Tensor out = Tensor::zeros({s0.n, c_total, s0.h, s0.w});
    const std::int64_t hw = static_cast<std::int64_t>(s0.h) * s0.w;
    bool any_grad = false;
    int c_off = 0;
    for (const auto& x : xs) {
        any_grad = any_grad || x.requires_grad();
        const int cx = x.shape().c;
        for (int n = 0; n < s0.n; ++n) {
            const float* src = x.data().data() + n * cx * hw;
            float* dst = out.data().data() + (static_cast<std::int64_t>(n) * c_total + c_off) * hw;
            std::copy(src, src + cx * hw, dst);
        }
        c_off += cx;
    }
    if (tape != nullptr && any_grad) {
        out.set_requires_grad(true);
        tape->record(out, [xs, out, c_total, hw, s0] {
            int off = 0;
            for (const auto& x : xs) {
                const int cx = x.shape().c;
                if (x.requires_grad()) {
                    for (int n = 0; n < s0.n; ++n) {
                        const float* go =
                            out.impl()->grad.data() + (static_cast<std::int64_t>(n) * c_total + off) * hw;
                        for (std::int64_t i = 0; i < cx * hw; ++i) {
                            accum_grad(x, n * cx * hw + i, go[i]);
                        }
                    }
                }
                off += cx;
            }
        });
    }
    return out;
}

Tensor slice_channels(Tape* tape, const Tensor& x, int c_begin, int c_end) {
    const Shape4& s = x.shape();
    if (c_begin < 0 || c_end > s.c || c_begin >= c_end) {
        throw std::invalid_argument("slice_channels: invalid range [" + std::to_string(c_begin) + "," +
                                    std::to_string(c_end) + ") for shape " + s.str());
    }
    const int cs = c_end - c_begin;
    const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
    Tensor out = Tensor::zeros({s.n, cs, s.h, s.w});
    for (int n = 0; n < s.n; ++n) {
        const float* src = x.data().data() + (static_cast<std::int64_t>(n) * s.c + c_begin) * hw;
        float* dst = out.data().data() + static_cast<std::int64_t>(n) * cs * hw;
        std::copy(src, src + cs * hw, dst);
    }
    if (taped(tape, x)) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, c_begin, cs, hw, s] {
            for (int n = 0; n < s.n; ++n) {
                const float* go = out.impl()->grad.data() + static_cast<std::int64_t>(n) * cs * hw;
                const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + c_begin) * hw;
                for (std::int64_t i = 0; i < cs * hw; ++i) accum_grad(x, base + i, go[i]);
            }
        });
    }
    return out;
}

Tensor transpose_hw(Tape* tape, const Tensor& x) {
    const Shape4& s = x.shape();
    Tensor out = Tensor::zeros({s.n, s.c, s.w, s.h});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) out.at(n, c, w, h) = x.at(n, c, h, w);
    if (taped(tape, x)) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, s] {
            const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c)
                    for (int h = 0; h < s.h; ++h)
                        for (int w = 0; w < s.w; ++w) {
                            const std::int64_t src = ((static_cast<std::int64_t>(n) * s.c + c) * s.w + w) * s.h + h;
                            accum_grad(x, (static_cast<std::int64_t>(n) * s.c + c) * hw + h * s.w + w,
                                       out.impl()->grad[static_cast<std::size_t>(src)]);
                        }
        });
    }
    return out;
}

Tensor nchw_to_heads(Tape* tape, const Tensor& x, int heads) {
    const Shape4& s = x.shape();
    if (heads < 1 || s.c % heads != 0) {
        throw std::invalid_argument("nchw_to_heads: channels " + std::to_string(s.c) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    const int d = s.c / heads;
    const int t = s.h * s.w;
    Tensor out = Tensor::zeros({s.n, heads, t, d});
    for (int n = 0; n < s.n; ++n)
        for (int i = 0; i < heads; ++i)
            for (int tt = 0; tt < t; ++tt)
                for (int j = 0; j < d; ++j)
                    out.at(n, i, tt, j) = x.at(n, i * d + j, tt / s.w, tt % s.w);
    if (taped(tape, x)) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, heads, d, t, s] {
            for (int n = 0; n < s.n; ++n)
                for (int i = 0; i < heads; ++i)
                    for (int tt = 0; tt < t; ++tt)
                        for (int j = 0; j < d; ++j) {
                            const std::int64_t src =
                                ((static_cast<std::int64_t>(n) * heads + i) * t + tt) * d + j;
                            const std::int64_t dst =
                                ((static_cast<std::int64_t>(n) * s.c + i * d + j) * s.h + tt / s.w) * s.w +
                                tt % s.w;
                            accum_grad(x, dst, out.impl()->grad[static_cast<std::size_t>(src)]);
                        }
        });
    }
    return out;
}

Tensor heads_to_nchw(Tape* tape, const Tensor& x, int h, int w) {
    const Shape4& s = x.shape();  // (N, heads, T, d)
    if (s.h != h * w) {
        throw std::invalid_argument("heads_to_nchw: token count " + std::to_string(s.h) +
                                    " does not match " + std::to_string(h) + "x" + std::to_string(w));
    }
    const int c = s.c * s.w;
    Tensor out = Tensor::zeros({s.n, c, h, w});
    for (int n = 0; n < s.n; ++n)
        for (int i = 0; i < s.c; ++i)
            for (int tt = 0; tt < s.h; ++tt)
                for (int j = 0; j < s.w; ++j)
                    out.at(n, i * s.w + j, tt / w, tt % w) = x.at(n, i, tt, j);
    if (taped(tape, x)) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, h, w, s, c] {
            for (int n = 0; n < s.n; ++n)
                for (int i = 0; i < s.c; ++i)
                    for (int tt = 0; tt < s.h; ++tt)
                        for (int j = 0; j < s.w; ++j) {
                            const std::int64_t src =
                                ((static_cast<std::int64_t>(n) * c + i * s.w + j) * h + tt / w) * w + tt % w;
                            const std::int64_t dst =
                                ((static_cast<std::int64_t>(n) * s.c + i) * s.h + tt) * s.w + j;
                            accum_grad(x, dst, out.impl()->grad[static_cast<std::size_t>(src)]);
                        }
        });
    }
    return out;
}

Tensor scale_channels(Tape* tape, const Tensor& x, const Tensor& w) {
    const Shape4& s = x.shape();
    const Shape4& ws = w.shape();
    if (ws.n != s.n || ws.c != s.c || ws.h != 1 || ws.w != 1) {
        throw std::invalid_argument("scale_channels: weight shape " + ws.str() + " does not match " + s.str());
    }
    Tensor out = Tensor::zeros(s);
    const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const float scale = w.at(n, c, 0, 0);
            const float* src = x.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * hw;
            float* dst = out.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * scale;
        }
    if (taped(tape, x, w)) {
        out.set_requires_grad(true);
        tape->record(out, [x, w, out, s, hw] {
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + c) * hw;
                    const float scale = w.at(n, c, 0, 0);
                    float wg = 0.0f;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const float g = out.impl()->grad[static_cast<std::size_t>(base + i)];
                        accum_grad(x, base + i, g * scale);
                        wg += g * x.data()[static_cast<std::size_t>(base + i)];
                    }
                    accum_grad(w, static_cast<std::int64_t>(n) * s.c + c, wg);
                }
        });
    }
    return out;
}

Tensor mul_bcast_hw(Tape* tape, const Tensor& x, const Tensor& m) {
    const Shape4& s = x.shape();
    const Shape4& ms = m.shape();
    if (ms.n != 1 || ms.c != 1 || ms.h != s.h || ms.w != s.w) {
        throw std::invalid_argument("mul_bcast_hw: mask shape " + ms.str() + " does not match " + s.str());
    }
    Tensor out = Tensor::zeros(s);
    const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
    const float* pm = m.data().data();
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(s.n) * s.c; ++nc) {
        const float* src = x.data().data() + nc * hw;
        float* dst = out.data().data() + nc * hw;
        for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * pm[i];
    }
    if (taped(tape, x, m)) {
        out.set_requires_grad(true);
        tape->record(out, [x, m, out, s, hw] {
            const float* pm = m.data().data();
            for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(s.n) * s.c; ++nc) {
                const float* go = out.impl()->grad.data() + nc * hw;
                const float* px = x.data().data() + nc * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    accum_grad(x, nc * hw + i, go[i] * pm[i]);
                    accum_grad(m, i, go[i] * px[i]);
                }
            }
        });
    }
    return out;
}

Tensor gather_hw(Tape* tape, const Tensor& x, const std::vector<CellIndex>& cells) {
    const Shape4& s = x.shape();
    const int m = static_cast<int>(cells.size());
    if (m == 0) throw std::invalid_argument("gather_hw: empty cell list");
    for (const auto& cell : cells) {
        if (cell.n < 0 || cell.n >= s.n || cell.y < 0 || cell.y >= s.h || cell.x < 0 || cell.x >= s.w) {
            throw std::invalid_argument("gather_hw: cell out of bounds for shape " + s.str());
        }
    }
    Tensor out = Tensor::zeros({1, s.c, 1, m});
    for (int j = 0; j < m; ++j)
        for (int c = 0; c < s.c; ++c) out.at(0, c, 0, j) = x.at(cells[j].n, c, cells[j].y, cells[j].x);
    if (taped(tape, x)) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, cells, s, m] {
            for (int j = 0; j < m; ++j)
                for (int c = 0; c < s.c; ++c) {
                    const std::int64_t dst =
                        ((static_cast<std::int64_t>(cells[j].n) * s.c + c) * s.h + cells[j].y) * s.w +
                        cells[j].x;
                    accum_grad(x, dst, out.impl()->grad[static_cast<std::size_t>(c * m + j)]);
                }
        });
    }
    return out;
}

// ---- matrix ops ---------------------------------------------------------------

void sgemm_acc(int m, int k, int p, const float* a, const float* b, float* c) {
    // i-k-j loop order: unit-stride inner loop, per-element accumulation order
    // over K still matches the naive triple loop.
    parallel_for(m, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            float* crow = c + i * p;
            const float* arow = a + i * k;
            for (int kk = 0; kk < k; ++kk) {
                const float av = arow[kk];
                const float* brow = b + static_cast<std::int64_t>(kk) * p;
                for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

namespace {

// dA(MxK) += dC(MxP) * B^T, dB(KxP) += A^T * dC
void sgemm_backward(int m, int k, int p, const float* a, const float* b, const float* dc, float* da,
                    float* db) {
    if (da != nullptr) {
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                float acc = 0.0f;
                const float* dcrow = dc + static_cast<std::int64_t>(i) * p;
                const float* brow = b + static_cast<std::int64_t>(kk) * p;
                for (int j = 0; j < p; ++j) acc += dcrow[j] * brow[j];
                da[static_cast<std::int64_t>(i) * k + kk] += acc;
            }
    }
    if (db != nullptr) {
        for (int kk = 0; kk < k; ++kk) {
            float* dbrow = db + static_cast<std::int64_t>(kk) * p;
            for (int i = 0; i < m; ++i) {
                const float av = a[static_cast<std::int64_t>(i) * k + kk];
                const float* dcrow = dc + static_cast<std::int64_t>(i) * p;
                for (int j = 0; j < p; ++j) dbrow[j] += av * dcrow[j];
            }
        }
    }
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    const Shape4& sa = a.shape();
    const Shape4& sb = b.shape();
    if (sa.n != 1 || sa.c != 1 || sb.n != 1 || sb.c != 1) {
        throw std::invalid_argument("matmul: expects (1,1,M,K) x (1,1,K,P), got " + sa.str() + " x " +
                                    sb.str());
    }
    if (sa.w != sb.h) {
        throw std::invalid_argument("matmul: inner dimensions disagree: " + sa.str() + " x " + sb.str());
    }
    Tensor out = Tensor::zeros({1, 1, sa.h, sb.w});
    sgemm_acc(sa.h, sa.w, sb.w, a.data().data(), b.data().data(), out.data().data());
    if (taped(tape, a, b)) {
        out.set_requires_grad(true);
        tape->record(out, [a, b, out, sa, sb] {
            float* da = nullptr;
            float* db = nullptr;
            if (a.requires_grad()) {
                if (a.impl()->grad.empty()) a.impl()->grad.assign(a.data().size(), 0.0f);
                da = a.impl()->grad.data();
            }
            if (b.requires_grad()) {
                if (b.impl()->grad.empty()) b.impl()->grad.assign(b.data().size(), 0.0f);
                db = b.impl()->grad.data();
            }
            sgemm_backward(sa.h, sa.w, sb.w, a.data().data(), b.data().data(), out.impl()->grad.data(), da,
                           db);
        });
    }
    return out;
}

Tensor bmm(Tape* tape, const Tensor& a, const Tensor& b) {
    const Shape4& sa = a.shape();
    const Shape4& sb = b.shape();
    if (sa.n != sb.n || sa.c != sb.c) {
        throw std::invalid_argument("bmm: batch dims disagree: " + sa.str() + " x " + sb.str());
    }
    if (sa.w != sb.h) {
        throw std::invalid_argument("bmm: inner dimensions disagree: " + sa.str() + " x " + sb.str());
    }
    const std::int64_t batch = static_cast<std::int64_t>(sa.n) * sa.c;
    const int m = sa.h, k = sa.w, p = sb.w;
    Tensor out = Tensor::zeros({sa.n, sa.c, m, p});
    parallel_for(batch, [&](std::int64_t b0, std::int64_t b1) {
        for (std::int64_t bi = b0; bi < b1; ++bi) {
            const float* pa = a.data().data() + bi * m * k;
            const float* pb = b.data().data() + bi * static_cast<std::int64_t>(k) * p;
            float* pc = out.data().data() + bi * static_cast<std::int64_t>(m) * p;
            for (int i = 0; i < m; ++i) {
                float* crow = pc + static_cast<std::int64_t>(i) * p;
                for (int kk = 0; kk < k; ++kk) {
                    const float av = pa[static_cast<std::int64_t>(i) * k + kk];
                    const float* brow = pb + static_cast<std::int64_t>(kk) * p;
                    for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
                }
            }
        }
    });
    if (taped(tape, a, b)) {
        out.set_requires_grad(true);
        tape->record(out, [a, b, out, batch, m, k, p] {
            float* da = nullptr;
            float* db = nullptr;
            if (a.requires_grad()) {
                if (a.impl()->grad.empty()) a.impl()->grad.assign(a.data().size(), 0.0f);
                da = a.impl()->grad.data();
            }
            if (b.requires_grad()) {
                if (b.impl()->grad.empty()) b.impl()->grad.assign(b.data().size(), 0.0f);
                db = b.impl()->grad.data();
            }
            for (std::int64_t bi = 0; bi < batch; ++bi) {
                sgemm_backward(m, k, p, a.data().data() + bi * m * k,
                               b.data().data() + bi * static_cast<std::int64_t>(k) * p,
                               out.impl()->grad.data() + bi * static_cast<std::int64_t>(m) * p,
                               da ? da + bi * m * k : nullptr,
                               db ? db + bi * static_cast<std::int64_t>(k) * p : nullptr);
            }
        });
    }
    return out;
}

Tensor softmax_lastdim(Tape* tape, const Tensor& x) {
    const Shape4& s = x.shape();
    if (s.w < 1) throw std::invalid_argument("softmax_lastdim: empty rows in shape " + s.str());
    const std::int64_t rows = x.numel() / s.w;
    Tensor out = Tensor::zeros(s);
    parallel_for(rows, [&](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
            const float* px = x.data().data() + r * s.w;
            float* po = out.data().data() + r * s.w;
            float mx = px[0];
            for (int j = 1; j < s.w; ++j) mx = std::max(mx, px[j]);
            float denom = 0.0f;
            for (int j = 0; j < s.w; ++j) {
                po[j] = std::exp(px[j] - mx);
                denom += po[j];
            }
            const float inv = 1.0f / denom;
            for (int j = 0; j < s.w; ++j) po[j] *= inv;
        }
    });
    if (taped(tape, x)) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, rows, s] {
            for (std::int64_t r = 0; r < rows; ++r) {
                const float* y = out.data().data() + r * s.w;
                const float* go = out.impl()->grad.data() + r * s.w;
                float dot = 0.0f;
                for (int j = 0; j < s.w; ++j) dot += go[j] * y[j];
                for (int j = 0; j < s.w; ++j) accum_grad(x, r * s.w + j, y[j] * (go[j] - dot));
            }
        });
    }
    return out;
}

}  // namespace bfa
