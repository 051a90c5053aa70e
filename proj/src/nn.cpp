#include "bfa/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "bfa/util.hpp"

namespace bfa {

int conv_out_size(int in, int k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

namespace {

// Unrolls x[n] (one group slice) into columns of shape (Cg*k*k) x (Ho*Wo).
// Row order is (ci, ky, kx), matching the naive loop's summation order.
void im2col(const float* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, float* cols) {
    const std::int64_t area = static_cast<std::int64_t>(ho) * wo;
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* dst = cols + ((static_cast<std::int64_t>(ci) * k + ky) * k + kx) * area;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst + static_cast<std::int64_t>(oy) * wo,
                                  dst + static_cast<std::int64_t>(oy + 1) * wo, 0.0f);
                        continue;
                    }
                    const float* src = x + (static_cast<std::int64_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[static_cast<std::int64_t>(oy) * wo + ox] =
                            (ix >= 0 && ix < w) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

// Scatter-adds columns back into the input gradient.
void col2im_acc(const float* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
                float* dx) {
    const std::int64_t area = static_cast<std::int64_t>(ho) * wo;
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* src = cols + ((static_cast<std::int64_t>(ci) * k + ky) * k + kx) * area;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    float* dst = dx + (static_cast<std::int64_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[static_cast<std::int64_t>(oy) * wo + ox];
                    }
                }
            }
        }
    }
}

void check_conv_args(const Tensor& x, const ConvParams& p) {
    const Shape4& s = x.shape();
    const Shape4& ws = p.weight.shape();
    if (ws.h != ws.w) throw std::invalid_argument("conv2d: non-square kernel " + ws.str());
    if (p.groups < 1 || ws.n % p.groups != 0) {
        throw std::invalid_argument("conv2d: output channels " + std::to_string(ws.n) +
                                    " not divisible by groups " + std::to_string(p.groups));
    }
    if (s.c != ws.c * p.groups) {
        throw std::invalid_argument("conv2d: input channels " + std::to_string(s.c) + " != weight expects " +
                                    std::to_string(ws.c * p.groups) + " (weight " + ws.str() + ", groups " +
                                    std::to_string(p.groups) + ")");
    }
    if (p.stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (p.padding < 0) throw std::invalid_argument("conv2d: negative padding");
    if (p.bias.defined() && p.bias.numel() != ws.n) {
        throw std::invalid_argument("conv2d: bias size " + std::to_string(p.bias.numel()) +
                                    " != out channels " + std::to_string(ws.n));
    }
    const int ho = conv_out_size(s.h, ws.h, p.stride, p.padding);
    const int wo = conv_out_size(s.w, ws.w, p.stride, p.padding);
    if (ho < 1 || wo < 1) {
        throw std::invalid_argument("conv2d: non-positive output size for input " + s.str() + " kernel " +
                                    std::to_string(ws.h) + " stride " + std::to_string(p.stride) +
                                    " padding " + std::to_string(p.padding));
    }
}

}  // namespace

Tensor conv2d(Tape* tape, const Tensor& x, const ConvParams& p) {
    check_conv_args(x, p);
    const Shape4& s = x.shape();
    const Shape4& ws = p.weight.shape();
    const int k = ws.h;
    const int cg_in = ws.c;              // input channels per group
    const int cg_out = ws.n / p.groups;  // output channels per group
    const int ho = conv_out_size(s.h, k, p.stride, p.padding);
    const int wo = conv_out_size(s.w, k, p.stride, p.padding);
    const std::int64_t area = static_cast<std::int64_t>(ho) * wo;
    const std::int64_t kdim = static_cast<std::int64_t>(cg_in) * k * k;

    Tensor out = Tensor::zeros({s.n, ws.n, ho, wo});
    std::vector<float> cols(static_cast<std::size_t>(kdim * area));
    for (int n = 0; n < s.n; ++n) {
        for (int g = 0; g < p.groups; ++g) {
            const float* xg =
                x.data().data() + (static_cast<std::int64_t>(n) * s.c + g * cg_in) * s.h * s.w;
            im2col(xg, cg_in, s.h, s.w, k, p.stride, p.padding, ho, wo, cols.data());
            const float* wg = p.weight.data().data() + static_cast<std::int64_t>(g) * cg_out * kdim;
            float* og = out.data().data() + (static_cast<std::int64_t>(n) * ws.n + g * cg_out) * area;
            sgemm_acc(cg_out, static_cast<int>(kdim), static_cast<int>(area), wg, cols.data(), og);
        }
    }
    if (p.bias.defined()) {
        for (int n = 0; n < s.n; ++n)
            for (int co = 0; co < ws.n; ++co) {
                const float b = p.bias.data()[static_cast<std::size_t>(co)];
                float* og = out.data().data() + (static_cast<std::int64_t>(n) * ws.n + co) * area;
                for (std::int64_t i = 0; i < area; ++i) og[i] += b;
            }
    }

    const bool wants = tape != nullptr && (x.requires_grad() || p.weight.requires_grad() ||
                                           (p.bias.defined() && p.bias.requires_grad()));
    if (wants) {
        out.set_requires_grad(true);
        const Tensor weight = p.weight;
        const Tensor bias = p.bias;
        const int stride = p.stride, pad = p.padding, groups = p.groups;
        tape->record(out, [x, weight, bias, out, s, ws, k, cg_in, cg_out, ho, wo, area, kdim, stride, pad,
                           groups] {
            const float* gout = out.impl()->grad.data();
            std::vector<float> cols(static_cast<std::size_t>(kdim * area));
            std::vector<float> dcols(static_cast<std::size_t>(kdim * area));
            float* dx = nullptr;
            float* dw = nullptr;
            if (x.requires_grad()) {
                if (x.impl()->grad.empty()) x.impl()->grad.assign(x.data().size(), 0.0f);
                dx = x.impl()->grad.data();
            }
            if (weight.requires_grad()) {
                if (weight.impl()->grad.empty()) weight.impl()->grad.assign(weight.data().size(), 0.0f);
                dw = weight.impl()->grad.data();
            }
            for (int n = 0; n < s.n; ++n) {
                for (int g = 0; g < groups; ++g) {
                    const float* dyg = gout + (static_cast<std::int64_t>(n) * ws.n + g * cg_out) * area;
                    if (dw != nullptr || dx != nullptr) {
                        const float* xg =
                            x.data().data() + (static_cast<std::int64_t>(n) * s.c + g * cg_in) * s.h * s.w;
                        im2col(xg, cg_in, s.h, s.w, k, stride, pad, ho, wo, cols.data());
                    }
                    if (dw != nullptr) {
                        // dW += dY * cols^T
                        float* dwg = dw + static_cast<std::int64_t>(g) * cg_out * kdim;
                        for (int co = 0; co < cg_out; ++co) {
                            const float* dyrow = dyg + static_cast<std::int64_t>(co) * area;
                            float* dwrow = dwg + static_cast<std::int64_t>(co) * kdim;
                            for (std::int64_t kk = 0; kk < kdim; ++kk) {
                                const float* crow = cols.data() + kk * area;
                                float acc = 0.0f;
                                for (std::int64_t i = 0; i < area; ++i) acc += dyrow[i] * crow[i];
                                dwrow[kk] += acc;
                            }
                        }
                    }
                    if (dx != nullptr) {
                        // dcols = W^T * dY, then scatter back
                        std::fill(dcols.begin(), dcols.end(), 0.0f);
                        const float* wg =
                            weight.data().data() + static_cast<std::int64_t>(g) * cg_out * kdim;
                        for (int co = 0; co < cg_out; ++co) {
                            const float* wrow = wg + static_cast<std::int64_t>(co) * kdim;
                            const float* dyrow = dyg + static_cast<std::int64_t>(co) * area;
                            for (std::int64_t kk = 0; kk < kdim; ++kk) {
                                float* drow = dcols.data() + kk * area;
                                const float wv = wrow[kk];
                                for (std::int64_t i = 0; i < area; ++i) drow[i] += wv * dyrow[i];
                            }
                        }
                        float* dxg = dx + (static_cast<std::int64_t>(n) * s.c + g * cg_in) * s.h * s.w;
                        col2im_acc(dcols.data(), cg_in, s.h, s.w, k, stride, pad, ho, wo, dxg);
                    }
                }
            }
            if (bias.defined() && bias.requires_grad()) {
                for (int co = 0; co < ws.n; ++co) {
                    float acc = 0.0f;
                    for (int n = 0; n < s.n; ++n) {
                        const float* dyrow = gout + (static_cast<std::int64_t>(n) * ws.n + co) * area;
                        for (std::int64_t i = 0; i < area; ++i) acc += dyrow[i];
                    }
                    accum_grad(bias, co, acc);
                }
            }
        });
    }
    return out;
}

Tensor depthwise_conv2d(Tape* tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    const Shape4& s = x.shape();
    const Shape4& ws = weight.shape();
    const int k = ws.h;
    if (k % 2 == 0) throw std::invalid_argument("depthwise_conv2d: even kernel size " + std::to_string(k));
    if (ws.n != s.c || ws.c != 1 || ws.w != k) {
        throw std::invalid_argument("depthwise_conv2d: weight " + ws.str() + " does not match input " +
                                    s.str());
    }
    if (bias.defined() && bias.numel() != s.c) {
        throw std::invalid_argument("depthwise_conv2d: bias size mismatch");
    }
    const int pad = (k - 1) / 2;
    Tensor out = Tensor::zeros(s);
    const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    parallel_for(static_cast<std::int64_t>(s.n) * s.c, [&](std::int64_t b0, std::int64_t b1) {
        for (std::int64_t nc = b0; nc < b1; ++nc) {
            const int c = static_cast<int>(nc % s.c);
            const float* xp = x.data().data() + nc * plane;
            const float* wp = weight.data().data() + static_cast<std::int64_t>(c) * k * k;
            float* op = out.data().data() + nc * plane;
            const float b = bias.defined() ? bias.data()[static_cast<std::size_t>(c)] : 0.0f;
            for (int oy = 0; oy < s.h; ++oy) {
                for (int ox = 0; ox < s.w; ++ox) {
                    float acc = b;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy - pad + ky;
                        if (iy < 0 || iy >= s.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox - pad + kx;
                            if (ix < 0 || ix >= s.w) continue;
                            acc += xp[static_cast<std::int64_t>(iy) * s.w + ix] * wp[ky * k + kx];
                        }
                    }
                    op[static_cast<std::int64_t>(oy) * s.w + ox] = acc;
                }
            }
        }
    });
    const bool wants = tape != nullptr && (x.requires_grad() || weight.requires_grad() ||
                                           (bias.defined() && bias.requires_grad()));
    if (wants) {
        out.set_requires_grad(true);
        tape->record(out, [x, weight, bias, out, s, k, pad, plane] {
            const float* gout = out.impl()->grad.data();
            for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(s.n) * s.c; ++nc) {
                const int c = static_cast<int>(nc % s.c);
                const float* xp = x.data().data() + nc * plane;
                const float* wp = weight.data().data() + static_cast<std::int64_t>(c) * k * k;
                const float* gp = gout + nc * plane;
                for (int oy = 0; oy < s.h; ++oy) {
                    for (int ox = 0; ox < s.w; ++ox) {
                        const float g = gp[static_cast<std::int64_t>(oy) * s.w + ox];
                        if (g == 0.0f) continue;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy - pad + ky;
                            if (iy < 0 || iy >= s.h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox - pad + kx;
                                if (ix < 0 || ix >= s.w) continue;
                                accum_grad(x, nc * plane + static_cast<std::int64_t>(iy) * s.w + ix,
                                           g * wp[ky * k + kx]);
                                accum_grad(weight, static_cast<std::int64_t>(c) * k * k + ky * k + kx,
                                           g * xp[static_cast<std::int64_t>(iy) * s.w + ix]);
                            }
                        }
                        if (bias.defined()) accum_grad(bias, c, g);
                    }
                }
            }
        });
    }
    return out;
}

Tensor group_norm(Tape* tape, const Tensor& x, int num_groups, const Tensor& gamma, const Tensor& beta,
                  float eps) {
    const Shape4& s = x.shape();
    if (num_groups < 1 || s.c % num_groups != 0) {
        throw std::invalid_argument("group_norm: channels " + std::to_string(s.c) +
                                    " not divisible by groups " + std::to_string(num_groups));
    }
    if (gamma.numel() != s.c || beta.numel() != s.c) {
        throw std::invalid_argument("group_norm: affine parameter size mismatch");
    }
    const int cg = s.c / num_groups;
    const std::int64_t m = static_cast<std::int64_t>(cg) * s.h * s.w;  // elements per group
    Tensor out = Tensor::zeros(s);
    std::vector<float> mean_buf(static_cast<std::size_t>(s.n) * num_groups);
    std::vector<float> rstd_buf(static_cast<std::size_t>(s.n) * num_groups);
    const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    for (int n = 0; n < s.n; ++n) {
        for (int g = 0; g < num_groups; ++g) {
            const float* xp = x.data().data() + (static_cast<std::int64_t>(n) * s.c + g * cg) * plane;
            double mu_acc = 0.0;
            for (std::int64_t i = 0; i < m; ++i) mu_acc += xp[i];
            const float mu = static_cast<float>(mu_acc / static_cast<double>(m));
            double var_acc = 0.0;
            for (std::int64_t i = 0; i < m; ++i) {
                const double d = xp[i] - mu;
                var_acc += d * d;
            }
            const float var = static_cast<float>(var_acc / static_cast<double>(m));
            const float rstd = 1.0f / std::sqrt(var + eps);
            mean_buf[static_cast<std::size_t>(n) * num_groups + g] = mu;
            rstd_buf[static_cast<std::size_t>(n) * num_groups + g] = rstd;
            float* op = out.data().data() + (static_cast<std::int64_t>(n) * s.c + g * cg) * plane;
            for (int ci = 0; ci < cg; ++ci) {
                const int c = g * cg + ci;
                const float gm = gamma.data()[static_cast<std::size_t>(c)];
                const float bt = beta.data()[static_cast<std::size_t>(c)];
                for (std::int64_t i = 0; i < plane; ++i) {
                    const float xn = (xp[ci * plane + i] - mu) * rstd;
                    op[ci * plane + i] = gm * xn + bt;
                }
            }
        }
    }
    const bool wants =
        tape != nullptr && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    if (wants) {
        out.set_requires_grad(true);
        tape->record(out, [x, gamma, beta, out, s, num_groups, cg, m, plane, mean_buf = std::move(mean_buf),
                           rstd_buf = std::move(rstd_buf)] {
            const float* gout = out.impl()->grad.data();
            for (int n = 0; n < s.n; ++n) {
                for (int g = 0; g < num_groups; ++g) {
                    const float mu = mean_buf[static_cast<std::size_t>(n) * num_groups + g];
                    const float rstd = rstd_buf[static_cast<std::size_t>(n) * num_groups + g];
                    const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + g * cg) * plane;
                    const float* xp = x.data().data() + base;
                    const float* gp = gout + base;
                    // accumulate per-group sums of dxhat and dxhat*xhat
                    float sum_dxh = 0.0f, sum_dxh_xh = 0.0f;
                    for (int ci = 0; ci < cg; ++ci) {
                        const float gm = gamma.data()[static_cast<std::size_t>(g * cg + ci)];
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const float xh = (xp[ci * plane + i] - mu) * rstd;
                            const float dxh = gp[ci * plane + i] * gm;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                    }
                    for (int ci = 0; ci < cg; ++ci) {
                        const int c = g * cg + ci;
                        const float gm = gamma.data()[static_cast<std::size_t>(c)];
                        float dgm = 0.0f, dbt = 0.0f;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const float xh = (xp[ci * plane + i] - mu) * rstd;
                            const float go = gp[ci * plane + i];
                            const float dxh = go * gm;
                            if (x.requires_grad()) {
                                const float dx =
                                    rstd * (dxh - sum_dxh / static_cast<float>(m) -
                                            xh * sum_dxh_xh / static_cast<float>(m));
                                accum_grad(x, base + ci * plane + i, dx);
                            }
                            dgm += go * xh;
                            dbt += go;
                        }
                        accum_grad(gamma, c, dgm);
                        accum_grad(beta, c, dbt);
                    }
                }
            }
        });
    }
    return out;
}

namespace {

// One bilinear read with zero padding outside the image. Returns the blended
// value and the weights/indices needed by the backward pass.
struct BilerpTap {
    int x0, y0;
    float fx, fy;
    float v00, v01, v10, v11;

    float value() const {
        return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
    }
    // d value / d y and d value / d x
    float dy() const { return ((1 - fx) * v10 + fx * v11) - ((1 - fx) * v00 + fx * v01); }
    float dx() const { return ((1 - fy) * (v01 - v00)) + fy * (v11 - v10); }
};

BilerpTap bilerp_at(const float* plane, int h, int w, float y, float x) {
    BilerpTap t;
    t.y0 = static_cast<int>(std::floor(y));
    t.x0 = static_cast<int>(std::floor(x));
    t.fy = y - static_cast<float>(t.y0);
    t.fx = x - static_cast<float>(t.x0);
    auto pick = [&](int yy, int xx) -> float {
        return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? plane[static_cast<std::int64_t>(yy) * w + xx]
                                                        : 0.0f;
    };
    t.v00 = pick(t.y0, t.x0);
    t.v01 = pick(t.y0, t.x0 + 1);
    t.v10 = pick(t.y0 + 1, t.x0);
    t.v11 = pick(t.y0 + 1, t.x0 + 1);
    return t;
}

// Scatter the four corner contributions of one bilinear read.
void bilerp_scatter(const Tensor& x, std::int64_t plane_base, int h, int w, const BilerpTap& t, float g) {
    auto put = [&](int yy, int xx, float weight) {
        if (yy >= 0 && yy < h && xx >= 0 && xx < w && weight != 0.0f) {
            accum_grad(x, plane_base + static_cast<std::int64_t>(yy) * w + xx, g * weight);
        }
    };
    put(t.y0, t.x0, (1 - t.fy) * (1 - t.fx));
    put(t.y0, t.x0 + 1, (1 - t.fy) * t.fx);
    put(t.y0 + 1, t.x0, t.fy * (1 - t.fx));
    put(t.y0 + 1, t.x0 + 1, t.fy * t.fx);
}

}  // namespace

Tensor bilinear_sample(Tape* tape, const Tensor& x, const Tensor& coords) {
    const Shape4& s = x.shape();
    const Shape4& cs = coords.shape();
    if (cs.n != s.n || cs.c != 2) {
        throw std::invalid_argument("bilinear_sample: coords must be (N,2,Hp,Wp), got " + cs.str());
    }
    Tensor out = Tensor::zeros({s.n, s.c, cs.h, cs.w});
    const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    const std::int64_t oplane = static_cast<std::int64_t>(cs.h) * cs.w;
    for (int n = 0; n < s.n; ++n) {
        const float* ys = coords.data().data() + static_cast<std::int64_t>(n) * 2 * oplane;
        const float* xs = ys + oplane;
        for (int c = 0; c < s.c; ++c) {
            const float* xp = x.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * plane;
            float* op = out.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * oplane;
            for (std::int64_t i = 0; i < oplane; ++i) {
                op[i] = bilerp_at(xp, s.h, s.w, ys[i], xs[i]).value();
            }
        }
    }
    if (tape != nullptr && (x.requires_grad() || coords.requires_grad())) {
        out.set_requires_grad(true);
        tape->record(out, [x, coords, out, s, cs, plane, oplane] {
            const float* gout = out.impl()->grad.data();
            for (int n = 0; n < s.n; ++n) {
                const float* ys = coords.data().data() + static_cast<std::int64_t>(n) * 2 * oplane;
                const float* xs = ys + oplane;
                for (int c = 0; c < s.c; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + c) * plane;
                    const float* xp = x.data().data() + base;
                    const float* gp = gout + (static_cast<std::int64_t>(n) * s.c + c) * oplane;
                    for (std::int64_t i = 0; i < oplane; ++i) {
                        const float g = gp[i];
                        if (g == 0.0f) continue;
                        const BilerpTap t = bilerp_at(xp, s.h, s.w, ys[i], xs[i]);
                        if (x.requires_grad()) bilerp_scatter(x, base, s.h, s.w, t, g);
                        if (coords.requires_grad()) {
                            accum_grad(coords, static_cast<std::int64_t>(n) * 2 * oplane + i, g * t.dy());
                            accum_grad(coords, static_cast<std::int64_t>(n) * 2 * oplane + oplane + i,
                                       g * t.dx());
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor deformable_conv2d(Tape* tape, const Tensor& x, const ConvParams& p, const Tensor& offsets) {
    check_conv_args(x, p);
    if (p.groups != 1) throw std::invalid_argument("deformable_conv2d: groups != 1 unsupported");
    const Shape4& s = x.shape();
    const Shape4& ws = p.weight.shape();
    const int k = ws.h;
    const int ho = conv_out_size(s.h, k, p.stride, p.padding);
    const int wo = conv_out_size(s.w, k, p.stride, p.padding);
    const Shape4& os = offsets.shape();
    if (os.c != 2 * k * k) {
        throw std::invalid_argument("deformable_conv2d: offset channels " + std::to_string(os.c) +
                                    " != 2*k*k = " + std::to_string(2 * k * k));
    }
    if (os.n != s.n || os.h != ho || os.w != wo) {
        throw std::invalid_argument("deformable_conv2d: offsets spatial shape " + os.str() +
                                    " does not match output (" + std::to_string(ho) + "," +
                                    std::to_string(wo) + ")");
    }

    Tensor out = Tensor::zeros({s.n, ws.n, ho, wo});
    const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    const std::int64_t oplane = static_cast<std::int64_t>(ho) * wo;
    const int stride = p.stride, pad = p.padding;

    // Sampled patch values, kept for the backward pass:
    // sampled[(n, tap, ci), oy, ox] with tap = ky*k+kx.
    auto sampled = std::make_shared<std::vector<float>>(
        static_cast<std::size_t>(s.n) * k * k * s.c * oplane);
    for (int n = 0; n < s.n; ++n) {
        for (int tap = 0; tap < k * k; ++tap) {
            const int ky = tap / k, kx = tap % k;
            const float* dy =
                offsets.data().data() + (static_cast<std::int64_t>(n) * os.c + 2 * tap) * oplane;
            const float* dx = dy + oplane;
            for (int ci = 0; ci < s.c; ++ci) {
                const float* xp = x.data().data() + (static_cast<std::int64_t>(n) * s.c + ci) * plane;
                float* sp = sampled->data() +
                            ((static_cast<std::int64_t>(n) * k * k + tap) * s.c + ci) * oplane;
                for (int oy = 0; oy < ho; ++oy) {
                    for (int ox = 0; ox < wo; ++ox) {
                        const std::int64_t i = static_cast<std::int64_t>(oy) * wo + ox;
                        const float sy = static_cast<float>(oy * stride - pad + ky) + dy[i];
                        const float sx = static_cast<float>(ox * stride - pad + kx) + dx[i];
                        sp[i] = bilerp_at(xp, s.h, s.w, sy, sx).value();
                    }
                }
            }
        }
    }
    // out[n,co] = sum_{tap,ci} w[co,ci,tap] * sampled[n,tap,ci]
    for (int n = 0; n < s.n; ++n) {
        for (int co = 0; co < ws.n; ++co) {
            float* op = out.data().data() + (static_cast<std::int64_t>(n) * ws.n + co) * oplane;
            if (p.bias.defined()) {
                const float b = p.bias.data()[static_cast<std::size_t>(co)];
                for (std::int64_t i = 0; i < oplane; ++i) op[i] = b;
            }
            for (int tap = 0; tap < k * k; ++tap) {
                for (int ci = 0; ci < s.c; ++ci) {
                    const float wv =
                        p.weight.data()[static_cast<std::size_t>(
                            (static_cast<std::int64_t>(co) * s.c + ci) * k * k + tap)];
                    const float* sp = sampled->data() +
                                      ((static_cast<std::int64_t>(n) * k * k + tap) * s.c + ci) * oplane;
                    for (std::int64_t i = 0; i < oplane; ++i) op[i] += wv * sp[i];
                }
            }
        }
    }

    const bool wants =
        tape != nullptr && (x.requires_grad() || p.weight.requires_grad() || offsets.requires_grad() ||
                            (p.bias.defined() && p.bias.requires_grad()));
    if (wants) {
        out.set_requires_grad(true);
        const Tensor weight = p.weight;
        const Tensor bias = p.bias;
        tape->record(out, [x, weight, bias, offsets, out, sampled, s, ws, os, k, ho, wo, plane, oplane,
                           stride, pad] {
            const float* gout = out.impl()->grad.data();
            // dSampled[tap,ci,i] = sum_co w[co,ci,tap] * dY[co,i]; reused for
            // dx and doffsets. dW from sampled values, db from plain sums.
            std::vector<float> dsamp(static_cast<std::size_t>(s.c) * oplane);
            for (int n = 0; n < s.n; ++n) {
                for (int tap = 0; tap < k * k; ++tap) {
                    const int ky = tap / k, kx = tap % k;
                    std::fill(dsamp.begin(), dsamp.end(), 0.0f);
                    for (int co = 0; co < ws.n; ++co) {
                        const float* gp = gout + (static_cast<std::int64_t>(n) * ws.n + co) * oplane;
                        for (int ci = 0; ci < s.c; ++ci) {
                            const float wv =
                                weight.data()[static_cast<std::size_t>(
                                    (static_cast<std::int64_t>(co) * s.c + ci) * k * k + tap)];
                            float* dp = dsamp.data() + static_cast<std::int64_t>(ci) * oplane;
                            for (std::int64_t i = 0; i < oplane; ++i) dp[i] += wv * gp[i];
                            if (weight.requires_grad()) {
                                const float* sp =
                                    sampled->data() +
                                    ((static_cast<std::int64_t>(n) * k * k + tap) * s.c + ci) * oplane;
                                float acc = 0.0f;
                                for (std::int64_t i = 0; i < oplane; ++i) acc += gp[i] * sp[i];
                                accum_grad(weight,
                                           (static_cast<std::int64_t>(co) * s.c + ci) * k * k + tap, acc);
                            }
                        }
                    }
                    const float* dyo =
                        offsets.data().data() + (static_cast<std::int64_t>(n) * os.c + 2 * tap) * oplane;
                    const float* dxo = dyo + oplane;
                    for (int ci = 0; ci < s.c; ++ci) {
                        const std::int64_t xbase = (static_cast<std::int64_t>(n) * s.c + ci) * plane;
                        const float* xp = x.data().data() + xbase;
                        const float* dp = dsamp.data() + static_cast<std::int64_t>(ci) * oplane;
                        for (int oy = 0; oy < ho; ++oy) {
                            for (int ox = 0; ox < wo; ++ox) {
                                const std::int64_t i = static_cast<std::int64_t>(oy) * wo + ox;
                                const float g = dp[i];
                                if (g == 0.0f) continue;
                                const float sy = static_cast<float>(oy * stride - pad + ky) + dyo[i];
                                const float sx = static_cast<float>(ox * stride - pad + kx) + dxo[i];
                                const BilerpTap t = bilerp_at(xp, s.h, s.w, sy, sx);
                                if (x.requires_grad()) bilerp_scatter(x, xbase, s.h, s.w, t, g);
                                if (offsets.requires_grad()) {
                                    accum_grad(offsets,
                                               (static_cast<std::int64_t>(n) * os.c + 2 * tap) * oplane + i,
                                               g * t.dy());
                                    accum_grad(
                                        offsets,
                                        (static_cast<std::int64_t>(n) * os.c + 2 * tap + 1) * oplane + i,
                                        g * t.dx());
                                }
                            }
                        }
                    }
                }
                if (bias.defined() && bias.requires_grad()) {
                    for (int co = 0; co < ws.n; ++co) {
                        const float* gp = gout + (static_cast<std::int64_t>(n) * ws.n + co) * oplane;
                        float acc = 0.0f;
                        for (std::int64_t i = 0; i < oplane; ++i) acc += gp[i];
                        accum_grad(bias, co, acc);
                    }
                }
            }
        });
    }
    return out;
}

Tensor upsample_nearest2x(Tape* tape, const Tensor& x) {
    const Shape4& s = x.shape();
    Tensor out = Tensor::zeros({s.n, s.c, s.h * 2, s.w * 2});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h * 2; ++h)
                for (int w = 0; w < s.w * 2; ++w) out.at(n, c, h, w) = x.at(n, c, h / 2, w / 2);
    if (tape != nullptr && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, s] {
            const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
            const std::int64_t oplane = plane * 4;
            for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(s.n) * s.c; ++nc) {
                const float* gp = out.impl()->grad.data() + nc * oplane;
                for (int h = 0; h < s.h * 2; ++h)
                    for (int w = 0; w < s.w * 2; ++w) {
                        accum_grad(x, nc * plane + static_cast<std::int64_t>(h / 2) * s.w + w / 2,
                                   gp[static_cast<std::int64_t>(h) * (s.w * 2) + w]);
                    }
            }
        });
    }
    return out;
}

Tensor global_avg_pool(Tape* tape, const Tensor& x) {
    const Shape4& s = x.shape();
    if (s.h < 1 || s.w < 1) throw std::invalid_argument("global_avg_pool: empty spatial dims");
    Tensor out = Tensor::zeros({s.n, s.c, 1, 1});
    const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(s.n) * s.c; ++nc) {
        const float* xp = x.data().data() + nc * plane;
        float acc = 0.0f;
        for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
        out.data()[static_cast<std::size_t>(nc)] = acc / static_cast<float>(plane);
    }
    if (tape != nullptr && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, s, plane] {
            for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(s.n) * s.c; ++nc) {
                const float g = out.impl()->grad[static_cast<std::size_t>(nc)] / static_cast<float>(plane);
                for (std::int64_t i = 0; i < plane; ++i) accum_grad(x, nc * plane + i, g);
            }
        });
    }
    return out;
}

}  // namespace bfa
