#include "bfa/pmesa.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <stdexcept>

namespace bfa {

DecayMask manhattan_decay_mask(int h, int w, float gamma) {
    if (h < 1 || w < 1) throw std::invalid_argument("manhattan_decay_mask: grid must be >= 1x1");
    if (!(gamma > 0.0f && gamma < 1.0f)) {
        throw std::invalid_argument("manhattan_decay_mask: gamma " + std::to_string(gamma) +
                                    " outside (0,1)");
    }
    const int t = h * w;
    DecayMask mask;
    mask.h = h;
    mask.w = w;
    mask.gamma = gamma;
    mask.d = Tensor::zeros({1, 1, t, t});
    // powers by successive multiplication; max distance (h-1)+(w-1)
    std::vector<float> pow_table(static_cast<std::size_t>(h + w - 1));
    pow_table[0] = 1.0f;
    for (std::size_t i = 1; i < pow_table.size(); ++i) pow_table[i] = pow_table[i - 1] * gamma;
    float* d = mask.d.data().data();
    for (int p = 0; p < t; ++p) {
        const int py = p / w, px = p % w;
        for (int q = 0; q < t; ++q) {
            const int qy = q / w, qx = q % w;
            const int dist = std::abs(py - qy) + std::abs(px - qx);
            d[static_cast<std::int64_t>(p) * t + q] = pow_table[static_cast<std::size_t>(dist)];
        }
    }
    return mask;
}

namespace {

// Masks are pure functions of (h, w, gamma); cache them across forwards.
const Tensor& cached_decay_mask(int h, int w, float gamma) {
    static std::mutex mu;
    static std::map<std::tuple<int, int, float>, DecayMask> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_tuple(h, w, gamma);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, manhattan_decay_mask(h, w, gamma)).first;
    return it->second.d;
}

ConvParams conv1x1(int c_in, int c_out, std::mt19937& rng) {
    ConvParams p;
    p.weight = randn({c_out, c_in, 1, 1}, rng, std::sqrt(2.0f / static_cast<float>(c_in)));
    p.bias = Tensor::zeros({1, 1, 1, c_out});
    return p;
}

Tensor conv_silu(Tape* tape, const Tensor& x, const ConvParams& p) {
    return silu(tape, conv2d(tape, x, p));
}

}  // namespace

RetBlock make_retblock(int channels, int heads, float gamma, std::mt19937& rng) {
    if (heads < 1 || channels % heads != 0) {
        throw std::invalid_argument("retblock: channels " + std::to_string(channels) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    RetBlock b;
    b.channels = channels;
    b.heads = heads;
    b.gamma = gamma;
    b.q_proj = conv1x1(channels, channels, rng);
    b.k_proj = conv1x1(channels, channels, rng);
    b.v_proj = conv1x1(channels, channels, rng);
    b.out_proj = conv1x1(channels, channels, rng);
    b.lepe_weight = randn({channels, 1, 3, 3}, rng, std::sqrt(2.0f / 9.0f));
    b.lepe_bias = Tensor::zeros({1, 1, 1, channels});
    return b;
}

Tensor retblock_forward(Tape* tape, const Tensor& x, const RetBlock& b) {
    const Shape4& s = x.shape();
    if (s.c != b.channels || s.c % b.heads != 0) {
        throw std::invalid_argument("retblock: input channels " + std::to_string(s.c) +
                                    " incompatible with block (channels " + std::to_string(b.channels) +
                                    ", heads " + std::to_string(b.heads) + ")");
    }
    const int d = s.c / b.heads;

    Tensor q = nchw_to_heads(tape, conv2d(tape, x, b.q_proj), b.heads);  // (N,h,T,d)
    Tensor k = nchw_to_heads(tape, conv2d(tape, x, b.k_proj), b.heads);
    Tensor v = nchw_to_heads(tape, conv2d(tape, x, b.v_proj), b.heads);

    Tensor scores = mul_scalar(tape, bmm(tape, q, transpose_hw(tape, k)),
                               1.0f / std::sqrt(static_cast<float>(d)));
    Tensor probs = softmax_lastdim(tape, scores);
    // softmax first, then elementwise decay, no renormalization
    Tensor attn = mul_bcast_hw(tape, probs, cached_decay_mask(s.h, s.w, b.gamma));
    Tensor mixed = heads_to_nchw(tape, bmm(tape, attn, v), s.h, s.w);
    return conv2d(tape, mixed, b.out_proj);
}

Tensor relpos_forward(Tape* tape, const Tensor& x, const RetBlock& b) {
    Tensor v = conv2d(tape, x, b.v_proj);
    return depthwise_conv2d(tape, v, b.lepe_weight, b.lepe_bias);
}

Tensor pmesa_core(Tape* tape, const Tensor& x, const std::vector<BranchFn>& ret,
                  const std::vector<BranchFn>& pos) {
    if (ret.empty() || ret.size() != pos.size()) {
        throw std::invalid_argument("pmesa_core: need n >= 1 paired branches, got " +
                                    std::to_string(ret.size()) + "/" + std::to_string(pos.size()));
    }
    Tensor acc;
    for (std::size_t i = 0; i < ret.size(); ++i) {
        Tensor branch = add(tape, ret[i](tape, x), pos[i](tape, x));
        acc = i == 0 ? branch : add(tape, acc, branch);
    }
    return mul_scalar(tape, acc, 1.0f / static_cast<float>(ret.size()));
}

std::vector<float> pmesa_gamma_schedule(int n) {
    if (n < 1) throw std::invalid_argument("pmesa: n must be >= 1");
    std::vector<float> gammas(static_cast<std::size_t>(n));
    if (n == 1) {
        gammas[0] = 0.775f;  // midpoint of the [0.6, 0.95] range
    } else {
        for (int i = 0; i < n; ++i) {
            gammas[static_cast<std::size_t>(i)] =
                0.6f + 0.35f * static_cast<float>(i) / static_cast<float>(n - 1);
        }
    }
    return gammas;
}

PmesaBlock make_pmesa(int channels, int n, int heads, std::mt19937& rng) {
    if (n < 1) throw std::invalid_argument("pmesa: n must be >= 1");
    if (channels % 2 != 0) {
        throw std::invalid_argument("pmesa: channels " + std::to_string(channels) + " must be even");
    }
    const int half = channels / 2;
    if (half % heads != 0) {
        throw std::invalid_argument("pmesa: half width " + std::to_string(half) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    PmesaBlock p;
    p.channels = channels;
    p.n = n;
    p.entry = conv1x1(channels, channels, rng);
    p.exit = conv1x1(channels, channels, rng);
    const auto gammas = pmesa_gamma_schedule(n);
    p.blocks.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        p.blocks.push_back(make_retblock(half, heads, gammas[static_cast<std::size_t>(i)], rng));
    }
    return p;
}

Tensor pmesa_forward(Tape* tape, const Tensor& x, const PmesaBlock& p) {
    if (p.n < 1 || p.blocks.empty()) throw std::invalid_argument("pmesa: n must be >= 1");
    if (x.shape().c != p.channels) {
        throw std::invalid_argument("pmesa: input channels " + std::to_string(x.shape().c) +
                                    " != block channels " + std::to_string(p.channels));
    }
    const int half = p.channels / 2;
    Tensor h = conv_silu(tape, x, p.entry);
    Tensor keep = slice_channels(tape, h, 0, half);
    Tensor body = slice_channels(tape, h, half, p.channels);

    std::vector<BranchFn> ret, pos;
    ret.reserve(p.blocks.size());
    pos.reserve(p.blocks.size());
    for (const RetBlock& b : p.blocks) {
        ret.emplace_back([&b](Tape* t, const Tensor& in) { return retblock_forward(t, in, b); });
        pos.emplace_back([&b](Tape* t, const Tensor& in) { return relpos_forward(t, in, b); });
    }
    Tensor core = pmesa_core(tape, body, ret, pos);
    Tensor merged = concat_channels(tape, {keep, core});
    return conv_silu(tape, merged, p.exit);
}

void RetBlock::collect_params(const std::string& prefix, NamedParams& out) const {
    for (const auto& [name, conv] :
         {std::pair{"q", &q_proj}, {"k", &k_proj}, {"v", &v_proj}, {"out", &out_proj}}) {
        out.emplace_back(prefix + "." + name + ".weight", conv->weight);
        out.emplace_back(prefix + "." + name + ".bias", conv->bias);
    }
    out.emplace_back(prefix + ".lepe.weight", lepe_weight);
    out.emplace_back(prefix + ".lepe.bias", lepe_bias);
}

void PmesaBlock::collect_params(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".entry.weight", entry.weight);
    out.emplace_back(prefix + ".entry.bias", entry.bias);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].collect_params(prefix + ".ret" + std::to_string(i), out);
    }
    out.emplace_back(prefix + ".exit.weight", exit.weight);
    out.emplace_back(prefix + ".exit.bias", exit.bias);
}

}  // namespace bfa
