#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "bfa/fbsm.hpp"
#include "bfa/nn.hpp"
#include "bfa/tensor.hpp"

namespace bfa {

// Spatial decay mask with Manhattan-distance falloff:
// D[p][q] = gamma^(|x_p - x_q| + |y_p - y_q|) over an H x W token grid.
struct DecayMask {
    int h = 0;
    int w = 0;
    float gamma = 0.0f;
    Tensor d;  // (1, 1, H*W, H*W), constant
};

DecayMask manhattan_decay_mask(int h, int w, float gamma);

// Retention block: 1x1 q/k/v projections, multi-head attention whose scores
// are damped elementwise by the Manhattan decay mask, and a 1x1 output
// projection. The depthwise 3x3 over the value projection is the carrier of
// the relative-position term and is applied by relpos_forward.
struct RetBlock {
    int channels = 0;
    int heads = 2;
    float gamma = 0.9f;
    ConvParams q_proj, k_proj, v_proj, out_proj;  // all 1x1
    Tensor lepe_weight;                           // (C,1,3,3)
    Tensor lepe_bias;

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

RetBlock make_retblock(int channels, int heads, float gamma, std::mt19937& rng);

Tensor retblock_forward(Tape* tape, const Tensor& x, const RetBlock& b);
Tensor relpos_forward(Tape* tape, const Tensor& x, const RetBlock& b);

// One branch of the averaging core; production branches wrap retblock_forward
// and relpos_forward, tests may substitute stubs.
using BranchFn = std::function<Tensor(Tape*, const Tensor&)>;

// core(x) = (1/n) * sum_i [ ret[i](x) + pos[i](x) ], summed in branch order.
Tensor pmesa_core(Tape* tape, const Tensor& x, const std::vector<BranchFn>& ret,
                  const std::vector<BranchFn>& pos);

// C2f-style wrapper: entry 1x1 -> split halves -> averaging core on one half
// -> concat with the untouched half -> exit 1x1. Retention blocks run on C/2
// channels; gamma_i are evenly spaced in [0.6, 0.95].
struct PmesaBlock {
    int channels = 0;
    int n = 1;
    ConvParams entry, exit;  // 1x1 C -> C
    std::vector<RetBlock> blocks;

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

PmesaBlock make_pmesa(int channels, int n, int heads, std::mt19937& rng);

Tensor pmesa_forward(Tape* tape, const Tensor& x, const PmesaBlock& p);

// The gamma schedule used by make_pmesa, exposed for tests.
std::vector<float> pmesa_gamma_schedule(int n);

}  // namespace bfa
