#pragma once

#include <array>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bfa/nn.hpp"
#include "bfa/tensor.hpp"

namespace bfa {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::array<int, 4> kFbsmKernels = {5, 7, 9, 11};

// Feature Balanced Spindle Module: 1x1 expand, channel-quarter split into
// four depthwise banks with kernel sizes 5/7/9/11, concat, 1x1 contract,
// residual from the block input. Channel count and spatial size preserved.
struct FbsmBlock {
    int channels = 0;
    int expansion = 2;
    ConvParams entry;                 // 1x1, C -> e*C
    std::array<Tensor, 4> dw_weight;  // (eC/4, 1, k, k) per kernel size
    std::array<Tensor, 4> dw_bias;
    ConvParams exit;                  // 1x1, e*C -> C

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

FbsmBlock make_fbsm(int channels, int expansion, std::mt19937& rng);

Tensor fbsm_forward(Tape* tape, const Tensor& x, const FbsmBlock& block);

}  // namespace bfa
