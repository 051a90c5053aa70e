#include "bfa/fbsm.hpp"

#include <cmath>
#include <stdexcept>

namespace bfa {

namespace {

ConvParams conv1x1(int c_in, int c_out, std::mt19937& rng, float gain) {
    ConvParams p;
    p.weight = randn({c_out, c_in, 1, 1}, rng, gain * std::sqrt(1.0f / static_cast<float>(c_in)));
    p.bias = Tensor::zeros({1, 1, 1, c_out});
    return p;
}

}  // namespace

FbsmBlock make_fbsm(int channels, int expansion, std::mt19937& rng) {
    if (expansion < 1) throw std::invalid_argument("fbsm: expansion ratio must be >= 1");
    const int wide = channels * expansion;
    if (wide % 4 != 0) {
        throw std::invalid_argument("fbsm: expanded width " + std::to_string(wide) +
                                    " not divisible by 4");
    }
    FbsmBlock b;
    b.channels = channels;
    b.expansion = expansion;
    b.entry = conv1x1(channels, wide, rng, 1.0f);
    const int quarter = wide / 4;
    for (std::size_t i = 0; i < kFbsmKernels.size(); ++i) {
        const int k = kFbsmKernels[i];
        b.dw_weight[i] = randn({quarter, 1, k, k}, rng, std::sqrt(1.0f / static_cast<float>(k * k)));
        b.dw_bias[i] = Tensor::zeros({1, 1, 1, quarter});
    }
    // damped exit keeps the block near the identity at init
    b.exit = conv1x1(wide, channels, rng, 0.5f);
    return b;
}

Tensor fbsm_forward(Tape* tape, const Tensor& x, const FbsmBlock& block) {
    if (x.shape().c != block.channels) {
        throw std::invalid_argument("fbsm: input channels " + std::to_string(x.shape().c) +
                                    " != block channels " + std::to_string(block.channels));
    }
    const int wide = block.channels * block.expansion;
    if (wide % 4 != 0) throw std::invalid_argument("fbsm: expanded width not divisible by 4");
    const int quarter = wide / 4;

    Tensor h = conv2d(tape, x, block.entry);
    std::vector<Tensor> banks;
    banks.reserve(4);
    for (int i = 0; i < 4; ++i) {
        Tensor part = slice_channels(tape, h, i * quarter, (i + 1) * quarter);
        banks.push_back(depthwise_conv2d(tape, part, block.dw_weight[static_cast<std::size_t>(i)],
                                         block.dw_bias[static_cast<std::size_t>(i)]));
    }
    Tensor merged = concat_channels(tape, banks);
    Tensor z = conv2d(tape, merged, block.exit);
    return add(tape, x, z);
}

void FbsmBlock::collect_params(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".entry.weight", entry.weight);
    out.emplace_back(prefix + ".entry.bias", entry.bias);
    for (std::size_t i = 0; i < kFbsmKernels.size(); ++i) {
        const std::string k = std::to_string(kFbsmKernels[i]);
        out.emplace_back(prefix + ".dw" + k + ".weight", dw_weight[i]);
        out.emplace_back(prefix + ".dw" + k + ".bias", dw_bias[i]);
    }
    out.emplace_back(prefix + ".exit.weight", exit.weight);
    out.emplace_back(prefix + ".exit.bias", exit.bias);
}

}  // namespace bfa
