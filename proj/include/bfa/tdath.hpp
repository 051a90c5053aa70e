#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bfa/fbsm.hpp"
#include "bfa/nn.hpp"
#include "bfa/tensor.hpp"
#include "bfa/types.hpp"

namespace bfa {

// 3x3 conv -> GroupNorm -> SiLU, shape preserving.
struct ConvGn {
    ConvParams conv;
    Tensor gamma, beta;
    int groups = 16;

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

ConvGn make_conv_gn(int c_in, int c_out, std::mt19937& rng);
Tensor conv_gn(Tape* tape, const Tensor& x, const ConvGn& p);

// Per-task channel reweighting: w = sigmoid(FC(GAP(x))), feat = w * x.
struct TaskSplit {
    ConvParams fc_cls, fc_reg;  // 1x1 on (N,C,1,1), zero-init

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

std::pair<Tensor, Tensor> task_split(Tape* tape, const Tensor& x, const TaskSplit& p);

// Resampling path bringing one neighbor scale onto the target scale:
// stride-2 3x3 convs down or nearest 2x up, then a zero-init 1x1 projection.
struct CrcsPath {
    std::vector<ConvParams> down;
    int up_steps = 0;
    ConvParams proj;

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

// Detection head for one scale.
struct TdathHead {
    int channels = 0;
    int num_classes = 0;
    ConvGn interact1, interact2;
    std::array<std::optional<CrcsPath>, 3> neighbor;  // indexed by source scale, empty for self
    TaskSplit split;
    ConvParams offset_conv;  // 3x3 C -> 18, zero-init
    ConvParams dcn;          // 3x3 C -> C, used by deformable_conv2d
    ConvParams reg_out;      // 1x1 C -> 4
    ConvParams cls_out;      // 1x1 2C -> num_classes

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

// The full three-scale head (strides 8/16/32), independent parameters per scale.
struct Tdath {
    std::array<TdathHead, 3> heads;

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

Tdath make_tdath(const std::array<int, 3>& channels, int num_classes, std::mt19937& rng);

// Cross-Scale Refinement: neighbors resampled to the target scale, projected
// by a 1x1 conv each, and summed with the native map.
Tensor crcs_fuse(Tape* tape, const std::array<Tensor, 3>& features, int target, const TdathHead& head);

struct HeadOutputs {
    std::array<Tensor, 3> cls;   // (N, num_classes, H_s, W_s)
    std::array<Tensor, 3> ltrb;  // (N, 4, H_s, W_s), non-negative
    std::array<int, 3> strides = {8, 16, 32};
};

HeadOutputs tdath_forward(Tape* tape, const std::array<Tensor, 3>& features, const Tdath& head);

// Anchor-free decode: cell (i,j) at stride s has center ((j+0.5)s, (i+0.5)s);
// box = (cx - l*s, cy - t*s, cx + r*s, cy + b*s). Keeps cells whose best
// sigmoid class score reaches the threshold. One detection list per batch
// element; image ids are left 0 for the caller to assign.
std::vector<std::vector<Detection>> decode_ltrb(const HeadOutputs& outputs, float conf_threshold);

}  // namespace bfa
