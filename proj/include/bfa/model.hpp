#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bfa/fbsm.hpp"
#include "bfa/nn.hpp"
#include "bfa/pmesa.hpp"
#include "bfa/tdath.hpp"
#include "bfa/tensor.hpp"

namespace bfa {

// Network configuration with the three ablation switches. The backbone is a
// stem conv (stride 2) followed by four stages of [stride-2 conv, stage
// block] at strides 4/8/16/32; P3/P4/P5 come from stages 2..4. Stage blocks
// are PMESA-C2f or plain C2f, neck fusion blocks are FBSM or plain C2f, and
// the heads are TDATH or a plain decoupled conv head.
struct ModelConfig {
    int num_classes = 7;
    int base_width = 16;
    std::array<int, 4> stage_depths = {1, 1, 1, 1};
    std::array<int, 4> stage_mult = {2, 4, 5, 5};
    std::array<int, 4> pmesa_n = {3, 6, 6, 3};
    int attn_heads = 2;
    int fbsm_expansion = 2;
    bool use_fbsm = true;
    bool use_tdath = true;
    bool use_pmesa = true;
    int input_size = 128;

    int stem_width() const { return base_width; }
    int stage_width(int i) const { return base_width * stage_mult[static_cast<std::size_t>(i)]; }
    void validate() const;
};

// conv + SiLU
struct ConvSilu {
    ConvParams conv;
    void collect_params(const std::string& prefix, NamedParams& out) const;
};
Tensor conv_silu_forward(Tape* tape, const Tensor& x, const ConvSilu& c);

// Plain C2f: entry 1x1 -> split halves -> chained residual bottlenecks on one
// half -> concat -> exit 1x1, SiLU on every conv.
struct Bottleneck {
    ConvParams conv1, conv2;  // 3x3
};
struct C2fBlock {
    int in_channels = 0;
    int out_channels = 0;
    ConvParams entry, exit;
    std::vector<Bottleneck> bottlenecks;

    void collect_params(const std::string& prefix, NamedParams& out) const;
};
C2fBlock make_c2f(int c_in, int c_out, int depth, std::mt19937& rng);
Tensor c2f_forward(Tape* tape, const Tensor& x, const C2fBlock& b);

// Backbone stage block: PMESA when the switch is on, plain C2f otherwise.
struct StageBlock {
    std::optional<PmesaBlock> pmesa;
    std::optional<C2fBlock> c2f;

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

// Neck fusion: 1x1 reduce + FBSM when the switch is on, plain C2f otherwise.
struct FusionBlock {
    std::optional<ConvParams> reduce;  // fbsm route only
    std::optional<FbsmBlock> fbsm;
    std::optional<C2fBlock> c2f;

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

// Plain decoupled head: one 3x3 conv + SiLU per branch, then 1x1 outputs.
struct PlainHead {
    ConvParams stem_cls, stem_reg;  // 3x3
    ConvParams cls_out, reg_out;    // 1x1

    void collect_params(const std::string& prefix, NamedParams& out) const;
};

struct ConvSpec {
    int kernel = 0;
    int stride = 0;
    int padding = 0;
};

struct Model {
    ModelConfig cfg;
    ConvSilu stem;
    std::array<ConvSilu, 4> downs;
    std::array<StageBlock, 4> stages;
    ConvSilu neck_down_t3, neck_down_o4;
    FusionBlock fuse_t4, fuse_t3, fuse_o4, fuse_o5;
    std::optional<Tdath> tdath;
    std::optional<std::array<PlainHead, 3>> plain_heads;

    NamedParams params;             // deterministic order, owned tensors shared
    std::vector<bool> decay_mask;   // weight decay applies where true
    // 3x3-and-wider convs on the deepest backbone path up to stage i+1, for
    // receptive-field arithmetic; attention makes the backbone globally mixed
    std::array<std::vector<ConvSpec>, 4> backbone_conv_chain;
    bool backbone_global_mixing = false;
};

Model build_model(const ModelConfig& cfg, std::uint32_t seed);

// Channel widths of (P3, P4, P5).
std::array<int, 3> head_channels(const ModelConfig& cfg);

HeadOutputs model_forward(Tape* tape, const Model& m, const Tensor& images);

// Backbone feature map after the given stage (1..4; 4 = P5 level). The
// backbone is fully convolutional, so probe inputs may be any size divisible
// by 32.
Tensor backbone_forward(Tape* tape, const Model& m, const Tensor& images, int probe_stage = 4);

// Mean absolute input gradient of the summed center cell of the probed stage
// over random inputs, normalized to max 1. Returns a (1,1,S,S) map.
Tensor erf_map(const Model& m, int input_size, int trials, std::uint32_t seed, int probe_stage = 4);

// Inclusive input-pixel interval [lo, hi] covered by output index `center`
// after the given conv chain (same interval for both axes).
std::pair<int, int> conv_rf_interval(const std::vector<ConvSpec>& chain, int center);

std::int64_t parameter_count(const Model& m);

// Versioned binary checkpoint: header JSON naming parameter shapes, then raw
// little-endian float32 payloads. Round trips bit-exactly.
void save_checkpoint(const Model& m, const std::string& path);
void load_checkpoint(Model& m, const std::string& path);

}  // namespace bfa
