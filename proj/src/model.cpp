#include "bfa/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace bfa {

void ModelConfig::validate() const {
    if (num_classes < 1) throw std::invalid_argument("model config: num_classes must be >= 1");
    if (input_size % 32 != 0) {
        throw std::invalid_argument("model config: input size " + std::to_string(input_size) +
                                    " not divisible by 32");
    }
    for (int i = 0; i < 4; ++i) {
        const int w = stage_width(i);
        if (w % 4 != 0) {
            throw std::invalid_argument("model config: stage " + std::to_string(i + 1) + " width " +
                                        std::to_string(w) + " not divisible by 4");
        }
        if ((w / 2) % attn_heads != 0) {
            throw std::invalid_argument("model config: stage " + std::to_string(i + 1) + " half width " +
                                        std::to_string(w / 2) + " not divisible by " +
                                        std::to_string(attn_heads) + " attention heads");
        }
        if (pmesa_n[static_cast<std::size_t>(i)] < 1) {
            throw std::invalid_argument("model config: pmesa n must be >= 1 per stage");
        }
        if (stage_depths[static_cast<std::size_t>(i)] < 1) {
            throw std::invalid_argument("model config: stage depth must be >= 1");
        }
    }
}

namespace {

ConvParams make_conv(int c_in, int c_out, int k, int stride, std::mt19937& rng) {
    ConvParams p;
    p.weight = randn({c_out, c_in, k, k}, rng, std::sqrt(2.0f / static_cast<float>(c_in * k * k)));
    p.bias = Tensor::zeros({1, 1, 1, c_out});
    p.stride = stride;
    p.padding = (k - 1) / 2;
    return p;
}

ConvSilu make_conv_silu(int c_in, int c_out, int k, int stride, std::mt19937& rng) {
    return {make_conv(c_in, c_out, k, stride, rng)};
}

}  // namespace

Tensor conv_silu_forward(Tape* tape, const Tensor& x, const ConvSilu& c) {
    return silu(tape, conv2d(tape, x, c.conv));
}

void ConvSilu::collect_params(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".weight", conv.weight);
    out.emplace_back(prefix + ".bias", conv.bias);
}

C2fBlock make_c2f(int c_in, int c_out, int depth, std::mt19937& rng) {
    if (c_out % 2 != 0) throw std::invalid_argument("c2f: output channels must be even");
    C2fBlock b;
    b.in_channels = c_in;
    b.out_channels = c_out;
    b.entry = make_conv(c_in, c_out, 1, 1, rng);
    b.exit = make_conv(c_out, c_out, 1, 1, rng);
    const int half = c_out / 2;
    for (int i = 0; i < depth; ++i) {
        b.bottlenecks.push_back({make_conv(half, half, 3, 1, rng), make_conv(half, half, 3, 1, rng)});
    }
    return b;
}

Tensor c2f_forward(Tape* tape, const Tensor& x, const C2fBlock& b) {
    Tensor h = silu(tape, conv2d(tape, x, b.entry));
    const int half = b.out_channels / 2;
    Tensor keep = slice_channels(tape, h, 0, half);
    Tensor body = slice_channels(tape, h, half, b.out_channels);
    for (const Bottleneck& bt : b.bottlenecks) {
        Tensor y = silu(tape, conv2d(tape, body, bt.conv1));
        y = silu(tape, conv2d(tape, y, bt.conv2));
        body = add(tape, body, y);
    }
    return silu(tape, conv2d(tape, concat_channels(tape, {keep, body}), b.exit));
}

void C2fBlock::collect_params(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".entry.weight", entry.weight);
    out.emplace_back(prefix + ".entry.bias", entry.bias);
    for (std::size_t i = 0; i < bottlenecks.size(); ++i) {
        const std::string base = prefix + ".b" + std::to_string(i);
        out.emplace_back(base + ".conv1.weight", bottlenecks[i].conv1.weight);
        out.emplace_back(base + ".conv1.bias", bottlenecks[i].conv1.bias);
        out.emplace_back(base + ".conv2.weight", bottlenecks[i].conv2.weight);
        out.emplace_back(base + ".conv2.bias", bottlenecks[i].conv2.bias);
    }
    out.emplace_back(prefix + ".exit.weight", exit.weight);
    out.emplace_back(prefix + ".exit.bias", exit.bias);
}

void StageBlock::collect_params(const std::string& prefix, NamedParams& out) const {
    if (pmesa) pmesa->collect_params(prefix + ".pmesa", out);
    if (c2f) c2f->collect_params(prefix + ".c2f", out);
}

void FusionBlock::collect_params(const std::string& prefix, NamedParams& out) const {
    if (reduce) {
        out.emplace_back(prefix + ".reduce.weight", reduce->weight);
        out.emplace_back(prefix + ".reduce.bias", reduce->bias);
    }
    if (fbsm) fbsm->collect_params(prefix + ".fbsm", out);
    if (c2f) c2f->collect_params(prefix + ".c2f", out);
}

void PlainHead::collect_params(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".stem_cls.weight", stem_cls.weight);
    out.emplace_back(prefix + ".stem_cls.bias", stem_cls.bias);
    out.emplace_back(prefix + ".stem_reg.weight", stem_reg.weight);
    out.emplace_back(prefix + ".stem_reg.bias", stem_reg.bias);
    out.emplace_back(prefix + ".cls.weight", cls_out.weight);
    out.emplace_back(prefix + ".cls.bias", cls_out.bias);
    out.emplace_back(prefix + ".reg.weight", reg_out.weight);
    out.emplace_back(prefix + ".reg.bias", reg_out.bias);
}

namespace {

FusionBlock make_fusion(int c_in, int c_out, int depth, const ModelConfig& cfg, std::mt19937& rng) {
    FusionBlock f;
    if (cfg.use_fbsm) {
        f.reduce = make_conv(c_in, c_out, 1, 1, rng);
        f.fbsm = make_fbsm(c_out, cfg.fbsm_expansion, rng);
    } else {
        f.c2f = make_c2f(c_in, c_out, depth, rng);
    }
    return f;
}

Tensor fusion_forward(Tape* tape, const Tensor& x, const FusionBlock& f) {
    if (f.fbsm) {
        Tensor reduced = silu(tape, conv2d(tape, x, *f.reduce));
        return fbsm_forward(tape, reduced, *f.fbsm);
    }
    return c2f_forward(tape, x, *f.c2f);
}

}  // namespace

std::array<int, 3> head_channels(const ModelConfig& cfg) {
    return {cfg.stage_width(1), cfg.stage_width(2), cfg.stage_width(3)};
}

Model build_model(const ModelConfig& cfg, std::uint32_t seed) {
    cfg.validate();
    std::mt19937 rng(seed);
    Model m;
    m.cfg = cfg;

    const int w0 = cfg.stem_width();
    m.stem = make_conv_silu(3, w0, 3, 2, rng);
    std::vector<ConvSpec> chain = {{3, 2, 1}};
    int prev = w0;
    for (int i = 0; i < 4; ++i) {
        const int w = cfg.stage_width(i);
        m.downs[static_cast<std::size_t>(i)] = make_conv_silu(prev, w, 3, 2, rng);
        chain.push_back({3, 2, 1});
        StageBlock& stage = m.stages[static_cast<std::size_t>(i)];
        if (cfg.use_pmesa) {
            stage.pmesa = make_pmesa(w, cfg.pmesa_n[static_cast<std::size_t>(i)], cfg.attn_heads, rng);
            m.backbone_global_mixing = true;
        } else {
            stage.c2f = make_c2f(w, w, cfg.stage_depths[static_cast<std::size_t>(i)], rng);
            for (int d = 0; d < cfg.stage_depths[static_cast<std::size_t>(i)]; ++d) {
                chain.push_back({3, 1, 1});
                chain.push_back({3, 1, 1});
            }
        }
        m.backbone_conv_chain[static_cast<std::size_t>(i)] = chain;
        prev = w;
    }

    const auto hc = head_channels(cfg);  // P3,P4,P5 widths
    const int c3 = hc[0], c4 = hc[1], c5 = hc[2];
    const int neck_depth = cfg.stage_depths[0];
    m.fuse_t4 = make_fusion(c5 + c4, c4, neck_depth, cfg, rng);
    m.fuse_t3 = make_fusion(c4 + c3, c3, neck_depth, cfg, rng);
    m.neck_down_t3 = make_conv_silu(c3, c3, 3, 2, rng);
    m.fuse_o4 = make_fusion(c3 + c4, c4, neck_depth, cfg, rng);
    m.neck_down_o4 = make_conv_silu(c4, c4, 3, 2, rng);
    m.fuse_o5 = make_fusion(c4 + c5, c5, neck_depth, cfg, rng);

    if (cfg.use_tdath) {
        m.tdath = make_tdath(hc, cfg.num_classes, rng);
    } else {
        std::array<PlainHead, 3> heads;
        for (int s = 0; s < 3; ++s) {
            const int c = hc[static_cast<std::size_t>(s)];
            PlainHead h;
            h.stem_cls = make_conv(c, c, 3, 1, rng);
            h.stem_reg = make_conv(c, c, 3, 1, rng);
            h.cls_out = make_conv(c, cfg.num_classes, 1, 1, rng);
            h.reg_out = make_conv(c, 4, 1, 1, rng);
            std::fill(h.cls_out.bias.data().begin(), h.cls_out.bias.data().end(), -2.0f);
            heads[static_cast<std::size_t>(s)] = std::move(h);
        }
        m.plain_heads = std::move(heads);
    }

    // parameter registry in construction order
    m.stem.collect_params("stem", m.params);
    for (int i = 0; i < 4; ++i) {
        m.downs[static_cast<std::size_t>(i)].collect_params("down" + std::to_string(i + 1), m.params);
        m.stages[static_cast<std::size_t>(i)].collect_params("stage" + std::to_string(i + 1), m.params);
    }
    m.fuse_t4.collect_params("neck.t4", m.params);
    m.fuse_t3.collect_params("neck.t3", m.params);
    m.neck_down_t3.collect_params("neck.down_t3", m.params);
    m.fuse_o4.collect_params("neck.o4", m.params);
    m.neck_down_o4.collect_params("neck.down_o4", m.params);
    m.fuse_o5.collect_params("neck.o5", m.params);
    if (m.tdath) m.tdath->collect_params("head", m.params);
    if (m.plain_heads) {
        for (int s = 0; s < 3; ++s) {
            (*m.plain_heads)[static_cast<std::size_t>(s)].collect_params(
                "head.p" + std::to_string(s + 3), m.params);
        }
    }
    for (auto& [name, t] : m.params) {
        t.set_requires_grad(true);
        const bool is_weight = name.size() >= 7 && name.ends_with(".weight");
        m.decay_mask.push_back(is_weight);
    }
    return m;
}

namespace {

std::array<Tensor, 3> neck_forward(Tape* tape, const Model& m, const Tensor& p3, const Tensor& p4,
                                   const Tensor& p5) {
    Tensor t4 = fusion_forward(tape, concat_channels(tape, {upsample_nearest2x(tape, p5), p4}), m.fuse_t4);
    Tensor t3 = fusion_forward(tape, concat_channels(tape, {upsample_nearest2x(tape, t4), p3}), m.fuse_t3);
    Tensor d4 = conv_silu_forward(tape, t3, m.neck_down_t3);
    Tensor o4 = fusion_forward(tape, concat_channels(tape, {d4, t4}), m.fuse_o4);
    Tensor d5 = conv_silu_forward(tape, o4, m.neck_down_o4);
    Tensor o5 = fusion_forward(tape, concat_channels(tape, {d5, p5}), m.fuse_o5);
    return {t3, o4, o5};
}

std::array<Tensor, 3> backbone_pyramid(Tape* tape, const Model& m, const Tensor& images) {
    Tensor x = conv_silu_forward(tape, images, m.stem);
    std::array<Tensor, 3> feats;
    for (int i = 0; i < 4; ++i) {
        x = conv_silu_forward(tape, x, m.downs[static_cast<std::size_t>(i)]);
        const StageBlock& stage = m.stages[static_cast<std::size_t>(i)];
        x = stage.pmesa ? pmesa_forward(tape, x, *stage.pmesa) : c2f_forward(tape, x, *stage.c2f);
        if (i >= 1) feats[static_cast<std::size_t>(i - 1)] = x;
    }
    return feats;
}

}  // namespace

Tensor backbone_forward(Tape* tape, const Model& m, const Tensor& images, int probe_stage) {
    if (probe_stage < 1 || probe_stage > 4) {
        throw std::invalid_argument("backbone_forward: probe stage must be in 1..4");
    }
    Tensor x = conv_silu_forward(tape, images, m.stem);
    for (int i = 0; i < probe_stage; ++i) {
        x = conv_silu_forward(tape, x, m.downs[static_cast<std::size_t>(i)]);
        const StageBlock& stage = m.stages[static_cast<std::size_t>(i)];
        x = stage.pmesa ? pmesa_forward(tape, x, *stage.pmesa) : c2f_forward(tape, x, *stage.c2f);
    }
    return x;
}

HeadOutputs model_forward(Tape* tape, const Model& m, const Tensor& images) {
    const Shape4& s = images.shape();
    if (s.c != 3 || s.h != m.cfg.input_size || s.w != m.cfg.input_size) {
        throw std::invalid_argument("model_forward: input shape " + s.str() + " does not match config (" +
                                    std::to_string(m.cfg.input_size) + "x" +
                                    std::to_string(m.cfg.input_size) + ", 3 channels)");
    }
    auto [p3, p4, p5] = backbone_pyramid(tape, m, images);
    auto [t3, o4, o5] = neck_forward(tape, m, p3, p4, p5);

    if (m.tdath) return tdath_forward(tape, {t3, o4, o5}, *m.tdath);

    HeadOutputs out;
    const std::array<Tensor, 3> feats = {t3, o4, o5};
    for (int sc = 0; sc < 3; ++sc) {
        const PlainHead& h = (*m.plain_heads)[static_cast<std::size_t>(sc)];
        const Tensor& f = feats[static_cast<std::size_t>(sc)];
        Tensor cls_feat = silu(tape, conv2d(tape, f, h.stem_cls));
        Tensor reg_feat = silu(tape, conv2d(tape, f, h.stem_reg));
        out.cls[static_cast<std::size_t>(sc)] = conv2d(tape, cls_feat, h.cls_out);
        out.ltrb[static_cast<std::size_t>(sc)] = softplus(tape, conv2d(tape, reg_feat, h.reg_out));
    }
    return out;
}

Tensor erf_map(const Model& m, int input_size, int trials, std::uint32_t seed, int probe_stage) {
    if (trials < 1) throw std::invalid_argument("erf_map: trials must be >= 1");
    std::mt19937 rng(seed);
    Tensor acc = Tensor::zeros({1, 1, input_size, input_size});
    for (int t = 0; t < trials; ++t) {
        Tensor x = randn({1, 3, input_size, input_size}, rng);
        x.set_requires_grad(true);
        Tape tape;
        Tensor out = backbone_forward(&tape, m, x, probe_stage);
        const Shape4& os = out.shape();
        std::vector<CellIndex> center = {{0, os.h / 2, os.w / 2}};
        Tensor probe = sum(&tape, gather_hw(&tape, out, center));
        tape.backward(probe);
        const std::vector<float>& g = x.grad();
        for (int y = 0; y < input_size; ++y) {
            for (int xx = 0; xx < input_size; ++xx) {
                float mag = 0.0f;
                for (int c = 0; c < 3; ++c) {
                    mag += std::fabs(
                        g[static_cast<std::size_t>((c * input_size + y) * input_size + xx)]);
                }
                acc.at(0, 0, y, xx) += mag;
            }
        }
    }
    float mx = 0.0f;
    for (float v : acc.data()) mx = std::max(mx, v);
    if (mx > 0.0f) {
        for (float& v : acc.data()) v /= mx;
    }
    return acc;
}

std::pair<int, int> conv_rf_interval(const std::vector<ConvSpec>& chain, int center) {
    int lo = center, hi = center;
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
        lo = lo * it->stride - it->padding;
        hi = hi * it->stride - it->padding + it->kernel - 1;
    }
    return {lo, hi};
}

std::int64_t parameter_count(const Model& m) {
    std::int64_t acc = 0;
    for (const auto& [name, t] : m.params) acc += t.numel();
    return acc;
}

// ---- checkpoint io -------------------------------------------------------------

void save_checkpoint(const Model& m, const std::string& path) {
    nlohmann::json header;
    header["version"] = 1;
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& [name, t] : m.params) {
        plist.push_back({{"name", name},
                         {"shape", {t.shape().n, t.shape().c, t.shape().h, t.shape().w}}});
    }
    header["params"] = plist;
    const std::string head_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
    out.write("BFACKPT1", 8);
    const std::uint64_t len = head_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(head_str.data(), static_cast<std::streamsize>(head_str.size()));
    for (const auto& [name, t] : m.params) {
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.data().size() * sizeof(float)));
    }
}

void load_checkpoint(Model& m, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot read " + path);
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, "BFACKPT1", 8) != 0) {
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string head_str(len, '\0');
    in.read(head_str.data(), static_cast<std::streamsize>(len));
    nlohmann::json header = nlohmann::json::parse(head_str);

    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : m.params) by_name.emplace(name, t);

    for (const auto& entry : header.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto& sh = entry.at("shape");
        const Shape4 shape{sh.at(0).get<int>(), sh.at(1).get<int>(), sh.at(2).get<int>(),
                           sh.at(3).get<int>()};
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw std::runtime_error("load_checkpoint: model has no parameter named " + name);
        }
        if (!(it->second.shape() == shape)) {
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name + ": file " +
                                     shape.str() + " vs model " + it->second.shape().str());
        }
        in.read(reinterpret_cast<char*>(it->second.data().data()),
                static_cast<std::streamsize>(it->second.data().size() * sizeof(float)));
        if (!in) throw std::runtime_error("load_checkpoint: truncated payload in " + path);
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw std::runtime_error("load_checkpoint: file misses parameter " + by_name.begin()->first);
    }
}

}  // namespace bfa
