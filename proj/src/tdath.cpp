#include "bfa/tdath.hpp"

#include <cmath>
#include <stdexcept>

namespace bfa {

namespace {

ConvParams make_conv(int c_in, int c_out, int k, int stride, std::mt19937& rng, bool zero_init = false) {
    ConvParams p;
    const float stddev = zero_init ? 0.0f : std::sqrt(2.0f / static_cast<float>(c_in * k * k));
    p.weight = zero_init ? Tensor::zeros({c_out, c_in, k, k}) : randn({c_out, c_in, k, k}, rng, stddev);
    p.bias = Tensor::zeros({1, 1, 1, c_out});
    p.stride = stride;
    p.padding = (k - 1) / 2;
    return p;
}

int norm_groups(int channels) { return (channels >= 16 && channels % 16 == 0) ? 16 : channels; }

}  // namespace

ConvGn make_conv_gn(int c_in, int c_out, std::mt19937& rng) {
    ConvGn p;
    p.conv = make_conv(c_in, c_out, 3, 1, rng);
    p.gamma = Tensor::full({1, 1, 1, c_out}, 1.0f);
    p.beta = Tensor::zeros({1, 1, 1, c_out});
    p.groups = norm_groups(c_out);
    return p;
}

Tensor conv_gn(Tape* tape, const Tensor& x, const ConvGn& p) {
    return silu(tape, group_norm(tape, conv2d(tape, x, p.conv), p.groups, p.gamma, p.beta));
}

std::pair<Tensor, Tensor> task_split(Tape* tape, const Tensor& x, const TaskSplit& p) {
    Tensor pooled = global_avg_pool(tape, x);
    Tensor w_cls = sigmoid(tape, conv2d(tape, pooled, p.fc_cls));
    Tensor w_reg = sigmoid(tape, conv2d(tape, pooled, p.fc_reg));
    return {scale_channels(tape, x, w_cls), scale_channels(tape, x, w_reg)};
}

Tdath make_tdath(const std::array<int, 3>& channels, int num_classes, std::mt19937& rng) {
    Tdath head;
    for (int s = 0; s < 3; ++s) {
        TdathHead& h = head.heads[static_cast<std::size_t>(s)];
        const int c = channels[static_cast<std::size_t>(s)];
        h.channels = c;
        h.num_classes = num_classes;
        h.interact1 = make_conv_gn(c, c, rng);
        h.interact2 = make_conv_gn(c, c, rng);
        for (int j = 0; j < 3; ++j) {
            if (j == s) continue;
            CrcsPath path;
            const int cj = channels[static_cast<std::size_t>(j)];
            if (j < s) {
                for (int step = 0; step < s - j; ++step) path.down.push_back(make_conv(cj, cj, 3, 2, rng));
            } else {
                path.up_steps = j - s;
            }
            path.proj = make_conv(cj, c, 1, 1, rng, /*zero_init=*/true);
            h.neighbor[static_cast<std::size_t>(j)] = std::move(path);
        }
        h.split.fc_cls = make_conv(c, c, 1, 1, rng, /*zero_init=*/true);
        h.split.fc_reg = make_conv(c, c, 1, 1, rng, /*zero_init=*/true);
        h.offset_conv = make_conv(c, 18, 3, 1, rng, /*zero_init=*/true);
        h.dcn = make_conv(c, c, 3, 1, rng);
        h.reg_out = make_conv(c, 4, 1, 1, rng);
        h.cls_out = make_conv(2 * c, num_classes, 1, 1, rng);
        // start classification near a low-but-alive prior
        std::fill(h.cls_out.bias.data().begin(), h.cls_out.bias.data().end(), -2.0f);
    }
    return head;
}

Tensor crcs_fuse(Tape* tape, const std::array<Tensor, 3>& features, int target, const TdathHead& head) {
    if (target < 0 || target > 2) throw std::invalid_argument("crcs_fuse: target scale out of range");
    for (const Tensor& f : features) {
        if (!f.defined()) throw std::invalid_argument("crcs_fuse: missing scale feature");
    }
    Tensor acc = features[static_cast<std::size_t>(target)];
    for (int j = 0; j < 3; ++j) {
        if (j == target) continue;
        const CrcsPath& path = *head.neighbor[static_cast<std::size_t>(j)];
        Tensor f = features[static_cast<std::size_t>(j)];
        for (const ConvParams& dc : path.down) f = conv2d(tape, f, dc);
        for (int step = 0; step < path.up_steps; ++step) f = upsample_nearest2x(tape, f);
        acc = add(tape, acc, conv2d(tape, f, path.proj));
    }
    return acc;
}

HeadOutputs tdath_forward(Tape* tape, const std::array<Tensor, 3>& features, const Tdath& head) {
    std::array<Tensor, 3> inter;
    for (int s = 0; s < 3; ++s) {
        const TdathHead& h = head.heads[static_cast<std::size_t>(s)];
        const Tensor& x = features[static_cast<std::size_t>(s)];
        if (x.shape().c != h.channels) {
            throw std::invalid_argument("tdath: scale " + std::to_string(s) + " channels " +
                                        std::to_string(x.shape().c) + " != head channels " +
                                        std::to_string(h.channels));
        }
        Tensor y = conv_gn(tape, conv_gn(tape, x, h.interact1), h.interact2);
        inter[static_cast<std::size_t>(s)] = add(tape, y, x);
    }
    HeadOutputs out;
    for (int s = 0; s < 3; ++s) {
        const TdathHead& h = head.heads[static_cast<std::size_t>(s)];
        Tensor refined = crcs_fuse(tape, inter, s, h);
        auto [cls_feat, reg_feat] = task_split(tape, refined, h.split);

        Tensor offsets = conv2d(tape, reg_feat, h.offset_conv);
        Tensor dc = deformable_conv2d(tape, reg_feat, h.dcn, offsets);
        out.ltrb[static_cast<std::size_t>(s)] = softplus(tape, conv2d(tape, dc, h.reg_out));

        Tensor cls_in = concat_channels(tape, {cls_feat, refined});
        out.cls[static_cast<std::size_t>(s)] = conv2d(tape, cls_in, h.cls_out);
    }
    return out;
}

std::vector<std::vector<Detection>> decode_ltrb(const HeadOutputs& outputs, float conf_threshold) {
    if (conf_threshold < 0.0f || conf_threshold > 1.0f) {
        throw std::invalid_argument("decode_ltrb: confidence threshold outside [0,1]");
    }
    const int batch = outputs.cls[0].shape().n;
    std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(batch));
    for (int s = 0; s < 3; ++s) {
        const Tensor& cls = outputs.cls[static_cast<std::size_t>(s)];
        const Tensor& ltrb = outputs.ltrb[static_cast<std::size_t>(s)];
        const float stride = static_cast<float>(outputs.strides[static_cast<std::size_t>(s)]);
        const Shape4& cs = cls.shape();
        for (int n = 0; n < cs.n; ++n) {
            for (int i = 0; i < cs.h; ++i) {
                for (int j = 0; j < cs.w; ++j) {
                    int best = 0;
                    float best_logit = cls.at(n, 0, i, j);
                    for (int c = 1; c < cs.c; ++c) {
                        const float v = cls.at(n, c, i, j);
                        if (v > best_logit) {
                            best_logit = v;
                            best = c;
                        }
                    }
                    const float score = 1.0f / (1.0f + std::exp(-best_logit));
                    if (score < conf_threshold) continue;
                    const float cx = (static_cast<float>(j) + 0.5f) * stride;
                    const float cy = (static_cast<float>(i) + 0.5f) * stride;
                    Detection det;
                    det.image_id = n;
                    det.class_id = best;
                    det.score = score;
                    det.box = {cx - ltrb.at(n, 0, i, j) * stride, cy - ltrb.at(n, 1, i, j) * stride,
                               cx + ltrb.at(n, 2, i, j) * stride, cy + ltrb.at(n, 3, i, j) * stride};
                    // softplus can underflow to a zero-size box; drop those
                    if (det.box.width() < 1e-3f || det.box.height() < 1e-3f) continue;
                    dets[static_cast<std::size_t>(n)].push_back(det);
                }
            }
        }
    }
    return dets;
}

void ConvGn::collect_params(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".weight", conv.weight);
    out.emplace_back(prefix + ".bias", conv.bias);
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
}

void TaskSplit::collect_params(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".cls.weight", fc_cls.weight);
    out.emplace_back(prefix + ".cls.bias", fc_cls.bias);
    out.emplace_back(prefix + ".reg.weight", fc_reg.weight);
    out.emplace_back(prefix + ".reg.bias", fc_reg.bias);
}

void CrcsPath::collect_params(const std::string& prefix, NamedParams& out) const {
    for (std::size_t i = 0; i < down.size(); ++i) {
        out.emplace_back(prefix + ".down" + std::to_string(i) + ".weight", down[i].weight);
        out.emplace_back(prefix + ".down" + std::to_string(i) + ".bias", down[i].bias);
    }
    out.emplace_back(prefix + ".proj.weight", proj.weight);
    out.emplace_back(prefix + ".proj.bias", proj.bias);
}

void TdathHead::collect_params(const std::string& prefix, NamedParams& out) const {
    interact1.collect_params(prefix + ".interact1", out);
    interact2.collect_params(prefix + ".interact2", out);
    for (int j = 0; j < 3; ++j) {
        if (neighbor[static_cast<std::size_t>(j)]) {
            neighbor[static_cast<std::size_t>(j)]->collect_params(prefix + ".crcs" + std::to_string(j),
                                                                  out);
        }
    }
    split.collect_params(prefix + ".split", out);
    out.emplace_back(prefix + ".offset.weight", offset_conv.weight);
    out.emplace_back(prefix + ".offset.bias", offset_conv.bias);
    out.emplace_back(prefix + ".dcn.weight", dcn.weight);
    out.emplace_back(prefix + ".dcn.bias", dcn.bias);
    out.emplace_back(prefix + ".reg.weight", reg_out.weight);
    out.emplace_back(prefix + ".reg.bias", reg_out.bias);
    out.emplace_back(prefix + ".cls.weight", cls_out.weight);
    out.emplace_back(prefix + ".cls.bias", cls_out.bias);
}

void Tdath::collect_params(const std::string& prefix, NamedParams& out) const {
    for (int s = 0; s < 3; ++s) {
        heads[static_cast<std::size_t>(s)].collect_params(prefix + ".p" + std::to_string(s + 3), out);
    }
}

}  // namespace bfa
