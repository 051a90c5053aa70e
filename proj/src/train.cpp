#include "bfa/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <stdexcept>

#include "bfa/metrics.hpp"

namespace bfa {

void TrainConfig::validate() const {
    // lr 0 is allowed as a degenerate no-update configuration
    if (lr < 0.0f) throw std::invalid_argument("train config: lr must be >= 0");
    if (momentum < 0.0f || momentum >= 1.0f) {
        throw std::invalid_argument("train config: momentum must be in [0,1)");
    }
    if (batch_size < 1 || epochs < 1 || tal_topk < 1) {
        throw std::invalid_argument("train config: batch size, epochs and top-k must be >= 1");
    }
}

// ---- CIoU ---------------------------------------------------------------------------

float ciou_loss(const Box& pred, const Box& gt) {
    check_box(pred, "ciou_loss");
    check_box(gt, "ciou_loss");
    const float ov = iou(pred, gt);
    const float pcx = 0.5f * (pred.x1 + pred.x2), pcy = 0.5f * (pred.y1 + pred.y2);
    const float gcx = 0.5f * (gt.x1 + gt.x2), gcy = 0.5f * (gt.y1 + gt.y2);
    const float rho2 = (pcx - gcx) * (pcx - gcx) + (pcy - gcy) * (pcy - gcy);
    const float ex = std::max(pred.x2, gt.x2) - std::min(pred.x1, gt.x1);
    const float ey = std::max(pred.y2, gt.y2) - std::min(pred.y1, gt.y1);
    const float c2 = ex * ex + ey * ey + 1e-9f;
    const float q = 4.0f / (static_cast<float>(M_PI) * static_cast<float>(M_PI));
    const float dv = std::atan(gt.width() / gt.height()) - std::atan(pred.width() / pred.height());
    const float v = q * dv * dv;
    const float alpha = v / (1.0f - ov + v + 1e-9f);
    return 1.0f - (ov - rho2 / c2 - alpha * v);
}

// ---- priors and assignment -------------------------------------------------------------

std::vector<CellPrior> make_priors(const HeadOutputs& outputs) {
    std::vector<CellPrior> priors;
    for (int s = 0; s < 3; ++s) {
        const Shape4& sh = outputs.cls[static_cast<std::size_t>(s)].shape();
        const float stride = static_cast<float>(outputs.strides[static_cast<std::size_t>(s)]);
        for (int iy = 0; iy < sh.h; ++iy) {
            for (int ix = 0; ix < sh.w; ++ix) {
                priors.push_back({(static_cast<float>(ix) + 0.5f) * stride,
                                  (static_cast<float>(iy) + 0.5f) * stride, stride, s, iy, ix});
            }
        }
    }
    return priors;
}

namespace {

// Predicted boxes can collapse to zero size when softplus underflows; treat
// them as zero-overlap instead of erroring.
float iou_nothrow(const Box& pred, const Box& gt) {
    if (!pred.valid()) return 0.0f;
    return iou(pred, gt);
}

}  // namespace

std::vector<AssignedCell> tal_assign(const std::vector<CellPrior>& priors,
                                     const std::vector<float>& class_scores, int num_classes,
                                     const std::vector<Box>& pred_boxes,
                                     const std::vector<Annotation>& gts, const TrainConfig& cfg) {
    const int np = static_cast<int>(priors.size());
    if (static_cast<int>(class_scores.size()) != np * num_classes ||
        static_cast<int>(pred_boxes.size()) != np) {
        throw std::invalid_argument("tal_assign: scores/boxes do not match the prior count");
    }
    // per-prior winner across gts: higher alignment wins, ties keep earlier gt
    std::vector<AssignedCell> winner(priors.size());
    struct GtBest {
        float max_iou = 0.0f;
        float max_align = 0.0f;
    };
    std::vector<GtBest> gt_best(gts.size());

    for (std::size_t g = 0; g < gts.size(); ++g) {
        const Annotation& gt = gts[g];
        std::vector<std::pair<float, int>> candidates;  // (alignment, prior index)
        std::vector<float> candidate_iou(priors.size(), 0.0f);
        for (int p = 0; p < np; ++p) {
            const CellPrior& pr = priors[static_cast<std::size_t>(p)];
            if (pr.cx <= gt.box.x1 || pr.cx >= gt.box.x2 || pr.cy <= gt.box.y1 || pr.cy >= gt.box.y2) {
                continue;
            }
            const float score =
                class_scores[static_cast<std::size_t>(p) * num_classes + gt.class_id];
            const float ov = iou_nothrow(pred_boxes[static_cast<std::size_t>(p)], gt.box);
            const float align =
                std::pow(score, cfg.tal_alpha) * std::pow(ov, cfg.tal_beta);
            candidates.emplace_back(align, p);
            candidate_iou[static_cast<std::size_t>(p)] = ov;
        }
        // top-k by alignment, ties to the lower cell index
        std::stable_sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
            return a.first > b.first;
        });
        if (static_cast<int>(candidates.size()) > cfg.tal_topk) {
            candidates.resize(static_cast<std::size_t>(cfg.tal_topk));
        }
        for (const auto& [align, p] : candidates) {
            gt_best[g].max_iou = std::max(gt_best[g].max_iou, candidate_iou[static_cast<std::size_t>(p)]);
            gt_best[g].max_align = std::max(gt_best[g].max_align, align);
            AssignedCell& slot = winner[static_cast<std::size_t>(p)];
            if (slot.gt < 0 || align > slot.alignment) {
                slot.prior = p;
                slot.gt = static_cast<int>(g);
                slot.alignment = align;
                slot.iou = candidate_iou[static_cast<std::size_t>(p)];
            }
        }
    }

    std::vector<AssignedCell> assigned;
    for (const AssignedCell& slot : winner) {
        if (slot.gt < 0) continue;
        AssignedCell out = slot;
        const GtBest& best = gt_best[static_cast<std::size_t>(slot.gt)];
        // exact ratio: alignments can be arbitrarily small early in training,
        // an epsilon in the denominator would zero every target
        out.target = best.max_align > 0.0f
                         ? static_cast<float>(static_cast<double>(slot.alignment) /
                                              static_cast<double>(best.max_align) *
                                              static_cast<double>(best.max_iou))
                         : 0.0f;
        assigned.push_back(out);
    }
    return assigned;
}

// ---- losses -------------------------------------------------------------------------------

Tensor bce_with_logits_sum(Tape* tape, const Tensor& logits, const Tensor& targets) {
    if (!(logits.shape() == targets.shape())) {
        throw std::invalid_argument("bce_with_logits: shape mismatch " + logits.shape().str() + " vs " +
                                    targets.shape().str());
    }
    Tensor out = Tensor::zeros({1, 1, 1, 1});
    const std::size_t n = static_cast<std::size_t>(logits.numel());
    const float* x = logits.data().data();
    const float* t = targets.data().data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        // max(x,0) - x*t + log(1 + exp(-|x|))
        acc += std::max(x[i], 0.0f) - x[i] * t[i] + std::log1p(std::exp(-std::fabs(x[i])));
    }
    out.data()[0] = static_cast<float>(acc);
    if (tape != nullptr && logits.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [logits, targets, out] {
            const float g = out.impl()->grad[0];
            const std::size_t m = static_cast<std::size_t>(logits.numel());
            const float* xv = logits.data().data();
            const float* tv = targets.data().data();
            for (std::size_t i = 0; i < m; ++i) {
                const float sig = 1.0f / (1.0f + std::exp(-xv[i]));
                accum_grad(logits, static_cast<std::int64_t>(i), g * (sig - tv[i]));
            }
        });
    }
    return out;
}

namespace {

// Differentiable CIoU of gathered ltrb columns against constant gt boxes.
// cells: gathered (1,4,1,M) ltrb in stride units; centers/gt are constants.
Tensor ciou_sum_tensor(Tape* tape, const Tensor& ltrb_cols, const std::vector<float>& cxs,
                       const std::vector<float>& cys, const std::vector<float>& strides,
                       const std::vector<Box>& gt_boxes) {
    const int m = ltrb_cols.shape().w;
    const Shape4 row{1, 1, 1, m};
    auto constant = [&](const std::vector<float>& v) { return Tensor::from(row, v); };
    std::vector<float> x1g(m), y1g(m), x2g(m), y2g(m), wg(m), hg(m), sv(m);
    for (int i = 0; i < m; ++i) {
        const Box& g = gt_boxes[static_cast<std::size_t>(i)];
        x1g[i] = g.x1;
        y1g[i] = g.y1;
        x2g[i] = g.x2;
        y2g[i] = g.y2;
        wg[i] = g.width();
        hg[i] = g.height();
        sv[i] = strides[static_cast<std::size_t>(i)];
    }
    Tensor cx = constant(cxs), cy = constant(cys), st = constant(sv);
    Tensor l = mul(tape, slice_channels(tape, ltrb_cols, 0, 1), st);
    Tensor t = mul(tape, slice_channels(tape, ltrb_cols, 1, 2), st);
    Tensor r = mul(tape, slice_channels(tape, ltrb_cols, 2, 3), st);
    Tensor b = mul(tape, slice_channels(tape, ltrb_cols, 3, 4), st);
    Tensor x1 = sub(tape, cx, l), y1 = sub(tape, cy, t);
    Tensor x2 = add(tape, cx, r), y2 = add(tape, cy, b);

    Tensor gx1 = constant(x1g), gy1 = constant(y1g), gx2 = constant(x2g), gy2 = constant(y2g);
    Tensor iw = relu(tape, sub(tape, minimum(tape, x2, gx2), maximum(tape, x1, gx1)));
    Tensor ih = relu(tape, sub(tape, minimum(tape, y2, gy2), maximum(tape, y1, gy1)));
    Tensor inter = mul(tape, iw, ih);
    Tensor area_p = mul(tape, sub(tape, x2, x1), sub(tape, y2, y1));
    std::vector<float> area_gv(m);
    for (int i = 0; i < m; ++i) area_gv[i] = wg[i] * hg[i];
    Tensor uni = add_scalar(tape, sub(tape, add(tape, area_p, constant(area_gv)), inter), 1e-7f);
    Tensor ov = div(tape, inter, uni);

    Tensor pcx = mul_scalar(tape, add(tape, x1, x2), 0.5f);
    Tensor pcy = mul_scalar(tape, add(tape, y1, y2), 0.5f);
    std::vector<float> gcxv(m), gcyv(m);
    for (int i = 0; i < m; ++i) {
        gcxv[i] = 0.5f * (x1g[i] + x2g[i]);
        gcyv[i] = 0.5f * (y1g[i] + y2g[i]);
    }
    Tensor dx = sub(tape, pcx, constant(gcxv));
    Tensor dy = sub(tape, pcy, constant(gcyv));
    Tensor rho2 = add(tape, mul(tape, dx, dx), mul(tape, dy, dy));
    Tensor ex = sub(tape, maximum(tape, x2, gx2), minimum(tape, x1, gx1));
    Tensor ey = sub(tape, maximum(tape, y2, gy2), minimum(tape, y1, gy1));
    Tensor c2 = add_scalar(tape, add(tape, mul(tape, ex, ex), mul(tape, ey, ey)), 1e-9f);

    std::vector<float> atan_gv(m);
    for (int i = 0; i < m; ++i) atan_gv[i] = std::atan(wg[i] / hg[i]);
    Tensor dv = sub(tape, constant(atan_gv),
                    atan_op(tape, div(tape, sub(tape, x2, x1), add_scalar(tape, sub(tape, y2, y1), 1e-7f))));
    const float q = 4.0f / (static_cast<float>(M_PI) * static_cast<float>(M_PI));
    Tensor v = mul_scalar(tape, mul(tape, dv, dv), q);
    Tensor denom = add_scalar(tape, add(tape, sub(tape, Tensor::full(row, 1.0f), ov), v), 1e-9f);
    Tensor alpha = div(tape, v, denom);

    // loss = 1 - iou + rho2/c2 + alpha*v
    Tensor loss = add(tape, sub(tape, Tensor::full(row, 1.0f), ov),
                      add(tape, div(tape, rho2, c2), mul(tape, alpha, v)));
    return sum(tape, loss);
}

}  // namespace

BatchAssignment assign_batch(const HeadOutputs& outputs,
                             const std::vector<std::vector<Annotation>>& gts_per_image,
                             const TrainConfig& cfg, int num_classes) {
    const int batch = outputs.cls[0].shape().n;
    if (static_cast<int>(gts_per_image.size()) != batch) {
        throw std::invalid_argument("assign_batch: gt list does not match the batch size");
    }
    const std::vector<CellPrior> priors = make_priors(outputs);
    const int np = static_cast<int>(priors.size());

    BatchAssignment out;
    for (int s = 0; s < 3; ++s) {
        out.targets[static_cast<std::size_t>(s)] =
            Tensor::zeros(outputs.cls[static_cast<std::size_t>(s)].shape());
    }

    for (int n = 0; n < batch; ++n) {
        std::vector<float> scores(static_cast<std::size_t>(np) * num_classes);
        std::vector<Box> boxes(static_cast<std::size_t>(np));
        for (int p = 0; p < np; ++p) {
            const CellPrior& pr = priors[static_cast<std::size_t>(p)];
            const Tensor& cls = outputs.cls[static_cast<std::size_t>(pr.scale)];
            const Tensor& ltrb = outputs.ltrb[static_cast<std::size_t>(pr.scale)];
            for (int c = 0; c < num_classes; ++c) {
                scores[static_cast<std::size_t>(p) * num_classes + c] =
                    1.0f / (1.0f + std::exp(-cls.at(n, c, pr.iy, pr.ix)));
            }
            boxes[static_cast<std::size_t>(p)] = {pr.cx - ltrb.at(n, 0, pr.iy, pr.ix) * pr.stride,
                                                  pr.cy - ltrb.at(n, 1, pr.iy, pr.ix) * pr.stride,
                                                  pr.cx + ltrb.at(n, 2, pr.iy, pr.ix) * pr.stride,
                                                  pr.cy + ltrb.at(n, 3, pr.iy, pr.ix) * pr.stride};
        }
        const auto assigned =
            tal_assign(priors, scores, num_classes, boxes, gts_per_image[static_cast<std::size_t>(n)], cfg);
        for (const AssignedCell& a : assigned) {
            const CellPrior& pr = priors[static_cast<std::size_t>(a.prior)];
            const Annotation& gt =
                gts_per_image[static_cast<std::size_t>(n)][static_cast<std::size_t>(a.gt)];
            out.targets[static_cast<std::size_t>(pr.scale)].at(n, gt.class_id, pr.iy, pr.ix) = a.target;
            BatchAssignment::ScalePlan& plan = out.plans[static_cast<std::size_t>(pr.scale)];
            plan.cells.push_back({n, pr.iy, pr.ix});
            plan.cxs.push_back(pr.cx);
            plan.cys.push_back(pr.cy);
            plan.strides.push_back(pr.stride);
            plan.gt_boxes.push_back(gt.box);
            ++out.num_assigned;
        }
    }
    return out;
}

LossParts detection_loss_assigned(Tape* tape, const HeadOutputs& outputs,
                                  const BatchAssignment& assignment, const TrainConfig& cfg) {
    const float norm = 1.0f / static_cast<float>(std::max(1, assignment.num_assigned));
    Tensor cls_loss;
    for (int s = 0; s < 3; ++s) {
        Tensor part = bce_with_logits_sum(tape, outputs.cls[static_cast<std::size_t>(s)],
                                          assignment.targets[static_cast<std::size_t>(s)]);
        cls_loss = s == 0 ? part : add(tape, cls_loss, part);
    }
    cls_loss = mul_scalar(tape, cls_loss, norm);

    Tensor box_loss = Tensor::scalar(0.0f);
    bool any_box = false;
    for (int s = 0; s < 3; ++s) {
        const BatchAssignment::ScalePlan& plan = assignment.plans[static_cast<std::size_t>(s)];
        if (plan.cells.empty()) continue;
        Tensor cols = gather_hw(tape, outputs.ltrb[static_cast<std::size_t>(s)], plan.cells);
        Tensor part = ciou_sum_tensor(tape, cols, plan.cxs, plan.cys, plan.strides, plan.gt_boxes);
        box_loss = any_box ? add(tape, box_loss, part) : part;
        any_box = true;
    }
    if (any_box) box_loss = mul_scalar(tape, box_loss, norm);

    LossParts parts;
    parts.cls_value = cls_loss.item();
    parts.box_value = any_box ? box_loss.item() : 0.0f;
    parts.num_assigned = assignment.num_assigned;
    parts.total = any_box ? add(tape, cls_loss, mul_scalar(tape, box_loss, cfg.box_weight)) : cls_loss;
    parts.total_value = parts.total.item();
    return parts;
}

LossParts detection_loss(Tape* tape, const HeadOutputs& outputs,
                         const std::vector<std::vector<Annotation>>& gts_per_image,
                         const TrainConfig& cfg, int num_classes) {
    return detection_loss_assigned(tape, outputs, assign_batch(outputs, gts_per_image, cfg, num_classes),
                                   cfg);
}

// ---- SGD -----------------------------------------------------------------------------------

void sgd_step(NamedParams& params, const std::vector<bool>& decay_mask, SgdState& state,
              const TrainConfig& cfg) {
    if (params.size() != decay_mask.size()) {
        throw std::invalid_argument("sgd_step: decay mask does not match the parameter list");
    }
    if (state.velocity.empty()) {
        state.velocity.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.velocity[i].assign(params[i].second.data().size(), 0.0f);
        }
    }
    if (state.velocity.size() != params.size()) {
        throw std::invalid_argument("sgd_step: state does not match the parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].second;
        std::vector<float>& v = state.velocity[i];
        if (v.size() != p.data().size()) {
            throw std::invalid_argument("sgd_step: shape mismatch for parameter " + params[i].first);
        }
        const float wd = decay_mask[i] ? cfg.weight_decay : 0.0f;
        const bool has_grad = p.has_grad();
        const float* g = has_grad ? p.impl()->grad.data() : nullptr;
        float* pd = p.data().data();
        for (std::size_t j = 0; j < v.size(); ++j) {
            const float grad = (g != nullptr ? g[j] : 0.0f) + wd * pd[j];
            v[j] = cfg.momentum * v[j] + grad;
            pd[j] -= cfg.lr * v[j];
        }
    }
}

// ---- data loading and the loop ----------------------------------------------------------------

std::vector<TrainItem> load_split_items(const Dataset& ds, const DatasetSplit& split, int expect_size) {
    namespace fs = std::filesystem;
    std::vector<TrainItem> items;
    for (std::size_t i = 0; i < split.images.size(); ++i) {
        const DatasetImage& im = split.images[i];
        ImageU8 raster = read_ppm((fs::path(ds.root) / im.file).string());
        if (raster.width != expect_size || raster.height != expect_size) {
            throw std::runtime_error("load_split_items: image " + im.file + " is " +
                                     std::to_string(raster.width) + "x" + std::to_string(raster.height) +
                                     ", model expects " + std::to_string(expect_size));
        }
        Tensor t = Tensor::zeros({1, 3, raster.height, raster.width});
        for (int y = 0; y < raster.height; ++y) {
            for (int x = 0; x < raster.width; ++x) {
                const std::uint8_t* px = raster.at(x, y);
                for (int c = 0; c < 3; ++c) {
                    t.at(0, c, y, x) = static_cast<float>(px[c]) / 255.0f;
                }
            }
        }
        TrainItem item;
        item.image = t;
        for (const Annotation& a : split.annotations) {
            if (a.image_id == im.id) {
                Annotation local = a;
                local.image_id = static_cast<int>(i);
                item.gts.push_back(local);
            }
        }
        items.push_back(std::move(item));
    }
    return items;
}

namespace {

Tensor stack_images(const std::vector<TrainItem>& items, const std::vector<int>& ids) {
    const Shape4& s0 = items[static_cast<std::size_t>(ids[0])].image.shape();
    Tensor batch = Tensor::zeros({static_cast<int>(ids.size()), s0.c, s0.h, s0.w});
    const std::int64_t per = s0.numel();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& src = items[static_cast<std::size_t>(ids[i])].image.data();
        std::copy(src.begin(), src.end(), batch.data().begin() + static_cast<std::int64_t>(i) * per);
    }
    return batch;
}

}  // namespace

EpochStats train_epoch(Model& model, const std::vector<TrainItem>& items, const TrainConfig& cfg,
                       std::uint32_t seed, SgdState& state) {
    cfg.validate();
    if (items.empty()) throw std::invalid_argument("train_epoch: empty dataset");
    std::vector<int> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    EpochStats stats;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<int> ids(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
        Tensor batch = stack_images(items, ids);
        std::vector<std::vector<Annotation>> gts;
        gts.reserve(ids.size());
        for (int id : ids) gts.push_back(items[static_cast<std::size_t>(id)].gts);

        for (auto& [name, p] : model.params) p.zero_grad();
        Tape tape;
        HeadOutputs out = model_forward(&tape, model, batch);
        LossParts loss = detection_loss(&tape, out, gts, cfg, model.cfg.num_classes);
        tape.backward(loss.total);
        sgd_step(model.params, model.decay_mask, state, cfg);

        stats.total += loss.total_value;
        stats.cls += loss.cls_value;
        stats.box += loss.box_value;
        ++batches;
    }
    stats.total /= static_cast<float>(batches);
    stats.cls /= static_cast<float>(batches);
    stats.box /= static_cast<float>(batches);
    return stats;
}

std::vector<Detection> detect_images(const Model& m, const std::vector<TrainItem>& items, float conf_floor,
                                     float nms_iou) {
    std::vector<Detection> all;
    for (std::size_t i = 0; i < items.size(); ++i) {
        HeadOutputs out = model_forward(nullptr, m, items[i].image);
        auto per_image = decode_ltrb(out, conf_floor);
        for (Detection& d : per_image[0]) {
            d.image_id = static_cast<int>(i);
            all.push_back(d);
        }
    }
    return nms(all, nms_iou);
}

}  // namespace bfa
