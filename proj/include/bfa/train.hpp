#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bfa/data.hpp"
#include "bfa/model.hpp"
#include "bfa/tensor.hpp"
#include "bfa/types.hpp"

namespace bfa {

struct TrainConfig {
    // full-scale defaults; desk-scale runs override lr/epochs/batch and
    // record the resolved values in the run manifest
    float lr = 0.001f;
    float momentum = 0.937f;
    float weight_decay = 0.0005f;
    int batch_size = 16;
    int epochs = 500;
    // assignment and loss constants
    float tal_alpha = 1.0f;
    float tal_beta = 6.0f;
    int tal_topk = 10;
    float box_weight = 5.0f;

    void validate() const;
};

// ---- CIoU ----------------------------------------------------------------------

// 1 - [IoU - rho^2/c^2 - alpha*v]; alpha = v / (1 - IoU + v).
float ciou_loss(const Box& pred, const Box& gt);

// ---- task-aligned assignment ------------------------------------------------------

struct CellPrior {
    float cx = 0, cy = 0;  // cell center, pixels
    float stride = 0;
    int scale = 0;
    int iy = 0, ix = 0;
};

struct AssignedCell {
    int prior = -1;
    int gt = -1;
    float alignment = 0.0f;  // score^alpha * iou^beta
    float iou = 0.0f;
    float target = 0.0f;     // normalized classification target
};

// Flattened priors for a head output shape, scale-major then row-major.
std::vector<CellPrior> make_priors(const HeadOutputs& outputs);

// Each gt takes its top-k cells (by alignment, ties to the lower cell index)
// among the cells whose centers lie inside the gt box; a cell wanted by
// several gts keeps the one with the higher alignment. Targets are the
// alignments rescaled per gt to peak at that gt's best IoU.
std::vector<AssignedCell> tal_assign(const std::vector<CellPrior>& priors,
                                     const std::vector<float>& class_scores, int num_classes,
                                     const std::vector<Box>& pred_boxes,
                                     const std::vector<Annotation>& gts, const TrainConfig& cfg);

// ---- losses ------------------------------------------------------------------------

// Sum of binary cross-entropy with logits against constant targets.
Tensor bce_with_logits_sum(Tape* tape, const Tensor& logits, const Tensor& targets);

struct LossParts {
    Tensor total;       // scalar, on tape
    float total_value = 0.0f;
    float cls_value = 0.0f;
    float box_value = 0.0f;
    int num_assigned = 0;
};

// Detached assignment for one batch: classification target maps plus the
// gather plan for the box loss. Computed from the forward values on the
// host; the loss treats it as a constant.
struct BatchAssignment {
    std::array<Tensor, 3> targets;  // target maps per scale
    struct ScalePlan {
        std::vector<CellIndex> cells;
        std::vector<float> cxs, cys, strides;
        std::vector<Box> gt_boxes;
    };
    std::array<ScalePlan, 3> plans;
    int num_assigned = 0;
};

BatchAssignment assign_batch(const HeadOutputs& outputs,
                             const std::vector<std::vector<Annotation>>& gts_per_image,
                             const TrainConfig& cfg, int num_classes);

// BCE on class logits (targets = normalized alignment at assigned cells,
// zero elsewhere, normalized by the assigned-cell count) plus
// box_weight * mean CIoU over assigned cells, for a fixed assignment.
LossParts detection_loss_assigned(Tape* tape, const HeadOutputs& outputs,
                                  const BatchAssignment& assignment, const TrainConfig& cfg);

// assign_batch + detection_loss_assigned in one call.
LossParts detection_loss(Tape* tape, const HeadOutputs& outputs,
                         const std::vector<std::vector<Annotation>>& gts_per_image,
                         const TrainConfig& cfg, int num_classes);

// ---- SGD ----------------------------------------------------------------------------

struct SgdState {
    std::vector<std::vector<float>> velocity;
};

// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
// Weight decay applies only where decay_mask is set.
void sgd_step(NamedParams& params, const std::vector<bool>& decay_mask, SgdState& state,
              const TrainConfig& cfg);

// ---- training loop --------------------------------------------------------------------

struct TrainItem {
    Tensor image;  // (1,3,S,S), values in [0,1]
    std::vector<Annotation> gts;  // image_id = item index
};

// Loads a split into memory; every image must match the expected input size.
std::vector<TrainItem> load_split_items(const Dataset& ds, const DatasetSplit& split, int expect_size);

struct EpochStats {
    float total = 0.0f;
    float cls = 0.0f;
    float box = 0.0f;
};

EpochStats train_epoch(Model& model, const std::vector<TrainItem>& items, const TrainConfig& cfg,
                       std::uint32_t seed, SgdState& state);

// Full inference pipeline: forward, decode, confidence floor, class-wise NMS.
// Detections carry the item index as image_id.
std::vector<Detection> detect_images(const Model& m, const std::vector<TrainItem>& items,
                                     float conf_floor = 0.001f, float nms_iou = 0.65f);

}  // namespace bfa
