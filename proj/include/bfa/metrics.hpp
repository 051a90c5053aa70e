#pragma once

#include <array>
#include <limits>
#include <string>
#include <vector>

#include "bfa/types.hpp"

namespace bfa {

float iou(const Box& a, const Box& b);

// Greedy class-wise non-maximum suppression: descending score, ties broken by
// lower input index; a detection is dropped when its IoU with any kept
// detection of the same class exceeds the threshold.
std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold);

struct PrPoint {
    float recall = 0.0f;
    float precision = 0.0f;
};

struct AreaRange {
    // membership: lo < area <= hi
    float lo = 0.0f;
    float hi = std::numeric_limits<float>::infinity();

    bool contains(float area) const { return area > lo && area <= hi; }
};

inline constexpr float kSmallAreaMax = 32.0f * 32.0f;
inline constexpr float kMediumAreaMax = 96.0f * 96.0f;

struct ApResult {
    float ap = 0.0f;
    int num_gt = 0;                // in-range ground truths
    std::vector<PrPoint> pr;       // 101 interpolated samples at recall 0, 0.01, ..., 1
};

// Single-class average precision with greedy score-descending matching:
// each ground truth matches at most once, a match needs IoU >= threshold,
// matching happens within the same image. Ground truths outside the area
// range do not count and absorb detections silently; unmatched detections
// outside the range are ignored as well. AP is the 101-point interpolated
// mean precision.
ApResult evaluate_ap(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                     float iou_threshold, AreaRange range = {});

inline constexpr std::array<float, 10> kIouThresholds = {0.50f, 0.55f, 0.60f, 0.65f, 0.70f,
                                                         0.75f, 0.80f, 0.85f, 0.90f, 0.95f};

struct EvalReport {
    int num_classes = 0;
    std::vector<std::string> class_names;
    // ap[class][threshold index], full area range; -1 when the class has no gts
    std::vector<std::array<float, 10>> per_class_ap;
    float ap50 = 0.0f;
    float ap75 = 0.0f;
    float ap50_95 = 0.0f;
    float ap_small = 0.0f;
    float ap_medium = 0.0f;
    float ap_large = 0.0f;
    std::vector<std::vector<PrPoint>> pr50;  // per class at IoU 0.5
    // post-processing configuration recorded with every report
    float nms_iou = 0.65f;
    float conf_floor = 0.001f;
};

// The full AP ladder: IoU 0.50:0.05:0.95, COCO-style area buckets with the
// boundary at 32^2 inclusive for small and 96^2 inclusive for medium.
// Class means skip classes without ground truths.
EvalReport coco_suite(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                      int num_classes, const std::vector<std::string>& class_names = {});

// CSV (recall, one precision column per class) and a standalone SVG chart of
// the IoU-0.5 PR curves. Output bytes are deterministic for a fixed report.
void pr_curve_export(const EvalReport& report, const std::string& csv_path, const std::string& svg_path);

struct TideReport {
    int cls = 0, loc = 0, both = 0, dupe = 0, bkg = 0, miss = 0;
    float d_cls = 0, d_loc = 0, d_both = 0, d_dupe = 0, d_bkg = 0, d_miss = 0;
    float baseline_ap50 = 0.0f;
};

// TIDE-style error accounting at foreground threshold 0.5 / background
// threshold 0.1. Every false positive receives exactly one label; delta AP
// per type is AP50 after oracle-fixing that error type minus the baseline.
TideReport tide_analysis(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                         int num_classes);

// ---- file formats -----------------------------------------------------------

void write_detections_jsonl(const std::string& path, const std::vector<Detection>& dets);
std::vector<Detection> read_detections_jsonl(const std::string& path);

void write_eval_report_json(const EvalReport& report, const std::string& path);
void write_eval_report_csv(const EvalReport& report, const std::string& path);
void write_tide_report_json(const TideReport& report, const std::string& path);

}  // namespace bfa
