#include "bfa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace bfa {

float iou(const Box& a, const Box& b) {
    check_box(a, "iou");
    check_box(b, "iou");
    const float ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const float iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ix <= 0.0f || iy <= 0.0f) return 0.0f;
    const float inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;  // stable: ties keep lower index first
    });
    std::vector<Detection> kept;
    for (std::size_t idx : order) {
        const Detection& d = dets[idx];
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.class_id == d.class_id && k.image_id == d.image_id &&
                iou(k.box, d.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

ApResult evaluate_ap(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                     float iou_threshold, AreaRange range) {
    ApResult result;
    for (const Annotation& g : gts) {
        if (range.contains(g.box.area())) ++result.num_gt;
    }

    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

    std::vector<bool> gt_matched(gts.size(), false);
    std::vector<int> flags;  // 1 = TP, 0 = FP; ignored detections are skipped
    flags.reserve(dets.size());
    for (std::size_t idx : order) {
        const Detection& d = dets[idx];
        int best_in = -1, best_out = -1;
        float best_in_iou = 0.0f, best_out_iou = 0.0f;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gts[g].image_id != d.image_id) continue;
            const float ov = iou(d.box, gts[g].box);
            if (ov < iou_threshold) continue;
            if (range.contains(gts[g].box.area())) {
                if (!gt_matched[g] && ov > best_in_iou) {
                    best_in_iou = ov;
                    best_in = static_cast<int>(g);
                }
            } else if (ov > best_out_iou) {
                best_out_iou = ov;
                best_out = static_cast<int>(g);
            }
        }
        if (best_in >= 0) {
            gt_matched[static_cast<std::size_t>(best_in)] = true;
            flags.push_back(1);
        } else if (best_out >= 0) {
            // matched an out-of-range gt: neither TP nor FP
        } else if (range.contains(d.box.area())) {
            flags.push_back(0);
        }
        // unmatched detection outside the range: ignored
    }

    // raw PR walk, then 101-point interpolation
    std::vector<PrPoint> raw;
    int tp = 0, fp = 0;
    for (int f : flags) {
        if (f == 1) ++tp;
        else ++fp;
        PrPoint pt;
        pt.recall = result.num_gt > 0 ? static_cast<float>(tp) / static_cast<float>(result.num_gt) : 0.0f;
        pt.precision = static_cast<float>(tp) / static_cast<float>(tp + fp);
        raw.push_back(pt);
    }
    result.pr.resize(101);
    double ap_acc = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const float r = static_cast<float>(i) / 100.0f;
        float best = 0.0f;
        for (const PrPoint& pt : raw) {
            if (pt.recall >= r - 1e-9f) best = std::max(best, pt.precision);
        }
        result.pr[static_cast<std::size_t>(i)] = {r, best};
        ap_acc += best;
    }
    result.ap = result.num_gt > 0 ? static_cast<float>(ap_acc / 101.0) : 0.0f;
    return result;
}

namespace {

std::vector<Detection> dets_of_class(const std::vector<Detection>& dets, int c) {
    std::vector<Detection> out;
    for (const Detection& d : dets) {
        if (d.class_id == c) out.push_back(d);
    }
    return out;
}

std::vector<Annotation> gts_of_class(const std::vector<Annotation>& gts, int c) {
    std::vector<Annotation> out;
    for (const Annotation& g : gts) {
        if (g.class_id == c) out.push_back(g);
    }
    return out;
}

// mean AP over (class, threshold) pairs where the class has in-range gts
float mean_ap(const std::vector<Detection>& dets, const std::vector<Annotation>& gts, int num_classes,
              const std::vector<float>& thresholds, AreaRange range = {}) {
    double acc = 0.0;
    int terms = 0;
    for (int c = 0; c < num_classes; ++c) {
        auto dc = dets_of_class(dets, c);
        auto gc = gts_of_class(gts, c);
        for (float thr : thresholds) {
            ApResult r = evaluate_ap(dc, gc, thr, range);
            if (r.num_gt > 0) {
                acc += r.ap;
                ++terms;
            }
        }
    }
    return terms > 0 ? static_cast<float>(acc / terms) : 0.0f;
}

}  // namespace

EvalReport coco_suite(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                      int num_classes, const std::vector<std::string>& class_names) {
    EvalReport report;
    report.num_classes = num_classes;
    report.class_names = class_names;
    if (report.class_names.empty()) {
        for (int c = 0; c < num_classes; ++c) report.class_names.push_back("class" + std::to_string(c));
    }
    report.per_class_ap.assign(static_cast<std::size_t>(num_classes), {});
    report.pr50.resize(static_cast<std::size_t>(num_classes));

    std::array<double, 10> thr_mean{};
    std::array<int, 10> thr_terms{};
    for (int c = 0; c < num_classes; ++c) {
        auto dc = dets_of_class(dets, c);
        auto gc = gts_of_class(gts, c);
        for (std::size_t t = 0; t < kIouThresholds.size(); ++t) {
            ApResult r = evaluate_ap(dc, gc, kIouThresholds[t]);
            report.per_class_ap[static_cast<std::size_t>(c)][t] = r.num_gt > 0 ? r.ap : -1.0f;
            if (r.num_gt > 0) {
                thr_mean[t] += r.ap;
                ++thr_terms[t];
            }
            if (t == 0) report.pr50[static_cast<std::size_t>(c)] = std::move(r.pr);
        }
    }
    auto thr_value = [&](std::size_t t) {
        return thr_terms[t] > 0 ? static_cast<float>(thr_mean[t] / thr_terms[t]) : 0.0f;
    };
    report.ap50 = thr_value(0);
    report.ap75 = thr_value(5);
    double all = 0.0;
    for (std::size_t t = 0; t < 10; ++t) all += thr_value(t);
    report.ap50_95 = static_cast<float>(all / 10.0);

    const std::vector<float> all_thr(kIouThresholds.begin(), kIouThresholds.end());
    report.ap_small = mean_ap(dets, gts, num_classes, all_thr, {0.0f, kSmallAreaMax});
    report.ap_medium = mean_ap(dets, gts, num_classes, all_thr, {kSmallAreaMax, kMediumAreaMax});
    report.ap_large =
        mean_ap(dets, gts, num_classes, all_thr, {kMediumAreaMax, std::numeric_limits<float>::infinity()});
    return report;
}

// ---- PR export ---------------------------------------------------------------

void pr_curve_export(const EvalReport& report, const std::string& csv_path, const std::string& svg_path) {
    {
        std::ofstream csv(csv_path);
        if (!csv) throw std::runtime_error("pr_curve_export: cannot write " + csv_path);
        csv << "recall";
        for (const std::string& name : report.class_names) csv << "," << name;
        csv << "\n";
        char buf[64];
        for (int i = 0; i <= 100; ++i) {
            std::snprintf(buf, sizeof(buf), "%.2f", static_cast<double>(i) / 100.0);
            csv << buf;
            for (int c = 0; c < report.num_classes; ++c) {
                const auto& pr = report.pr50[static_cast<std::size_t>(c)];
                const float p = pr.empty() ? 0.0f : pr[static_cast<std::size_t>(i)].precision;
                std::snprintf(buf, sizeof(buf), ",%.6f", static_cast<double>(p));
                csv << buf;
            }
            csv << "\n";
        }
    }
    {
        static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                        "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
        const int w = 640, h = 480, margin = 48;
        std::ofstream svg(svg_path);
        if (!svg) throw std::runtime_error("pr_curve_export: cannot write " + svg_path);
        svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
        svg << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
        svg << "<line x1=\"" << margin << "\" y1=\"" << h - margin << "\" x2=\"" << w - margin
            << "\" y2=\"" << h - margin << "\" stroke=\"black\"/>\n";
        svg << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
            << h - margin << "\" stroke=\"black\"/>\n";
        svg << "<text x=\"" << w / 2 << "\" y=\"" << h - 12 << "\" font-size=\"14\">recall</text>\n";
        svg << "<text x=\"8\" y=\"" << h / 2 << "\" font-size=\"14\">precision</text>\n";
        char buf[160];
        for (int c = 0; c < report.num_classes; ++c) {
            const auto& pr = report.pr50[static_cast<std::size_t>(c)];
            if (pr.empty()) continue;
            svg << "<polyline fill=\"none\" stroke=\"" << kColors[c % 8] << "\" points=\"";
            for (std::size_t i = 0; i < pr.size(); ++i) {
                const double px = margin + pr[i].recall * (w - 2 * margin);
                const double py = h - margin - pr[i].precision * (h - 2 * margin);
                std::snprintf(buf, sizeof(buf), "%s%.2f,%.2f", i == 0 ? "" : " ", px, py);
                svg << buf;
            }
            svg << "\"/>\n";
            svg << "<text x=\"" << w - margin + 4 << "\" y=\"" << margin + 16 * (c + 1)
                << "\" font-size=\"12\" fill=\"" << kColors[c % 8] << "\">"
                << report.class_names[static_cast<std::size_t>(c)] << "</text>\n";
        }
        svg << "</svg>\n";
    }
}

// ---- TIDE ---------------------------------------------------------------------

namespace {

constexpr float kTideFg = 0.5f;
constexpr float kTideBg = 0.1f;

enum class ErrKind { None, Cls, Loc, Both, Dupe, Bkg };

struct TideScratch {
    std::vector<ErrKind> det_kind;
    std::vector<int> det_gt;  // gt referenced by the error, -1 when none
    std::vector<bool> gt_matched;
    std::vector<bool> gt_explained;
};

float class_mean_ap50(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                      int num_classes) {
    return mean_ap(dets, gts, num_classes, {0.5f});
}

TideScratch classify_errors(const std::vector<Detection>& dets, const std::vector<Annotation>& gts) {
    TideScratch st;
    st.det_kind.assign(dets.size(), ErrKind::None);
    st.det_gt.assign(dets.size(), -1);
    st.gt_matched.assign(gts.size(), false);
    st.gt_explained.assign(gts.size(), false);

    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

    for (std::size_t idx : order) {
        const Detection& d = dets[idx];
        int best_tp = -1, best_same = -1, best_other = -1;
        float tp_iou = 0.0f, same_iou = 0.0f, other_iou = 0.0f;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gts[g].image_id != d.image_id) continue;
            const float ov = iou(d.box, gts[g].box);
            if (gts[g].class_id == d.class_id) {
                if (ov > same_iou) {
                    same_iou = ov;
                    best_same = static_cast<int>(g);
                }
                if (!st.gt_matched[g] && ov >= kTideFg && ov > tp_iou) {
                    tp_iou = ov;
                    best_tp = static_cast<int>(g);
                }
            } else if (ov > other_iou) {
                other_iou = ov;
                best_other = static_cast<int>(g);
            }
        }
        if (best_tp >= 0) {
            st.gt_matched[static_cast<std::size_t>(best_tp)] = true;
            continue;  // true positive, no error
        }
        // one label per false positive, checked in a fixed order
        if (other_iou >= kTideFg) {
            st.det_kind[idx] = ErrKind::Cls;
            st.det_gt[idx] = best_other;
        } else if (same_iou >= kTideFg) {
            st.det_kind[idx] = ErrKind::Dupe;
            st.det_gt[idx] = best_same;
        } else if (same_iou >= kTideBg) {
            st.det_kind[idx] = ErrKind::Loc;
            st.det_gt[idx] = best_same;
        } else if (other_iou >= kTideBg) {
            st.det_kind[idx] = ErrKind::Both;
            st.det_gt[idx] = best_other;
        } else {
            st.det_kind[idx] = ErrKind::Bkg;
        }
        if (st.det_kind[idx] == ErrKind::Cls || st.det_kind[idx] == ErrKind::Loc ||
            st.det_kind[idx] == ErrKind::Both) {
            if (st.det_gt[idx] >= 0) st.gt_explained[static_cast<std::size_t>(st.det_gt[idx])] = true;
        }
    }
    return st;
}

}  // namespace

TideReport tide_analysis(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                         int num_classes) {
    TideReport report;
    TideScratch st = classify_errors(dets, gts);

    for (std::size_t g = 0; g < gts.size(); ++g) {
        if (!st.gt_matched[g] && !st.gt_explained[g]) ++report.miss;
    }
    report.baseline_ap50 = class_mean_ap50(dets, gts, num_classes);

    auto fixed_ap = [&](ErrKind kind) -> float {
        std::vector<Detection> fixed;
        fixed.reserve(dets.size());
        for (std::size_t i = 0; i < dets.size(); ++i) {
            Detection d = dets[i];
            if (st.det_kind[i] == kind) {
                if (kind == ErrKind::Cls) {
                    d.class_id = gts[static_cast<std::size_t>(st.det_gt[i])].class_id;
                } else if (kind == ErrKind::Loc) {
                    d.box = gts[static_cast<std::size_t>(st.det_gt[i])].box;
                } else {
                    continue;  // Both / Dupe / Bkg: the oracle removes the detection
                }
            }
            fixed.push_back(d);
        }
        return class_mean_ap50(fixed, gts, num_classes);
    };

    for (std::size_t i = 0; i < dets.size(); ++i) {
        switch (st.det_kind[i]) {
            case ErrKind::Cls: ++report.cls; break;
            case ErrKind::Loc: ++report.loc; break;
            case ErrKind::Both: ++report.both; break;
            case ErrKind::Dupe: ++report.dupe; break;
            case ErrKind::Bkg: ++report.bkg; break;
            default: break;
        }
    }
    report.d_cls = fixed_ap(ErrKind::Cls) - report.baseline_ap50;
    report.d_loc = fixed_ap(ErrKind::Loc) - report.baseline_ap50;
    report.d_both = fixed_ap(ErrKind::Both) - report.baseline_ap50;
    report.d_dupe = fixed_ap(ErrKind::Dupe) - report.baseline_ap50;
    report.d_bkg = fixed_ap(ErrKind::Bkg) - report.baseline_ap50;
    {
        std::vector<Annotation> kept;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (st.gt_matched[g] || st.gt_explained[g]) kept.push_back(gts[g]);
        }
        report.d_miss = class_mean_ap50(dets, kept, num_classes) - report.baseline_ap50;
    }
    return report;
}

// ---- file formats ----------------------------------------------------------------

void write_detections_jsonl(const std::string& path, const std::vector<Detection>& dets) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_detections_jsonl: cannot write " + path);
    for (const Detection& d : dets) {
        nlohmann::json j;
        j["image_id"] = d.image_id;
        j["class_id"] = d.class_id;
        j["box"] = {d.box.x1, d.box.y1, d.box.x2, d.box.y2};
        j["score"] = d.score;
        out << j.dump() << "\n";
    }
}

std::vector<Detection> read_detections_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_detections_jsonl: cannot read " + path);
    std::vector<Detection> dets;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        Detection d;
        d.image_id = j.at("image_id").get<int>();
        d.class_id = j.at("class_id").get<int>();
        const auto& b = j.at("box");
        d.box = {b.at(0).get<float>(), b.at(1).get<float>(), b.at(2).get<float>(), b.at(3).get<float>()};
        d.score = j.at("score").get<float>();
        dets.push_back(d);
    }
    return dets;
}

void write_eval_report_json(const EvalReport& report, const std::string& path) {
    nlohmann::json j;
    j["num_classes"] = report.num_classes;
    j["class_names"] = report.class_names;
    j["ap50"] = report.ap50;
    j["ap75"] = report.ap75;
    j["ap50_95"] = report.ap50_95;
    j["ap_small"] = report.ap_small;
    j["ap_medium"] = report.ap_medium;
    j["ap_large"] = report.ap_large;
    j["nms_iou"] = report.nms_iou;
    j["conf_floor"] = report.conf_floor;
    nlohmann::json per_class = nlohmann::json::array();
    for (int c = 0; c < report.num_classes; ++c) {
        nlohmann::json row;
        row["class"] = report.class_names[static_cast<std::size_t>(c)];
        nlohmann::json aps = nlohmann::json::array();
        for (float v : report.per_class_ap[static_cast<std::size_t>(c)]) aps.push_back(v);
        row["ap_per_iou"] = aps;
        per_class.push_back(row);
    }
    j["per_class"] = per_class;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_eval_report_json: cannot write " + path);
    out << j.dump(2) << "\n";
}

void write_eval_report_csv(const EvalReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_eval_report_csv: cannot write " + path);
    out << "class";
    for (float thr : kIouThresholds) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), ",ap%.0f", static_cast<double>(thr * 100.0f));
        out << buf;
    }
    out << "\n";
    char val[32];
    for (int c = 0; c < report.num_classes; ++c) {
        out << report.class_names[static_cast<std::size_t>(c)];
        for (float v : report.per_class_ap[static_cast<std::size_t>(c)]) {
            std::snprintf(val, sizeof(val), ",%.6f", static_cast<double>(v));
            out << val;
        }
        out << "\n";
    }
    out << "\nmetric,value\n";
    const std::pair<const char*, float> aggregates[] = {
        {"ap50", report.ap50},       {"ap75", report.ap75},         {"ap50_95", report.ap50_95},
        {"ap_small", report.ap_small}, {"ap_medium", report.ap_medium}, {"ap_large", report.ap_large}};
    for (const auto& [name, v] : aggregates) {
        std::snprintf(val, sizeof(val), "%.6f", static_cast<double>(v));
        out << name << "," << val << "\n";
    }
}

void write_tide_report_json(const TideReport& report, const std::string& path) {
    nlohmann::json j;
    j["counts"] = {{"cls", report.cls},   {"loc", report.loc}, {"both", report.both},
                   {"dupe", report.dupe}, {"bkg", report.bkg}, {"miss", report.miss}};
    j["delta_ap"] = {{"cls", report.d_cls},   {"loc", report.d_loc}, {"both", report.d_both},
                     {"dupe", report.d_dupe}, {"bkg", report.d_bkg}, {"miss", report.d_miss}};
    j["baseline_ap50"] = report.baseline_ap50;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_tide_report_json: cannot write " + path);
    out << j.dump(2) << "\n";
}

}  // namespace bfa
