#include "bfa/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bfa/data.hpp"
#include "bfa/image.hpp"
#include "bfa/metrics.hpp"
#include "bfa/model.hpp"
#include "bfa/train.hpp"

namespace fs = std::filesystem;

namespace bfa {

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "run";
    unsigned seed = 0;
    bool tiny = false;
};

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.base_width = j.value("base_width", cfg.base_width);
    cfg.input_size = j.value("input_size", cfg.input_size);
    cfg.attn_heads = j.value("attn_heads", cfg.attn_heads);
    cfg.fbsm_expansion = j.value("fbsm_expansion", cfg.fbsm_expansion);
    cfg.use_fbsm = j.value("use_fbsm", cfg.use_fbsm);
    cfg.use_tdath = j.value("use_tdath", cfg.use_tdath);
    cfg.use_pmesa = j.value("use_pmesa", cfg.use_pmesa);
    if (j.contains("stage_depths")) {
        for (int i = 0; i < 4; ++i) cfg.stage_depths[static_cast<std::size_t>(i)] = j["stage_depths"].at(i);
    }
    if (j.contains("stage_mult")) {
        for (int i = 0; i < 4; ++i) cfg.stage_mult[static_cast<std::size_t>(i)] = j["stage_mult"].at(i);
    }
    if (j.contains("pmesa_n")) {
        for (int i = 0; i < 4; ++i) cfg.pmesa_n[static_cast<std::size_t>(i)] = j["pmesa_n"].at(i);
    }
    return cfg;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.lr = j.value("lr", cfg.lr);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.box_weight = j.value("box_weight", cfg.box_weight);
    return cfg;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["num_classes"] = cfg.num_classes;
    j["base_width"] = cfg.base_width;
    j["input_size"] = cfg.input_size;
    j["attn_heads"] = cfg.attn_heads;
    j["fbsm_expansion"] = cfg.fbsm_expansion;
    j["use_fbsm"] = cfg.use_fbsm;
    j["use_tdath"] = cfg.use_tdath;
    j["use_pmesa"] = cfg.use_pmesa;
    j["stage_depths"] = cfg.stage_depths;
    j["stage_mult"] = cfg.stage_mult;
    j["pmesa_n"] = cfg.pmesa_n;
    return j;
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["lr"] = cfg.lr;
    j["momentum"] = cfg.momentum;
    j["weight_decay"] = cfg.weight_decay;
    j["batch_size"] = cfg.batch_size;
    j["epochs"] = cfg.epochs;
    j["box_weight"] = cfg.box_weight;
    j["tal_alpha"] = cfg.tal_alpha;
    j["tal_beta"] = cfg.tal_beta;
    j["tal_topk"] = cfg.tal_topk;
    return j;
}

nlohmann::json load_config_file(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

// Scene layout for small training images: fewer, larger cells.
SceneSpec scene_spec_for(int image_size) {
    SceneSpec spec;
    spec.image_size = image_size;
    if (image_size <= 160) {
        spec.min_floors = 3;
        spec.max_floors = 4;
        spec.min_bays = 3;
        spec.max_bays = 4;
    }
    return spec;
}

void write_manifest(const std::string& out_dir, const std::string& command, unsigned seed,
                    nlohmann::json extra) {
    fs::create_directories(out_dir);
    nlohmann::json j;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = std::move(extra);
    std::ofstream out(fs::path(out_dir) / "manifest.json");
    out << j.dump(2) << "\n";
}

void print_report_line(const EvalReport& r) {
    std::printf("ap50 %.4f  ap75 %.4f  ap50:95 %.4f  small %.4f  medium %.4f  large %.4f\n",
                static_cast<double>(r.ap50), static_cast<double>(r.ap75),
                static_cast<double>(r.ap50_95), static_cast<double>(r.ap_small),
                static_cast<double>(r.ap_medium), static_cast<double>(r.ap_large));
}

EvalReport evaluate_items(const Model& model, const std::vector<TrainItem>& items,
                          const std::vector<std::string>& class_names) {
    std::vector<Detection> dets = detect_images(model, items);
    std::vector<Annotation> gts;
    for (const TrainItem& item : items) {
        gts.insert(gts.end(), item.gts.begin(), item.gts.end());
    }
    return coco_suite(dets, gts, static_cast<int>(class_names.size()), class_names);
}

int cmd_gen_data(const CommonOpts& opts, int n, int size, bool frontal) {
    const SceneSpec spec = scene_spec_for(opts.tiny ? 64 : size);
    generate_dataset(spec, n, opts.seed, opts.out_dir, !frontal);
    nlohmann::json extra;
    extra["n"] = n;
    extra["image_size"] = spec.image_size;
    extra["multi_view"] = !frontal;
    write_manifest(opts.out_dir, "gen-data", opts.seed, extra);
    std::printf("wrote %d scenes to %s\n", n, opts.out_dir.c_str());
    return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& data_dir, int epochs_override,
              float lr_override, int batch_override, int ap_every) {
    const nlohmann::json file_cfg = load_config_file(opts.config_path);
    ModelConfig mcfg = model_config_from_json(file_cfg.value("model", nlohmann::json::object()));
    TrainConfig tcfg = train_config_from_json(file_cfg.value("train", nlohmann::json::object()));
    if (opts.tiny) {
        mcfg.base_width = 8;
        mcfg.input_size = 64;
        tcfg.epochs = 3;
        tcfg.batch_size = 4;
        tcfg.lr = 0.01f;
    }
    if (epochs_override > 0) tcfg.epochs = epochs_override;
    if (lr_override > 0) tcfg.lr = lr_override;
    if (batch_override > 0) tcfg.batch_size = batch_override;

    Dataset ds = load_dataset(data_dir);
    std::vector<TrainItem> items = load_split_items(ds, ds.train, mcfg.input_size);
    Model model = build_model(mcfg, opts.seed);
    SgdState state;
    nlohmann::json log = nlohmann::json::array();
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        EpochStats st = train_epoch(model, items, tcfg, opts.seed + static_cast<unsigned>(epoch), state);
        nlohmann::json row = {{"epoch", epoch + 1}, {"total", st.total}, {"cls", st.cls},
                              {"box", st.box}};
        if (ap_every > 0 && (epoch + 1) % ap_every == 0) {
            EvalReport r = evaluate_items(model, items, ds.class_names);
            row["ap50"] = r.ap50;
            std::printf("epoch %3d  loss %.4f  cls %.4f  box %.4f  ap50 %.4f\n", epoch + 1,
                        static_cast<double>(st.total), static_cast<double>(st.cls),
                        static_cast<double>(st.box), static_cast<double>(r.ap50));
        } else {
            std::printf("epoch %3d  loss %.4f  cls %.4f  box %.4f\n", epoch + 1,
                        static_cast<double>(st.total), static_cast<double>(st.cls),
                        static_cast<double>(st.box));
        }
        log.push_back(std::move(row));
    }
    fs::create_directories(opts.out_dir);
    save_checkpoint(model, (fs::path(opts.out_dir) / "model.ckpt").string());

    std::vector<std::string> names(ds.class_names);
    EvalReport final_report = evaluate_items(model, items, names);
    print_report_line(final_report);

    nlohmann::json extra;
    extra["model"] = model_config_to_json(mcfg);
    extra["train"] = train_config_to_json(tcfg);
    extra["data"] = data_dir;
    extra["log"] = log;
    extra["final"] = {{"ap50", final_report.ap50},
                      {"ap75", final_report.ap75},
                      {"ap50_95", final_report.ap50_95},
                      {"split", "train"}};
    write_manifest(opts.out_dir, "train", opts.seed, extra);
    return 0;
}

int cmd_detect(const CommonOpts& opts, const std::string& data_dir, const std::string& ckpt,
               const std::string& split_name) {
    const nlohmann::json file_cfg = load_config_file(opts.config_path);
    ModelConfig mcfg = model_config_from_json(file_cfg.value("model", nlohmann::json::object()));
    if (opts.tiny) {
        mcfg.base_width = 8;
        mcfg.input_size = 64;
    }
    Dataset ds = load_dataset(data_dir);
    const DatasetSplit& split = split_name == "train" ? ds.train
                                : split_name == "val" ? ds.val
                                                      : ds.test;
    std::vector<TrainItem> items = load_split_items(ds, split, mcfg.input_size);
    Model model = build_model(mcfg, opts.seed);
    load_checkpoint(model, ckpt);
    std::vector<Detection> dets = detect_images(model, items);
    // map local item indices back to the split's global image ids
    for (Detection& d : dets) {
        d.image_id = split.images[static_cast<std::size_t>(d.image_id)].id;
    }
    fs::create_directories(opts.out_dir);
    const std::string out_path = (fs::path(opts.out_dir) / "detections.jsonl").string();
    write_detections_jsonl(out_path, dets);
    nlohmann::json extra;
    extra["model"] = model_config_to_json(mcfg);
    extra["checkpoint"] = ckpt;
    extra["split"] = split_name;
    extra["detections"] = out_path;
    write_manifest(opts.out_dir, "detect", opts.seed, extra);
    std::printf("wrote %zu detections to %s\n", dets.size(), out_path.c_str());
    return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& gt_path, const std::string& dets_path) {
    DatasetSplit split = load_split_json(gt_path);
    std::vector<Detection> dets = read_detections_jsonl(dets_path);
    std::vector<std::string> names(kClassNames.begin(), kClassNames.end());
    EvalReport report = coco_suite(dets, split.annotations, kNumClasses, names);
    fs::create_directories(opts.out_dir);
    write_eval_report_json(report, (fs::path(opts.out_dir) / "report.json").string());
    write_eval_report_csv(report, (fs::path(opts.out_dir) / "report.csv").string());
    pr_curve_export(report, (fs::path(opts.out_dir) / "pr.csv").string(),
                    (fs::path(opts.out_dir) / "pr.svg").string());
    nlohmann::json extra;
    extra["gt"] = gt_path;
    extra["dets"] = dets_path;
    extra["nms_iou"] = report.nms_iou;
    extra["conf_floor"] = report.conf_floor;
    write_manifest(opts.out_dir, "eval", opts.seed, extra);
    print_report_line(report);
    return 0;
}

int cmd_tide(const CommonOpts& opts, const std::string& gt_path, const std::string& dets_path) {
    DatasetSplit split = load_split_json(gt_path);
    std::vector<Detection> dets = read_detections_jsonl(dets_path);
    TideReport report = tide_analysis(dets, split.annotations, kNumClasses);
    fs::create_directories(opts.out_dir);
    write_tide_report_json(report, (fs::path(opts.out_dir) / "tide.json").string());
    nlohmann::json extra;
    extra["gt"] = gt_path;
    extra["dets"] = dets_path;
    write_manifest(opts.out_dir, "tide", opts.seed, extra);
    std::printf("cls %d  loc %d  both %d  dupe %d  bkg %d  miss %d\n", report.cls, report.loc,
                report.both, report.dupe, report.bkg, report.miss);
    return 0;
}

int cmd_erf(const CommonOpts& opts, const std::string& ckpt, int trials, int stage) {
    const nlohmann::json file_cfg = load_config_file(opts.config_path);
    ModelConfig mcfg = model_config_from_json(file_cfg.value("model", nlohmann::json::object()));
    if (opts.tiny) {
        mcfg.base_width = 8;
        mcfg.input_size = 64;
    }
    Model model = build_model(mcfg, opts.seed);
    if (!ckpt.empty()) load_checkpoint(model, ckpt);
    Tensor map = erf_map(model, mcfg.input_size, trials, opts.seed, stage);
    fs::create_directories(opts.out_dir);
    {
        std::ofstream csv(fs::path(opts.out_dir) / "erf.csv");
        char buf[32];
        for (int y = 0; y < mcfg.input_size; ++y) {
            for (int x = 0; x < mcfg.input_size; ++x) {
                std::snprintf(buf, sizeof(buf), "%s%.6f", x == 0 ? "" : ",",
                              static_cast<double>(map.at(0, 0, y, x)));
                csv << buf;
            }
            csv << "\n";
        }
    }
    write_pgm(map.data(), mcfg.input_size, mcfg.input_size,
              (fs::path(opts.out_dir) / "erf.pgm").string());
    nlohmann::json extra;
    extra["model"] = model_config_to_json(mcfg);
    extra["trials"] = trials;
    extra["probe_stage"] = stage;
    extra["checkpoint"] = ckpt;
    write_manifest(opts.out_dir, "erf", opts.seed, extra);
    std::printf("wrote erf map (%dx%d) to %s\n", mcfg.input_size, mcfg.input_size, opts.out_dir.c_str());
    return 0;
}

int cmd_ablate(const CommonOpts& opts, int n_scenes, int epochs) {
    // one shared tiny dataset, eight switch combinations end to end
    const int image_size = 64;
    const SceneSpec spec = scene_spec_for(image_size);
    const std::string data_dir = (fs::path(opts.out_dir) / "data").string();
    Dataset ds = generate_dataset(spec, n_scenes, opts.seed, data_dir, true);

    TrainConfig tcfg;
    tcfg.epochs = epochs;
    tcfg.batch_size = 4;
    tcfg.lr = 0.01f;

    const char* row_names[8] = {"Baseline", "M1", "M2", "M3", "M4", "M5", "M6", "M7"};
    const bool switches[8][3] = {{false, false, false}, {true, false, false}, {false, true, false},
                                 {false, false, true},  {true, true, false},  {true, false, true},
                                 {false, true, true},   {true, true, true}};
    fs::create_directories(opts.out_dir);
    std::ofstream csv(fs::path(opts.out_dir) / "ablation.csv");
    csv << "model,fbsm,tdath,pmesa,ap_small,ap_medium,ap_large,ap50,ap75,ap50_95\n";
    std::printf("%-9s %5s %6s %6s %9s %10s %9s %7s %7s %8s\n", "model", "fbsm", "tdath", "pmesa",
                "ap_small", "ap_medium", "ap_large", "ap50", "ap75", "ap50:95");
    for (int row = 0; row < 8; ++row) {
        ModelConfig mcfg;
        mcfg.base_width = 8;
        mcfg.input_size = image_size;
        mcfg.use_fbsm = switches[row][0];
        mcfg.use_tdath = switches[row][1];
        mcfg.use_pmesa = switches[row][2];
        Model model = build_model(mcfg, opts.seed);
        std::vector<TrainItem> items = load_split_items(ds, ds.train, mcfg.input_size);
        SgdState state;
        for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
            train_epoch(model, items, tcfg, opts.seed + static_cast<unsigned>(epoch), state);
        }
        std::vector<TrainItem> test_items = load_split_items(ds, ds.test, mcfg.input_size);
        std::vector<std::string> names(kClassNames.begin(), kClassNames.end());
        EvalReport r = evaluate_items(model, test_items, names);
        char line[256];
        std::snprintf(line, sizeof(line), "%s,%d,%d,%d,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f",
                      row_names[row], switches[row][0] ? 1 : 0, switches[row][1] ? 1 : 0,
                      switches[row][2] ? 1 : 0, static_cast<double>(r.ap_small),
                      static_cast<double>(r.ap_medium), static_cast<double>(r.ap_large),
                      static_cast<double>(r.ap50), static_cast<double>(r.ap75),
                      static_cast<double>(r.ap50_95));
        csv << line << "\n";
        std::printf("%-9s %5d %6d %6d %9.4f %10.4f %9.4f %7.4f %7.4f %8.4f\n", row_names[row],
                    switches[row][0] ? 1 : 0, switches[row][1] ? 1 : 0, switches[row][2] ? 1 : 0,
                    static_cast<double>(r.ap_small), static_cast<double>(r.ap_medium),
                    static_cast<double>(r.ap_large), static_cast<double>(r.ap50),
                    static_cast<double>(r.ap75), static_cast<double>(r.ap50_95));
    }
    nlohmann::json extra;
    extra["n_scenes"] = n_scenes;
    extra["epochs"] = epochs;
    extra["image_size"] = image_size;
    write_manifest(opts.out_dir, "ablate", opts.seed, extra);
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"BFA-YOLO facade-attachment detection toolkit"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string stage = "argument parsing";

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic facade dataset");
    int gen_n = 20, gen_size = 448;
    bool gen_frontal = false;
    gen->add_option("--n", gen_n, "number of scenes");
    gen->add_option("--size", gen_size, "image size in pixels");
    gen->add_flag("--frontal", gen_frontal, "skip the multi-view warp");

    // train
    auto* train = app.add_subcommand("train", "train a detector");
    std::string train_data;
    int train_epochs = 0, train_batch = 0, train_ap_every = 0;
    float train_lr = 0.0f;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--epochs", train_epochs, "override epoch count");
    train->add_option("--lr", train_lr, "override learning rate");
    train->add_option("--batch", train_batch, "override batch size");
    train->add_option("--ap-every", train_ap_every, "record training-set AP every N epochs");

    // detect
    auto* detect = app.add_subcommand("detect", "run inference and write detections");
    std::string det_data, det_ckpt, det_split = "test";
    detect->add_option("--data", det_data, "dataset directory")->required();
    detect->add_option("--ckpt", det_ckpt, "checkpoint file")->required();
    detect->add_option("--split", det_split, "train/val/test");

    // eval
    auto* eval = app.add_subcommand("eval", "score detections against ground truth");
    std::string eval_gt, eval_dets;
    eval->add_option("--gt", eval_gt, "ground-truth split json")->required();
    eval->add_option("--dets", eval_dets, "detections jsonl")->required();

    // tide
    auto* tide = app.add_subcommand("tide", "TIDE error analysis");
    std::string tide_gt, tide_dets;
    tide->add_option("--gt", tide_gt, "ground-truth split json")->required();
    tide->add_option("--dets", tide_dets, "detections jsonl")->required();

    // erf
    auto* erf = app.add_subcommand("erf", "effective receptive field map");
    std::string erf_ckpt;
    int erf_trials = 8, erf_stage = 4;
    erf->add_option("--ckpt", erf_ckpt, "optional checkpoint");
    erf->add_option("--trials", erf_trials, "random input trials");
    erf->add_option("--stage", erf_stage, "backbone stage to probe (1..4)");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "run the 8 switch combinations");
    int abl_scenes = 12, abl_epochs = 2;
    ablate->add_option("--n", abl_scenes, "scenes in the shared tiny dataset");
    ablate->add_option("--epochs", abl_epochs, "epochs per combination");

    for (auto* sub : {gen, train, detect, eval, tide, erf, ablate}) {
        sub->add_option("--config", opts.config_path, "JSON config file");
        sub->add_option("--seed", opts.seed, "RNG seed");
        sub->add_option("--out", opts.out_dir, "output directory");
        sub->add_flag("--tiny", opts.tiny, "desk-scale preset");
    }

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::cout << app.help();
            return 0;
        }
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (gen->parsed()) {
            stage = "gen-data";
            return cmd_gen_data(opts, gen_n, gen_size, gen_frontal);
        }
        if (train->parsed()) {
            stage = "train";
            return cmd_train(opts, train_data, train_epochs, train_lr, train_batch, train_ap_every);
        }
        if (detect->parsed()) {
            stage = "detect";
            return cmd_detect(opts, det_data, det_ckpt, det_split);
        }
        if (eval->parsed()) {
            stage = "eval";
            return cmd_eval(opts, eval_gt, eval_dets);
        }
        if (tide->parsed()) {
            stage = "tide";
            return cmd_tide(opts, tide_gt, tide_dets);
        }
        if (erf->parsed()) {
            stage = "erf";
            return cmd_erf(opts, erf_ckpt, erf_trials, erf_stage);
        }
        if (ablate->parsed()) {
            stage = "ablate";
            return cmd_ablate(opts, abl_scenes, abl_epochs);
        }
    } catch (const std::exception& e) {
        std::cerr << "error in stage " << stage << ": " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n" << app.help();
    return 2;
}

}  // namespace bfa
