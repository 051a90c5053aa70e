#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bfa/image.hpp"
#include "bfa/types.hpp"

namespace bfa {

// Class table in dataset order.
inline constexpr int kNumClasses = 7;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {"Door", "EM_Win", "PR_Win", "Bal",
                                                                     "ACU",  "Bib",    "Gla_Wal"};
enum ClassId : int { kDoor = 0, kEmWin, kPrWin, kBal, kAcu, kBib, kGlaWal };

// Reference class proportions the generator is tuned to.
inline constexpr std::array<float, kNumClasses> kTargetProportions = {
    0.08310f, 0.64280f, 0.08457f, 0.02553f, 0.11451f, 0.02825f, 0.02123f};

// Procedural facade scene: wall grid of window cells with doors on the
// ground floor, AC units and balconies attached to windows, billboard bands,
// and glass-curtain side strips. Occupancy probabilities are tuned so the
// expected class mix matches the reference proportions.
struct SceneSpec {
    int image_size = 448;
    int min_floors = 5;
    int max_floors = 8;
    int min_bays = 5;
    int max_bays = 8;
    float p_window = 0.9f;           // per upper-floor cell
    float p_protruding = 0.11627f;   // protruding share among windows
    float p_acu = 0.15743f;          // AC units per window
    float p_balcony = 0.03511f;      // balconies per window
    float door_rate = 0.10283f;      // per ground bay, times (floors-1)
    float bib_rate = 0.034956f;      // per billboard slot, times (floors-1)*bays/floors
    float glass_rate = 0.013131f;    // per side strip, times (floors-1)*bays
    std::array<bool, kNumClasses> enabled = {true, true, true, true, true, true, true};
};

struct Scene {
    ImageU8 image;
    std::vector<Annotation> annotations;  // image_id left 0
};

Scene generate_scene(const SceneSpec& spec, std::uint32_t seed);

// Camera pose of the multi-view sweep: azimuth steps of 60 degrees, downward
// tilt in [0, 30] degrees. Camera height is carried as metadata only.
struct ViewPose {
    int azimuth_deg = 0;
    float tilt_deg = 0.0f;
    float camera_height_m = 10.0f;
};

void check_pose(const ViewPose& pose);

// Homography standing in for the camera sweep: horizontal perspective for the
// azimuth, vertical foreshortening for the tilt, resampled with inverse-map
// bilinear reads. Boxes become the clipped axis-aligned enclosures of their
// warped corners; boxes fully outside the frame are dropped.
Scene apply_view_warp(const Scene& scene, const ViewPose& pose);

// Forward-maps one point through the pose homography (exposed for tests).
void warp_point(const ViewPose& pose, int width, int height, float x, float y, float& u, float& v);

// Tightest axis-aligned box over the set cells of a binary mask; the box of a
// single cell (r,c) is (c, r, c+1, r+1).
Box mask_to_bbox(const std::vector<std::uint8_t>& mask, int width, int height);

// 8:1:1 split: floor(0.8 n) / floor(0.1 n) / remainder, shuffle fixed by seed.
struct SplitResult {
    std::vector<int> train, val, test;
};
SplitResult split_dataset(const std::vector<int>& items, std::uint32_t seed);

// ---- dataset on disk ---------------------------------------------------------

struct DatasetImage {
    int id = 0;
    std::string file;
    int width = 0;
    int height = 0;
    ViewPose pose;
};

struct DatasetSplit {
    std::vector<DatasetImage> images;
    std::vector<Annotation> annotations;
};

struct Dataset {
    std::string root;
    DatasetSplit train, val, test;
    std::vector<std::string> class_names;
};

struct DatasetStats {
    // counts[split][class], splits ordered train/val/test
    std::array<std::array<int, kNumClasses>, 3> counts{};

    int split_total(int split) const;
    int class_total(int cls) const;
    int total() const;
};

DatasetStats dataset_stats(const Dataset& ds);
void write_stats_csv(const DatasetStats& stats, const std::vector<std::string>& class_names,
                     const std::string& path);

// Generates n scenes (one random pose each when multi_view), writes
// images/ + annotations/{train,val,test}.json + classes.txt + stats.csv.
Dataset generate_dataset(const SceneSpec& spec, int n, std::uint32_t seed, const std::string& out_dir,
                         bool multi_view);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// One split file ({images, annotations}) on its own, as used by eval/tide.
DatasetSplit load_split_json(const std::string& path);

}  // namespace bfa
