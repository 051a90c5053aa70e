#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "bfa/data.hpp"
#include "bfa/metrics.hpp"

using namespace bfa;

TEST_CASE("generate_scene determinism") {
    SceneSpec spec;
    spec.image_size = 192;
    Scene a = generate_scene(spec, 1234);
    Scene b = generate_scene(spec, 1234);
    CHECK(a.image.pixels == b.image.pixels);
    REQUIRE(a.annotations.size() == b.annotations.size());
    for (std::size_t i = 0; i < a.annotations.size(); ++i) {
        CHECK(a.annotations[i].class_id == b.annotations[i].class_id);
        CHECK(a.annotations[i].box.x1 == b.annotations[i].box.x1);
        CHECK(a.annotations[i].box.y2 == b.annotations[i].box.y2);
    }
    Scene c = generate_scene(spec, 1235);
    CHECK(a.image.pixels != c.image.pixels);
}

TEST_CASE("generate_scene windows-only configuration") {
    SceneSpec spec;
    spec.image_size = 192;
    spec.enabled = {false, true, true, false, false, false, false};
    for (std::uint32_t seed = 0; seed < 5; ++seed) {
        Scene s = generate_scene(spec, seed);
        CHECK(!s.annotations.empty());
        for (const Annotation& a : s.annotations) {
            CHECK((a.class_id == kEmWin || a.class_id == kPrWin));
        }
    }
}

TEST_CASE("generate_scene rejects tiny grids") {
    SceneSpec spec;
    spec.min_floors = 1;
    spec.max_floors = 1;
    CHECK_THROWS_AS(generate_scene(spec, 0), std::invalid_argument);
}

TEST_CASE("generate_scene box invariants") {
    SceneSpec spec;
    spec.image_size = 256;
    for (std::uint32_t seed = 0; seed < 10; ++seed) {
        Scene s = generate_scene(spec, seed);
        for (const Annotation& a : s.annotations) {
            CHECK(a.box.x1 >= 0.0f);
            CHECK(a.box.y1 >= 0.0f);
            CHECK(a.box.x2 <= static_cast<float>(s.image.width));
            CHECK(a.box.y2 <= static_cast<float>(s.image.height));
            CHECK(a.box.x1 < a.box.x2);
            CHECK(a.box.y1 < a.box.y2);
        }
    }
}

TEST_CASE("200-scene sweep hits the target class proportions within 3 points") {
    SceneSpec spec;
    std::array<long, kNumClasses> counts{};
    long total = 0;
    for (std::uint32_t seed = 0; seed < 200; ++seed) {
        Scene s = generate_scene(spec, 9000 + seed);
        for (const Annotation& a : s.annotations) {
            ++counts[static_cast<std::size_t>(a.class_id)];
            ++total;
        }
    }
    REQUIRE(total > 1000);
    for (int c = 0; c < kNumClasses; ++c) {
        const double got = static_cast<double>(counts[static_cast<std::size_t>(c)]) / total;
        const double want = kTargetProportions[static_cast<std::size_t>(c)];
        INFO("class ", kClassNames[static_cast<std::size_t>(c)], " got ", got, " want ", want);
        CHECK(std::fabs(got - want) <= 0.03);
    }
}

TEST_CASE("size-bucket mix over a sweep") {
    SceneSpec spec;
    int small_acu = 0, medium_win = 0, large_glass = 0;
    for (std::uint32_t seed = 0; seed < 60; ++seed) {
        Scene s = generate_scene(spec, 500 + seed);
        for (const Annotation& a : s.annotations) {
            const float area = a.box.area();
            if (a.class_id == kAcu && area <= kSmallAreaMax) ++small_acu;
            if ((a.class_id == kEmWin || a.class_id == kPrWin) && area > kSmallAreaMax &&
                area <= kMediumAreaMax) {
                ++medium_win;
            }
            if (a.class_id == kGlaWal && area > kMediumAreaMax) ++large_glass;
        }
    }
    CHECK(small_acu > 50);     // AC units populate the small bucket
    CHECK(medium_win > 200);   // windows populate the medium bucket
    CHECK(large_glass > 10);   // glass walls populate the large bucket
}

TEST_CASE("view warp identity at pose (0,0)") {
    SceneSpec spec;
    spec.image_size = 160;
    Scene s = generate_scene(spec, 7);
    Scene warped = apply_view_warp(s, {0, 0.0f});
    REQUIRE(warped.annotations.size() == s.annotations.size());
    for (std::size_t i = 0; i < s.annotations.size(); ++i) {
        CHECK(warped.annotations[i].box.x1 == doctest::Approx(s.annotations[i].box.x1).epsilon(1e-4));
        CHECK(warped.annotations[i].box.y2 == doctest::Approx(s.annotations[i].box.y2).epsilon(1e-4));
    }
    // interior pixels unchanged by the identity homography
    int diffs = 0;
    for (int y = 2; y < 158; ++y)
        for (int x = 2; x < 158; ++x)
            for (int c = 0; c < 3; ++c) {
                const int d = std::abs(static_cast<int>(warped.image.at(x, y)[c]) -
                                       static_cast<int>(s.image.at(x, y)[c]));
                if (d > 1) ++diffs;
            }
    CHECK(diffs == 0);
}

TEST_CASE("pure tilt shrinks every box height") {
    SceneSpec spec;
    spec.image_size = 256;
    Scene s = generate_scene(spec, 21);
    Scene warped = apply_view_warp(s, {0, 25.0f});
    REQUIRE(!warped.annotations.empty());
    // match by order: azimuth 0 keeps every box inside the frame
    REQUIRE(warped.annotations.size() == s.annotations.size());
    for (std::size_t i = 0; i < s.annotations.size(); ++i) {
        const float h0 = s.annotations[i].box.height();
        const float h1 = warped.annotations[i].box.height();
        CHECK(h1 < h0);
    }
}

TEST_CASE("warped box equals the enclosure of its warped corners") {
    SceneSpec spec;
    spec.image_size = 200;
    Scene s = generate_scene(spec, 33);
    const ViewPose pose{120, 18.0f};
    Scene warped = apply_view_warp(s, pose);
    REQUIRE(warped.annotations.size() == s.annotations.size());
    for (std::size_t i = 0; i < s.annotations.size(); ++i) {
        const Box& orig = s.annotations[i].box;
        float u, v;
        float x_min = 1e30f, y_min = 1e30f, x_max = -1e30f, y_max = -1e30f;
        for (float bx : {orig.x1, orig.x2}) {
            for (float by : {orig.y1, orig.y2}) {
                warp_point(pose, 200, 200, bx, by, u, v);
                x_min = std::min(x_min, u);
                x_max = std::max(x_max, u);
                y_min = std::min(y_min, v);
                y_max = std::max(y_max, v);
            }
        }
        const Box& got = warped.annotations[i].box;
        CHECK(got.x1 == doctest::Approx(std::max(0.0f, x_min)).epsilon(1e-4));
        CHECK(got.y1 == doctest::Approx(std::max(0.0f, y_min)).epsilon(1e-4));
        CHECK(got.x2 == doctest::Approx(std::min(200.0f, x_max)).epsilon(1e-4));
        CHECK(got.y2 == doctest::Approx(std::min(200.0f, y_max)).epsilon(1e-4));
    }
}

TEST_CASE("warp rejects invalid poses") {
    SceneSpec spec;
    spec.image_size = 96;
    Scene s = generate_scene(spec, 3);
    CHECK_THROWS_AS(apply_view_warp(s, {45, 0.0f}), std::invalid_argument);
    CHECK_THROWS_AS(apply_view_warp(s, {0, 35.0f}), std::invalid_argument);
    CHECK_THROWS_AS(apply_view_warp(s, {360, 0.0f}), std::invalid_argument);
}

TEST_CASE("mask_to_bbox") {
    SUBCASE("single cell") {
        std::vector<std::uint8_t> mask(5 * 4, 0);
        mask[2 * 5 + 3] = 1;  // row 2, col 3
        Box b = mask_to_bbox(mask, 5, 4);
        CHECK(b.x1 == 3.0f);
        CHECK(b.y1 == 2.0f);
        CHECK(b.x2 == 4.0f);
        CHECK(b.y2 == 3.0f);
    }
    SUBCASE("full mask") {
        std::vector<std::uint8_t> mask(6 * 3, 1);
        Box b = mask_to_bbox(mask, 6, 3);
        CHECK(b.x1 == 0.0f);
        CHECK(b.y1 == 0.0f);
        CHECK(b.x2 == 6.0f);
        CHECK(b.y2 == 3.0f);
    }
    SUBCASE("random scatter equals a min/max scan") {
        std::mt19937 rng(41);
        for (int trial = 0; trial < 20; ++trial) {
            const int w = 8 + static_cast<int>(rng() % 8), h = 8 + static_cast<int>(rng() % 8);
            std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
            int x_min = w, x_max = -1, y_min = h, y_max = -1;
            const int k = 1 + static_cast<int>(rng() % 10);
            for (int i = 0; i < k; ++i) {
                const int x = static_cast<int>(rng() % static_cast<unsigned>(w));
                const int y = static_cast<int>(rng() % static_cast<unsigned>(h));
                mask[static_cast<std::size_t>(y) * w + x] = 1;
                x_min = std::min(x_min, x);
                x_max = std::max(x_max, x);
                y_min = std::min(y_min, y);
                y_max = std::max(y_max, y);
            }
            Box b = mask_to_bbox(mask, w, h);
            CHECK(b.x1 == static_cast<float>(x_min));
            CHECK(b.y1 == static_cast<float>(y_min));
            CHECK(b.x2 == static_cast<float>(x_max + 1));
            CHECK(b.y2 == static_cast<float>(y_max + 1));
        }
    }
    SUBCASE("empty mask rejected") {
        std::vector<std::uint8_t> mask(12, 0);
        CHECK_THROWS_AS(mask_to_bbox(mask, 4, 3), std::invalid_argument);
    }
}

TEST_CASE("split_dataset") {
    SUBCASE("n=10 gives 8/1/1") {
        std::vector<int> items(10);
        std::iota(items.begin(), items.end(), 0);
        SplitResult r = split_dataset(items, 5);
        CHECK(r.train.size() == 8);
        CHECK(r.val.size() == 1);
        CHECK(r.test.size() == 1);
    }
    SUBCASE("n=1240 gives 992/124/124") {
        std::vector<int> items(1240);
        std::iota(items.begin(), items.end(), 0);
        SplitResult r = split_dataset(items, 5);
        CHECK(r.train.size() == 992);
        CHECK(r.val.size() == 124);
        CHECK(r.test.size() == 124);
    }
    SUBCASE("union of splits is the input set") {
        std::vector<int> items(137);
        std::iota(items.begin(), items.end(), 100);
        SplitResult r = split_dataset(items, 9);
        std::set<int> all;
        for (int v : r.train) all.insert(v);
        for (int v : r.val) all.insert(v);
        for (int v : r.test) all.insert(v);
        CHECK(all.size() == items.size());
        CHECK(*all.begin() == 100);
        CHECK(*all.rbegin() == 236);
    }
    SUBCASE("same seed same split, different seed different order") {
        std::vector<int> items(50);
        std::iota(items.begin(), items.end(), 0);
        SplitResult a = split_dataset(items, 7);
        SplitResult b = split_dataset(items, 7);
        CHECK(a.train == b.train);
        SplitResult c = split_dataset(items, 8);
        CHECK(a.train != c.train);
    }
    SUBCASE("too few items rejected") {
        std::vector<int> items(9);
        CHECK_THROWS_AS(split_dataset(items, 0), std::invalid_argument);
    }
}

TEST_CASE("dataset_stats and io round trip") {
    Dataset ds;
    ds.class_names.assign(kClassNames.begin(), kClassNames.end());
    ds.train.images.push_back({0, "images/a.ppm", 64, 64, {}});
    ds.train.annotations = {{0, kDoor, {1, 1, 5, 9}}, {0, kEmWin, {10, 10, 20, 20}}};
    ds.val.images.push_back({1, "images/b.ppm", 64, 64, {}});
    ds.val.annotations = {{1, kEmWin, {2, 2, 9, 9}}};

    DatasetStats st = dataset_stats(ds);
    CHECK(st.counts[0][kDoor] == 1);
    CHECK(st.counts[0][kEmWin] == 1);
    CHECK(st.counts[1][kEmWin] == 1);
    CHECK(st.class_total(kEmWin) == 2);
    CHECK(st.total() == 3);

    const auto dir = std::filesystem::temp_directory_path() / "bfa_ds_io";
    std::filesystem::remove_all(dir);
    save_dataset(ds, dir.string());
    Dataset back = load_dataset(dir.string());
    CHECK(back.train.images.size() == 1);
    CHECK(back.train.annotations.size() == 2);
    CHECK(back.val.annotations[0].class_id == kEmWin);
    CHECK(back.class_names.size() == kNumClasses);
    CHECK(std::filesystem::exists(dir / "stats.csv"));
    CHECK(std::filesystem::exists(dir / "classes.txt"));

    SUBCASE("empty dataset stats are all zero") {
        Dataset empty;
        DatasetStats zero = dataset_stats(empty);
        CHECK(zero.total() == 0);
    }
}

TEST_CASE("generate_dataset writes a loadable tree and is deterministic") {
    SceneSpec spec;
    spec.image_size = 96;
    spec.min_floors = 3;
    spec.max_floors = 4;
    spec.min_bays = 3;
    spec.max_bays = 4;
    const auto dir1 = std::filesystem::temp_directory_path() / "bfa_gen1";
    const auto dir2 = std::filesystem::temp_directory_path() / "bfa_gen2";
    std::filesystem::remove_all(dir1);
    std::filesystem::remove_all(dir2);
    Dataset a = generate_dataset(spec, 12, 42, dir1.string(), true);
    Dataset b = generate_dataset(spec, 12, 42, dir2.string(), true);
    CHECK(a.train.images.size() == 9);  // floor(12*0.8) = 9
    CHECK(a.val.images.size() == 1);
    CHECK(a.test.images.size() == 2);

    // byte-identical trees for identical seeds
    for (int i = 0; i < 12; ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "images/img_%05d.ppm", i);
        ImageU8 ia = read_ppm((dir1 / name).string());
        ImageU8 ib = read_ppm((dir2 / name).string());
        CHECK(ia.pixels == ib.pixels);
    }
    Dataset reloaded = load_dataset(dir1.string());
    CHECK(reloaded.train.annotations.size() == a.train.annotations.size());

    // every annotation satisfies the box invariants post-warp
    for (const DatasetSplit* split : {&a.train, &a.val, &a.test}) {
        for (const Annotation& an : split->annotations) {
            CHECK(an.box.x1 >= 0.0f);
            CHECK(an.box.x1 < an.box.x2);
            CHECK(an.box.x2 <= 96.0f);
            CHECK(an.box.y1 < an.box.y2);
            CHECK(an.box.y2 <= 96.0f);
        }
    }
}
