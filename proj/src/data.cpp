#include "bfa/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;

namespace bfa {

// ---- scene generator ----------------------------------------------------------

namespace {

using Rgb = std::array<std::uint8_t, 3>;

Rgb jitter(Rgb base, std::mt19937& rng, int amount) {
    std::uniform_int_distribution<int> d(-amount, amount);
    const int off = d(rng);
    auto clamp8 = [](int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); };
    return {clamp8(base[0] + off), clamp8(base[1] + off), clamp8(base[2] + off)};
}

struct Painter {
    ImageU8& img;
    std::vector<std::uint8_t> mask;

    explicit Painter(ImageU8& image) : img(image), mask(static_cast<std::size_t>(image.width) * image.height, 0) {}

    void begin_element() { std::fill(mask.begin(), mask.end(), 0); }

    void rect(int x0, int y0, int w, int h, Rgb color, bool marked = true) {
        for (int y = y0; y < y0 + h; ++y) {
            for (int x = x0; x < x0 + w; ++x) {
                if (!img.inside(x, y)) continue;
                img.set(x, y, color);
                if (marked) mask[static_cast<std::size_t>(y) * img.width + x] = 1;
            }
        }
    }

    Box element_box() const { return mask_to_bbox(mask, img.width, img.height); }
};

struct Layout {
    int s;                       // image size
    int facade_x0, facade_x1;    // horizontal extent of the facade
    int facade_y0, facade_y1;    // vertical extent (below sky, above ground)
    int grid_x0, grid_x1;        // window grid extent (inside glass strips)
    int grid_y0;                 // below the parapet band
    int floors, bays;
    bool glass_left, glass_right;
    int strip_w;

    float cell_w() const { return static_cast<float>(grid_x1 - grid_x0) / static_cast<float>(bays); }
    float cell_h() const { return static_cast<float>(facade_y1 - grid_y0) / static_cast<float>(floors); }
};

}  // namespace

Scene generate_scene(const SceneSpec& spec, std::uint32_t seed) {
    if (spec.min_floors < 2 || spec.min_bays < 2) {
        throw std::invalid_argument("generate_scene: wall grid must be at least 2x2");
    }
    if (spec.image_size < 64) throw std::invalid_argument("generate_scene: image size too small");
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);

    Scene scene;
    const int s = spec.image_size;
    scene.image = ImageU8::filled(s, s, {0, 0, 0});
    ImageU8& img = scene.image;

    // sky gradient and ground band
    const int sky_h = static_cast<int>(0.08f * s);
    const int ground_y = static_cast<int>(0.95f * s);
    for (int y = 0; y < s; ++y) {
        Rgb c;
        if (y < sky_h * 2) {
            const float t = static_cast<float>(y) / static_cast<float>(2 * sky_h);
            c = {static_cast<std::uint8_t>(150 + 30 * t), static_cast<std::uint8_t>(185 + 15 * t),
                 static_cast<std::uint8_t>(220)};
        } else if (y >= ground_y) {
            c = {118, 112, 106};
        } else {
            c = {150, 180, 220};  // overwritten by the facade
        }
        for (int x = 0; x < s; ++x) img.set(x, y, c);
    }

    Layout lay;
    lay.s = s;
    lay.facade_x0 = static_cast<int>(0.07f * s);
    lay.facade_x1 = s - lay.facade_x0;
    lay.facade_y0 = sky_h;
    lay.facade_y1 = ground_y;
    std::uniform_int_distribution<int> floors_d(spec.min_floors, spec.max_floors);
    std::uniform_int_distribution<int> bays_d(spec.min_bays, spec.max_bays);
    lay.floors = floors_d(rng);
    lay.bays = bays_d(rng);

    const float fb = static_cast<float>(lay.floors - 1) * static_cast<float>(lay.bays);
    const float p_glass = std::min(0.95f, spec.glass_rate * fb);
    lay.glass_left = unit(rng) < p_glass;
    lay.glass_right = unit(rng) < p_glass;
    lay.strip_w = static_cast<int>(0.13f * (lay.facade_x1 - lay.facade_x0));
    lay.grid_x0 = lay.facade_x0 + (lay.glass_left ? lay.strip_w : 0);
    lay.grid_x1 = lay.facade_x1 - (lay.glass_right ? lay.strip_w : 0);
    const int parapet_h = static_cast<int>(0.05f * (lay.facade_y1 - lay.facade_y0));
    lay.grid_y0 = lay.facade_y0 + parapet_h;

    // wall with light per-pixel texture
    const Rgb wall = jitter({176, 168, 158}, rng, 12);
    std::uniform_int_distribution<int> noise(-4, 4);
    for (int y = lay.facade_y0; y < lay.facade_y1; ++y) {
        for (int x = lay.facade_x0; x < lay.facade_x1; ++x) {
            const int n = noise(rng);
            auto clamp8 = [](int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); };
            img.set(x, y, {clamp8(wall[0] + n), clamp8(wall[1] + n), clamp8(wall[2] + n)});
        }
    }

    Painter paint(img);
    auto emit = [&](int class_id) {
        if (!spec.enabled[static_cast<std::size_t>(class_id)]) return;
        Annotation a;
        a.image_id = 0;
        a.class_id = class_id;
        a.box = paint.element_box();
        scene.annotations.push_back(a);
    };

    // glass-curtain side strips, full facade height
    auto draw_glass = [&](int x0) {
        paint.begin_element();
        paint.rect(x0, lay.facade_y0, lay.strip_w, lay.facade_y1 - lay.facade_y0, {108, 142, 172});
        const int mullion = std::max(6, lay.strip_w / 4);
        for (int y = lay.facade_y0; y < lay.facade_y1; y += mullion) {
            paint.rect(x0, y, lay.strip_w, 1, {64, 76, 88});
        }
        for (int x = x0; x < x0 + lay.strip_w; x += mullion) {
            paint.rect(x, lay.facade_y0, 1, lay.facade_y1 - lay.facade_y0, {64, 76, 88});
        }
        emit(kGlaWal);
    };
    if (lay.glass_left && spec.enabled[kGlaWal]) draw_glass(lay.facade_x0);
    if (lay.glass_right && spec.enabled[kGlaWal]) draw_glass(lay.grid_x1);

    const float cw = lay.cell_w();
    const float ch = lay.cell_h();

    // billboard slots: the parapet band plus each floor boundary
    const float p_bib = std::min(0.95f, spec.bib_rate * fb / static_cast<float>(lay.floors));
    std::uniform_int_distribution<int> span_d(2, std::max(2, lay.bays / 2));
    auto draw_billboard = [&](int y_center) {
        const int span = std::min(span_d(rng), lay.bays);
        std::uniform_int_distribution<int> start_d(0, lay.bays - span);
        const int b0 = start_d(rng);
        const int x0 = lay.grid_x0 + static_cast<int>(b0 * cw + 0.1f * cw);
        const int w = static_cast<int>(span * cw * 0.8f);
        const int h = std::max(3, static_cast<int>(0.16f * ch));
        paint.begin_element();
        const int stripe = std::max(3, w / 12);
        for (int i = 0; i * stripe < w; ++i) {
            const Rgb c = (i % 2 == 0) ? Rgb{204, 72, 56} : Rgb{238, 232, 222};
            paint.rect(x0 + i * stripe, y_center - h / 2, std::min(stripe, w - i * stripe), h, c);
        }
        emit(kBib);
    };
    if (spec.enabled[kBib]) {
        if (unit(rng) < p_bib) draw_billboard(lay.facade_y0 + parapet_h / 2 + 1);
        for (int f = 1; f < lay.floors; ++f) {
            if (unit(rng) < p_bib) {
                draw_billboard(lay.grid_y0 + static_cast<int>(f * ch));
            }
        }
    }

    // upper-floor window cells (floor 0 = top, ground floor excluded)
    const bool windows_on = spec.enabled[kEmWin] || spec.enabled[kPrWin];
    for (int f = 0; f < lay.floors - 1; ++f) {
        for (int b = 0; b < lay.bays; ++b) {
            if (unit(rng) >= spec.p_window) continue;
            const float cx0 = lay.grid_x0 + b * cw;
            const float cy0 = lay.grid_y0 + f * ch;
            const int wx = static_cast<int>(cx0 + 0.18f * cw);
            const int wy = static_cast<int>(cy0 + 0.18f * ch);
            const int ww = std::max(3, static_cast<int>(0.64f * cw));
            const int wh = std::max(3, static_cast<int>(0.52f * ch));
            const bool protruding = unit(rng) < spec.p_protruding;
            if (windows_on) {
                paint.begin_element();
                if (protruding) {
                    // drop shadow marks the protrusion
                    paint.rect(wx + std::max(1, ww / 10), wy + std::max(1, wh / 10), ww, wh, {38, 38, 42});
                    paint.rect(wx, wy, ww, wh, {226, 224, 218});
                    paint.rect(wx + 2, wy + 2, ww - 4, wh - 4, {88, 108, 138});
                } else {
                    paint.rect(wx, wy, ww, wh, {52, 54, 58});
                    paint.rect(wx + 2, wy + 2, ww - 4, wh - 4, jitter({78, 98, 128}, rng, 8));
                }
                if ((protruding && spec.enabled[kPrWin]) || (!protruding && spec.enabled[kEmWin])) {
                    emit(protruding ? kPrWin : kEmWin);
                }
            }
            // attachment band below the window
            const int band_y = static_cast<int>(cy0 + 0.74f * ch);
            if (spec.enabled[kAcu] && unit(rng) < spec.p_acu) {
                const int aw = std::max(2, static_cast<int>(0.24f * cw));
                const int ah = std::max(2, static_cast<int>(0.15f * ch));
                const int ax = static_cast<int>(cx0 + 0.56f * cw);
                paint.begin_element();
                paint.rect(ax, band_y, aw, ah, {222, 222, 218});
                for (int vy = band_y + 1; vy < band_y + ah - 1; vy += 2) {
                    paint.rect(ax + 1, vy, aw - 2, 1, {152, 152, 150});
                }
                emit(kAcu);
            }
            if (spec.enabled[kBal] && unit(rng) < spec.p_balcony) {
                const int bw = std::max(3, static_cast<int>(0.74f * cw));
                const int bh = std::max(2, static_cast<int>(0.16f * ch));
                const int bx = static_cast<int>(cx0 + 0.13f * cw);
                paint.begin_element();
                paint.rect(bx, band_y, bw, 2, {58, 60, 66});
                const int slat = std::max(2, bw / 9);
                for (int sx = bx; sx < bx + bw; sx += slat) {
                    paint.rect(sx, band_y, 1, bh, {58, 60, 66});
                }
                paint.rect(bx, band_y + bh - 1, bw, 1, {58, 60, 66});
                emit(kBal);
            }
        }
    }

    // ground-floor doors
    const float p_door = std::min(0.95f, spec.door_rate * static_cast<float>(lay.floors - 1));
    const float gy0 = lay.grid_y0 + (lay.floors - 1) * ch;
    for (int b = 0; b < lay.bays; ++b) {
        if (unit(rng) >= p_door) continue;
        if (!spec.enabled[kDoor]) continue;
        const float cx0 = lay.grid_x0 + b * cw;
        const int dw = std::max(3, static_cast<int>(0.40f * cw));
        const int dh = std::max(4, static_cast<int>(0.74f * ch));
        const int dx = static_cast<int>(cx0 + 0.30f * cw);
        const int dy = static_cast<int>(gy0 + ch) - dh - 1;
        paint.begin_element();
        paint.rect(dx, dy, dw, dh, jitter({92, 64, 44}, rng, 8));
        paint.rect(dx + dw / 2, dy + 2, 1, dh - 4, {58, 40, 28});
        emit(kDoor);
    }

    return scene;
}

// ---- view warp ------------------------------------------------------------------

void check_pose(const ViewPose& pose) {
    if (pose.azimuth_deg < 0 || pose.azimuth_deg >= 360 || pose.azimuth_deg % 60 != 0) {
        throw std::invalid_argument("view pose: azimuth " + std::to_string(pose.azimuth_deg) +
                                    " must be a multiple of 60 in [0,300]");
    }
    if (pose.tilt_deg < 0.0f || pose.tilt_deg > 30.0f) {
        throw std::invalid_argument("view pose: tilt " + std::to_string(pose.tilt_deg) +
                                    " outside [0,30]");
    }
}

namespace {

struct Mat3 {
    double m[3][3];

    static Mat3 identity() {
        Mat3 r{};
        r.m[0][0] = r.m[1][1] = r.m[2][2] = 1.0;
        return r;
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) r.m[i][j] += m[i][k] * o.m[k][j];
        return r;
    }
    Mat3 inverse() const {
        const double a = m[0][0], b = m[0][1], c = m[0][2];
        const double d = m[1][0], e = m[1][1], f = m[1][2];
        const double g = m[2][0], h = m[2][1], i = m[2][2];
        const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
        Mat3 r{};
        r.m[0][0] = (e * i - f * h) / det;
        r.m[0][1] = (c * h - b * i) / det;
        r.m[0][2] = (b * f - c * e) / det;
        r.m[1][0] = (f * g - d * i) / det;
        r.m[1][1] = (a * i - c * g) / det;
        r.m[1][2] = (c * d - a * f) / det;
        r.m[2][0] = (d * h - e * g) / det;
        r.m[2][1] = (b * g - a * h) / det;
        r.m[2][2] = (a * e - b * d) / det;
        return r;
    }
    void apply(double x, double y, double& u, double& v) const {
        const double w = m[2][0] * x + m[2][1] * y + m[2][2];
        u = (m[0][0] * x + m[0][1] * y + m[0][2]) / w;
        v = (m[1][0] * x + m[1][1] * y + m[1][2]) / w;
    }
};

// Facade plane rotated about the vertical center axis (azimuth) and about
// the ground line at the image bottom (downward tilt), pinhole projection
// with focal length = camera distance = 2 * image size. Pivoting the tilt at
// the ground keeps every point at non-negative extra depth, so box heights
// shrink strictly for any tilt > 0.
Mat3 pose_matrix(const ViewPose& pose, int width, int height) {
    const double cx = width / 2.0;
    const double ground = height;
    const double d = 2.0 * std::max(width, height);
    const double th = pose.azimuth_deg * M_PI / 180.0;
    const double ph = pose.tilt_deg * M_PI / 180.0;

    Mat3 azim = Mat3::identity();
    azim.m[0][0] = std::cos(th);
    azim.m[2][0] = std::sin(th) / d;
    Mat3 tilt = Mat3::identity();
    tilt.m[1][1] = std::cos(ph);
    tilt.m[2][1] = -std::sin(ph) / d;

    auto translate = [](double tx, double ty) {
        Mat3 t = Mat3::identity();
        t.m[0][2] = tx;
        t.m[1][2] = ty;
        return t;
    };
    const Mat3 azim_full = translate(cx, 0.0) * azim * translate(-cx, 0.0);
    const Mat3 tilt_full = translate(cx, ground) * tilt * translate(-cx, -ground);
    return tilt_full * azim_full;
}

}  // namespace

void warp_point(const ViewPose& pose, int width, int height, float x, float y, float& u, float& v) {
    double du, dv;
    pose_matrix(pose, width, height).apply(x, y, du, dv);
    u = static_cast<float>(du);
    v = static_cast<float>(dv);
}

Scene apply_view_warp(const Scene& scene, const ViewPose& pose) {
    check_pose(pose);
    const int w = scene.image.width, h = scene.image.height;
    const Mat3 fwd = pose_matrix(pose, w, h);
    const Mat3 inv = fwd.inverse();

    Scene out;
    out.image = ImageU8::filled(w, h, {24, 24, 28});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double sx, sy;
            inv.apply(x, y, sx, sy);
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const double fx = sx - x0, fy = sy - y0;
            auto pix = [&](int xx, int yy, int c) -> double {
                if (xx < 0 || xx >= w || yy < 0 || yy >= h) return 0.0;
                return scene.image.at(xx, yy)[c];
            };
            Rgb rgb;
            bool any = false;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - fy) * ((1 - fx) * pix(x0, y0, c) + fx * pix(x0 + 1, y0, c)) +
                                 fy * ((1 - fx) * pix(x0, y0 + 1, c) + fx * pix(x0 + 1, y0 + 1, c));
                rgb[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
                any = any || v > 0.0;
            }
            if (sx >= -1 && sx < w && sy >= -1 && sy < h && any) out.image.set(x, y, rgb);
        }
    }

    for (const Annotation& a : scene.annotations) {
        double u, v;
        double x_min = 1e30, y_min = 1e30, x_max = -1e30, y_max = -1e30;
        const double xs[2] = {a.box.x1, a.box.x2};
        const double ys[2] = {a.box.y1, a.box.y2};
        for (double bx : xs) {
            for (double by : ys) {
                fwd.apply(bx, by, u, v);
                x_min = std::min(x_min, u);
                x_max = std::max(x_max, u);
                y_min = std::min(y_min, v);
                y_max = std::max(y_max, v);
            }
        }
        Box clipped{static_cast<float>(std::max(0.0, x_min)), static_cast<float>(std::max(0.0, y_min)),
                    static_cast<float>(std::min<double>(w, x_max)),
                    static_cast<float>(std::min<double>(h, y_max))};
        if (clipped.x2 - clipped.x1 >= 1.0f && clipped.y2 - clipped.y1 >= 1.0f) {
            Annotation warped = a;
            warped.box = clipped;
            out.annotations.push_back(warped);
        }
    }
    return out;
}

// ---- mask to bbox -----------------------------------------------------------------

Box mask_to_bbox(const std::vector<std::uint8_t>& mask, int width, int height) {
    if (static_cast<std::size_t>(width) * height != mask.size()) {
        throw std::invalid_argument("mask_to_bbox: size mismatch");
    }
    int x_min = width, y_min = height, x_max = -1, y_max = -1;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            if (mask[static_cast<std::size_t>(y) * width + x] == 0) continue;
            x_min = std::min(x_min, x);
            x_max = std::max(x_max, x);
            y_min = std::min(y_min, y);
            y_max = std::max(y_max, y);
        }
    }
    if (x_max < 0) throw std::invalid_argument("mask_to_bbox: empty mask");
    return {static_cast<float>(x_min), static_cast<float>(y_min), static_cast<float>(x_max + 1),
            static_cast<float>(y_max + 1)};
}

// ---- split ------------------------------------------------------------------------

SplitResult split_dataset(const std::vector<int>& items, std::uint32_t seed) {
    const int n = static_cast<int>(items.size());
    if (n < 10) {
        throw std::invalid_argument("split_dataset: need at least 10 items, got " + std::to_string(n));
    }
    std::vector<int> shuffled = items;
    std::mt19937 rng(seed);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const int n_train = (n * 8) / 10;
    const int n_val = n / 10;
    SplitResult r;
    r.train.assign(shuffled.begin(), shuffled.begin() + n_train);
    r.val.assign(shuffled.begin() + n_train, shuffled.begin() + n_train + n_val);
    r.test.assign(shuffled.begin() + n_train + n_val, shuffled.end());
    return r;
}

// ---- stats ------------------------------------------------------------------------

int DatasetStats::split_total(int split) const {
    int acc = 0;
    for (int c : counts[static_cast<std::size_t>(split)]) acc += c;
    return acc;
}

int DatasetStats::class_total(int cls) const {
    return counts[0][static_cast<std::size_t>(cls)] + counts[1][static_cast<std::size_t>(cls)] +
           counts[2][static_cast<std::size_t>(cls)];
}

int DatasetStats::total() const { return split_total(0) + split_total(1) + split_total(2); }

DatasetStats dataset_stats(const Dataset& ds) {
    DatasetStats st;
    const DatasetSplit* splits[3] = {&ds.train, &ds.val, &ds.test};
    for (int s = 0; s < 3; ++s) {
        for (const Annotation& a : splits[s]->annotations) {
            if (a.class_id >= 0 && a.class_id < kNumClasses) {
                ++st.counts[static_cast<std::size_t>(s)][static_cast<std::size_t>(a.class_id)];
            }
        }
    }
    return st;
}

void write_stats_csv(const DatasetStats& stats, const std::vector<std::string>& class_names,
                     const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_stats_csv: cannot write " + path);
    out << "class,train,val,test,total\n";
    for (int c = 0; c < kNumClasses; ++c) {
        out << class_names[static_cast<std::size_t>(c)] << "," << stats.counts[0][static_cast<std::size_t>(c)]
            << "," << stats.counts[1][static_cast<std::size_t>(c)] << ","
            << stats.counts[2][static_cast<std::size_t>(c)] << "," << stats.class_total(c) << "\n";
    }
    out << "total," << stats.split_total(0) << "," << stats.split_total(1) << "," << stats.split_total(2)
        << "," << stats.total() << "\n";
}

// ---- dataset io ----------------------------------------------------------------------

namespace {

nlohmann::json split_to_json(const DatasetSplit& split) {
    nlohmann::json j;
    j["images"] = nlohmann::json::array();
    for (const DatasetImage& im : split.images) {
        j["images"].push_back({{"id", im.id},
                               {"file", im.file},
                               {"width", im.width},
                               {"height", im.height},
                               {"azimuth", im.pose.azimuth_deg},
                               {"tilt", im.pose.tilt_deg},
                               {"camera_height_m", im.pose.camera_height_m}});
    }
    j["annotations"] = nlohmann::json::array();
    for (const Annotation& a : split.annotations) {
        j["annotations"].push_back(
            {{"image_id", a.image_id},
             {"class_id", a.class_id},
             {"box", {a.box.x1, a.box.y1, a.box.x2, a.box.y2}}});
    }
    return j;
}

DatasetSplit split_from_json(const nlohmann::json& j) {
    DatasetSplit split;
    for (const auto& im : j.at("images")) {
        DatasetImage d;
        d.id = im.at("id").get<int>();
        d.file = im.at("file").get<std::string>();
        d.width = im.at("width").get<int>();
        d.height = im.at("height").get<int>();
        d.pose.azimuth_deg = im.value("azimuth", 0);
        d.pose.tilt_deg = im.value("tilt", 0.0f);
        d.pose.camera_height_m = im.value("camera_height_m", 10.0f);
        split.images.push_back(std::move(d));
    }
    for (const auto& a : j.at("annotations")) {
        Annotation an;
        an.image_id = a.at("image_id").get<int>();
        an.class_id = a.at("class_id").get<int>();
        const auto& b = a.at("box");
        an.box = {b.at(0).get<float>(), b.at(1).get<float>(), b.at(2).get<float>(), b.at(3).get<float>()};
        split.annotations.push_back(an);
    }
    return split;
}

}  // namespace

DatasetSplit load_split_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_split_json: cannot read " + path);
    nlohmann::json j;
    in >> j;
    return split_from_json(j);
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "annotations");
    const char* names[3] = {"train", "val", "test"};
    const DatasetSplit* splits[3] = {&ds.train, &ds.val, &ds.test};
    for (int s = 0; s < 3; ++s) {
        std::ofstream out(fs::path(dir) / "annotations" / (std::string(names[s]) + ".json"));
        if (!out) throw std::runtime_error("save_dataset: cannot write annotations in " + dir);
        out << split_to_json(*splits[s]).dump(2) << "\n";
    }
    {
        std::ofstream cls(fs::path(dir) / "classes.txt");
        for (const std::string& name : ds.class_names) cls << name << "\n";
    }
    write_stats_csv(dataset_stats(ds), ds.class_names, (fs::path(dir) / "stats.csv").string());
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.root = dir;
    const char* names[3] = {"train", "val", "test"};
    DatasetSplit* splits[3] = {&ds.train, &ds.val, &ds.test};
    for (int s = 0; s < 3; ++s) {
        const fs::path p = fs::path(dir) / "annotations" / (std::string(names[s]) + ".json");
        std::ifstream in(p);
        if (!in) throw std::runtime_error("load_dataset: cannot read " + p.string());
        nlohmann::json j;
        in >> j;
        *splits[s] = split_from_json(j);
    }
    std::ifstream cls(fs::path(dir) / "classes.txt");
    std::string line;
    while (std::getline(cls, line)) {
        if (!line.empty()) ds.class_names.push_back(line);
    }
    if (ds.class_names.empty()) {
        for (const char* n : kClassNames) ds.class_names.emplace_back(n);
    }
    return ds;
}

Dataset generate_dataset(const SceneSpec& spec, int n, std::uint32_t seed, const std::string& out_dir,
                         bool multi_view) {
    if (n < 10) throw std::invalid_argument("generate_dataset: need at least 10 scenes for an 8:1:1 split");
    fs::create_directories(fs::path(out_dir) / "images");
    std::mt19937 pose_rng(seed ^ 0x9e3779b9u);
    std::uniform_int_distribution<int> azim_d(0, 5);
    std::uniform_real_distribution<float> tilt_d(0.0f, 30.0f);

    struct Item {
        DatasetImage meta;
        std::vector<Annotation> annotations;
    };
    std::vector<Item> items;
    for (int i = 0; i < n; ++i) {
        Scene scene = generate_scene(spec, seed + static_cast<std::uint32_t>(i));
        ViewPose pose;
        if (multi_view) {
            pose.azimuth_deg = 60 * azim_d(pose_rng);
            pose.tilt_deg = tilt_d(pose_rng);
            scene = apply_view_warp(scene, pose);
        }
        char name[64];
        std::snprintf(name, sizeof(name), "images/img_%05d.ppm", i);
        write_ppm(scene.image, (fs::path(out_dir) / name).string());
        Item item;
        item.meta = {i, name, scene.image.width, scene.image.height, pose};
        item.annotations = scene.annotations;
        for (Annotation& a : item.annotations) a.image_id = i;
        items.push_back(std::move(item));
    }

    std::vector<int> ids(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
    SplitResult split = split_dataset(ids, seed);

    Dataset ds;
    ds.root = out_dir;
    for (const char* name : kClassNames) ds.class_names.emplace_back(name);
    auto fill = [&](const std::vector<int>& members, DatasetSplit& out) {
        for (int id : members) {
            const Item& item = items[static_cast<std::size_t>(id)];
            out.images.push_back(item.meta);
            out.annotations.insert(out.annotations.end(), item.annotations.begin(),
                                   item.annotations.end());
        }
    };
    fill(split.train, ds.train);
    fill(split.val, ds.val);
    fill(split.test, ds.test);
    save_dataset(ds, out_dir);
    return ds;
}

}  // namespace bfa
