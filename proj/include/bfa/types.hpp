#pragma once

#include <stdexcept>
#include <string>

namespace bfa {

// Axis-aligned box in pixel coordinates, half-open in spirit: x1 < x2, y1 < y2.
struct Box {
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    float width() const { return x2 - x1; }
    float height() const { return y2 - y1; }
    float area() const { return width() * height(); }
    bool valid() const { return x1 < x2 && y1 < y2; }
};

inline void check_box(const Box& b, const char* op) {
    if (!b.valid()) {
        throw std::invalid_argument(std::string(op) + ": degenerate box (" + std::to_string(b.x1) + "," +
                                    std::to_string(b.y1) + "," + std::to_string(b.x2) + "," +
                                    std::to_string(b.y2) + ")");
    }
}

struct Annotation {
    int image_id = 0;
    int class_id = 0;
    Box box;
};

struct Detection {
    int image_id = 0;
    int class_id = 0;
    Box box;
    float score = 0.0f;
};

}  // namespace bfa
