#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace bfa {

// 8-bit RGB raster, row-major, no padding.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // 3 * width * height

    static ImageU8 filled(int w, int h, std::array<std::uint8_t, 3> rgb);

    std::uint8_t* at(int x, int y) { return pixels.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
    const std::uint8_t* at(int x, int y) const {
        return pixels.data() + 3 * (static_cast<std::size_t>(y) * width + x);
    }
    void set(int x, int y, std::array<std::uint8_t, 3> rgb);
    bool inside(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
};

// Binary PPM (P6). Byte-for-byte deterministic for a fixed image.
void write_ppm(const ImageU8& img, const std::string& path);
ImageU8 read_ppm(const std::string& path);

// Binary PGM (P5) from float values in [0,1].
void write_pgm(const std::vector<float>& values, int width, int height, const std::string& path);

}  // namespace bfa
