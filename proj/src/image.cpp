#include "bfa/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace bfa {

ImageU8 ImageU8::filled(int w, int h, std::array<std::uint8_t, 3> rgb) {
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.pixels.resize(3 * static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
        img.pixels[i] = rgb[0];
        img.pixels[i + 1] = rgb[1];
        img.pixels[i + 2] = rgb[2];
    }
    return img;
}

void ImageU8::set(int x, int y, std::array<std::uint8_t, 3> rgb) {
    if (!inside(x, y)) return;
    std::uint8_t* p = at(x, y);
    p[0] = rgb[0];
    p[1] = rgb[1];
    p[2] = rgb[2];
}

void write_ppm(const ImageU8& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot write " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
}

ImageU8 read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot read " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw std::runtime_error("read_ppm: not a binary PPM: " + path);
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    in.get();  // single whitespace after the header
    if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("read_ppm: bad header in " + path);
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.pixels.resize(3 * static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!in) throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    return img;
}

void write_pgm(const std::vector<float>& values, int width, int height, const std::string& path) {
    if (static_cast<std::size_t>(width) * height != values.size()) {
        throw std::invalid_argument("write_pgm: size mismatch");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot write " + path);
    out << "P5\n" << width << " " << height << "\n255\n";
    for (float v : values) {
        const float clamped = std::clamp(v, 0.0f, 1.0f);
        out.put(static_cast<char>(std::lround(clamped * 255.0f)));
    }
}

}  // namespace bfa
