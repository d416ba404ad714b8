#pragma once

// Small RGB image type (doubles in [0,1], row-major HWC), HSV conversion,
// binary PPM (P6) I/O, and hue measurement helpers used by the style metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fable/errors.hpp"
#include "fable/tensor.hpp"

namespace fable {

struct Image {
    int h = 0, w = 0;
    std::vector<double> px;  // h*w*3, [0,1]

    Image() = default;
    Image(int h_, int w_) : h(h_), w(w_), px(static_cast<size_t>(h_) * w_ * 3, 0.0) {}

    double* at(int i, int j) { return px.data() + (static_cast<size_t>(i) * w + j) * 3; }
    const double* at(int i, int j) const {
        return px.data() + (static_cast<size_t>(i) * w + j) * 3;
    }
};

// h, s, v in [0,1]; hue wraps.
inline void hsv_to_rgb(double h, double s, double v, double* rgb) {
    h = h - std::floor(h);
    double hh = h * 6.0;
    int sector = static_cast<int>(hh) % 6;
    double f = hh - std::floor(hh);
    double p = v * (1.0 - s);
    double q = v * (1.0 - s * f);
    double t = v * (1.0 - s * (1.0 - f));
    switch (sector) {
        case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
        default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
    }
}

// Returns hue in [0,1); 0 for gray pixels.
inline double rgb_to_hue(double r, double g, double b) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    double d = mx - mn;
    if (d <= 1e-12) return 0.0;
    double h;
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = (b - r) / d + 2.0;
    else
        h = (r - g) / d + 4.0;
    h /= 6.0;
    return h - std::floor(h);
}

// Circular distance between hues, in [0, 0.5].
inline double hue_distance(double a, double b) {
    double d = std::abs(a - b);
    d = d - std::floor(d);
    return std::min(d, 1.0 - d);
}

// Mean color of the outermost `ring` pixels, converted to hue. The synthetic
// corpus paints its style as the background color, so the border ring is a
// foreground-free style probe.
inline double border_mean_hue(const Image& img, int ring = 2) {
    if (img.h <= 2 * ring || img.w <= 2 * ring)
        throw ShapeError("border_mean_hue: image too small for ring");
    double acc[3] = {0, 0, 0};
    int count = 0;
    for (int i = 0; i < img.h; ++i)
        for (int j = 0; j < img.w; ++j) {
            bool border = i < ring || i >= img.h - ring || j < ring || j >= img.w - ring;
            if (!border) continue;
            const double* p = img.at(i, j);
            acc[0] += p[0];
            acc[1] += p[1];
            acc[2] += p[2];
            ++count;
        }
    return rgb_to_hue(acc[0] / count, acc[1] / count, acc[2] / count);
}

// ---- tensor bridges: the denoiser works in CHW with values in [-1, 1] ----

inline Array chw_from_image(const Image& img) {
    Array a(Shape{3, img.h, img.w});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < img.h; ++i)
            for (int j = 0; j < img.w; ++j)
                a.data[(static_cast<size_t>(c) * img.h + i) * img.w + j] =
                    2.0 * img.at(i, j)[c] - 1.0;
    return a;
}

inline Image image_from_chw(const Array& a) {
    if (a.shape.size() != 3 || a.shape[0] != 3)
        throw ShapeError("image_from_chw: want [3,H,W], got " + shape_str(a.shape));
    Image img(a.shape[1], a.shape[2]);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < img.h; ++i)
            for (int j = 0; j < img.w; ++j)
                img.at(i, j)[c] = std::clamp(
                    (a.data[(static_cast<size_t>(c) * img.h + i) * img.w + j] + 1.0) / 2.0, 0.0,
                    1.0);
    return img;
}

// ---- lossless 8-bit raster I/O (binary PPM) ----

inline void write_ppm(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValueError("write_ppm: cannot open " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> buf(img.px.size());
    for (size_t i = 0; i < img.px.size(); ++i)
        buf[i] = static_cast<unsigned char>(
            std::lround(std::clamp(img.px[i], 0.0, 1.0) * 255.0));
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValueError("read_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw ValueError("read_ppm: not a binary PPM: " + path);
    auto next_token = [&]() -> long {
        // skip whitespace and '#' comment lines
        while (true) {
            int c = f.peek();
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else {
                break;
            }
        }
        long v;
        f >> v;
        return v;
    };
    long w = next_token(), h = next_token(), maxv = next_token();
    if (w <= 0 || h <= 0 || maxv != 255) throw ValueError("read_ppm: unsupported header");
    f.get();  // single whitespace after header
    Image img(static_cast<int>(h), static_cast<int>(w));
    std::vector<unsigned char> buf(img.px.size());
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (f.gcount() != static_cast<std::streamsize>(buf.size()))
        throw IncompleteDataError("read_ppm: truncated pixel data in " + path);
    for (size_t i = 0; i < buf.size(); ++i) img.px[i] = buf[i] / 255.0;
    return img;
}

}  // namespace fable
