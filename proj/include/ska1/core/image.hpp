#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ska1/core/errors.hpp"
#include "ska1/core/tensor.hpp"

namespace ska1 {

// Grayscale image, values in [0,1], row-major.
struct Image {
    int h = 0, w = 0;
    std::vector<double> pix;

    Image() = default;
    Image(int h_, int w_, double fill = 0.0) : h(h_), w(w_), pix(static_cast<std::size_t>(h_) * w_, fill) {}

    double& at(int y, int x) { return pix[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return pix[static_cast<std::size_t>(y) * w + x]; }

    // Snap to the 256-level grid used by the on-disk format, so an image
    // survives a save/load round trip bit-for-bit.
    void quantize8() {
        for (double& v : pix) {
            int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            v = q / 255.0;
        }
    }
};

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path.string());
    f << "P5\n" << img.w << " " << img.h << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(img.w));
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            const double v = std::clamp(img.at(y, x), 0.0, 1.0);
            row[static_cast<std::size_t>(x)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
        f.write(reinterpret_cast<const char*>(row.data()), img.w);
    }
    if (!f) throw IoError("write failed: " + path.string());
}

inline Image read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path.string());
    std::string magic;
    f >> magic;
    if (magic != "P5") throw IoError("not a binary PGM: " + path.string());
    auto next_int = [&]() {
        // skip whitespace and '#' comments
        int c;
        while ((c = f.peek()) != EOF) {
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else {
                break;
            }
        }
        int v;
        if (!(f >> v)) throw IoError("bad PGM header: " + path.string());
        return v;
    };
    const int w = next_int();
    const int h = next_int();
    const int maxv = next_int();
    if (w <= 0 || h <= 0 || maxv != 255) throw IoError("unsupported PGM: " + path.string());
    f.get(); // single whitespace after maxval
    Image img(h, w);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(w));
    for (int y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), w);
        if (!f) throw IoError("truncated PGM: " + path.string());
        for (int x = 0; x < w; ++x) img.at(y, x) = row[static_cast<std::size_t>(x)] / 255.0;
    }
    return img;
}

// Axis-aligned integer rectangle, [x0,x1) x [y0,y1).
struct RectI {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    bool empty() const { return x1 <= x0 || y1 <= y0; }
};

inline RectI clamp_rect(const RectI& r, int w, int h) {
    return RectI{std::max(0, r.x0), std::max(0, r.y0), std::min(w, r.x1), std::min(h, r.y1)};
}

inline void fill_ellipse(Image& img, double cx, double cy, double rx, double ry, double value) {
    if (rx <= 0.0 || ry <= 0.0) return;
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry)));
    const int y1 = std::min(img.h - 1, static_cast<int>(std::ceil(cy + ry)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx)));
    const int x1 = std::min(img.w - 1, static_cast<int>(std::ceil(cx + rx)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = (x - cx) / rx, dy = (y - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) img.at(y, x) = value;
        }
}

inline void fill_rect(Image& img, const RectI& r, double value) {
    const RectI c = clamp_rect(r, img.w, img.h);
    for (int y = c.y0; y < c.y1; ++y)
        for (int x = c.x0; x < c.x1; ++x) img.at(y, x) = value;
}

// Bilinear sample with edge clamping; (x,y) in pixel coordinates.
inline double sample_bilinear(const Image& img, double x, double y) {
    const double fx = std::clamp(x, 0.0, static_cast<double>(img.w - 1));
    const double fy = std::clamp(y, 0.0, static_cast<double>(img.h - 1));
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    const int x1 = std::min(x0 + 1, img.w - 1);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const double ax = fx - x0, ay = fy - y0;
    const double top = img.at(y0, x0) * (1 - ax) + img.at(y0, x1) * ax;
    const double bot = img.at(y1, x0) * (1 - ax) + img.at(y1, x1) * ax;
    return top * (1 - ay) + bot * ay;
}

inline Image resize_bilinear(const Image& src, int oh, int ow) {
    if (oh <= 0 || ow <= 0) throw InputError("resize_bilinear: non-positive target size");
    Image out(oh, ow);
    const double sy = static_cast<double>(src.h) / oh;
    const double sx = static_cast<double>(src.w) / ow;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            out.at(y, x) = sample_bilinear(src, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
    return out;
}

// Exact box average over the source footprint of each output cell. Used where
// mass conservation matters (loss weight maps), not just appearance.
inline Tensor resize_area(const Tensor& src, int oh, int ow) {
    if (src.rank() != 2) throw ShapeError("resize_area needs rank 2, got " + src.shape_str());
    if (oh <= 0 || ow <= 0) throw InputError("resize_area: non-positive target size");
    const int ih = src.dim(0), iw = src.dim(1);
    Tensor out({oh, ow});
    const double sy = static_cast<double>(ih) / oh;
    const double sx = static_cast<double>(iw) / ow;
    for (int y = 0; y < oh; ++y) {
        const double fy0 = y * sy, fy1 = (y + 1) * sy;
        for (int x = 0; x < ow; ++x) {
            const double fx0 = x * sx, fx1 = (x + 1) * sx;
            double acc = 0.0;
            const int iy0 = static_cast<int>(std::floor(fy0));
            const int iy1 = std::min(ih, static_cast<int>(std::ceil(fy1)));
            const int ix0 = static_cast<int>(std::floor(fx0));
            const int ix1 = std::min(iw, static_cast<int>(std::ceil(fx1)));
            for (int iy = iy0; iy < iy1; ++iy) {
                const double hy = std::min(fy1, iy + 1.0) - std::max(fy0, static_cast<double>(iy));
                for (int ix = ix0; ix < ix1; ++ix) {
                    const double hx = std::min(fx1, ix + 1.0) - std::max(fx0, static_cast<double>(ix));
                    acc += src.at(iy, ix) * hy * hx;
                }
            }
            out.at(y, x) = acc / (sy * sx);
        }
    }
    return out;
}

// Crop a rect (clamped to bounds) then pad back out to (oh,ow) with `fill`,
// keeping the cropped content at the top-left.
inline Image crop_pad(const Image& src, const RectI& r, int oh, int ow, double fill = 0.0) {
    const RectI c = clamp_rect(r, src.w, src.h);
    Image out(oh, ow, fill);
    const int copy_h = std::min(c.height(), oh);
    const int copy_w = std::min(c.width(), ow);
    for (int y = 0; y < copy_h; ++y)
        for (int x = 0; x < copy_w; ++x) out.at(y, x) = src.at(c.y0 + y, c.x0 + x);
    return out;
}

} // namespace ska1
