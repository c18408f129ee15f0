#pragma once

#include <string>
#include <vector>

#include "flakevol/vec.hpp"

namespace flakevol {

// Linear RGB, float32, row 0 at top.
struct Image {
    int width = 0, height = 0;
    std::vector<float> data;  // 3 floats per pixel, row-major

    Image() = default;
    Image(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0.f) {}

    float* pixel(int x, int y) { return data.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
    const float* pixel(int x, int y) const {
        return data.data() + 3 * (static_cast<std::size_t>(y) * width + x);
    }
    void set(int x, int y, const Vec3& c) {
        float* p = pixel(x, y);
        p[0] = static_cast<float>(c.x);
        p[1] = static_cast<float>(c.y);
        p[2] = static_cast<float>(c.z);
    }
    Vec3 get(int x, int y) const {
        const float* p = pixel(x, y);
        return {p[0], p[1], p[2]};
    }
};

// PFM: "PF", dims, negative scale (little-endian), rows bottom-up.
void save_pfm(const Image& img, const std::string& path);
Image load_pfm(const std::string& path);

// 8-bit PNG for inspection: gamma 2.2, clamped to [0,1].
void save_png(const Image& img, const std::string& path);

// Peak 1.0, MSE over all channels.
double mse(const Image& a, const Image& b);
double psnr(const Image& a, const Image& b);

}  // namespace flakevol
