#include "flakevol/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace flakevol {

void save_pfm(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << "PF\n" << img.width << " " << img.height << "\n-1.0\n";
    // bottom-up rows, little-endian floats
    for (int y = img.height - 1; y >= 0; --y)
        f.write(reinterpret_cast<const char*>(img.pixel(0, y)),
                static_cast<std::streamsize>(img.width) * 3 * sizeof(float));
    if (!f) throw std::runtime_error("write failed: " + path);
}

Image load_pfm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string magic;
    f >> magic;
    if (magic != "PF") throw std::runtime_error(path + ": not a color PFM");
    int w = 0, h = 0;
    double scale = 0;
    f >> w >> h >> scale;
    if (!f || w <= 0 || h <= 0) throw std::runtime_error(path + ": bad PFM header");
    if (scale >= 0) throw std::runtime_error(path + ": big-endian PFM unsupported");
    f.get();  // single whitespace after the scale
    Image img(w, h);
    for (int y = h - 1; y >= 0; --y)
        f.read(reinterpret_cast<char*>(img.pixel(0, y)),
               static_cast<std::streamsize>(w) * 3 * sizeof(float));
    if (!f) throw std::runtime_error(path + ": truncated PFM payload");
    return img;
}

namespace {

void put_be32(std::string& s, std::uint32_t v) {
    s.push_back(static_cast<char>(v >> 24));
    s.push_back(static_cast<char>(v >> 16));
    s.push_back(static_cast<char>(v >> 8));
    s.push_back(static_cast<char>(v));
}

void png_chunk(std::ofstream& f, const char type[4], const std::string& payload) {
    std::string out;
    put_be32(out, static_cast<std::uint32_t>(payload.size()));
    out.append(type, 4);
    out += payload;
    std::uint32_t crc = crc32(0, reinterpret_cast<const Bytef*>(out.data() + 4),
                              static_cast<uInt>(out.size() - 4));
    put_be32(out, crc);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

unsigned char tonemap(float v) {
    double c = v < 0 ? 0 : (v > 1 ? 1 : v);
    c = std::pow(c, 1.0 / 2.2);
    return static_cast<unsigned char>(std::lround(c * 255.0));
}

}  // namespace

void save_png(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    f.write(reinterpret_cast<const char*>(sig), 8);

    std::string ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(img.width));
    put_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // rgb
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    png_chunk(f, "IHDR", ihdr);

    std::string raw;
    raw.reserve(static_cast<std::size_t>(img.height) * (1 + 3 * img.width));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter none
        for (int x = 0; x < img.width; ++x) {
            const float* p = img.pixel(x, y);
            raw.push_back(static_cast<char>(tonemap(p[0])));
            raw.push_back(static_cast<char>(tonemap(p[1])));
            raw.push_back(static_cast<char>(tonemap(p[2])));
        }
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::string z(zlen, '\0');
    if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  6) != Z_OK)
        throw std::runtime_error("deflate failed: " + path);
    z.resize(zlen);
    png_chunk(f, "IDAT", z);
    png_chunk(f, "IEND", "");
    if (!f) throw std::runtime_error("write failed: " + path);
}

double mse(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("mse: image sizes differ");
    double acc = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - b.data[i];
        acc += d * d;
    }
    return a.data.empty() ? 0.0 : acc / static_cast<double>(a.data.size());
}

double psnr(const Image& a, const Image& b) {
    double m = mse(a, b);
    return m <= 0 ? 999.0 : -10.0 * std::log10(m);
}

}  // namespace flakevol
