#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "flakevol/cli.hpp"
#include "flakevol/field.hpp"
#include "flakevol/lighting.hpp"
#include "flakevol/renderer.hpp"
#include "flakevol/rng.hpp"
#include "flakevol/sphere.hpp"

namespace flakevol::cli {

namespace {

constexpr int kPresetLatent = 8;

// Minimum-norm latent with W z + b = y: z = W^T (W W^T)^{-1} (y - b).
// W W^T is 4x4; Gauss elimination with partial pivoting.
std::vector<double> solve_latent(const field::AppearanceDecoder& dec, const double y[4]) {
    const int k = dec.latent_dim;
    double a[4][5];
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            double s = 0.0;
            for (int j = 0; j < k; ++j)
                s += static_cast<double>(dec.weight[r * k + j]) * dec.weight[c * k + j];
            a[r][c] = s;
        }
        a[r][4] = y[r] - dec.bias[r];
    }
    for (int col = 0; col < 4; ++col) {
        int piv = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        if (std::abs(a[piv][col]) < 1e-12)
            throw std::runtime_error("preset: decoder rows are degenerate");
        for (int c = 0; c < 5; ++c) std::swap(a[col][c], a[piv][c]);
        for (int r = 0; r < 4; ++r) {
            if (r == col) continue;
            double f = a[r][col] / a[col][col];
            for (int c = col; c < 5; ++c) a[r][c] -= f * a[col][c];
        }
    }
    double lam[4];
    for (int r = 0; r < 4; ++r) lam[r] = a[r][4] / a[r][r];
    std::vector<double> z(k, 0.0);
    for (int j = 0; j < k; ++j)
        for (int r = 0; r < 4; ++r) z[j] += static_cast<double>(dec.weight[r * k + j]) * lam[r];
    return z;
}

field::AppearanceDecoder make_decoder(std::uint64_t seed) {
    field::AppearanceDecoder dec(kPresetLatent);
    double scale = 0.5 / std::sqrt(static_cast<double>(kPresetLatent));
    for (int c = 0; c < 4; ++c)
        for (int j = 0; j < kPresetLatent; ++j)
            dec.weight[c * kPresetLatent + j] =
                static_cast<float>(scale * rng_gauss(seed, rng_stream::init_decoder, c, j));
    return dec;
}

void appearance_targets(const Vec3& albedo, double tau, double y[4]) {
    y[0] = field::logit(albedo.x);
    y[1] = field::logit(albedo.y);
    y[2] = field::logit(albedo.z);
    y[3] = field::logit(tau);
}

std::vector<renderer::Camera> camera_ring(int views, int image_res) {
    std::vector<renderer::Camera> cams;
    cams.reserve(views);
    const double radius = 2.8, elev = 18.0 * 3.14159265358979323846 / 180.0;
    const double focal = 1.45 * image_res;
    for (int v = 0; v < views; ++v) {
        double phi = 2.0 * 3.14159265358979323846 * v / views;
        Vec3 eye{radius * std::cos(phi) * std::cos(elev), radius * std::sin(phi) * std::cos(elev),
                 radius * std::sin(elev)};
        cams.push_back(
            renderer::look_at(eye, Vec3{0, 0, 0}, Vec3{0, 0, 1}, focal, image_res, image_res));
    }
    return cams;
}

// 16 lobes on a Fibonacci set with varied sharpness and muted colors, plus a
// strong warm sun replacing the lobe nearest +z.
lighting::EnvLight random_sky(std::uint64_t seed) {
    lighting::EnvLight env;
    std::vector<Vec3> axes = fibonacci_sphere(16);
    std::size_t sun = 0;
    for (std::size_t j = 0; j < axes.size(); ++j) {
        lighting::SgLobe l;
        l.axis = axes[j];
        l.sharpness = 6.0 + 24.0 * rng_uniform(seed, rng_stream::preset, j, 0);
        l.amplitude = {0.25 + 0.35 * rng_uniform(seed, rng_stream::preset, j, 1),
                       0.25 + 0.35 * rng_uniform(seed, rng_stream::preset, j, 2),
                       0.25 + 0.35 * rng_uniform(seed, rng_stream::preset, j, 3)};
        env.lobes.push_back(l);
        if (axes[j].z > axes[sun].z) sun = j;
    }
    env.lobes[sun].sharpness = 25.0;
    env.lobes[sun].amplitude = {3.0, 2.8, 2.4};
    return env;
}

void fill_constant_appearance(field::VolumeGrid& grid, const std::vector<double>& z) {
    for (std::size_t v = 0; v < grid.voxel_count(); ++v)
        for (int j = 0; j < grid.latent_dim; ++j)
            grid.latent[v * grid.latent_dim + j] = static_cast<float>(z[j]);
}

void set_normal(field::VolumeGrid& grid, std::size_t v, const Vec3& n) {
    grid.raw_normal[3 * v] = static_cast<float>(n.x);
    grid.raw_normal[3 * v + 1] = static_cast<float>(n.y);
    grid.raw_normal[3 * v + 2] = static_cast<float>(n.z);
}

Vec3 radial_or_up(const Vec3& p) {
    double len = length(p);
    return len > 1e-9 ? p / len : Vec3{0, 0, 1};
}

Preset preset_sphere(int grid_res, int views, int image_res, std::uint64_t seed) {
    Preset p;
    p.grid = field::VolumeGrid(grid_res, grid_res, grid_res, Vec3{-1, -1, -1}, Vec3{1, 1, 1},
                               kPresetLatent);
    p.dec = make_decoder(seed);
    const double voxel = 2.0 / grid_res;
    const double sigma_max = 30.0, r0 = 0.55, width = 0.5 * voxel;
    for (int iz = 0; iz < grid_res; ++iz)
        for (int iy = 0; iy < grid_res; ++iy)
            for (int ix = 0; ix < grid_res; ++ix) {
                std::size_t v = p.grid.voxel_index(ix, iy, iz);
                Vec3 c = p.grid.voxel_center(ix, iy, iz);
                double sigma = sigma_max / (1.0 + std::exp((length(c) - r0) / width));
                p.grid.raw_density[v] =
                    static_cast<float>(field::inv_softplus(std::max(sigma, 1e-12)));
                set_normal(p.grid, v, radial_or_up(c));
            }
    double y[4];
    appearance_targets(Vec3{0.75, 0.30, 0.22}, 0.35, y);
    fill_constant_appearance(p.grid, solve_latent(p.dec, y));
    p.env = random_sky(seed);
    p.cameras = camera_ring(views, image_res);
    return p;
}

Preset preset_two_material(int grid_res, int views, int image_res, std::uint64_t seed) {
    Preset p;
    p.grid = field::VolumeGrid(grid_res, grid_res, grid_res, Vec3{-1, -1, -1}, Vec3{1, 1, 1},
                               kPresetLatent);
    p.dec = make_decoder(seed);
    const Vec3 c_red{-0.35, 0, 0}, c_blue{0.35, 0, 0};
    const double sigma_max = 30.0, blob_w = 0.22;
    double y_red[4], y_blue[4];
    appearance_targets(Vec3{0.70, 0.20, 0.15}, 0.30, y_red);
    appearance_targets(Vec3{0.15, 0.25, 0.70}, 0.70, y_blue);
    std::vector<double> z_red = solve_latent(p.dec, y_red);
    std::vector<double> z_blue = solve_latent(p.dec, y_blue);
    for (int iz = 0; iz < grid_res; ++iz)
        for (int iy = 0; iy < grid_res; ++iy)
            for (int ix = 0; ix < grid_res; ++ix) {
                std::size_t v = p.grid.voxel_index(ix, iy, iz);
                Vec3 c = p.grid.voxel_center(ix, iy, iz);
                double d1 = length_squared(c - c_red), d2 = length_squared(c - c_blue);
                double sigma = sigma_max * (std::exp(-d1 / (2.0 * blob_w * blob_w)) +
                                            std::exp(-d2 / (2.0 * blob_w * blob_w)));
                p.grid.raw_density[v] =
                    static_cast<float>(field::inv_softplus(std::max(sigma, 1e-12)));
                bool red = d1 <= d2;
                set_normal(p.grid, v, radial_or_up(c - (red ? c_red : c_blue)));
                const std::vector<double>& z = red ? z_red : z_blue;
                for (int j = 0; j < kPresetLatent; ++j)
                    p.grid.latent[v * kPresetLatent + j] = static_cast<float>(z[j]);
            }
    p.env = random_sky(seed);
    p.cameras = camera_ring(views, image_res);
    return p;
}

Preset preset_occluder(int grid_res, int views, int image_res, std::uint64_t seed) {
    Preset p;
    p.grid = field::VolumeGrid(grid_res, grid_res, grid_res, Vec3{-1, -1, -1}, Vec3{1, 1, 1},
                               kPresetLatent);
    p.dec = make_decoder(seed);
    const double voxel = 2.0 / grid_res;
    const double sigma_max = 30.0, r0 = 0.35, width = 0.5 * voxel;
    double y_blob[4], y_slab[4];
    appearance_targets(Vec3{0.80, 0.78, 0.75}, 0.40, y_blob);
    appearance_targets(Vec3{0.30, 0.30, 0.32}, 0.50, y_slab);
    std::vector<double> z_blob = solve_latent(p.dec, y_blob);
    std::vector<double> z_slab = solve_latent(p.dec, y_slab);
    for (int iz = 0; iz < grid_res; ++iz)
        for (int iy = 0; iy < grid_res; ++iy)
            for (int ix = 0; ix < grid_res; ++ix) {
                std::size_t v = p.grid.voxel_index(ix, iy, iz);
                Vec3 c = p.grid.voxel_center(ix, iy, iz);
                double sigma = sigma_max / (1.0 + std::exp((length(c) - r0) / width));
                bool in_slab = c.x >= 0.55 && c.x <= 0.75 && std::abs(c.y) <= 0.8 &&
                               std::abs(c.z) <= 0.8;
                Vec3 n = radial_or_up(c);
                const std::vector<double>* z = &z_blob;
                if (in_slab) {
                    sigma = std::max(sigma, 40.0);
                    n = Vec3{1, 0, 0};
                    z = &z_slab;
                }
                p.grid.raw_density[v] =
                    static_cast<float>(field::inv_softplus(std::max(sigma, 1e-12)));
                set_normal(p.grid, v, n);
                for (int j = 0; j < kPresetLatent; ++j)
                    p.grid.latent[v * kPresetLatent + j] = static_cast<float>((*z)[j]);
            }
    // Hard sun from +x so the slab shadows the blob, plus dim fixed fill.
    p.env.lobes.push_back({Vec3{1, 0, 0}, 30.0, Vec3{3.2, 3.0, 2.7}});
    p.env.lobes.push_back({Vec3{-1, 0, 0}, 2.0, Vec3{0.15, 0.18, 0.25}});
    p.env.lobes.push_back({Vec3{0, 0, 1}, 2.5, Vec3{0.25, 0.25, 0.30}});
    p.env.lobes.push_back({Vec3{0, 1, 0}, 2.0, Vec3{0.12, 0.12, 0.15}});
    p.cameras = camera_ring(views, image_res);
    return p;
}

}  // namespace

Preset build_preset(const std::string& name, int grid_res, int views, int image_res,
                    std::uint64_t seed) {
    if (grid_res < 2 || views < 1 || image_res < 1)
        throw std::invalid_argument("preset: grid_res >= 2, views >= 1, image_res >= 1 required");
    if (name == "sphere") return preset_sphere(grid_res, views, image_res, seed);
    if (name == "two-material-blob") return preset_two_material(grid_res, views, image_res, seed);
    if (name == "occluder-slab") return preset_occluder(grid_res, views, image_res, seed);
    throw std::invalid_argument("unknown preset: " + name);
}

lighting::EnvLight novel_relight_env(std::uint64_t seed) {
    auto jitter = [&](std::uint64_t c) {
        return 0.9 + 0.2 * rng_uniform(seed, rng_stream::preset, 100, c);
    };
    lighting::EnvLight env;
    env.lobes.push_back({normalize(Vec3{0.5, 0.5, 0.707}), 8.0 * jitter(0), Vec3{2.5, 1.8, 1.2}});
    env.lobes.push_back({normalize(Vec3{-0.7, 0.2, 0.4}), 3.0 * jitter(1), Vec3{0.4, 0.6, 1.0}});
    env.lobes.push_back({normalize(Vec3{0.0, -0.8, 0.6}), 12.0 * jitter(2), Vec3{1.5, 1.5, 1.8}});
    return env;
}

}  // namespace flakevol::cli
