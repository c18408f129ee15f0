#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flakevol/vec.hpp"

namespace flakevol::field {

inline double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }
inline double softplus_deriv(double x) { return x > 30 ? 1.0 : 1.0 / (1.0 + std::exp(-x)); }
inline double inv_softplus(double y) {
    // y = log(1 + e^x)  =>  x = y + log(1 - e^-y)
    return y > 30 ? y : y + std::log(-std::expm1(-y));
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

constexpr double kTauFloor = 1e-3;
constexpr double kNormalFloor = 1e-6;

// Voxel field of raw (pre-activation) parameters. Decoded density is
// softplus(raw_density); decoded normal is the normalized trilinear
// interpolation of raw_normal; latent z decodes through AppearanceDecoder.
// Storage is float32, voxel-major with x fastest.
struct VolumeGrid {
    int res[3] = {0, 0, 0};
    Vec3 lo{-1, -1, -1}, hi{1, 1, 1};
    int latent_dim = 8;
    std::vector<float> raw_density;  // nx*ny*nz
    std::vector<float> raw_normal;   // 3 * nx*ny*nz
    std::vector<float> latent;       // latent_dim * nx*ny*nz

    VolumeGrid() = default;
    VolumeGrid(int nx, int ny, int nz, Vec3 lo_, Vec3 hi_, int k);

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(res[0]) * res[1] * res[2];
    }
    std::size_t voxel_index(int ix, int iy, int iz) const {
        return (static_cast<std::size_t>(iz) * res[1] + iy) * res[0] + ix;
    }
    Vec3 voxel_center(int ix, int iy, int iz) const;
    Vec3 spacing() const {
        return {(hi.x - lo.x) / res[0], (hi.y - lo.y) / res[1], (hi.z - lo.z) / res[2]};
    }
    bool contains(const Vec3& x) const {
        return x.x >= lo.x && x.y >= lo.y && x.z >= lo.z && x.x <= hi.x && x.y <= hi.y &&
               x.z <= hi.z;
    }
    // Per-voxel invariant ||raw_normal|| >= kNormalFloor, restored in place.
    void reproject_normals();
};

// Affine map z -> 4 pre-activations, then sigmoids: rgb albedo in (0,1),
// tau floor-clamped to [kTauFloor, 1).
struct AppearanceDecoder {
    int latent_dim = 8;
    std::vector<float> weight;  // 4 x latent_dim, row-major
    float bias[4] = {0, 0, 0, 0};

    AppearanceDecoder() = default;
    explicit AppearanceDecoder(int k) : latent_dim(k), weight(4 * k, 0.f) {}
};

struct FieldSample {
    double sigma = 0.0;
    Vec3 albedo{0, 0, 0};
    Vec3 omega_m{0, 0, 1};
    double tau_m = 1.0;
    bool inside = false;
};

// Trilinear stencil at x: 8 voxel indices and weights. inside=false outside
// the grid (caller treats the point as vacuum).
struct TriStencil {
    std::size_t idx[8];
    double w[8];
    bool inside = false;
};
TriStencil make_stencil(const VolumeGrid& grid, const Vec3& x);

double sample_density(const VolumeGrid& grid, const TriStencil& st);        // decoded
double sample_raw_density(const VolumeGrid& grid, const TriStencil& st);    // pre-activation
Vec3 sample_raw_normal(const VolumeGrid& grid, const TriStencil& st);
void sample_latent(const VolumeGrid& grid, const TriStencil& st, double* z_out);

void decode_appearance(const AppearanceDecoder& dec, const double* z, Vec3& albedo, double& tau_m);

// Interpolate raw fields then activate. sigma = 0 outside bounds.
FieldSample sample_field(const VolumeGrid& grid, const AppearanceDecoder& dec, const Vec3& x);

struct GradNormal {
    Vec3 n{0, 0, 1};
    bool degenerate = false;  // gradient below 1e-8; loss terms skip the point
};

// Normalized negative central-difference gradient of decoded density at
// voxel spacing. x must keep a one-voxel interior margin for the stencil.
GradNormal density_gradient_normal(const VolumeGrid& grid, const Vec3& x);

// Binary grid file: 64-byte header (magic, version, resolution, bounds,
// latent_dim), then float32 LE payload raw_density | raw_normal | latent.
// Decoder and metadata ride in a JSON sidecar at path + ".json".
void save_grid(const VolumeGrid& grid, const AppearanceDecoder& dec, const std::string& path);
std::pair<VolumeGrid, AppearanceDecoder> load_grid(const std::string& path);

}  // namespace flakevol::field
