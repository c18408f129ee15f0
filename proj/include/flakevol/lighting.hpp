#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flakevol/field.hpp"
#include "flakevol/vec.hpp"

namespace flakevol::lighting {

// G(w) = amplitude * exp(sharpness * (w.axis - 1)). Visibility lobes use a
// single channel (amplitude splatted gray).
struct SgLobe {
    Vec3 axis{0, 0, 1};
    double sharpness = 0.0;
    Vec3 amplitude{0, 0, 0};
};

struct EnvLight {
    std::vector<SgLobe> lobes;
};

// Integral of exp(lambda*(w.axis - 1)) over the sphere: 2*pi*(1-e^{-2l})/l.
double sg_integral(double lambda);
double sg_integral_deriv(double lambda);

Vec3 env_eval(const EnvLight& env, const Vec3& omega);

// Closed-form integral of G_a * G_b over the sphere, per channel.
Vec3 sg_inner_product(const SgLobe& a, const SgLobe& b);

// Fixed single-SG fit of the clamped cosine about `normal`. The fit constants
// satisfy: value at the normal within 0.1 of 1, antipodal value below 0.05,
// upper-hemisphere integral within 10% of pi. The true max abs error on the
// sphere is ~0.14 (a single SG cannot do better than ~0.13 at the terminator).
SgLobe cosine_sg_approx(const Vec3& normal);
constexpr double kCosSharpness = 2.1;
constexpr double kCosAmplitude = 1.085;

// Product integral of three unit-amplitude SG kernels with axes/sharpness
// (xi_a, la), (xi_b, lb), (n, kCosSharpness); shared by the shading closed
// form and its adjoint. Outputs the scalar value plus partials wrt lb and n.
struct SgTriple {
    double value = 0;      // integral of the three kernels (no amplitudes)
    double d_lambda_b = 0; // partial wrt lb
    Vec3 d_n{0, 0, 0};     // partial wrt n (before any normalization jacobian)
};
SgTriple sg_triple_product(const Vec3& xi_a, double la, const Vec3& xi_b, double lb,
                           const Vec3& n);

// Sum-of-lobes visibility evaluated and clamped to [0,1].
double vis_eval(std::span<const SgLobe> lobes, const Vec3& omega);

// Transmittance from x to the grid boundary along omega_l, fixed-step
// midpoint integration of decoded density. Throws std::invalid_argument on
// step <= 0.
double compute_visibility(const field::VolumeGrid& grid, const Vec3& x, const Vec3& omega_l,
                          double step);

struct VisSample {
    Vec3 omega;
    double v = 1.0;
};

// Least-squares SG compression of directional visibility samples: structured
// initialization plus a fixed number of Adam refinement steps on a
// leaky-clamped squared error, matching the [0,1] clamp applied by vis_eval
// while keeping a gradient on overshoot. The raw lobe sum may exceed 1 over
// fully lit regions (a bounded sum of k SGs cannot saturate a hemisphere);
// closed-form SG products that consume the raw sum inherit that excess.
// Amplitudes live in [0, 4]. Falls back to a constant lobe at the sample
// mean for degenerate inputs.
std::vector<SgLobe> fit_visibility_sg(const std::vector<VisSample>& samples, int k,
                                      int iters = 250);

// Per-voxel fitted visibility plus a per-voxel bitmask of binarized
// visibility along the specular light directions.
struct VisibilityField {
    int res[3] = {0, 0, 0};
    Vec3 lo, hi;
    int k_v = 4;
    std::vector<SgLobe> lobes;          // k_v per voxel, voxel-major
    std::vector<std::uint32_t> spec_mask;  // bit d: direction d visible

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(res[0]) * res[1] * res[2];
    }
    std::span<const SgLobe> lobes_at(std::size_t voxel) const {
        return {lobes.data() + voxel * k_v, static_cast<std::size_t>(k_v)};
    }
    std::size_t voxel_of(const Vec3& x) const;  // nearest voxel, clamped
};

struct VisibilityFitSettings {
    int sample_dirs = 64;
    int k_v = 4;
    int fit_iters = 250;
    double march_step = 0.03;
    double spec_threshold = 0.5;
    int threads = 1;
};

VisibilityField fit_visibility_field(const field::VolumeGrid& grid,
                                     const std::vector<Vec3>& spec_dirs,
                                     const VisibilityFitSettings& settings);

// Closed-form diffuse shading: (albedo/pi) * sum over visibility and light
// lobes of the triple product with the cosine SG about omega_m.
Vec3 diffuse_shade(const Vec3& albedo, const Vec3& omega_m, const EnvLight& env,
                   std::span<const SgLobe> vis);

// Text format, one lobe per line: ax ay az sharpness mu_r mu_g mu_b.
// '#' starts a comment. Round trips doubles exactly.
EnvLight load_env_sg(const std::string& path);
void save_env_sg(const EnvLight& env, const std::string& path);

}  // namespace flakevol::lighting
