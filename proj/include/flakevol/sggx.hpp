#pragma once

#include "flakevol/vec.hpp"

namespace flakevol::sggx {

// Microflake ellipsoid: unit normal omega_m plus tangent roughness tau_m in
// (0, 1] (the projected-area ratio of the minor axes).
struct MicroflakeParams {
    Vec3 omega_m{0, 0, 1};
    double tau_m = 1.0;
};

struct SggxMatrix {
    Mat3 s;
    double det_s = 1.0;
    Mat3 inv_s;
};

// Right-handed orthonormal frame {omega_x, omega_y, omega}; branch-stable
// near both poles. Throws std::domain_error on zero/non-finite input.
void build_onb(const Vec3& omega, Vec3& omega_x, Vec3& omega_y);

// S = B diag(tau^2, tau^2, 1) B^T = tau^2 I + (1 - tau^2) omega_m omega_m^T.
SggxMatrix build_sggx(const MicroflakeParams& p);

// D(omega) = 1 / (pi sqrt|S| (omega^T S^-1 omega)^2); even in omega.
double ndf_eval(const SggxMatrix& s, const Vec3& omega);

// sqrt(omega^T S omega); equals the clamped-cosine integral of D.
double projected_area(const SggxMatrix& s, const Vec3& omega);

// Scalar shortcuts for a matrix built from params; bit-compatible with the
// matrix forms but cheaper and directly differentiable in (omega_m, tau_m).
double ndf_eval(const MicroflakeParams& p, const Vec3& omega);
double projected_area(const MicroflakeParams& p, const Vec3& omega);

// Visible-normal sample: density <omega_i.m>+ D(m) / projected_area(omega_i).
// Deterministic in (u1, u2); u clamped away from 1.
Vec3 sample_visible_normal(const SggxMatrix& s, const Vec3& omega_i, double u1, double u2);

// Density the sampler realizes, for histogram checks and pdf conversions.
double visible_ndf_pdf(const SggxMatrix& s, const Vec3& omega_i, const Vec3& m);

}  // namespace flakevol::sggx
