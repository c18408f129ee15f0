#pragma once

#include "flakevol/sggx.hpp"
#include "flakevol/vec.hpp"

namespace flakevol::phase {

// Diffuse/specular mix; (1, 1) is the plain sum used by the renderer.
struct PhaseWeights {
    double w_diffuse = 1.0;
    double w_specular = 1.0;
};

enum class PhaseKind { diffuse, specular };

struct PhaseSample {
    Vec3 omega_l{0, 0, 1};
    double pdf = 0.0;
    bool ok = false;  // false: degenerate reflection, caller retries with fresh u
};

// f_p^s = D(omega_h) / (4 tau(omega_i)), omega_h the half vector.
// Defined 0 when omega_l = -omega_i.
double phase_specular_eval(const sggx::SggxMatrix& s, const Vec3& omega_i, const Vec3& omega_l);
double phase_specular_eval(const sggx::MicroflakeParams& p, const Vec3& omega_i, const Vec3& omega_l);

// f_p^d = 1/(pi tau(omega_i)) * integral of <omega_l.m>+ <omega_i.m>+ D(m) dm,
// by deterministic spherical quadrature with `nodes` points (>= 16).
double phase_diffuse_eval(const sggx::SggxMatrix& s, const Vec3& omega_i, const Vec3& omega_l,
                          int nodes = 5000);

// Single-sample unbiased estimator of f_p^d: visible normal m from u, then
// <omega_l.m>+ / pi. Always in [0, 1/pi].
double phase_diffuse_estimate(const sggx::SggxMatrix& s, const Vec3& omega_i, const Vec3& omega_l,
                              double u1, double u2);

double phase_combined_eval(const sggx::SggxMatrix& s, const Vec3& omega_i, const Vec3& omega_l,
                           const PhaseWeights& weights, int nodes = 5000);

// Light-direction importance sampling. Specular: reflect omega_i about a
// visible normal, pdf = D_vis(m) / (4 <m.omega_l>). Diffuse: visible normal,
// then cosine cone about it; u3 is split into two 26-bit uniforms for the cone.
PhaseSample sample_phase_direction(const sggx::SggxMatrix& s, const Vec3& omega_i, PhaseKind kind,
                                   double u1, double u2, double u3);

// Density realized by sample_phase_direction (diffuse marginal equals f_p^d).
double sample_phase_pdf(const sggx::SggxMatrix& s, const Vec3& omega_i, PhaseKind kind,
                        const Vec3& omega_l, int nodes = 5000);

}  // namespace flakevol::phase
