#include "flakevol/phase.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "flakevol/sphere.hpp"

namespace flakevol::phase {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Splits one unit double into two 26-bit uniforms so the diffuse bounce can
// reuse the caller's third random number for its two-dimensional cone sample.
void split_uniform(double u3, double& a, double& b) {
    auto bits = static_cast<std::uint64_t>(u3 * 9007199254740992.0);  // 2^53
    a = static_cast<double>(bits >> 27) / 67108864.0;                 // 2^26
    b = static_cast<double>(bits & 0x3ffffffULL) / 67108864.0;
}

}  // namespace

double phase_specular_eval(const sggx::SggxMatrix& s, const Vec3& omega_i, const Vec3& omega_l) {
    Vec3 h = omega_i + omega_l;
    double len = length(h);
    if (len < 1e-9) return 0.0;  // exactly backward: half vector undefined, density -> 0
    return sggx::ndf_eval(s, h / len) / (4.0 * sggx::projected_area(s, omega_i));
}

double phase_specular_eval(const sggx::MicroflakeParams& p, const Vec3& omega_i,
                           const Vec3& omega_l) {
    Vec3 h = omega_i + omega_l;
    double len = length(h);
    if (len < 1e-9) return 0.0;
    return sggx::ndf_eval(p, h / len) / (4.0 * sggx::projected_area(p, omega_i));
}

double phase_diffuse_eval(const sggx::SggxMatrix& s, const Vec3& omega_i, const Vec3& omega_l,
                          int nodes) {
    if (nodes < 16) throw std::invalid_argument("phase_diffuse_eval: nodes must be >= 16");
    // Clamped-cosine product integrated over the full normal sphere; both
    // clamps matter because flakes are two-sided.
    const auto dirs = fibonacci_sphere(nodes);
    double acc = 0.0;
    for (const Vec3& m : dirs) {
        double ci = dot(omega_i, m);
        double cl = dot(omega_l, m);
        if (ci <= 0.0 || cl <= 0.0) continue;
        acc += ci * cl * sggx::ndf_eval(s, m);
    }
    double integral = acc * (4.0 * kPi / nodes);
    return integral / (kPi * sggx::projected_area(s, omega_i));
}

double phase_diffuse_estimate(const sggx::SggxMatrix& s, const Vec3& omega_i, const Vec3& omega_l,
                              double u1, double u2) {
    Vec3 m = sggx::sample_visible_normal(s, omega_i, u1, u2);
    return std::max(0.0, dot(omega_l, m)) / kPi;
}

double phase_combined_eval(const sggx::SggxMatrix& s, const Vec3& omega_i, const Vec3& omega_l,
                           const PhaseWeights& w, int nodes) {
    double f = 0.0;
    if (w.w_specular > 0.0) f += w.w_specular * phase_specular_eval(s, omega_i, omega_l);
    if (w.w_diffuse > 0.0) f += w.w_diffuse * phase_diffuse_eval(s, omega_i, omega_l, nodes);
    return f;
}

PhaseSample sample_phase_direction(const sggx::SggxMatrix& s, const Vec3& omega_i, PhaseKind kind,
                                   double u1, double u2, double u3) {
    PhaseSample out;
    Vec3 m = sggx::sample_visible_normal(s, omega_i, u1, u2);
    if (kind == PhaseKind::specular) {
        double c = dot(omega_i, m);
        if (c <= 1e-9) {
            out.ok = false;  // grazing flake: reflection direction ill-conditioned, resample
            return out;
        }
        out.omega_l = normalize(m * (2.0 * c) - omega_i);
        // Reflecting a visible normal lands exactly on f_p, which integrates
        // to one, so the phase value is its own density.
        out.pdf = phase_specular_eval(s, omega_i, out.omega_l);
        out.ok = out.pdf > 0.0;
        return out;
    }
    double ua, ub;
    split_uniform(u3, ua, ub);
    out.omega_l = cosine_sample_about(m, ua, ub);
    // Marginal density over flake orientations; quadrature is fine here since
    // this path exists for cross-validation, not the inner render loop.
    out.pdf = phase_diffuse_eval(s, omega_i, out.omega_l);
    out.ok = out.pdf > 0.0;
    return out;
}

double sample_phase_pdf(const sggx::SggxMatrix& s, const Vec3& omega_i, PhaseKind kind,
                        const Vec3& omega_l, int nodes) {
    if (kind == PhaseKind::specular) return phase_specular_eval(s, omega_i, omega_l);
    return phase_diffuse_eval(s, omega_i, omega_l, nodes);
}

}  // namespace flakevol::phase
