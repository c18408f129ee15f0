#include "flakevol/sggx.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flakevol::sggx {

namespace {

constexpr double kPi = 3.14159265358979323846;

Mat3 add_diag(Mat3 m, double d) {
    m.m[0][0] += d;
    m.m[1][1] += d;
    m.m[2][2] += d;
    return m;
}

Mat3 scale(const Mat3& m, double s) {
    Mat3 r = m;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.m[i][j] *= s;
    return r;
}

}  // namespace

void build_onb(const Vec3& omega, Vec3& omega_x, Vec3& omega_y) {
    double len = length(omega);
    if (!is_finite(omega) || len < 1e-12)
        throw std::domain_error("build_onb: zero or non-finite direction");
    Vec3 n = omega / len;
    // Branch-stable frame; right-handed so omega_x x omega_y == n.
    double s = std::copysign(1.0, n.z);
    double a = -1.0 / (s + n.z);
    double b = n.x * n.y * a;
    omega_x = Vec3{1.0 + s * n.x * n.x * a, s * b, -s * n.x};
    omega_y = Vec3{b, s + n.y * n.y * a, -n.y};
}

SggxMatrix build_sggx(const MicroflakeParams& p) {
    if (!is_finite(p.omega_m) || !(p.tau_m > 0.0) || p.tau_m > 1.0)
        throw std::domain_error("build_sggx: need unit omega_m and tau_m in (0,1]");
    if (!is_unit(p.omega_m))
        throw std::domain_error("build_sggx: omega_m not unit length");
    Vec3 m = normalize(p.omega_m);
    double t2 = p.tau_m * p.tau_m;
    SggxMatrix out;
    out.s = add_diag(scale(outer(m, m), 1.0 - t2), t2);
    // S = t2 I + (1 - t2) m m^T has eigenvalues (1, t2, t2).
    out.det_s = t2 * t2;
    out.inv_s = add_diag(scale(outer(m, m), 1.0 - 1.0 / t2), 1.0 / t2);
    return out;
}

double ndf_eval(const SggxMatrix& s, const Vec3& omega) {
    if (!is_finite(omega) || !is_unit(omega))
        throw std::domain_error("ndf_eval: omega must be unit");
    double q = quad_form(s.inv_s, omega);
    return 1.0 / (kPi * std::sqrt(s.det_s) * q * q);
}

double ndf_eval(const MicroflakeParams& p, const Vec3& omega) {
    if (!is_finite(omega) || !is_unit(omega))
        throw std::domain_error("ndf_eval: omega must be unit");
    double t2 = p.tau_m * p.tau_m;
    double c = dot(omega, p.omega_m);
    double q = 1.0 / t2 + (1.0 - 1.0 / t2) * c * c;
    return 1.0 / (kPi * t2 * q * q);
}

double projected_area(const SggxMatrix& s, const Vec3& omega) {
    if (!is_finite(omega) || !is_unit(omega))
        throw std::domain_error("projected_area: omega must be unit");
    return std::sqrt(quad_form(s.s, omega));
}

double projected_area(const MicroflakeParams& p, const Vec3& omega) {
    if (!is_finite(omega) || !is_unit(omega))
        throw std::domain_error("projected_area: omega must be unit");
    double t2 = p.tau_m * p.tau_m;
    double c = dot(omega, p.omega_m);
    return std::sqrt(t2 + (1.0 - t2) * c * c);
}

Vec3 sample_visible_normal(const SggxMatrix& s, const Vec3& omega_i, double u1, double u2) {
    if (!is_finite(omega_i) || !is_unit(omega_i))
        throw std::domain_error("sample_visible_normal: omega_i must be unit");
    // Clamp away from 1 so w = sqrt(1 - u^2 - v^2) stays real.
    u1 = std::clamp(u1, 0.0, 1.0 - 1e-12);
    u2 = std::clamp(u2, 0.0, 1.0 - 1e-12);

    double r = std::sqrt(u1);
    double phi = 2.0 * kPi * u2;
    double u = r * std::cos(phi);
    double v = r * std::sin(phi);
    double w = std::sqrt(std::max(0.0, 1.0 - u * u - v * v));

    Vec3 wk, wj;
    build_onb(omega_i, wk, wj);
    const Vec3& wi = omega_i;

    // Project S into the (wk, wj, wi) frame.
    double s_kk = quad_form(s.s, wk);
    double s_jj = quad_form(s.s, wj);
    double s_ii = quad_form(s.s, wi);
    double s_kj = dot(wk, s.s * wj);
    double s_ki = dot(wk, s.s * wi);
    double s_ji = dot(wj, s.s * wi);

    // Rows of the triangular factor that maps the cosine hemisphere onto the
    // visible-normal distribution.
    double sqrt_det = std::sqrt(std::max(s.det_s, 0.0));
    double inv_sqrt_sii = 1.0 / std::sqrt(s_ii);
    double tmp = std::sqrt(std::max(s_jj * s_ii - s_ji * s_ji, 1e-300));
    Vec3 mk{sqrt_det / tmp, 0.0, 0.0};
    Vec3 mj{-inv_sqrt_sii * (s_ki * s_ji - s_kj * s_ii) / tmp, inv_sqrt_sii * tmp, 0.0};
    Vec3 mi{inv_sqrt_sii * s_ki, inv_sqrt_sii * s_ji, inv_sqrt_sii * s_ii};

    Vec3 local = normalize(mk * u + mj * v + mi * w);
    return normalize(wk * local.x + wj * local.y + wi * local.z);
}

double visible_ndf_pdf(const SggxMatrix& s, const Vec3& omega_i, const Vec3& m) {
    double c = dot(omega_i, m);
    if (c <= 0.0) return 0.0;
    return c * ndf_eval(s, m) / projected_area(s, omega_i);
}

}  // namespace flakevol::sggx
