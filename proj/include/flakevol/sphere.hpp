#pragma once

#include <vector>

#include "flakevol/vec.hpp"

namespace flakevol {

// Deterministic equal-weight spherical quadrature nodes (golden-angle spiral).
// Each node carries weight 4*pi/n.
std::vector<Vec3> fibonacci_sphere(int n);

Vec3 uniform_sphere_sample(double u1, double u2);

// Cosine-weighted direction about `n`; pdf = <n.w>/pi on the upper hemisphere.
Vec3 cosine_sample_about(const Vec3& n, double u1, double u2);

}  // namespace flakevol
