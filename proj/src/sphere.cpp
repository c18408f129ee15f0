#include "flakevol/sphere.hpp"

#include <cmath>

namespace flakevol {

std::vector<Vec3> fibonacci_sphere(int n) {
    std::vector<Vec3> dirs;
    dirs.reserve(n);
    const double golden = 3.1415926535897931 * (1.0 + std::sqrt(5.0));
    for (int i = 0; i < n; ++i) {
        double z = 1.0 - 2.0 * (i + 0.5) / n;
        double r = std::sqrt(std::fmax(0.0, 1.0 - z * z));
        double phi = golden * (i + 0.5);
        dirs.push_back({r * std::cos(phi), r * std::sin(phi), z});
    }
    return dirs;
}

Vec3 uniform_sphere_sample(double u1, double u2) {
    double z = 1.0 - 2.0 * u1;
    double r = std::sqrt(std::fmax(0.0, 1.0 - z * z));
    double phi = 6.283185307179586 * u2;
    return {r * std::cos(phi), r * std::sin(phi), z};
}

Vec3 cosine_sample_about(const Vec3& n, double u1, double u2) {
    double ct = std::sqrt(std::fmax(0.0, 1.0 - u1));
    double st = std::sqrt(u1);
    double phi = 6.283185307179586 * u2;
    // local frame about n; branchless pole-stable construction
    double s = n.z >= 0 ? 1.0 : -1.0;
    double a = -1.0 / (s + n.z);
    double b = n.x * n.y * a;
    Vec3 t1{1.0 + s * n.x * n.x * a, s * b, -s * n.x};
    Vec3 t2{b, s + n.y * n.y * a, -n.y};
    return normalize(t1 * (st * std::cos(phi)) + t2 * (st * std::sin(phi)) + n * ct);
}

}  // namespace flakevol
