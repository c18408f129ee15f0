#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "flakevol/rng.hpp"
#include "flakevol/sggx.hpp"
#include "flakevol/sphere.hpp"
#include "test_util.hpp"

using namespace flakevol;
using sggx::MicroflakeParams;
using sggx::SggxMatrix;

namespace {

constexpr double kPi = 3.14159265358979323846;

Vec3 rand_unit(std::uint64_t c) {
    return uniform_sphere_sample(rng_uniform(21, rng_stream::test, c, 0),
                                 rng_uniform(21, rng_stream::test, c, 1));
}

MicroflakeParams rand_params(std::uint64_t c, double tau_min = 0.05) {
    MicroflakeParams p;
    p.omega_m = rand_unit(c);
    p.tau_m = tau_min + (1.0 - tau_min) * rng_uniform(21, rng_stream::test, c, 2);
    return p;
}

Mat3 rotation_about(const Vec3& axis, double angle) {
    Vec3 u = normalize(axis);
    double c = std::cos(angle), s = std::sin(angle);
    Mat3 k = Mat3::zero();
    k.m[0][1] = -u.z; k.m[0][2] = u.y;
    k.m[1][0] = u.z;  k.m[1][2] = -u.x;
    k.m[2][0] = -u.y; k.m[2][1] = u.x;
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double kk = 0;
            for (int l = 0; l < 3; ++l) kk += k.m[i][l] * k.m[l][j];
            r.m[i][j] = (i == j ? 1.0 : 0.0) + s * k.m[i][j] + (1 - c) * kk;
        }
    return r;
}

}  // namespace

TEST_CASE("build_onb returns a right-handed orthonormal frame") {
    std::vector<Vec3> dirs = {Vec3{0, 0, 1}, Vec3{0, 0, -1}, Vec3{1, 0, 0},
                              Vec3{0, -1, 0}, normalize(Vec3{1e-9, 1e-9, 1})};
    for (std::uint64_t c = 0; c < 50; ++c) dirs.push_back(rand_unit(c + 100));
    for (const Vec3& w : dirs) {
        Vec3 x, y;
        sggx::build_onb(w, x, y);
        CHECK(std::abs(length(x) - 1) < 1e-6);
        CHECK(std::abs(length(y) - 1) < 1e-6);
        CHECK(std::abs(dot(x, y)) < 1e-6);
        CHECK(std::abs(dot(x, w)) < 1e-6);
        CHECK(std::abs(dot(y, w)) < 1e-6);
        CHECK(length(cross(x, y) - w) < 1e-6);  // right-handed: x cross y = w
    }
    Vec3 x, y;
    CHECK_THROWS_AS(sggx::build_onb(Vec3{0, 0, 0}, x, y), std::domain_error);
    CHECK_THROWS_AS(sggx::build_onb(Vec3{0, 0, 1.0 / 0.0}, x, y), std::domain_error);
}

TEST_CASE("build_sggx produces the ellipsoid matrix") {
    SUBCASE("tau 1 gives identity") {
        SggxMatrix s = sggx::build_sggx({rand_unit(1), 1.0});
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                CHECK(std::abs(s.s.m[i][j] - (i == j ? 1 : 0)) < 1e-12);
                CHECK(std::abs(s.inv_s.m[i][j] - (i == j ? 1 : 0)) < 1e-12);
            }
        CHECK(s.det_s == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("axis-aligned half roughness") {
        SggxMatrix s = sggx::build_sggx({Vec3{0, 0, 1}, 0.5});
        CHECK(s.s.m[0][0] == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(s.s.m[1][1] == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(s.s.m[2][2] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::abs(s.s.m[0][1]) < 1e-15);
        CHECK(s.det_s == doctest::Approx(0.0625).epsilon(1e-9));
    }
    SUBCASE("eigenvalues are tau^2, tau^2, 1 with omega_m the unit eigenvector") {
        for (std::uint64_t c = 0; c < 25; ++c) {
            MicroflakeParams p = rand_params(c + 200);
            SggxMatrix s = sggx::build_sggx(p);
            Eigen::Matrix3d es;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) es(i, j) = s.s.m[i][j];
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(es);
            REQUIRE(solver.info() == Eigen::Success);
            double t2 = p.tau_m * p.tau_m;
            CHECK(std::abs(solver.eigenvalues()[0] - t2) < 1e-6);
            CHECK(std::abs(solver.eigenvalues()[1] - t2) < 1e-6);
            CHECK(std::abs(solver.eigenvalues()[2] - 1.0) < 1e-6);
            CHECK(std::abs(s.det_s - t2 * t2) < 1e-6);
            // S omega_m = omega_m: the normal is the unit-eigenvalue direction
            CHECK(length(s.s * p.omega_m - p.omega_m) < 1e-9);
            Mat3 id = s.s * s.inv_s;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    CHECK(std::abs(id.m[i][j] - (i == j ? 1 : 0)) < 1e-9);
        }
    }
    SUBCASE("domain errors") {
        CHECK_THROWS_AS(sggx::build_sggx({Vec3{0, 0, 2}, 0.5}), std::domain_error);
        CHECK_THROWS_AS(sggx::build_sggx({Vec3{0, 0, 1}, 0.0}), std::domain_error);
        CHECK_THROWS_AS(sggx::build_sggx({Vec3{0, 0, 1}, 1.5}), std::domain_error);
    }
}

TEST_CASE("ndf_eval closed-form values and symmetries") {
    SUBCASE("isotropic matrix is uniform 1/pi") {
        SggxMatrix s = sggx::build_sggx({Vec3{0, 0, 1}, 1.0});
        for (std::uint64_t c = 0; c < 10; ++c)
            CHECK(sggx::ndf_eval(s, rand_unit(c + 300)) == doctest::Approx(1.0 / kPi).epsilon(1e-9));
    }
    SUBCASE("peak and perpendicular values at tau 0.5") {
        MicroflakeParams p{normalize(Vec3{1, 1, 1}), 0.5};
        SggxMatrix s = sggx::build_sggx(p);
        CHECK(sggx::ndf_eval(s, p.omega_m) == doctest::Approx(4.0 / kPi).epsilon(1e-9));
        Vec3 x, y;
        sggx::build_onb(p.omega_m, x, y);
        // perpendicular: omega^T S^-1 omega = 1/tau^2, D = tau^2/pi
        CHECK(sggx::ndf_eval(s, x) == doctest::Approx(0.25 / kPi).epsilon(1e-9));
    }
    SUBCASE("even in omega, bit-exact") {
        for (std::uint64_t c = 0; c < 20; ++c) {
            SggxMatrix s = sggx::build_sggx(rand_params(c + 400));
            Vec3 w = rand_unit(c + 450);
            CHECK(sggx::ndf_eval(s, w) == sggx::ndf_eval(s, -w));
        }
    }
    SUBCASE("rotation equivariance") {
        MicroflakeParams p = rand_params(500);
        Mat3 r = rotation_about(Vec3{0.4, -1, 0.7}, 1.3);
        MicroflakeParams pr{normalize(r * p.omega_m), p.tau_m};
        SggxMatrix s = sggx::build_sggx(p), sr = sggx::build_sggx(pr);
        for (std::uint64_t c = 0; c < 20; ++c) {
            Vec3 w = rand_unit(c + 550);
            CHECK(std::abs(sggx::ndf_eval(s, w) - sggx::ndf_eval(sr, normalize(r * w))) < 1e-6);
        }
    }
    SUBCASE("scalar overload matches the matrix form") {
        for (std::uint64_t c = 0; c < 20; ++c) {
            MicroflakeParams p = rand_params(c + 600);
            SggxMatrix s = sggx::build_sggx(p);
            Vec3 w = rand_unit(c + 650);
            CHECK(sggx::ndf_eval(p, w) == doctest::Approx(sggx::ndf_eval(s, w)).epsilon(1e-12));
        }
    }
    SUBCASE("rejects non-unit directions") {
        SggxMatrix s = sggx::build_sggx({Vec3{0, 0, 1}, 0.5});
        CHECK_THROWS_AS(sggx::ndf_eval(s, Vec3{0, 0, 2}), std::domain_error);
    }
}

TEST_CASE("projected_area equals the clamped-cosine integral of the ndf") {
    SUBCASE("closed-form special cases") {
        MicroflakeParams p{Vec3{0, 0, 1}, 0.3};
        SggxMatrix s = sggx::build_sggx(p);
        CHECK(sggx::projected_area(s, p.omega_m) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(sggx::projected_area(s, Vec3{1, 0, 0}) == doctest::Approx(0.3).epsilon(1e-12));
        SggxMatrix iso = sggx::build_sggx({Vec3{0, 0, 1}, 1.0});
        CHECK(sggx::projected_area(iso, rand_unit(800)) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("quadrature identity") {
        std::vector<Vec3> nodes = fibonacci_sphere(5000);
        double domega = 4.0 * kPi / nodes.size();
        for (std::uint64_t c = 0; c < 6; ++c) {
            MicroflakeParams p = rand_params(c + 850, 0.3);
            SggxMatrix s = sggx::build_sggx(p);
            Vec3 wi = rand_unit(c + 880);
            double quad = 0;
            for (const Vec3& m : nodes)
                quad += std::max(0.0, dot(wi, m)) * sggx::ndf_eval(s, m) * domega;
            CHECK(std::abs(quad - sggx::projected_area(s, wi)) < 1e-3);
        }
    }
    SUBCASE("scalar overload matches and stays within [tau, 1]") {
        for (std::uint64_t c = 0; c < 30; ++c) {
            MicroflakeParams p = rand_params(c + 900);
            SggxMatrix s = sggx::build_sggx(p);
            Vec3 w = rand_unit(c + 950);
            double pa = sggx::projected_area(p, w);
            CHECK(pa == doctest::Approx(sggx::projected_area(s, w)).epsilon(1e-12));
            CHECK(pa >= p.tau_m - 1e-12);
            CHECK(pa <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("visible-normal sampling") {
    SUBCASE("deterministic and always in the visible hemisphere") {
        for (std::uint64_t c = 0; c < 40; ++c) {
            SggxMatrix s = sggx::build_sggx(rand_params(c + 1000));
            Vec3 wi = rand_unit(c + 1050);
            double u1 = rng_uniform(22, rng_stream::test, c, 0);
            double u2 = rng_uniform(22, rng_stream::test, c, 1);
            Vec3 m = sggx::sample_visible_normal(s, wi, u1, u2);
            Vec3 m2 = sggx::sample_visible_normal(s, wi, u1, u2);
            CHECK(std::memcmp(&m, &m2, sizeof m) == 0);
            CHECK(std::abs(length(m) - 1) < 1e-9);
            CHECK(dot(wi, m) >= -1e-12);
        }
    }
    SUBCASE("isotropic case reduces to cosine sampling about omega_i") {
        SggxMatrix s = sggx::build_sggx({Vec3{0, 0, 1}, 1.0});
        Vec3 wi = normalize(Vec3{0.2, -0.4, 0.9});
        const int n = 20000;
        double mean_dot = 0;
        for (int i = 0; i < n; ++i) {
            Vec3 m = sggx::sample_visible_normal(s, wi, rng_uniform(23, rng_stream::test, 0, i),
                                                 rng_uniform(23, rng_stream::test, 1, i));
            mean_dot += dot(m, wi);
        }
        CHECK(std::abs(mean_dot / n - 2.0 / 3.0) < 0.01);
    }
    SUBCASE("pdf integrates to 1") {
        std::vector<Vec3> nodes = fibonacci_sphere(20000);
        double domega = 4.0 * kPi / nodes.size();
        SggxMatrix s = sggx::build_sggx({normalize(Vec3{1, 0.3, 0.5}), 0.4});
        Vec3 wi = normalize(Vec3{-0.3, 0.8, 0.6});
        double acc = 0;
        for (const Vec3& m : nodes) acc += sggx::visible_ndf_pdf(s, wi, m) * domega;
        CHECK(std::abs(acc - 1.0) < 0.01);
    }
    SUBCASE("histogram matches the analytic visible pdf") {
        // omega_i = +z so the support boundary lands exactly on a bin edge.
        SggxMatrix s = sggx::build_sggx({normalize(Vec3{0.5, -0.3, 0.8}), 0.45});
        Vec3 wi{0, 0, 1};
        const int nz = 12, nphi = 12, n_samples = 20000;
        std::vector<double> observed(nz * nphi, 0.0), expected(nz * nphi, 0.0);
        for (int i = 0; i < n_samples; ++i) {
            Vec3 m = sggx::sample_visible_normal(s, wi, rng_uniform(24, rng_stream::test, 0, i),
                                                 rng_uniform(24, rng_stream::test, 1, i));
            int bz = std::min(nz - 1, static_cast<int>(m.z * nz));
            if (m.z < 0) bz = 0;  // clamp: boundary samples with z ~ -0 land in slab 0
            double phi = std::atan2(m.y, m.x) + kPi;
            int bp = std::min(nphi - 1, static_cast<int>(phi / (2 * kPi) * nphi));
            observed[bz * nphi + bp] += 1.0;
        }
        // expected mass per bin by midpoint subquadrature of the pdf
        const int sub = 16;
        double total = 0;
        for (int bz = 0; bz < nz; ++bz)
            for (int bp = 0; bp < nphi; ++bp) {
                double mass = 0;
                for (int a = 0; a < sub; ++a)
                    for (int b = 0; b < sub; ++b) {
                        double z = (bz + (a + 0.5) / sub) / nz;
                        double phi = 2 * kPi * (bp + (b + 0.5) / sub) / nphi - kPi;
                        double r = std::sqrt(std::max(0.0, 1 - z * z));
                        Vec3 m{r * std::cos(phi), r * std::sin(phi), z};
                        mass += sggx::visible_ndf_pdf(s, wi, normalize(m));
                    }
                // bin area: dz x dphi on the unit sphere
                mass *= (1.0 / nz) * (2 * kPi / nphi) / (sub * sub);
                expected[bz * nphi + bp] = mass;
                total += mass;
            }
        REQUIRE(std::abs(total - 1.0) < 5e-3);
        for (double& e : expected) e *= n_samples / total;
        CHECK(testutil::chi2_p_value(observed, expected) > 0.01);
    }
}
