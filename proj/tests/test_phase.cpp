#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "flakevol/phase.hpp"
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
    return uniform_sphere_sample(rng_uniform(31, rng_stream::test, c, 0),
                                 rng_uniform(31, rng_stream::test, c, 1));
}

MicroflakeParams rand_params(std::uint64_t c, double tau_min = 0.05) {
    return {rand_unit(c), tau_min + (1.0 - tau_min) * rng_uniform(31, rng_stream::test, c, 2)};
}

}  // namespace

TEST_CASE("specular phase closed-form values") {
    SggxMatrix iso = sggx::build_sggx({Vec3{0, 0, 1}, 1.0});
    SUBCASE("isotropic flakes give 1/(4pi) for every direction pair") {
        for (std::uint64_t c = 0; c < 10; ++c) {
            Vec3 wi = rand_unit(c + 10), wl = rand_unit(c + 60);
            CHECK(phase::phase_specular_eval(iso, wi, wl) ==
                  doctest::Approx(1.0 / (4 * kPi)).epsilon(1e-9));
        }
    }
    SUBCASE("degenerate reflection is zero") {
        Vec3 wi = rand_unit(1);
        CHECK(phase::phase_specular_eval(iso, wi, -wi) == 0.0);
    }
    SUBCASE("params overload matches the matrix form") {
        for (std::uint64_t c = 0; c < 20; ++c) {
            MicroflakeParams p = rand_params(c + 100);
            SggxMatrix s = sggx::build_sggx(p);
            Vec3 wi = rand_unit(c + 150), wl = rand_unit(c + 180);
            CHECK(phase::phase_specular_eval(p, wi, wl) ==
                  doctest::Approx(phase::phase_specular_eval(s, wi, wl)).epsilon(1e-12));
        }
    }
    SUBCASE("reciprocal in omega_i and omega_l up to projected-area ratio") {
        // f(wi->wl) tau(wi) = f(wl->wi) tau(wl): D(h) is shared by both sides.
        for (std::uint64_t c = 0; c < 10; ++c) {
            MicroflakeParams p = rand_params(c + 200, 0.2);
            SggxMatrix s = sggx::build_sggx(p);
            Vec3 wi = rand_unit(c + 250), wl = rand_unit(c + 280);
            double lhs = phase::phase_specular_eval(s, wi, wl) * sggx::projected_area(s, wi);
            double rhs = phase::phase_specular_eval(s, wl, wi) * sggx::projected_area(s, wl);
            CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
        }
    }
}

TEST_CASE("specular phase integrates to 1 over outgoing directions") {
    std::vector<Vec3> nodes = fibonacci_sphere(20000);
    double domega = 4.0 * kPi / nodes.size();
    for (std::uint64_t c = 0; c < 5; ++c) {
        MicroflakeParams p = rand_params(c + 300);
        SggxMatrix s = sggx::build_sggx(p);
        Vec3 wi = rand_unit(c + 350);
        double acc = 0;
        for (const Vec3& wl : nodes) acc += phase::phase_specular_eval(s, wi, wl) * domega;
        CHECK(std::abs(acc - 1.0) < 0.01);
    }
}

TEST_CASE("diffuse phase quadrature") {
    SggxMatrix iso = sggx::build_sggx({Vec3{0, 0, 1}, 1.0});
    SUBCASE("isotropic retroreflection value 2/(3pi)") {
        Vec3 wi = rand_unit(400);
        CHECK(phase::phase_diffuse_eval(iso, wi, wi) ==
              doctest::Approx(2.0 / (3.0 * kPi)).epsilon(1e-3));
    }
    SUBCASE("isotropic flakes depend only on the angle between directions") {
        Vec3 wi1 = rand_unit(410), wi2 = rand_unit(411);
        Vec3 x1, y1, x2, y2;
        sggx::build_onb(wi1, x1, y1);
        sggx::build_onb(wi2, x2, y2);
        double ang = 1.1;
        Vec3 wl1 = normalize(wi1 * std::cos(ang) + x1 * std::sin(ang));
        Vec3 wl2 = normalize(wi2 * std::cos(ang) + x2 * std::sin(ang));
        CHECK(phase::phase_diffuse_eval(iso, wi1, wl1) ==
              doctest::Approx(phase::phase_diffuse_eval(iso, wi2, wl2)).epsilon(1e-3));
    }
    SUBCASE("node-count self-convergence") {
        MicroflakeParams p = rand_params(420, 0.2);
        SggxMatrix s = sggx::build_sggx(p);
        Vec3 wi = rand_unit(421), wl = rand_unit(422);
        double a = phase::phase_diffuse_eval(s, wi, wl, 5000);
        double b = phase::phase_diffuse_eval(s, wi, wl, 20000);
        CHECK(std::abs(a - b) < 1e-3);
    }
    SUBCASE("rejects tiny node counts") {
        CHECK_THROWS_AS(phase::phase_diffuse_eval(iso, Vec3{0, 0, 1}, Vec3{0, 0, 1}, 15),
                        std::invalid_argument);
    }
    SUBCASE("integral over outgoing directions is at most 1") {
        std::vector<Vec3> nodes = fibonacci_sphere(2000);
        double domega = 4.0 * kPi / nodes.size();
        for (std::uint64_t c = 0; c < 2; ++c) {
            SggxMatrix s = sggx::build_sggx(rand_params(c + 430, 0.3));
            Vec3 wi = rand_unit(c + 440);
            double acc = 0;
            for (const Vec3& wl : nodes) acc += phase::phase_diffuse_eval(s, wi, wl, 800) * domega;
            CHECK(acc <= 1.0 + 1e-2);
            CHECK(acc > 0.5);  // diffuse albedo of the flake cloud is substantial
        }
    }
}

TEST_CASE("single-sample diffuse estimator is unbiased and bounded") {
    MicroflakeParams p{normalize(Vec3{0.4, 0.2, 0.9}), 0.5};
    SggxMatrix s = sggx::build_sggx(p);
    Vec3 wi = normalize(Vec3{-0.2, 0.5, 0.8}), wl = normalize(Vec3{0.7, -0.1, 0.7});
    const int n = 1000000;
    double mean = 0;
    for (int i = 0; i < n; ++i) {
        double e = phase::phase_diffuse_estimate(s, wi, wl, rng_uniform(32, rng_stream::test, 0, i),
                                                 rng_uniform(32, rng_stream::test, 1, i));
        REQUIRE(e >= 0.0);
        REQUIRE(e <= 1.0 / kPi + 1e-12);
        mean += e;
    }
    mean /= n;
    double ref = phase::phase_diffuse_eval(s, wi, wl, 20000);
    CHECK(std::abs(mean - ref) < 0.01 * ref);
}

TEST_CASE("combined phase is the exact weighted sum") {
    MicroflakeParams p = rand_params(500, 0.2);
    SggxMatrix s = sggx::build_sggx(p);
    Vec3 wi = rand_unit(510), wl = rand_unit(520);
    phase::PhaseWeights w{0.7, 2.5};
    double d = phase::phase_diffuse_eval(s, wi, wl, 3000);
    double sp = phase::phase_specular_eval(s, wi, wl);
    CHECK(phase::phase_combined_eval(s, wi, wl, w, 3000) == 0.7 * d + 2.5 * sp);
    CHECK(phase::phase_combined_eval(s, wi, wl, {0, 0}, 3000) == 0.0);
}

TEST_CASE("phase direction sampling") {
    MicroflakeParams p{normalize(Vec3{0.3, -0.5, 0.8}), 0.4};
    SggxMatrix s = sggx::build_sggx(p);
    Vec3 wi = normalize(Vec3{0.6, 0.3, 0.74});

    SUBCASE("samples are unit, deterministic, with positive pdf") {
        for (std::uint64_t c = 0; c < 40; ++c) {
            double u1 = rng_uniform(33, rng_stream::test, c, 0);
            double u2 = rng_uniform(33, rng_stream::test, c, 1);
            double u3 = rng_uniform(33, rng_stream::test, c, 2);
            for (phase::PhaseKind kind : {phase::PhaseKind::specular, phase::PhaseKind::diffuse}) {
                phase::PhaseSample ps = phase::sample_phase_direction(s, wi, kind, u1, u2, u3);
                phase::PhaseSample ps2 = phase::sample_phase_direction(s, wi, kind, u1, u2, u3);
                CHECK(std::memcmp(&ps.omega_l, &ps2.omega_l, sizeof ps.omega_l) == 0);
                CHECK(std::memcmp(&ps.pdf, &ps2.pdf, sizeof ps.pdf) == 0);
                CHECK(ps.ok == ps2.ok);
                if (!ps.ok) continue;  // degenerate reflection, caller retries
                CHECK(std::abs(length(ps.omega_l) - 1) < 1e-9);
                CHECK(ps.pdf > 0.0);
            }
        }
    }
    SUBCASE("specular pdf equals the specular phase") {
        for (std::uint64_t c = 0; c < 20; ++c) {
            phase::PhaseSample ps = phase::sample_phase_direction(
                s, wi, phase::PhaseKind::specular, rng_uniform(34, rng_stream::test, c, 0),
                rng_uniform(34, rng_stream::test, c, 1), rng_uniform(34, rng_stream::test, c, 2));
            if (!ps.ok) continue;
            CHECK(ps.pdf == doctest::Approx(phase::phase_specular_eval(s, wi, ps.omega_l))
                                .epsilon(1e-9));
            CHECK(phase::sample_phase_pdf(s, wi, phase::PhaseKind::specular, ps.omega_l) ==
                  doctest::Approx(ps.pdf).epsilon(1e-9));
        }
    }
    SUBCASE("diffuse marginal pdf equals the diffuse phase") {
        Vec3 wl = rand_unit(600);
        CHECK(phase::sample_phase_pdf(s, wi, phase::PhaseKind::diffuse, wl, 5000) ==
              doctest::Approx(phase::phase_diffuse_eval(s, wi, wl, 5000)).epsilon(1e-12));
    }
    SUBCASE("importance sampling agrees with quadrature on a test integrand") {
        // E[g(w_l)] under the sampled density equals the integral of g * f_p.
        Vec3 axis = normalize(Vec3{-0.4, 0.7, 0.6});
        auto g = [&](const Vec3& wl) { return 1.0 + 0.5 * dot(wl, axis); };
        const int n = 200000;
        for (phase::PhaseKind kind : {phase::PhaseKind::specular, phase::PhaseKind::diffuse}) {
            double mc = 0;
            int kept = 0;
            for (int i = 0; i < n; ++i) {
                phase::PhaseSample ps = phase::sample_phase_direction(
                    s, wi, kind, rng_uniform(35, rng_stream::test, 0, i),
                    rng_uniform(35, rng_stream::test, 1, i),
                    rng_uniform(35, rng_stream::test, 2, i));
                if (!ps.ok) continue;  // rejected tail contributes zero
                mc += g(ps.omega_l);
                ++kept;
            }
            mc /= n;
            std::vector<Vec3> nodes = fibonacci_sphere(20000);
            double domega = 4.0 * kPi / nodes.size();
            double quad = 0;
            for (const Vec3& wl : nodes) {
                double f = kind == phase::PhaseKind::specular
                               ? phase::phase_specular_eval(s, wi, wl)
                               : phase::phase_diffuse_eval(s, wi, wl, 400);
                quad += g(wl) * f * domega;
            }
            CHECK(kept > n * 9 / 10);
            CHECK(std::abs(mc - quad) < 0.02 * quad);
        }
    }
}
