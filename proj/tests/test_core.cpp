#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "flakevol/image.hpp"
#include "flakevol/parallel.hpp"
#include "flakevol/rng.hpp"
#include "flakevol/sphere.hpp"
#include "flakevol/vec.hpp"
#include "test_util.hpp"

using namespace flakevol;

namespace {

Vec3 rand_vec(std::uint64_t c, double scale = 1.0) {
    return {scale * (2.0 * rng_uniform(9, rng_stream::test, c, 0) - 1.0),
            scale * (2.0 * rng_uniform(9, rng_stream::test, c, 1) - 1.0),
            scale * (2.0 * rng_uniform(9, rng_stream::test, c, 2) - 1.0)};
}

}  // namespace

TEST_CASE("vector identities") {
    Vec3 a = rand_vec(1), b = rand_vec(2);
    Vec3 c = cross(a, b);
    CHECK(std::abs(dot(c, a)) < 1e-12);
    CHECK(std::abs(dot(c, b)) < 1e-12);
    CHECK(length(normalize(a)) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(luminance(Vec3{1, 1, 1}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(dot(a, b) == doctest::Approx(length(a) * length(b) *
                                       dot(normalize(a), normalize(b))).epsilon(1e-12));
    CHECK(is_unit(Vec3{0, 0, 1}));
    CHECK(!is_unit(Vec3{0, 0, 1.01}));
    CHECK(is_finite(a));
    CHECK(!is_finite(Vec3{0, 0, 1.0 / 0.0}));
}

TEST_CASE("Mat3 products, transpose, inverse") {
    Mat3 a = Mat3::from_rows(rand_vec(3), rand_vec(4), rand_vec(5));
    Mat3 b = Mat3::from_rows(rand_vec(6), rand_vec(7), rand_vec(8));
    REQUIRE(std::abs(determinant(a)) > 1e-3);

    Mat3 ai = inverted(a);
    Mat3 id = a * ai;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(std::abs(id.m[i][j] - (i == j ? 1.0 : 0.0)) < 1e-12);

    CHECK(determinant(a * b) ==
          doctest::Approx(determinant(a) * determinant(b)).epsilon(1e-10));

    Mat3 abt = transpose(a * b);
    Mat3 btat = transpose(b) * transpose(a);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(abt.m[i][j] == doctest::Approx(btat.m[i][j]).epsilon(1e-12));

    Vec3 v = rand_vec(9);
    CHECK(quad_form(a, v) == doctest::Approx(dot(v, a * v)).epsilon(1e-12));
    Vec3 u = rand_vec(10), w = rand_vec(11);
    Vec3 ov = outer(u, w) * v;
    Vec3 expect = u * dot(w, v);
    CHECK(length(ov - expect) < 1e-12);

    CHECK(Mat3::from_cols(a.col(0), a.col(1), a.col(2)).m[1][2] == a.m[1][2]);
}

TEST_CASE("counter rng is a pure function of its key") {
    CHECK(rng_uniform(1, 2, 3, 4, 5) == rng_uniform(1, 2, 3, 4, 5));
    CHECK(rng_uniform(1, 2, 3, 4, 5) != rng_uniform(1, 2, 3, 4, 6));
    CHECK(rng_uniform(1, 2, 3, 4, 5) != rng_uniform(1, 3, 3, 4, 5));
    CHECK(rng_uniform(2, 2, 3, 4, 5) != rng_uniform(1, 2, 3, 4, 5));

    double mean = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        double u = rng_uniform(7, rng_stream::test, 0, i);
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        mean += u;
    }
    mean /= n;
    CHECK(std::abs(mean - 0.5) < 0.005);
}

TEST_CASE("rng gauss moments") {
    const int n = 20000;
    double mean = 0, m2 = 0;
    for (int i = 0; i < n; ++i) {
        double g = rng_gauss(11, rng_stream::test, 1, i);
        mean += g;
        m2 += g * g;
    }
    mean /= n;
    double var = m2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("rng_index stays in range and spreads evenly") {
    const std::uint64_t m = 7;
    std::vector<double> counts(m, 0.0);
    const int n = 14000;
    for (int i = 0; i < n; ++i) {
        std::uint64_t k = rng_index(5, rng_stream::test, 2, i, m);
        REQUIRE(k < m);
        counts[k] += 1.0;
    }
    std::vector<double> expected(m, static_cast<double>(n) / m);
    CHECK(testutil::chi2_p_value(counts, expected) > 1e-4);
}

TEST_CASE("fibonacci sphere quadrature integrates smooth integrands") {
    const int n = 5000;
    std::vector<Vec3> nodes = fibonacci_sphere(n);
    REQUIRE(nodes.size() == static_cast<std::size_t>(n));
    const double domega = 4.0 * 3.14159265358979323846 / n;

    double z2 = 0, clamped = 0;
    Vec3 axis = normalize(Vec3{0.3, -0.5, 0.8});
    for (const Vec3& w : nodes) {
        REQUIRE(is_unit(w, 1e-9));
        z2 += w.z * w.z * domega;
        clamped += std::max(0.0, dot(w, axis)) * domega;
    }
    // exact: integral of z^2 = 4pi/3, of a clamped cosine = pi
    CHECK(std::abs(z2 - 4.0 * 3.14159265358979323846 / 3.0) < 1e-3);
    CHECK(std::abs(clamped - 3.14159265358979323846) < 1e-3);
}

TEST_CASE("sphere samplers hit their distributions") {
    const int n = 20000;
    Vec3 mean_u{0, 0, 0};
    for (int i = 0; i < n; ++i) {
        Vec3 w = uniform_sphere_sample(rng_uniform(3, rng_stream::test, 3, i),
                                       rng_uniform(3, rng_stream::test, 4, i));
        REQUIRE(is_unit(w, 1e-9));
        mean_u += w;
    }
    CHECK(length(mean_u / n) < 0.02);

    Vec3 axis = normalize(Vec3{1, 2, -0.5});
    double mean_dot = 0;
    for (int i = 0; i < n; ++i) {
        Vec3 w = cosine_sample_about(axis, rng_uniform(3, rng_stream::test, 5, i),
                                     rng_uniform(3, rng_stream::test, 6, i));
        REQUIRE(is_unit(w, 1e-9));
        REQUIRE(dot(w, axis) >= -1e-12);
        mean_dot += dot(w, axis);
    }
    // cosine-weighted hemisphere: E[cos] = 2/3
    CHECK(std::abs(mean_dot / n - 2.0 / 3.0) < 0.01);
}

TEST_CASE("parallel_chunks partitions identically for every thread count") {
    const std::size_t count = 1003, chunk = 64;
    auto boundaries = [&](int threads) {
        std::vector<std::pair<std::size_t, std::size_t>> b((count + chunk - 1) / chunk);
        parallel_chunks(count, chunk, threads,
                        [&](std::size_t c, std::size_t lo, std::size_t hi) { b[c] = {lo, hi}; });
        return b;
    };
    auto b1 = boundaries(1), b4 = boundaries(4);
    REQUIRE(b1 == b4);
    std::size_t covered = 0;
    for (std::size_t c = 0; c < b1.size(); ++c) {
        CHECK(b1[c].first == c * chunk);
        covered += b1[c].second - b1[c].first;
    }
    CHECK(covered == count);

    // Per-chunk partial sums merged in chunk order are bit-reproducible.
    auto reduce = [&](int threads) {
        std::vector<double> partial(b1.size(), 0.0);
        parallel_chunks(count, chunk, threads, [&](std::size_t c, std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i)
                partial[c] += std::sin(0.1 * static_cast<double>(i));
        });
        double acc = 0;
        for (double p : partial) acc += p;
        return acc;
    };
    double r1 = reduce(1), r3 = reduce(3), r8 = reduce(8);
    CHECK(std::memcmp(&r1, &r3, sizeof r1) == 0);
    CHECK(std::memcmp(&r1, &r8, sizeof r1) == 0);
}

TEST_CASE("pfm round trip is bitwise") {
    namespace fs = std::filesystem;
    Image img(7, 5);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            img.set(x, y, Vec3{rng_uniform(13, rng_stream::test, x, y, 0) * 100.0,
                               -rng_uniform(13, rng_stream::test, x, y, 1),
                               rng_uniform(13, rng_stream::test, x, y, 2) * 1e-6});
    fs::path p = fs::temp_directory_path() / "flakevol_core_rt.pfm";
    save_pfm(img, p.string());
    Image back = load_pfm(p.string());
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    CHECK(std::memcmp(back.data.data(), img.data.data(), img.data.size() * sizeof(float)) == 0);
    fs::remove(p);
}

TEST_CASE("pfm loader rejects malformed files") {
    namespace fs = std::filesystem;
    fs::path bad = fs::temp_directory_path() / "flakevol_core_bad.pfm";
    {
        std::ofstream out(bad);
        out << "P6 nonsense";
    }
    CHECK_THROWS_AS(load_pfm(bad.string()), std::runtime_error);

    Image img(4, 4);
    save_pfm(img, bad.string());
    fs::resize_file(bad, fs::file_size(bad) - 8);
    CHECK_THROWS_AS(load_pfm(bad.string()), std::runtime_error);
    fs::remove(bad);
}

TEST_CASE("png writer emits a png file") {
    namespace fs = std::filesystem;
    Image img(8, 6);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            img.set(x, y, Vec3{x / 8.0, y / 6.0, 2.0});  // one channel clamps
    fs::path p = fs::temp_directory_path() / "flakevol_core.png";
    save_png(img, p.string());
    std::ifstream in(p, std::ios::binary);
    unsigned char sig[8] = {};
    in.read(reinterpret_cast<char*>(sig), 8);
    const unsigned char want[8] = {137, 'P', 'N', 'G', 13, 10, 26, 10};
    CHECK(std::memcmp(sig, want, 8) == 0);
    fs::remove(p);
}

TEST_CASE("mse and psnr on known differences") {
    Image a(3, 3), b(3, 3);
    CHECK(mse(a, b) == 0.0);
    CHECK(psnr(a, b) == 999.0);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) b.set(x, y, Vec3{0.1, 0.1, 0.1});
    CHECK(mse(a, b) == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-6));
    Image c(2, 3);
    CHECK_THROWS_AS(mse(a, c), std::invalid_argument);
}
