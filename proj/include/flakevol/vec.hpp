#pragma once

#include <cmath>
#include <cstdint>

namespace flakevol {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}
    explicit Vec3(double s) : x(s), y(s), z(s) {}

    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
    double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3 operator*(const Vec3& o) const { return {x * o.x, y * o.y, z * o.z}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

inline double length_squared(const Vec3& v) { return dot(v, v); }
inline double length(const Vec3& v) { return std::sqrt(dot(v, v)); }

inline Vec3 normalize(const Vec3& v) { return v / length(v); }

inline double max_component(const Vec3& v) { return std::fmax(v.x, std::fmax(v.y, v.z)); }

inline double luminance(const Vec3& c) { return 0.2126 * c.x + 0.7152 * c.y + 0.0722 * c.z; }

inline bool is_finite(const Vec3& v) {
    return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

inline bool is_unit(const Vec3& v, double tol = 1e-6) {
    return std::fabs(length(v) - 1.0) <= tol;
}

// Row-major 3x3.
struct Mat3 {
    double m[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};

    static Mat3 zero() {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i][j] = 0;
        return r;
    }

    static Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2) {
        Mat3 r;
        for (int j = 0; j < 3; ++j) {
            r.m[0][j] = r0[j];
            r.m[1][j] = r1[j];
            r.m[2][j] = r2[j];
        }
        return r;
    }

    static Mat3 from_cols(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
        Mat3 r;
        for (int i = 0; i < 3; ++i) {
            r.m[i][0] = c0[i];
            r.m[i][1] = c1[i];
            r.m[i][2] = c2[i];
        }
        return r;
    }

    Vec3 row(int i) const { return {m[i][0], m[i][1], m[i][2]}; }
    Vec3 col(int j) const { return {m[0][j], m[1][j], m[2][j]}; }
};

inline Vec3 operator*(const Mat3& a, const Vec3& v) {
    return {dot(a.row(0), v), dot(a.row(1), v), dot(a.row(2), v)};
}

inline Mat3 operator*(const Mat3& a, const Mat3& b) {
    Mat3 r = Mat3::zero();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r.m[i][j] += a.m[i][k] * b.m[k][j];
    return r;
}

inline Mat3 transpose(const Mat3& a) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.m[i][j] = a.m[j][i];
    return r;
}

inline double determinant(const Mat3& a) {
    return dot(a.row(0), cross(a.row(1), a.row(2)));
}

inline Mat3 inverted(const Mat3& a) {
    Vec3 r0 = a.row(0), r1 = a.row(1), r2 = a.row(2);
    Vec3 c01 = cross(r1, r2), c12 = cross(r2, r0), c20 = cross(r0, r1);
    double inv_det = 1.0 / dot(r0, c01);
    return Mat3::from_cols(c01 * inv_det, c12 * inv_det, c20 * inv_det);
}

// quadratic form v^T A v
inline double quad_form(const Mat3& a, const Vec3& v) { return dot(v, a * v); }

inline Mat3 outer(const Vec3& a, const Vec3& b) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.m[i][j] = a[i] * b[j];
    return r;
}

inline double clamp01(double v) { return v < 0 ? 0 : (v > 1 ? 1 : v); }

inline double sqr(double v) { return v * v; }

}  // namespace flakevol
