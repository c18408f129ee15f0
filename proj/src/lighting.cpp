#include "flakevol/lighting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "flakevol/parallel.hpp"
#include "flakevol/sggx.hpp"
#include "flakevol/sphere.hpp"

namespace flakevol::lighting {

namespace {

constexpr double kPi = 3.14159265358979323846;

}  // namespace

double sg_integral(double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("sg_integral: negative sharpness");
    if (lambda < 1e-4)
        // 2*pi*(1-e^{-2l})/l expanded around 0; the closed form cancels badly.
        return 4.0 * kPi * (1.0 - lambda + (2.0 / 3.0) * lambda * lambda -
                            (1.0 / 3.0) * lambda * lambda * lambda);
    return 2.0 * kPi * (-std::expm1(-2.0 * lambda)) / lambda;
}

double sg_integral_deriv(double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("sg_integral_deriv: negative sharpness");
    if (lambda < 1e-4)
        return 2.0 * kPi * (-2.0 + (8.0 / 3.0) * lambda - 2.0 * lambda * lambda);
    double e = std::exp(-2.0 * lambda);
    return 2.0 * kPi * (2.0 * lambda * e - 1.0 + e) / (lambda * lambda);
}

Vec3 env_eval(const EnvLight& env, const Vec3& omega) {
    Vec3 out{0, 0, 0};
    for (const SgLobe& l : env.lobes)
        out += l.amplitude * std::exp(l.sharpness * (dot(omega, l.axis) - 1.0));
    return out;
}

Vec3 sg_inner_product(const SgLobe& a, const SgLobe& b) {
    Vec3 q = a.axis * a.sharpness + b.axis * b.sharpness;
    double t = length(q);
    double scale = std::exp(t - a.sharpness - b.sharpness) * sg_integral(t);
    return a.amplitude * b.amplitude * scale;
}

SgLobe cosine_sg_approx(const Vec3& normal) {
    return SgLobe{normal, kCosSharpness, Vec3{kCosAmplitude, kCosAmplitude, kCosAmplitude}};
}

SgTriple sg_triple_product(const Vec3& xi_a, double la, const Vec3& xi_b, double lb,
                           const Vec3& n) {
    Vec3 q = xi_a * la + xi_b * lb + n * kCosSharpness;
    double t = length(q);
    double ea = std::exp(t - la - lb - kCosSharpness);  // exponent <= 0, never overflows
    double i = sg_integral(t);
    double ip = sg_integral_deriv(t);
    Vec3 qhat = t > 1e-12 ? q / t : Vec3{0, 0, 0};
    SgTriple out;
    out.value = ea * i;
    out.d_lambda_b = ea * ((i + ip) * dot(qhat, xi_b) - i);
    out.d_n = qhat * (ea * (i + ip) * kCosSharpness);
    return out;
}

double vis_eval(std::span<const SgLobe> lobes, const Vec3& omega) {
    double v = 0.0;
    for (const SgLobe& l : lobes)
        v += l.amplitude.x * std::exp(l.sharpness * (dot(omega, l.axis) - 1.0));
    return clamp01(v);
}

double compute_visibility(const field::VolumeGrid& grid, const Vec3& x, const Vec3& omega_l,
                          double step) {
    if (!(step > 0.0)) throw std::invalid_argument("compute_visibility: step must be > 0");
    // Clip the ray to the grid slab; integrate only the inside span.
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        double o = x[a], d = omega_l[a];
        double lo = grid.lo[a], hi = grid.hi[a];
        if (std::abs(d) < 1e-15) {
            if (o < lo || o > hi) return 1.0;
            continue;
        }
        double ta = (lo - o) / d, tb = (hi - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (!(t1 > t0)) return 1.0;
    int n = std::max(1, static_cast<int>(std::ceil((t1 - t0) / step)));
    double delta = (t1 - t0) / n;
    double optical = 0.0;
    for (int k = 0; k < n; ++k) {
        Vec3 p = x + omega_l * (t0 + (k + 0.5) * delta);
        optical += field::sample_density(grid, field::make_stencil(grid, p));
    }
    return std::exp(-optical * delta);
}

namespace {

// Gradient step state for the visibility fit: per lobe an unnormalized axis,
// sharpness, and scalar amplitude.
struct FitParams {
    std::vector<Vec3> axis;
    std::vector<double> sharp;
    std::vector<double> amp;
};

std::vector<SgLobe> constant_fallback(double vmean, int k) {
    std::vector<SgLobe> out(static_cast<std::size_t>(k));
    out[0] = SgLobe{Vec3{0, 0, 1}, 0.0, Vec3{vmean, vmean, vmean}};
    for (int l = 1; l < k; ++l) out[l] = SgLobe{Vec3{0, 0, 1}, 0.0, Vec3{0, 0, 0}};
    return out;
}

}  // namespace

std::vector<SgLobe> fit_visibility_sg(const std::vector<VisSample>& samples, int k, int iters) {
    if (k < 1) throw std::invalid_argument("fit_visibility_sg: need k >= 1");
    if (samples.empty()) throw std::invalid_argument("fit_visibility_sg: no samples");
    const std::size_t n = samples.size();

    double vmean = 0.0, vmin = 1e300, vmax = -1e300;
    Vec3 mean_dir{0, 0, 0};
    Vec3 weighted{0, 0, 0};
    for (const VisSample& s : samples) {
        vmean += s.v;
        vmin = std::min(vmin, s.v);
        vmax = std::max(vmax, s.v);
        mean_dir += s.omega;
        weighted += s.omega * s.v;
    }
    vmean /= static_cast<double>(n);
    mean_dir = mean_dir / static_cast<double>(n);

    // Degenerate cases: too few samples for k lobes, directions clustered in
    // one cap, or visibility already constant. A constant lobe is exact for
    // the last case and the safest answer for the others.
    bool rank_deficient = n < static_cast<std::size_t>(4 * k) || length(mean_dir) > 0.9;
    if (rank_deficient || vmax - vmin < 0.02) return constant_fallback(vmean, k);

    // Structured start: one wide lobe toward the visibility-weighted mean
    // direction, the rest on a ring around it.
    Vec3 nhat = length(weighted) > 1e-6 ? normalize(weighted) : Vec3{0, 0, 1};
    FitParams p;
    p.axis.resize(k);
    p.sharp.resize(k);
    p.amp.resize(k);
    p.axis[0] = nhat;
    p.sharp[0] = 1.5;
    p.amp[0] = std::clamp(4.0 * vmean, 0.05, 4.0);
    Vec3 t1, t2;
    sggx::build_onb(nhat, t1, t2);
    const double beta = 1.0;
    for (int l = 1; l < k; ++l) {
        double alpha = 2.0 * kPi * (l - 1) / std::max(1, k - 1);
        p.axis[l] = normalize(nhat * std::cos(beta) +
                              (t1 * std::cos(alpha) + t2 * std::sin(alpha)) * std::sin(beta));
        p.sharp[l] = 3.0;
        p.amp[l] = std::clamp(1.6 * vmean, 0.0, 4.0);
    }

    // Adam on a leaky-clamped squared error: inside [0,1] the residual is the
    // plain one; outside, the prediction is flattened to slope kLeak before
    // the residual is taken. Use sites clamp the lobe sum to [0,1], and a hard
    // clamp in the objective would have zero gradient exactly where overshoot
    // hurts (dark samples under a raw sum above 1). The leak keeps a steady
    // pull there while letting fully lit regions saturate, which a bounded
    // least-squares fit cannot do on a 0/1 step. Fixed iteration count and no
    // randomness, so the fit is a pure function of the samples.
    const double kLeak = 0.1;
    const double lr = 0.08, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<Vec3> m_ax(k, Vec3{0, 0, 0}), v_ax(k, Vec3{0, 0, 0});
    std::vector<double> m_sh(k, 0.0), v_sh(k, 0.0), m_am(k, 0.0), v_am(k, 0.0);
    std::vector<double> e_buf(static_cast<std::size_t>(k));
    for (int it = 1; it <= iters; ++it) {
        std::vector<Vec3> g_ax(k, Vec3{0, 0, 0});
        std::vector<double> g_sh(k, 0.0), g_am(k, 0.0);
        for (const VisSample& s : samples) {
            double f = 0.0;
            for (int l = 0; l < k; ++l) {
                e_buf[l] = std::exp(p.sharp[l] * (dot(s.omega, p.axis[l]) - 1.0));
                f += p.amp[l] * e_buf[l];
            }
            double fc = f, slope = 1.0;
            if (f > 1.0) {
                fc = 1.0 + kLeak * (f - 1.0);
                slope = kLeak;
            }
            double df = 2.0 * (fc - s.v) * slope / static_cast<double>(n);
            if (df == 0.0) continue;
            for (int l = 0; l < k; ++l) {
                double c = dot(s.omega, p.axis[l]);
                g_am[l] += df * e_buf[l];
                g_sh[l] += df * p.amp[l] * e_buf[l] * (c - 1.0);
                Vec3 d_axis = (s.omega - p.axis[l] * c) * (p.amp[l] * e_buf[l] * p.sharp[l]);
                g_ax[l] += d_axis * df;
            }
        }
        double c1 = 1.0 - std::pow(b1, it), c2 = 1.0 - std::pow(b2, it);
        for (int l = 0; l < k; ++l) {
            m_am[l] = b1 * m_am[l] + (1 - b1) * g_am[l];
            v_am[l] = b2 * v_am[l] + (1 - b2) * g_am[l] * g_am[l];
            p.amp[l] -= lr * (m_am[l] / c1) / (std::sqrt(v_am[l] / c2) + eps);
            m_sh[l] = b1 * m_sh[l] + (1 - b1) * g_sh[l];
            v_sh[l] = b2 * v_sh[l] + (1 - b2) * g_sh[l] * g_sh[l];
            p.sharp[l] -= lr * (m_sh[l] / c1) / (std::sqrt(v_sh[l] / c2) + eps);
            for (int a = 0; a < 3; ++a) {
                m_ax[l][a] = b1 * m_ax[l][a] + (1 - b1) * g_ax[l][a];
                v_ax[l][a] = b2 * v_ax[l][a] + (1 - b2) * g_ax[l][a] * g_ax[l][a];
                p.axis[l][a] -= lr * (m_ax[l][a] / c1) / (std::sqrt(v_ax[l][a] / c2) + eps);
            }
            p.amp[l] = std::clamp(p.amp[l], 0.0, 4.0);
            p.sharp[l] = std::clamp(p.sharp[l], 1e-3, 60.0);
            double len = length(p.axis[l]);
            p.axis[l] = len > 1e-9 ? p.axis[l] / len : Vec3{0, 0, 1};
        }
    }

    std::vector<SgLobe> out(static_cast<std::size_t>(k));
    for (int l = 0; l < k; ++l)
        out[l] = SgLobe{p.axis[l], p.sharp[l], Vec3{p.amp[l], p.amp[l], p.amp[l]}};
    return out;
}

std::size_t VisibilityField::voxel_of(const Vec3& x) const {
    Vec3 sp{(hi.x - lo.x) / res[0], (hi.y - lo.y) / res[1], (hi.z - lo.z) / res[2]};
    int i[3];
    for (int a = 0; a < 3; ++a) {
        int v = static_cast<int>(std::floor((x[a] - lo[a]) / sp[a]));
        i[a] = std::clamp(v, 0, res[a] - 1);
    }
    return (static_cast<std::size_t>(i[2]) * res[1] + i[1]) * res[0] + i[0];
}

VisibilityField fit_visibility_field(const field::VolumeGrid& grid,
                                     const std::vector<Vec3>& spec_dirs,
                                     const VisibilityFitSettings& settings) {
    if (spec_dirs.size() > 32)
        throw std::invalid_argument("fit_visibility_field: at most 32 specular directions");
    VisibilityField out;
    out.res[0] = grid.res[0];
    out.res[1] = grid.res[1];
    out.res[2] = grid.res[2];
    out.lo = grid.lo;
    out.hi = grid.hi;
    out.k_v = settings.k_v;
    out.lobes.resize(out.voxel_count() * settings.k_v);
    out.spec_mask.assign(out.voxel_count(), 0u);

    const auto dirs = fibonacci_sphere(settings.sample_dirs);
    parallel_chunks(out.voxel_count(), 64, settings.threads,
                    [&](std::size_t, std::size_t b, std::size_t e) {
        std::vector<VisSample> samples(dirs.size());
        for (std::size_t vox = b; vox < e; ++vox) {
            std::size_t iz = vox / (static_cast<std::size_t>(grid.res[0]) * grid.res[1]);
            std::size_t rem = vox - iz * grid.res[0] * grid.res[1];
            std::size_t iy = rem / grid.res[0];
            std::size_t ix = rem - iy * grid.res[0];
            Vec3 x = grid.voxel_center(static_cast<int>(ix), static_cast<int>(iy),
                                       static_cast<int>(iz));
            for (std::size_t d = 0; d < dirs.size(); ++d)
                samples[d] = VisSample{dirs[d],
                                       compute_visibility(grid, x, dirs[d], settings.march_step)};
            auto lobes = fit_visibility_sg(samples, settings.k_v, settings.fit_iters);
            std::copy(lobes.begin(), lobes.end(), out.lobes.begin() + vox * settings.k_v);
            std::uint32_t mask = 0;
            std::span<const SgLobe> span{out.lobes.data() + vox * settings.k_v,
                                         static_cast<std::size_t>(settings.k_v)};
            for (std::size_t d = 0; d < spec_dirs.size(); ++d)
                if (vis_eval(span, spec_dirs[d]) >= settings.spec_threshold)
                    mask |= 1u << d;
            out.spec_mask[vox] = mask;
        }
    });
    return out;
}

Vec3 diffuse_shade(const Vec3& albedo, const Vec3& omega_m, const EnvLight& env,
                   std::span<const SgLobe> vis) {
    Vec3 shade{0, 0, 0};
    for (const SgLobe& v : vis) {
        if (v.amplitude.x <= 0.0) continue;
        for (const SgLobe& j : env.lobes) {
            SgTriple t = sg_triple_product(v.axis, v.sharpness, j.axis, j.sharpness, omega_m);
            shade += j.amplitude * (v.amplitude.x * kCosAmplitude * t.value);
        }
    }
    return albedo * shade / kPi;
}

EnvLight load_env_sg(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open environment file: " + path);
    EnvLight env;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        double ax, ay, az, sharp, mr, mg, mb;
        if (!(ss >> ax)) continue;  // blank or comment-only line
        if (!(ss >> ay >> az >> sharp >> mr >> mg >> mb))
            throw std::runtime_error("environment parse error at " + path + ":" +
                                     std::to_string(lineno) + " (need 7 numbers per lobe)");
        std::string extra;
        if (ss >> extra)
            throw std::runtime_error("environment parse error at " + path + ":" +
                                     std::to_string(lineno) + " (trailing tokens)");
        Vec3 axis{ax, ay, az};
        double len = length(axis);
        if (len < 1e-9 || !is_finite(axis))
            throw std::runtime_error("environment parse error at " + path + ":" +
                                     std::to_string(lineno) + " (degenerate axis)");
        if (std::abs(len - 1.0) > 1e-9) axis = axis / len;
        if (!(sharp >= 0.0))
            throw std::runtime_error("environment parse error at " + path + ":" +
                                     std::to_string(lineno) + " (sharpness must be >= 0)");
        if (mr < 0.0 || mg < 0.0 || mb < 0.0)
            throw std::runtime_error("environment parse error at " + path + ":" +
                                     std::to_string(lineno) + " (negative amplitude)");
        env.lobes.push_back(SgLobe{axis, sharp, Vec3{mr, mg, mb}});
    }
    if (env.lobes.empty())
        throw std::runtime_error("environment file has no lobes: " + path);
    return env;
}

void save_env_sg(const EnvLight& env, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write environment file: " + path);
    out << "# axis_x axis_y axis_z sharpness mu_r mu_g mu_b\n";
    char buf[512];
    for (const SgLobe& l : env.lobes) {
        std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                      l.axis.x, l.axis.y, l.axis.z, l.sharpness, l.amplitude.x, l.amplitude.y,
                      l.amplitude.z);
        out << buf;
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace flakevol::lighting
