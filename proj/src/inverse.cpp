#include "flakevol/inverse.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "flakevol/detail/scatter.hpp"
#include "flakevol/parallel.hpp"
#include "flakevol/rng.hpp"
#include "flakevol/sggx.hpp"
#include "json.hpp"

namespace flakevol::inverse {

namespace {

constexpr double kPi = 3.14159265358979323846;

double d_penalty(double dotmi, OrientationPenalty p, Vec3& dpen_dm, const Vec3& omega_i) {
    if (p == OrientationPenalty::back_facing) {
        if (dotmi < 0.0) {
            dpen_dm = -omega_i;
            return -dotmi;
        }
    } else {
        if (dotmi > 0.0) {
            dpen_dm = omega_i;
            return dotmi;
        }
    }
    dpen_dm = Vec3{0, 0, 0};
    return 0.0;
}

// J^T of m = n / |n| applied to an upstream gradient.
Vec3 through_normalize(const Vec3& m, double len, const Vec3& m_bar) {
    if (len <= 1e-9) return Vec3{0, 0, 0};
    return (m_bar - m * dot(m, m_bar)) / len;
}

double batch_psnr(double l_c) {
    if (l_c <= 0.0) return 999.0;
    return std::min(999.0, -10.0 * std::log10(l_c / 3.0));
}

}  // namespace

void GradientBuffer::resize(const field::VolumeGrid& grid, int latent_dim, std::size_t lobes) {
    density.assign(grid.voxel_count(), 0.0);
    normal.assign(grid.voxel_count() * 3, 0.0);
    latent.assign(grid.voxel_count() * latent_dim, 0.0);
    dec_w.assign(4 * static_cast<std::size_t>(latent_dim), 0.0);
    std::fill(std::begin(dec_b), std::end(dec_b), 0.0);
    light_lambda.assign(lobes, 0.0);
    light_mu.assign(lobes * 3, 0.0);
}

void GradientBuffer::clear() {
    std::fill(density.begin(), density.end(), 0.0);
    std::fill(normal.begin(), normal.end(), 0.0);
    std::fill(latent.begin(), latent.end(), 0.0);
    std::fill(dec_w.begin(), dec_w.end(), 0.0);
    std::fill(std::begin(dec_b), std::end(dec_b), 0.0);
    std::fill(light_lambda.begin(), light_lambda.end(), 0.0);
    std::fill(light_mu.begin(), light_mu.end(), 0.0);
}

void GradientBuffer::add(const GradientBuffer& o) {
    auto axpy = [](std::vector<double>& a, const std::vector<double>& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    axpy(density, o.density);
    axpy(normal, o.normal);
    axpy(latent, o.latent);
    axpy(dec_w, o.dec_w);
    for (int c = 0; c < 4; ++c) dec_b[c] += o.dec_b[c];
    axpy(light_lambda, o.light_lambda);
    axpy(light_mu, o.light_mu);
}

double loss_photometric(std::span<const Vec3> rendered, std::span<const Vec3> target) {
    if (rendered.size() != target.size())
        throw std::invalid_argument("loss_photometric: size mismatch");
    if (rendered.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < rendered.size(); ++i)
        acc += length_squared(rendered[i] - target[i]);
    return acc / static_cast<double>(rendered.size());
}

double loss_density_normal(const field::VolumeGrid& grid, std::span<const TraceView> traces,
                           OrientationPenalty penalty) {
    if (traces.empty()) return 0.0;
    double acc = 0.0;
    for (const TraceView& tv : traces) {
        for (const renderer::RadianceSample& s : *tv.samples) {
            field::GradNormal gn = field::density_gradient_normal(grid, s.position);
            if (gn.degenerate) continue;
            field::TriStencil st = field::make_stencil(grid, s.position);
            if (!st.inside) continue;
            Vec3 n = field::sample_raw_normal(grid, st);
            double len = length(n);
            Vec3 m = len > 1e-9 ? n / len : Vec3{0, 0, 1};
            double dotmi = dot(m, tv.omega_i);
            Vec3 unused;
            double pen = d_penalty(dotmi, penalty, unused, tv.omega_i);
            acc += s.transmittance * (length_squared(m - gn.n) + pen);
        }
    }
    return acc / static_cast<double>(traces.size());
}

double loss_sparsity(std::span<const double> activations, int k, double rho) {
    if (k < 1) throw std::invalid_argument("loss_sparsity: k must be >= 1");
    if (activations.size() % k != 0)
        throw std::invalid_argument("loss_sparsity: size not a multiple of k");
    std::size_t n = activations.size() / k;
    if (n == 0) return 0.0;
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += activations[i * k + j];
        mean /= static_cast<double>(n);
        double r = std::clamp(mean, 1e-6, 1.0 - 1e-6);
        total += rho * std::log(rho / r) + (1.0 - rho) * std::log((1.0 - rho) / (1.0 - r));
    }
    return total;
}

double loss_smoothness(const field::VolumeGrid& grid, const field::AppearanceDecoder& dec,
                       std::span<const Vec3> points, double eps_sigma, std::uint64_t seed) {
    if (eps_sigma == 0.0 || points.empty()) return 0.0;
    const int k = grid.latent_dim;
    std::vector<double> z1(k), z2(k);
    double acc = 0.0;
    std::size_t valid = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        Vec3 ex{rng_gauss(seed, rng_stream::smooth_eps, i, 0),
                rng_gauss(seed, rng_stream::smooth_eps, i, 1),
                rng_gauss(seed, rng_stream::smooth_eps, i, 2)};
        ex *= eps_sigma;
        field::TriStencil st1 = field::make_stencil(grid, points[i]);
        field::TriStencil st2 = field::make_stencil(grid, points[i] + ex);
        if (!st1.inside || !st2.inside) continue;
        ++valid;

        Vec3 n1 = field::sample_raw_normal(grid, st1);
        Vec3 n2 = field::sample_raw_normal(grid, st2);
        double len1 = length(n1), len2 = length(n2);
        Vec3 m1 = len1 > 1e-9 ? n1 / len1 : Vec3{0, 0, 1};
        Vec3 m2 = len2 > 1e-9 ? n2 / len2 : Vec3{0, 0, 1};
        Vec3 dn = m1 - m2;
        acc += std::abs(dn.x) + std::abs(dn.y) + std::abs(dn.z);

        field::sample_latent(grid, st1, z1.data());
        for (int j = 0; j < k; ++j)
            z2[j] = z1[j] + eps_sigma * rng_gauss(seed, rng_stream::smooth_eps, i, 3 + j);
        Vec3 a1, a2;
        double tau1, tau2;
        field::decode_appearance(dec, z1.data(), a1, tau1);
        field::decode_appearance(dec, z2.data(), a2, tau2);
        Vec3 da = a1 - a2;
        acc += std::abs(da.x) + std::abs(da.y) + std::abs(da.z) + std::abs(tau1 - tau2);
    }
    return valid ? acc / static_cast<double>(valid) : 0.0;
}

LossBreakdown total_loss(double l_c, double l_sigma, double l_z, double l_s,
                         const LossWeights& w) {
    LossBreakdown b;
    b.l_c = l_c;
    b.l_sigma = l_sigma;
    b.l_z = l_z;
    b.l_s = l_s;
    b.total = w.w_c * l_c + w.w_sigma * l_sigma + w.w_z * l_z + w.w_s * l_s;
    return b;
}

namespace {

// Everything the per-sample adjoint needs that is constant over a backward
// call: light context, per-(direction, lobe) light basis, resolver.
struct BackwardContext {
    renderer::detail::LightContext lc;
    const renderer::VisibilityResolver* resolver;
    std::vector<double> basis;  // dirs x lobes: exp(lambda_l (xi_d . xi_l - 1))
    std::size_t n_lobes = 0;
};

BackwardContext make_backward_context(const Scene& scene,
                                      const renderer::VisibilityResolver& resolver) {
    BackwardContext ctx;
    ctx.lc = renderer::detail::make_light_context(*scene.env, scene.settings);
    ctx.resolver = &resolver;
    ctx.n_lobes = scene.env->lobes.size();
    ctx.basis.resize(ctx.lc.dirs.size() * ctx.n_lobes);
    for (std::size_t d = 0; d < ctx.lc.dirs.size(); ++d)
        for (std::size_t l = 0; l < ctx.n_lobes; ++l) {
            const auto& lobe = scene.env->lobes[l];
            ctx.basis[d * ctx.n_lobes + l] =
                std::exp(lobe.sharpness * (dot(ctx.lc.dirs[d], lobe.axis) - 1.0));
        }
    return ctx;
}

// Adjoint of one recorded ray; accumulates into g.
void grad_ray(const Scene& scene, const BackwardContext& ctx, const RayAdjoint& ra,
              OrientationPenalty penalty, std::vector<double>& scratch, GradientBuffer& g) {
    const field::VolumeGrid& grid = *scene.grid;
    const field::AppearanceDecoder& dec = *scene.dec;
    const auto& trace = *ra.trace;
    const auto& w = scene.settings.weights;
    const int k_lat = grid.latent_dim;
    const Vec3 omega_i = -ra.ray.d;
    const double sw = ra.dl_dsigma;

    double suffix_c = 0.0;    // sum_{j>k} w_j (nu_j . dl_dc)
    double suffix_sig = 0.0;  // sum_{j>k} sw T_j (||m - gn||^2 + pen)_j
    std::vector<double> z(k_lat);

    for (std::size_t kk = trace.size(); kk-- > 0;) {
        const renderer::RadianceSample& s = trace[kk];
        const double delta = s.delta;
        const double t_k = s.transmittance;
        const double e_k = std::exp(-s.sigma * delta);
        const double w_k = t_k * (1.0 - e_k);
        const double nudot = dot(s.radiance, ra.dl_dc);

        double sigma_bar = delta * (t_k * e_k * nudot - suffix_c) - delta * suffix_sig;
        suffix_c += w_k * nudot;

        field::TriStencil st = field::make_stencil(grid, s.position);
        if (!st.inside) continue;

        double raw_d = field::sample_raw_density(grid, st);
        Vec3 n_t = field::sample_raw_normal(grid, st);
        double n_len = length(n_t);
        Vec3 m = n_len > 1e-9 ? n_t / n_len : Vec3{0, 0, 1};
        field::sample_latent(grid, st, z.data());
        Vec3 albedo;
        double tau;
        field::decode_appearance(dec, z.data(), albedo, tau);

        Vec3 m_bar{0, 0, 0};
        Vec3 a_bar{0, 0, 0};
        double tau_bar = 0.0;
        const Vec3 nu_bar = ra.dl_dc * w_k;
        const bool want_scatter = w_k > 1e-12 && (std::abs(nu_bar.x) + std::abs(nu_bar.y) +
                                                  std::abs(nu_bar.z)) > 0.0;

        if (want_scatter) {
            renderer::PointVisibility pv = ctx.resolver->at(s.position, scratch.data());
            const auto& env_lobes = scene.env->lobes;

            if (w.w_diffuse > 0.0) {
                Vec3 shade{0, 0, 0};
                Vec3 common = nu_bar * (w.w_diffuse / kPi) * albedo;
                for (const lighting::SgLobe& v : pv.lobes) {
                    if (v.amplitude.x <= 0.0) continue;
                    for (std::size_t j = 0; j < env_lobes.size(); ++j) {
                        lighting::SgTriple t3 = lighting::sg_triple_product(
                            v.axis, v.sharpness, env_lobes[j].axis, env_lobes[j].sharpness, m);
                        double base = v.amplitude.x * lighting::kCosAmplitude;
                        if (pv.lobe_scale) base *= pv.lobe_scale[j];
                        shade += env_lobes[j].amplitude * (base * t3.value);
                        double cj = dot(common, env_lobes[j].amplitude);
                        g.light_mu[j * 3 + 0] += common.x * base * t3.value;
                        g.light_mu[j * 3 + 1] += common.y * base * t3.value;
                        g.light_mu[j * 3 + 2] += common.z * base * t3.value;
                        g.light_lambda[j] += cj * base * t3.d_lambda_b;
                        m_bar += t3.d_n * (cj * base);
                    }
                }
                a_bar += nu_bar * shade * (w.w_diffuse / kPi);
            }

            if (w.w_specular > 0.0 && !ctx.lc.dirs.empty()) {
                const double t2 = tau * tau;
                const double c_i = dot(omega_i, m);
                const double pa = std::sqrt(t2 + (1.0 - t2) * c_i * c_i);
                double pa_bar = 0.0;
                const double spec_scale = w.w_specular * ctx.lc.domega;
                for (std::size_t d = 0; d < ctx.lc.dirs.size(); ++d) {
                    if (!(pv.spec_mask >> d & 1u)) continue;
                    Vec3 h = omega_i + ctx.lc.dirs[d];
                    double h_len = length(h);
                    if (h_len < 1e-9) continue;
                    h = h / h_len;
                    const double c_h = dot(h, m);
                    const double q = 1.0 / t2 + (1.0 - 1.0 / t2) * c_h * c_h;
                    const double nd = 1.0 / (kPi * t2 * q * q);
                    const double f = nd / (4.0 * pa);

                    const Vec3 ld = ctx.lc.light[d];
                    const double f_bar = dot(nu_bar, ld) * spec_scale;

                    const double nd_bar = f_bar / (4.0 * pa);
                    pa_bar -= f_bar * f / pa;
                    const double dd_dch = -4.0 * nd * c_h * (1.0 - 1.0 / t2) / q;
                    m_bar += h * (nd_bar * dd_dch);
                    const double dq_dtau = (2.0 / (t2 * tau)) * (c_h * c_h - 1.0);
                    tau_bar += nd_bar * (-2.0 * nd / tau - (2.0 * nd / q) * dq_dtau);

                    // light parameters via L_d = sum_l mu_l basis_dl
                    const double coef = spec_scale * f;
                    const double* basis_d = ctx.basis.data() + d * ctx.n_lobes;
                    for (std::size_t l = 0; l < ctx.n_lobes; ++l) {
                        const auto& lob = env_lobes[l];
                        double b = basis_d[l];
                        g.light_mu[l * 3 + 0] += nu_bar.x * coef * b;
                        g.light_mu[l * 3 + 1] += nu_bar.y * coef * b;
                        g.light_mu[l * 3 + 2] += nu_bar.z * coef * b;
                        g.light_lambda[l] += dot(nu_bar, lob.amplitude) * coef * b *
                                             (dot(ctx.lc.dirs[d], lob.axis) - 1.0);
                    }
                }
                if (pa_bar != 0.0) {
                    m_bar += omega_i * (pa_bar * (1.0 - t2) * c_i / pa);
                    tau_bar += pa_bar * tau * (1.0 - c_i * c_i) / pa;
                }
            }
        }

        // Density-normal loss terms at this sample.
        if (sw != 0.0) {
            field::GradNormal gn = field::density_gradient_normal(grid, s.position);
            if (!gn.degenerate) {
                Vec3 diff = m - gn.n;
                Vec3 dpen_dm;
                double pen = d_penalty(dot(m, omega_i), penalty, dpen_dm, omega_i);
                suffix_sig += sw * t_k * (length_squared(diff) + pen);
                m_bar += (diff * 2.0 + dpen_dm) * (sw * t_k);

                // gn = -grad / |grad|; push -2 sw T_k diff through it into the
                // six central-difference stencils.
                Vec3 gn_bar = diff * (-2.0 * sw * t_k);
                Vec3 sp = grid.spacing();
                Vec3 grad;
                field::TriStencil stp[3], stm[3];
                double rawp[3], rawm[3];
                for (int a = 0; a < 3; ++a) {
                    Vec3 xp = s.position, xm = s.position;
                    xp[a] += sp[a];
                    xm[a] -= sp[a];
                    stp[a] = field::make_stencil(grid, xp);
                    stm[a] = field::make_stencil(grid, xm);
                    rawp[a] = field::sample_raw_density(grid, stp[a]);
                    rawm[a] = field::sample_raw_density(grid, stm[a]);
                    double dp = stp[a].inside ? field::softplus(rawp[a]) : 0.0;
                    double dm = stm[a].inside ? field::softplus(rawm[a]) : 0.0;
                    grad[a] = (dp - dm) / (2.0 * sp[a]);
                }
                double glen = length(grad);
                if (glen >= 1e-8) {
                    Vec3 u = grad / (-glen);
                    Vec3 grad_bar = (gn_bar - u * dot(u, gn_bar)) / (-glen);
                    for (int a = 0; a < 3; ++a) {
                        double sig_p = grad_bar[a] / (2.0 * sp[a]);
                        double sig_m = -grad_bar[a] / (2.0 * sp[a]);
                        if (stp[a].inside) {
                            double act = field::softplus_deriv(rawp[a]);
                            for (int c = 0; c < 8; ++c)
                                g.density[stp[a].idx[c]] += sig_p * act * stp[a].w[c];
                        }
                        if (stm[a].inside) {
                            double act = field::softplus_deriv(rawm[a]);
                            for (int c = 0; c < 8; ++c)
                                g.density[stm[a].idx[c]] += sig_m * act * stm[a].w[c];
                        }
                    }
                }
            }
        }

        // omega_m -> raw normal corners.
        Vec3 n_bar = through_normalize(m, n_len, m_bar);
        if (n_bar.x != 0.0 || n_bar.y != 0.0 || n_bar.z != 0.0)
            for (int c = 0; c < 8; ++c) {
                std::size_t b = 3 * st.idx[c];
                g.normal[b + 0] += st.w[c] * n_bar.x;
                g.normal[b + 1] += st.w[c] * n_bar.y;
                g.normal[b + 2] += st.w[c] * n_bar.z;
            }

        // albedo/tau -> decoder and latent corners.
        if (a_bar.x != 0.0 || a_bar.y != 0.0 || a_bar.z != 0.0 || tau_bar != 0.0) {
            double y_bar[4];
            y_bar[0] = a_bar.x * albedo.x * (1.0 - albedo.x);
            y_bar[1] = a_bar.y * albedo.y * (1.0 - albedo.y);
            y_bar[2] = a_bar.z * albedo.z * (1.0 - albedo.z);
            // tau = max(sigmoid(y3), floor): zero slope on the floor.
            y_bar[3] = tau > field::kTauFloor ? tau_bar * tau * (1.0 - tau) : 0.0;
            for (int c = 0; c < 4; ++c) {
                if (y_bar[c] == 0.0) continue;
                g.dec_b[c] += y_bar[c];
                const float* wrow = dec.weight.data() + c * k_lat;
                for (int j = 0; j < k_lat; ++j) g.dec_w[c * k_lat + j] += y_bar[c] * z[j];
                for (int cc = 0; cc < 8; ++cc) {
                    double wt = st.w[cc] * y_bar[c];
                    if (wt == 0.0) continue;
                    std::size_t b = st.idx[cc] * k_lat;
                    for (int j = 0; j < k_lat; ++j)
                        g.latent[b + j] += wt * static_cast<double>(wrow[j]);
                }
            }
        }

        // sigma -> raw density corners.
        if (sigma_bar != 0.0) {
            double act = field::softplus_deriv(raw_d);
            for (int c = 0; c < 8; ++c) g.density[st.idx[c]] += sigma_bar * act * st.w[c];
        }
    }
}

}  // namespace

GradientBuffer backward(const Scene& scene, std::span<const RayAdjoint> rays,
                        OrientationPenalty penalty, int threads) {
    if (!scene.grid || !scene.dec || !scene.env)
        throw std::logic_error("backward: scene is missing grid, decoder, or light");
    if (scene.settings.albedo_remap)
        throw std::logic_error("backward: albedo remap is render-only");
    for (const RayAdjoint& ra : rays)
        if (!ra.trace) throw std::logic_error("backward: ray without a recorded trace");

    renderer::detail::LightContext lc0 =
        renderer::detail::make_light_context(*scene.env, scene.settings);
    renderer::VisibilityResolver resolver(scene.settings.vis_mode, scene.vis, scene.grid,
                                          scene.env, lc0.dirs, scene.settings.vis_step,
                                          scene.settings.spec_threshold);
    BackwardContext ctx = make_backward_context(scene, resolver);

    const std::size_t chunk = 64;
    std::size_t n_chunks = rays.empty() ? 0 : (rays.size() + chunk - 1) / chunk;
    std::vector<GradientBuffer> partial(n_chunks);
    parallel_chunks(rays.size(), chunk, threads, [&](std::size_t c, std::size_t b, std::size_t e) {
        GradientBuffer& g = partial[c];
        g.resize(*scene.grid, scene.grid->latent_dim, scene.env->lobes.size());
        std::vector<double> scratch(scene.env->lobes.size());
        for (std::size_t i = b; i < e; ++i)
            grad_ray(scene, ctx, rays[i], penalty, scratch, g);
    });

    GradientBuffer g;
    g.resize(*scene.grid, scene.grid->latent_dim, scene.env->lobes.size());
    for (auto& p : partial) g.add(p);  // chunk order: thread-count independent
    return g;
}

void add_sparsity_gradient(const field::VolumeGrid& grid, double w_z, double rho,
                           GradientBuffer& g) {
    if (w_z == 0.0) return;
    const int k = grid.latent_dim;
    const std::size_t n = grid.voxel_count();
    std::vector<double> mean(k, 0.0);
    for (std::size_t v = 0; v < n; ++v)
        for (int j = 0; j < k; ++j) mean[j] += field::sigmoid(grid.latent[v * k + j]);
    for (int j = 0; j < k; ++j) mean[j] /= static_cast<double>(n);
    std::vector<double> dkl(k, 0.0);
    for (int j = 0; j < k; ++j) {
        if (mean[j] <= 1e-6 || mean[j] >= 1.0 - 1e-6) continue;  // clamped: flat
        dkl[j] = (-rho / mean[j] + (1.0 - rho) / (1.0 - mean[j])) / static_cast<double>(n);
    }
    for (std::size_t v = 0; v < n; ++v)
        for (int j = 0; j < k; ++j) {
            double a = field::sigmoid(grid.latent[v * k + j]);
            g.latent[v * k + j] += w_z * dkl[j] * a * (1.0 - a);
        }
}

void add_smoothness_gradient(const field::VolumeGrid& grid, const field::AppearanceDecoder& dec,
                             std::span<const Vec3> points, double eps_sigma, std::uint64_t seed,
                             double w_s, GradientBuffer& g) {
    if (w_s == 0.0 || eps_sigma == 0.0 || points.empty()) return;
    const int k = grid.latent_dim;
    std::vector<double> z1(k), z2(k);

    // Valid count must match the loss normalization, so count first.
    std::size_t valid = 0;
    std::vector<char> ok(points.size(), 0);
    std::vector<Vec3> exs(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        exs[i] = Vec3{rng_gauss(seed, rng_stream::smooth_eps, i, 0),
                      rng_gauss(seed, rng_stream::smooth_eps, i, 1),
                      rng_gauss(seed, rng_stream::smooth_eps, i, 2)} *
                 eps_sigma;
        field::TriStencil st1 = field::make_stencil(grid, points[i]);
        field::TriStencil st2 = field::make_stencil(grid, points[i] + exs[i]);
        if (st1.inside && st2.inside) {
            ok[i] = 1;
            ++valid;
        }
    }
    if (!valid) return;
    const double scale = w_s / static_cast<double>(valid);
    auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };

    for (std::size_t i = 0; i < points.size(); ++i) {
        if (!ok[i]) continue;
        field::TriStencil st1 = field::make_stencil(grid, points[i]);
        field::TriStencil st2 = field::make_stencil(grid, points[i] + exs[i]);

        Vec3 n1 = field::sample_raw_normal(grid, st1);
        Vec3 n2 = field::sample_raw_normal(grid, st2);
        double len1 = length(n1), len2 = length(n2);
        Vec3 m1 = len1 > 1e-9 ? n1 / len1 : Vec3{0, 0, 1};
        Vec3 m2 = len2 > 1e-9 ? n2 / len2 : Vec3{0, 0, 1};
        Vec3 dn = m1 - m2;
        Vec3 sgn{sign(dn.x), sign(dn.y), sign(dn.z)};
        Vec3 nb1 = through_normalize(m1, len1, sgn * scale);
        Vec3 nb2 = through_normalize(m2, len2, sgn * (-scale));
        for (int c = 0; c < 8; ++c) {
            std::size_t b1 = 3 * st1.idx[c], b2 = 3 * st2.idx[c];
            g.normal[b1 + 0] += st1.w[c] * nb1.x;
            g.normal[b1 + 1] += st1.w[c] * nb1.y;
            g.normal[b1 + 2] += st1.w[c] * nb1.z;
            g.normal[b2 + 0] += st2.w[c] * nb2.x;
            g.normal[b2 + 1] += st2.w[c] * nb2.y;
            g.normal[b2 + 2] += st2.w[c] * nb2.z;
        }

        field::sample_latent(grid, st1, z1.data());
        for (int j = 0; j < k; ++j)
            z2[j] = z1[j] + eps_sigma * rng_gauss(seed, rng_stream::smooth_eps, i, 3 + j);
        Vec3 a1, a2;
        double tau1, tau2;
        field::decode_appearance(dec, z1.data(), a1, tau1);
        field::decode_appearance(dec, z2.data(), a2, tau2);
        double y1_bar[4], y2_bar[4];
        Vec3 da = a1 - a2;
        y1_bar[0] = sign(da.x) * scale * a1.x * (1.0 - a1.x);
        y1_bar[1] = sign(da.y) * scale * a1.y * (1.0 - a1.y);
        y1_bar[2] = sign(da.z) * scale * a1.z * (1.0 - a1.z);
        y1_bar[3] = tau1 > field::kTauFloor ? sign(tau1 - tau2) * scale * tau1 * (1.0 - tau1) : 0.0;
        y2_bar[0] = -sign(da.x) * scale * a2.x * (1.0 - a2.x);
        y2_bar[1] = -sign(da.y) * scale * a2.y * (1.0 - a2.y);
        y2_bar[2] = -sign(da.z) * scale * a2.z * (1.0 - a2.z);
        y2_bar[3] = tau2 > field::kTauFloor ? -sign(tau1 - tau2) * scale * tau2 * (1.0 - tau2) : 0.0;
        for (int c = 0; c < 4; ++c) {
            g.dec_b[c] += y1_bar[c] + y2_bar[c];
            const float* wrow = dec.weight.data() + c * k;
            for (int j = 0; j < k; ++j) {
                g.dec_w[c * k + j] += y1_bar[c] * z1[j] + y2_bar[c] * z2[j];
                // z2 = z1 + eps: both decode paths pull on the same latent.
                double zb = (y1_bar[c] + y2_bar[c]) * static_cast<double>(wrow[j]);
                for (int cc = 0; cc < 8; ++cc)
                    g.latent[st1.idx[cc] * k + j] += st1.w[cc] * zb;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Config and history files
// ---------------------------------------------------------------------------

namespace {

std::string orientation_name(OrientationPenalty p) {
    return p == OrientationPenalty::back_facing ? "back-facing" : "literal";
}

OrientationPenalty parse_orientation(const std::string& s) {
    if (s == "back-facing") return OrientationPenalty::back_facing;
    if (s == "literal") return OrientationPenalty::literal;
    throw std::runtime_error("unknown orientation penalty: " + s);
}

std::string vis_mode_name(renderer::VisibilityMode m) {
    switch (m) {
        case renderer::VisibilityMode::sg_fit: return "sg-fit";
        case renderer::VisibilityMode::marched: return "marched";
        case renderer::VisibilityMode::off: return "off";
    }
    return "sg-fit";
}

renderer::VisibilityMode parse_vis_mode(const std::string& s) {
    if (s == "sg-fit") return renderer::VisibilityMode::sg_fit;
    if (s == "marched") return renderer::VisibilityMode::marched;
    if (s == "off") return renderer::VisibilityMode::off;
    throw std::runtime_error("unknown visibility mode: " + s);
}

}  // namespace

OptimizeConfig load_optimize_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config parse error: " + path + ": " + e.what());
    }
    OptimizeConfig c;
    c.iterations = j.value("iterations", c.iterations);
    c.batch_rays = j.value("batch_rays", c.batch_rays);
    c.grid_res = j.value("grid_res", c.grid_res);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.lr_grid = j.value("lr_grid", c.lr_grid);
    c.lr_decoder = j.value("lr_decoder", c.lr_decoder);
    c.lr_light = j.value("lr_light", c.lr_light);
    c.weights.w_c = j.value("w_c", c.weights.w_c);
    c.weights.w_sigma = j.value("w_sigma", c.weights.w_sigma);
    c.weights.w_z = j.value("w_z", c.weights.w_z);
    c.weights.w_s = j.value("w_s", c.weights.w_s);
    c.rho = j.value("rho", c.rho);
    c.eps_sigma = j.value("eps_sigma", c.eps_sigma);
    c.smooth_points = j.value("smooth_points", c.smooth_points);
    c.stage1_iters = j.value("stage1_iters", c.stage1_iters);
    c.vis_refresh = j.value("vis_refresh", c.vis_refresh);
    c.light_free = j.value("light_free", c.light_free);
    c.steps_per_ray = j.value("steps_per_ray", c.steps_per_ray);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.resume_from = j.value("resume_from", c.resume_from);
    c.orientation = parse_orientation(j.value("orientation", orientation_name(c.orientation)));
    c.vis_fit.sample_dirs = j.value("vis_sample_dirs", c.vis_fit.sample_dirs);
    c.vis_fit.k_v = j.value("vis_k", c.vis_fit.k_v);
    c.vis_fit.fit_iters = j.value("vis_fit_iters", c.vis_fit.fit_iters);
    c.vis_fit.march_step = j.value("vis_march_step", c.vis_fit.march_step);
    c.vis_fit.spec_threshold = j.value("vis_spec_threshold", c.vis_fit.spec_threshold);
    c.vis_mode = parse_vis_mode(j.value("vis_mode", vis_mode_name(c.vis_mode)));
    return c;
}

void save_optimize_config(const OptimizeConfig& c, const std::string& path) {
    nlohmann::json j;
    j["iterations"] = c.iterations;
    j["batch_rays"] = c.batch_rays;
    j["grid_res"] = c.grid_res;
    j["latent_dim"] = c.latent_dim;
    j["lr_grid"] = c.lr_grid;
    j["lr_decoder"] = c.lr_decoder;
    j["lr_light"] = c.lr_light;
    j["w_c"] = c.weights.w_c;
    j["w_sigma"] = c.weights.w_sigma;
    j["w_z"] = c.weights.w_z;
    j["w_s"] = c.weights.w_s;
    j["rho"] = c.rho;
    j["eps_sigma"] = c.eps_sigma;
    j["smooth_points"] = c.smooth_points;
    j["stage1_iters"] = c.stage1_iters;
    j["vis_refresh"] = c.vis_refresh;
    j["light_free"] = c.light_free;
    j["steps_per_ray"] = c.steps_per_ray;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["checkpoint_every"] = c.checkpoint_every;
    j["checkpoint_dir"] = c.checkpoint_dir;
    j["resume_from"] = c.resume_from;
    j["orientation"] = orientation_name(c.orientation);
    j["vis_sample_dirs"] = c.vis_fit.sample_dirs;
    j["vis_k"] = c.vis_fit.k_v;
    j["vis_fit_iters"] = c.vis_fit.fit_iters;
    j["vis_march_step"] = c.vis_fit.march_step;
    j["vis_spec_threshold"] = c.vis_fit.spec_threshold;
    j["vis_mode"] = vis_mode_name(c.vis_mode);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

void save_history(const std::vector<HistoryRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write history: " + path);
    out << "iter,loss_c,loss_sigma,loss_z,loss_s,total,psnr\n";
    char buf[512];
    for (const HistoryRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iter, r.l_c,
                      r.l_sigma, r.l_z, r.l_s, r.total, r.psnr);
        out << buf;
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

namespace {

std::vector<HistoryRow> load_history(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open history: " + path);
    std::vector<HistoryRow> rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        HistoryRow r;
        if (std::sscanf(line.c_str(), "%d,%lg,%lg,%lg,%lg,%lg,%lg", &r.iter, &r.l_c, &r.l_sigma,
                        &r.l_z, &r.l_s, &r.total, &r.psnr) != 7)
            throw std::runtime_error("history parse error: " + path);
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Batch forward shared by loss evaluation and the gradient
// ---------------------------------------------------------------------------

struct BatchData {
    std::vector<renderer::Ray> rays;
    std::vector<std::vector<renderer::RadianceSample>> traces;
    std::vector<Vec3> colors;
    std::vector<Vec3> targets;
    std::vector<double> pix_weight;  // 0 for masked-out pixels
    std::vector<Vec3> smooth_pts;
    std::uint64_t smooth_seed = 0;
};

BatchData run_batch(const Scene& scene, const std::vector<TrainView>& views,
                    const BatchSpec& batch, int smooth_points) {
    if (views.empty()) throw std::invalid_argument("batch: no training views");
    BatchData bd;
    const int n = batch.batch_rays;
    bd.rays.resize(n);
    bd.traces.resize(n);
    bd.colors.resize(n);
    bd.targets.resize(n);
    bd.pix_weight.resize(n);
    for (int i = 0; i < n; ++i) {
        std::size_t v = rng_index(batch.seed, rng_stream::batch_pixels, batch.iter, 2 * i,
                                  views.size());
        const TrainView& tv = views[v];
        std::uint64_t n_pix =
            static_cast<std::uint64_t>(tv.camera.width) * tv.camera.height;
        std::uint64_t p =
            rng_index(batch.seed, rng_stream::batch_pixels, batch.iter, 2 * i + 1, n_pix);
        int px = static_cast<int>(p % tv.camera.width);
        int py = static_cast<int>(p / tv.camera.width);
        bd.rays[i] = renderer::generate_ray(tv.camera, px + 0.5, py + 0.5);
        bd.targets[i] = tv.image.get(px, py);
        bd.pix_weight[i] = 1.0;
        if (tv.mask && tv.mask->pixel(px, py)[0] < 0.5f) bd.pix_weight[i] = 0.0;
    }

    renderer::detail::LightContext lc =
        renderer::detail::make_light_context(*scene.env, scene.settings);
    renderer::VisibilityResolver resolver(scene.settings.vis_mode, scene.vis, scene.grid,
                                          scene.env, lc.dirs, scene.settings.vis_step,
                                          scene.settings.spec_threshold);
    parallel_chunks(static_cast<std::size_t>(n), 64, scene.settings.threads,
                    [&](std::size_t, std::size_t b, std::size_t e) {
        std::vector<double> scratch(scene.env->lobes.size());
        for (std::size_t i = b; i < e; ++i) {
            renderer::MarchResult r = renderer::march(*scene.grid, *scene.dec, bd.rays[i],
                                                      *scene.env, resolver, scene.settings, true);
            bd.colors[i] = r.color;
            bd.traces[i] = std::move(r.trace);
        }
    });

    // Interior smoothness probe points, one voxel of margin.
    bd.smooth_seed = rng_mix(batch.seed, batch.iter);
    bd.smooth_pts.reserve(std::max(0, smooth_points));
    Vec3 sp = scene.grid->spacing();
    for (int i = 0; i < smooth_points; ++i) {
        Vec3 x;
        for (int a = 0; a < 3; ++a) {
            double lo = scene.grid->lo[a] + sp[a], hi = scene.grid->hi[a] - sp[a];
            double u = rng_uniform(batch.seed, rng_stream::smooth_points, batch.iter, i, a);
            x[a] = lo + u * (hi - lo);
        }
        bd.smooth_pts.push_back(x);
    }
    return bd;
}

LossBreakdown losses_from_batch(const Scene& scene, const BatchData& bd,
                                const LossWeights& weights, OrientationPenalty penalty,
                                double rho, double eps_sigma) {
    double l_c = 0.0, wsum = 0.0;
    for (std::size_t i = 0; i < bd.colors.size(); ++i) {
        l_c += bd.pix_weight[i] * length_squared(bd.colors[i] - bd.targets[i]);
        wsum += bd.pix_weight[i];
    }
    l_c = wsum > 0.0 ? l_c / wsum : 0.0;

    double l_sigma = 0.0;
    if (weights.w_sigma != 0.0) {
        std::vector<TraceView> tvs(bd.traces.size());
        for (std::size_t i = 0; i < bd.traces.size(); ++i)
            tvs[i] = TraceView{&bd.traces[i], -bd.rays[i].d};
        l_sigma = loss_density_normal(*scene.grid, tvs, penalty);
    }

    double l_z = 0.0;
    if (weights.w_z != 0.0) {
        const auto& grid = *scene.grid;
        std::vector<double> act(grid.latent.size());
        for (std::size_t i = 0; i < act.size(); ++i)
            act[i] = field::sigmoid(grid.latent[i]);
        l_z = loss_sparsity(act, grid.latent_dim, rho);
    }

    double l_s = 0.0;
    if (weights.w_s != 0.0 && !bd.smooth_pts.empty())
        l_s = loss_smoothness(*scene.grid, *scene.dec, bd.smooth_pts, eps_sigma, bd.smooth_seed);

    return total_loss(l_c, l_sigma, l_z, l_s, weights);
}

}  // namespace

LossBreakdown eval_total_loss(const Scene& scene, const std::vector<TrainView>& views,
                              const BatchSpec& batch, const LossWeights& weights,
                              OrientationPenalty penalty, double rho, double eps_sigma,
                              int smooth_points) {
    BatchData bd = run_batch(scene, views, batch, weights.w_s != 0.0 ? smooth_points : 0);
    return losses_from_batch(scene, bd, weights, penalty, rho, eps_sigma);
}

GradientBuffer total_gradient(const Scene& scene, const std::vector<TrainView>& views,
                              const BatchSpec& batch, const LossWeights& weights,
                              OrientationPenalty penalty, double rho, double eps_sigma,
                              int smooth_points, LossBreakdown* breakdown) {
    BatchData bd = run_batch(scene, views, batch, weights.w_s != 0.0 ? smooth_points : 0);
    LossBreakdown losses = losses_from_batch(scene, bd, weights, penalty, rho, eps_sigma);
    if (breakdown) *breakdown = losses;

    double wsum = 0.0;
    for (double w : bd.pix_weight) wsum += w;
    std::vector<RayAdjoint> adjoints(bd.rays.size());
    for (std::size_t i = 0; i < bd.rays.size(); ++i) {
        adjoints[i].ray = bd.rays[i];
        adjoints[i].trace = &bd.traces[i];
        if (wsum > 0.0)
            adjoints[i].dl_dc = (bd.colors[i] - bd.targets[i]) *
                                (2.0 * weights.w_c * bd.pix_weight[i] / wsum);
        adjoints[i].dl_dsigma =
            weights.w_sigma != 0.0 ? weights.w_sigma / static_cast<double>(bd.rays.size()) : 0.0;
    }
    GradientBuffer g = backward(scene, adjoints, penalty, scene.settings.threads);
    add_sparsity_gradient(*scene.grid, weights.w_z, rho, g);
    add_smoothness_gradient(*scene.grid, *scene.dec, bd.smooth_pts, eps_sigma, bd.smooth_seed,
                            weights.w_s, g);
    return g;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

namespace {

struct AdamGroup {
    std::vector<double> m, v;
    std::int32_t t = 0;

    void init(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }
};

constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

// Parameters are stored float32 but stepped in double so a checkpoint and
// resume reproduce the arithmetic bit for bit.
void adam_step_f32(float* p, const double* g, std::size_t n, double lr, AdamGroup& a) {
    a.t += 1;
    double c1 = 1.0 - std::pow(kBeta1, a.t), c2 = 1.0 - std::pow(kBeta2, a.t);
    for (std::size_t i = 0; i < n; ++i) {
        a.m[i] = kBeta1 * a.m[i] + (1.0 - kBeta1) * g[i];
        a.v[i] = kBeta2 * a.v[i] + (1.0 - kBeta2) * g[i] * g[i];
        double step = lr * (a.m[i] / c1) / (std::sqrt(a.v[i] / c2) + kAdamEps);
        p[i] = static_cast<float>(static_cast<double>(p[i]) - step);
    }
}

void adam_step_f64(double* p, const double* g, std::size_t n, double lr, AdamGroup& a) {
    a.t += 1;
    double c1 = 1.0 - std::pow(kBeta1, a.t), c2 = 1.0 - std::pow(kBeta2, a.t);
    for (std::size_t i = 0; i < n; ++i) {
        a.m[i] = kBeta1 * a.m[i] + (1.0 - kBeta1) * g[i];
        a.v[i] = kBeta2 * a.v[i] + (1.0 - kBeta2) * g[i] * g[i];
        p[i] -= lr * (a.m[i] / c1) / (std::sqrt(a.v[i] / c2) + kAdamEps);
    }
}

struct OptState {
    AdamGroup density, normal, latent, decoder, light;
};

constexpr char kOptMagic[8] = {'F', 'L', 'A', 'K', 'E', 'O', 'P', 'T'};
constexpr char kVisMagic[8] = {'F', 'L', 'A', 'K', 'E', 'V', 'I', 'S'};

void write_group(std::ofstream& out, const AdamGroup& g) {
    out.write(reinterpret_cast<const char*>(&g.t), sizeof g.t);
    std::uint64_t n = g.m.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(reinterpret_cast<const char*>(g.m.data()), static_cast<std::streamsize>(n * 8));
    out.write(reinterpret_cast<const char*>(g.v.data()), static_cast<std::streamsize>(n * 8));
}

void read_group(std::ifstream& in, AdamGroup& g, std::size_t expect) {
    in.read(reinterpret_cast<char*>(&g.t), sizeof g.t);
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    if (!in || n != expect) throw std::runtime_error("optimizer state shape mismatch");
    g.m.resize(n);
    g.v.resize(n);
    in.read(reinterpret_cast<char*>(g.m.data()), static_cast<std::streamsize>(n * 8));
    in.read(reinterpret_cast<char*>(g.v.data()), static_cast<std::streamsize>(n * 8));
    if (!in) throw std::runtime_error("truncated optimizer state");
}

void save_vis_field(const lighting::VisibilityField& vis, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write visibility file: " + path);
    out.write(kVisMagic, 8);
    std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 4);
    std::uint32_t res[3] = {static_cast<std::uint32_t>(vis.res[0]),
                            static_cast<std::uint32_t>(vis.res[1]),
                            static_cast<std::uint32_t>(vis.res[2])};
    out.write(reinterpret_cast<const char*>(res), 12);
    double bounds[6] = {vis.lo.x, vis.lo.y, vis.lo.z, vis.hi.x, vis.hi.y, vis.hi.z};
    out.write(reinterpret_cast<const char*>(bounds), 48);
    std::uint32_t kv = static_cast<std::uint32_t>(vis.k_v);
    out.write(reinterpret_cast<const char*>(&kv), 4);
    for (const auto& l : vis.lobes) {
        double rec[5] = {l.axis.x, l.axis.y, l.axis.z, l.sharpness, l.amplitude.x};
        out.write(reinterpret_cast<const char*>(rec), 40);
    }
    out.write(reinterpret_cast<const char*>(vis.spec_mask.data()),
              static_cast<std::streamsize>(vis.spec_mask.size() * 4));
    if (!out) throw std::runtime_error("write failed: " + path);
}

lighting::VisibilityField load_vis_field(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open visibility file: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kVisMagic, 8) != 0)
        throw std::runtime_error("not a visibility file: " + path);
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1) throw std::runtime_error("unsupported visibility version: " + path);
    std::uint32_t res[3];
    in.read(reinterpret_cast<char*>(res), 12);
    double bounds[6];
    in.read(reinterpret_cast<char*>(bounds), 48);
    std::uint32_t kv = 0;
    in.read(reinterpret_cast<char*>(&kv), 4);
    if (!in || kv < 1 || kv > 64) throw std::runtime_error("visibility header out of range: " + path);
    lighting::VisibilityField vis;
    vis.res[0] = static_cast<int>(res[0]);
    vis.res[1] = static_cast<int>(res[1]);
    vis.res[2] = static_cast<int>(res[2]);
    vis.lo = {bounds[0], bounds[1], bounds[2]};
    vis.hi = {bounds[3], bounds[4], bounds[5]};
    vis.k_v = static_cast<int>(kv);
    vis.lobes.resize(vis.voxel_count() * vis.k_v);
    for (auto& l : vis.lobes) {
        double rec[5];
        in.read(reinterpret_cast<char*>(rec), 40);
        l.axis = {rec[0], rec[1], rec[2]};
        l.sharpness = rec[3];
        l.amplitude = {rec[4], rec[4], rec[4]};
    }
    vis.spec_mask.resize(vis.voxel_count());
    in.read(reinterpret_cast<char*>(vis.spec_mask.data()),
            static_cast<std::streamsize>(vis.spec_mask.size() * 4));
    if (!in) throw std::runtime_error("truncated visibility file: " + path);
    return vis;
}

void save_checkpoint(const std::string& dir, const field::VolumeGrid& grid,
                     const field::AppearanceDecoder& dec, const lighting::EnvLight& env,
                     const lighting::VisibilityField* vis, int next_iter, const OptState& st,
                     const std::vector<HistoryRow>& history) {
    std::filesystem::create_directories(dir);
    field::save_grid(grid, dec, dir + "/grid.bin");
    lighting::save_env_sg(env, dir + "/env.txt");
    save_history(history, dir + "/history.csv");
    if (vis && vis->voxel_count() > 0) save_vis_field(*vis, dir + "/vis.bin");
    std::ofstream out(dir + "/state.bin", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write optimizer state: " + dir);
    out.write(kOptMagic, 8);
    std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 4);
    std::int32_t it = next_iter;
    out.write(reinterpret_cast<const char*>(&it), 4);
    write_group(out, st.density);
    write_group(out, st.normal);
    write_group(out, st.latent);
    write_group(out, st.decoder);
    write_group(out, st.light);
    if (!out) throw std::runtime_error("write failed: " + dir + "/state.bin");
}

}  // namespace

OptimizeResult optimize(const std::vector<TrainView>& views, const OptimizeConfig& cfg,
                        const lighting::EnvLight& env_init, const field::VolumeGrid* grid_init,
                        const field::AppearanceDecoder* dec_init) {
    if (views.empty()) throw std::invalid_argument("optimize: no training views");
    if (env_init.lobes.empty() || env_init.lobes.size() > 32)
        throw std::invalid_argument("optimize: light must have 1..32 lobes");
    if (cfg.iterations < 0 || cfg.batch_rays < 1)
        throw std::invalid_argument("optimize: bad iteration or batch settings");
    if (cfg.grid_res < 2 || cfg.latent_dim < 1 || cfg.latent_dim > 64)
        throw std::invalid_argument("optimize: bad grid settings");
    for (const TrainView& tv : views)
        if (tv.image.width != tv.camera.width || tv.image.height != tv.camera.height)
            throw std::invalid_argument("optimize: image/camera resolution mismatch");

    OptimizeResult result;

    // Parameter initialization: a faint uniform fog with small random normals
    // and latents, so every loss has a nonzero gradient from the start.
    if (grid_init) {
        result.grid = *grid_init;
    } else {
        result.grid = field::VolumeGrid(cfg.grid_res, cfg.grid_res, cfg.grid_res, Vec3{-1, -1, -1},
                                        Vec3{1, 1, 1}, cfg.latent_dim);
        float raw0 = static_cast<float>(field::inv_softplus(0.25));
        std::fill(result.grid.raw_density.begin(), result.grid.raw_density.end(), raw0);
        for (std::size_t v = 0; v < result.grid.voxel_count(); ++v) {
            for (int a = 0; a < 3; ++a)
                result.grid.raw_normal[3 * v + a] =
                    static_cast<float>(0.1 * rng_gauss(cfg.seed, rng_stream::init_normal, v, a));
            for (int k = 0; k < cfg.latent_dim; ++k)
                result.grid.latent[v * cfg.latent_dim + k] =
                    static_cast<float>(0.1 * rng_gauss(cfg.seed, rng_stream::init_latent, v, k));
        }
        result.grid.reproject_normals();
    }
    if (dec_init) {
        if (dec_init->latent_dim != result.grid.latent_dim)
            throw std::invalid_argument("optimize: decoder/grid latent_dim mismatch");
        result.dec = *dec_init;
    } else {
        result.dec = field::AppearanceDecoder(result.grid.latent_dim);
        double scale = 0.5 / std::sqrt(static_cast<double>(result.grid.latent_dim));
        for (int c = 0; c < 4; ++c)
            for (int k = 0; k < result.grid.latent_dim; ++k)
                result.dec.weight[c * result.grid.latent_dim + k] = static_cast<float>(
                    scale * rng_gauss(cfg.seed, rng_stream::init_decoder, c, k));
    }
    result.env = env_init;

    const std::size_t n_vox = result.grid.voxel_count();
    const int k_lat = result.grid.latent_dim;
    const std::size_t n_lobes = result.env.lobes.size();
    OptState st;
    st.density.init(n_vox);
    st.normal.init(n_vox * 3);
    st.latent.init(n_vox * k_lat);
    st.decoder.init(4 * static_cast<std::size_t>(k_lat) + 4);
    st.light.init(n_lobes * 4);

    int start_iter = 0;
    if (!cfg.resume_from.empty()) {
        auto [g, d] = field::load_grid(cfg.resume_from + "/grid.bin");
        if (g.res[0] != result.grid.res[0] || g.latent_dim != k_lat)
            throw std::runtime_error("resume: checkpoint grid shape mismatch");
        result.grid = std::move(g);
        result.dec = std::move(d);
        result.env = lighting::load_env_sg(cfg.resume_from + "/env.txt");
        if (result.env.lobes.size() != n_lobes)
            throw std::runtime_error("resume: checkpoint light shape mismatch");
        result.history = load_history(cfg.resume_from + "/history.csv");
        std::ifstream in(cfg.resume_from + "/state.bin", std::ios::binary);
        if (!in) throw std::runtime_error("resume: cannot open state.bin");
        char magic[8];
        in.read(magic, 8);
        std::uint32_t version = 0;
        in.read(reinterpret_cast<char*>(&version), 4);
        if (!in || std::memcmp(magic, kOptMagic, 8) != 0 || version != 1)
            throw std::runtime_error("resume: not an optimizer state file");
        std::int32_t it = 0;
        in.read(reinterpret_cast<char*>(&it), 4);
        start_iter = it;
        read_group(in, st.density, n_vox);
        read_group(in, st.normal, n_vox * 3);
        read_group(in, st.latent, n_vox * k_lat);
        read_group(in, st.decoder, 4 * static_cast<std::size_t>(k_lat) + 4);
        read_group(in, st.light, n_lobes * 4);
        if (cfg.vis_mode == renderer::VisibilityMode::sg_fit)
            result.vis = load_vis_field(cfg.resume_from + "/vis.bin");
    }

    renderer::RenderSettings settings;
    settings.steps_per_ray = cfg.steps_per_ray;
    settings.vis_mode = cfg.vis_mode;
    settings.deterministic = true;
    settings.seed = cfg.seed;
    settings.threads = cfg.threads;
    settings.vis_step = cfg.vis_fit.march_step;
    settings.spec_threshold = cfg.vis_fit.spec_threshold;

    lighting::VisibilityFitSettings vfs = cfg.vis_fit;
    vfs.threads = cfg.threads;

    auto light_axes = [&] {
        std::vector<Vec3> axes;
        axes.reserve(result.env.lobes.size());
        for (const auto& l : result.env.lobes) axes.push_back(l.axis);
        return axes;
    };

    auto make_scene = [&]() {
        Scene s;
        s.grid = &result.grid;
        s.dec = &result.dec;
        s.env = &result.env;
        s.vis = cfg.vis_mode == renderer::VisibilityMode::sg_fit ? &result.vis : nullptr;
        s.settings = settings;
        return s;
    };

    // Per-parameter-group gradient descent with stage gating. Stage 1 shapes
    // geometry only; stage 2 adds appearance, sparsity, smoothness (and the
    // light when it is free).
    std::vector<double> light_grad(n_lobes * 4), light_params(n_lobes * 4);
    for (int iter = start_iter; iter < cfg.iterations; ++iter) {
        // Off-schedule iterations reuse the last fit (restored from the
        // checkpoint when resuming), keeping resumed runs byte-identical.
        if (cfg.vis_mode == renderer::VisibilityMode::sg_fit &&
            iter % std::max(1, cfg.vis_refresh) == 0)
            result.vis = lighting::fit_visibility_field(result.grid, light_axes(), vfs);

        const bool stage1 = iter < cfg.stage1_iters;
        LossWeights weights = cfg.weights;
        if (stage1) {
            weights.w_z = 0.0;
            weights.w_s = 0.0;
        }

        Scene scene = make_scene();
        BatchSpec batch{cfg.seed, static_cast<std::uint64_t>(iter), cfg.batch_rays};
        LossBreakdown bd;
        GradientBuffer g = total_gradient(scene, views, batch, weights, cfg.orientation, cfg.rho,
                                          cfg.eps_sigma, cfg.smooth_points, &bd);

        HistoryRow row{iter, bd.l_c, bd.l_sigma, bd.l_z, bd.l_s, bd.total, batch_psnr(bd.l_c)};
        result.history.push_back(row);

        if (!std::isfinite(bd.total)) {
            result.aborted = true;
            if (!cfg.checkpoint_dir.empty()) {
                result.abort_checkpoint = cfg.checkpoint_dir + "/diverged";
                save_checkpoint(result.abort_checkpoint, result.grid, result.dec, result.env,
                                cfg.vis_mode == renderer::VisibilityMode::sg_fit ? &result.vis
                                                                                 : nullptr,
                                iter, st, result.history);
            }
            return result;
        }

        adam_step_f32(result.grid.raw_density.data(), g.density.data(), n_vox, cfg.lr_grid,
                      st.density);
        adam_step_f32(result.grid.raw_normal.data(), g.normal.data(), n_vox * 3, cfg.lr_grid,
                      st.normal);
        if (!stage1) {
            adam_step_f32(result.grid.latent.data(), g.latent.data(), n_vox * k_lat, cfg.lr_grid,
                          st.latent);
            std::vector<double> dg(4 * static_cast<std::size_t>(k_lat) + 4);
            std::copy(g.dec_w.begin(), g.dec_w.end(), dg.begin());
            for (int c = 0; c < 4; ++c) dg[4 * k_lat + c] = g.dec_b[c];
            std::vector<float> dp(dg.size());
            std::copy(result.dec.weight.begin(), result.dec.weight.end(), dp.begin());
            for (int c = 0; c < 4; ++c) dp[4 * k_lat + c] = result.dec.bias[c];
            adam_step_f32(dp.data(), dg.data(), dp.size(), cfg.lr_decoder, st.decoder);
            std::copy(dp.begin(), dp.begin() + 4 * k_lat, result.dec.weight.begin());
            for (int c = 0; c < 4; ++c) result.dec.bias[c] = dp[4 * k_lat + c];

            if (cfg.light_free) {
                for (std::size_t j = 0; j < n_lobes; ++j) {
                    light_params[j] = result.env.lobes[j].sharpness;
                    light_grad[j] = g.light_lambda[j];
                    for (int c = 0; c < 3; ++c) {
                        light_params[n_lobes + 3 * j + c] = result.env.lobes[j].amplitude[c];
                        light_grad[n_lobes + 3 * j + c] = g.light_mu[3 * j + c];
                    }
                }
                adam_step_f64(light_params.data(), light_grad.data(), n_lobes * 4, cfg.lr_light,
                              st.light);
                for (std::size_t j = 0; j < n_lobes; ++j) {
                    result.env.lobes[j].sharpness = std::clamp(light_params[j], 0.01, 300.0);
                    for (int c = 0; c < 3; ++c)
                        result.env.lobes[j].amplitude[c] =
                            std::max(0.0, light_params[n_lobes + 3 * j + c]);
                }
            }
        }
        result.grid.reproject_normals();

        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
            (iter + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(cfg.checkpoint_dir, result.grid, result.dec, result.env,
                            cfg.vis_mode == renderer::VisibilityMode::sg_fit ? &result.vis
                                                                             : nullptr,
                            iter + 1, st, result.history);
    }

    // Final visibility refit and evaluation row at iter == iterations.
    if (cfg.vis_mode == renderer::VisibilityMode::sg_fit)
        result.vis = lighting::fit_visibility_field(result.grid, light_axes(), vfs);
    {
        Scene scene = make_scene();
        BatchSpec batch{cfg.seed, static_cast<std::uint64_t>(cfg.iterations), cfg.batch_rays};
        LossBreakdown bd = eval_total_loss(scene, views, batch, cfg.weights, cfg.orientation,
                                           cfg.rho, cfg.eps_sigma, cfg.smooth_points);
        result.history.push_back(HistoryRow{cfg.iterations, bd.l_c, bd.l_sigma, bd.l_z, bd.l_s,
                                            bd.total, batch_psnr(bd.l_c)});
    }

    // Full train-view re-render for the headline PSNR.
    {
        double mse_acc = 0.0;
        std::size_t n_px = 0;
        const lighting::VisibilityField* vf =
            cfg.vis_mode == renderer::VisibilityMode::sg_fit ? &result.vis : nullptr;
        for (const TrainView& tv : views) {
            Image img = renderer::render_image(result.grid, result.dec, tv.camera, result.env, vf,
                                               settings);
            for (std::size_t i = 0; i < img.data.size(); ++i) {
                double d = static_cast<double>(img.data[i]) - tv.image.data[i];
                mse_acc += d * d;
            }
            n_px += img.data.size();
        }
        double mse = n_px ? mse_acc / static_cast<double>(n_px) : 0.0;
        result.final_psnr = mse > 0.0 ? -10.0 * std::log10(mse) : 999.0;
    }
    return result;
}

}  // namespace flakevol::inverse
