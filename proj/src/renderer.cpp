#include "flakevol/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "flakevol/detail/scatter.hpp"
#include "flakevol/parallel.hpp"
#include "flakevol/rng.hpp"
#include "flakevol/sggx.hpp"
#include "json.hpp"

namespace flakevol::renderer {

namespace {

constexpr double kPi = 3.14159265358979323846;

}  // namespace

Ray generate_ray(const Camera& cam, double px, double py) {
    Vec3 d_cam{(px - cam.cx) / cam.focal, (cam.cy - py) / cam.focal, -1.0};
    return Ray{cam.center, normalize(cam.rot * d_cam)};
}

Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width,
               int height) {
    Vec3 fwd = target - eye;
    if (length(fwd) < 1e-12) throw std::invalid_argument("look_at: eye equals target");
    fwd = normalize(fwd);
    Vec3 xc = cross(fwd, up);
    if (length(xc) < 1e-9) throw std::invalid_argument("look_at: up parallel to view direction");
    xc = normalize(xc);
    Vec3 yc = cross(-fwd, xc);
    Camera cam;
    cam.rot = Mat3::from_cols(xc, yc, -fwd);  // camera -z maps to fwd
    cam.center = eye;
    cam.focal = focal;
    cam.width = width;
    cam.height = height;
    cam.cx = width * 0.5;
    cam.cy = height * 0.5;
    return cam;
}

std::vector<Camera> load_cameras(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open camera file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("camera file parse error: " + path + ": " + e.what());
    }
    if (!j.contains("cameras") || !j["cameras"].is_array())
        throw std::runtime_error("camera file has no cameras array: " + path);
    std::vector<Camera> out;
    for (const auto& c : j["cameras"]) {
        Camera cam;
        const auto& pose = c.at("pose");
        if (!pose.is_array() || pose.size() != 3)
            throw std::runtime_error("camera pose must be 3x4: " + path);
        for (int r = 0; r < 3; ++r) {
            if (!pose[r].is_array() || pose[r].size() != 4)
                throw std::runtime_error("camera pose must be 3x4: " + path);
            for (int k = 0; k < 3; ++k) cam.rot.m[r][k] = pose[r][k].get<double>();
            cam.center[r] = pose[r][3].get<double>();
        }
        double det = determinant(cam.rot);
        if (std::abs(det - 1.0) > 1e-6)
            throw std::runtime_error("camera rotation is not special orthogonal: " + path);
        cam.focal = c.at("focal").get<double>();
        if (!(cam.focal > 0)) throw std::runtime_error("camera focal must be > 0: " + path);
        const auto& pp = c.at("principal");
        cam.cx = pp.at(0).get<double>();
        cam.cy = pp.at(1).get<double>();
        const auto& res = c.at("resolution");
        cam.width = res.at(0).get<int>();
        cam.height = res.at(1).get<int>();
        if (cam.width < 1 || cam.height < 1)
            throw std::runtime_error("camera resolution must be positive: " + path);
        out.push_back(cam);
    }
    if (out.empty()) throw std::runtime_error("camera file has no cameras: " + path);
    return out;
}

void save_cameras(const std::vector<Camera>& cams, const std::string& path) {
    nlohmann::json j;
    auto& arr = j["cameras"] = nlohmann::json::array();
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const Camera& cam = cams[i];
        nlohmann::json jc;
        jc["id"] = i;
        nlohmann::json pose = nlohmann::json::array();
        for (int r = 0; r < 3; ++r)
            pose.push_back({cam.rot.m[r][0], cam.rot.m[r][1], cam.rot.m[r][2], cam.center[r]});
        jc["pose"] = std::move(pose);
        jc["focal"] = cam.focal;
        jc["principal"] = {cam.cx, cam.cy};
        jc["resolution"] = {cam.width, cam.height};
        arr.push_back(std::move(jc));
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write camera file: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<Vec3> resolve_light_directions(const lighting::EnvLight& env,
                                           const RenderSettings& settings) {
    if (!settings.light_directions.empty()) return settings.light_directions;
    std::vector<Vec3> dirs;
    dirs.reserve(env.lobes.size());
    for (const auto& l : env.lobes) dirs.push_back(l.axis);
    return dirs;
}

namespace detail {

LightContext make_light_context(const lighting::EnvLight& env, const RenderSettings& settings) {
    LightContext lc;
    lc.env = &env;
    lc.dirs = resolve_light_directions(env, settings);
    if (lc.dirs.size() > 32)
        throw std::invalid_argument("at most 32 specular light directions");
    lc.light.reserve(lc.dirs.size());
    for (const Vec3& d : lc.dirs) lc.light.push_back(lighting::env_eval(env, d));
    lc.domega = lc.dirs.empty() ? 0.0 : 4.0 * kPi / static_cast<double>(lc.dirs.size());
    return lc;
}

Vec3 remap_albedo(const Vec3& albedo, const RenderSettings& settings) {
    if (!settings.albedo_remap) return albedo;
    Vec3 a = settings.albedo_remap->matrix * albedo + settings.albedo_remap->offset;
    return {clamp01(a.x), clamp01(a.y), clamp01(a.z)};
}

Vec3 scatter_eval(const field::FieldSample& fs, const Vec3& omega_i, const PointVisibility& vis,
                  const LightContext& lc, const RenderSettings& settings) {
    Vec3 out{0, 0, 0};
    const auto& env_lobes = lc.env->lobes;

    if (settings.weights.w_diffuse > 0.0) {
        Vec3 shade{0, 0, 0};
        for (const lighting::SgLobe& v : vis.lobes) {
            if (v.amplitude.x <= 0.0) continue;
            for (std::size_t j = 0; j < env_lobes.size(); ++j) {
                lighting::SgTriple t = lighting::sg_triple_product(
                    v.axis, v.sharpness, env_lobes[j].axis, env_lobes[j].sharpness, fs.omega_m);
                double s = v.amplitude.x * lighting::kCosAmplitude * t.value;
                if (vis.lobe_scale) s *= vis.lobe_scale[j];
                shade += env_lobes[j].amplitude * s;
            }
        }
        Vec3 albedo = remap_albedo(fs.albedo, settings);
        out += albedo * shade * (settings.weights.w_diffuse / kPi);
    }

    if (settings.weights.w_specular > 0.0 && !lc.dirs.empty()) {
        sggx::MicroflakeParams mp{fs.omega_m, fs.tau_m};
        double pa = sggx::projected_area(mp, omega_i);
        Vec3 spec{0, 0, 0};
        for (std::size_t d = 0; d < lc.dirs.size(); ++d) {
            if (!(vis.spec_mask >> d & 1u)) continue;
            Vec3 h = omega_i + lc.dirs[d];
            double len = length(h);
            if (len < 1e-9) continue;
            double f = sggx::ndf_eval(mp, h / len) / (4.0 * pa);
            spec += lc.light[d] * f;
        }
        out += spec * (settings.weights.w_specular * lc.domega);
    }
    return out;
}

}  // namespace detail

Vec3 scatter_radiance(const Vec3& x, const Vec3& omega_i, const field::FieldSample& fs,
                      const lighting::EnvLight& env, const PointVisibility& vis,
                      const RenderSettings& settings) {
    (void)x;
    detail::LightContext lc = detail::make_light_context(env, settings);
    return detail::scatter_eval(fs, omega_i, vis, lc, settings);
}

VisibilityResolver::VisibilityResolver(VisibilityMode mode, const lighting::VisibilityField* field,
                                       const field::VolumeGrid* grid,
                                       const lighting::EnvLight* env,
                                       const std::vector<Vec3>& spec_dirs, double vis_step,
                                       double spec_threshold)
    : mode_(mode),
      field_(field),
      grid_(grid),
      env_(env),
      spec_dirs_(&spec_dirs),
      vis_step_(vis_step),
      spec_threshold_(spec_threshold) {
    full_lobe_ = lighting::SgLobe{Vec3{0, 0, 1}, 0.0, Vec3{1, 1, 1}};
    if (mode == VisibilityMode::sg_fit && !field)
        throw std::invalid_argument("sg-fit visibility requires a fitted field");
    if (mode == VisibilityMode::marched && !grid)
        throw std::invalid_argument("marched visibility requires the density grid");
    if (spec_dirs.size() > 32)
        throw std::invalid_argument("at most 32 specular light directions");
}

PointVisibility VisibilityResolver::at(const Vec3& x, double* scratch) const {
    PointVisibility pv;
    switch (mode_) {
        case VisibilityMode::off:
            pv.lobes = {&full_lobe_, 1};
            return pv;
        case VisibilityMode::sg_fit: {
            std::size_t vox = field_->voxel_of(x);
            pv.lobes = field_->lobes_at(vox);
            pv.spec_mask = field_->spec_mask[vox];
            return pv;
        }
        case VisibilityMode::marched: {
            const auto& lobes = env_->lobes;
            for (std::size_t j = 0; j < lobes.size(); ++j)
                scratch[j] = lighting::compute_visibility(*grid_, x, lobes[j].axis, vis_step_);
            pv.lobes = {&full_lobe_, 1};
            pv.lobe_scale = scratch;
            std::uint32_t mask = 0;
            for (std::size_t d = 0; d < spec_dirs_->size(); ++d)
                if (lighting::compute_visibility(*grid_, x, (*spec_dirs_)[d], vis_step_) >=
                    spec_threshold_)
                    mask |= 1u << d;
            pv.spec_mask = mask;
            return pv;
        }
    }
    return pv;
}

namespace {

// Ray-box span; false when the ray misses the grid.
bool box_span(const field::VolumeGrid& grid, const Ray& ray, double& t0, double& t1) {
    t0 = 0.0;
    t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        double o = ray.o[a], d = ray.d[a];
        if (std::abs(d) < 1e-15) {
            if (o < grid.lo[a] || o > grid.hi[a]) return false;
            continue;
        }
        double ta = (grid.lo[a] - o) / d, tb = (grid.hi[a] - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    return t1 > t0;
}

MarchResult march_impl(const field::VolumeGrid& grid, const field::AppearanceDecoder& dec,
                       const Ray& ray, const detail::LightContext& lc,
                       const VisibilityResolver& vis, const RenderSettings& settings,
                       bool record_trace, std::vector<double>& scratch) {
    MarchResult out;
    double t0, t1;
    if (!box_span(grid, ray, t0, t1)) return out;  // miss: background 0, T = 1

    int n = std::max(1, settings.steps_per_ray);
    double delta = (t1 - t0) / n;
    Vec3 omega_i = -ray.d;
    double t_big = 1.0;
    if (record_trace) out.trace.reserve(n);
    for (int k = 0; k < n; ++k) {
        Vec3 x = ray.o + ray.d * (t0 + (k + 0.5) * delta);
        field::FieldSample fs = field::sample_field(grid, dec, x);
        double t_next = t_big * std::exp(-fs.sigma * delta);
        double w = t_big - t_next;
        Vec3 nu{0, 0, 0};
        if (w > 1e-12 || record_trace)
            nu = detail::scatter_eval(fs, omega_i, vis.at(x, scratch.data()), lc, settings);
        out.color += nu * w;
        if (record_trace)
            out.trace.push_back(RadianceSample{x, t_big, fs.sigma, nu, delta});
        t_big = t_next;
        if (settings.early_termination && !record_trace && t_big < 1e-4) break;
    }
    out.transmittance = t_big;
    return out;
}

}  // namespace

MarchResult march(const field::VolumeGrid& grid, const field::AppearanceDecoder& dec,
                  const Ray& ray, const lighting::EnvLight& env, const VisibilityResolver& vis,
                  const RenderSettings& settings, bool record_trace) {
    detail::LightContext lc = detail::make_light_context(env, settings);
    std::vector<double> scratch(env.lobes.size());
    return march_impl(grid, dec, ray, lc, vis, settings, record_trace, scratch);
}

Image render_image(const field::VolumeGrid& grid, const field::AppearanceDecoder& dec,
                   const Camera& cam, const lighting::EnvLight& env,
                   const lighting::VisibilityField* vis_field, const RenderSettings& settings) {
    if (cam.width < 1 || cam.height < 1)
        throw std::invalid_argument("render_image: camera resolution unset");
    detail::LightContext lc = detail::make_light_context(env, settings);
    VisibilityResolver vis(settings.vis_mode, vis_field, &grid, &env, lc.dirs, settings.vis_step,
                           settings.spec_threshold);
    Image img(cam.width, cam.height);
    std::size_t n_pixels = static_cast<std::size_t>(cam.width) * cam.height;
    parallel_chunks(n_pixels, 64, settings.threads,
                    [&](std::size_t, std::size_t b, std::size_t e) {
        std::vector<double> scratch(env.lobes.size());
        for (std::size_t p = b; p < e; ++p) {
            int py = static_cast<int>(p / cam.width);
            int px = static_cast<int>(p % cam.width);
            double jx = 0.5, jy = 0.5;
            if (!settings.deterministic) {
                jx = rng_uniform(settings.seed, rng_stream::pixel_jitter, p, 0);
                jy = rng_uniform(settings.seed, rng_stream::pixel_jitter, p, 1);
            }
            Ray ray = generate_ray(cam, px + jx, py + jy);
            MarchResult r = march_impl(grid, dec, ray, lc, vis, settings, false, scratch);
            img.set(px, py, r.color);
        }
    });
    return img;
}

}  // namespace flakevol::renderer
