#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flakevol/field.hpp"
#include "flakevol/image.hpp"
#include "flakevol/lighting.hpp"
#include "flakevol/phase.hpp"
#include "flakevol/vec.hpp"

namespace flakevol::renderer {

// Pinhole camera, world <- camera rigid transform, camera looks down -z,
// x right, y up. Pixel (u, v) has v growing downward.
struct Camera {
    Mat3 rot;        // world <- camera rotation
    Vec3 center;     // camera position in world
    double focal = 50.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
};

struct Ray {
    Vec3 o, d;  // d unit
};

// (px, py) = pixel index plus subpixel offset, e.g. u + 0.5 for the center.
Ray generate_ray(const Camera& cam, double px, double py);

Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width,
               int height);

std::vector<Camera> load_cameras(const std::string& path);
void save_cameras(const std::vector<Camera>& cams, const std::string& path);

enum class VisibilityMode { sg_fit, marched, off };

// Optional albedo edit applied after decoding: clamp01(matrix*a + offset).
struct AlbedoRemap {
    Mat3 matrix;
    Vec3 offset{0, 0, 0};
};

struct RenderSettings {
    int steps_per_ray = 64;
    std::vector<Vec3> light_directions;  // empty: use the env lobe axes
    phase::PhaseWeights weights;
    VisibilityMode vis_mode = VisibilityMode::sg_fit;
    bool deterministic = true;
    std::uint64_t seed = 1;
    int threads = 1;
    double vis_step = 0.03;          // marched-visibility step
    double spec_threshold = 0.5;     // binarization for the specular path
    bool early_termination = true;   // off in gradient-check mode
    const AlbedoRemap* albedo_remap = nullptr;
};

struct RadianceSample {
    Vec3 position;
    double transmittance = 1.0;  // T at the segment start
    double sigma = 0.0;
    Vec3 radiance{0, 0, 0};      // nu* at the sample
    double delta = 0.0;
};

struct MarchResult {
    Vec3 color{0, 0, 0};
    double transmittance = 1.0;
    std::vector<RadianceSample> trace;  // filled only when record_trace
};

// Resolved per-point visibility handed to the scatter term.
struct PointVisibility {
    std::span<const lighting::SgLobe> lobes;   // diffuse product lobes
    const double* lobe_scale = nullptr;        // marched: per-env-lobe factor
    std::uint32_t spec_mask = 0xffffffffu;     // bit per light direction
};

// nu* = w_d * diffuse closed form + w_s * sum over light_directions of
// f_p^s * env * binarized visibility * (4pi/|dirs|).
Vec3 scatter_radiance(const Vec3& x, const Vec3& omega_i, const field::FieldSample& fs,
                      const lighting::EnvLight& env, const PointVisibility& vis,
                      const RenderSettings& settings);

class VisibilityResolver {
  public:
    VisibilityResolver(VisibilityMode mode, const lighting::VisibilityField* field,
                       const field::VolumeGrid* grid, const lighting::EnvLight* env,
                       const std::vector<Vec3>& spec_dirs, double vis_step,
                       double spec_threshold);
    // `scratch` must hold env lobe count doubles for marched mode.
    PointVisibility at(const Vec3& x, double* scratch) const;

  private:
    VisibilityMode mode_;
    const lighting::VisibilityField* field_;
    const field::VolumeGrid* grid_;
    const lighting::EnvLight* env_;
    const std::vector<Vec3>* spec_dirs_;
    double vis_step_;
    double spec_threshold_;
    lighting::SgLobe full_lobe_;
};

// Discretized single-scatter compositing over the ray-bounds intersection:
// C = sum_k T_k (1 - e^{-sigma_k delta}) nu*_k, T_k = exp(-sum_{j<k} sigma_j delta),
// equal-length segments, midpoint samples in deterministic mode.
MarchResult march(const field::VolumeGrid& grid, const field::AppearanceDecoder& dec,
                  const Ray& ray, const lighting::EnvLight& env, const VisibilityResolver& vis,
                  const RenderSettings& settings, bool record_trace = false);

// Per-pixel march; deterministic mode is bit-identical across runs and
// thread counts (pixels write disjoint slots).
Image render_image(const field::VolumeGrid& grid, const field::AppearanceDecoder& dec,
                   const Camera& cam, const lighting::EnvLight& env,
                   const lighting::VisibilityField* vis_field, const RenderSettings& settings);

// Light directions actually used by the specular quadrature.
std::vector<Vec3> resolve_light_directions(const lighting::EnvLight& env,
                                           const RenderSettings& settings);

}  // namespace flakevol::renderer
