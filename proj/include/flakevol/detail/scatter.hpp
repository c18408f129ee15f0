#pragma once

#include <vector>

#include "flakevol/renderer.hpp"

// Shared between the forward march and the adjoint pass so both sides price
// the scatter term with the same formula and the same precomputed light data.

namespace flakevol::renderer::detail {

struct LightContext {
    const lighting::EnvLight* env = nullptr;
    std::vector<Vec3> dirs;   // specular quadrature directions
    std::vector<Vec3> light;  // env_eval at dirs
    double domega = 0.0;      // 4*pi / |dirs|
};

LightContext make_light_context(const lighting::EnvLight& env, const RenderSettings& settings);

// Applies settings.albedo_remap if present.
Vec3 remap_albedo(const Vec3& albedo, const RenderSettings& settings);

Vec3 scatter_eval(const field::FieldSample& fs, const Vec3& omega_i, const PointVisibility& vis,
                  const LightContext& lc, const RenderSettings& settings);

}  // namespace flakevol::renderer::detail
