#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flakevol/field.hpp"
#include "flakevol/inverse.hpp"
#include "flakevol/lighting.hpp"
#include "flakevol/renderer.hpp"

namespace flakevol::cli {

// Exit codes shared by every subcommand.
constexpr int kExitOk = 0;
constexpr int kExitInputError = 2;
constexpr int kExitNumericError = 3;

// Scene bundle on disk: all paths relative to the manifest file.
struct Manifest {
    std::string grid;     // binary grid (+ .json sidecar)
    std::string env;      // SG light text file
    std::string cameras;  // cameras JSON
    std::vector<std::string> images;  // PFM per camera, optional
    int steps_per_ray = 64;
    std::string vis_mode = "sg-fit";
};

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& m, const std::string& path);

struct Preset {
    field::VolumeGrid grid;
    field::AppearanceDecoder dec;
    lighting::EnvLight env;
    std::vector<renderer::Camera> cameras;
};

// Deterministic synthetic scenes: "sphere", "two-material-blob",
// "occluder-slab". Throws std::invalid_argument on unknown names.
Preset build_preset(const std::string& name, int grid_res, int views, int image_res,
                    std::uint64_t seed);

// A colorful held-out light for relighting tests, distinct from any preset's
// training light.
lighting::EnvLight novel_relight_env(std::uint64_t seed);

int run(int argc, const char* const* argv);

}  // namespace flakevol::cli
