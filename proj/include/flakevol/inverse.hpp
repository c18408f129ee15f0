#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flakevol/field.hpp"
#include "flakevol/image.hpp"
#include "flakevol/lighting.hpp"
#include "flakevol/renderer.hpp"

namespace flakevol::inverse {

struct TrainView {
    renderer::Camera camera;
    Image image;
    std::optional<Image> mask;
};

struct LossWeights {
    double w_c = 1.0;
    double w_sigma = 3e-4;
    double w_z = 1e-3;
    double w_s = 1e-3;
};

struct LossBreakdown {
    double l_c = 0, l_sigma = 0, l_z = 0, l_s = 0;
    double total = 0;
};

// Which sign of <omega_m, omega_i> the orientation term penalizes; omega_i
// points toward the camera. back_facing penalizes normals turned away from
// the viewer; literal is the written form max(0, <omega_m, omega_i>).
enum class OrientationPenalty { back_facing, literal };

// Accumulators congruent with the raw parameter layout. Light axes are fixed
// by design, so only sharpness and amplitude slots exist.
struct GradientBuffer {
    std::vector<double> density;   // V
    std::vector<double> normal;    // 3V
    std::vector<double> latent;    // K*V
    std::vector<double> dec_w;     // 4*K
    double dec_b[4] = {0, 0, 0, 0};
    std::vector<double> light_lambda;  // J
    std::vector<double> light_mu;      // 3*J

    void resize(const field::VolumeGrid& grid, int latent_dim, std::size_t lobes);
    void clear();
    void add(const GradientBuffer& other);
};

// Mean squared L2 color difference per ray.
double loss_photometric(std::span<const Vec3> rendered, std::span<const Vec3> target);

struct TraceView {
    const std::vector<renderer::RadianceSample>* samples = nullptr;
    Vec3 omega_i;  // toward the camera
};

// Transmittance-weighted sum over samples of ||omega_m - grad-normal||^2 plus
// the orientation penalty; degenerate-gradient samples are skipped.
double loss_density_normal(const field::VolumeGrid& grid, std::span<const TraceView> traces,
                           OrientationPenalty penalty);

// KL(rho || rho_hat_j) summed over channels; activations row-major n x k.
double loss_sparsity(std::span<const double> activations, int k, double rho = 0.05);

// Mean L1 difference of normals at x vs x+eps plus decoded appearance at
// z vs z+eps, eps ~ N(0, eps_sigma^2) drawn from (seed, point index).
// eps_sigma = 0 gives exactly 0.
double loss_smoothness(const field::VolumeGrid& grid, const field::AppearanceDecoder& dec,
                       std::span<const Vec3> points, double eps_sigma, std::uint64_t seed);

LossBreakdown total_loss(double l_c, double l_sigma, double l_z, double l_s,
                         const LossWeights& weights);

// One ray's recorded forward pass plus its upstream adjoints: dl_dc for the
// rendered color, dl_dsigma for this ray's density-normal loss contribution.
struct RayAdjoint {
    renderer::Ray ray;
    const std::vector<renderer::RadianceSample>* trace = nullptr;
    Vec3 dl_dc{0, 0, 0};
    double dl_dsigma = 0.0;
};

struct Scene {
    const field::VolumeGrid* grid = nullptr;
    const field::AppearanceDecoder* dec = nullptr;
    const lighting::EnvLight* env = nullptr;
    const lighting::VisibilityField* vis = nullptr;
    renderer::RenderSettings settings;
};

// Exact adjoints of the deterministic render path (march -> scatter ->
// field sampling -> activations) for every raw grid value, decoder weight,
// and light sharpness/amplitude. Visibility is a frozen input. When
// weights.w_sigma > 0 the density-normal loss adjoint is accumulated from
// the same traces. Throws std::logic_error if a trace is missing.
GradientBuffer backward(const Scene& scene, std::span<const RayAdjoint> rays,
                        OrientationPenalty penalty, int threads);

void add_sparsity_gradient(const field::VolumeGrid& grid, double w_z, double rho,
                           GradientBuffer& g);
void add_smoothness_gradient(const field::VolumeGrid& grid, const field::AppearanceDecoder& dec,
                             std::span<const Vec3> points, double eps_sigma, std::uint64_t seed,
                             double w_s, GradientBuffer& g);

struct OptimizeConfig {
    int iterations = 1500;
    int batch_rays = 512;
    int grid_res = 16;
    int latent_dim = 8;
    double lr_grid = 5e-3;
    double lr_decoder = 1e-3;
    double lr_light = 1e-3;
    LossWeights weights;
    double rho = 0.05;
    double eps_sigma = 0.1;
    int smooth_points = 128;
    int stage1_iters = 200;
    int vis_refresh = 200;
    bool light_free = false;
    int steps_per_ray = 32;
    std::uint64_t seed = 1;
    int threads = 1;
    int checkpoint_every = 0;  // 0: none
    std::string checkpoint_dir;
    std::string resume_from;   // checkpoint directory to continue from
    OrientationPenalty orientation = OrientationPenalty::back_facing;
    lighting::VisibilityFitSettings vis_fit;
    renderer::VisibilityMode vis_mode = renderer::VisibilityMode::sg_fit;
};

OptimizeConfig load_optimize_config(const std::string& path);
void save_optimize_config(const OptimizeConfig& cfg, const std::string& path);

struct HistoryRow {
    int iter = 0;
    double l_c = 0, l_sigma = 0, l_z = 0, l_s = 0, total = 0, psnr = 0;
};

void save_history(const std::vector<HistoryRow>& rows, const std::string& path);

struct OptimizeResult {
    field::VolumeGrid grid;
    field::AppearanceDecoder dec;
    lighting::EnvLight env;
    lighting::VisibilityField vis;
    std::vector<HistoryRow> history;
    double final_psnr = 0;         // full train-view re-render after the last step
    bool aborted = false;          // NaN divergence
    std::string abort_checkpoint;  // diagnostic checkpoint on abort
};

// Staged fit: stage 1 updates density+normals under L_c + L_sigma; stage 2
// joins appearance (and the light when light_free) and adds L_z + L_s.
// env_init is the fixed light when !light_free, the starting point otherwise.
// History has iterations + 1 rows; runs are reproducible given cfg.seed.
OptimizeResult optimize(const std::vector<TrainView>& views, const OptimizeConfig& cfg,
                        const lighting::EnvLight& env_init,
                        const field::VolumeGrid* grid_init = nullptr,
                        const field::AppearanceDecoder* dec_init = nullptr);

// Deterministic batch draw + forward + total gradient; shared by optimize and
// the finite-difference keystone test.
struct BatchSpec {
    std::uint64_t seed = 1;
    std::uint64_t iter = 0;
    int batch_rays = 64;
};
LossBreakdown eval_total_loss(const Scene& scene, const std::vector<TrainView>& views,
                              const BatchSpec& batch, const LossWeights& weights,
                              OrientationPenalty penalty, double rho, double eps_sigma,
                              int smooth_points);
GradientBuffer total_gradient(const Scene& scene, const std::vector<TrainView>& views,
                              const BatchSpec& batch, const LossWeights& weights,
                              OrientationPenalty penalty, double rho, double eps_sigma,
                              int smooth_points, LossBreakdown* breakdown = nullptr);

}  // namespace flakevol::inverse
