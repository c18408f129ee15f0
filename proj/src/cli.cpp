#include "flakevol/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "CLI11.hpp"
#include "flakevol/image.hpp"
#include "json.hpp"

namespace flakevol::cli {

namespace fs = std::filesystem;

namespace {

// Relative manifest entries are joined onto the manifest's directory so the
// bundle can live anywhere.
std::string resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return p;
    fs::path q(p);
    if (q.is_absolute()) return q.lexically_normal().string();
    return (base / q).lexically_normal().string();
}

renderer::VisibilityMode parse_vis_mode(const std::string& s) {
    if (s == "sg-fit") return renderer::VisibilityMode::sg_fit;
    if (s == "marched") return renderer::VisibilityMode::marched;
    if (s == "off") return renderer::VisibilityMode::off;
    throw std::invalid_argument("unknown visibility mode: " + s);
}

std::string view_name(const char* stem, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03d.%s", stem, i, ext);
    return buf;
}

struct LoadedScene {
    field::VolumeGrid grid;
    field::AppearanceDecoder dec;
    lighting::EnvLight env;
    std::vector<renderer::Camera> cameras;
    Manifest manifest;
};

LoadedScene load_scene(const std::string& manifest_path) {
    LoadedScene s;
    s.manifest = load_manifest(manifest_path);
    auto [g, d] = field::load_grid(s.manifest.grid);
    s.grid = std::move(g);
    s.dec = std::move(d);
    s.env = lighting::load_env_sg(s.manifest.env);
    s.cameras = renderer::load_cameras(s.manifest.cameras);
    if (s.cameras.empty()) throw std::runtime_error("manifest has no cameras");
    return s;
}

std::vector<Vec3> env_axes(const lighting::EnvLight& env) {
    std::vector<Vec3> axes;
    axes.reserve(env.lobes.size());
    for (const auto& l : env.lobes) axes.push_back(l.axis);
    return axes;
}

// Shared tail of every image-producing subcommand: fit visibility if needed,
// render the selected views, write PFM (authoritative) plus PNG preview.
void render_views(const LoadedScene& s, const lighting::EnvLight& env,
                  const renderer::RenderSettings& settings, int view, const std::string& out_dir,
                  const char* stem, std::vector<std::string>* names_out = nullptr) {
    if (view >= static_cast<int>(s.cameras.size()))
        throw std::invalid_argument("view index out of range");
    lighting::VisibilityField vis;
    const lighting::VisibilityField* vis_ptr = nullptr;
    if (settings.vis_mode == renderer::VisibilityMode::sg_fit) {
        lighting::VisibilityFitSettings vfs;
        vfs.march_step = settings.vis_step;
        vfs.spec_threshold = settings.spec_threshold;
        vfs.threads = settings.threads;
        vis = lighting::fit_visibility_field(s.grid, env_axes(env), vfs);
        vis_ptr = &vis;
    }
    fs::create_directories(out_dir);
    for (int i = 0; i < static_cast<int>(s.cameras.size()); ++i) {
        if (view >= 0 && i != view) continue;
        Image img = renderer::render_image(s.grid, s.dec, s.cameras[i], env, vis_ptr, settings);
        std::string pfm = view_name(stem, i, "pfm");
        save_pfm(img, out_dir + "/" + pfm);
        save_png(img, out_dir + "/" + view_name(stem, i, "png"));
        if (names_out) names_out->push_back(pfm);
    }
}

int cmd_make_synthetic(const std::string& preset_name, int grid_res, int views, int image_res,
                       std::uint64_t seed, int steps, int threads, const std::string& out_dir) {
    Preset p = build_preset(preset_name, grid_res, views, image_res, seed);
    fs::create_directories(out_dir);
    field::save_grid(p.grid, p.dec, out_dir + "/grid.bin");
    lighting::save_env_sg(p.env, out_dir + "/env.txt");
    renderer::save_cameras(p.cameras, out_dir + "/cameras.json");
    lighting::save_env_sg(novel_relight_env(seed), out_dir + "/relight_env.txt");

    renderer::RenderSettings settings;
    settings.steps_per_ray = steps;
    settings.threads = threads;
    LoadedScene s;
    s.grid = std::move(p.grid);
    s.dec = std::move(p.dec);
    s.cameras = std::move(p.cameras);
    Manifest m;
    m.grid = "grid.bin";
    m.env = "env.txt";
    m.cameras = "cameras.json";
    m.steps_per_ray = steps;
    render_views(s, p.env, settings, -1, out_dir, "view", &m.images);
    save_manifest(m, out_dir + "/manifest.json");
    std::cout << "wrote " << m.images.size() << " views to " << out_dir << "\n";
    return kExitOk;
}

renderer::RenderSettings settings_from(const Manifest& m, int steps, const std::string& vis_mode,
                                       int threads) {
    renderer::RenderSettings settings;
    settings.steps_per_ray = steps > 0 ? steps : m.steps_per_ray;
    settings.vis_mode = parse_vis_mode(vis_mode.empty() ? m.vis_mode : vis_mode);
    settings.threads = threads;
    return settings;
}

int cmd_render(const std::string& manifest_path, const std::string& out_dir, int view, int steps,
               const std::string& vis_mode, int threads) {
    LoadedScene s = load_scene(manifest_path);
    renderer::RenderSettings settings = settings_from(s.manifest, steps, vis_mode, threads);
    render_views(s, s.env, settings, view, out_dir, "render");
    std::cout << "rendered to " << out_dir << "\n";
    return kExitOk;
}

int cmd_relight(const std::string& manifest_path, const std::string& env_path,
                const std::string& out_dir, int view, int steps, const std::string& vis_mode,
                int threads) {
    LoadedScene s = load_scene(manifest_path);
    lighting::EnvLight env = lighting::load_env_sg(env_path);
    renderer::RenderSettings settings = settings_from(s.manifest, steps, vis_mode, threads);
    render_views(s, env, settings, view, out_dir, "relight");
    fs::create_directories(out_dir);
    lighting::save_env_sg(env, out_dir + "/env.txt");
    std::cout << "relit to " << out_dir << "\n";
    return kExitOk;
}

int cmd_edit(const std::string& manifest_path, const std::string& out_dir, int view, int steps,
             const std::string& vis_mode, int threads, const std::vector<double>& matrix,
             const std::vector<double>& offset, double w_diffuse, double w_specular) {
    LoadedScene s = load_scene(manifest_path);
    renderer::RenderSettings settings = settings_from(s.manifest, steps, vis_mode, threads);
    settings.weights.w_diffuse = w_diffuse;
    settings.weights.w_specular = w_specular;

    renderer::AlbedoRemap remap;
    if (!matrix.empty()) {
        remap.matrix = Mat3::from_rows(Vec3{matrix[0], matrix[1], matrix[2]},
                                       Vec3{matrix[3], matrix[4], matrix[5]},
                                       Vec3{matrix[6], matrix[7], matrix[8]});
    }
    if (!offset.empty()) remap.offset = Vec3{offset[0], offset[1], offset[2]};
    settings.albedo_remap = &remap;

    // Pre-scan: report how many voxels the edit pushes out of [0,1].
    std::vector<double> z(s.grid.latent_dim);
    std::size_t clamped = 0;
    for (std::size_t v = 0; v < s.grid.voxel_count(); ++v) {
        for (int j = 0; j < s.grid.latent_dim; ++j)
            z[j] = s.grid.latent[v * s.grid.latent_dim + j];
        Vec3 albedo;
        double tau;
        field::decode_appearance(s.dec, z.data(), albedo, tau);
        Vec3 mapped = remap.matrix * albedo + remap.offset;
        if (mapped.x < 0 || mapped.x > 1 || mapped.y < 0 || mapped.y > 1 || mapped.z < 0 ||
            mapped.z > 1)
            ++clamped;
    }
    if (clamped > 0)
        std::cerr << "warning: albedo edit clamps " << clamped << " of " << s.grid.voxel_count()
                  << " voxels\n";

    render_views(s, s.env, settings, view, out_dir, "edit");
    std::cout << "edited render to " << out_dir << "\n";
    return kExitOk;
}

int cmd_optimize(const std::string& manifest_path, const std::string& config_path,
                 const std::string& out_dir, int iterations, int light_free, std::uint64_t seed,
                 bool seed_set, int threads, const std::string& checkpoint_dir,
                 int checkpoint_every, const std::string& resume_from) {
    Manifest m = load_manifest(manifest_path);
    if (m.images.empty()) throw std::runtime_error("manifest has no training images");
    std::vector<renderer::Camera> cams = renderer::load_cameras(m.cameras);
    if (m.images.size() != cams.size())
        throw std::runtime_error("manifest image and camera counts differ");

    inverse::OptimizeConfig cfg;
    if (!config_path.empty()) cfg = inverse::load_optimize_config(config_path);
    if (iterations >= 0) cfg.iterations = iterations;
    if (light_free >= 0) cfg.light_free = light_free != 0;
    if (seed_set) cfg.seed = seed;
    if (threads > 0) cfg.threads = threads;
    if (!checkpoint_dir.empty()) cfg.checkpoint_dir = checkpoint_dir;
    if (checkpoint_every > 0) cfg.checkpoint_every = checkpoint_every;
    if (!resume_from.empty()) cfg.resume_from = resume_from;
    // An explicit config owns the visibility mode; otherwise the manifest's.
    if (config_path.empty()) cfg.vis_mode = parse_vis_mode(m.vis_mode);

    std::vector<inverse::TrainView> views(cams.size());
    for (std::size_t i = 0; i < cams.size(); ++i) {
        views[i].camera = cams[i];
        views[i].image = load_pfm(m.images[i]);
        if (views[i].image.width != cams[i].width || views[i].image.height != cams[i].height)
            throw std::runtime_error("image resolution does not match camera: " + m.images[i]);
    }
    lighting::EnvLight env_init = lighting::load_env_sg(m.env);

    inverse::OptimizeResult result = inverse::optimize(views, cfg, env_init);

    fs::create_directories(out_dir);
    field::save_grid(result.grid, result.dec, out_dir + "/grid.bin");
    lighting::save_env_sg(result.env, out_dir + "/env.txt");
    inverse::save_history(result.history, out_dir + "/history.csv");
    renderer::save_cameras(cams, out_dir + "/cameras.json");

    nlohmann::json metrics;
    metrics["final_psnr"] = result.final_psnr;
    metrics["iterations"] = cfg.iterations;
    metrics["aborted"] = result.aborted;
    if (!result.history.empty()) metrics["final_total"] = result.history.back().total;
    std::ofstream mout(out_dir + "/metrics.json");
    mout << metrics.dump(2) << "\n";

    Manifest out_m;
    out_m.grid = "grid.bin";
    out_m.env = "env.txt";
    out_m.cameras = "cameras.json";
    out_m.steps_per_ray = m.steps_per_ray;
    out_m.vis_mode = m.vis_mode;
    save_manifest(out_m, out_dir + "/manifest.json");

    if (result.aborted) {
        std::cerr << "optimize diverged (non-finite loss)";
        if (!result.abort_checkpoint.empty())
            std::cerr << "; diagnostic checkpoint: " << result.abort_checkpoint;
        std::cerr << "\n";
        return kExitNumericError;
    }
    std::cout << "final psnr " << result.final_psnr << "\n";
    return kExitOk;
}

}  // namespace

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("manifest parse error: " + path + ": " + e.what());
    }
    Manifest m;
    fs::path base = fs::path(path).parent_path();
    m.grid = resolve(base, j.at("grid").get<std::string>());
    m.env = resolve(base, j.at("env").get<std::string>());
    m.cameras = resolve(base, j.at("cameras").get<std::string>());
    if (j.contains("images"))
        for (const auto& s : j.at("images")) m.images.push_back(resolve(base, s.get<std::string>()));
    m.steps_per_ray = j.value("steps_per_ray", m.steps_per_ray);
    m.vis_mode = j.value("vis_mode", m.vis_mode);
    if (m.steps_per_ray < 1) throw std::runtime_error("manifest steps_per_ray must be >= 1");
    parse_vis_mode(m.vis_mode);
    return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
    nlohmann::json j;
    j["grid"] = m.grid;
    j["env"] = m.env;
    j["cameras"] = m.cameras;
    j["images"] = m.images;
    j["steps_per_ray"] = m.steps_per_ray;
    j["vis_mode"] = m.vis_mode;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

int run(int argc, const char* const* argv) {
    CLI::App app{"SGGX microflake volume renderer and inverse fitter"};
    app.require_subcommand(1);

    std::string preset_name = "sphere", out_dir, manifest_path, config_path, env_path;
    std::string vis_mode, checkpoint_dir, resume_from;
    int grid_res = 16, views = 8, image_res = 64, threads = 1, view = -1;
    int mk_steps = 64, steps = 0;  // 0: take steps_per_ray from the manifest
    int iterations = -1, light_free = -1, checkpoint_every = 0, op_threads = 0;
    std::uint64_t seed = 1;
    std::vector<double> matrix, offset;
    double w_diffuse = 1.0, w_specular = 1.0;

    auto* mk = app.add_subcommand("make-synthetic", "build a synthetic scene and render it");
    mk->add_option("--preset", preset_name, "sphere | two-material-blob | occluder-slab");
    mk->add_option("--out", out_dir)->required();
    mk->add_option("--grid-res", grid_res);
    mk->add_option("--views", views);
    mk->add_option("--image-res", image_res);
    mk->add_option("--seed", seed);
    mk->add_option("--steps", mk_steps);
    mk->add_option("--threads", threads);

    auto* rd = app.add_subcommand("render", "render views of a scene bundle");
    rd->add_option("--manifest", manifest_path)->required();
    rd->add_option("--out", out_dir)->required();
    rd->add_option("--view", view, "single view index; default all");
    rd->add_option("--steps", steps);
    rd->add_option("--vis", vis_mode, "sg-fit | marched | off");
    rd->add_option("--threads", threads);

    auto* op = app.add_subcommand("optimize", "fit a scene to the manifest's images");
    op->add_option("--manifest", manifest_path)->required();
    op->add_option("--out", out_dir)->required();
    op->add_option("--config", config_path);
    op->add_option("--iterations", iterations);
    op->add_option("--light-free", light_free, "1: fit the light too");
    auto* seed_opt = op->add_option("--seed", seed);
    op->add_option("--threads", op_threads);
    op->add_option("--checkpoint-dir", checkpoint_dir);
    op->add_option("--checkpoint-every", checkpoint_every);
    op->add_option("--resume-from", resume_from);

    auto* rl = app.add_subcommand("relight", "render under a different light");
    rl->add_option("--manifest", manifest_path)->required();
    rl->add_option("--env", env_path)->required();
    rl->add_option("--out", out_dir)->required();
    rl->add_option("--view", view);
    rl->add_option("--steps", steps);
    rl->add_option("--vis", vis_mode);
    rl->add_option("--threads", threads);

    auto* ed = app.add_subcommand("edit", "render with albedo/scatter edits");
    ed->add_option("--manifest", manifest_path)->required();
    ed->add_option("--out", out_dir)->required();
    ed->add_option("--albedo-matrix", matrix, "9 row-major entries")->expected(9);
    ed->add_option("--albedo-offset", offset, "3 entries")->expected(3);
    ed->add_option("--w-diffuse", w_diffuse);
    ed->add_option("--w-specular", w_specular);
    ed->add_option("--view", view);
    ed->add_option("--steps", steps);
    ed->add_option("--vis", vis_mode);
    ed->add_option("--threads", threads);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitInputError;
    }

    try {
        if (mk->parsed())
            return cmd_make_synthetic(preset_name, grid_res, views, image_res, seed, mk_steps,
                                      threads, out_dir);
        if (rd->parsed())
            return cmd_render(manifest_path, out_dir, view, steps, vis_mode, threads);
        if (op->parsed())
            return cmd_optimize(manifest_path, config_path, out_dir, iterations, light_free, seed,
                                seed_opt->count() > 0, op_threads, checkpoint_dir,
                                checkpoint_every, resume_from);
        if (rl->parsed())
            return cmd_relight(manifest_path, env_path, out_dir, view, steps, vis_mode, threads);
        if (ed->parsed())
            return cmd_edit(manifest_path, out_dir, view, steps, vis_mode, threads, matrix, offset,
                            w_diffuse, w_specular);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const std::exception& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumericError;
    }
    return kExitInputError;
}

}  // namespace flakevol::cli
