#include "flakevol/field.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace flakevol::field {

static_assert(std::endian::native == std::endian::little,
              "grid files are little-endian; big-endian hosts are unsupported");

VolumeGrid::VolumeGrid(int nx, int ny, int nz, Vec3 lo_, Vec3 hi_, int k)
    : lo(lo_), hi(hi_), latent_dim(k) {
    if (nx < 1 || ny < 1 || nz < 1 || k < 1)
        throw std::invalid_argument("VolumeGrid: resolution and latent_dim must be >= 1");
    if (!(hi_.x > lo_.x && hi_.y > lo_.y && hi_.z > lo_.z))
        throw std::invalid_argument("VolumeGrid: empty bounds");
    res[0] = nx;
    res[1] = ny;
    res[2] = nz;
    raw_density.assign(voxel_count(), 0.f);
    raw_normal.assign(voxel_count() * 3, 0.f);
    latent.assign(voxel_count() * latent_dim, 0.f);
}

Vec3 VolumeGrid::voxel_center(int ix, int iy, int iz) const {
    Vec3 sp = spacing();
    return {lo.x + (ix + 0.5) * sp.x, lo.y + (iy + 0.5) * sp.y, lo.z + (iz + 0.5) * sp.z};
}

void VolumeGrid::reproject_normals() {
    for (std::size_t v = 0; v < voxel_count(); ++v) {
        Vec3 n{raw_normal[3 * v], raw_normal[3 * v + 1], raw_normal[3 * v + 2]};
        double len = length(n);
        if (len >= kNormalFloor) continue;
        n = len > 0.0 ? n * (kNormalFloor / len) : Vec3{0, 0, kNormalFloor};
        raw_normal[3 * v] = static_cast<float>(n.x);
        raw_normal[3 * v + 1] = static_cast<float>(n.y);
        raw_normal[3 * v + 2] = static_cast<float>(n.z);
    }
}

TriStencil make_stencil(const VolumeGrid& grid, const Vec3& x) {
    TriStencil st;
    if (!grid.contains(x)) {
        for (int c = 0; c < 8; ++c) {
            st.idx[c] = 0;
            st.w[c] = 0.0;
        }
        st.inside = false;
        return st;
    }
    Vec3 sp = grid.spacing();
    int i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
        // Samples live at voxel centers; the half-voxel margin clamps to the
        // edge value so interpolation is continuous on the whole box.
        double u = (x[a] - grid.lo[a]) / sp[a] - 0.5;
        if (grid.res[a] == 1) {
            i0[a] = 0;
            f[a] = 0.0;
        } else {
            int i = static_cast<int>(std::floor(u));
            i0[a] = std::clamp(i, 0, grid.res[a] - 2);
            f[a] = std::clamp(u - i0[a], 0.0, 1.0);
        }
    }
    int c = 0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx, ++c) {
                int ix = std::min(i0[0] + dx, grid.res[0] - 1);
                int iy = std::min(i0[1] + dy, grid.res[1] - 1);
                int iz = std::min(i0[2] + dz, grid.res[2] - 1);
                st.idx[c] = grid.voxel_index(ix, iy, iz);
                st.w[c] = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) *
                          (dz ? f[2] : 1.0 - f[2]);
            }
    st.inside = true;
    return st;
}

double sample_raw_density(const VolumeGrid& grid, const TriStencil& st) {
    double acc = 0.0;
    for (int c = 0; c < 8; ++c) acc += st.w[c] * grid.raw_density[st.idx[c]];
    return acc;
}

double sample_density(const VolumeGrid& grid, const TriStencil& st) {
    if (!st.inside) return 0.0;
    return softplus(sample_raw_density(grid, st));
}

Vec3 sample_raw_normal(const VolumeGrid& grid, const TriStencil& st) {
    Vec3 acc{0, 0, 0};
    for (int c = 0; c < 8; ++c) {
        std::size_t b = 3 * st.idx[c];
        acc += Vec3{grid.raw_normal[b], grid.raw_normal[b + 1], grid.raw_normal[b + 2]} * st.w[c];
    }
    return acc;
}

void sample_latent(const VolumeGrid& grid, const TriStencil& st, double* z_out) {
    for (int k = 0; k < grid.latent_dim; ++k) z_out[k] = 0.0;
    for (int c = 0; c < 8; ++c) {
        const float* z = grid.latent.data() + st.idx[c] * grid.latent_dim;
        for (int k = 0; k < grid.latent_dim; ++k) z_out[k] += st.w[c] * z[k];
    }
}

void decode_appearance(const AppearanceDecoder& dec, const double* z, Vec3& albedo,
                       double& tau_m) {
    double y[4];
    for (int c = 0; c < 4; ++c) {
        double acc = dec.bias[c];
        const float* w = dec.weight.data() + c * dec.latent_dim;
        for (int k = 0; k < dec.latent_dim; ++k) acc += static_cast<double>(w[k]) * z[k];
        y[c] = acc;
    }
    albedo = {sigmoid(y[0]), sigmoid(y[1]), sigmoid(y[2])};
    tau_m = std::max(sigmoid(y[3]), kTauFloor);
}

FieldSample sample_field(const VolumeGrid& grid, const AppearanceDecoder& dec, const Vec3& x) {
    if (!std::isfinite(x.x) || !std::isfinite(x.y) || !std::isfinite(x.z))
        throw std::domain_error("sample_field: non-finite point");
    FieldSample out;
    TriStencil st = make_stencil(grid, x);
    if (!st.inside) return out;
    out.inside = true;
    out.sigma = softplus(sample_raw_density(grid, st));
    Vec3 n = sample_raw_normal(grid, st);
    double len = length(n);
    out.omega_m = len > 1e-9 ? n / len : Vec3{0, 0, 1};
    double z[64];
    if (grid.latent_dim > 64) throw std::invalid_argument("sample_field: latent_dim > 64");
    sample_latent(grid, st, z);
    decode_appearance(dec, z, out.albedo, out.tau_m);
    return out;
}

GradNormal density_gradient_normal(const VolumeGrid& grid, const Vec3& x) {
    Vec3 sp = grid.spacing();
    Vec3 g;
    for (int a = 0; a < 3; ++a) {
        Vec3 xp = x, xm = x;
        xp[a] += sp[a];
        xm[a] -= sp[a];
        double dp = sample_density(grid, make_stencil(grid, xp));
        double dm = sample_density(grid, make_stencil(grid, xm));
        g[a] = (dp - dm) / (2.0 * sp[a]);
    }
    GradNormal out;
    double len = length(g);
    if (len < 1e-8) {
        out.degenerate = true;
        return out;
    }
    out.n = g / (-len);
    return out;
}

namespace {

constexpr char kMagic[8] = {'F', 'L', 'A', 'K', 'E', 'G', 'R', 'D'};
constexpr std::uint32_t kVersion = 1;

struct GridHeader {
    char magic[8];
    std::uint32_t version;
    std::uint32_t res[3];
    float bounds[6];
    std::uint32_t latent_dim;
    std::uint8_t pad[12];
};
static_assert(sizeof(GridHeader) == 64, "grid header must be exactly 64 bytes");

}  // namespace

void save_grid(const VolumeGrid& grid, const AppearanceDecoder& dec, const std::string& path) {
    if (dec.latent_dim != grid.latent_dim)
        throw std::invalid_argument("save_grid: decoder/grid latent_dim mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write grid file: " + path);
    GridHeader h{};
    std::memcpy(h.magic, kMagic, 8);
    h.version = kVersion;
    for (int a = 0; a < 3; ++a) h.res[a] = static_cast<std::uint32_t>(grid.res[a]);
    h.bounds[0] = static_cast<float>(grid.lo.x);
    h.bounds[1] = static_cast<float>(grid.lo.y);
    h.bounds[2] = static_cast<float>(grid.lo.z);
    h.bounds[3] = static_cast<float>(grid.hi.x);
    h.bounds[4] = static_cast<float>(grid.hi.y);
    h.bounds[5] = static_cast<float>(grid.hi.z);
    h.latent_dim = static_cast<std::uint32_t>(grid.latent_dim);
    out.write(reinterpret_cast<const char*>(&h), sizeof h);
    auto dump = [&](const std::vector<float>& v) {
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(float)));
    };
    dump(grid.raw_density);
    dump(grid.raw_normal);
    dump(grid.latent);
    if (!out) throw std::runtime_error("write failed: " + path);
    out.close();

    nlohmann::json j;
    j["version"] = kVersion;
    j["latent_dim"] = dec.latent_dim;
    auto& w = j["weight"] = nlohmann::json::array();
    for (int c = 0; c < 4; ++c) {
        nlohmann::json row = nlohmann::json::array();
        for (int k = 0; k < dec.latent_dim; ++k)
            row.push_back(static_cast<double>(dec.weight[c * dec.latent_dim + k]));
        w.push_back(std::move(row));
    }
    j["bias"] = {static_cast<double>(dec.bias[0]), static_cast<double>(dec.bias[1]),
                 static_cast<double>(dec.bias[2]), static_cast<double>(dec.bias[3])};
    std::ofstream js(path + ".json");
    if (!js) throw std::runtime_error("cannot write grid sidecar: " + path + ".json");
    js << j.dump(2) << "\n";
    if (!js) throw std::runtime_error("write failed: " + path + ".json");
}

std::pair<VolumeGrid, AppearanceDecoder> load_grid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open grid file: " + path);
    GridHeader h{};
    in.read(reinterpret_cast<char*>(&h), sizeof h);
    if (!in || std::memcmp(h.magic, kMagic, 8) != 0)
        throw std::runtime_error("not a grid file: " + path);
    if (h.version != kVersion)
        throw std::runtime_error("unsupported grid version " + std::to_string(h.version) + ": " +
                                 path);
    if (h.res[0] < 1 || h.res[1] < 1 || h.res[2] < 1 || h.latent_dim < 1 ||
        h.res[0] > 4096 || h.res[1] > 4096 || h.res[2] > 4096 || h.latent_dim > 64)
        throw std::runtime_error("grid header out of range: " + path);

    VolumeGrid grid(static_cast<int>(h.res[0]), static_cast<int>(h.res[1]),
                    static_cast<int>(h.res[2]),
                    Vec3{h.bounds[0], h.bounds[1], h.bounds[2]},
                    Vec3{h.bounds[3], h.bounds[4], h.bounds[5]},
                    static_cast<int>(h.latent_dim));
    auto slurp = [&](std::vector<float>& v) {
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(v.size() * sizeof(float)))
            throw std::runtime_error("truncated grid file: " + path);
    };
    slurp(grid.raw_density);
    slurp(grid.raw_normal);
    slurp(grid.latent);

    std::ifstream js(path + ".json");
    if (!js) throw std::runtime_error("missing grid sidecar: " + path + ".json");
    nlohmann::json j;
    try {
        js >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("grid sidecar parse error: " + path + ".json: " + e.what());
    }
    AppearanceDecoder dec(grid.latent_dim);
    if (j.value("latent_dim", -1) != grid.latent_dim)
        throw std::runtime_error("grid sidecar latent_dim mismatch: " + path + ".json");
    const auto& w = j.at("weight");
    const auto& b = j.at("bias");
    if (!w.is_array() || w.size() != 4 || !b.is_array() || b.size() != 4)
        throw std::runtime_error("grid sidecar shape mismatch: " + path + ".json");
    for (int c = 0; c < 4; ++c) {
        if (!w[c].is_array() || static_cast<int>(w[c].size()) != grid.latent_dim)
            throw std::runtime_error("grid sidecar shape mismatch: " + path + ".json");
        for (int k = 0; k < grid.latent_dim; ++k)
            dec.weight[c * grid.latent_dim + k] = w[c][k].get<float>();
        dec.bias[c] = b[c].get<float>();
    }
    return {std::move(grid), std::move(dec)};
}

}  // namespace flakevol::field
