#include "evseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "evseg/errors.hpp"
#include "evseg/rng.hpp"

namespace evseg {
namespace {

// ---- small dense linear algebra --------------------------------------

// Cholesky factorisation of a symmetric positive definite 6x6 matrix,
// stored row-major. Returns false when a pivot collapses, which for the
// DTI normal equations means the gradient directions do not span the
// tensor space.
struct Cholesky6 {
    double l[6][6] = {};

    bool factor(const double a[6][6]) {
        double max_diag = 0.0;
        for (int i = 0; i < 6; ++i) max_diag = std::max(max_diag, std::abs(a[i][i]));
        const double floor = 1e-10 * std::max(max_diag, 1e-300);
        for (int i = 0; i < 6; ++i) {
            for (int j = 0; j <= i; ++j) {
                double sum = a[i][j];
                for (int k = 0; k < j; ++k) sum -= l[i][k] * l[j][k];
                if (i == j) {
                    if (!(sum > floor)) return false;
                    l[i][i] = std::sqrt(sum);
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
        return true;
    }

    void solve(const double b[6], double x[6]) const {
        double y[6];
        for (int i = 0; i < 6; ++i) {
            double sum = b[i];
            for (int k = 0; k < i; ++k) sum -= l[i][k] * y[k];
            y[i] = sum / l[i][i];
        }
        for (int i = 5; i >= 0; --i) {
            double sum = y[i];
            for (int k = i + 1; k < 6; ++k) sum -= l[k][i] * x[k];
            x[i] = sum / l[i][i];
        }
    }
};

// Eigenvalues of a symmetric 3x3 matrix by Jacobi rotations. Robust for
// any symmetric input; used directly when the closed form gets fragile.
std::array<double, 3> eig3_jacobi(double xx, double yy, double zz, double xy,
                                  double xz, double yz) {
    double a[3][3] = {{xx, xy, xz}, {xy, yy, yz}, {xz, yz, zz}};
    for (int sweep = 0; sweep < 50; ++sweep) {
        const double off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if (off < 1e-60) break;
        for (int p = 0; p < 2; ++p) {
            for (int q = p + 1; q < 3; ++q) {
                if (a[p][q] == 0.0) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < 3; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (int k = 0; k < 3; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::array<double, 3> eigs{a[0][0], a[1][1], a[2][2]};
    std::sort(eigs.begin(), eigs.end(), std::greater<double>());
    return eigs;
}

// ---- misc helpers ----------------------------------------------------

double quadratic_form(const float* tensor, std::size_t stride, std::size_t voxel,
                      const std::array<double, 3>& g) {
    const double xx = tensor[0 * stride + voxel];
    const double yy = tensor[1 * stride + voxel];
    const double zz = tensor[2 * stride + voxel];
    const double xy = tensor[3 * stride + voxel];
    const double xz = tensor[4 * stride + voxel];
    const double yz = tensor[5 * stride + voxel];
    return g[0] * g[0] * xx + g[1] * g[1] * yy + g[2] * g[2] * zz +
           2.0 * (g[0] * g[1] * xy + g[0] * g[2] * xz + g[1] * g[2] * yz);
}

void check_tensor_volume(const Volume& tensors) {
    if (tensors.channels() != kTensorChannels) {
        throw ShapeError("tensor volume must have 6 channels, got " +
                         std::to_string(tensors.channels()));
    }
}

}  // namespace

// ---- Shape -----------------------------------------------------------

Shape Shape::everywhere() {
    Shape s;
    s.kind = Kind::Everywhere;
    return s;
}

Shape Shape::sphere(double cx, double cy, double cz, double r) {
    Shape s;
    s.kind = Kind::Sphere;
    s.center = {cx, cy, cz};
    s.radius = r;
    return s;
}

Shape Shape::box(double x0, double y0, double z0, double x1, double y1, double z1) {
    Shape s;
    s.kind = Kind::Box;
    s.lo = {x0, y0, z0};
    s.hi = {x1, y1, z1};
    return s;
}

Shape Shape::shell(double cx, double cy, double cz, double r_inner, double r_outer) {
    Shape s;
    s.kind = Kind::Shell;
    s.center = {cx, cy, cz};
    s.inner_radius = r_inner;
    s.outer_radius = r_outer;
    return s;
}

bool Shape::contains(double x, double y, double z) const {
    switch (kind) {
        case Kind::Everywhere:
            return true;
        case Kind::Sphere: {
            const double dx = x - center[0], dy = y - center[1], dz = z - center[2];
            return dx * dx + dy * dy + dz * dz <= radius * radius;
        }
        case Kind::Box:
            return x >= lo[0] && x <= hi[0] && y >= lo[1] && y <= hi[1] &&
                   z >= lo[2] && z <= hi[2];
        case Kind::Shell: {
            const double dx = x - center[0], dy = y - center[1], dz = z - center[2];
            const double d2 = dx * dx + dy * dy + dz * dz;
            return d2 >= inner_radius * inner_radius &&
                   d2 <= outer_radius * outer_radius;
        }
    }
    return false;
}

void Shape::bounds(std::array<double, 3>& out_lo, std::array<double, 3>& out_hi) const {
    switch (kind) {
        case Kind::Everywhere:
            out_lo = {-1e30, -1e30, -1e30};
            out_hi = {1e30, 1e30, 1e30};
            return;
        case Kind::Sphere:
            for (int i = 0; i < 3; ++i) {
                out_lo[i] = center[i] - radius;
                out_hi[i] = center[i] + radius;
            }
            return;
        case Kind::Box:
            out_lo = lo;
            out_hi = hi;
            return;
        case Kind::Shell:
            for (int i = 0; i < 3; ++i) {
                out_lo[i] = center[i] - outer_radius;
                out_hi[i] = center[i] + outer_radius;
            }
            return;
    }
}

void Shape::validate() const {
    const auto finite3 = [](const std::array<double, 3>& v) {
        return std::isfinite(v[0]) && std::isfinite(v[1]) && std::isfinite(v[2]);
    };
    switch (kind) {
        case Kind::Everywhere:
            return;
        case Kind::Sphere:
            if (!finite3(center) || !(radius > 0.0)) {
                throw ConfigError("sphere needs a finite centre and radius > 0");
            }
            return;
        case Kind::Box:
            if (!finite3(lo) || !finite3(hi) || lo[0] > hi[0] || lo[1] > hi[1] ||
                lo[2] > hi[2]) {
                throw ConfigError("box corners are inverted or non-finite");
            }
            return;
        case Kind::Shell:
            if (!finite3(center) || !(inner_radius >= 0.0) ||
                !(outer_radius > inner_radius)) {
                throw ConfigError("shell needs 0 <= inner radius < outer radius");
            }
            return;
    }
}

// ---- specs -----------------------------------------------------------

std::array<double, 6> RegionSpec::diagonal_tensor(double e1, double e2, double e3) {
    return {e1, e2, e3, 0.0, 0.0, 0.0};
}

void PhantomSpec::validate() const {
    if (dims.voxel_count() == 0) {
        throw ConfigError("phantom dims must be nonzero, got " + to_string(dims));
    }
    if (regions.size() < 2) {
        throw ConfigError("need at least a background and one structure region");
    }
    if (regions.size() > 65535) {
        throw ConfigError("too many regions");
    }
    if (regions[0].shape.kind != Shape::Kind::Everywhere) {
        throw ConfigError("the first region must cover the whole grid "
                          "(shape = everywhere)");
    }
    for (std::size_t i = 0; i < regions.size(); ++i) {
        const RegionSpec& r = regions[i];
        if (r.name.empty()) {
            throw ConfigError("region " + std::to_string(i) + " has no name");
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (regions[j].name == r.name) {
                throw ConfigError("duplicate region name '" + r.name + "'");
            }
        }
        r.shape.validate();
        if (!(r.s0 > 0.0) || !std::isfinite(r.s0)) {
            throw ConfigError("region '" + r.name + "' needs s0 > 0");
        }
        for (double t : r.tensor) {
            if (!std::isfinite(t)) {
                throw ConfigError("region '" + r.name + "' has a non-finite tensor");
            }
        }
        const auto eigs = tensor_eigenvalues(r.tensor);
        if (!(eigs[2] > 0.0)) {
            throw ConfigError("region '" + r.name +
                              "' tensor is not positive definite");
        }
    }
}

void LesionSpec::validate() const {
    shape.validate();
    if (shape.kind == Shape::Kind::Everywhere) {
        throw ConfigError("a lesion must be a bounded shape");
    }
    for (double t : tensor) {
        if (!std::isfinite(t)) throw ConfigError("lesion tensor is non-finite");
    }
    const auto eigs = tensor_eigenvalues(tensor);
    if (!(eigs[2] > 0.0)) {
        throw ConfigError("lesion tensor is not positive definite");
    }
    if (s0.has_value() && (!(*s0 > 0.0) || !std::isfinite(*s0))) {
        throw ConfigError("lesion s0 must be > 0");
    }
}

void DwiProtocol::validate() const {
    std::size_t b0 = 0, weighted = 0;
    for (const Measurement& m : measurements) {
        if (!std::isfinite(m.bvalue) || m.bvalue < 0.0) {
            throw ConfigError("b-values must be finite and >= 0");
        }
        const double norm2 = m.direction[0] * m.direction[0] +
                             m.direction[1] * m.direction[1] +
                             m.direction[2] * m.direction[2];
        if (m.bvalue == 0.0) {
            ++b0;
        } else {
            ++weighted;
            if (std::abs(std::sqrt(norm2) - 1.0) > 1e-6) {
                throw ConfigError("diffusion-weighted directions must be unit length");
            }
        }
    }
    if (b0 < 1) throw ConfigError("protocol needs at least one b = 0 image");
    if (weighted < 6) {
        throw ConfigError("protocol needs at least six diffusion-weighted images");
    }
    if (!std::isfinite(sigma) || sigma < 0.0) {
        throw ConfigError("noise sigma must be finite and >= 0");
    }
}

std::size_t DwiProtocol::b0_count() const {
    std::size_t n = 0;
    for (const Measurement& m : measurements) n += (m.bvalue == 0.0);
    return n;
}

DwiProtocol DwiProtocol::make(double bvalue, std::size_t num_directions,
                              std::size_t num_b0, double sigma) {
    if (!(bvalue > 0.0)) throw ConfigError("bvalue must be > 0");
    DwiProtocol p;
    p.sigma = sigma;
    p.measurements.reserve(num_b0 + num_directions);
    for (std::size_t i = 0; i < num_b0; ++i) {
        p.measurements.push_back({0.0, {0.0, 0.0, 0.0}});
    }
    // Fibonacci sphere lattice: near-uniform coverage for any count.
    const double golden_angle = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (std::size_t i = 0; i < num_directions; ++i) {
        const double z =
            1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(num_directions);
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden_angle * static_cast<double>(i);
        p.measurements.push_back(
            {bvalue, {r * std::cos(phi), r * std::sin(phi), z}});
    }
    p.validate();
    return p;
}

void DatasetSpec::validate() const {
    if (count < 3) {
        throw ConfigError("dataset needs at least 3 volumes, got " +
                          std::to_string(count));
    }
    double total = 0.0;
    for (double f : split) {
        if (!(f >= 0.0) || !std::isfinite(f)) {
            throw ConfigError("split fractions must be >= 0");
        }
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("split fractions must sum to 1");
    }
    if (!(split[0] > 0.0) || !(split[2] > 0.0)) {
        throw ConfigError("train and test splits must both be non-empty");
    }
    if (!(jitter_geometry >= 0.0) || jitter_geometry > 0.5 ||
        !(jitter_tensor >= 0.0) || jitter_tensor > 0.5) {
        throw ConfigError("jitter amounts must lie in [0, 0.5]");
    }
}

// ---- phantom construction --------------------------------------------

PhantomData generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const Dims& d = spec.dims;
    std::vector<std::string> names;
    names.reserve(spec.regions.size());
    for (const RegionSpec& r : spec.regions) names.push_back(r.name);

    PhantomData out{
        LabelMap(d, static_cast<std::uint16_t>(spec.regions.size()), names,
                 spec.voxel_size),
        Volume(d, kTensorChannels, 0.0f, spec.voxel_size),
        Volume(d, 1, 0.0f, spec.voxel_size),
    };

    const std::size_t voxels = d.voxel_count();
    std::vector<std::uint16_t> labels(voxels, 0);
    float* tensor_data = out.tensors.data().data();
    float* s0_data = out.s0.data().data();

    for (std::size_t ri = 0; ri < spec.regions.size(); ++ri) {
        const RegionSpec& region = spec.regions[ri];
        std::array<double, 3> blo, bhi;
        region.shape.bounds(blo, bhi);
        const auto clamp_lo = [](double v, std::uint32_t n) {
            return static_cast<std::uint32_t>(
                std::clamp(std::ceil(v), 0.0, static_cast<double>(n - 1)));
        };
        const auto clamp_hi = [](double v, std::uint32_t n) {
            return static_cast<std::uint32_t>(
                std::clamp(std::floor(v), 0.0, static_cast<double>(n - 1)));
        };
        const std::uint32_t x0 = clamp_lo(blo[0], d.nx), x1 = clamp_hi(bhi[0], d.nx);
        const std::uint32_t y0 = clamp_lo(blo[1], d.ny), y1 = clamp_hi(bhi[1], d.ny);
        const std::uint32_t z0 = clamp_lo(blo[2], d.nz), z1 = clamp_hi(bhi[2], d.nz);
        for (std::uint32_t z = z0; z <= z1; ++z) {
            for (std::uint32_t y = y0; y <= y1; ++y) {
                for (std::uint32_t x = x0; x <= x1; ++x) {
                    if (!region.shape.contains(x, y, z)) continue;
                    const std::size_t i =
                        (static_cast<std::size_t>(z) * d.ny + y) * d.nx + x;
                    labels[i] = static_cast<std::uint16_t>(ri);
                    for (std::uint32_t c = 0; c < kTensorChannels; ++c) {
                        tensor_data[c * voxels + i] =
                            static_cast<float>(region.tensor[c]);
                    }
                    s0_data[i] = static_cast<float>(region.s0);
                }
            }
        }
    }

    out.labels = LabelMap::from_data(d, static_cast<std::uint16_t>(spec.regions.size()),
                                     std::move(labels), std::move(names),
                                     spec.voxel_size);
    return out;
}

Volume simulate_dwi(const Volume& tensors, const Volume& s0, const DwiProtocol& protocol,
                    std::uint64_t noise_seed) {
    check_tensor_volume(tensors);
    protocol.validate();
    if (!(tensors.dims() == s0.dims()) || s0.channels() != 1) {
        throw ShapeError("tensor and s0 grids do not match");
    }
    const std::size_t voxels = tensors.dims().voxel_count();
    const std::size_t k_count = protocol.measurements.size();
    Volume dwi(tensors.dims(), static_cast<std::uint32_t>(k_count), 0.0f,
               tensors.voxel_size());
    const float* tensor_data = tensors.data().data();
    const float* s0_data = s0.data().data();
    float* out = dwi.data().data();

    for (std::size_t k = 0; k < k_count; ++k) {
        const DwiProtocol::Measurement& m = protocol.measurements[k];
        for (std::size_t i = 0; i < voxels; ++i) {
            const double decay =
                m.bvalue == 0.0
                    ? 1.0
                    : std::exp(-m.bvalue *
                               quadratic_form(tensor_data, voxels, i, m.direction));
            double signal = static_cast<double>(s0_data[i]) * decay;
            if (protocol.sigma > 0.0) {
                Rng stream = Rng::at(noise_seed, i * k_count + k);
                const double e1 = protocol.sigma * stream.gaussian();
                const double e2 = protocol.sigma * stream.gaussian();
                signal = std::sqrt((signal + e1) * (signal + e1) + e2 * e2);
            }
            out[k * voxels + i] = static_cast<float>(signal);
        }
    }
    return dwi;
}

Volume fit_dti(const Volume& dwi, const DwiProtocol& protocol) {
    protocol.validate();
    if (dwi.channels() != protocol.measurements.size()) {
        throw ShapeError("volume has " + std::to_string(dwi.channels()) +
                         " channels but the protocol describes " +
                         std::to_string(protocol.measurements.size()));
    }

    // Design matrix rows for the log-signal model ln S = ln S0 - b g'Dg.
    std::vector<std::size_t> b0_rows, dw_rows;
    for (std::size_t k = 0; k < protocol.measurements.size(); ++k) {
        (protocol.measurements[k].bvalue == 0.0 ? b0_rows : dw_rows).push_back(k);
    }
    const std::size_t rows = dw_rows.size();
    std::vector<std::array<double, 6>> design(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const DwiProtocol::Measurement& m = protocol.measurements[dw_rows[r]];
        const double b = m.bvalue;
        const auto& g = m.direction;
        design[r] = {-b * g[0] * g[0],       -b * g[1] * g[1],
                     -b * g[2] * g[2],       -2.0 * b * g[0] * g[1],
                     -2.0 * b * g[0] * g[2], -2.0 * b * g[1] * g[2]};
    }

    double normal[6][6] = {};
    for (std::size_t r = 0; r < rows; ++r) {
        for (int i = 0; i < 6; ++i) {
            for (int j = 0; j < 6; ++j) {
                normal[i][j] += design[r][i] * design[r][j];
            }
        }
    }
    Cholesky6 chol;
    if (!chol.factor(normal)) {
        throw ConfigError(
            "gradient directions are degenerate; the tensor fit is singular");
    }

    const std::size_t voxels = dwi.dims().voxel_count();
    Volume tensors(dwi.dims(), kTensorChannels, 0.0f, dwi.voxel_size());
    const float* in = dwi.data().data();
    float* out = tensors.data().data();

    for (std::size_t i = 0; i < voxels; ++i) {
        double s0_mean = 0.0;
        for (std::size_t k : b0_rows) s0_mean += in[k * voxels + i];
        s0_mean /= static_cast<double>(b0_rows.size());
        if (!(s0_mean > 0.0)) continue;  // dead voxel, leave a zero tensor

        double rhs[6] = {};
        const double log_floor = std::log(1e-6);
        for (std::size_t r = 0; r < rows; ++r) {
            const double s = in[dw_rows[r] * voxels + i];
            // Noise can push a measurement to (or below) zero; floor the
            // ratio so the log stays finite.
            const double y =
                std::max(std::log(std::max(s / s0_mean, 0.0)), log_floor);
            for (int c = 0; c < 6; ++c) rhs[c] += design[r][c] * y;
        }
        double d[6];
        chol.solve(rhs, d);
        for (int c = 0; c < 6; ++c) {
            out[static_cast<std::size_t>(c) * voxels + i] = static_cast<float>(d[c]);
        }
    }
    return tensors;
}

std::array<double, 3> tensor_eigenvalues(const std::array<double, 6>& t) {
    const double xx = t[0], yy = t[1], zz = t[2], xy = t[3], xz = t[4], yz = t[5];
    const double off2 = xy * xy + xz * xz + yz * yz;
    if (off2 == 0.0) {
        std::array<double, 3> eigs{xx, yy, zz};
        std::sort(eigs.begin(), eigs.end(), std::greater<double>());
        return eigs;
    }

    // Closed-form symmetric 3x3 eigenvalues via the characteristic
    // trigonometric identity.
    const double q = (xx + yy + zz) / 3.0;
    const double p2 = (xx - q) * (xx - q) + (yy - q) * (yy - q) + (zz - q) * (zz - q) +
                      2.0 * off2;
    const double p = std::sqrt(p2 / 6.0);
    if (!(p > 0.0)) {
        return {q, q, q};
    }
    const double inv_p = 1.0 / p;
    const double bxx = (xx - q) * inv_p, byy = (yy - q) * inv_p,
                 bzz = (zz - q) * inv_p;
    const double bxy = xy * inv_p, bxz = xz * inv_p, byz = yz * inv_p;
    const double det_b = bxx * (byy * bzz - byz * byz) - bxy * (bxy * bzz - byz * bxz) +
                         bxz * (bxy * byz - byy * bxz);
    const double r = std::clamp(det_b / 2.0, -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    const double two_pi_third = 2.0 * std::numbers::pi / 3.0;
    std::array<double, 3> eigs{
        q + 2.0 * p * std::cos(phi),
        0.0,
        q + 2.0 * p * std::cos(phi + two_pi_third),
    };
    eigs[1] = 3.0 * q - eigs[0] - eigs[2];

    // Near-coincident eigenvalues make the closed form ill-conditioned
    // (the acos argument sits at +-1, where rounding alone can split a
    // repeated root by ~sqrt(eps) * spread). Treat any gap inside that
    // noise band as a collision and fall back to Jacobi iteration on the
    // original matrix.
    const double gap_floor = 1e-12 + 1e-6 * p;
    if (eigs[0] - eigs[1] < gap_floor || eigs[1] - eigs[2] < gap_floor) {
        return eig3_jacobi(xx, yy, zz, xy, xz, yz);
    }
    return eigs;
}

Volume derive_params(const Volume& tensors) {
    check_tensor_volume(tensors);
    const std::size_t voxels = tensors.dims().voxel_count();
    Volume params(tensors.dims(), kParamChannels, 0.0f, tensors.voxel_size());
    const float* in = tensors.data().data();
    float* out = params.data().data();

    for (std::size_t i = 0; i < voxels; ++i) {
        const std::array<double, 6> t{in[0 * voxels + i], in[1 * voxels + i],
                                      in[2 * voxels + i], in[3 * voxels + i],
                                      in[4 * voxels + i], in[5 * voxels + i]};
        const std::array<double, 3> eigs = tensor_eigenvalues(t);
        const double md = (eigs[0] + eigs[1] + eigs[2]) / 3.0;
        const double dev = (eigs[0] - md) * (eigs[0] - md) +
                           (eigs[1] - md) * (eigs[1] - md) +
                           (eigs[2] - md) * (eigs[2] - md);
        const double mag = eigs[0] * eigs[0] + eigs[1] * eigs[1] + eigs[2] * eigs[2];
        double fa = 0.0;
        if (mag > 0.0) {
            fa = std::clamp(std::sqrt(1.5 * dev / mag), 0.0, 1.0);
        }
        out[kFa * voxels + i] = static_cast<float>(fa);
        out[kMd * voxels + i] = static_cast<float>(md);
        out[kE1 * voxels + i] = static_cast<float>(eigs[0]);
        out[kE2 * voxels + i] = static_cast<float>(eigs[1]);
        out[kE3 * voxels + i] = static_cast<float>(eigs[2]);
    }
    return params;
}

Mask inject_lesion(PhantomData& phantom, const LesionSpec& lesion) {
    lesion.validate();
    const Dims& d = phantom.labels.dims();
    if (!(phantom.tensors.dims() == d) || !(phantom.s0.dims() == d)) {
        throw ShapeError("phantom pieces are on different grids");
    }
    std::array<double, 3> blo, bhi;
    lesion.shape.bounds(blo, bhi);
    const double limit[3] = {static_cast<double>(d.nx) - 1.0,
                             static_cast<double>(d.ny) - 1.0,
                             static_cast<double>(d.nz) - 1.0};
    for (int a = 0; a < 3; ++a) {
        if (blo[a] < 0.0 || bhi[a] > limit[a]) {
            throw ConfigError("lesion shape reaches outside the volume");
        }
    }

    Mask mask(d);
    const std::size_t voxels = d.voxel_count();
    float* tensor_data = phantom.tensors.data().data();
    float* s0_data = phantom.s0.data().data();
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        for (std::uint32_t y = 0; y < d.ny; ++y) {
            for (std::uint32_t x = 0; x < d.nx; ++x) {
                if (!lesion.shape.contains(x, y, z)) continue;
                mask.set(x, y, z, true);
                const std::size_t i = mask.index(x, y, z);
                for (std::uint32_t c = 0; c < kTensorChannels; ++c) {
                    tensor_data[c * voxels + i] = static_cast<float>(lesion.tensor[c]);
                }
                if (lesion.s0.has_value()) {
                    s0_data[i] = static_cast<float>(*lesion.s0);
                }
            }
        }
    }
    return mask;
}

Volume zscore_channels(const Volume& volume) {
    const std::size_t voxels = volume.dims().voxel_count();
    Volume out(volume.dims(), volume.channels(), 0.0f, volume.voxel_size());
    for (std::uint32_t c = 0; c < volume.channels(); ++c) {
        const float* in = volume.data().data() + static_cast<std::size_t>(c) * voxels;
        float* dst = out.data().data() + static_cast<std::size_t>(c) * voxels;
        double mean = 0.0;
        for (std::size_t i = 0; i < voxels; ++i) mean += in[i];
        mean /= static_cast<double>(voxels);
        double var = 0.0;
        for (std::size_t i = 0; i < voxels; ++i) {
            const double d = in[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(voxels);
        const double sd = std::sqrt(var);
        if (sd < 1e-12) continue;  // constant channel stays all zero
        for (std::size_t i = 0; i < voxels; ++i) {
            dst[i] = static_cast<float>((in[i] - mean) / sd);
        }
    }
    return out;
}

// ---- dataset generation ----------------------------------------------

namespace {

// Per-volume random variation. The draw order is part of the file-level
// determinism contract: geometry first (in region order), then tensor and
// s0 factors.
PhantomSpec jitter_spec(const PhantomSpec& base, const DatasetSpec& ds, Rng& rng) {
    PhantomSpec spec = base;
    const double jg = ds.jitter_geometry;
    const double jt = ds.jitter_tensor;
    for (RegionSpec& region : spec.regions) {
        Shape& s = region.shape;
        switch (s.kind) {
            case Shape::Kind::Everywhere:
                break;
            case Shape::Kind::Sphere: {
                for (int a = 0; a < 3; ++a) {
                    s.center[a] += rng.uniform(-jg, jg) * s.radius;
                }
                s.radius *= 1.0 + rng.uniform(-jg, jg);
                break;
            }
            case Shape::Kind::Box: {
                for (int a = 0; a < 3; ++a) {
                    const double extent = s.hi[a] - s.lo[a];
                    s.lo[a] += rng.uniform(-jg, jg) * extent;
                    s.hi[a] += rng.uniform(-jg, jg) * extent;
                    if (s.lo[a] > s.hi[a]) std::swap(s.lo[a], s.hi[a]);
                }
                break;
            }
            case Shape::Kind::Shell: {
                for (int a = 0; a < 3; ++a) {
                    s.center[a] += rng.uniform(-jg, jg) * s.outer_radius;
                }
                const double factor = 1.0 + rng.uniform(-jg, jg);
                s.inner_radius *= factor;
                s.outer_radius *= factor;
                break;
            }
        }

        // Tensor variation: an overall scale plus an anisotropy stretch of
        // the deviatoric part. Both keep the tensor positive definite for
        // the modest factors allowed here.
        const double scale = 1.0 + rng.uniform(-jt, jt);
        const double stretch = 1.0 + rng.uniform(-jt, jt);
        const double md = (region.tensor[0] + region.tensor[1] + region.tensor[2]) / 3.0;
        for (int c = 0; c < 6; ++c) {
            const double iso = c < 3 ? md : 0.0;
            region.tensor[c] = scale * (iso + stretch * (region.tensor[c] - iso));
        }
        region.s0 *= 1.0 + rng.uniform(-jt, jt);
    }
    return spec;
}

DatasetSample build_sample(const PhantomSpec& spec, const DwiProtocol& protocol,
                           std::uint64_t noise_seed, const LesionSpec* lesion,
                           Mask* lesion_mask) {
    PhantomData phantom = generate_phantom(spec);
    if (lesion != nullptr) {
        Mask m = inject_lesion(phantom, *lesion);
        if (lesion_mask != nullptr) *lesion_mask = std::move(m);
    }
    const Volume dwi = simulate_dwi(phantom.tensors, phantom.s0, protocol, noise_seed);
    const Volume fitted = fit_dti(dwi, protocol);
    const Volume params = derive_params(fitted);
    DatasetSample sample;
    sample.channels = zscore_channels(params);
    sample.labels = std::move(phantom.labels);
    sample.spec = spec;
    sample.noise_seed = noise_seed;
    return sample;
}

}  // namespace

DatasetSample regenerate_sample(const PhantomSpec& spec, const DwiProtocol& protocol,
                                std::uint64_t noise_seed, const LesionSpec* lesion,
                                Mask* lesion_mask) {
    return build_sample(spec, protocol, noise_seed, lesion, lesion_mask);
}

Dataset make_dataset(const PhantomSpec& base, const DwiProtocol& protocol,
                     const DatasetSpec& dataset_spec, std::uint64_t seed) {
    base.validate();
    protocol.validate();
    dataset_spec.validate();

    const std::size_t count = dataset_spec.count;
    std::size_t n_train = static_cast<std::size_t>(
        std::llround(dataset_spec.split[0] * static_cast<double>(count)));
    std::size_t n_val = static_cast<std::size_t>(
        std::llround(dataset_spec.split[1] * static_cast<double>(count)));
    n_train = std::max<std::size_t>(n_train, 1);
    if (n_train + n_val >= count) {
        n_val = 0;
        n_train = std::min(n_train, count - 1);
    }

    // Split membership depends only on the seed, not on generation order.
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    Rng split_rng(Rng::mix(seed, 0x5e9d));
    split_rng.shuffle(order);

    Dataset out;
    for (std::size_t pos = 0; pos < count; ++pos) {
        const std::size_t i = order[pos];
        Rng jitter_rng(Rng::mix(seed, 0x1000 + i));
        const PhantomSpec spec = jitter_spec(base, dataset_spec, jitter_rng);
        const std::uint64_t noise_seed = Rng::mix(seed, 0x2000 + i);
        DatasetSample sample = build_sample(spec, protocol, noise_seed, nullptr, nullptr);
        if (pos < n_train) {
            out.train.push_back(std::move(sample));
        } else if (pos < n_train + n_val) {
            out.val.push_back(std::move(sample));
        } else {
            out.test.push_back(std::move(sample));
        }
    }
    return out;
}

// ---- config file binding ---------------------------------------------

namespace {

Shape parse_shape(const std::vector<std::string>& tokens, const std::string& key) {
    const auto need = [&](std::size_t n) {
        if (tokens.size() != n + 1) {
            throw ConfigError("wrong number of parameters for '" + key + "'");
        }
    };
    const auto num = [&](std::size_t idx) {
        try {
            std::size_t used = 0;
            const double v = std::stod(tokens[idx], &used);
            if (used != tokens[idx].size()) throw std::invalid_argument("trail");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("cannot parse shape parameter '" + tokens[idx] +
                              "' for '" + key + "'");
        }
    };
    if (tokens.empty()) throw ConfigError("empty shape for '" + key + "'");
    const std::string& kind = tokens[0];
    if (kind == "everywhere") {
        need(0);
        return Shape::everywhere();
    }
    if (kind == "sphere") {
        need(4);
        return Shape::sphere(num(1), num(2), num(3), num(4));
    }
    if (kind == "box") {
        need(6);
        return Shape::box(num(1), num(2), num(3), num(4), num(5), num(6));
    }
    if (kind == "shell") {
        need(5);
        return Shape::shell(num(1), num(2), num(3), num(4), num(5));
    }
    throw ConfigError("unknown shape kind '" + kind + "' for '" + key + "'");
}

std::array<double, 6> parse_tensor(const KvFile& kv, const std::string& prefix) {
    const bool has_eigs = kv.has(prefix + ".eigenvalues");
    const bool has_tensor = kv.has(prefix + ".tensor");
    if (has_eigs == has_tensor) {
        throw ConfigError("'" + prefix +
                          "' needs exactly one of .eigenvalues or .tensor");
    }
    if (has_eigs) {
        const auto e = kv.get_doubles(prefix + ".eigenvalues");
        if (e.size() != 3) {
            throw ConfigError("'" + prefix + ".eigenvalues' needs three values");
        }
        return RegionSpec::diagonal_tensor(e[0], e[1], e[2]);
    }
    const auto t = kv.get_doubles(prefix + ".tensor");
    if (t.size() != 6) {
        throw ConfigError("'" + prefix + ".tensor' needs six values");
    }
    return {t[0], t[1], t[2], t[3], t[4], t[5]};
}

}  // namespace

PhantomFile parse_phantom_file(const KvFile& kv) {
    kv.expect_known_keys({
        "dims", "voxel_size", "seed",
        "region.*.name", "region.*.shape", "region.*.eigenvalues",
        "region.*.tensor", "region.*.s0",
        "protocol.bvalue", "protocol.directions", "protocol.b0", "protocol.sigma",
        "dataset.count", "dataset.split", "dataset.jitter_geometry",
        "dataset.jitter_tensor",
        "lesion.shape", "lesion.eigenvalues", "lesion.tensor", "lesion.s0",
    });

    PhantomFile out;

    const auto dims = kv.get_doubles("dims");
    if (dims.size() != 3 || dims[0] < 1 || dims[1] < 1 || dims[2] < 1) {
        throw ConfigError("'dims' needs three positive values");
    }
    out.spec.dims = {static_cast<std::uint32_t>(dims[0]),
                     static_cast<std::uint32_t>(dims[1]),
                     static_cast<std::uint32_t>(dims[2])};
    if (kv.has("voxel_size")) {
        const auto vs = kv.get_doubles("voxel_size");
        if (vs.size() != 3) throw ConfigError("'voxel_size' needs three values");
        out.spec.voxel_size = {static_cast<float>(vs[0]), static_cast<float>(vs[1]),
                               static_cast<float>(vs[2])};
    }
    out.seed = kv.get_u64_or("seed", 0);

    for (std::size_t i = 0;; ++i) {
        const std::string prefix = "region." + std::to_string(i);
        if (!kv.has(prefix + ".shape")) {
            if (kv.has(prefix + ".name")) {
                throw ConfigError("'" + prefix + "' has a name but no shape");
            }
            break;
        }
        RegionSpec region;
        region.name = kv.get_or(prefix + ".name", "region_" + std::to_string(i));
        region.shape = parse_shape(kv.get_tokens(prefix + ".shape"), prefix + ".shape");
        region.tensor = parse_tensor(kv, prefix);
        region.s0 = kv.get_double_or(prefix + ".s0", 1.0);
        out.spec.regions.push_back(std::move(region));
    }

    out.protocol = DwiProtocol::make(
        kv.get_double_or("protocol.bvalue", 1000.0),
        static_cast<std::size_t>(kv.get_int_or("protocol.directions", 30)),
        static_cast<std::size_t>(kv.get_int_or("protocol.b0", 1)),
        kv.get_double_or("protocol.sigma", 0.015));

    out.dataset.count = static_cast<std::size_t>(kv.get_int_or("dataset.count", 8));
    if (kv.has("dataset.split")) {
        const auto split = kv.get_doubles("dataset.split");
        if (split.size() != 3) throw ConfigError("'dataset.split' needs three values");
        out.dataset.split = {split[0], split[1], split[2]};
    }
    out.dataset.jitter_geometry = kv.get_double_or("dataset.jitter_geometry", 0.05);
    out.dataset.jitter_tensor = kv.get_double_or("dataset.jitter_tensor", 0.07);

    if (kv.has("lesion.shape")) {
        LesionSpec lesion;
        lesion.shape = parse_shape(kv.get_tokens("lesion.shape"), "lesion.shape");
        lesion.tensor = parse_tensor(kv, "lesion");
        if (kv.has("lesion.s0")) lesion.s0 = kv.get_double("lesion.s0");
        lesion.validate();
        out.lesion = std::move(lesion);
    }

    out.spec.validate();
    out.dataset.validate();
    return out;
}

}  // namespace evseg
