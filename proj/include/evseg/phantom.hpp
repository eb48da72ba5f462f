#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evseg/kv.hpp"
#include "evseg/volume.hpp"

namespace evseg {

// Symmetric diffusion tensors are stored as six channels in the order
// (xx, yy, zz, xy, xz, yz), in mm^2/s. Derived parameter volumes hold the
// five channels (FA, MD, E1, E2, E3) with eigenvalues sorted descending.
inline constexpr std::uint32_t kTensorChannels = 6;
inline constexpr std::uint32_t kParamChannels = 5;
enum ParamChannel : std::uint32_t { kFa = 0, kMd = 1, kE1 = 2, kE2 = 3, kE3 = 4 };

// Geometric primitive for painting regions. Coordinates are in voxel
// units; voxel (x, y, z) sits at position (x, y, z).
struct Shape {
    enum class Kind { Everywhere, Sphere, Box, Shell };

    Kind kind = Kind::Everywhere;
    std::array<double, 3> center{};  // sphere, shell
    double radius = 0.0;             // sphere
    double inner_radius = 0.0;       // shell
    double outer_radius = 0.0;       // shell
    std::array<double, 3> lo{};      // box corner, inclusive
    std::array<double, 3> hi{};      // box corner, inclusive

    static Shape everywhere();
    static Shape sphere(double cx, double cy, double cz, double r);
    static Shape box(double x0, double y0, double z0, double x1, double y1, double z1);
    static Shape shell(double cx, double cy, double cz, double r_inner,
                       double r_outer);

    bool contains(double x, double y, double z) const;

    // Axis-aligned bounds of the occupied space (unbounded for Everywhere,
    // where the grid extent applies instead).
    void bounds(std::array<double, 3>& out_lo, std::array<double, 3>& out_hi) const;

    void validate() const;
};

// One labelled tissue region: a shape plus the diffusion tensor and the
// non-diffusion-weighted signal level painted inside it. Later regions in
// a PhantomSpec overwrite earlier ones where they overlap.
struct RegionSpec {
    std::string name;
    Shape shape;
    std::array<double, 6> tensor{};  // (xx, yy, zz, xy, xz, yz)
    double s0 = 1.0;

    static std::array<double, 6> diagonal_tensor(double e1, double e2, double e3);
};

struct PhantomSpec {
    Dims dims{48, 48, 32};
    VoxelSize voxel_size{2.0f, 2.0f, 2.0f};
    std::vector<RegionSpec> regions;  // regions[0] must cover everything

    // Region count doubles as class count; throws ConfigError on empty
    // names, non-positive-definite tensors, bad s0 or a first region that
    // does not cover the grid.
    void validate() const;
};

// Ground truth produced by generate_phantom.
struct PhantomData {
    LabelMap labels;   // class = region index
    Volume tensors;    // 6 channels
    Volume s0;         // 1 channel
};

// Acquisition description: one row per measured image. b = 0 rows carry a
// zero direction; diffusion-weighted rows need unit directions.
struct DwiProtocol {
    struct Measurement {
        double bvalue = 0.0;               // s/mm^2
        std::array<double, 3> direction{};
    };

    std::vector<Measurement> measurements;
    double sigma = 0.0;  // Rician noise level, in units of the signal

    // At least one b = 0 image and six diffusion-weighted ones; unit
    // directions; non-negative b and sigma.
    void validate() const;

    std::size_t b0_count() const;

    // Evenly spread directions from the Fibonacci sphere lattice, with the
    // given number of leading b = 0 images.
    static DwiProtocol make(double bvalue, std::size_t num_directions,
                            std::size_t num_b0, double sigma);
};

// An abnormal tissue patch for out-of-distribution experiments. Replaces
// tensor and optionally s0 inside the shape; the label map is left alone
// because the lesion is precisely what the training classes do not cover.
struct LesionSpec {
    Shape shape;
    std::array<double, 6> tensor{};
    std::optional<double> s0;

    void validate() const;
};

PhantomData generate_phantom(const PhantomSpec& spec);

// Per-voxel signal decay S_k = S0 * exp(-b_k g_k' D g_k), plus Rician
// noise when sigma > 0: sqrt((S + e1)^2 + e2^2) with e ~ N(0, sigma^2).
// The noise stream is counter-based per (voxel, measurement), so the
// result does not depend on traversal order.
Volume simulate_dwi(const Volume& tensors, const Volume& s0, const DwiProtocol& protocol,
                    std::uint64_t noise_seed);

// Log-linear least-squares tensor fit. Throws ConfigError when the
// directions do not span six dimensions (the normal matrix loses rank).
Volume fit_dti(const Volume& dwi, const DwiProtocol& protocol);

// FA, MD and sorted eigenvalues per voxel from a tensor volume.
Volume derive_params(const Volume& tensors);

// Sorted (descending) eigenvalues of one symmetric tensor. Used by the
// SPD validation and exposed for tests; the closed-form path switches to
// Jacobi iteration when eigenvalues nearly coincide.
std::array<double, 3> tensor_eigenvalues(const std::array<double, 6>& tensor);

// Overwrites tensors/s0 inside the lesion shape; returns the voxel mask of
// the affected area. Throws ConfigError if the shape sticks out of the
// grid. An in-bounds shape that covers no voxel centre yields an empty
// mask and no change.
Mask inject_lesion(PhantomData& phantom, const LesionSpec& lesion);

// Per-channel standardisation to zero mean and unit variance over all
// voxels. A constant channel becomes all zeros.
Volume zscore_channels(const Volume& volume);

struct DatasetSpec {
    std::size_t count = 8;
    std::array<double, 3> split{0.75, 0.0, 0.25};  // train/val/test fractions
    double jitter_geometry = 0.05;
    double jitter_tensor = 0.07;

    void validate() const;
};

// One ready-to-train sample: standardised (FA, MD, E1, E2, E3) channels
// and the ground-truth labels. The jittered spec and the noise seed are
// kept so a sample can be regenerated, e.g. with a lesion injected.
struct DatasetSample {
    Volume channels;
    LabelMap labels;
    PhantomSpec spec;
    std::uint64_t noise_seed = 0;
};

struct Dataset {
    std::vector<DatasetSample> train;
    std::vector<DatasetSample> val;
    std::vector<DatasetSample> test;
};

// Builds `count` phantoms with per-volume random variation of the region
// geometry and tensors, simulates and fits each one, and splits them
// deterministically by seed.
Dataset make_dataset(const PhantomSpec& base, const DwiProtocol& protocol,
                     const DatasetSpec& dataset_spec, std::uint64_t seed);

// Runs the same pipeline as make_dataset for one known sample: phantom
// from the stored (already jittered) spec, optional lesion, simulation
// with the stored noise seed, fit, parameter derivation, standardisation.
// This is how the out-of-distribution twin of a test volume is produced.
DatasetSample regenerate_sample(const PhantomSpec& spec, const DwiProtocol& protocol,
                                std::uint64_t noise_seed,
                                const LesionSpec* lesion = nullptr,
                                Mask* lesion_mask = nullptr);

// --- config file bindings ---------------------------------------------
//
// A phantom description file holds the spec, the protocol, the dataset
// parameters and optionally a lesion, in flat key = value form:
//
//   dims = 48 48 32
//   voxel_size = 2 2 2
//   region.0.name = background
//   region.0.shape = everywhere
//   region.0.eigenvalues = 0.2e-3 0.2e-3 0.2e-3
//   region.0.s0 = 0.5
//   region.1.shape = sphere 24 24 16 15     # cx cy cz r
//   ...                                     # box x0 y0 z0 x1 y1 z1
//   ...                                     # shell cx cy cz r_in r_out
//   protocol.bvalue = 1000
//   protocol.directions = 30
//   protocol.b0 = 1
//   protocol.sigma = 0.015
//   dataset.count = 8
//   dataset.split = 0.75 0 0.25
//   dataset.jitter_geometry = 0.05
//   dataset.jitter_tensor = 0.07
//   seed = 1234
//   lesion.shape = sphere 28 24 16 3.5      # optional block
//   lesion.eigenvalues = 2.0e-3 1.0e-3 0.9e-3
//   lesion.s0 = 0.8
//
// Tensors may be given either as `eigenvalues = e1 e2 e3` (axis-aligned)
// or as `tensor = xx yy zz xy xz yz`.

struct PhantomFile {
    PhantomSpec spec;
    DwiProtocol protocol;
    DatasetSpec dataset;
    std::optional<LesionSpec> lesion;
    std::uint64_t seed = 0;
};

PhantomFile parse_phantom_file(const KvFile& kv);

}  // namespace evseg
