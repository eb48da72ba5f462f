#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evseg/volume.hpp"

namespace evseg {

// Non-negative per-class evidence produced by one subnetwork, on the same
// grid layout as Volume (channel-major, channel = class). The subnet_id
// records which input channel produced it ("fa", "md", ...), purely as
// provenance for reports and fusion bookkeeping.
struct EvidenceField {
    Dims dims;
    std::uint16_t num_classes = 0;
    std::string subnet_id;
    std::vector<float> values;

    static EvidenceField create(Dims dims, std::uint16_t num_classes,
                                std::string subnet_id = {}, float fill = 0.0f);

    // Validates shape, finiteness and non-negativity of the buffer.
    static EvidenceField from_values(Dims dims, std::uint16_t num_classes,
                                     std::vector<float> values,
                                     std::string subnet_id = {});

    // Reinterprets a volume (channel = class) as evidence; same checks.
    static EvidenceField from_volume(const Volume& v, std::string subnet_id = {});

    Volume to_volume(VoxelSize voxel_size = {}) const;

    std::size_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                      std::uint32_t n) const {
        return ((static_cast<std::size_t>(n) * dims.nz + z) * dims.ny + y) * dims.nx + x;
    }

    float at(std::uint32_t x, std::uint32_t y, std::uint32_t z, std::uint32_t n) const {
        return values[index(x, y, z, n)];
    }

    float& at(std::uint32_t x, std::uint32_t y, std::uint32_t z, std::uint32_t n) {
        return values[index(x, y, z, n)];
    }
};

// Subjective-logic state derived from evidence: per-class belief masses
// plus one uncertainty mass per voxel, which sum to 1 exactly by
// construction (b_n = e_n / S, u = N / S, S = sum e + N).
struct BeliefField {
    Dims dims;
    std::uint16_t num_classes = 0;
    std::string subnet_id;
    std::vector<float> belief;      // channel-major, like EvidenceField
    std::vector<float> uncertainty; // one value per voxel

    std::size_t voxel_index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return (static_cast<std::size_t>(z) * dims.ny + y) * dims.nx + x;
    }

    float belief_at(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                    std::uint32_t n) const {
        return belief[((static_cast<std::size_t>(n) * dims.nz + z) * dims.ny + y) *
                          dims.nx + x];
    }

    float uncertainty_at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return uncertainty[voxel_index(x, y, z)];
    }
};

// Dirichlet concentration parameters alpha_n = e_n + 1 (so alpha >= 1).
Volume evidence_to_alpha(const EvidenceField& evidence);

// Belief masses and uncertainty mass per voxel.
BeliefField beliefs(const EvidenceField& evidence);

// Expected class probabilities alpha_n / S under the Dirichlet. Input must
// be a valid alpha volume (every value >= 1); throws DomainError otherwise.
Volume expected_probabilities(const Volume& alpha);

}  // namespace evseg
