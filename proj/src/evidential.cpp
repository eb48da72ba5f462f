#include "evseg/evidential.hpp"

#include <cmath>

#include "evseg/errors.hpp"

namespace evseg {
namespace {

void check_field_shape(const Dims& dims, std::uint16_t num_classes) {
    if (dims.voxel_count() == 0 || num_classes == 0) {
        throw ShapeError("evidence field needs nonzero dims and classes, got " +
                         to_string(dims) + " x" + std::to_string(num_classes));
    }
}

void check_evidence_values(const std::vector<float>& values) {
    for (float v : values) {
        if (!std::isfinite(v) || v < 0.0f) {
            throw DomainError("evidence must be finite and >= 0, got " +
                              std::to_string(v));
        }
    }
}

}  // namespace

EvidenceField EvidenceField::create(Dims dims, std::uint16_t num_classes,
                                    std::string subnet_id, float fill) {
    check_field_shape(dims, num_classes);
    if (!std::isfinite(fill) || fill < 0.0f) {
        throw DomainError("evidence fill must be finite and >= 0");
    }
    EvidenceField f;
    f.dims = dims;
    f.num_classes = num_classes;
    f.subnet_id = std::move(subnet_id);
    f.values.assign(dims.voxel_count() * num_classes, fill);
    return f;
}

EvidenceField EvidenceField::from_values(Dims dims, std::uint16_t num_classes,
                                         std::vector<float> values,
                                         std::string subnet_id) {
    check_field_shape(dims, num_classes);
    const std::size_t expected = dims.voxel_count() * num_classes;
    if (values.size() != expected) {
        throw ShapeError("evidence buffer holds " + std::to_string(values.size()) +
                         " values, expected " + std::to_string(expected));
    }
    check_evidence_values(values);
    EvidenceField f;
    f.dims = dims;
    f.num_classes = num_classes;
    f.subnet_id = std::move(subnet_id);
    f.values = std::move(values);
    return f;
}

EvidenceField EvidenceField::from_volume(const Volume& v, std::string subnet_id) {
    if (v.channels() > 65535) {
        throw ShapeError("too many channels for an evidence field");
    }
    return from_values(v.dims(), static_cast<std::uint16_t>(v.channels()), v.data(),
                       std::move(subnet_id));
}

Volume EvidenceField::to_volume(VoxelSize voxel_size) const {
    return Volume::from_data(dims, num_classes, values, voxel_size);
}

Volume evidence_to_alpha(const EvidenceField& evidence) {
    Volume alpha(evidence.dims, evidence.num_classes);
    const std::size_t n = evidence.values.size();
    for (std::size_t i = 0; i < n; ++i) {
        // Accumulate in double so huge evidence does not round oddly.
        alpha.data()[i] =
            static_cast<float>(static_cast<double>(evidence.values[i]) + 1.0);
    }
    return alpha;
}

BeliefField beliefs(const EvidenceField& evidence) {
    BeliefField out;
    out.dims = evidence.dims;
    out.num_classes = evidence.num_classes;
    out.subnet_id = evidence.subnet_id;
    const std::size_t voxels = evidence.dims.voxel_count();
    const std::size_t classes = evidence.num_classes;
    out.belief.resize(voxels * classes);
    out.uncertainty.resize(voxels);
    for (std::size_t i = 0; i < voxels; ++i) {
        double total = 0.0;
        for (std::size_t n = 0; n < classes; ++n) {
            total += static_cast<double>(evidence.values[n * voxels + i]);
        }
        const double strength = total + static_cast<double>(classes);
        for (std::size_t n = 0; n < classes; ++n) {
            out.belief[n * voxels + i] = static_cast<float>(
                static_cast<double>(evidence.values[n * voxels + i]) / strength);
        }
        out.uncertainty[i] = static_cast<float>(static_cast<double>(classes) / strength);
    }
    return out;
}

Volume expected_probabilities(const Volume& alpha) {
    const std::size_t voxels = alpha.dims().voxel_count();
    const std::size_t classes = alpha.channels();
    for (float a : alpha.data()) {
        if (!(a >= 1.0f)) {
            throw DomainError("alpha values must be >= 1, got " + std::to_string(a));
        }
    }
    Volume out(alpha.dims(), alpha.channels(), 0.0f, alpha.voxel_size());
    for (std::size_t i = 0; i < voxels; ++i) {
        double strength = 0.0;
        for (std::size_t n = 0; n < classes; ++n) {
            strength += static_cast<double>(alpha.data()[n * voxels + i]);
        }
        for (std::size_t n = 0; n < classes; ++n) {
            out.data()[n * voxels + i] = static_cast<float>(
                static_cast<double>(alpha.data()[n * voxels + i]) / strength);
        }
    }
    return out;
}

}  // namespace evseg
