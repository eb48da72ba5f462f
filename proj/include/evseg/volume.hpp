#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evseg/errors.hpp"

namespace evseg {

// Grid extents of a volume. Channel count is carried separately because
// label maps and masks are always single-channel.
struct Dims {
    std::uint32_t nx = 0;
    std::uint32_t ny = 0;
    std::uint32_t nz = 0;

    bool operator==(const Dims&) const = default;

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(nx) * ny * nz;
    }
};

std::string to_string(const Dims& d);

// Physical voxel edge lengths in millimetres. Metadata only; no algorithm
// in this library depends on it, but files must round-trip it exactly.
struct VoxelSize {
    float sx = 1.0f;
    float sy = 1.0f;
    float sz = 1.0f;

    bool operator==(const VoxelSize&) const = default;
};

// Dense float32 voxel grid with C channels, the basic currency of the
// pipeline (image channels, evidence, probabilities, uncertainty maps).
//
// Storage is channel-major: data[((c*nz + z)*ny + y)*nx + x]. Within a
// channel, x varies fastest. All stored values are finite; constructors
// and file loading enforce this.
class Volume {
public:
    Volume() = default;

    Volume(Dims dims, std::uint32_t channels, float fill = 0.0f,
           VoxelSize voxel_size = {});

    // Takes ownership of a prepared buffer. Throws ShapeError if the size
    // does not match dims/channels, FormatError{NonFinite} on NaN or inf.
    static Volume from_data(Dims dims, std::uint32_t channels,
                            std::vector<float> data,
                            VoxelSize voxel_size = {});

    const Dims& dims() const { return dims_; }
    std::uint32_t channels() const { return channels_; }
    const VoxelSize& voxel_size() const { return voxel_size_; }
    void set_voxel_size(const VoxelSize& vs) { voxel_size_ = vs; }

    std::size_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                      std::uint32_t c) const {
        return ((static_cast<std::size_t>(c) * dims_.nz + z) * dims_.ny + y) *
                   dims_.nx +
               x;
    }

    float at(std::uint32_t x, std::uint32_t y, std::uint32_t z,
             std::uint32_t c = 0) const {
        return data_[index(x, y, z, c)];
    }

    float& at(std::uint32_t x, std::uint32_t y, std::uint32_t z,
              std::uint32_t c = 0) {
        return data_[index(x, y, z, c)];
    }

    // Raw access for bulk math. Writers are responsible for keeping the
    // finiteness invariant; check_finite() re-validates after bulk edits.
    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

    void check_finite() const;

    bool same_grid(const Volume& other) const {
        return dims_ == other.dims_ && channels_ == other.channels_;
    }

private:
    Dims dims_;
    std::uint32_t channels_ = 0;
    VoxelSize voxel_size_;
    std::vector<float> data_;
};

// Integer segmentation labels on a voxel grid, together with the class
// name table. Labels are always < num_classes.
class LabelMap {
public:
    LabelMap() = default;

    // Names may be empty, in which case "class_0".."class_{N-1}" are used.
    LabelMap(Dims dims, std::uint16_t num_classes,
             std::vector<std::string> names = {},
             VoxelSize voxel_size = {});

    // Takes ownership of a prepared label buffer; validates size and range.
    static LabelMap from_data(Dims dims, std::uint16_t num_classes,
                              std::vector<std::uint16_t> labels,
                              std::vector<std::string> names = {},
                              VoxelSize voxel_size = {});

    const Dims& dims() const { return dims_; }
    std::uint16_t num_classes() const { return num_classes_; }
    const VoxelSize& voxel_size() const { return voxel_size_; }
    const std::vector<std::string>& names() const { return names_; }

    std::size_t index(std::uint32_t x, std::uint32_t y,
                      std::uint32_t z) const {
        return (static_cast<std::size_t>(z) * dims_.ny + y) * dims_.nx + x;
    }

    std::uint16_t at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return labels_[index(x, y, z)];
    }

    // Throws FormatError{LabelRange} if label >= num_classes.
    void set(std::uint32_t x, std::uint32_t y, std::uint32_t z,
             std::uint16_t label);

    const std::vector<std::uint16_t>& labels() const { return labels_; }

    // Number of voxels carrying the given label.
    std::size_t count(std::uint16_t label) const;

private:
    Dims dims_;
    std::uint16_t num_classes_ = 0;
    VoxelSize voxel_size_;
    std::vector<std::uint16_t> labels_;
    std::vector<std::string> names_;
};

// Boolean voxel mask (region of interest, lesion extent, ...).
class Mask {
public:
    Mask() = default;
    explicit Mask(Dims dims) : dims_(dims), bits_(dims.voxel_count(), 0) {}

    const Dims& dims() const { return dims_; }

    std::size_t index(std::uint32_t x, std::uint32_t y,
                      std::uint32_t z) const {
        return (static_cast<std::size_t>(z) * dims_.ny + y) * dims_.nx + x;
    }

    bool at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return bits_[index(x, y, z)] != 0;
    }

    void set(std::uint32_t x, std::uint32_t y, std::uint32_t z, bool value) {
        bits_[index(x, y, z)] = value ? 1 : 0;
    }

    std::size_t count() const;

private:
    Dims dims_;
    std::vector<std::uint8_t> bits_;
};

// One-hot encoding: channel n is 1 where the label equals n, else 0.
Volume one_hot(const LabelMap& labels);

// Per-voxel argmax over channels; ties resolve to the lowest channel.
// Inverse of one_hot. Channel count must fit in uint16.
LabelMap argmax_labels(const Volume& scores, std::vector<std::string> names = {});

// --- File formats -----------------------------------------------------
//
// Both formats are little-endian regardless of host byte order.
//
// Volume ("EVOL" v1):
//   magic     4 bytes  "EVOL"
//   version   u16      1
//   nx,ny,nz  u32 each
//   channels  u32
//   sx,sy,sz  f32 each voxel size in mm
//   payload   f32 * nx*ny*nz*channels, in Volume storage order
//
// Label map ("ELBL" v1):
//   magic     4 bytes  "ELBL"
//   version   u16      1
//   nx,ny,nz  u32 each
//   classes   u32
//   sx,sy,sz  f32 each
//   payload   u16 * nx*ny*nz
//   names     classes entries of { u32 byte length, UTF-8 bytes }
//
// Loading validates magic, version, payload length (short reads are
// truncation errors, extra bytes after the payload are rejected), label
// range, and finiteness of float payloads.

void save_volume(const Volume& volume, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

void save_labelmap(const LabelMap& labels, const std::filesystem::path& path);
LabelMap load_labelmap(const std::filesystem::path& path);

}  // namespace evseg
