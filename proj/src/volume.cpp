#include "evseg/volume.hpp"

#include <cmath>
#include <sstream>

#include "binary_io.hpp"

namespace evseg {
namespace {

using detail::Reader;
using detail::Writer;

std::vector<std::string> default_names(std::uint16_t num_classes) {
    std::vector<std::string> names(num_classes);
    for (std::uint16_t n = 0; n < num_classes; ++n) {
        names[n] = "class_" + std::to_string(n);
    }
    return names;
}

void check_dims(const Dims& dims, std::uint32_t channels) {
    if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0 || channels == 0) {
        throw ShapeError("all dimensions and the channel count must be nonzero, got " +
                         to_string(dims) + " x" + std::to_string(channels));
    }
}

}  // namespace

std::string to_string(const Dims& d) {
    std::ostringstream os;
    os << d.nx << "x" << d.ny << "x" << d.nz;
    return os.str();
}

// ---- Volume ----

Volume::Volume(Dims dims, std::uint32_t channels, float fill, VoxelSize voxel_size)
    : dims_(dims), channels_(channels), voxel_size_(voxel_size) {
    check_dims(dims, channels);
    if (!std::isfinite(fill)) {
        throw FormatError(FormatError::Fault::NonFinite, "fill value must be finite");
    }
    data_.assign(dims.voxel_count() * channels, fill);
}

Volume Volume::from_data(Dims dims, std::uint32_t channels, std::vector<float> data,
                         VoxelSize voxel_size) {
    check_dims(dims, channels);
    const std::size_t expected = dims.voxel_count() * channels;
    if (data.size() != expected) {
        throw ShapeError("volume buffer holds " + std::to_string(data.size()) +
                         " values, expected " + std::to_string(expected));
    }
    Volume v;
    v.dims_ = dims;
    v.channels_ = channels;
    v.voxel_size_ = voxel_size;
    v.data_ = std::move(data);
    v.check_finite();
    return v;
}

void Volume::check_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) {
            throw FormatError(FormatError::Fault::NonFinite,
                              "volume contains a non-finite value");
        }
    }
}

// ---- LabelMap ----

LabelMap::LabelMap(Dims dims, std::uint16_t num_classes, std::vector<std::string> names,
                   VoxelSize voxel_size)
    : dims_(dims), num_classes_(num_classes), voxel_size_(voxel_size) {
    check_dims(dims, 1);
    if (num_classes == 0) {
        throw ShapeError("a label map needs at least one class");
    }
    if (names.empty()) {
        names_ = default_names(num_classes);
    } else if (names.size() == num_classes) {
        names_ = std::move(names);
    } else {
        throw ShapeError("name table has " + std::to_string(names.size()) +
                         " entries for " + std::to_string(num_classes) + " classes");
    }
    labels_.assign(dims.voxel_count(), 0);
}

LabelMap LabelMap::from_data(Dims dims, std::uint16_t num_classes,
                             std::vector<std::uint16_t> labels,
                             std::vector<std::string> names, VoxelSize voxel_size) {
    LabelMap out(dims, num_classes, std::move(names), voxel_size);
    if (labels.size() != dims.voxel_count()) {
        throw ShapeError("label buffer holds " + std::to_string(labels.size()) +
                         " values, expected " + std::to_string(dims.voxel_count()));
    }
    for (std::uint16_t l : labels) {
        if (l >= num_classes) {
            throw FormatError(FormatError::Fault::LabelRange,
                              "label " + std::to_string(l) + " out of range for " +
                                  std::to_string(num_classes) + " classes");
        }
    }
    out.labels_ = std::move(labels);
    return out;
}

void LabelMap::set(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                   std::uint16_t label) {
    if (label >= num_classes_) {
        throw FormatError(FormatError::Fault::LabelRange,
                          "label " + std::to_string(label) + " out of range for " +
                              std::to_string(num_classes_) + " classes");
    }
    labels_[index(x, y, z)] = label;
}

std::size_t LabelMap::count(std::uint16_t label) const {
    std::size_t n = 0;
    for (std::uint16_t l : labels_) n += (l == label);
    return n;
}

std::size_t Mask::count() const {
    std::size_t n = 0;
    for (std::uint8_t b : bits_) n += b;
    return n;
}

// ---- conversions ----

Volume one_hot(const LabelMap& labels) {
    const Dims& d = labels.dims();
    Volume v(d, labels.num_classes(), 0.0f, labels.voxel_size());
    const auto& raw = labels.labels();
    const std::size_t voxels = d.voxel_count();
    for (std::size_t i = 0; i < voxels; ++i) {
        v.data()[static_cast<std::size_t>(raw[i]) * voxels + i] = 1.0f;
    }
    return v;
}

LabelMap argmax_labels(const Volume& scores, std::vector<std::string> names) {
    if (scores.channels() > 65535) {
        throw ShapeError("too many channels for a label map");
    }
    const Dims& d = scores.dims();
    const std::size_t voxels = d.voxel_count();
    LabelMap out(d, static_cast<std::uint16_t>(scores.channels()), std::move(names),
                 scores.voxel_size());
    const float* data = scores.data().data();
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        for (std::uint32_t y = 0; y < d.ny; ++y) {
            for (std::uint32_t x = 0; x < d.nx; ++x) {
                const std::size_t i = out.index(x, y, z);
                std::uint16_t best = 0;
                float best_score = data[i];
                for (std::uint32_t c = 1; c < scores.channels(); ++c) {
                    const float s = data[c * voxels + i];
                    if (s > best_score) {
                        best_score = s;
                        best = static_cast<std::uint16_t>(c);
                    }
                }
                out.set(x, y, z, best);
            }
        }
    }
    return out;
}

// ---- file I/O ----

void save_volume(const Volume& volume, const std::filesystem::path& path) {
    Writer w(path);
    w.bytes("EVOL", 4);
    w.u16(1);
    w.u32(volume.dims().nx);
    w.u32(volume.dims().ny);
    w.u32(volume.dims().nz);
    w.u32(volume.channels());
    w.f32(volume.voxel_size().sx);
    w.f32(volume.voxel_size().sy);
    w.f32(volume.voxel_size().sz);
    w.array(volume.data());
    w.finish();
}

Volume load_volume(const std::filesystem::path& path) {
    Reader r(path);
    r.expect_magic("EVOL");
    r.expect_version(1);
    Dims dims;
    dims.nx = r.u32();
    dims.ny = r.u32();
    dims.nz = r.u32();
    const std::uint32_t channels = r.u32();
    VoxelSize vs;
    vs.sx = r.f32();
    vs.sy = r.f32();
    vs.sz = r.f32();
    check_dims(dims, channels);
    std::vector<float> data = r.array<float>(dims.voxel_count() * channels);
    r.expect_end();
    for (float v : data) {
        if (!std::isfinite(v)) {
            throw FormatError(FormatError::Fault::NonFinite,
                              "non-finite voxel value in " + path.string());
        }
    }
    return Volume::from_data(dims, channels, std::move(data), vs);
}

void save_labelmap(const LabelMap& labels, const std::filesystem::path& path) {
    Writer w(path);
    w.bytes("ELBL", 4);
    w.u16(1);
    w.u32(labels.dims().nx);
    w.u32(labels.dims().ny);
    w.u32(labels.dims().nz);
    w.u32(labels.num_classes());
    w.f32(labels.voxel_size().sx);
    w.f32(labels.voxel_size().sy);
    w.f32(labels.voxel_size().sz);
    w.array(labels.labels());
    for (const std::string& name : labels.names()) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
    }
    w.finish();
}

LabelMap load_labelmap(const std::filesystem::path& path) {
    Reader r(path);
    r.expect_magic("ELBL");
    r.expect_version(1);
    Dims dims;
    dims.nx = r.u32();
    dims.ny = r.u32();
    dims.nz = r.u32();
    const std::uint32_t classes = r.u32();
    VoxelSize vs;
    vs.sx = r.f32();
    vs.sy = r.f32();
    vs.sz = r.f32();
    check_dims(dims, 1);
    if (classes == 0 || classes > 65535) {
        throw FormatError(FormatError::Fault::Malformed,
                          "class count " + std::to_string(classes) + " out of range in " +
                              path.string());
    }
    std::vector<std::uint16_t> raw = r.array<std::uint16_t>(dims.voxel_count());
    std::vector<std::string> names(classes);
    for (std::uint32_t n = 0; n < classes; ++n) {
        const std::uint32_t len = r.u32();
        names[n].resize(len);
        if (len > 0) r.bytes(names[n].data(), len);
    }
    r.expect_end();
    try {
        return LabelMap::from_data(dims, static_cast<std::uint16_t>(classes),
                                   std::move(raw), std::move(names), vs);
    } catch (const FormatError& e) {
        throw FormatError(e.fault(), std::string(e.what()) + " in " + path.string());
    }
}

}  // namespace evseg
