#include "evseg/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "evseg/errors.hpp"

namespace evseg {
namespace {

void check_same_labelled_grid(const LabelMap& pred, const LabelMap& gt) {
    if (!(pred.dims() == gt.dims())) {
        throw ShapeError("prediction grid " + to_string(pred.dims()) +
                         " does not match ground truth " + to_string(gt.dims()));
    }
    if (pred.num_classes() != gt.num_classes()) {
        throw ShapeError("prediction has " + std::to_string(pred.num_classes()) +
                         " classes, ground truth " +
                         std::to_string(gt.num_classes()));
    }
}

double mean_of(const std::vector<double>& v) {
    double sum = 0.0;
    for (double x : v) sum += x;
    return sum / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Probability that a random positive sample outranks a random negative
// one, ties counting half: the rank-sum form of the Mann-Whitney U
// statistic with average ranks across tied groups.
double rank_auroc(const std::vector<double>& positives,
                  const std::vector<double>& negatives) {
    struct Sample {
        double value;
        bool positive;
    };
    std::vector<Sample> samples;
    samples.reserve(positives.size() + negatives.size());
    for (double v : positives) samples.push_back({v, true});
    for (double v : negatives) samples.push_back({v, false});
    std::sort(samples.begin(), samples.end(),
              [](const Sample& a, const Sample& b) { return a.value < b.value; });

    double positive_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < samples.size()) {
        std::size_t j = i;
        while (j < samples.size() && samples[j].value == samples[i].value) ++j;
        // Ranks are 1-based; the group [i, j) shares the average rank.
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (samples[k].positive) positive_rank_sum += avg_rank;
        }
        i = j;
    }
    const double np = static_cast<double>(positives.size());
    const double nn = static_cast<double>(negatives.size());
    const double u = positive_rank_sum - np * (np + 1.0) / 2.0;
    return u / (np * nn);
}

struct SliceView {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
};

// Extent along the fixed axis, and the in-plane width/height layout: x
// across and y down for axis z, x across and z down for axis y, y
// across and z down for axis x.
SliceView slice_view(const Dims& dims, SliceAxis axis, std::uint32_t index) {
    std::uint32_t extent = 0;
    SliceView view;
    switch (axis) {
        case SliceAxis::kX:
            extent = dims.nx;
            view = {dims.ny, dims.nz};
            break;
        case SliceAxis::kY:
            extent = dims.ny;
            view = {dims.nx, dims.nz};
            break;
        case SliceAxis::kZ:
            extent = dims.nz;
            view = {dims.nx, dims.ny};
            break;
    }
    if (index >= extent) {
        throw ShapeError("slice index " + std::to_string(index) +
                         " out of range for extent " + std::to_string(extent));
    }
    return view;
}

// Grid coordinate of pixel (col, row) of the selected slice.
void slice_coord(SliceAxis axis, std::uint32_t index, std::uint32_t col,
                 std::uint32_t row, std::uint32_t& x, std::uint32_t& y,
                 std::uint32_t& z) {
    switch (axis) {
        case SliceAxis::kX: x = index; y = col; z = row; break;
        case SliceAxis::kY: x = col; y = index; z = row; break;
        case SliceAxis::kZ: x = col; y = row; z = index; break;
    }
}

void write_binary_image(const std::filesystem::path& out,
                        const std::string& header,
                        const std::vector<std::uint8_t>& pixels) {
    std::ofstream stream(out, std::ios::binary | std::ios::trunc);
    if (!stream) {
        throw IoError("cannot open " + out.string() + " for writing");
    }
    stream.write(header.data(), static_cast<std::streamsize>(header.size()));
    stream.write(reinterpret_cast<const char*>(pixels.data()),
                 static_cast<std::streamsize>(pixels.size()));
    if (!stream) {
        throw IoError("failed writing " + out.string());
    }
}

// Fixed qualitative palette; entry 0 is black so the background class
// reads as empty space in renders.
constexpr std::array<std::array<std::uint8_t, 3>, 24> kPalette = {{
    {0, 0, 0},       {230, 25, 75},   {60, 180, 75},   {255, 225, 25},
    {0, 130, 200},   {245, 130, 48},  {145, 30, 180},  {70, 240, 240},
    {240, 50, 230},  {210, 245, 60},  {250, 190, 212}, {0, 128, 128},
    {220, 190, 255}, {170, 110, 40},  {255, 250, 200}, {128, 0, 0},
    {170, 255, 195}, {128, 128, 0},   {255, 215, 180}, {0, 0, 128},
    {128, 128, 128}, {255, 255, 255}, {165, 40, 40},   {90, 90, 200},
}};

}  // namespace

MetricsReport region_metrics(const LabelMap& pred, const LabelMap& gt,
                             const MetricsConfig& config) {
    check_same_labelled_grid(pred, gt);
    if (config.exclude && !(config.exclude->dims() == gt.dims())) {
        throw ShapeError("exclude mask grid does not match the label maps");
    }
    const std::size_t classes = gt.num_classes();
    std::vector<std::size_t> gt_count(classes, 0), pred_count(classes, 0),
        overlap(classes, 0);
    const std::size_t voxels = gt.dims().voxel_count();
    std::vector<std::uint8_t> excluded;
    if (config.exclude) {
        const Dims d = gt.dims();
        excluded.resize(voxels, 0);
        for (std::uint32_t z = 0; z < d.nz; ++z) {
            for (std::uint32_t y = 0; y < d.ny; ++y) {
                for (std::uint32_t x = 0; x < d.nx; ++x) {
                    excluded[gt.index(x, y, z)] =
                        config.exclude->at(x, y, z) ? 1 : 0;
                }
            }
        }
    }
    for (std::size_t i = 0; i < voxels; ++i) {
        if (!excluded.empty() && excluded[i]) continue;
        const std::uint16_t g = gt.labels()[i];
        const std::uint16_t p = pred.labels()[i];
        ++gt_count[g];
        ++pred_count[p];
        if (g == p) ++overlap[g];
    }

    MetricsReport report;
    double dice_sum = 0.0, recall_sum = 0.0, iou_sum = 0.0, weight_sum = 0.0;
    for (std::size_t n = 0; n < classes; ++n) {
        if (gt_count[n] == 0 && pred_count[n] == 0) continue;
        RegionMetrics r;
        r.region = static_cast<std::uint16_t>(n);
        r.name = gt.names()[n];
        r.gt_voxels = gt_count[n];
        r.pred_voxels = pred_count[n];
        r.overlap = overlap[n];
        const double ov = static_cast<double>(overlap[n]);
        const double p = static_cast<double>(pred_count[n]);
        const double g = static_cast<double>(gt_count[n]);
        r.dice = 2.0 * ov / (p + g);
        r.recall = gt_count[n] > 0 ? ov / g : 0.0;
        r.iou = ov / (p + g - ov);
        report.regions.push_back(r);

        const bool in_mean =
            gt_count[n] > 0 && (config.include_background || n != 0);
        if (in_mean) {
            const double w = config.voxel_weighted ? g : 1.0;
            dice_sum += w * r.dice;
            recall_sum += w * r.recall;
            iou_sum += w * r.iou;
            weight_sum += w;
            ++report.regions_in_mean;
        }
    }
    if (weight_sum > 0.0) {
        report.mean_dice = dice_sum / weight_sum;
        report.mean_recall = recall_sum / weight_sum;
        report.mean_iou = iou_sum / weight_sum;
    }
    return report;
}

KvFile MetricsReport::to_kv() const {
    KvFile kv;
    kv.set_double("mean_dice", mean_dice);
    kv.set_double("mean_recall", mean_recall);
    kv.set_double("mean_iou", mean_iou);
    kv.set_u64("regions_in_mean", regions_in_mean);
    for (const RegionMetrics& r : regions) {
        const std::string prefix = "region." + std::to_string(r.region) + ".";
        kv.set(prefix + "name", r.name);
        kv.set_double(prefix + "dice", r.dice);
        kv.set_double(prefix + "recall", r.recall);
        kv.set_double(prefix + "iou", r.iou);
        kv.set_u64(prefix + "gt_voxels", r.gt_voxels);
        kv.set_u64(prefix + "pred_voxels", r.pred_voxels);
        kv.set_u64(prefix + "overlap", r.overlap);
    }
    return kv;
}

Mask reference_mask(const LabelMap& gt, const Mask& lesion) {
    if (!(lesion.dims() == gt.dims())) {
        throw ShapeError("lesion mask grid does not match the label map");
    }
    const Dims d = gt.dims();
    const auto survives = [&](const std::vector<std::uint8_t>& alive,
                              std::uint32_t x, std::uint32_t y,
                              std::uint32_t z) {
        const std::size_t i = gt.index(x, y, z);
        if (!alive[i]) return false;
        if (x == 0 || x + 1 == d.nx || y == 0 || y + 1 == d.ny || z == 0 ||
            z + 1 == d.nz) {
            return false;
        }
        const std::uint16_t label = gt.labels()[i];
        return gt.at(x - 1, y, z) == label && gt.at(x + 1, y, z) == label &&
               gt.at(x, y - 1, z) == label && gt.at(x, y + 1, z) == label &&
               gt.at(x, y, z - 1) == label && gt.at(x, y, z + 1) == label &&
               alive[gt.index(x - 1, y, z)] && alive[gt.index(x + 1, y, z)] &&
               alive[gt.index(x, y - 1, z)] && alive[gt.index(x, y + 1, z)] &&
               alive[gt.index(x, y, z - 1)] && alive[gt.index(x, y, z + 1)];
    };

    // Two erosion rounds with the 6-neighbourhood; the survivor state of
    // round 1 feeds round 2.
    std::vector<std::uint8_t> alive(d.voxel_count(), 1);
    for (int round = 0; round < 2; ++round) {
        std::vector<std::uint8_t> next(d.voxel_count(), 0);
        for (std::uint32_t z = 0; z < d.nz; ++z) {
            for (std::uint32_t y = 0; y < d.ny; ++y) {
                for (std::uint32_t x = 0; x < d.nx; ++x) {
                    next[gt.index(x, y, z)] = survives(alive, x, y, z) ? 1 : 0;
                }
            }
        }
        alive.swap(next);
    }

    Mask out(d);
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        for (std::uint32_t y = 0; y < d.ny; ++y) {
            for (std::uint32_t x = 0; x < d.nx; ++x) {
                out.set(x, y, z,
                        alive[gt.index(x, y, z)] != 0 && !lesion.at(x, y, z));
            }
        }
    }
    return out;
}

OodReport ood_report(const Volume& uncertainty, const Mask& lesion,
                     const LabelMap& gt) {
    if (uncertainty.channels() != 1) {
        throw ShapeError("uncertainty map must have exactly one channel");
    }
    if (!(uncertainty.dims() == gt.dims())) {
        throw ShapeError("uncertainty grid does not match the label map");
    }
    if (lesion.count() == 0) {
        throw DomainError("lesion mask is empty");
    }
    const Mask reference = reference_mask(gt, lesion);
    if (reference.count() == 0) {
        throw DomainError("reference mask is empty after erosion");
    }

    std::vector<double> lesion_values, reference_values;
    lesion_values.reserve(lesion.count());
    reference_values.reserve(reference.count());
    const Dims d = gt.dims();
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        for (std::uint32_t y = 0; y < d.ny; ++y) {
            for (std::uint32_t x = 0; x < d.nx; ++x) {
                const double u = static_cast<double>(uncertainty.at(x, y, z));
                if (lesion.at(x, y, z)) lesion_values.push_back(u);
                if (reference.at(x, y, z)) reference_values.push_back(u);
            }
        }
    }

    OodReport report;
    report.lesion_voxels = lesion_values.size();
    report.reference_voxels = reference_values.size();
    report.lesion_mean = mean_of(lesion_values);
    report.lesion_median = median_of(lesion_values);
    report.reference_mean = mean_of(reference_values);
    report.reference_median = median_of(reference_values);
    if (report.reference_mean == 0.0) {
        report.contrast_ratio =
            report.lesion_mean == 0.0
                ? 1.0
                : std::numeric_limits<double>::infinity();
    } else {
        report.contrast_ratio = report.lesion_mean / report.reference_mean;
    }
    report.auroc = rank_auroc(lesion_values, reference_values);
    return report;
}

KvFile OodReport::to_kv() const {
    KvFile kv;
    kv.set_double("lesion_mean", lesion_mean);
    kv.set_double("lesion_median", lesion_median);
    kv.set_double("reference_mean", reference_mean);
    kv.set_double("reference_median", reference_median);
    kv.set_double("contrast_ratio", contrast_ratio);
    kv.set_double("auroc", auroc);
    kv.set_u64("lesion_voxels", lesion_voxels);
    kv.set_u64("reference_voxels", reference_voxels);
    return kv;
}

SliceAxis parse_axis(const std::string& text) {
    if (text == "x") return SliceAxis::kX;
    if (text == "y") return SliceAxis::kY;
    if (text == "z") return SliceAxis::kZ;
    throw ConfigError("axis must be x, y or z, got '" + text + "'");
}

void render_heatmap(const Volume& field, SliceAxis axis, std::uint32_t index,
                    const std::filesystem::path& out) {
    if (field.channels() != 1) {
        throw ShapeError("heatmap rendering expects a single-channel volume");
    }
    const SliceView view = slice_view(field.dims(), axis, index);

    std::vector<float> values(static_cast<std::size_t>(view.width) * view.height);
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    for (std::uint32_t row = 0; row < view.height; ++row) {
        for (std::uint32_t col = 0; col < view.width; ++col) {
            std::uint32_t x = 0, y = 0, z = 0;
            slice_coord(axis, index, col, row, x, y, z);
            const float v = field.at(x, y, z);
            values[static_cast<std::size_t>(row) * view.width + col] = v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }

    std::vector<std::uint8_t> pixels(values.size(), 0);
    if (hi > lo) {
        const float scale = 255.0f / (hi - lo);
        for (std::size_t i = 0; i < values.size(); ++i) {
            pixels[i] = static_cast<std::uint8_t>(
                std::lround((values[i] - lo) * scale));
        }
    }
    const std::string header = "P5\n" + std::to_string(view.width) + " " +
                               std::to_string(view.height) + "\n255\n";
    write_binary_image(out, header, pixels);
}

void render_labelmap(const LabelMap& labels, SliceAxis axis,
                     std::uint32_t index, const std::filesystem::path& out) {
    const SliceView view = slice_view(labels.dims(), axis, index);
    std::vector<std::uint8_t> pixels;
    pixels.reserve(static_cast<std::size_t>(view.width) * view.height * 3);
    for (std::uint32_t row = 0; row < view.height; ++row) {
        for (std::uint32_t col = 0; col < view.width; ++col) {
            std::uint32_t x = 0, y = 0, z = 0;
            slice_coord(axis, index, col, row, x, y, z);
            const auto& rgb = kPalette[labels.at(x, y, z) % kPalette.size()];
            pixels.push_back(rgb[0]);
            pixels.push_back(rgb[1]);
            pixels.push_back(rgb[2]);
        }
    }
    const std::string header = "P6\n" + std::to_string(view.width) + " " +
                               std::to_string(view.height) + "\n255\n";
    write_binary_image(out, header, pixels);
}

}  // namespace evseg
