#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "evseg/kv.hpp"
#include "evseg/volume.hpp"

namespace evseg {

// Overlap scores for one labelled region.
struct RegionMetrics {
    std::uint16_t region = 0;
    std::string name;
    std::size_t gt_voxels = 0;
    std::size_t pred_voxels = 0;
    std::size_t overlap = 0;
    double dice = 0.0;
    double recall = 0.0;
    double iou = 0.0;
};

struct MetricsConfig {
    // Count region 0 in the mean scores. Per-region entries always
    // include it.
    bool include_background = false;
    // Weight each region's contribution to the means by its ground-truth
    // voxel count instead of averaging regions equally.
    bool voxel_weighted = false;
    // Voxels set in this mask are ignored entirely, as if absent from
    // both maps.
    std::optional<Mask> exclude;
};

struct MetricsReport {
    // Ascending region id. A region with neither ground-truth nor
    // predicted voxels is omitted; one that only appears in the
    // prediction is reported with zero scores but kept out of the means.
    std::vector<RegionMetrics> regions;
    double mean_dice = 0.0;
    double mean_recall = 0.0;
    double mean_iou = 0.0;
    // How many regions carried ground-truth voxels (the mean's support).
    std::size_t regions_in_mean = 0;

    // Flat key-value form ("region.2.dice = ...", "mean_dice = ...") for
    // diff-friendly report files.
    KvFile to_kv() const;
};

// Per-region Dice 2|P∩G| / (|P|+|G|), recall |P∩G| / |G| and IoU
// |P∩G| / |P∪G| between a predicted and a ground-truth label map on the
// same grid with the same class count; means are taken over regions with
// at least one ground-truth voxel.
MetricsReport region_metrics(const LabelMap& pred, const LabelMap& gt,
                             const MetricsConfig& config = {});

// Uncertainty statistics contrasting a lesion area against healthy
// reference tissue.
struct OodReport {
    double lesion_mean = 0.0;
    double lesion_median = 0.0;
    double reference_mean = 0.0;
    double reference_median = 0.0;
    // lesion_mean / reference_mean. When the reference mean is exactly 0
    // this is 1 if the lesion mean is also 0, otherwise +infinity.
    double contrast_ratio = 0.0;
    // Probability that a random lesion voxel carries higher uncertainty
    // than a random reference voxel (ties count half).
    double auroc = 0.0;
    std::size_t lesion_voxels = 0;
    std::size_t reference_voxels = 0;

    KvFile to_kv() const;
};

// Reference tissue for the comparison: voxels at least two steps (face
// neighbours) from any region boundary, and outside the lesion. Each
// region of `gt` is eroded twice with 6-connectivity; the grid border
// counts as a boundary.
Mask reference_mask(const LabelMap& gt, const Mask& lesion);

// Compares the uncertainty map inside the lesion against the reference
// tissue (lesion voxels are the positive class for the AUROC). The
// uncertainty volume must be single-channel on the grid of `gt`. Throws
// DomainError when the lesion or the resulting reference mask is empty.
OodReport ood_report(const Volume& uncertainty, const Mask& lesion,
                     const LabelMap& gt);

// Slice selector for renders: the fixed coordinate axis.
enum class SliceAxis : std::uint8_t { kX, kY, kZ };

// Parses "x" / "y" / "z"; throws ConfigError otherwise.
SliceAxis parse_axis(const std::string& text);

// Writes one slice of a single-channel volume as a binary 8-bit PGM
// (header "P5\n<w> <h>\n255\n"), min-max normalized over that slice; a
// constant slice renders all black. Slices are laid out with x (or y for
// axis x) across and y (or z for axes x and y) down. Throws ShapeError
// if the volume is multi-channel or the index is out of range, IoError
// if the file cannot be written.
void render_heatmap(const Volume& field, SliceAxis axis, std::uint32_t index,
                    const std::filesystem::path& out);

// Writes one slice of a label map as a binary PPM (P6) using a fixed
// 24-colour palette, colour = palette[label % 24]. Same slice layout and
// errors as render_heatmap.
void render_labelmap(const LabelMap& labels, SliceAxis axis,
                     std::uint32_t index, const std::filesystem::path& out);

}  // namespace evseg
