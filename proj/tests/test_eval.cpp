#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "evseg/errors.hpp"
#include "evseg/eval.hpp"
#include "evseg/rng.hpp"
#include "evseg/volume.hpp"

using namespace evseg;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "evseg_eval_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::vector<unsigned char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

// Label map over a 1-D strip, region 1 on [lo, hi), region 0 elsewhere.
LabelMap strip(std::uint32_t length, std::uint32_t lo, std::uint32_t hi,
               std::uint16_t classes = 2) {
    LabelMap lm(Dims{length, 1, 1}, classes);
    for (std::uint32_t x = lo; x < hi; ++x) lm.set(x, 0, 0, 1);
    return lm;
}

LabelMap random_labels(Rng& rng, Dims dims, std::uint16_t classes) {
    LabelMap lm(dims, classes);
    for (std::uint32_t z = 0; z < dims.nz; ++z) {
        for (std::uint32_t y = 0; y < dims.ny; ++y) {
            for (std::uint32_t x = 0; x < dims.nx; ++x) {
                lm.set(x, y, z,
                       static_cast<std::uint16_t>(rng.uniform_index(classes)));
            }
        }
    }
    return lm;
}

}  // namespace

TEST_CASE("identical maps score 1 everywhere") {
    Rng rng(0x1de0);
    const LabelMap gt = random_labels(rng, Dims{6, 5, 3}, 4);
    const MetricsReport report = region_metrics(gt, gt);
    CHECK(report.mean_dice == doctest::Approx(1.0));
    CHECK(report.mean_recall == doctest::Approx(1.0));
    CHECK(report.mean_iou == doctest::Approx(1.0));
    for (const RegionMetrics& r : report.regions) {
        CHECK(r.dice == doctest::Approx(1.0));
        CHECK(r.recall == doctest::Approx(1.0));
        CHECK(r.iou == doctest::Approx(1.0));
        CHECK(r.overlap == r.gt_voxels);
    }
}

TEST_CASE("disjoint single-region masks score 0") {
    const LabelMap gt = strip(20, 0, 5);
    const LabelMap pred = strip(20, 10, 15);
    const MetricsReport report = region_metrics(pred, gt);
    REQUIRE(report.regions.size() == 2);
    const RegionMetrics& r = report.regions[1];
    CHECK(r.dice == 0.0);
    CHECK(r.recall == 0.0);
    CHECK(r.iou == 0.0);
    CHECK(report.mean_dice == 0.0);
}

TEST_CASE("worked overlap example: 100 vs 100 voxels sharing 50") {
    const LabelMap gt = strip(200, 0, 100);
    const LabelMap pred = strip(200, 50, 150);
    const MetricsReport report = region_metrics(pred, gt);
    const RegionMetrics& r = report.regions[1];
    CHECK(r.gt_voxels == 100);
    CHECK(r.pred_voxels == 100);
    CHECK(r.overlap == 50);
    CHECK(r.dice == doctest::Approx(0.5));
    CHECK(r.recall == doctest::Approx(0.5));
    CHECK(r.iou == doctest::Approx(1.0 / 3));
}

TEST_CASE("dice and iou are symmetric; recall is not") {
    Rng rng(0x51de);
    const Dims dims{7, 6, 4};
    const LabelMap a = random_labels(rng, dims, 5);
    const LabelMap b = random_labels(rng, dims, 5);
    const MetricsReport ab = region_metrics(a, b);
    const MetricsReport ba = region_metrics(b, a);
    REQUIRE(ab.regions.size() == ba.regions.size());
    for (std::size_t i = 0; i < ab.regions.size(); ++i) {
        CHECK(ab.regions[i].dice == doctest::Approx(ba.regions[i].dice).epsilon(1e-12));
        CHECK(ab.regions[i].iou == doctest::Approx(ba.regions[i].iou).epsilon(1e-12));
    }
}

TEST_CASE("dice equals 2 iou / (1 + iou) for every region") {
    Rng rng(0xd1ce);
    for (int round = 0; round < 5; ++round) {
        const Dims dims{6, 6, 3};
        const LabelMap gt = random_labels(rng, dims, 4);
        const LabelMap pred = random_labels(rng, dims, 4);
        for (const RegionMetrics& r : region_metrics(pred, gt).regions) {
            CHECK(r.dice ==
                  doctest::Approx(2.0 * r.iou / (1.0 + r.iou)).epsilon(1e-9));
        }
    }
}

TEST_CASE("background is reported but kept out of the means by default") {
    // Region 1 matches exactly; the background does not (pred widens the
    // strip into it).
    const LabelMap gt = strip(20, 0, 10);
    LabelMap pred = strip(20, 0, 10);
    pred.set(15, 0, 0, 1);  // false positive inside background
    const MetricsReport report = region_metrics(pred, gt);
    REQUIRE(report.regions.size() == 2);
    CHECK(report.regions[0].region == 0);
    CHECK(report.regions[0].dice < 1.0);
    CHECK(report.regions_in_mean == 1);
    // Mean covers region 1 only: dice = 2*10/(11+10).
    CHECK(report.mean_dice == doctest::Approx(20.0 / 21));

    MetricsConfig with_bg;
    with_bg.include_background = true;
    const MetricsReport full = region_metrics(pred, gt, with_bg);
    CHECK(full.regions_in_mean == 2);
    CHECK(full.mean_dice ==
          doctest::Approx(0.5 * (report.regions[0].dice + 20.0 / 21)));
}

TEST_CASE("voxel-weighted means weight regions by ground-truth size") {
    // Region 1: 90 voxels, perfect. Region 2: 10 voxels, fully missed
    // (predicted as background).
    LabelMap gt(Dims{100, 1, 1}, 3);
    LabelMap pred(Dims{100, 1, 1}, 3);
    for (std::uint32_t x = 0; x < 90; ++x) {
        gt.set(x, 0, 0, 1);
        pred.set(x, 0, 0, 1);
    }
    for (std::uint32_t x = 90; x < 100; ++x) gt.set(x, 0, 0, 2);

    const MetricsReport equal = region_metrics(pred, gt);
    CHECK(equal.mean_dice == doctest::Approx(0.5));

    MetricsConfig weighted;
    weighted.voxel_weighted = true;
    const MetricsReport byvox = region_metrics(pred, gt, weighted);
    CHECK(byvox.mean_dice == doctest::Approx(0.9));
}

TEST_CASE("region present only in the prediction scores zero and is skipped") {
    const LabelMap gt = strip(20, 0, 10, 3);  // region 2 nowhere in gt
    LabelMap pred = strip(20, 0, 10, 3);
    pred.set(15, 0, 0, 2);
    const MetricsReport report = region_metrics(pred, gt);
    REQUIRE(report.regions.size() == 3);
    const RegionMetrics& ghost = report.regions[2];
    CHECK(ghost.region == 2);
    CHECK(ghost.gt_voxels == 0);
    CHECK(ghost.dice == 0.0);
    CHECK(ghost.recall == 0.0);
    CHECK(ghost.iou == 0.0);
    CHECK(report.regions_in_mean == 1);

    // Entirely absent regions do not appear at all.
    const LabelMap gt4 = strip(20, 0, 10, 4);
    const LabelMap pred4 = strip(20, 0, 10, 4);
    CHECK(region_metrics(pred4, gt4).regions.size() == 2);
}

TEST_CASE("excluded voxels vanish from the counts") {
    // Prediction is wrong only on [10, 15); excluding that window makes
    // the agreement perfect.
    const LabelMap gt = strip(20, 0, 15);
    const LabelMap pred = strip(20, 0, 10);
    CHECK(region_metrics(pred, gt).mean_dice < 1.0);

    MetricsConfig config;
    config.exclude = Mask(Dims{20, 1, 1});
    for (std::uint32_t x = 10; x < 15; ++x) config.exclude->set(x, 0, 0, true);
    const MetricsReport masked = region_metrics(pred, gt, config);
    CHECK(masked.mean_dice == doctest::Approx(1.0));
    CHECK(masked.regions[1].gt_voxels == 10);
}

TEST_CASE("metric inputs must agree on grid and classes") {
    const LabelMap a = strip(20, 0, 5);
    CHECK_THROWS_AS(region_metrics(a, strip(21, 0, 5)), ShapeError);
    CHECK_THROWS_AS(region_metrics(a, strip(20, 0, 5, 3)), ShapeError);
    MetricsConfig config;
    config.exclude = Mask(Dims{19, 1, 1});
    CHECK_THROWS_AS(region_metrics(a, a, config), ShapeError);
}

TEST_CASE("metrics serialize to flat key-value text") {
    const LabelMap gt = strip(200, 0, 100);
    const LabelMap pred = strip(200, 50, 150);
    const KvFile kv = region_metrics(pred, gt).to_kv();
    CHECK(kv.get_double("mean_dice") == doctest::Approx(0.5));
    CHECK(kv.get_double("region.1.iou") == doctest::Approx(1.0 / 3));
    CHECK(kv.get_u64("region.1.gt_voxels") == 100);
    CHECK(kv.get("region.0.name") == "class_0");
}

TEST_CASE("reference mask erodes two voxels off every boundary") {
    SUBCASE("uniform volume keeps only the deep interior") {
        const Dims d{7, 6, 5};
        LabelMap gt(d, 2);
        const Mask lesion(d);  // empty; removal is a no-op
        const Mask ref = reference_mask(gt, lesion);
        CHECK(ref.count() == static_cast<std::size_t>(3) * 2 * 1);
        CHECK(ref.at(3, 2, 2));
        CHECK(!ref.at(1, 2, 2));  // within two steps of the grid border
    }
    SUBCASE("internal region boundaries erode both sides") {
        // Two half-volumes split at x = 5: voxels with x in {3,4,5,6}
        // are within two steps of the internal boundary.
        const Dims d{10, 7, 7};
        LabelMap gt(d, 2);
        for (std::uint32_t z = 0; z < d.nz; ++z) {
            for (std::uint32_t y = 0; y < d.ny; ++y) {
                for (std::uint32_t x = 5; x < d.nx; ++x) gt.set(x, y, z, 1);
            }
        }
        const Mask ref = reference_mask(gt, Mask(d));
        CHECK(ref.at(2, 3, 3));
        CHECK(!ref.at(3, 3, 3));
        CHECK(!ref.at(4, 3, 3));
        CHECK(!ref.at(5, 3, 3));
        CHECK(!ref.at(6, 3, 3));
        CHECK(ref.at(7, 3, 3));
    }
    SUBCASE("lesion voxels are removed from the reference") {
        const Dims d{7, 7, 7};
        LabelMap gt(d, 2);
        Mask lesion(d);
        lesion.set(3, 3, 3, true);
        const Mask ref = reference_mask(gt, lesion);
        CHECK(!ref.at(3, 3, 3));
        CHECK(ref.at(2, 3, 3));
    }
}

TEST_CASE("constant uncertainty is uninformative") {
    const Dims d{8, 8, 8};
    LabelMap gt(d, 2);
    Mask lesion(d);
    for (std::uint32_t x = 3; x < 5; ++x) lesion.set(x, 4, 4, true);
    const Volume u(d, 1, 0.37f);
    const OodReport report = ood_report(u, lesion, gt);
    CHECK(report.contrast_ratio == doctest::Approx(1.0));
    CHECK(report.auroc == doctest::Approx(0.5));
    CHECK(report.lesion_mean == doctest::Approx(0.37).epsilon(1e-6));
    CHECK(report.lesion_median == doctest::Approx(0.37).epsilon(1e-6));
}

TEST_CASE("a perfect uncertainty detector reaches AUROC 1") {
    const Dims d{8, 8, 8};
    LabelMap gt(d, 2);
    Mask lesion(d);
    Volume u(d, 1, 0.0f);
    for (std::uint32_t x = 3; x < 6; ++x) {
        lesion.set(x, 4, 4, true);
        u.at(x, 4, 4) = 1.0f;
    }
    const OodReport report = ood_report(u, lesion, gt);
    CHECK(report.auroc == doctest::Approx(1.0));
    CHECK(report.lesion_mean == doctest::Approx(1.0));
    CHECK(report.reference_mean == 0.0);
    CHECK(std::isinf(report.contrast_ratio));
}

TEST_CASE("separated uniform bands give AUROC 1 and mean-ratio contrast") {
    Rng rng(0x00d5);
    const Dims d{10, 10, 10};
    LabelMap gt(d, 2);
    Mask lesion(d);
    for (std::uint32_t z = 4; z < 6; ++z) {
        for (std::uint32_t y = 4; y < 6; ++y) {
            for (std::uint32_t x = 4; x < 6; ++x) lesion.set(x, y, z, true);
        }
    }
    Volume u(d, 1, 0.0f);
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        for (std::uint32_t y = 0; y < d.ny; ++y) {
            for (std::uint32_t x = 0; x < d.nx; ++x) {
                u.at(x, y, z) = static_cast<float>(
                    lesion.at(x, y, z) ? rng.uniform(0.6, 1.0)
                                       : rng.uniform(0.0, 0.4));
            }
        }
    }
    const OodReport report = ood_report(u, lesion, gt);
    CHECK(report.auroc == doctest::Approx(1.0));

    // Contrast equals the ratio of the sample means, recomputed here
    // from the raw values.
    const Mask ref = reference_mask(gt, lesion);
    double les_sum = 0.0, ref_sum = 0.0;
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        for (std::uint32_t y = 0; y < d.ny; ++y) {
            for (std::uint32_t x = 0; x < d.nx; ++x) {
                if (lesion.at(x, y, z)) les_sum += u.at(x, y, z);
                if (ref.at(x, y, z)) ref_sum += u.at(x, y, z);
            }
        }
    }
    const double expected = (les_sum / static_cast<double>(lesion.count())) /
                            (ref_sum / static_cast<double>(ref.count()));
    CHECK(report.contrast_ratio == doctest::Approx(expected).epsilon(1e-12));
    CHECK(report.lesion_voxels == lesion.count());
    CHECK(report.reference_voxels == ref.count());
}

TEST_CASE("rank AUROC matches the brute-force pairwise count") {
    Rng rng(0xa00c);
    const Dims d{8, 8, 6};
    LabelMap gt(d, 2);
    Mask lesion(d);
    for (std::uint32_t z = 2; z < 4; ++z) {
        for (std::uint32_t y = 3; y < 6; ++y) {
            for (std::uint32_t x = 3; x < 6; ++x) lesion.set(x, y, z, true);
        }
    }
    Volume u(d, 1, 0.0f);
    for (float& v : u.data()) {
        // Quantized values force plenty of rank ties.
        v = static_cast<float>(rng.uniform_index(8)) / 8.0f;
    }
    const OodReport report = ood_report(u, lesion, gt);

    const Mask ref = reference_mask(gt, lesion);
    std::vector<double> pos, neg;
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        for (std::uint32_t y = 0; y < d.ny; ++y) {
            for (std::uint32_t x = 0; x < d.nx; ++x) {
                if (lesion.at(x, y, z)) pos.push_back(u.at(x, y, z));
                if (ref.at(x, y, z)) neg.push_back(u.at(x, y, z));
            }
        }
    }
    double wins = 0.0;
    for (double p : pos) {
        for (double n : neg) {
            if (p > n) wins += 1.0;
            else if (p == n) wins += 0.5;
        }
    }
    const double brute = wins / (static_cast<double>(pos.size()) *
                                 static_cast<double>(neg.size()));
    CHECK(report.auroc == doctest::Approx(brute).epsilon(1e-12));
}

TEST_CASE("median handles even-sized samples") {
    const Dims d{8, 8, 8};
    LabelMap gt(d, 2);
    Mask lesion(d);
    const float values[4] = {0.8f, 0.1f, 0.4f, 0.2f};
    Volume u(d, 1, 0.05f);
    for (std::uint32_t x = 2; x < 6; ++x) {
        lesion.set(x, 4, 4, true);
        u.at(x, 4, 4) = values[x - 2];
    }
    const OodReport report = ood_report(u, lesion, gt);
    // Sorted lesion values 0.1 0.2 0.4 0.8; the median averages the
    // middle pair.
    CHECK(report.lesion_median == doctest::Approx(0.3).epsilon(1e-6));
    CHECK(report.reference_median == doctest::Approx(0.05).epsilon(1e-6));
}

TEST_CASE("degenerate OOD inputs are rejected") {
    const Dims d{8, 8, 8};
    LabelMap gt(d, 2);
    const Volume u(d, 1, 0.5f);
    CHECK_THROWS_AS(ood_report(u, Mask(d), gt), DomainError);

    // A grid this small erodes away entirely.
    const Dims tiny{4, 4, 4};
    LabelMap tiny_gt(tiny, 2);
    Mask tiny_lesion(tiny);
    tiny_lesion.set(1, 1, 1, true);
    CHECK_THROWS_AS(ood_report(Volume(tiny, 1, 0.5f), tiny_lesion, tiny_gt),
                    DomainError);

    Mask lesion(d);
    lesion.set(4, 4, 4, true);
    CHECK_THROWS_AS(ood_report(Volume(d, 2, 0.5f), lesion, gt), ShapeError);
    CHECK_THROWS_AS(ood_report(Volume(Dims{7, 8, 8}, 1, 0.5f), lesion, gt),
                    ShapeError);
}

TEST_CASE("ood report serializes to key-value text") {
    const Dims d{8, 8, 8};
    LabelMap gt(d, 2);
    Mask lesion(d);
    lesion.set(4, 4, 4, true);
    Volume u(d, 1, 0.25f);
    u.at(4, 4, 4) = 0.75f;
    const KvFile kv = ood_report(u, lesion, gt).to_kv();
    CHECK(kv.get_double("contrast_ratio") == doctest::Approx(3.0));
    CHECK(kv.get_double("auroc") == doctest::Approx(1.0));
    CHECK(kv.get_u64("lesion_voxels") == 1);
}

TEST_CASE("axis tokens parse and reject junk") {
    CHECK(parse_axis("x") == SliceAxis::kX);
    CHECK(parse_axis("y") == SliceAxis::kY);
    CHECK(parse_axis("z") == SliceAxis::kZ);
    CHECK_THROWS_AS(parse_axis("w"), ConfigError);
    CHECK_THROWS_AS(parse_axis("Z"), ConfigError);
}

TEST_CASE("heatmap renders follow the P5 contract") {
    SUBCASE("header, byte length and min-max endpoints") {
        Volume v(Dims{3, 2, 1}, 1, 0.0f);
        v.at(0, 0, 0) = 2.0f;
        v.at(1, 0, 0) = 4.0f;
        v.at(2, 0, 0) = 6.0f;
        v.at(0, 1, 0) = 2.0f;
        v.at(1, 1, 0) = 2.0f;
        v.at(2, 1, 0) = 2.0f;
        const fs::path p = test_dir() / "heat.pgm";
        render_heatmap(v, SliceAxis::kZ, 0, p);
        const std::vector<unsigned char> bytes = slurp(p);
        const std::string header = "P5\n3 2\n255\n";
        REQUIRE(bytes.size() == header.size() + 6);
        CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) ==
              header);
        // Values 2,4,6 normalize to 0, 128 (127.5 rounded), 255.
        CHECK(bytes[header.size() + 0] == 0);
        CHECK(bytes[header.size() + 1] == 128);
        CHECK(bytes[header.size() + 2] == 255);
        CHECK(bytes[header.size() + 3] == 0);
    }
    SUBCASE("constant slice renders black") {
        const Volume v(Dims{4, 4, 2}, 1, 3.25f);
        const fs::path p = test_dir() / "flat.pgm";
        render_heatmap(v, SliceAxis::kZ, 1, p);
        const std::vector<unsigned char> bytes = slurp(p);
        const std::string header = "P5\n4 4\n255\n";
        REQUIRE(bytes.size() == header.size() + 16);
        for (std::size_t i = header.size(); i < bytes.size(); ++i) {
            CHECK(bytes[i] == 0);
        }
    }
    SUBCASE("two-valued slice maps to the endpoints") {
        Volume v(Dims{2, 1, 1}, 1, 0.0f);
        v.at(1, 0, 0) = 1.0f;
        const fs::path p = test_dir() / "binary.pgm";
        render_heatmap(v, SliceAxis::kZ, 0, p);
        const std::vector<unsigned char> bytes = slurp(p);
        CHECK(bytes[bytes.size() - 2] == 0);
        CHECK(bytes[bytes.size() - 1] == 255);
    }
    SUBCASE("axis selection fixes the slice plane") {
        // Value marks x = 1; slicing axis x at 1 must see it everywhere.
        Volume v(Dims{4, 3, 2}, 1, 0.0f);
        for (std::uint32_t z = 0; z < 2; ++z) {
            for (std::uint32_t y = 0; y < 3; ++y) v.at(1, y, z) = 1.0f;
        }
        const fs::path p = test_dir() / "axis_x.pgm";
        render_heatmap(v, SliceAxis::kX, 1, p);
        const std::vector<unsigned char> bytes = slurp(p);
        const std::string header = "P5\n3 2\n255\n";
        REQUIRE(bytes.size() == header.size() + 6);
        // Constant slice again: all zero by the degenerate convention.
        for (std::size_t i = header.size(); i < bytes.size(); ++i) {
            CHECK(bytes[i] == 0);
        }

        const fs::path py = test_dir() / "axis_y.pgm";
        render_heatmap(v, SliceAxis::kY, 0, py);
        const std::vector<unsigned char> ybytes = slurp(py);
        const std::string yheader = "P5\n4 2\n255\n";
        REQUIRE(ybytes.size() == yheader.size() + 8);
        // Row layout: x across, z down; the x = 1 column is bright.
        CHECK(ybytes[yheader.size() + 0] == 0);
        CHECK(ybytes[yheader.size() + 1] == 255);
        CHECK(ybytes[yheader.size() + 4] == 0);
        CHECK(ybytes[yheader.size() + 5] == 255);
    }
    SUBCASE("bad inputs are rejected") {
        const Volume v(Dims{4, 3, 2}, 1, 0.0f);
        CHECK_THROWS_AS(render_heatmap(v, SliceAxis::kZ, 2, test_dir() / "x.pgm"),
                        ShapeError);
        const Volume multi(Dims{4, 3, 2}, 2, 0.0f);
        CHECK_THROWS_AS(
            render_heatmap(multi, SliceAxis::kZ, 0, test_dir() / "x.pgm"),
            ShapeError);
        CHECK_THROWS_AS(
            render_heatmap(v, SliceAxis::kZ, 0, test_dir() / "no_dir" / "x.pgm"),
            IoError);
    }
}

TEST_CASE("labelmap renders follow the P6 contract with the fixed palette") {
    LabelMap lm(Dims{3, 1, 1}, 30);
    lm.set(0, 0, 0, 0);
    lm.set(1, 0, 0, 1);
    lm.set(2, 0, 0, 25);  // wraps to palette entry 1
    const fs::path p = test_dir() / "labels.ppm";
    render_labelmap(lm, SliceAxis::kZ, 0, p);
    const std::vector<unsigned char> bytes = slurp(p);
    const std::string header = "P6\n3 1\n255\n";
    REQUIRE(bytes.size() == header.size() + 9);
    CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
    const std::size_t o = header.size();
    // Entry 0 is black; entry 1 is the first saturated colour.
    CHECK(bytes[o + 0] == 0);
    CHECK(bytes[o + 1] == 0);
    CHECK(bytes[o + 2] == 0);
    CHECK(bytes[o + 3] == 230);
    CHECK(bytes[o + 4] == 25);
    CHECK(bytes[o + 5] == 75);
    CHECK(bytes[o + 6] == 230);
    CHECK(bytes[o + 7] == 25);
    CHECK(bytes[o + 8] == 75);
}
