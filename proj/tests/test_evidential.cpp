#include <doctest.h>

#include <cmath>
#include <vector>

#include "evseg/errors.hpp"
#include "evseg/evidential.hpp"
#include "evseg/rng.hpp"

using namespace evseg;

TEST_CASE("worked example: evidence (1,2,3) over three classes") {
    EvidenceField e = EvidenceField::create(Dims{1, 1, 1}, 3, "fa");
    e.at(0, 0, 0, 0) = 1.0f;
    e.at(0, 0, 0, 1) = 2.0f;
    e.at(0, 0, 0, 2) = 3.0f;

    // Dirichlet strength S = 1+2+3+3 = 9.
    const Volume alpha = evidence_to_alpha(e);
    CHECK(alpha.at(0, 0, 0, 0) == 2.0f);
    CHECK(alpha.at(0, 0, 0, 1) == 3.0f);
    CHECK(alpha.at(0, 0, 0, 2) == 4.0f);

    const BeliefField b = beliefs(e);
    CHECK(b.belief_at(0, 0, 0, 0) == doctest::Approx(1.0 / 9).epsilon(1e-7));
    CHECK(b.belief_at(0, 0, 0, 1) == doctest::Approx(2.0 / 9).epsilon(1e-7));
    CHECK(b.belief_at(0, 0, 0, 2) == doctest::Approx(3.0 / 9).epsilon(1e-7));
    CHECK(b.uncertainty_at(0, 0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-7));

    const Volume p = expected_probabilities(alpha);
    CHECK(p.at(0, 0, 0, 0) == doctest::Approx(2.0 / 9).epsilon(1e-7));
    CHECK(p.at(0, 0, 0, 1) == doctest::Approx(3.0 / 9).epsilon(1e-7));
    CHECK(p.at(0, 0, 0, 2) == doctest::Approx(4.0 / 9).epsilon(1e-7));
}

TEST_CASE("zero evidence means total uncertainty and uniform probabilities") {
    EvidenceField e = EvidenceField::create(Dims{2, 2, 1}, 4);
    const BeliefField b = beliefs(e);
    for (std::uint32_t y = 0; y < 2; ++y) {
        for (std::uint32_t x = 0; x < 2; ++x) {
            CHECK(b.uncertainty_at(x, y, 0) == 1.0f);
            for (std::uint32_t n = 0; n < 4; ++n) {
                CHECK(b.belief_at(x, y, 0, n) == 0.0f);
            }
        }
    }
    const Volume p = expected_probabilities(evidence_to_alpha(e));
    CHECK(p.at(1, 1, 0, 2) == doctest::Approx(0.25).epsilon(1e-7));
}

TEST_CASE("belief masses and uncertainty always partition unity") {
    Rng rng(0xeb1d);
    EvidenceField e = EvidenceField::create(Dims{7, 5, 3}, 6);
    for (float& v : e.values) {
        // Mix of zeros, moderate and extreme evidence.
        const double roll = rng.uniform();
        if (roll < 0.2) {
            v = 0.0f;
        } else if (roll < 0.9) {
            v = static_cast<float>(rng.uniform(0.0, 50.0));
        } else {
            v = static_cast<float>(rng.uniform(1e6, 1e8));
        }
    }
    const BeliefField b = beliefs(e);
    const Volume p = expected_probabilities(evidence_to_alpha(e));
    const std::size_t voxels = e.dims.voxel_count();
    for (std::size_t i = 0; i < voxels; ++i) {
        double mass = b.uncertainty[i];
        double prob = 0.0;
        for (std::size_t n = 0; n < 6; ++n) {
            mass += b.belief[n * voxels + i];
            prob += p.data()[n * voxels + i];
            // Expected probability dominates belief: the +1 prior
            // pseudocount shifts exactly u/N of mass onto each class. With
            // extreme evidence that gap drops below float32 resolution, so
            // the comparison is non-strict with an absolute tolerance.
            CHECK(p.data()[n * voxels + i] >= b.belief[n * voxels + i]);
            const double gap = static_cast<double>(p.data()[n * voxels + i]) -
                               static_cast<double>(b.belief[n * voxels + i]);
            CHECK(std::abs(gap - b.uncertainty[i] / 6.0) <= 1e-6);
        }
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(prob == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("uncertainty shrinks as total evidence grows") {
    double previous = 2.0;
    for (double total : {0.0, 1.0, 10.0, 100.0, 1e4, 1e8}) {
        EvidenceField e = EvidenceField::create(Dims{1, 1, 1}, 3);
        e.at(0, 0, 0, 0) = static_cast<float>(total);
        const BeliefField b = beliefs(e);
        CHECK(b.uncertainty_at(0, 0, 0) < previous);
        previous = b.uncertainty_at(0, 0, 0);
    }
    CHECK(previous > 0.0);  // never reaches zero for finite evidence
}

TEST_CASE("invalid evidence and alpha are rejected") {
    CHECK_THROWS_AS(
        EvidenceField::from_values(Dims{1, 1, 1}, 2, std::vector<float>{1.0f, -0.5f}),
        DomainError);
    CHECK_THROWS_AS(
        EvidenceField::from_values(Dims{1, 1, 1}, 2,
                                   std::vector<float>{std::nanf(""), 0.0f}),
        DomainError);
    CHECK_THROWS_AS(
        EvidenceField::from_values(Dims{2, 1, 1}, 2, std::vector<float>{1.0f, 2.0f}),
        ShapeError);

    // alpha below 1 cannot come from non-negative evidence.
    Volume bad_alpha(Dims{1, 1, 1}, 2, 0.5f);
    CHECK_THROWS_AS(expected_probabilities(bad_alpha), DomainError);
}

TEST_CASE("evidence fields convert to volumes and back") {
    EvidenceField e = EvidenceField::create(Dims{3, 2, 2}, 4, "md");
    Rng rng(0x417);
    for (float& v : e.values) v = static_cast<float>(rng.uniform(0.0, 9.0));

    const Volume v = e.to_volume();
    const EvidenceField back = EvidenceField::from_volume(v, "md");
    CHECK(back.dims == e.dims);
    CHECK(back.num_classes == e.num_classes);
    CHECK(back.subnet_id == "md");
    CHECK(back.values == e.values);
}
