#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evseg/evidential.hpp"
#include "evseg/volume.hpp"

namespace evseg {

// Which rule produced a fused result.
enum class FusionCriterion : std::uint8_t {
    // Per voxel, the member with the lowest subjective-logic uncertainty
    // mass u = N / S supplies the label.
    kEvidence,
    // Argmax of the member-mean class probabilities; no member is
    // singled out.
    kProbability,
    // Per voxel, the member whose probability vector has the lowest
    // Shannon entropy supplies the label.
    kEntropy,
};

// Stable lowercase token for file names and reports: "evidence",
// "probability" or "entropy".
const char* fusion_criterion_name(FusionCriterion criterion);

// The member outputs an ensemble fuses, one field per subnetwork, all on
// the same grid with the same class count. For the evidence-based rule
// the fields hold non-negative evidence; for the probability and entropy
// rules they hold per-voxel probability vectors (each voxel's values
// summing to 1), reusing the same container.
struct SubnetOutputs {
    std::vector<EvidenceField> members;

    // Throws ShapeError when empty, when grids or class counts disagree,
    // or when two members carry the same subnet_id. Member count must
    // fit in a label (uint16) so a per-voxel member index can be stored
    // as a LabelMap.
    void validate() const;

    // Display names for the members: the subnet_id where present, else
    // "subnet_<index>".
    std::vector<std::string> member_names() const;

    std::size_t size() const { return members.size(); }
};

// One fused segmentation. `labels` holds the winning class per voxel,
// `uncertainty` one fused uncertainty value per voxel, and
// `chosen_subnet` the member index that supplied each voxel's label
// (all zeros for the probability rule, which averages instead of
// selecting; its names come from member_names()).
struct FusedResult {
    LabelMap labels;
    Volume uncertainty;
    LabelMap chosen_subnet;
    FusionCriterion criterion = FusionCriterion::kEvidence;
};

// Per-voxel, per-class arithmetic mean of the members' belief masses
// b_n = e_n / S, each member using its own strength S = sum e + N.
// Accumulation runs in double, in member order, and rounds once on
// store.
Volume average_beliefs(const SubnetOutputs& outs);

// Per-voxel Shannon entropy -sum p ln p (natural log, 0 ln 0 = 0) of a
// multichannel field of non-negative weights, as a one-channel volume.
// Throws DomainError on negative input. Mean beliefs sum to below 1, so
// for two classes the entropy can reach 2/e, slightly above ln 2; for
// three or more classes the usual ln N bound binds.
Volume fused_uncertainty(const Volume& mean_beliefs);

// Per-member uncertainty mass u = N / S as one-channel volumes, in
// member order.
std::vector<Volume> member_uncertainties(const SubnetOutputs& outs);

// Per voxel, the member with the minimum uncertainty mass u = N / S
// supplies the label (argmax of its beliefs). Ties in u and in the
// argmax both resolve to the lowest index. The uncertainty channel is
// the entropy of the member-mean beliefs, carried in double end to end;
// composing fused_uncertainty(average_beliefs(...)) rounds the means to
// float in between and can differ from it by about one float ulp.
// class_names, when given, become the label map's class names.
FusedResult fuse_evidence_based(const SubnetOutputs& outs,
                                std::vector<std::string> class_names = {});

// Argmax of the member-mean probability vector per voxel; uncertainty is
// the entropy of that mean. Members must hold probability fields; a
// voxel sum deviating from 1 by more than 1e-4 in any member throws
// DomainError.
FusedResult fuse_probability_based(const SubnetOutputs& outs,
                                   std::vector<std::string> class_names = {});

// Per voxel, the member with the lowest probability entropy supplies the
// label, and that minimal entropy is the voxel's uncertainty value.
// Same probability precondition as fuse_probability_based.
FusedResult fuse_entropy_based(const SubnetOutputs& outs,
                               std::vector<std::string> class_names = {});

}  // namespace evseg
