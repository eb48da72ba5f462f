#include "evseg/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "evseg/errors.hpp"

namespace evseg {
namespace {

// Per-voxel Dirichlet strength S = sum e + N for one member, in double.
std::vector<double> member_strength(const EvidenceField& f) {
    const std::size_t voxels = f.dims.voxel_count();
    const std::size_t classes = f.num_classes;
    std::vector<double> s(voxels, static_cast<double>(f.num_classes));
    for (std::size_t c = 0; c < classes; ++c) {
        const float* e = f.values.data() + c * voxels;
        for (std::size_t i = 0; i < voxels; ++i) {
            s[i] += static_cast<double>(e[i]);
        }
    }
    return s;
}

// Member-mean beliefs in double, channel-major like the inputs. Members
// accumulate in order; every voxel sees the same arithmetic a scalar
// per-voxel evaluation would.
std::vector<double> mean_beliefs_f64(const SubnetOutputs& outs) {
    const std::size_t voxels = outs.members[0].dims.voxel_count();
    const std::size_t classes = outs.members[0].num_classes;
    std::vector<double> acc(classes * voxels, 0.0);
    for (const EvidenceField& f : outs.members) {
        const std::vector<double> s = member_strength(f);
        for (std::size_t c = 0; c < classes; ++c) {
            const float* e = f.values.data() + c * voxels;
            double* a = acc.data() + c * voxels;
            for (std::size_t i = 0; i < voxels; ++i) {
                a[i] += static_cast<double>(e[i]) / s[i];
            }
        }
    }
    const double inv_m = 1.0 / static_cast<double>(outs.members.size());
    for (double& v : acc) v *= inv_m;
    return acc;
}

// Shannon entropy (natural log, 0 ln 0 = 0) of one voxel's channel
// values, taken in channel order.
double entropy_at(const double* buf, std::size_t voxels, std::size_t classes,
                  std::size_t i) {
    double u = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        const double p = buf[c * voxels + i];
        if (p > 0.0) u -= p * std::log(p);
    }
    return u;
}

// Requires every member to hold per-voxel probability vectors; the sum
// over classes may deviate from 1 by at most 1e-4.
void check_probability_members(const SubnetOutputs& outs) {
    const std::size_t voxels = outs.members[0].dims.voxel_count();
    const std::size_t classes = outs.members[0].num_classes;
    const std::vector<std::string> names = outs.member_names();
    for (std::size_t q = 0; q < outs.members.size(); ++q) {
        const std::vector<float>& v = outs.members[q].values;
        for (std::size_t i = 0; i < voxels; ++i) {
            double sum = 0.0;
            for (std::size_t c = 0; c < classes; ++c) {
                sum += static_cast<double>(v[c * voxels + i]);
            }
            if (std::abs(sum - 1.0) > 1e-4) {
                throw DomainError("member " + names[q] + " is not a probability field: voxel " +
                                  std::to_string(i) + " sums to " + std::to_string(sum));
            }
        }
    }
}

LabelMap labels_from(const Dims& dims, std::uint16_t num_classes,
                     std::vector<std::uint16_t> values,
                     std::vector<std::string> names) {
    return LabelMap::from_data(dims, num_classes, std::move(values),
                               std::move(names));
}

Volume store_plane(const Dims& dims, const std::vector<double>& values) {
    Volume out(dims, 1);
    for (std::size_t i = 0; i < values.size(); ++i) {
        out.data()[i] = static_cast<float>(values[i]);
    }
    return out;
}

}  // namespace

const char* fusion_criterion_name(FusionCriterion criterion) {
    switch (criterion) {
        case FusionCriterion::kEvidence: return "evidence";
        case FusionCriterion::kProbability: return "probability";
        case FusionCriterion::kEntropy: return "entropy";
    }
    throw ConfigError("unknown fusion criterion");
}

void SubnetOutputs::validate() const {
    if (members.empty()) {
        throw ShapeError("ensemble needs at least one member");
    }
    if (members.size() > 65535) {
        throw ShapeError("ensemble member count must fit in a 16-bit label");
    }
    const EvidenceField& first = members[0];
    if (first.num_classes == 0 || first.dims.voxel_count() == 0) {
        throw ShapeError("ensemble members need a nonempty grid and at least one class");
    }
    for (std::size_t q = 1; q < members.size(); ++q) {
        if (!(members[q].dims == first.dims) ||
            members[q].num_classes != first.num_classes) {
            throw ShapeError("ensemble member " + std::to_string(q) +
                             " disagrees with member 0 on grid or class count");
        }
    }
    std::vector<std::string> ids;
    ids.reserve(members.size());
    for (const EvidenceField& f : members) ids.push_back(f.subnet_id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
        throw ShapeError("ensemble members must carry distinct subnet ids");
    }
}

std::vector<std::string> SubnetOutputs::member_names() const {
    std::vector<std::string> names;
    names.reserve(members.size());
    for (std::size_t q = 0; q < members.size(); ++q) {
        names.push_back(members[q].subnet_id.empty()
                            ? "subnet_" + std::to_string(q)
                            : members[q].subnet_id);
    }
    return names;
}

Volume average_beliefs(const SubnetOutputs& outs) {
    outs.validate();
    const std::vector<double> mean = mean_beliefs_f64(outs);
    const EvidenceField& first = outs.members[0];
    Volume out(first.dims, first.num_classes);
    for (std::size_t i = 0; i < mean.size(); ++i) {
        out.data()[i] = static_cast<float>(mean[i]);
    }
    return out;
}

Volume fused_uncertainty(const Volume& mean_beliefs) {
    const std::size_t voxels = mean_beliefs.dims().voxel_count();
    const std::size_t classes = mean_beliefs.channels();
    const std::vector<float>& v = mean_beliefs.data();
    Volume out(mean_beliefs.dims(), 1, 0.0f, mean_beliefs.voxel_size());
    for (std::size_t i = 0; i < voxels; ++i) {
        double u = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = static_cast<double>(v[c * voxels + i]);
            if (p < 0.0) {
                throw DomainError("entropy input must be non-negative");
            }
            if (p > 0.0) u -= p * std::log(p);
        }
        out.data()[i] = static_cast<float>(u);
    }
    return out;
}

std::vector<Volume> member_uncertainties(const SubnetOutputs& outs) {
    outs.validate();
    std::vector<Volume> maps;
    maps.reserve(outs.members.size());
    for (const EvidenceField& f : outs.members) {
        const std::vector<double> s = member_strength(f);
        Volume u(f.dims, 1);
        const double n = static_cast<double>(f.num_classes);
        for (std::size_t i = 0; i < s.size(); ++i) {
            u.data()[i] = static_cast<float>(n / s[i]);
        }
        maps.push_back(std::move(u));
    }
    return maps;
}

FusedResult fuse_evidence_based(const SubnetOutputs& outs,
                                std::vector<std::string> class_names) {
    outs.validate();
    const EvidenceField& first = outs.members[0];
    const std::size_t voxels = first.dims.voxel_count();
    const std::size_t classes = first.num_classes;
    const std::size_t m = outs.members.size();
    const double n = static_cast<double>(first.num_classes);

    std::vector<std::vector<double>> strengths;
    strengths.reserve(m);
    for (const EvidenceField& f : outs.members) {
        strengths.push_back(member_strength(f));
    }

    std::vector<std::uint16_t> label(voxels, 0);
    std::vector<std::uint16_t> chosen(voxels, 0);
    for (std::size_t i = 0; i < voxels; ++i) {
        std::size_t winner = 0;
        double best_u = n / strengths[0][i];
        for (std::size_t q = 1; q < m; ++q) {
            const double u = n / strengths[q][i];
            if (u < best_u) {
                best_u = u;
                winner = q;
            }
        }
        const std::vector<float>& e = outs.members[winner].values;
        const double s = strengths[winner][i];
        std::size_t best_class = 0;
        double best_b = static_cast<double>(e[i]) / s;
        for (std::size_t c = 1; c < classes; ++c) {
            const double b = static_cast<double>(e[c * voxels + i]) / s;
            if (b > best_b) {
                best_b = b;
                best_class = c;
            }
        }
        label[i] = static_cast<std::uint16_t>(best_class);
        chosen[i] = static_cast<std::uint16_t>(winner);
    }

    // The uncertainty channel stays in double from evidence to entropy;
    // see the header note about the one-ulp gap to the two-step helper
    // composition.
    const std::vector<double> mean = mean_beliefs_f64(outs);
    std::vector<double> entropy(voxels);
    for (std::size_t i = 0; i < voxels; ++i) {
        entropy[i] = entropy_at(mean.data(), voxels, classes, i);
    }

    FusedResult out;
    out.labels = labels_from(first.dims, first.num_classes, std::move(label),
                             std::move(class_names));
    out.uncertainty = store_plane(first.dims, entropy);
    out.chosen_subnet = labels_from(first.dims,
                                    static_cast<std::uint16_t>(m),
                                    std::move(chosen), outs.member_names());
    out.criterion = FusionCriterion::kEvidence;
    return out;
}

FusedResult fuse_probability_based(const SubnetOutputs& outs,
                                   std::vector<std::string> class_names) {
    outs.validate();
    check_probability_members(outs);
    const EvidenceField& first = outs.members[0];
    const std::size_t voxels = first.dims.voxel_count();
    const std::size_t classes = first.num_classes;

    std::vector<double> mean(classes * voxels, 0.0);
    for (const EvidenceField& f : outs.members) {
        for (std::size_t j = 0; j < mean.size(); ++j) {
            mean[j] += static_cast<double>(f.values[j]);
        }
    }
    const double inv_m = 1.0 / static_cast<double>(outs.members.size());
    for (double& v : mean) v *= inv_m;

    std::vector<std::uint16_t> label(voxels, 0);
    std::vector<double> entropy(voxels);
    for (std::size_t i = 0; i < voxels; ++i) {
        std::size_t best_class = 0;
        double best_p = mean[i];
        for (std::size_t c = 1; c < classes; ++c) {
            const double p = mean[c * voxels + i];
            if (p > best_p) {
                best_p = p;
                best_class = c;
            }
        }
        label[i] = static_cast<std::uint16_t>(best_class);
        entropy[i] = entropy_at(mean.data(), voxels, classes, i);
    }

    FusedResult out;
    out.labels = labels_from(first.dims, first.num_classes, std::move(label),
                             std::move(class_names));
    out.uncertainty = store_plane(first.dims, entropy);
    out.chosen_subnet = LabelMap(first.dims,
                                 static_cast<std::uint16_t>(outs.members.size()),
                                 outs.member_names());
    out.criterion = FusionCriterion::kProbability;
    return out;
}

FusedResult fuse_entropy_based(const SubnetOutputs& outs,
                               std::vector<std::string> class_names) {
    outs.validate();
    check_probability_members(outs);
    const EvidenceField& first = outs.members[0];
    const std::size_t voxels = first.dims.voxel_count();
    const std::size_t classes = first.num_classes;
    const std::size_t m = outs.members.size();

    // Promote each member once so per-voxel entropy reads are cheap.
    std::vector<std::vector<double>> probs;
    probs.reserve(m);
    for (const EvidenceField& f : outs.members) {
        probs.emplace_back(f.values.begin(), f.values.end());
    }

    std::vector<std::uint16_t> label(voxels, 0);
    std::vector<std::uint16_t> chosen(voxels, 0);
    std::vector<double> entropy(voxels);
    for (std::size_t i = 0; i < voxels; ++i) {
        std::size_t winner = 0;
        double best_h = entropy_at(probs[0].data(), voxels, classes, i);
        for (std::size_t q = 1; q < m; ++q) {
            const double h = entropy_at(probs[q].data(), voxels, classes, i);
            if (h < best_h) {
                best_h = h;
                winner = q;
            }
        }
        const std::vector<double>& p = probs[winner];
        std::size_t best_class = 0;
        double best_p = p[i];
        for (std::size_t c = 1; c < classes; ++c) {
            if (p[c * voxels + i] > best_p) {
                best_p = p[c * voxels + i];
                best_class = c;
            }
        }
        label[i] = static_cast<std::uint16_t>(best_class);
        chosen[i] = static_cast<std::uint16_t>(winner);
        entropy[i] = best_h;
    }

    FusedResult out;
    out.labels = labels_from(first.dims, first.num_classes, std::move(label),
                             std::move(class_names));
    out.uncertainty = store_plane(first.dims, entropy);
    out.chosen_subnet = labels_from(first.dims, static_cast<std::uint16_t>(m),
                                    std::move(chosen), outs.member_names());
    out.criterion = FusionCriterion::kEntropy;
    return out;
}

}  // namespace evseg
