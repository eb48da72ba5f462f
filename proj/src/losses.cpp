#include "evseg/losses.hpp"

#include <cmath>

#include "evseg/activations.hpp"
#include "evseg/errors.hpp"
#include "evseg/special_functions.hpp"

namespace evseg {
namespace {

// Per-voxel true class indices extracted from a one-hot target volume,
// validating that it really is one-hot (every value 0 or 1, exactly one
// 1 per voxel).
std::vector<std::uint16_t> gather_target(const Volume& target) {
    const std::size_t voxels = target.dims().voxel_count();
    const std::size_t classes = target.channels();
    std::vector<std::uint16_t> gt(voxels);
    for (std::size_t i = 0; i < voxels; ++i) {
        int hits = 0;
        std::uint16_t cls = 0;
        for (std::size_t n = 0; n < classes; ++n) {
            const float v = target.data()[n * voxels + i];
            if (v == 1.0f) {
                ++hits;
                cls = static_cast<std::uint16_t>(n);
            } else if (v != 0.0f) {
                throw DomainError("target is not one-hot: found value " +
                                  std::to_string(v));
            }
        }
        if (hits != 1) {
            throw DomainError("target is not one-hot: a voxel has " +
                              std::to_string(hits) + " active classes");
        }
        gt[i] = cls;
    }
    return gt;
}

void check_same_grid(const Dims& a, std::size_t a_classes, const Volume& target,
                     const char* what) {
    if (!(a == target.dims()) || a_classes != target.channels()) {
        throw ShapeError(std::string(what) + " and target shapes differ: " +
                         to_string(a) + " x" + std::to_string(a_classes) + " vs " +
                         to_string(target.dims()) + " x" +
                         std::to_string(target.channels()));
    }
}

// Evidence (double) for one buffer laid out channel-major.
std::vector<double> alpha_from_evidence_values(const std::vector<float>& evidence) {
    std::vector<double> alpha(evidence.size());
    for (std::size_t i = 0; i < evidence.size(); ++i) {
        alpha[i] = static_cast<double>(evidence[i]) + 1.0;
    }
    return alpha;
}

struct DiceSums {
    std::vector<double> intersection;  // per class: sum p * y
    std::vector<double> predicted;     // per class: sum p
    std::vector<double> truth;         // per class: sum y
};

DiceSums dice_sums(const std::vector<double>& probs,
                   const std::vector<std::uint16_t>& gt, std::size_t voxels,
                   std::size_t classes) {
    DiceSums s;
    s.intersection.assign(classes, 0.0);
    s.predicted.assign(classes, 0.0);
    s.truth.assign(classes, 0.0);
    for (std::size_t n = 0; n < classes; ++n) {
        double inter = 0.0, pred = 0.0;
        const double* p = probs.data() + n * voxels;
        for (std::size_t i = 0; i < voxels; ++i) {
            pred += p[i];
            if (gt[i] == n) inter += p[i];
        }
        s.intersection[n] = inter;
        s.predicted[n] = pred;
    }
    for (std::size_t i = 0; i < voxels; ++i) s.truth[gt[i]] += 1.0;
    return s;
}

double dice_from_sums(const DiceSums& s, std::size_t classes, double eps) {
    double mean = 0.0;
    for (std::size_t n = 0; n < classes; ++n) {
        mean += (2.0 * s.intersection[n] + eps) /
                (s.predicted[n] + s.truth[n] + eps);
    }
    return 1.0 - mean / static_cast<double>(classes);
}

// Everything below works on a per-voxel alpha array in double. The
// breakdown and gradient share these helpers so they cannot drift apart,
// and share one precomputation so evaluating both costs one pass.

struct AlphaPre {
    std::vector<double> strength;  // per voxel: S = sum alpha
    std::vector<double> probs;     // channel-major: alpha / S
    DiceSums sums;
};

AlphaPre precompute_alpha(const std::vector<double>& alpha,
                          const std::vector<std::uint16_t>& gt, std::size_t voxels,
                          std::size_t classes) {
    AlphaPre pre;
    pre.strength.assign(voxels, 0.0);
    for (std::size_t i = 0; i < voxels; ++i) {
        double total = 0.0;
        for (std::size_t n = 0; n < classes; ++n) total += alpha[n * voxels + i];
        pre.strength[i] = total;
    }
    pre.probs.resize(alpha.size());
    for (std::size_t n = 0; n < classes; ++n) {
        for (std::size_t i = 0; i < voxels; ++i) {
            pre.probs[n * voxels + i] = alpha[n * voxels + i] / pre.strength[i];
        }
    }
    pre.sums = dice_sums(pre.probs, gt, voxels, classes);
    return pre;
}

LossBreakdown breakdown_from_alpha(const std::vector<double>& alpha,
                                   const std::vector<std::uint16_t>& gt,
                                   std::size_t voxels, std::size_t classes,
                                   const LossConfig& cfg, const AlphaPre& pre) {
    LossBreakdown out;
    out.dice = dice_from_sums(pre.sums, classes, cfg.dice_epsilon);

    const double log_gamma_classes = log_gamma(static_cast<double>(classes));
    double rce_sum = 0.0;
    double kl_sum = 0.0;
    for (std::size_t i = 0; i < voxels; ++i) {
        rce_sum += digamma(pre.strength[i]) - digamma(alpha[gt[i] * voxels + i]);

        // KL of the off-class Dirichlet against the uniform one. The true
        // class has alpha_tilde exactly 1, so its log-gamma and digamma
        // terms vanish and are skipped.
        double tilde_total = 1.0;
        double log_gamma_sum = 0.0;
        for (std::size_t n = 0; n < classes; ++n) {
            if (n == gt[i]) continue;
            const double a = alpha[n * voxels + i];
            tilde_total += a;
            log_gamma_sum += log_gamma(a);
        }
        double kl = log_gamma(tilde_total) - log_gamma_classes - log_gamma_sum;
        const double psi_total = digamma(tilde_total);
        for (std::size_t n = 0; n < classes; ++n) {
            if (n == gt[i]) continue;
            const double a = alpha[n * voxels + i];
            kl += (a - 1.0) * (digamma(a) - psi_total);
        }
        kl_sum += kl;
    }
    out.rce = rce_sum / static_cast<double>(voxels);
    out.kl = kl_sum / static_cast<double>(voxels);
    out.edl = out.rce + cfg.lambda_kl * out.kl;
    out.total = out.dice + cfg.lambda * out.edl;
    return out;
}

// d(total)/d(alpha), same layout as alpha.
std::vector<double> gradient_from_alpha(const std::vector<double>& alpha,
                                        const std::vector<std::uint16_t>& gt,
                                        std::size_t voxels, std::size_t classes,
                                        const LossConfig& cfg, const AlphaPre& pre) {
    const std::vector<double>& strength = pre.strength;
    const std::vector<double>& probs = pre.probs;
    const DiceSums& sums = pre.sums;
    std::vector<double> numer(classes), denom(classes);
    for (std::size_t n = 0; n < classes; ++n) {
        numer[n] = 2.0 * sums.intersection[n] + cfg.dice_epsilon;
        denom[n] = sums.predicted[n] + sums.truth[n] + cfg.dice_epsilon;
    }

    const double inv_voxels = 1.0 / static_cast<double>(voxels);
    const double inv_classes = 1.0 / static_cast<double>(classes);
    std::vector<double> grad(alpha.size());
    std::vector<double> dice_dp(classes);
    for (std::size_t i = 0; i < voxels; ++i) {
        const std::uint16_t cls = gt[i];

        // Dice with respect to this voxel's probabilities, then through
        // p_n = alpha_n / S.
        double dot = 0.0;
        for (std::size_t n = 0; n < classes; ++n) {
            const double y = (n == cls) ? 1.0 : 0.0;
            dice_dp[n] = -inv_classes * (2.0 * y * denom[n] - numer[n]) /
                         (denom[n] * denom[n]);
            dot += dice_dp[n] * probs[n * voxels + i];
        }

        const double psi1_strength = trigamma(strength[i]);

        // Off-class Dirichlet totals for the KL part.
        double tilde_total = 0.0;
        for (std::size_t n = 0; n < classes; ++n) {
            tilde_total += (n == cls) ? 1.0 : alpha[n * voxels + i];
        }
        const double kl_common =
            (tilde_total - static_cast<double>(classes)) * trigamma(tilde_total);

        for (std::size_t n = 0; n < classes; ++n) {
            const double a = alpha[n * voxels + i];
            const double dice_term = (dice_dp[n] - dot) / strength[i];
            double rce_term = psi1_strength;
            if (n == cls) rce_term -= trigamma(a);
            double kl_term = 0.0;
            if (n != cls) {
                kl_term = (a - 1.0) * trigamma(a) - kl_common;
            }
            grad[n * voxels + i] =
                dice_term +
                cfg.lambda * inv_voxels * (rce_term + cfg.lambda_kl * kl_term);
        }
    }
    return grad;
}

}  // namespace

void LossConfig::validate() const {
    if (!(lambda >= 0.0) || !(lambda_kl >= 0.0)) {
        throw ConfigError("loss weights must be >= 0");
    }
    if (!(dice_epsilon > 0.0)) {
        throw ConfigError("dice epsilon must be > 0");
    }
}

double dice_loss(const Volume& probabilities, const Volume& target,
                 const LossConfig& config) {
    config.validate();
    check_same_grid(probabilities.dims(), probabilities.channels(), target,
                    "probabilities");
    const std::vector<std::uint16_t> gt = gather_target(target);
    const std::size_t voxels = probabilities.dims().voxel_count();
    const std::size_t classes = probabilities.channels();
    std::vector<double> probs(probabilities.data().begin(), probabilities.data().end());
    return dice_from_sums(dice_sums(probs, gt, voxels, classes), classes,
                          config.dice_epsilon);
}

double rce_loss(const Volume& alpha, const Volume& target) {
    check_same_grid(alpha.dims(), alpha.channels(), target, "alpha");
    const std::vector<std::uint16_t> gt = gather_target(target);
    const std::size_t voxels = alpha.dims().voxel_count();
    double sum = 0.0;
    for (std::size_t i = 0; i < voxels; ++i) {
        double strength = 0.0;
        for (std::size_t n = 0; n < alpha.channels(); ++n) {
            const double a = alpha.data()[n * voxels + i];
            if (!(a >= 1.0)) {
                throw DomainError("alpha values must be >= 1");
            }
            strength += a;
        }
        sum += digamma(strength) -
               digamma(alpha.data()[static_cast<std::size_t>(gt[i]) * voxels + i]);
    }
    return sum / static_cast<double>(voxels);
}

double kl_loss(const Volume& alpha, const Volume& target) {
    check_same_grid(alpha.dims(), alpha.channels(), target, "alpha");
    const std::vector<std::uint16_t> gt = gather_target(target);
    const std::size_t voxels = alpha.dims().voxel_count();
    const std::size_t classes = alpha.channels();
    for (float a : alpha.data()) {
        if (!(a >= 1.0f)) {
            throw DomainError("alpha values must be >= 1");
        }
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < voxels; ++i) {
        double tilde_total = 0.0;
        double log_gamma_sum = 0.0;
        for (std::size_t n = 0; n < classes; ++n) {
            const double a =
                (n == gt[i]) ? 1.0 : static_cast<double>(alpha.data()[n * voxels + i]);
            tilde_total += a;
            log_gamma_sum += log_gamma(a);
        }
        double kl = log_gamma(tilde_total) - log_gamma(static_cast<double>(classes)) -
                    log_gamma_sum;
        const double psi_total = digamma(tilde_total);
        for (std::size_t n = 0; n < classes; ++n) {
            const double a =
                (n == gt[i]) ? 1.0 : static_cast<double>(alpha.data()[n * voxels + i]);
            kl += (a - 1.0) * (digamma(a) - psi_total);
        }
        sum += kl;
    }
    return sum / static_cast<double>(voxels);
}

LossBreakdown total_loss(const EvidenceField& evidence, const Volume& target,
                         const LossConfig& config) {
    config.validate();
    check_same_grid(evidence.dims, evidence.num_classes, target, "evidence");
    const std::vector<std::uint16_t> gt = gather_target(target);
    const std::vector<double> alpha = alpha_from_evidence_values(evidence.values);
    const std::size_t voxels = evidence.dims.voxel_count();
    const AlphaPre pre = precompute_alpha(alpha, gt, voxels, evidence.num_classes);
    return breakdown_from_alpha(alpha, gt, voxels, evidence.num_classes, config, pre);
}

ActivationField ActivationField::create(Dims dims, std::uint16_t num_classes,
                                        double fill) {
    if (dims.voxel_count() == 0 || num_classes == 0) {
        throw ShapeError("activation field needs nonzero dims and classes");
    }
    ActivationField f;
    f.dims = dims;
    f.num_classes = num_classes;
    f.z.assign(dims.voxel_count() * num_classes, fill);
    return f;
}

ActivationField ActivationField::from_values(Dims dims, std::uint16_t num_classes,
                                             std::vector<double> z) {
    if (dims.voxel_count() == 0 || num_classes == 0) {
        throw ShapeError("activation field needs nonzero dims and classes");
    }
    if (z.size() != dims.voxel_count() * num_classes) {
        throw ShapeError("activation buffer size mismatch");
    }
    for (double v : z) {
        if (!std::isfinite(v)) {
            throw DomainError("activations must be finite");
        }
    }
    ActivationField f;
    f.dims = dims;
    f.num_classes = num_classes;
    f.z = std::move(z);
    return f;
}

EvidenceField evidence_from_activations(const ActivationField& activations,
                                        std::string subnet_id) {
    std::vector<float> e(activations.z.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        e[i] = static_cast<float>(softplus(activations.z[i]));
    }
    return EvidenceField::from_values(activations.dims, activations.num_classes,
                                      std::move(e), std::move(subnet_id));
}

LossBreakdown total_loss(const ActivationField& activations, const Volume& target,
                         const LossConfig& config) {
    config.validate();
    check_same_grid(activations.dims, activations.num_classes, target, "activations");
    const std::vector<std::uint16_t> gt = gather_target(target);
    std::vector<double> alpha(activations.z.size());
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        alpha[i] = softplus(activations.z[i]) + 1.0;
    }
    const std::size_t voxels = activations.dims.voxel_count();
    const AlphaPre pre = precompute_alpha(alpha, gt, voxels, activations.num_classes);
    return breakdown_from_alpha(alpha, gt, voxels, activations.num_classes, config,
                                pre);
}

std::vector<double> loss_gradient(const ActivationField& activations,
                                  const Volume& target, const LossConfig& config,
                                  LossBreakdown* breakdown_out) {
    config.validate();
    check_same_grid(activations.dims, activations.num_classes, target, "activations");
    const std::vector<std::uint16_t> gt = gather_target(target);
    std::vector<double> alpha(activations.z.size());
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        alpha[i] = softplus(activations.z[i]) + 1.0;
    }
    const std::size_t voxels = activations.dims.voxel_count();
    const std::size_t classes = activations.num_classes;
    const AlphaPre pre = precompute_alpha(alpha, gt, voxels, classes);
    if (breakdown_out != nullptr) {
        *breakdown_out = breakdown_from_alpha(alpha, gt, voxels, classes, config, pre);
    }
    std::vector<double> grad =
        gradient_from_alpha(alpha, gt, voxels, classes, config, pre);
    for (std::size_t i = 0; i < grad.size(); ++i) {
        grad[i] *= logistic(activations.z[i]);
    }
    return grad;
}

}  // namespace evseg
