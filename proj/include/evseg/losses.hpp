#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evseg/evidential.hpp"
#include "evseg/volume.hpp"

namespace evseg {

// Weights of the combined training objective
//   total = dice + lambda * (rce + lambda_kl * kl)
// where rce is the expected cross-entropy under the Dirichlet and kl is
// the regulariser pulling misleading evidence back towards uniform.
struct LossConfig {
    double lambda = 0.7;
    double lambda_kl = 0.4;
    double dice_epsilon = 1e-6;

    void validate() const;
};

struct LossBreakdown {
    double dice = 0.0;
    double rce = 0.0;
    double kl = 0.0;
    double edl = 0.0;    // rce + lambda_kl * kl
    double total = 0.0;  // dice + lambda * edl
};

// Soft multi-class Dice loss, 1 - mean_n (2*I_n + eps) / (P_n + G_n + eps)
// with per-class sums over all voxels. `probabilities` holds predicted
// class probabilities, `target` a one-hot encoding on the same grid.
double dice_loss(const Volume& probabilities, const Volume& target,
                 const LossConfig& config = {});

// Mean over voxels of digamma(S) - digamma(alpha_gt), the Dirichlet
// expectation of the cross-entropy with the true class.
double rce_loss(const Volume& alpha, const Volume& target);

// Mean over voxels of KL(Dirichlet(alpha_tilde) || uniform Dirichlet),
// where alpha_tilde removes the true-class evidence: y + (1 - y) * alpha.
double kl_loss(const Volume& alpha, const Volume& target);

// Full objective evaluated from a subnetwork's evidence output. Dice uses
// the Dirichlet expected probabilities alpha / S.
LossBreakdown total_loss(const EvidenceField& evidence, const Volume& target,
                         const LossConfig& config = {});

// Pre-activation outputs z of a subnetwork head, kept in double so that
// finite-difference checks of the analytic gradient are meaningful.
// Evidence is softplus(z).
struct ActivationField {
    Dims dims;
    std::uint16_t num_classes = 0;
    std::vector<double> z;

    static ActivationField create(Dims dims, std::uint16_t num_classes,
                                  double fill = 0.0);
    static ActivationField from_values(Dims dims, std::uint16_t num_classes,
                                       std::vector<double> z);

    std::size_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z_,
                      std::uint32_t n) const {
        return ((static_cast<std::size_t>(n) * dims.nz + z_) * dims.ny + y) * dims.nx +
               x;
    }

    double at(std::uint32_t x, std::uint32_t y, std::uint32_t z_,
              std::uint32_t n) const {
        return z[index(x, y, z_, n)];
    }

    double& at(std::uint32_t x, std::uint32_t y, std::uint32_t z_, std::uint32_t n) {
        return z[index(x, y, z_, n)];
    }
};

EvidenceField evidence_from_activations(const ActivationField& activations,
                                        std::string subnet_id = {});

LossBreakdown total_loss(const ActivationField& activations, const Volume& target,
                         const LossConfig& config = {});

// Analytic gradient of the full objective with respect to the
// pre-activations, laid out like ActivationField::z. This is the quantity
// backpropagated into the convolution stack. When breakdown_out is given
// the loss value is reported as well, sharing one pass over the field
// with the gradient.
std::vector<double> loss_gradient(const ActivationField& activations,
                                  const Volume& target,
                                  const LossConfig& config = {},
                                  LossBreakdown* breakdown_out = nullptr);

}  // namespace evseg
