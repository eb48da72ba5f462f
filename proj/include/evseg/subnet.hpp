#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "evseg/evidential.hpp"
#include "evseg/losses.hpp"
#include "evseg/volume.hpp"

namespace evseg {

// One axial 2-D image, the unit the subnetworks operate on. Values are
// row-major (y * nx + x), matching a single channel-z plane of a Volume.
struct Slice {
    std::uint32_t nx = 0;
    std::uint32_t ny = 0;
    std::vector<float> values;
};

// Copies channel c, plane z out of a volume.
Slice slice_of(const Volume& volume, std::uint32_t channel, std::uint32_t z);

// Architecture of one subnetwork: a stack of 3x3 same-padding
// convolutions with ReLU between them. The final convolution maps to one
// pre-activation per class; softplus of that is the evidence output.
struct SubnetConfig {
    std::uint16_t num_classes = 2;
    std::vector<std::uint32_t> hidden_channels = {16, 16};
    std::uint32_t channel_index = 0;  // which input channel this subnet reads
    std::string subnet_id;            // e.g. "fa"; provenance only
    std::uint64_t seed = 0;

    void validate() const;

    // Channel counts per layer boundary: {1, hidden..., num_classes}.
    std::vector<std::uint32_t> layer_channels() const;
};

// Weights live in float32; the layout of layer L is
// weights[L][((oc * in + ic) * 3 + ky) * 3 + kx], biases[L][oc].
struct SubnetParams {
    SubnetConfig config;
    std::vector<std::string> label_names;
    std::vector<std::vector<float>> weights;
    std::vector<std::vector<float>> biases;

    // He-uniform weight init (limit sqrt(6 / fan_in)) drawn from the
    // config seed; zero biases.
    static SubnetParams init(const SubnetConfig& config,
                             std::vector<std::string> label_names = {});

    std::size_t parameter_count() const;
};

// Evidence for one slice; float arithmetic, the production path.
EvidenceField forward(const SubnetParams& params, const Slice& slice);

// Same network evaluated in double, returning raw pre-activations. Only
// worth the cost when feeding finite-difference comparisons.
ActivationField forward_activations(const SubnetParams& params, const Slice& slice);

struct LayerGrads {
    std::vector<double> weights;
    std::vector<double> biases;
};

// Full backpropagation of the training objective for one slice. The
// convolution arithmetic runs in float like forward(); gradient
// accumulation happens in double. Optionally reports the slice loss.
std::vector<LayerGrads> backward(const SubnetParams& params, const Slice& slice,
                                 const Volume& target, const LossConfig& loss_config,
                                 LossBreakdown* loss_out = nullptr);

// Double-precision twin of backward() for gradient verification.
std::vector<LayerGrads> backward_f64(const SubnetParams& params, const Slice& slice,
                                     const Volume& target,
                                     const LossConfig& loss_config,
                                     LossBreakdown* loss_out = nullptr);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::uint64_t step = 0;
    std::vector<std::vector<double>> weight_m, weight_v;
    std::vector<std::vector<double>> bias_m, bias_v;

    static AdamState init(const SubnetParams& params);
};

// One bias-corrected Adam update, in place. Moments are kept in double;
// the refreshed parameters are rounded back to their float32 storage.
void adam_step(SubnetParams& params, const std::vector<LayerGrads>& grads,
               AdamState& state, double learning_rate,
               const AdamConfig& config = {});

struct TrainConfig {
    std::uint32_t epochs = 60;  // desk-scale default; longer runs just work
    std::uint32_t batch_size = 8;
    double initial_lr = 0.01;
    double lr_decay_factor = 0.95;
    std::uint32_t decay_every_epochs = 5;
    std::vector<std::uint32_t> hidden_channels = {16, 16};
    LossConfig loss;
    AdamConfig adam;
    std::uint64_t seed = 0;

    void validate() const;
};

// Step schedule: initial_lr * lr_decay_factor^(epoch / decay_every_epochs)
// with integer division and zero-based epochs.
double lr_at_epoch(const TrainConfig& config, std::uint32_t epoch);

struct EpochRecord {
    std::uint32_t epoch = 0;  // zero-based
    double learning_rate = 0.0;
    LossBreakdown train;
    LossBreakdown val;
    bool has_val = false;
    double seconds = 0.0;  // wall clock, in-memory only
};

struct TrainingRecord {
    std::string subnet_id;
    std::uint32_t channel_index = 0;
    std::vector<EpochRecord> epochs;
    double total_seconds = 0.0;  // wall clock, in-memory only
};

// Written as a key-value report. Deliberately contains no wall-clock
// values so that identical runs produce identical files.
void save_training_record(const TrainingRecord& record,
                          const std::filesystem::path& path);

// A non-owning (volume, labels) pair; both must outlive the call.
struct SampleRef {
    const Volume& channels;
    const LabelMap& labels;
};

// Trains one subnetwork on the given channel of the training samples,
// slice-wise with shuffled mini-batches. Single-threaded and fully
// deterministic in the config seed. Validation samples only contribute
// the per-epoch loss curve.
std::pair<SubnetParams, TrainingRecord> train_subnet(
    const std::vector<SampleRef>& train_set, const std::vector<SampleRef>& val_set,
    std::uint32_t channel_index, std::string subnet_id, const TrainConfig& config);

struct SubnetPrediction {
    EvidenceField evidence;
    LabelMap labels;       // argmax of the per-class evidence
    Volume uncertainty;    // single channel, N / S per voxel
};

SubnetPrediction predict_subnet(const SubnetParams& params, const Volume& channels);

// Checkpoint file ("EPRM" v1, little-endian): the full config, the label
// names and the raw float32 parameters. Round-trips bit-exactly.
void save_checkpoint(const SubnetParams& params, const std::filesystem::path& path);
SubnetParams load_checkpoint(const std::filesystem::path& path);

}  // namespace evseg
