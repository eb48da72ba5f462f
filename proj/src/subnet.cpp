#include "evseg/subnet.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

#include "binary_io.hpp"
#include "evseg/activations.hpp"
#include "evseg/errors.hpp"
#include "evseg/kv.hpp"
#include "evseg/rng.hpp"

namespace evseg {
namespace {

void check_slice(const Slice& slice) {
    if (slice.nx == 0 || slice.ny == 0) {
        throw ShapeError("slice dimensions must be nonzero");
    }
    const std::size_t expected =
        static_cast<std::size_t>(slice.nx) * slice.ny;
    if (slice.values.size() != expected) {
        throw ShapeError("slice buffer holds " + std::to_string(slice.values.size()) +
                         " values, expected " + std::to_string(expected));
    }
}

// ---- 3x3 same-padding convolution, templated on the compute scalar ----
//
// All planes are row-major (y * nx + x) and stacked channel-major, the
// same layout a single z-plane of a Volume has. Each output row is built
// in a scratch buffer: the bias goes in first, then every (in channel,
// kernel row) pair adds its three taps in one fused expression, and the
// finished row is copied out. One store per output element instead of
// one read-modify-write per tap, and the summation order is fixed, so
// results are reproducible run to run.

template <typename T>
void conv3x3(const std::vector<T>& in, std::uint32_t c_in, std::uint32_t nx,
             std::uint32_t ny, const std::vector<float>& w,
             const std::vector<float>& b, std::uint32_t c_out, std::vector<T>& out) {
    const std::size_t plane = static_cast<std::size_t>(nx) * ny;
    out.resize(plane * c_out);
    std::vector<T> scratch(nx);
    T* row = scratch.data();
    for (std::uint32_t oc = 0; oc < c_out; ++oc) {
        T* o = out.data() + oc * plane;
        const T bias = static_cast<T>(b[oc]);
        for (std::uint32_t y = 0; y < ny; ++y) {
            for (std::uint32_t x = 0; x < nx; ++x) row[x] = bias;
            for (std::uint32_t ic = 0; ic < c_in; ++ic) {
                const T* src = in.data() + ic * plane;
                const float* wk =
                    w.data() + (static_cast<std::size_t>(oc) * c_in + ic) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const int dy = ky - 1;
                    if ((dy < 0 && y == 0) || (dy > 0 && y == ny - 1)) continue;
                    const T* srow = src + static_cast<std::size_t>(y + dy) * nx;
                    const T w0 = static_cast<T>(wk[ky * 3 + 0]);
                    const T w1 = static_cast<T>(wk[ky * 3 + 1]);
                    const T w2 = static_cast<T>(wk[ky * 3 + 2]);
                    for (std::uint32_t x = 1; x + 1 < nx; ++x) {
                        row[x] += w0 * srow[x - 1] + w1 * srow[x] + w2 * srow[x + 1];
                    }
                    row[0] += w1 * srow[0] + (nx > 1 ? w2 * srow[1] : T(0));
                    if (nx > 1) {
                        row[nx - 1] += w0 * srow[nx - 2] + w1 * srow[nx - 1];
                    }
                }
            }
            std::memcpy(o + static_cast<std::size_t>(y) * nx, row,
                        nx * sizeof(T));
        }
    }
}

// Propagates output deltas back through the kernel into input deltas
// (the transpose of conv3x3 for fixed weights). Written as a gather with
// the kernel flipped in both axes, using the same row-scratch pattern as
// the forward pass.
template <typename T>
void conv3x3_backward_data(const std::vector<T>& delta, std::uint32_t c_out,
                           std::uint32_t nx, std::uint32_t ny,
                           const std::vector<float>& w, std::uint32_t c_in,
                           std::vector<T>& delta_in) {
    const std::size_t plane = static_cast<std::size_t>(nx) * ny;
    delta_in.resize(plane * c_in);
    std::vector<T> scratch(nx);
    T* row = scratch.data();
    for (std::uint32_t ic = 0; ic < c_in; ++ic) {
        T* dst = delta_in.data() + ic * plane;
        for (std::uint32_t y = 0; y < ny; ++y) {
            for (std::uint32_t x = 0; x < nx; ++x) row[x] = T(0);
            for (std::uint32_t oc = 0; oc < c_out; ++oc) {
                const T* d = delta.data() + oc * plane;
                const float* wk =
                    w.data() + (static_cast<std::size_t>(oc) * c_in + ic) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const int dy = ky - 1;
                    // Gathering from delta(y - dy), so the row validity
                    // test is mirrored relative to the forward pass.
                    if ((dy > 0 && y < static_cast<std::uint32_t>(dy)) ||
                        (dy < 0 && y + 1 == ny)) {
                        continue;
                    }
                    const T* srow = d + static_cast<std::size_t>(y - dy) * nx;
                    // Flipped taps: weight (ky, kx) connects input (y, x)
                    // to output (y + ky - 1, x + kx - 1).
                    const T w0 = static_cast<T>(wk[ky * 3 + 2]);
                    const T w1 = static_cast<T>(wk[ky * 3 + 1]);
                    const T w2 = static_cast<T>(wk[ky * 3 + 0]);
                    for (std::uint32_t x = 1; x + 1 < nx; ++x) {
                        row[x] += w0 * srow[x - 1] + w1 * srow[x] + w2 * srow[x + 1];
                    }
                    row[0] += w1 * srow[0] + (nx > 1 ? w2 * srow[1] : T(0));
                    if (nx > 1) {
                        row[nx - 1] += w0 * srow[nx - 2] + w1 * srow[nx - 1];
                    }
                }
            }
            std::memcpy(dst + static_cast<std::size_t>(y) * nx, row,
                        nx * sizeof(T));
        }
    }
}

// Sum with a fixed-width bank of partial sums. The banked form
// vectorizes where a strictly serial sum cannot, and because the lane
// count and combine order are constants the result is still the same on
// every run.
template <typename T>
T sum_lanes(const T* a, std::size_t n) {
    constexpr std::size_t kLanes = 16;
    T lane[kLanes] = {};
    std::size_t x = 0;
    for (; x + kLanes <= n; x += kLanes) {
        for (std::size_t j = 0; j < kLanes; ++j) lane[j] += a[x + j];
    }
    T sum = T(0);
    for (std::size_t j = 0; j < kLanes; ++j) sum += lane[j];
    for (; x < n; ++x) sum += a[x];
    return sum;
}

// Accumulates weight and bias gradients for one layer into double
// buffers: gw[((oc*c_in+ic)*3+ky)*3+kx] and gb[oc]. Per (out, in)
// channel pair and kernel tap, the whole-plane dot of delta against the
// shifted input is taken with a bank of partial sums that persists
// across rows, so the bank is combined once per tap. Lane count and
// combine order are fixed, keeping the result identical run to run.
template <typename T>
void conv3x3_accumulate_grads(const std::vector<T>& delta, std::uint32_t c_out,
                              const std::vector<T>& a_in, std::uint32_t c_in,
                              std::uint32_t nx, std::uint32_t ny,
                              std::vector<double>& gw, std::vector<double>& gb) {
    constexpr std::uint32_t kLanes = 16;
    const std::size_t plane = static_cast<std::size_t>(nx) * ny;
    for (std::uint32_t oc = 0; oc < c_out; ++oc) {
        const T* d = delta.data() + oc * plane;
        gb[oc] += static_cast<double>(sum_lanes(d, plane));
        for (std::uint32_t ic = 0; ic < c_in; ++ic) {
            const T* a = a_in.data() + ic * plane;
            double* gwk = gw.data() + (static_cast<std::size_t>(oc) * c_in + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                const int dy = ky - 1;
                const std::uint32_t y0 = dy < 0 ? 1u : 0u;
                const std::uint32_t y1 = dy > 0 ? ny - 1 : ny;
                for (int kx = 0; kx < 3; ++kx) {
                    const int dx = kx - 1;
                    const std::uint32_t x0 = dx < 0 ? 1u : 0u;
                    const std::uint32_t x1 = dx > 0 ? nx - 1 : nx;
                    const std::uint32_t n = x1 - x0;
                    T lane[kLanes] = {};
                    T tail = T(0);
                    for (std::uint32_t y = y0; y < y1; ++y) {
                        const T* drow = d + static_cast<std::size_t>(y) * nx + x0;
                        const T* arow =
                            a + static_cast<std::size_t>(y + dy) * nx + x0 + dx;
                        std::uint32_t x = 0;
                        for (; x + kLanes <= n; x += kLanes) {
                            for (std::uint32_t j = 0; j < kLanes; ++j) {
                                lane[j] += drow[x + j] * arow[x + j];
                            }
                        }
                        for (; x < n; ++x) tail += drow[x] * arow[x];
                    }
                    T sum = T(0);
                    for (std::uint32_t j = 0; j < kLanes; ++j) sum += lane[j];
                    gwk[ky * 3 + kx] += static_cast<double>(sum + tail);
                }
            }
        }
    }
}

// Pre-activations of every layer for one slice; activations are
// recomputed from these where needed (ReLU is cheap).
template <typename T>
struct Trace {
    std::vector<std::vector<T>> pre;
};

template <typename T>
std::vector<T> promote(const std::vector<float>& values) {
    return std::vector<T>(values.begin(), values.end());
}

template <typename T>
Trace<T> run_forward(const SubnetParams& params, const Slice& slice) {
    check_slice(slice);
    const std::vector<std::uint32_t> ch = params.config.layer_channels();
    Trace<T> trace;
    trace.pre.resize(ch.size() - 1);
    std::vector<T> in = promote<T>(slice.values);
    for (std::size_t layer = 0; layer + 1 < ch.size(); ++layer) {
        conv3x3(in, ch[layer], slice.nx, slice.ny, params.weights[layer],
                params.biases[layer], ch[layer + 1], trace.pre[layer]);
        if (layer + 2 < ch.size()) {
            in.resize(trace.pre[layer].size());
            for (std::size_t i = 0; i < in.size(); ++i) {
                in[i] = relu(trace.pre[layer][i]);
            }
        }
    }
    return trace;
}

template <typename T>
std::vector<LayerGrads> run_backward(const SubnetParams& params, const Slice& slice,
                                     const Volume& target,
                                     const LossConfig& loss_config,
                                     LossBreakdown* loss_out) {
    const std::vector<std::uint32_t> ch = params.config.layer_channels();
    const std::size_t layers = ch.size() - 1;
    const Trace<T> trace = run_forward<T>(params, slice);

    const Dims slice_dims{slice.nx, slice.ny, 1};
    const std::vector<T>& head = trace.pre[layers - 1];
    ActivationField acts = ActivationField::from_values(
        slice_dims, params.config.num_classes,
        std::vector<double>(head.begin(), head.end()));
    const std::vector<double> head_grad =
        loss_gradient(acts, target, loss_config, loss_out);

    std::vector<LayerGrads> grads(layers);
    for (std::size_t layer = 0; layer < layers; ++layer) {
        grads[layer].weights.assign(params.weights[layer].size(), 0.0);
        grads[layer].biases.assign(params.biases[layer].size(), 0.0);
    }

    std::vector<T> delta(head_grad.begin(), head_grad.end());
    std::vector<T> scratch;
    for (std::size_t layer = layers; layer-- > 0;) {
        // Activations feeding this layer.
        std::vector<T> a_in;
        if (layer == 0) {
            a_in = promote<T>(slice.values);
        } else {
            const std::vector<T>& pre = trace.pre[layer - 1];
            a_in.resize(pre.size());
            for (std::size_t i = 0; i < pre.size(); ++i) a_in[i] = relu(pre[i]);
        }
        conv3x3_accumulate_grads(delta, ch[layer + 1], a_in, ch[layer], slice.nx,
                                 slice.ny, grads[layer].weights, grads[layer].biases);
        if (layer > 0) {
            conv3x3_backward_data(delta, ch[layer + 1], slice.nx, slice.ny,
                                  params.weights[layer], ch[layer], scratch);
            const std::vector<T>& pre = trace.pre[layer - 1];
            for (std::size_t i = 0; i < scratch.size(); ++i) {
                scratch[i] *= relu_grad(pre[i]);
            }
            delta.swap(scratch);
        }
    }
    return grads;
}

// One-hot target for plane z of a label map, on the slice grid.
Volume slice_target(const LabelMap& labels, std::uint32_t z) {
    const Dims& d = labels.dims();
    Volume target({d.nx, d.ny, 1}, labels.num_classes(), 0.0f, labels.voxel_size());
    const std::size_t plane = static_cast<std::size_t>(d.nx) * d.ny;
    for (std::uint32_t y = 0; y < d.ny; ++y) {
        for (std::uint32_t x = 0; x < d.nx; ++x) {
            const std::uint16_t cls = labels.at(x, y, z);
            target.data()[static_cast<std::size_t>(cls) * plane + y * d.nx + x] = 1.0f;
        }
    }
    return target;
}

void accumulate(LossBreakdown& sum, const LossBreakdown& item) {
    sum.dice += item.dice;
    sum.rce += item.rce;
    sum.kl += item.kl;
    sum.edl += item.edl;
    sum.total += item.total;
}

LossBreakdown scale(const LossBreakdown& sum, double factor) {
    LossBreakdown out;
    out.dice = sum.dice * factor;
    out.rce = sum.rce * factor;
    out.kl = sum.kl * factor;
    out.edl = sum.edl * factor;
    out.total = sum.total * factor;
    return out;
}

}  // namespace

Slice slice_of(const Volume& volume, std::uint32_t channel, std::uint32_t z) {
    if (channel >= volume.channels() || z >= volume.dims().nz) {
        throw ShapeError("slice (channel " + std::to_string(channel) + ", z " +
                         std::to_string(z) + ") out of range for " +
                         to_string(volume.dims()) + " x" +
                         std::to_string(volume.channels()));
    }
    const Dims& d = volume.dims();
    const std::size_t plane = static_cast<std::size_t>(d.nx) * d.ny;
    Slice s;
    s.nx = d.nx;
    s.ny = d.ny;
    const float* src =
        volume.data().data() + (static_cast<std::size_t>(channel) * d.nz + z) * plane;
    s.values.assign(src, src + plane);
    return s;
}

void SubnetConfig::validate() const {
    if (num_classes < 2) {
        throw ConfigError("a subnetwork needs at least two classes");
    }
    for (std::uint32_t h : hidden_channels) {
        if (h == 0 || h > 1024) {
            throw ConfigError("hidden channel count " + std::to_string(h) +
                              " out of range [1, 1024]");
        }
    }
}

std::vector<std::uint32_t> SubnetConfig::layer_channels() const {
    std::vector<std::uint32_t> ch;
    ch.reserve(hidden_channels.size() + 2);
    ch.push_back(1);  // each subnetwork reads exactly one input channel
    ch.insert(ch.end(), hidden_channels.begin(), hidden_channels.end());
    ch.push_back(num_classes);
    return ch;
}

SubnetParams SubnetParams::init(const SubnetConfig& config,
                                std::vector<std::string> label_names) {
    config.validate();
    if (!label_names.empty() && label_names.size() != config.num_classes) {
        throw ShapeError("label name table has " + std::to_string(label_names.size()) +
                         " entries for " + std::to_string(config.num_classes) +
                         " classes");
    }
    SubnetParams p;
    p.config = config;
    p.label_names = std::move(label_names);
    const std::vector<std::uint32_t> ch = config.layer_channels();
    const std::size_t layers = ch.size() - 1;
    p.weights.resize(layers);
    p.biases.resize(layers);
    // Weight draw order is a determinism contract: one stream seeded with
    // config.seed, layers in order, each layer's weights in storage order.
    Rng rng(config.seed);
    for (std::size_t layer = 0; layer < layers; ++layer) {
        const std::size_t fan_in = static_cast<std::size_t>(ch[layer]) * 9;
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        p.weights[layer].resize(static_cast<std::size_t>(ch[layer + 1]) * fan_in);
        for (float& w : p.weights[layer]) {
            w = static_cast<float>(rng.uniform(-limit, limit));
        }
        p.biases[layer].assign(ch[layer + 1], 0.0f);
    }
    return p;
}

std::size_t SubnetParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += w.size();
    for (const auto& b : biases) n += b.size();
    return n;
}

EvidenceField forward(const SubnetParams& params, const Slice& slice) {
    const Trace<float> trace = run_forward<float>(params, slice);
    const std::vector<float>& head = trace.pre.back();
    std::vector<float> evidence(head.size());
    for (std::size_t i = 0; i < head.size(); ++i) {
        evidence[i] = softplus(head[i]);
    }
    return EvidenceField::from_values({slice.nx, slice.ny, 1},
                                      params.config.num_classes, std::move(evidence),
                                      params.config.subnet_id);
}

ActivationField forward_activations(const SubnetParams& params, const Slice& slice) {
    const Trace<double> trace = run_forward<double>(params, slice);
    return ActivationField::from_values({slice.nx, slice.ny, 1},
                                        params.config.num_classes, trace.pre.back());
}

std::vector<LayerGrads> backward(const SubnetParams& params, const Slice& slice,
                                 const Volume& target, const LossConfig& loss_config,
                                 LossBreakdown* loss_out) {
    return run_backward<float>(params, slice, target, loss_config, loss_out);
}

std::vector<LayerGrads> backward_f64(const SubnetParams& params, const Slice& slice,
                                     const Volume& target,
                                     const LossConfig& loss_config,
                                     LossBreakdown* loss_out) {
    return run_backward<double>(params, slice, target, loss_config, loss_out);
}

AdamState AdamState::init(const SubnetParams& params) {
    AdamState s;
    const std::size_t layers = params.weights.size();
    s.weight_m.resize(layers);
    s.weight_v.resize(layers);
    s.bias_m.resize(layers);
    s.bias_v.resize(layers);
    for (std::size_t layer = 0; layer < layers; ++layer) {
        s.weight_m[layer].assign(params.weights[layer].size(), 0.0);
        s.weight_v[layer].assign(params.weights[layer].size(), 0.0);
        s.bias_m[layer].assign(params.biases[layer].size(), 0.0);
        s.bias_v[layer].assign(params.biases[layer].size(), 0.0);
    }
    return s;
}

void adam_step(SubnetParams& params, const std::vector<LayerGrads>& grads,
               AdamState& state, double learning_rate, const AdamConfig& config) {
    const std::size_t layers = params.weights.size();
    if (grads.size() != layers || state.weight_m.size() != layers) {
        throw ShapeError("optimizer buffers do not match the parameter layout");
    }
    state.step += 1;
    const double bc1 =
        1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 =
        1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    auto update = [&](std::vector<float>& values, const std::vector<double>& g,
                      std::vector<double>& m, std::vector<double>& v) {
        if (g.size() != values.size() || m.size() != values.size()) {
            throw ShapeError("gradient buffer does not match the parameter layout");
        }
        for (std::size_t i = 0; i < values.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            const double step =
                learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
            values[i] = static_cast<float>(static_cast<double>(values[i]) - step);
        }
    };
    for (std::size_t layer = 0; layer < layers; ++layer) {
        update(params.weights[layer], grads[layer].weights, state.weight_m[layer],
               state.weight_v[layer]);
        update(params.biases[layer], grads[layer].biases, state.bias_m[layer],
               state.bias_v[layer]);
    }
}

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch size must be >= 1");
    if (!(initial_lr > 0.0)) throw ConfigError("initial learning rate must be > 0");
    if (!(lr_decay_factor > 0.0) || lr_decay_factor > 1.0) {
        throw ConfigError("learning rate decay factor must be in (0, 1]");
    }
    if (decay_every_epochs == 0) {
        throw ConfigError("decay interval must be >= 1 epoch");
    }
    for (std::uint32_t h : hidden_channels) {
        if (h == 0 || h > 1024) {
            throw ConfigError("hidden channel count " + std::to_string(h) +
                              " out of range [1, 1024]");
        }
    }
    if (!(adam.beta1 >= 0.0) || adam.beta1 >= 1.0 || !(adam.beta2 >= 0.0) ||
        adam.beta2 >= 1.0) {
        throw ConfigError("Adam beta parameters must be in [0, 1)");
    }
    if (!(adam.epsilon > 0.0)) throw ConfigError("Adam epsilon must be > 0");
    loss.validate();
}

double lr_at_epoch(const TrainConfig& config, std::uint32_t epoch) {
    // Repeated multiplication instead of std::pow keeps the schedule
    // bit-identical across standard libraries.
    const std::uint32_t steps = epoch / config.decay_every_epochs;
    double lr = config.initial_lr;
    for (std::uint32_t i = 0; i < steps; ++i) lr *= config.lr_decay_factor;
    return lr;
}

void save_training_record(const TrainingRecord& record,
                          const std::filesystem::path& path) {
    KvFile kv;
    kv.set("subnet_id", record.subnet_id);
    kv.set_u64("channel_index", record.channel_index);
    kv.set_u64("epoch_count", record.epochs.size());
    for (const EpochRecord& e : record.epochs) {
        const std::string prefix = "epoch." + std::to_string(e.epoch) + ".";
        kv.set_double(prefix + "learning_rate", e.learning_rate);
        kv.set_double(prefix + "train.dice", e.train.dice);
        kv.set_double(prefix + "train.rce", e.train.rce);
        kv.set_double(prefix + "train.kl", e.train.kl);
        kv.set_double(prefix + "train.total", e.train.total);
        if (e.has_val) {
            kv.set_double(prefix + "val.dice", e.val.dice);
            kv.set_double(prefix + "val.rce", e.val.rce);
            kv.set_double(prefix + "val.kl", e.val.kl);
            kv.set_double(prefix + "val.total", e.val.total);
        }
    }
    // Wall-clock timings stay out of the file on purpose: repeated runs
    // with the same seed must produce byte-identical artifacts.
    kv.save(path);
}

std::pair<SubnetParams, TrainingRecord> train_subnet(
    const std::vector<SampleRef>& train_set, const std::vector<SampleRef>& val_set,
    std::uint32_t channel_index, std::string subnet_id, const TrainConfig& config) {
    config.validate();
    if (train_set.empty()) {
        throw ConfigError("training needs at least one sample");
    }
    const std::uint16_t num_classes = train_set.front().labels.num_classes();
    auto check_sample = [&](const SampleRef& s) {
        if (channel_index >= s.channels.channels()) {
            throw ShapeError("channel " + std::to_string(channel_index) +
                             " out of range for a sample with " +
                             std::to_string(s.channels.channels()) + " channels");
        }
        if (!(s.channels.dims() == s.labels.dims())) {
            throw ShapeError("sample volume and labels have different grids");
        }
        if (s.labels.num_classes() != num_classes) {
            throw ShapeError("samples disagree on the number of classes");
        }
    };
    for (const SampleRef& s : train_set) check_sample(s);
    for (const SampleRef& s : val_set) check_sample(s);

    const auto t_start = std::chrono::steady_clock::now();

    // Seed layout: one root per (config seed, channel); stream 1 feeds the
    // weight init, streams 0x10000 + epoch feed the per-epoch shuffles.
    const std::uint64_t root = Rng::mix(config.seed, channel_index);

    SubnetConfig net_config;
    net_config.num_classes = num_classes;
    net_config.hidden_channels = config.hidden_channels;
    net_config.channel_index = channel_index;
    net_config.subnet_id = subnet_id;
    net_config.seed = Rng::mix(root, 1);
    SubnetParams params =
        SubnetParams::init(net_config, train_set.front().labels.names());

    // Slice pool, round-robin across volumes, plus per-slice inputs and
    // one-hot targets extracted once.
    std::vector<Slice> slices;
    std::vector<Volume> targets;
    std::uint32_t max_nz = 0;
    for (const SampleRef& s : train_set) {
        max_nz = std::max(max_nz, s.channels.dims().nz);
    }
    for (std::uint32_t z = 0; z < max_nz; ++z) {
        for (const SampleRef& s : train_set) {
            if (z >= s.channels.dims().nz) continue;
            slices.push_back(slice_of(s.channels, channel_index, z));
            targets.push_back(slice_target(s.labels, z));
        }
    }

    AdamState adam = AdamState::init(params);
    TrainingRecord record;
    record.subnet_id = std::move(subnet_id);
    record.channel_index = channel_index;
    record.epochs.reserve(config.epochs);

    std::vector<std::size_t> order(slices.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<LayerGrads> batch_grads(params.weights.size());

    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t_epoch = std::chrono::steady_clock::now();
        const double lr = lr_at_epoch(config, epoch);
        Rng shuffle_rng(Rng::mix(root, 0x10000 + epoch));
        shuffle_rng.shuffle(order);

        LossBreakdown train_sum;
        for (std::size_t begin = 0; begin < order.size();
             begin += config.batch_size) {
            const std::size_t end =
                std::min(begin + config.batch_size, order.size());
            for (std::size_t layer = 0; layer < params.weights.size(); ++layer) {
                batch_grads[layer].weights.assign(params.weights[layer].size(), 0.0);
                batch_grads[layer].biases.assign(params.biases[layer].size(), 0.0);
            }
            for (std::size_t b = begin; b < end; ++b) {
                const std::size_t idx = order[b];
                LossBreakdown slice_loss;
                const std::vector<LayerGrads> g = backward(
                    params, slices[idx], targets[idx], config.loss, &slice_loss);
                accumulate(train_sum, slice_loss);
                for (std::size_t layer = 0; layer < g.size(); ++layer) {
                    for (std::size_t i = 0; i < g[layer].weights.size(); ++i) {
                        batch_grads[layer].weights[i] += g[layer].weights[i];
                    }
                    for (std::size_t i = 0; i < g[layer].biases.size(); ++i) {
                        batch_grads[layer].biases[i] += g[layer].biases[i];
                    }
                }
            }
            const double inv = 1.0 / static_cast<double>(end - begin);
            for (auto& layer : batch_grads) {
                for (double& v : layer.weights) v *= inv;
                for (double& v : layer.biases) v *= inv;
            }
            adam_step(params, batch_grads, adam, lr, config.adam);
        }

        EpochRecord er;
        er.epoch = epoch;
        er.learning_rate = lr;
        er.train = scale(train_sum, 1.0 / static_cast<double>(slices.size()));
        if (!val_set.empty()) {
            LossBreakdown val_sum;
            std::size_t val_slices = 0;
            for (const SampleRef& s : val_set) {
                for (std::uint32_t z = 0; z < s.channels.dims().nz; ++z) {
                    const EvidenceField ev =
                        forward(params, slice_of(s.channels, channel_index, z));
                    accumulate(val_sum,
                               total_loss(ev, slice_target(s.labels, z), config.loss));
                    ++val_slices;
                }
            }
            er.val = scale(val_sum, 1.0 / static_cast<double>(val_slices));
            er.has_val = true;
        }
        er.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch)
                .count();
        record.epochs.push_back(er);
    }
    record.total_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
            .count();
    return {std::move(params), std::move(record)};
}

SubnetPrediction predict_subnet(const SubnetParams& params, const Volume& channels) {
    const std::uint32_t channel = params.config.channel_index;
    if (channel >= channels.channels()) {
        throw ShapeError("checkpoint reads channel " + std::to_string(channel) +
                         " but the volume has " + std::to_string(channels.channels()));
    }
    const Dims& d = channels.dims();
    const std::uint16_t n_classes = params.config.num_classes;
    const std::size_t plane = static_cast<std::size_t>(d.nx) * d.ny;
    const std::size_t voxels = d.voxel_count();

    EvidenceField evidence =
        EvidenceField::create(d, n_classes, params.config.subnet_id);
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        const EvidenceField ev = forward(params, slice_of(channels, channel, z));
        for (std::uint32_t n = 0; n < n_classes; ++n) {
            std::memcpy(evidence.values.data() + (n * d.nz + z) * plane,
                        ev.values.data() + n * plane, plane * sizeof(float));
        }
    }

    Volume uncertainty(d, 1, 0.0f, channels.voxel_size());
    for (std::size_t i = 0; i < voxels; ++i) {
        double strength = 0.0;
        for (std::uint32_t n = 0; n < n_classes; ++n) {
            strength += static_cast<double>(evidence.values[n * voxels + i]) + 1.0;
        }
        uncertainty.data()[i] =
            static_cast<float>(static_cast<double>(n_classes) / strength);
    }

    // argmax over evidence equals argmax over expected probabilities:
    // alpha = e + 1 shares the per-voxel denominator S.
    SubnetPrediction out;
    out.evidence = std::move(evidence);
    out.labels = argmax_labels(out.evidence.to_volume(channels.voxel_size()),
                               params.label_names);
    out.uncertainty = std::move(uncertainty);
    return out;
}

void save_checkpoint(const SubnetParams& params, const std::filesystem::path& path) {
    detail::Writer w(path);
    w.bytes("EPRM", 4);
    w.u16(1);
    w.u16(params.config.num_classes);
    w.u32(params.config.channel_index);
    w.u32(static_cast<std::uint32_t>(params.config.hidden_channels.size()));
    for (std::uint32_t h : params.config.hidden_channels) w.u32(h);
    w.u64(params.config.seed);
    w.str(params.config.subnet_id);
    w.u32(static_cast<std::uint32_t>(params.label_names.size()));
    for (const std::string& name : params.label_names) w.str(name);
    for (std::size_t layer = 0; layer < params.weights.size(); ++layer) {
        w.array(params.weights[layer]);
        w.array(params.biases[layer]);
    }
    w.finish();
}

SubnetParams load_checkpoint(const std::filesystem::path& path) {
    detail::Reader r(path);
    r.expect_magic("EPRM");
    r.expect_version(1);
    SubnetConfig config;
    config.num_classes = r.u16();
    config.channel_index = r.u32();
    const std::uint32_t hidden_count = r.u32();
    if (hidden_count > 64) {
        throw FormatError(FormatError::Fault::Malformed,
                          "implausible layer count " + std::to_string(hidden_count) +
                              " in " + path.string());
    }
    config.hidden_channels.resize(hidden_count);
    for (std::uint32_t& h : config.hidden_channels) h = r.u32();
    config.seed = r.u64();
    config.subnet_id = r.str();
    try {
        config.validate();
    } catch (const ConfigError& e) {
        throw FormatError(FormatError::Fault::Malformed,
                          std::string(e.what()) + " in " + path.string());
    }
    const std::uint32_t name_count = r.u32();
    if (name_count != 0 && name_count != config.num_classes) {
        throw FormatError(FormatError::Fault::Malformed,
                          "name table has " + std::to_string(name_count) +
                              " entries for " + std::to_string(config.num_classes) +
                              " classes in " + path.string());
    }
    std::vector<std::string> names(name_count);
    for (std::string& name : names) name = r.str();

    SubnetParams params;
    params.config = config;
    params.label_names = std::move(names);
    const std::vector<std::uint32_t> ch = config.layer_channels();
    const std::size_t layers = ch.size() - 1;
    params.weights.resize(layers);
    params.biases.resize(layers);
    for (std::size_t layer = 0; layer < layers; ++layer) {
        const std::size_t w_count =
            static_cast<std::size_t>(ch[layer + 1]) * ch[layer] * 9;
        params.weights[layer] = r.array<float>(w_count);
        params.biases[layer] = r.array<float>(ch[layer + 1]);
    }
    r.expect_end();
    for (std::size_t layer = 0; layer < layers; ++layer) {
        for (float v : params.weights[layer]) {
            if (!std::isfinite(v)) {
                throw FormatError(FormatError::Fault::NonFinite,
                                  "non-finite weight in " + path.string());
            }
        }
        for (float v : params.biases[layer]) {
            if (!std::isfinite(v)) {
                throw FormatError(FormatError::Fault::NonFinite,
                                  "non-finite bias in " + path.string());
            }
        }
    }
    return params;
}

}  // namespace evseg
