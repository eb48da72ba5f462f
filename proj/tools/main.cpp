// Command line front end for the segmentation pipeline. Each subcommand
// wraps one stage: phantom dataset generation, per-channel subnetwork
// training, prediction, ensemble fusion, evaluation, out-of-distribution
// analysis and image rendering. The e2e subcommand chains them all and
// leaves a manifest from which the whole run can be repeated bit for bit.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <system_error>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "evseg/ensemble.hpp"
#include "evseg/errors.hpp"
#include "evseg/eval.hpp"
#include "evseg/evidential.hpp"
#include "evseg/kv.hpp"
#include "evseg/phantom.hpp"
#include "evseg/subnet.hpp"
#include "evseg/volume.hpp"

namespace fs = std::filesystem;
using namespace evseg;

namespace {

constexpr const char* kVersion = "0.1.0";

// The five derived parameter maps, in their fixed channel order.
const std::array<std::string, kParamChannels> kChannelNames = {"fa", "md", "e1",
                                                               "e2", "e3"};

std::uint32_t channel_index_of(const std::string& name) {
    for (std::uint32_t i = 0; i < kChannelNames.size(); ++i) {
        if (kChannelNames[i] == name) return i;
    }
    throw ConfigError("unknown channel '" + name + "'");
}

void ensure_dir(const fs::path& dir) {
    if (dir.empty()) return;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create directory " + dir.string() + ": " +
                      ec.message());
    }
}

std::string zero_pad(std::size_t value, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%0*zu", width, value);
    return buf;
}

std::string sample_stem(std::size_t i) { return "sample_" + zero_pad(i, 3); }
std::string test_stem(std::size_t i) { return "test_" + zero_pad(i, 3); }

// Masks travel as two-class label maps so the existing volume file
// formats cover them; any nonzero label counts as inside.
LabelMap mask_to_labelmap(const Mask& mask, VoxelSize voxel_size) {
    const Dims& d = mask.dims();
    std::vector<std::uint16_t> labels(d.voxel_count(), 0);
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        for (std::uint32_t y = 0; y < d.ny; ++y) {
            for (std::uint32_t x = 0; x < d.nx; ++x) {
                labels[mask.index(x, y, z)] = mask.at(x, y, z) ? 1 : 0;
            }
        }
    }
    return LabelMap::from_data(d, 2, std::move(labels), {"outside", "inside"},
                               voxel_size);
}

Mask mask_from_labelmap(const LabelMap& lm) {
    Mask mask(lm.dims());
    const Dims& d = lm.dims();
    for (std::uint32_t z = 0; z < d.nz; ++z) {
        for (std::uint32_t y = 0; y < d.ny; ++y) {
            for (std::uint32_t x = 0; x < d.nx; ++x) {
                if (lm.at(x, y, z) != 0) mask.set(x, y, z, true);
            }
        }
    }
    return mask;
}

std::string join_doubles(std::initializer_list<double> values) {
    std::string out;
    for (double v : values) {
        if (!out.empty()) out += ' ';
        out += format_double(v);
    }
    return out;
}

std::string shape_to_text(const Shape& s) {
    switch (s.kind) {
        case Shape::Kind::Everywhere:
            return "everywhere";
        case Shape::Kind::Sphere:
            return "sphere " + join_doubles({s.center[0], s.center[1],
                                             s.center[2], s.radius});
        case Shape::Kind::Box:
            return "box " + join_doubles({s.lo[0], s.lo[1], s.lo[2], s.hi[0],
                                          s.hi[1], s.hi[2]});
        case Shape::Kind::Shell:
            return "shell " + join_doubles({s.center[0], s.center[1],
                                            s.center[2], s.inner_radius,
                                            s.outer_radius});
    }
    throw ConfigError("unhandled shape kind");
}

// One sample's generation recipe: the jittered spec plus the noise seed.
// Written for reproducibility records; the pipeline itself keeps the
// in-memory copy.
KvFile sample_meta(const DatasetSample& sample) {
    KvFile kv;
    const PhantomSpec& spec = sample.spec;
    kv.set("dims", std::to_string(spec.dims.nx) + " " +
                       std::to_string(spec.dims.ny) + " " +
                       std::to_string(spec.dims.nz));
    kv.set("voxel_size", join_doubles({spec.voxel_size.sx, spec.voxel_size.sy,
                                       spec.voxel_size.sz}));
    for (std::size_t i = 0; i < spec.regions.size(); ++i) {
        const RegionSpec& r = spec.regions[i];
        const std::string p = "region." + std::to_string(i);
        kv.set(p + ".name", r.name);
        kv.set(p + ".shape", shape_to_text(r.shape));
        kv.set(p + ".tensor",
               join_doubles({r.tensor[0], r.tensor[1], r.tensor[2], r.tensor[3],
                             r.tensor[4], r.tensor[5]}));
        kv.set_double(p + ".s0", r.s0);
    }
    kv.set_u64("noise_seed", sample.noise_seed);
    return kv;
}

TrainConfig parse_train_config(const KvFile& kv) {
    kv.expect_known_keys({
        "epochs", "batch_size", "initial_lr", "lr_decay_factor",
        "decay_every_epochs", "hidden_channels", "seed",
        "loss.lambda", "loss.lambda_kl", "loss.dice_epsilon",
        "adam.beta1", "adam.beta2", "adam.epsilon",
    });
    TrainConfig config;
    config.epochs = static_cast<std::uint32_t>(
        kv.get_u64_or("epochs", config.epochs));
    config.batch_size = static_cast<std::uint32_t>(
        kv.get_u64_or("batch_size", config.batch_size));
    config.initial_lr = kv.get_double_or("initial_lr", config.initial_lr);
    config.lr_decay_factor =
        kv.get_double_or("lr_decay_factor", config.lr_decay_factor);
    config.decay_every_epochs = static_cast<std::uint32_t>(
        kv.get_u64_or("decay_every_epochs", config.decay_every_epochs));
    if (kv.has("hidden_channels")) {
        config.hidden_channels.clear();
        for (double v : kv.get_doubles("hidden_channels")) {
            if (!(v >= 1.0) || v != std::floor(v)) {
                throw ConfigError("'hidden_channels' needs positive integers");
            }
            config.hidden_channels.push_back(static_cast<std::uint32_t>(v));
        }
    }
    config.loss.lambda = kv.get_double_or("loss.lambda", config.loss.lambda);
    config.loss.lambda_kl =
        kv.get_double_or("loss.lambda_kl", config.loss.lambda_kl);
    config.loss.dice_epsilon =
        kv.get_double_or("loss.dice_epsilon", config.loss.dice_epsilon);
    config.adam.beta1 = kv.get_double_or("adam.beta1", config.adam.beta1);
    config.adam.beta2 = kv.get_double_or("adam.beta2", config.adam.beta2);
    config.adam.epsilon = kv.get_double_or("adam.epsilon", config.adam.epsilon);
    config.seed = kv.get_u64_or("seed", 0);
    config.validate();
    return config;
}

// ---- dataset directory layout ----------------------------------------
//
//   <dir>/summary.txt
//   <dir>/train/sample_000.channels.evol  (.labels.elbl, .meta.txt)
//   <dir>/val/...      only when the split is non-empty
//   <dir>/test/...
//   <dir>/ood/sample_000.channels.evol    lesioned twin of each test
//   <dir>/ood/sample_000.lesion.elbl      sample, when a lesion is given

struct LoadedSample {
    Volume channels;
    LabelMap labels;
};

std::vector<LoadedSample> load_split(const fs::path& dir) {
    std::vector<LoadedSample> out;
    if (!fs::exists(dir)) return out;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().filename().string().ends_with(".channels.evol")) {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) {
        std::string base = f.filename().string();
        base.resize(base.size() - std::string(".channels.evol").size());
        LoadedSample s;
        s.channels = load_volume(f);
        s.labels = load_labelmap(f.parent_path() / (base + ".labels.elbl"));
        out.push_back(std::move(s));
    }
    return out;
}

void write_split(const fs::path& dir, const std::vector<DatasetSample>& samples) {
    if (samples.empty()) return;
    ensure_dir(dir);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string stem = sample_stem(i);
        save_volume(samples[i].channels, dir / (stem + ".channels.evol"));
        save_labelmap(samples[i].labels, dir / (stem + ".labels.elbl"));
        sample_meta(samples[i]).save(dir / (stem + ".meta.txt"));
    }
}

// Lesioned twin of one test sample, regenerated from the sample's own
// jittered spec and noise seed so only the lesion differs.
struct OodTwin {
    DatasetSample sample;
    Mask mask;
};

void write_dataset(const fs::path& root, const PhantomFile& pf, const Dataset& ds,
                   std::vector<OodTwin>* twins_out) {
    ensure_dir(root);

    KvFile summary;
    summary.set("dims", to_string(pf.spec.dims));
    summary.set_u64("classes", pf.spec.regions.size());
    std::string names;
    for (const RegionSpec& r : pf.spec.regions) {
        if (!names.empty()) names += ' ';
        names += r.name;
    }
    summary.set("class_names", names);
    summary.set_u64("train_count", ds.train.size());
    summary.set_u64("val_count", ds.val.size());
    summary.set_u64("test_count", ds.test.size());
    summary.set_u64("protocol.measurements", pf.protocol.measurements.size());
    summary.set_u64("protocol.b0", pf.protocol.b0_count());
    summary.set_double("protocol.sigma", pf.protocol.sigma);
    summary.set("lesion", pf.lesion ? "1" : "0");
    summary.set_u64("seed", pf.seed);
    summary.save(root / "summary.txt");

    write_split(root / "train", ds.train);
    write_split(root / "val", ds.val);
    write_split(root / "test", ds.test);

    if (pf.lesion) {
        ensure_dir(root / "ood");
        for (std::size_t i = 0; i < ds.test.size(); ++i) {
            const DatasetSample& clean = ds.test[i];
            Mask mask;
            DatasetSample twin = regenerate_sample(
                clean.spec, pf.protocol, clean.noise_seed, &*pf.lesion, &mask);
            const std::string stem = sample_stem(i);
            save_volume(twin.channels, root / "ood" / (stem + ".channels.evol"));
            save_labelmap(mask_to_labelmap(mask, twin.labels.voxel_size()),
                          root / "ood" / (stem + ".lesion.elbl"));
            if (twins_out != nullptr) {
                twins_out->push_back({std::move(twin), std::move(mask)});
            }
        }
    }
}

// ---- prediction and fusion directories -------------------------------

void write_prediction(const fs::path& dir, const SubnetPrediction& pred,
                      const SubnetConfig& config, VoxelSize voxel_size) {
    ensure_dir(dir);
    save_volume(pred.evidence.to_volume(voxel_size), dir / "evidence.evol");
    save_labelmap(pred.labels, dir / "labels.elbl");
    save_volume(pred.uncertainty, dir / "uncertainty.evol");
    KvFile kv;
    kv.set("subnet_id", config.subnet_id);
    kv.set_u64("channel_index", config.channel_index);
    kv.set_u64("num_classes", config.num_classes);
    kv.save(dir / "predict.txt");
}

struct MemberSet {
    SubnetOutputs outputs;
    VoxelSize voxel_size;
    std::vector<std::string> class_names;
};

MemberSet load_members(const std::vector<std::string>& dirs) {
    MemberSet out;
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        const fs::path dir = dirs[i];
        const Volume ev = load_volume(dir / "evidence.evol");
        const KvFile meta = KvFile::parse(dir / "predict.txt");
        if (i == 0) {
            out.voxel_size = ev.voxel_size();
            out.class_names = load_labelmap(dir / "labels.elbl").names();
        } else if (!(ev.voxel_size() == out.voxel_size)) {
            throw ShapeError("fusion inputs disagree on voxel size");
        }
        out.outputs.members.push_back(
            EvidenceField::from_volume(ev, meta.get("subnet_id")));
    }
    return out;
}

// The probability and entropy rules consume per-voxel class probability
// vectors; expected probabilities alpha / S derive them from evidence.
SubnetOutputs to_probability_members(const SubnetOutputs& outs) {
    SubnetOutputs prob;
    for (const EvidenceField& m : outs.members) {
        Volume p = expected_probabilities(evidence_to_alpha(m));
        prob.members.push_back(EvidenceField::from_volume(p, m.subnet_id));
    }
    return prob;
}

FusionCriterion criterion_of(const std::string& name) {
    if (name == "evidence") return FusionCriterion::kEvidence;
    if (name == "probability") return FusionCriterion::kProbability;
    if (name == "entropy") return FusionCriterion::kEntropy;
    throw ConfigError("unknown fusion criterion '" + name + "'");
}

FusedResult fuse_by(FusionCriterion criterion, const SubnetOutputs& evidence,
                    const SubnetOutputs& probabilities,
                    std::vector<std::string> class_names) {
    switch (criterion) {
        case FusionCriterion::kEvidence:
            return fuse_evidence_based(evidence, std::move(class_names));
        case FusionCriterion::kProbability:
            return fuse_probability_based(probabilities, std::move(class_names));
        case FusionCriterion::kEntropy:
            return fuse_entropy_based(probabilities, std::move(class_names));
    }
    throw ConfigError("unhandled fusion criterion");
}

LabelMap restamp(const LabelMap& lm, VoxelSize voxel_size) {
    return LabelMap::from_data(lm.dims(), lm.num_classes(), lm.labels(),
                               lm.names(), voxel_size);
}

void write_fused(const fs::path& dir, const FusedResult& fused,
                 VoxelSize voxel_size, std::size_t member_count) {
    ensure_dir(dir);
    save_labelmap(restamp(fused.labels, voxel_size), dir / "labels.elbl");
    Volume uncertainty = fused.uncertainty;
    uncertainty.set_voxel_size(voxel_size);
    save_volume(uncertainty, dir / "uncertainty.evol");
    save_labelmap(restamp(fused.chosen_subnet, voxel_size), dir / "chosen.elbl");
    KvFile kv;
    kv.set("criterion", fusion_criterion_name(fused.criterion));
    kv.set_u64("members", member_count);
    const std::vector<std::string>& member_names = fused.chosen_subnet.names();
    for (std::size_t i = 0; i < member_names.size(); ++i) {
        kv.set("member." + std::to_string(i), member_names[i]);
    }
    kv.save(dir / "fusion.txt");
}

Volume pick_channel(const Volume& v, std::uint32_t channel) {
    if (channel >= v.channels()) {
        throw ShapeError("channel " + std::to_string(channel) +
                         " out of range for a volume with " +
                         std::to_string(v.channels()) + " channels");
    }
    const std::size_t voxels = v.dims().voxel_count();
    std::vector<float> data(v.data().begin() + channel * voxels,
                            v.data().begin() + (channel + 1) * voxels);
    return Volume::from_data(v.dims(), 1, std::move(data), v.voxel_size());
}

// ---- subcommand bodies -----------------------------------------------

void run_phantom(const std::string& spec_path, const std::string& out,
                 const std::optional<std::uint64_t>& seed) {
    PhantomFile pf = parse_phantom_file(KvFile::parse(spec_path));
    if (seed) pf.seed = *seed;
    const Dataset ds = make_dataset(pf.spec, pf.protocol, pf.dataset, pf.seed);
    write_dataset(out, pf, ds, nullptr);
    std::cout << "dataset: " << ds.train.size() << " train / " << ds.val.size()
              << " val / " << ds.test.size() << " test samples in " << out
              << "\n";
}

void run_train(const std::string& dataset_dir, const std::string& channel,
               const std::string& config_path, const std::string& out,
               std::string record_path, const std::optional<std::uint64_t>& seed) {
    const std::uint32_t channel_index = channel_index_of(channel);
    TrainConfig config = parse_train_config(KvFile::parse(config_path));
    if (seed) config.seed = *seed;

    const fs::path root = dataset_dir;
    if (!fs::exists(root / "train")) {
        throw IoError("no train/ split under " + dataset_dir);
    }
    const std::vector<LoadedSample> train = load_split(root / "train");
    const std::vector<LoadedSample> val = load_split(root / "val");
    std::vector<SampleRef> train_refs, val_refs;
    for (const LoadedSample& s : train) train_refs.push_back({s.channels, s.labels});
    for (const LoadedSample& s : val) val_refs.push_back({s.channels, s.labels});

    auto [params, record] =
        train_subnet(train_refs, val_refs, channel_index, channel, config);
    ensure_dir(fs::path(out).parent_path());
    save_checkpoint(params, out);
    if (record_path.empty()) {
        record_path = fs::path(out).replace_extension(".record.txt").string();
    }
    ensure_dir(fs::path(record_path).parent_path());
    save_training_record(record, record_path);
    std::cout << "trained " << channel << ": final train loss "
              << format_double(record.epochs.back().train.total) << "\n";
}

void run_predict(const std::string& checkpoint, const std::string& volume,
                 const std::string& out) {
    const SubnetParams params = load_checkpoint(checkpoint);
    const Volume channels = load_volume(volume);
    const SubnetPrediction pred = predict_subnet(params, channels);
    write_prediction(out, pred, params.config, channels.voxel_size());
    std::cout << "subnet " << params.config.subnet_id << ": prediction in "
              << out << "\n";
}

void run_fuse(const std::vector<std::string>& dirs, const std::string& criterion,
              const std::string& out) {
    const FusionCriterion crit = criterion_of(criterion);
    MemberSet members = load_members(dirs);
    SubnetOutputs probabilities;
    if (crit != FusionCriterion::kEvidence) {
        probabilities = to_probability_members(members.outputs);
    }
    const FusedResult fused =
        fuse_by(crit, members.outputs, probabilities, members.class_names);
    write_fused(out, fused, members.voxel_size, members.outputs.size());
    std::cout << criterion << " fusion of " << members.outputs.size()
              << " member(s) in " << out << "\n";
}

void run_eval(const std::string& pred, const std::string& gt,
              const std::string& out, bool include_background,
              bool voxel_weighted, const std::string& exclude) {
    MetricsConfig config;
    config.include_background = include_background;
    config.voxel_weighted = voxel_weighted;
    if (!exclude.empty()) {
        config.exclude = mask_from_labelmap(load_labelmap(exclude));
    }
    const MetricsReport report =
        region_metrics(load_labelmap(pred), load_labelmap(gt), config);
    ensure_dir(fs::path(out).parent_path());
    report.to_kv().save(out);
    std::cout << "mean_dice = " << format_double(report.mean_dice) << "\n";
}

void run_ood(const std::string& uncertainty, const std::string& lesion,
             const std::string& gt, const std::string& out) {
    const OodReport report =
        ood_report(load_volume(uncertainty),
                   mask_from_labelmap(load_labelmap(lesion)), load_labelmap(gt));
    ensure_dir(fs::path(out).parent_path());
    report.to_kv().save(out);
    std::cout << "contrast_ratio = " << format_double(report.contrast_ratio)
              << ", auroc = " << format_double(report.auroc) << "\n";
}

void run_render(const std::string& in, const std::string& axis,
                std::uint32_t index, std::uint32_t channel,
                const std::string& out) {
    std::ifstream probe(in, std::ios::binary);
    char magic[4] = {};
    if (!probe.read(magic, 4)) {
        throw IoError("cannot read " + in);
    }
    probe.close();
    ensure_dir(fs::path(out).parent_path());
    const std::string kind(magic, 4);
    if (kind == "EVOL") {
        render_heatmap(pick_channel(load_volume(in), channel), parse_axis(axis),
                       index, out);
    } else if (kind == "ELBL") {
        render_labelmap(load_labelmap(in), parse_axis(axis), index, out);
    } else {
        throw FormatError(FormatError::Fault::BadMagic,
                          in + " is neither a volume nor a label map");
    }
    std::cout << "wrote " << out << "\n";
}

// ---- end-to-end pipeline ---------------------------------------------

struct E2eArgs {
    std::string spec_path;
    std::string train_config_path;
    std::string manifest_path;
    std::string out;
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
};

// Recovers an embedded config from a manifest snapshot by dropping the
// section prefix from every matching key.
KvFile strip_prefix(const KvFile& kv, const std::string& prefix) {
    KvFile out;
    for (const auto& [key, value] : kv.entries()) {
        if (key.size() > prefix.size() &&
            key.compare(0, prefix.size(), prefix) == 0) {
            out.set(key.substr(prefix.size()), value);
        }
    }
    return out;
}

void run_e2e(const E2eArgs& args) {
    KvFile phantom_kv, train_kv;
    std::string spec_label, config_label;
    if (!args.manifest_path.empty()) {
        const KvFile manifest = KvFile::parse(args.manifest_path);
        phantom_kv = strip_prefix(manifest, "phantom.");
        train_kv = strip_prefix(manifest, "train.");
        spec_label = args.manifest_path;
        config_label = args.manifest_path;
    } else {
        if (args.spec_path.empty() || args.train_config_path.empty()) {
            throw ConfigError(
                "e2e needs either --from-manifest or both --spec and "
                "--train-config");
        }
        phantom_kv = KvFile::parse(args.spec_path);
        train_kv = KvFile::parse(args.train_config_path);
        spec_label = args.spec_path;
        config_label = args.train_config_path;
    }
    if (args.seed) {
        // The snapshot must carry the effective seeds, otherwise a rerun
        // from the manifest would diverge.
        phantom_kv.set_u64("seed", *args.seed);
        train_kv.set_u64("seed", *args.seed);
    }
    const PhantomFile pf = parse_phantom_file(phantom_kv);
    const TrainConfig tc = parse_train_config(train_kv);

    const fs::path out = args.out;
    ensure_dir(out);

    const Dataset ds = make_dataset(pf.spec, pf.protocol, pf.dataset, pf.seed);
    std::vector<OodTwin> twins;
    write_dataset(out / "dataset", pf, ds, &twins);
    std::cout << "dataset: " << ds.train.size() << " train / " << ds.val.size()
              << " val / " << ds.test.size() << " test\n";

    std::vector<SampleRef> train_refs, val_refs;
    for (const DatasetSample& s : ds.train) train_refs.push_back({s.channels, s.labels});
    for (const DatasetSample& s : ds.val) val_refs.push_back({s.channels, s.labels});

    ensure_dir(out / "checkpoints");
    ensure_dir(out / "records");
    std::vector<SubnetParams> subnets(kParamChannels);
    {
        std::vector<TrainingRecord> records(kParamChannels);
        std::vector<std::exception_ptr> errors(kParamChannels);
        std::atomic<std::uint32_t> next{0};
        auto worker = [&] {
            for (std::uint32_t c = next.fetch_add(1); c < kParamChannels;
                 c = next.fetch_add(1)) {
                try {
                    auto [params, record] = train_subnet(
                        train_refs, val_refs, c, kChannelNames[c], tc);
                    subnets[c] = std::move(params);
                    records[c] = std::move(record);
                } catch (...) {
                    errors[c] = std::current_exception();
                }
            }
        };
        const unsigned n_workers =
            std::max(1u, std::min<unsigned>(args.threads, kParamChannels));
        if (n_workers == 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (unsigned t = 0; t < n_workers; ++t) pool.emplace_back(worker);
            for (std::thread& th : pool) th.join();
        }
        for (const std::exception_ptr& e : errors) {
            if (e) std::rethrow_exception(e);
        }
        for (std::uint32_t c = 0; c < kParamChannels; ++c) {
            save_checkpoint(subnets[c],
                            out / "checkpoints" / (kChannelNames[c] + ".eprm"));
            save_training_record(records[c],
                                 out / "records" / (kChannelNames[c] + ".txt"));
            std::cout << "trained " << kChannelNames[c] << ": final train loss "
                      << format_double(records[c].epochs.back().train.total)
                      << "\n";
        }
    }

    const std::array<FusionCriterion, 3> criteria = {
        FusionCriterion::kEvidence, FusionCriterion::kProbability,
        FusionCriterion::kEntropy};
    ensure_dir(out / "reports");
    KvFile summary;
    summary.set_u64("test_count", ds.test.size());
    std::array<double, 3> dice_sum{};
    double contrast_sum = 0.0, auroc_sum = 0.0;
    double clean_sum = 0.0, lesioned_sum = 0.0;

    for (std::size_t t = 0; t < ds.test.size(); ++t) {
        const DatasetSample& sample = ds.test[t];
        const std::string stem = test_stem(t);

        SubnetOutputs outs;
        for (std::uint32_t c = 0; c < kParamChannels; ++c) {
            SubnetPrediction pred = predict_subnet(subnets[c], sample.channels);
            write_prediction(out / "predict" / stem / kChannelNames[c], pred,
                             subnets[c].config, sample.channels.voxel_size());
            outs.members.push_back(std::move(pred.evidence));
        }
        const SubnetOutputs prob_outs = to_probability_members(outs);
        const std::vector<std::string> class_names = sample.labels.names();

        LabelMap evidence_labels;
        for (std::size_t k = 0; k < criteria.size(); ++k) {
            FusedResult fused =
                fuse_by(criteria[k], outs, prob_outs, class_names);
            const char* name = fusion_criterion_name(criteria[k]);
            write_fused(out / "fused" / stem / name, fused,
                        sample.channels.voxel_size(), outs.size());
            const MetricsReport metrics = region_metrics(fused.labels, sample.labels);
            metrics.to_kv().save(out / "reports" /
                                 (stem + "." + name + ".metrics.txt"));
            summary.set_double("dice." + stem + "." + name, metrics.mean_dice);
            dice_sum[k] += metrics.mean_dice;
            if (criteria[k] == FusionCriterion::kEvidence) {
                evidence_labels = std::move(fused.labels);
            }
        }

        if (pf.lesion) {
            const OodTwin& twin = twins[t];
            SubnetOutputs twin_outs;
            for (std::uint32_t c = 0; c < kParamChannels; ++c) {
                twin_outs.members.push_back(
                    predict_subnet(subnets[c], twin.sample.channels).evidence);
            }
            const FusedResult twin_fused =
                fuse_evidence_based(twin_outs, class_names);
            write_fused(out / "ood" / stem, twin_fused,
                        twin.sample.channels.voxel_size(), twin_outs.size());

            const OodReport report =
                ood_report(twin_fused.uncertainty, twin.mask, sample.labels);
            MetricsConfig outside;
            outside.exclude = twin.mask;
            const double dice_lesioned =
                region_metrics(twin_fused.labels, sample.labels, outside).mean_dice;
            const double dice_clean =
                region_metrics(evidence_labels, sample.labels, outside).mean_dice;

            KvFile kv = report.to_kv();
            kv.set_double("dice_outside.lesioned", dice_lesioned);
            kv.set_double("dice_outside.clean", dice_clean);
            kv.set_double("dice_outside.degradation", dice_clean - dice_lesioned);
            kv.save(out / "reports" / (stem + ".ood.txt"));

            summary.set_double("ood." + stem + ".contrast_ratio",
                               report.contrast_ratio);
            summary.set_double("ood." + stem + ".auroc", report.auroc);
            summary.set_double("ood." + stem + ".dice_outside_clean", dice_clean);
            summary.set_double("ood." + stem + ".dice_outside_lesioned",
                               dice_lesioned);
            contrast_sum += report.contrast_ratio;
            auroc_sum += report.auroc;
            clean_sum += dice_clean;
            lesioned_sum += dice_lesioned;
        }
    }

    const double n_test = static_cast<double>(ds.test.size());
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        summary.set_double(
            std::string("mean_dice.") + fusion_criterion_name(criteria[k]),
            dice_sum[k] / n_test);
    }
    if (pf.lesion && !ds.test.empty()) {
        summary.set_double("ood.contrast_ratio", contrast_sum / n_test);
        summary.set_double("ood.auroc", auroc_sum / n_test);
        summary.set_double("ood.dice_outside_clean", clean_sum / n_test);
        summary.set_double("ood.dice_outside_lesioned", lesioned_sum / n_test);
        summary.set_double("ood.dice_degradation",
                           (clean_sum - lesioned_sum) / n_test);
    }
    summary.save(out / "reports" / "summary.txt");

    std::cout << "mean dice: evidence "
              << format_double(dice_sum[0] / n_test) << ", probability "
              << format_double(dice_sum[1] / n_test) << ", entropy "
              << format_double(dice_sum[2] / n_test) << "\n";
    if (pf.lesion && !ds.test.empty()) {
        std::cout << "ood: contrast " << format_double(contrast_sum / n_test)
                  << ", auroc " << format_double(auroc_sum / n_test)
                  << ", dice degradation outside lesion "
                  << format_double((clean_sum - lesioned_sum) / n_test) << "\n";
    }

    // The manifest goes last so the artifact walk sees every output. The
    // embedded config snapshot is what a rerun parses, so a rerun cannot
    // drift from this run's settings.
    KvFile manifest;
    manifest.set("tool", std::string("evseg ") + kVersion);
    manifest.set("command", "e2e");
    manifest.set("input.spec", spec_label);
    manifest.set("input.train_config", config_label);
    manifest.set("output.dir", out.string());
    for (const auto& [key, value] : phantom_kv.entries()) {
        manifest.set("phantom." + key, value);
    }
    for (const auto& [key, value] : train_kv.entries()) {
        manifest.set("train." + key, value);
    }
    std::vector<std::string> artifacts;
    for (const auto& entry : fs::recursive_directory_iterator(out)) {
        if (!entry.is_regular_file()) continue;
        std::string rel = fs::relative(entry.path(), out).generic_string();
        if (rel != "manifest.txt") artifacts.push_back(std::move(rel));
    }
    std::sort(artifacts.begin(), artifacts.end());
    for (std::size_t i = 0; i < artifacts.size(); ++i) {
        manifest.set("artifact." + zero_pad(i, 4), artifacts[i]);
    }
    manifest.save(out / "manifest.txt");
    std::cout << "manifest: " << (out / "manifest.txt").string() << " ("
              << artifacts.size() << " artifacts)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Evidential segmentation of synthetic diffusion phantoms: subnetworks "
        "per parameter map, fused by per-voxel uncertainty"};
    app.set_version_flag("--version", std::string("evseg ") + kVersion);
    app.require_subcommand(1);
    app.footer(
        "Exit codes:\n"
        "  0  success\n"
        "  1  unexpected failure\n"
        "  2  command line usage error\n"
        "  3  invalid configuration\n"
        "  4  file system failure (missing input, unwritable output)\n"
        "  5  malformed file contents\n"
        "  6  mismatched grid dimensions or channel counts\n"
        "  7  numeric domain violation");

    static const std::vector<std::string> kChannels(kChannelNames.begin(),
                                                    kChannelNames.end());
    static const std::vector<std::string> kCriteria = {"evidence", "probability",
                                                       "entropy"};
    static const std::vector<std::string> kAxes = {"x", "y", "z"};

    auto* phantom = app.add_subcommand(
        "phantom", "Generate a phantom dataset from a description file");
    std::string phantom_spec, phantom_out;
    std::optional<std::uint64_t> phantom_seed;
    phantom->add_option("spec", phantom_spec, "phantom description file")
        ->required();
    phantom->add_option("--out", phantom_out, "output dataset directory")
        ->required();
    phantom->add_option("--seed", phantom_seed,
                        "override the seed from the description file");
    phantom->callback([&] { run_phantom(phantom_spec, phantom_out, phantom_seed); });

    auto* train = app.add_subcommand(
        "train", "Train one subnetwork on a channel of a dataset");
    std::string train_dataset, train_channel, train_config, train_out, train_record;
    std::optional<std::uint64_t> train_seed;
    train->add_option("--dataset", train_dataset, "dataset directory")->required();
    train->add_option("--channel", train_channel, "input channel")
        ->required()
        ->check(CLI::IsMember(kChannels));
    train->add_option("--config", train_config, "training configuration file")
        ->required();
    train->add_option("--out", train_out, "checkpoint file to write")->required();
    train->add_option("--record", train_record,
                      "training record file (default: checkpoint name with "
                      ".record.txt)");
    train->add_option("--seed", train_seed, "override the configured seed");
    train->callback([&] {
        run_train(train_dataset, train_channel, train_config, train_out,
                  train_record, train_seed);
    });

    auto* predict = app.add_subcommand(
        "predict", "Run one trained subnetwork over a channel volume");
    std::string predict_checkpoint, predict_volume, predict_out;
    predict->add_option("--checkpoint", predict_checkpoint, "checkpoint file")
        ->required();
    predict->add_option("--volume", predict_volume,
                        "multi-channel input volume (.evol)")
        ->required();
    predict->add_option("--out", predict_out, "output directory")->required();
    predict->callback(
        [&] { run_predict(predict_checkpoint, predict_volume, predict_out); });

    auto* fuse = app.add_subcommand(
        "fuse", "Fuse subnetwork prediction directories into one segmentation");
    std::vector<std::string> fuse_dirs;
    std::string fuse_criterion = "evidence";
    std::string fuse_out;
    fuse->add_option("--in", fuse_dirs, "prediction directories to fuse")
        ->required();
    fuse->add_option("--criterion", fuse_criterion, "fusion rule")
        ->check(CLI::IsMember(kCriteria));
    fuse->add_option("--out", fuse_out, "output directory")->required();
    fuse->callback([&] { run_fuse(fuse_dirs, fuse_criterion, fuse_out); });

    auto* eval = app.add_subcommand(
        "eval", "Score a predicted label map against ground truth");
    std::string eval_pred, eval_gt, eval_out, eval_exclude;
    bool eval_background = false, eval_weighted = false;
    eval->add_option("--pred", eval_pred, "predicted label map (.elbl)")
        ->required();
    eval->add_option("--gt", eval_gt, "ground-truth label map (.elbl)")
        ->required();
    eval->add_option("--out", eval_out, "metrics report file")->required();
    eval->add_flag("--include-background", eval_background,
                   "count the background region in the means");
    eval->add_flag("--voxel-weighted", eval_weighted,
                   "weight the means by region size");
    eval->add_option("--exclude", eval_exclude,
                     "label map of voxels to leave out (nonzero = excluded)");
    eval->callback([&] {
        run_eval(eval_pred, eval_gt, eval_out, eval_background, eval_weighted,
                 eval_exclude);
    });

    auto* ood = app.add_subcommand(
        "ood", "Contrast and ranking statistics of uncertainty inside a lesion");
    std::string ood_uncertainty, ood_lesion, ood_gt, ood_out;
    ood->add_option("--uncertainty", ood_uncertainty,
                    "fused uncertainty volume (.evol)")
        ->required();
    ood->add_option("--lesion", ood_lesion, "lesion mask (.elbl, nonzero = lesion)")
        ->required();
    ood->add_option("--gt", ood_gt, "ground-truth label map (.elbl)")->required();
    ood->add_option("--out", ood_out, "report file")->required();
    ood->callback([&] { run_ood(ood_uncertainty, ood_lesion, ood_gt, ood_out); });

    auto* render = app.add_subcommand(
        "render", "Render one slice of a volume (PGM) or label map (PPM)");
    std::string render_in, render_axis = "z", render_out;
    std::uint32_t render_index = 0, render_channel = 0;
    render->add_option("--in", render_in, "volume or label map file")->required();
    render->add_option("--axis", render_axis, "slice axis")
        ->check(CLI::IsMember(kAxes));
    render->add_option("--index", render_index, "slice index along the axis")
        ->required();
    render->add_option("--channel", render_channel,
                       "channel to render for multi-channel volumes");
    render->add_option("--out", render_out, "image file to write")->required();
    render->callback([&] {
        run_render(render_in, render_axis, render_index, render_channel,
                   render_out);
    });

    auto* e2e = app.add_subcommand(
        "e2e",
        "Full pipeline: dataset, five subnetworks, prediction, fusion, "
        "evaluation and OOD analysis");
    E2eArgs e2e_args;
    auto* e2e_spec =
        e2e->add_option("--spec", e2e_args.spec_path, "phantom description file");
    auto* e2e_config = e2e->add_option("--train-config", e2e_args.train_config_path,
                                       "training configuration file");
    e2e->add_option("--from-manifest", e2e_args.manifest_path,
                    "repeat a previous run from its manifest")
        ->excludes(e2e_spec)
        ->excludes(e2e_config);
    e2e->add_option("--out", e2e_args.out, "output directory")->required();
    e2e->add_option("--seed", e2e_args.seed,
                    "override both the dataset and the training seed");
    e2e->add_option("--threads", e2e_args.threads,
                    "train up to this many subnetworks in parallel")
        ->check(CLI::Range(1u, 16u));
    e2e->callback([&] { run_e2e(e2e_args); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 5;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 6;
    } catch (const DomainError& e) {
        std::cerr << "domain error: " << e.what() << "\n";
        return 7;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
