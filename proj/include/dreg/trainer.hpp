#pragma once

// Optimization loop: Adam, the step learning-rate schedule, loss assembly,
// per-step logging and checkpoints.

#include "dreg/data_io.hpp"
#include "dreg/losses.hpp"
#include "dreg/metrics.hpp"
#include "dreg/network.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dreg {

class KeyValues;

struct TrainConfig {
    double lr0 = 1e-4;
    int epochs = 10;
    std::vector<int> halve_after_epochs{4, 7};
    int batch_size = 1;
    int steps_per_epoch = 100;
    LossWeights weights;
    std::uint64_t seed = 1;
    bool supervised = true;

    void validate() const;
    std::string to_text() const;
    // Reads the keys it owns and ignores the rest.
    static TrainConfig from_keys(const KeyValues& kv);
    static const std::vector<std::string>& keys();
    std::int64_t total_steps() const { return std::int64_t{epochs} * steps_per_epoch; }
};

// Epochs are 1-based; the rate halves after each listed epoch.
double lr_at(int epoch, const TrainConfig& cfg);

struct AdamOptions {
    double b1 = 0.9, b2 = 0.999, eps = 1e-8;
};

struct AdamState {
    std::uint64_t t = 0;
    std::vector<std::vector<double>> m, v; // per parameter, ParamSet order
};

// One bias-corrected Adam update from the accumulated gradients, in parameter
// order. Parameters without a gradient are treated as having zero gradient.
void adam_step(ParamSet& params, AdamState& state, double lr, const AdamOptions& opt = {});

struct TrainingPair {
    Tensor moving, fixed;
    Tensor masks_moving, masks_fixed; // [S, D, H, W]
};

TrainingPair to_training_pair(const SyntheticPair& p);

struct StepRecord {
    std::int64_t step = 0; // 1-based global step
    int epoch = 1;
    double lr = 0.0;
    double aff = 0.0, reg = 0.0, sim = 0.0;
    std::optional<double> seg;
    double total = 0.0;

    // key=value fields on one line; L_seg is omitted when absent.
    std::string to_line() const;
    static StepRecord parse(const std::string& line);
};

class Trainer {
public:
    Trainer(RegistrationNet& net, TrainConfig cfg);

    const TrainConfig& config() const noexcept { return cfg_; }
    std::int64_t steps_done() const noexcept { return static_cast<std::int64_t>(adam_.t); }

    // Index of the pair used at a 1-based global step: a fixed shuffle per
    // pass over the data, so resumed runs see the same sequence.
    std::size_t pair_index(std::int64_t step, std::size_t dataset_size) const;

    // Forward, loss, backward and one Adam update. Throws NumericalError with
    // the component breakdown when the loss is not finite.
    StepRecord step(const TrainingPair& pair);

    struct Hooks {
        std::function<void(const StepRecord&)> on_step;
        std::function<void(int epoch)> on_epoch_end;
    };
    // Runs the remaining steps up to cfg.total_steps().
    void train(const std::vector<TrainingPair>& data, const Hooks& hooks = {});

    // Parameters, Adam moments ("adam.m/<name>", "adam.v/<name>") and the
    // network config.
    Checkpoint checkpoint() const;
    // Restores parameters, moments and the step counter. Throws
    // FormatError(mismatch) when the network config differs.
    void restore(const Checkpoint& ckpt);

private:
    RegistrationNet& net_;
    TrainConfig cfg_;
    AdamState adam_;
};

// Loss terms of one forward pass; seg only when masks are given.
LossParts compute_losses(const RegistrationResult& r, const Tensor& fixed, const Tensor* masks_moving,
                         const Tensor* masks_fixed);

// Loads a network from a checkpoint, rebuilding it from the stored config.
RegistrationNet load_network(const Checkpoint& ckpt);

enum class Baseline { identity, affine_only, full };

// Metrics of a held-out pair under the chosen transform. Moving masks are
// warped with nearest interpolation; the full model also reports the
// smoothness of its deformable field.
MetricReport evaluate_pair(const RegistrationNet& net, const TrainingPair& pair, Baseline mode = Baseline::full,
                           int cascades = 1);

} // namespace dreg
