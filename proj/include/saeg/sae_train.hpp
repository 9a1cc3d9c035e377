#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "saeg/dataset.hpp"
#include "saeg/sae.hpp"

namespace saeg {

/// Hyperparameters for one SAE training run. Defaults follow the production
/// recipe: expansion 8, lambda 1.0, lr 3e-5, batch 4096, Adam betas
/// (0, 0.999), l1 warm-up over the first 5% of steps, lr decay over the
/// final 20%.
struct SaeTrainConfig {
    int expansion = 8;
    double lambda = 1.0;
    double lr = 3e-5;
    idx batch = 4096;
    double beta1 = 0.0;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t total_tokens = 0;
    double l1_warmup_frac = 0.05;
    double lr_decay_frac = 0.20;
    std::uint64_t checkpoint_every_steps = 0; // 0 = final checkpoint only
    std::uint64_t seed = 0;
    JumpReluMode mode = JumpReluMode::heaviside;
    double theta_init = 1e-3;
    double ste_bandwidth = 1e-3;

    std::uint64_t total_steps() const {
        return batch > 0 ? total_tokens / static_cast<std::uint64_t>(batch) : 0;
    }
    void validate() const;
};

struct TrainLogRow {
    std::uint64_t step = 0;
    double recon = 0;
    double l1 = 0;
    double l0 = 0;
    double lr_t = 0;
    double lambda_t = 0;
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
    std::vector<std::uint64_t> checkpoint_steps;

    void save_csv(const std::filesystem::path& path) const;
};

/// (lr_t, lambda_t) at `step`. lambda ramps linearly from 0 over the first
/// l1_warmup_frac of steps; lr is constant and then decays linearly to 0
/// over the final lr_decay_frac of steps.
std::pair<double, double> schedule_at(const SaeTrainConfig& cfg, std::uint64_t step);

using SaeObserver = std::function<void(std::uint64_t step, const SaeParams<float>&)>;

/// Trains one SAE on the pooled activations of `group_layers`. The decoder
/// starts at zero (unit-norm projection kicks in once columns move off
/// zero), b_dec starts at the pooled data mean, and every step runs
/// sample -> gradients -> decoder renormalization -> Adam. Deterministic
/// per (seed, dataset, config).
std::pair<SaeParams<float>, TrainLog> train_sae(const ActivationDataset& dataset,
                                                const std::vector<int>& group_layers,
                                                const SaeTrainConfig& cfg,
                                                const SaeObserver& observer = {});

} // namespace saeg
