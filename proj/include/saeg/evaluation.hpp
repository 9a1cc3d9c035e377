#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saeg/dataset.hpp"
#include "saeg/desk_model.hpp"
#include "saeg/sae.hpp"

namespace saeg {

/// 1 - ||x - xhat||^2 / ||x - mu||^2, sums over batch and dimensions;
/// mu is the frozen training-set layer mean.
template <class T>
double r_squared(const Mat<T>& x, const Mat<T>& xhat, std::span<const double> mu);

/// Mean over rows of the exact-zero feature count.
template <class T>
double l0_sparsity(const Mat<T>& f);

/// Mean over a's decoder columns of the max cosine similarity to any of b's
/// decoder columns. Asymmetric: a is the group SAE, b the baseline.
double mmcs(const SaeParams<float>& a, const SaeParams<float>& b);

/// (CE(zero-ablated) - CE(sae-spliced)) / (CE(zero-ablated) - CE(clean)),
/// with the splice and the zero ablation applied at `layer` only.
double ce_loss_score(const DeskParams<float>& model, std::span<const std::uint32_t> tokens,
                     const SaeParams<float>& sae, int layer);

/// Same score with the three CE terms averaged over many sequences.
double ce_loss_score_sequences(const DeskParams<float>& model,
                               const std::vector<std::vector<std::uint32_t>>& sequences,
                               const SaeParams<float>& sae, int layer);

struct ReconReport {
    std::string sae_id;
    int k = 0; // 0 marks per-layer baselines
    int group_index = 0;
    int layer = 0;
    std::uint64_t n_examples = 0;
    double cels = 0;
    double r2 = 0;
    double l2 = 0;
    double l0 = 0;
    std::optional<double> mmcs_vs_baseline;
};

/// One report per layer: recon metrics over `n_rows` held-out activation
/// rows and CELS over `sequences`. `train_means` supplies the frozen per-
/// layer mean for R^2.
std::vector<ReconReport> evaluate_sae(const DeskParams<float>& model,
                                      const ActivationDataset& heldout,
                                      const std::vector<std::vector<std::uint32_t>>& sequences,
                                      const SaeParams<float>& sae, const std::vector<int>& layers,
                                      std::uint64_t n_rows,
                                      const std::vector<std::vector<double>>& train_means);

} // namespace saeg
