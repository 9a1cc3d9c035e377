#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saeg/corpus.hpp"
#include "saeg/desk_config.hpp"
#include "saeg/matrix.hpp"
#include "saeg/sae.hpp"

namespace saeg {

/// One pre-norm transformer block: attention sublayer then MLP sublayer,
/// each added back onto the residual stream. Weights are stored (in x out)
/// so activations multiply on the left.
template <class T>
struct DeskLayer {
    std::vector<T> ln1_g, ln1_b;
    Mat<T> w_q, w_k, w_v, w_o;
    std::vector<T> b_q, b_k, b_v, b_o;
    std::vector<T> ln2_g, ln2_b;
    Mat<T> w_fc;
    std::vector<T> b_fc;
    Mat<T> w_proj;
    std::vector<T> b_proj;
};

template <class T>
struct DeskParams {
    DeskConfig cfg;
    Mat<T> tok_emb; // vocab x d
    Mat<T> pos_emb; // context x d
    std::vector<DeskLayer<T>> layers;
    std::vector<T> lnf_g, lnf_b;
    Mat<T> unembed; // d x vocab

    static DeskParams sized(const DeskConfig& cfg);

    /// Visits every parameter block in checkpoint order.
    void for_each_block(const std::function<void(const std::string&, std::span<T>)>& fn);
    void for_each_block(
        const std::function<void(const std::string&, std::span<const T>)>& fn) const;

    std::size_t n_params() const;
    std::uint64_t checksum() const;
};

/// Seeded initialization; identical seeds give bit-identical parameters.
template <class T>
DeskParams<T> init_desk_model(const DeskConfig& cfg);

template <class T>
struct HookRecord {
    // resid_post[l] holds the residual stream after layer l's MLP
    // contribution, one row per token position.
    std::vector<Mat<T>> resid_post;
};

enum class SpliceMode { sae_reconstruction, zero_ablation, fixed_values, feature_override };

/// Replacement rule applied to resid-post at a set of layers before the
/// following layer consumes it.
template <class T>
struct SpliceSpec {
    std::vector<int> layers;
    SpliceMode mode = SpliceMode::sae_reconstruction;

    // fixed_values: per-layer replacement matrices (positions x d_model).
    std::map<int, Mat<T>> fixed;

    // feature_override: sparse (feature, value) overrides applied to f at
    // `override_pos` before decoding; `override_full` replaces the whole
    // feature vector instead. -1 addresses the last position.
    std::vector<std::pair<int, T>> overrides;
    std::optional<std::vector<T>> override_full;
    idx override_pos = -1;
};

template <class T>
struct ForwardOut {
    Mat<T> logits; // positions x vocab
    HookRecord<T> hooks;
    // f recorded at each spliced layer when an SAE is attached
    // (positions x d_sae).
    std::map<int, Mat<T>> features;
};

template <class T>
ForwardOut<T> forward(const DeskParams<T>& params, std::span<const std::uint32_t> tokens);

template <class T>
ForwardOut<T> forward_spliced(const DeskParams<T>& params, std::span<const std::uint32_t> tokens,
                              const SpliceSpec<T>& splice, const SaeParams<T>* sae);

/// Mean token-level negative log-likelihood, natural log. logits row i is
/// scored against targets[i].
template <class T>
double cross_entropy(const Mat<T>& logits, std::span<const std::uint32_t> targets);

template <class T>
struct DeskGrads {
    Mat<T> tok_emb, pos_emb;
    std::vector<DeskLayer<T>> layers;
    std::vector<T> lnf_g, lnf_b;
    Mat<T> unembed;

    static DeskGrads sized(const DeskConfig& cfg);
    void for_each_block(const std::function<void(const std::string&, std::span<T>)>& fn);
};

/// Mean next-token cross-entropy over a batch of sequences plus, when
/// `grads` is non-null, the full parameter gradient by reverse-mode
/// backpropagation.
template <class T>
double desk_loss_and_grads(const DeskParams<T>& params,
                           const std::vector<std::vector<std::uint32_t>>& sequences,
                           DeskGrads<T>* grads);

/// Differentiable scalar read off the logits.
template <class T>
struct LogitMetric {
    virtual ~LogitMetric() = default;
    virtual double value(const Mat<T>& logits) const = 0;
    virtual Mat<T> grad(const Mat<T>& logits) const = 0;
};

/// logit(a) - logit(b) at the final position.
template <class T>
struct AnswerLogitDiff final : LogitMetric<T> {
    int a, b;
    double scale = 1.0;
    AnswerLogitDiff(int a_clean, int a_patch, double scale_in = 1.0)
        : a(a_clean), b(a_patch), scale(scale_in) {}
    double value(const Mat<T>& logits) const override;
    Mat<T> grad(const Mat<T>& logits) const override;
};

template <class T>
struct FeatureGradResult {
    double value = 0; // metric value at the forward pass
    std::vector<T> grad; // d metric / d f at the override position
    std::vector<T> f_at_pos; // the f actually used at the override position
};

/// Exact reverse-mode gradient of `metric` with respect to the SAE feature
/// activations at `layer`'s splice point (the override position). When
/// `f_override` is set the whole feature vector is replaced before decoding;
/// otherwise the encoded features are used as-is.
template <class T>
FeatureGradResult<T> grad_wrt_features(const DeskParams<T>& params,
                                       std::span<const std::uint32_t> tokens,
                                       const SaeParams<T>& sae, int layer,
                                       const LogitMetric<T>& metric,
                                       const std::vector<T>* f_override = nullptr);

struct DeskTrainStats {
    std::vector<double> loss_per_step;
    int steps = 0;
};

/// Adam training on next-token prediction over batches of corpus sequences;
/// deterministic given (params seed, corpus, steps).
template <class T>
std::pair<DeskParams<T>, DeskTrainStats> train_desk_model(DeskParams<T> params,
                                                          const Corpus& corpus, int steps,
                                                          double lr, int batch_sequences = 12);

/// Mean next-token cross-entropy of the model over a whole corpus.
template <class T>
double corpus_cross_entropy(const DeskParams<T>& params, const Corpus& corpus);

// Checkpoint: magic "SAEM", version u32, n_layers/d_model/n_heads/vocab/
// context u32, flags u32 (bit0 = final_layernorm), seed u64, algorithm id
// string (u32 length + bytes), then all parameter blocks f32 LE in
// for_each_block order.
void save_desk_checkpoint(const DeskParams<float>& params, const std::filesystem::path& path);
DeskParams<float> load_desk_checkpoint(const std::filesystem::path& path);

} // namespace saeg
