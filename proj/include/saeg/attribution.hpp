#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "saeg/desk_model.hpp"
#include "saeg/sae.hpp"
#include "saeg/tasks.hpp"

namespace saeg {

/// A scalar metric as a function of the full feature vector at the splice
/// point. The production implementation runs the spliced model; tests plug
/// in closed-form metrics.
template <class T>
struct FeatureMetric {
    virtual ~FeatureMetric() = default;
    virtual double value(const std::vector<T>& f) = 0;
    virtual std::vector<T> grad(const std::vector<T>& f) = 0;
};

/// Runs x_clean through the model with the SAE spliced at `layer`, replacing
/// the feature vector at the final position with the argument.
template <class T>
class SplicedTaskMetric final : public FeatureMetric<T> {
  public:
    SplicedTaskMetric(const DeskParams<T>& model, const SaeParams<T>& sae, int layer,
                      const TaskInstance& instance);

    double value(const std::vector<T>& f) override;
    std::vector<T> grad(const std::vector<T>& f) override;

    /// Features recorded at the final position of the spliced clean/patch
    /// runs (no override).
    const std::vector<T>& f_clean() const { return f_clean_; }
    const std::vector<T>& f_patch() const { return f_patch_; }

  private:
    const DeskParams<T>& model_;
    const SaeParams<T>& sae_;
    int layer_;
    std::vector<std::uint32_t> x_clean_;
    AnswerLogitDiff<T> metric_;
    std::vector<T> f_clean_;
    std::vector<T> f_patch_;
};

// Estimator cores, shared by the production ops and the closed-form tests.

/// m(f_clean with feature i set to f_patch[i]) - m(f_clean).
template <class T>
double exact_ie_feature(FeatureMetric<T>& metric, const std::vector<T>& f_clean,
                        const std::vector<T>& f_patch, int feature);

/// grad m at f_clean, elementwise times (f_patch - f_clean).
template <class T>
std::vector<double> atp_ie_vec(FeatureMetric<T>& metric, const std::vector<T>& f_clean,
                               const std::vector<T>& f_patch);

/// Sum over alpha in {0, 1/N, ..., (N-1)/N} of grad m at
/// alpha*f_clean + (1-alpha)*f_patch, times (f_patch - f_clean); divided by
/// N when `averaged` (the standard estimator; the as-printed form keeps the
/// raw sum).
template <class T>
std::vector<double> ig_ie_vec(FeatureMetric<T>& metric, const std::vector<T>& f_clean,
                              const std::vector<T>& f_patch, int n_steps, bool averaged);

// Production wrappers on the desk model.
double exact_ie(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                const TaskInstance& instance, int feature);
std::vector<double> atp_ie(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                           const TaskInstance& instance);
std::vector<double> ig_ie(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                          const TaskInstance& instance, int n_steps, bool averaged = true);

enum class SelectionRule { top_fraction, top_count };

struct FeatureSelection {
    std::vector<int> indices;
    std::string criterion;
};

/// Ranks active features by |IE| (ties to the lower index) and keeps the top
/// fraction or count. `active[i]` marks features with f_clean != 0 on at
/// least one task instance.
FeatureSelection select_features(const std::vector<double>& ie, const std::vector<bool>& active,
                                 SelectionRule rule, double fraction, int count,
                                 bool use_absolute = true);

/// Per-feature mean of f over the clean runs of the task set, read at the
/// final position under the SAE splice.
std::vector<float> mean_feature_activations(const DeskParams<float>& model,
                                            const SaeParams<float>& sae, int layer,
                                            const TaskSet& tasks);

/// Everything faithfulness/completeness sweeps reuse for one
/// (model, sae, layer, task set) tuple.
struct TaskAblationContext {
    std::vector<std::vector<float>> f_clean; // per instance, at final position
    std::vector<float> mean_f;
    std::vector<bool> active;
    double m_model = 0; // task-mean metric, clean model
    double m_empty = 0; // task-mean metric, all features mean-ablated
    std::vector<double> m_model_per_instance;
    std::vector<double> m_empty_per_instance;

    static TaskAblationContext build(const DeskParams<float>& model, const SaeParams<float>& sae,
                                     int layer, const TaskSet& tasks);
};

/// (m(C) - m(empty)) / (m(M) - m(empty)) with selected features live and the
/// rest mean-ablated.
double faithfulness(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                    const TaskSet& tasks, const FeatureSelection& selection,
                    const TaskAblationContext& ctx);

/// Same ratio with the selected features mean-ablated and the rest live.
double completeness(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                    const TaskSet& tasks, const FeatureSelection& selection,
                    const TaskAblationContext& ctx);

} // namespace saeg
