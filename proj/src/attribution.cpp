#include "saeg/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "saeg/error.hpp"

namespace saeg {

namespace {

template <class T>
std::vector<T> recorded_features(const DeskParams<T>& model, const SaeParams<T>& sae, int layer,
                                 std::span<const std::uint32_t> tokens) {
    SpliceSpec<T> splice;
    splice.layers = {layer};
    splice.mode = SpliceMode::sae_reconstruction;
    const auto out = forward_spliced(model, tokens, splice, &sae);
    const Mat<T>& f = out.features.at(layer);
    const idx last = f.rows() - 1;
    return std::vector<T>(f.row(last), f.row(last) + f.cols());
}

// One spliced run of x_clean with the final-position feature vector replaced.
double spliced_metric_value(const DeskParams<float>& model, const SaeParams<float>& sae,
                            int layer, const TaskInstance& inst, const std::vector<float>& f) {
    SpliceSpec<float> splice;
    splice.layers = {layer};
    splice.mode = SpliceMode::feature_override;
    splice.override_full = f;
    const auto out = forward_spliced(model, inst.x_clean, splice, &sae);
    return AnswerLogitDiff<float>(inst.a_clean, inst.a_patch).value(out.logits);
}

} // namespace

template <class T>
SplicedTaskMetric<T>::SplicedTaskMetric(const DeskParams<T>& model, const SaeParams<T>& sae,
                                        int layer, const TaskInstance& instance)
    : model_(model), sae_(sae), layer_(layer),
      x_clean_(instance.x_clean),
      metric_(instance.a_clean, instance.a_patch) {
    f_clean_ = recorded_features(model, sae, layer, instance.x_clean);
    f_patch_ = recorded_features(model, sae, layer, instance.x_patch);
}

template <class T>
double SplicedTaskMetric<T>::value(const std::vector<T>& f) {
    SpliceSpec<T> splice;
    splice.layers = {layer_};
    splice.mode = SpliceMode::feature_override;
    splice.override_full = f;
    const auto out = forward_spliced(model_, x_clean_, splice, &sae_);
    return metric_.value(out.logits);
}

template <class T>
std::vector<T> SplicedTaskMetric<T>::grad(const std::vector<T>& f) {
    const auto res = grad_wrt_features(model_, x_clean_, sae_, layer_, metric_, &f);
    return res.grad;
}

template <class T>
double exact_ie_feature(FeatureMetric<T>& metric, const std::vector<T>& f_clean,
                        const std::vector<T>& f_patch, int feature) {
    if (feature < 0 || feature >= static_cast<int>(f_clean.size())) {
        throw ConfigError("exact_ie: feature index out of range");
    }
    std::vector<T> intervened = f_clean;
    intervened[static_cast<std::size_t>(feature)] = f_patch[static_cast<std::size_t>(feature)];
    return metric.value(intervened) - metric.value(f_clean);
}

template <class T>
std::vector<double> atp_ie_vec(FeatureMetric<T>& metric, const std::vector<T>& f_clean,
                               const std::vector<T>& f_patch) {
    if (f_clean.size() != f_patch.size()) {
        throw ShapeError("atp_ie: feature vector sizes differ");
    }
    const std::vector<T> g = metric.grad(f_clean);
    std::vector<double> ie(f_clean.size(), 0.0);
    for (std::size_t i = 0; i < ie.size(); ++i) {
        ie[i] = static_cast<double>(g[i]) *
                (static_cast<double>(f_patch[i]) - static_cast<double>(f_clean[i]));
    }
    return ie;
}

template <class T>
std::vector<double> ig_ie_vec(FeatureMetric<T>& metric, const std::vector<T>& f_clean,
                              const std::vector<T>& f_patch, int n_steps, bool averaged) {
    if (n_steps < 1) {
        throw ConfigError("ig_ie: N must be >= 1");
    }
    if (f_clean.size() != f_patch.size()) {
        throw ShapeError("ig_ie: feature vector sizes differ");
    }
    std::vector<double> grad_sum(f_clean.size(), 0.0);
    std::vector<T> point(f_clean.size());
    for (int s = 0; s < n_steps; ++s) {
        const double alpha = static_cast<double>(s) / static_cast<double>(n_steps);
        for (std::size_t i = 0; i < point.size(); ++i) {
            point[i] = static_cast<T>(alpha * static_cast<double>(f_clean[i]) +
                                      (1.0 - alpha) * static_cast<double>(f_patch[i]));
        }
        const std::vector<T> g = metric.grad(point);
        for (std::size_t i = 0; i < grad_sum.size(); ++i) {
            grad_sum[i] += static_cast<double>(g[i]);
        }
    }
    std::vector<double> ie(f_clean.size(), 0.0);
    const double norm = averaged ? 1.0 / static_cast<double>(n_steps) : 1.0;
    for (std::size_t i = 0; i < ie.size(); ++i) {
        ie[i] = grad_sum[i] * norm *
                (static_cast<double>(f_patch[i]) - static_cast<double>(f_clean[i]));
    }
    return ie;
}

double exact_ie(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                const TaskInstance& instance, int feature) {
    SplicedTaskMetric<float> metric(model, sae, layer, instance);
    return exact_ie_feature(metric, metric.f_clean(), metric.f_patch(), feature);
}

std::vector<double> atp_ie(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                           const TaskInstance& instance) {
    SplicedTaskMetric<float> metric(model, sae, layer, instance);
    return atp_ie_vec(metric, metric.f_clean(), metric.f_patch());
}

std::vector<double> ig_ie(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                          const TaskInstance& instance, int n_steps, bool averaged) {
    SplicedTaskMetric<float> metric(model, sae, layer, instance);
    return ig_ie_vec(metric, metric.f_clean(), metric.f_patch(), n_steps, averaged);
}

FeatureSelection select_features(const std::vector<double>& ie, const std::vector<bool>& active,
                                 SelectionRule rule, double fraction, int count,
                                 bool use_absolute) {
    if (ie.size() != active.size()) {
        throw ShapeError("select_features: ie and activity mask sizes differ");
    }
    std::vector<int> candidates;
    for (std::size_t i = 0; i < active.size(); ++i) {
        if (active[i]) {
            candidates.push_back(static_cast<int>(i));
        }
    }
    auto score = [&](int i) {
        const double v = ie[static_cast<std::size_t>(i)];
        return use_absolute ? std::abs(v) : v;
    };
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
        const double sa = score(a), sb = score(b);
        if (sa != sb) {
            return sa > sb;
        }
        return a < b;
    });
    std::size_t keep = 0;
    FeatureSelection sel;
    if (rule == SelectionRule::top_fraction) {
        if (fraction < 0.0 || fraction > 1.0) {
            throw ConfigError("select_features: fraction out of [0,1]");
        }
        keep = static_cast<std::size_t>(
            std::floor(fraction * static_cast<double>(candidates.size()) + 0.5));
        sel.criterion = "top_fraction=" + std::to_string(fraction);
    } else {
        if (count < 0) {
            throw ConfigError("select_features: count must be >= 0");
        }
        keep = std::min<std::size_t>(static_cast<std::size_t>(count), candidates.size());
        sel.criterion = "top_count=" + std::to_string(count);
    }
    keep = std::min(keep, candidates.size());
    sel.indices.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep));
    return sel;
}

std::vector<float> mean_feature_activations(const DeskParams<float>& model,
                                            const SaeParams<float>& sae, int layer,
                                            const TaskSet& tasks) {
    if (tasks.instances.empty()) {
        throw ConfigError("mean_feature_activations: empty task set");
    }
    std::vector<double> acc(static_cast<std::size_t>(sae.d_sae), 0.0);
    for (const auto& inst : tasks.instances) {
        const auto f = recorded_features(model, sae, layer, inst.x_clean);
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i] += static_cast<double>(f[i]);
        }
    }
    std::vector<float> mean(acc.size());
    const double inv = 1.0 / static_cast<double>(tasks.instances.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
        mean[i] = static_cast<float>(acc[i] * inv);
    }
    return mean;
}

TaskAblationContext TaskAblationContext::build(const DeskParams<float>& model,
                                               const SaeParams<float>& sae, int layer,
                                               const TaskSet& tasks) {
    if (tasks.instances.empty()) {
        throw ConfigError("TaskAblationContext: empty task set");
    }
    TaskAblationContext ctx;
    ctx.active.assign(static_cast<std::size_t>(sae.d_sae), false);
    std::vector<double> acc(static_cast<std::size_t>(sae.d_sae), 0.0);
    for (const auto& inst : tasks.instances) {
        auto f = recorded_features(model, sae, layer, inst.x_clean);
        for (std::size_t i = 0; i < f.size(); ++i) {
            acc[i] += static_cast<double>(f[i]);
            if (f[i] != 0.0f) {
                ctx.active[i] = true;
            }
        }
        ctx.f_clean.push_back(std::move(f));

        const auto clean = forward(model, inst.x_clean);
        ctx.m_model_per_instance.push_back(
            AnswerLogitDiff<float>(inst.a_clean, inst.a_patch).value(clean.logits));
    }
    ctx.mean_f.resize(acc.size());
    const double inv = 1.0 / static_cast<double>(tasks.instances.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
        ctx.mean_f[i] = static_cast<float>(acc[i] * inv);
    }
    for (const auto& inst : tasks.instances) {
        ctx.m_empty_per_instance.push_back(spliced_metric_value(model, sae, layer, inst, ctx.mean_f));
    }
    double m_model_sum = 0.0, m_empty_sum = 0.0;
    for (std::size_t n = 0; n < tasks.instances.size(); ++n) {
        m_model_sum += ctx.m_model_per_instance[n];
        m_empty_sum += ctx.m_empty_per_instance[n];
    }
    ctx.m_model = m_model_sum * inv;
    ctx.m_empty = m_empty_sum * inv;
    return ctx;
}

namespace {

double ablation_ratio(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                      const TaskSet& tasks, const TaskAblationContext& ctx,
                      const std::vector<int>& live_overrides, bool live_is_selection) {
    // live_is_selection: selected features take their per-instance clean
    // values on top of the mean vector (faithfulness); otherwise selected
    // features take the mean on top of the clean vector (completeness).
    double m_c_sum = 0.0;
    for (std::size_t n = 0; n < tasks.instances.size(); ++n) {
        std::vector<float> f_eval;
        if (live_is_selection) {
            f_eval = ctx.mean_f;
            for (int i : live_overrides) {
                f_eval[static_cast<std::size_t>(i)] = ctx.f_clean[n][static_cast<std::size_t>(i)];
            }
        } else {
            f_eval = ctx.f_clean[n];
            for (int i : live_overrides) {
                f_eval[static_cast<std::size_t>(i)] = ctx.mean_f[static_cast<std::size_t>(i)];
            }
        }
        m_c_sum += spliced_metric_value(model, sae, layer, tasks.instances[n], f_eval);
    }
    const double m_c = m_c_sum / static_cast<double>(tasks.instances.size());
    const double den = ctx.m_model - ctx.m_empty;
    if (std::abs(den) < 1e-12) {
        throw NumericError("faithfulness/completeness: degenerate denominator (m(M) = m(empty))");
    }
    return (m_c - ctx.m_empty) / den;
}

} // namespace

double faithfulness(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                    const TaskSet& tasks, const FeatureSelection& selection,
                    const TaskAblationContext& ctx) {
    return ablation_ratio(model, sae, layer, tasks, ctx, selection.indices, true);
}

double completeness(const DeskParams<float>& model, const SaeParams<float>& sae, int layer,
                    const TaskSet& tasks, const FeatureSelection& selection,
                    const TaskAblationContext& ctx) {
    return ablation_ratio(model, sae, layer, tasks, ctx, selection.indices, false);
}

template class SplicedTaskMetric<float>;
template class SplicedTaskMetric<double>;
template double exact_ie_feature(FeatureMetric<float>&, const std::vector<float>&,
                                 const std::vector<float>&, int);
template double exact_ie_feature(FeatureMetric<double>&, const std::vector<double>&,
                                 const std::vector<double>&, int);
template std::vector<double> atp_ie_vec(FeatureMetric<float>&, const std::vector<float>&,
                                        const std::vector<float>&);
template std::vector<double> atp_ie_vec(FeatureMetric<double>&, const std::vector<double>&,
                                        const std::vector<double>&);
template std::vector<double> ig_ie_vec(FeatureMetric<float>&, const std::vector<float>&,
                                       const std::vector<float>&, int, bool);
template std::vector<double> ig_ie_vec(FeatureMetric<double>&, const std::vector<double>&,
                                       const std::vector<double>&, int, bool);

} // namespace saeg
