#include "saeg/sae_train.hpp"

#include <cmath>
#include <string>

#include "saeg/adam.hpp"
#include "saeg/error.hpp"
#include "saeg/io.hpp"

namespace saeg {

void SaeTrainConfig::validate() const {
    if (expansion <= 0 || batch <= 0) {
        throw ConfigError("SaeTrainConfig: expansion and batch must be > 0");
    }
    if (!(lambda >= 0.0) || !(lr > 0.0)) {
        throw ConfigError("SaeTrainConfig: lambda must be >= 0 and lr > 0");
    }
    if (l1_warmup_frac < 0.0 || l1_warmup_frac > 1.0 || lr_decay_frac < 0.0 ||
        lr_decay_frac > 1.0) {
        throw ConfigError("SaeTrainConfig: schedule fractions must lie in [0,1]");
    }
    if (theta_init < 0.0 || ste_bandwidth < 0.0) {
        throw ConfigError("SaeTrainConfig: theta_init and ste_bandwidth must be >= 0");
    }
}

std::pair<double, double> schedule_at(const SaeTrainConfig& cfg, std::uint64_t step) {
    const std::uint64_t total = cfg.total_steps();
    if (step >= total) {
        throw ConfigError("schedule_at: step " + std::to_string(step) + " out of range 0.." +
                          std::to_string(total));
    }
    const auto warmup = static_cast<std::uint64_t>(
        std::max<double>(1.0, std::floor(cfg.l1_warmup_frac * static_cast<double>(total))));
    const double lambda_t =
        cfg.lambda * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup));

    const auto decay = static_cast<std::uint64_t>(
        std::floor(cfg.lr_decay_frac * static_cast<double>(total)));
    double lr_t = cfg.lr;
    if (decay > 0 && step >= total - decay) {
        lr_t = cfg.lr * static_cast<double>(total - step) / static_cast<double>(decay);
    }
    return {lr_t, lambda_t};
}

void TrainLog::save_csv(const std::filesystem::path& path) const {
    CsvWriter csv({"step", "recon", "l1", "l0", "lr_t", "lambda_t"});
    for (const auto& r : rows) {
        csv.add_row({std::to_string(r.step), format_g17(r.recon), format_g17(r.l1),
                     format_g17(r.l0), format_g17(r.lr_t), format_g17(r.lambda_t)});
    }
    csv.write(path);
}

std::pair<SaeParams<float>, TrainLog> train_sae(const ActivationDataset& dataset,
                                                const std::vector<int>& group_layers,
                                                const SaeTrainConfig& cfg,
                                                const SaeObserver& observer) {
    cfg.validate();
    if (group_layers.empty()) {
        throw ConfigError("train_sae: empty layer group");
    }
    for (int layer : group_layers) {
        if (!dataset.has_layer(layer)) {
            throw ConfigError("train_sae: dataset does not cover layer " + std::to_string(layer));
        }
    }
    const int d = dataset.d_model();
    SaeParams<float> sae = SaeParams<float>::sized(d, cfg.expansion, cfg.mode);
    sae.seed = cfg.seed;

    // b_dec: pooled mean of the sampling distribution (row-count weighted).
    {
        std::vector<double> pooled(static_cast<std::size_t>(d), 0.0);
        std::uint64_t total_rows = 0;
        for (int layer : group_layers) {
            const auto mean = layer_mean(dataset, layer);
            const auto rows = static_cast<std::uint64_t>(dataset.rows(layer).rows());
            for (int c = 0; c < d; ++c) {
                pooled[static_cast<std::size_t>(c)] +=
                    mean[static_cast<std::size_t>(c)] * static_cast<double>(rows);
            }
            total_rows += rows;
        }
        for (int c = 0; c < d; ++c) {
            sae.b_dec[static_cast<std::size_t>(c)] = static_cast<float>(
                pooled[static_cast<std::size_t>(c)] / static_cast<double>(total_rows));
        }
    }

    RngStream init_rng(cfg.seed);
    const auto enc_scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
    for (idx i = 0; i < sae.w_enc.size(); ++i) {
        sae.w_enc.data()[i] = static_cast<float>(init_rng.normal()) * enc_scale;
    }
    std::fill(sae.theta.begin(), sae.theta.end(), static_cast<float>(cfg.theta_init));
    // w_dec stays zero; the unit-norm constraint engages once columns move.

    auto w_enc_state = AdamState<float>::like(static_cast<std::size_t>(sae.w_enc.size()),
                                              static_cast<float>(cfg.beta1),
                                              static_cast<float>(cfg.beta2),
                                              static_cast<float>(cfg.adam_eps));
    auto b_enc_state = AdamState<float>::like(sae.b_enc.size(), static_cast<float>(cfg.beta1),
                                              static_cast<float>(cfg.beta2),
                                              static_cast<float>(cfg.adam_eps));
    auto w_dec_state = AdamState<float>::like(static_cast<std::size_t>(sae.w_dec.size()),
                                              static_cast<float>(cfg.beta1),
                                              static_cast<float>(cfg.beta2),
                                              static_cast<float>(cfg.adam_eps));
    auto b_dec_state = AdamState<float>::like(sae.b_dec.size(), static_cast<float>(cfg.beta1),
                                              static_cast<float>(cfg.beta2),
                                              static_cast<float>(cfg.adam_eps));
    auto theta_state = AdamState<float>::like(sae.theta.size(), static_cast<float>(cfg.beta1),
                                              static_cast<float>(cfg.beta2),
                                              static_cast<float>(cfg.adam_eps));

    BatchSampler sampler(group_layers, cfg.batch, RngStream(cfg.seed ^ 0xb5297a4d3f8c6e21ULL));

    TrainLog log;
    const std::uint64_t total = cfg.total_steps();
    log.rows.reserve(static_cast<std::size_t>(total));
    for (std::uint64_t step = 0; step < total; ++step) {
        const auto [lr_t, lambda_t] = schedule_at(cfg, step);
        const MatF batch = sampler.next(dataset);
        SaeGrads<float> grads =
            sae_grads(sae, batch, lambda_t, static_cast<float>(cfg.ste_bandwidth));
        if (!std::isfinite(grads.loss.total)) {
            throw TrainingError("SAE loss diverged (NaN/Inf) at step " + std::to_string(step));
        }
        renormalize_decoder(sae, &grads, /*skip_zero_columns=*/true);
        const auto lr_f = static_cast<float>(lr_t);
        if (lr_f > 0.0f) {
            adam_step<float>(std::span(sae.w_enc.values()), std::span(grads.w_enc.values()),
                             w_enc_state, lr_f, "w_enc");
            adam_step<float>(std::span(sae.b_enc), std::span(grads.b_enc), b_enc_state, lr_f,
                             "b_enc");
            adam_step<float>(std::span(sae.w_dec.values()), std::span(grads.w_dec.values()),
                             w_dec_state, lr_f, "w_dec");
            adam_step<float>(std::span(sae.b_dec), std::span(grads.b_dec), b_dec_state, lr_f,
                             "b_dec");
            adam_step<float>(std::span(sae.theta), std::span(grads.theta), theta_state, lr_f,
                             "theta");
            for (float& t : sae.theta) {
                if (t < 0.0f) {
                    t = 0.0f; // thresholds stay nonnegative
                }
            }
            // Adam's per-coordinate scaling leaves the update slightly
            // non-tangent, so rescale columns again after the step to keep
            // post-step norms at 1 within rounding.
            renormalize_decoder<float>(sae, nullptr, /*skip_zero_columns=*/true);
        }
        sae.step = step + 1;
        log.rows.push_back({step, grads.loss.recon, grads.loss.l1, grads.loss.l0, lr_t, lambda_t});
        if (cfg.checkpoint_every_steps > 0 && (step + 1) % cfg.checkpoint_every_steps == 0) {
            log.checkpoint_steps.push_back(step + 1);
        }
        if (observer) {
            observer(step, sae);
        }
    }
    return {std::move(sae), std::move(log)};
}

} // namespace saeg
