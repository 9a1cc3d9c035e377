#include "saeg/evaluation.hpp"

#include <cmath>

#include "saeg/error.hpp"

namespace saeg {

template <class T>
double r_squared(const Mat<T>& x, const Mat<T>& xhat, std::span<const double> mu) {
    if (!x.same_shape(xhat)) {
        throw ShapeError("r_squared: x and xhat shapes differ");
    }
    if (static_cast<idx>(mu.size()) != x.cols()) {
        throw ShapeError("r_squared: mean width mismatch");
    }
    double num = 0.0, den = 0.0;
    for (idx r = 0; r < x.rows(); ++r) {
        const T* xr = x.row(r);
        const T* hr = xhat.row(r);
        for (idx c = 0; c < x.cols(); ++c) {
            const double dn = static_cast<double>(xr[c]) - static_cast<double>(hr[c]);
            num += dn * dn;
            const double dd = static_cast<double>(xr[c]) - mu[static_cast<std::size_t>(c)];
            den += dd * dd;
        }
    }
    if (den == 0.0) {
        throw NumericError("r_squared: constant data (zero variance around mu)");
    }
    return 1.0 - num / den;
}

template <class T>
double l0_sparsity(const Mat<T>& f) {
    if (f.rows() == 0) {
        return 0.0;
    }
    double count = 0.0;
    for (idx r = 0; r < f.rows(); ++r) {
        const T* fr = f.row(r);
        for (idx c = 0; c < f.cols(); ++c) {
            if (fr[c] != T{0}) {
                count += 1.0;
            }
        }
    }
    return count / static_cast<double>(f.rows());
}

double mmcs(const SaeParams<float>& a, const SaeParams<float>& b) {
    if (a.d != b.d) {
        throw ShapeError("mmcs: decoder input dimensions differ");
    }
    auto column_norms = [](const SaeParams<float>& s) {
        std::vector<double> norms(static_cast<std::size_t>(s.d_sae), 0.0);
        for (int r = 0; r < s.d; ++r) {
            const float* row = s.w_dec.row(r);
            for (int c = 0; c < s.d_sae; ++c) {
                norms[static_cast<std::size_t>(c)] +=
                    static_cast<double>(row[c]) * static_cast<double>(row[c]);
            }
        }
        for (std::size_t c = 0; c < norms.size(); ++c) {
            if (norms[c] == 0.0) {
                throw NumericError("mmcs: zero decoder column " + std::to_string(c));
            }
            norms[c] = std::sqrt(norms[c]);
        }
        return norms;
    };
    const auto na = column_norms(a);
    const auto nb = column_norms(b);
    double total = 0.0;
    for (int u = 0; u < a.d_sae; ++u) {
        double best = -1.0;
        for (int v = 0; v < b.d_sae; ++v) {
            double dot = 0.0;
            for (int r = 0; r < a.d; ++r) {
                dot += static_cast<double>(a.w_dec(r, u)) * static_cast<double>(b.w_dec(r, v));
            }
            const double cosine = dot / (na[static_cast<std::size_t>(u)] *
                                         nb[static_cast<std::size_t>(v)]);
            best = std::max(best, cosine);
        }
        total += best;
    }
    return total / static_cast<double>(a.d_sae);
}

namespace {

struct CeTriple {
    double clean_sum = 0; // per-position CE sums
    double spliced_sum = 0;
    double zero_sum = 0;
    std::uint64_t positions = 0;
};

void accumulate_ce(const DeskParams<float>& model, std::span<const std::uint32_t> seq,
                   const SaeParams<float>& sae, int layer, CeTriple& acc) {
    if (seq.size() < 2) {
        throw DataError("ce_loss_score: sequence shorter than 2 tokens");
    }
    const std::span<const std::uint32_t> inputs(seq.data(), seq.size() - 1);
    const std::span<const std::uint32_t> targets(seq.data() + 1, seq.size() - 1);
    const auto n = static_cast<double>(targets.size());

    const auto clean = forward(model, inputs);
    acc.clean_sum += cross_entropy(clean.logits, targets) * n;

    SpliceSpec<float> recon;
    recon.layers = {layer};
    recon.mode = SpliceMode::sae_reconstruction;
    const auto spliced = forward_spliced(model, inputs, recon, &sae);
    acc.spliced_sum += cross_entropy(spliced.logits, targets) * n;

    SpliceSpec<float> zero;
    zero.layers = {layer};
    zero.mode = SpliceMode::zero_ablation;
    const auto ablated = forward_spliced<float>(model, inputs, zero, nullptr);
    acc.zero_sum += cross_entropy(ablated.logits, targets) * n;

    acc.positions += targets.size();
}

double cels_from(const CeTriple& acc) {
    const auto n = static_cast<double>(acc.positions);
    const double ce_clean = acc.clean_sum / n;
    const double ce_spliced = acc.spliced_sum / n;
    const double ce_zero = acc.zero_sum / n;
    const double den = ce_zero - ce_clean;
    if (std::abs(den) < 1e-12) {
        throw NumericError("ce_loss_score: zero-ablated CE equals clean CE");
    }
    return (ce_zero - ce_spliced) / den;
}

} // namespace

double ce_loss_score(const DeskParams<float>& model, std::span<const std::uint32_t> tokens,
                     const SaeParams<float>& sae, int layer) {
    CeTriple acc;
    accumulate_ce(model, tokens, sae, layer, acc);
    return cels_from(acc);
}

double ce_loss_score_sequences(const DeskParams<float>& model,
                               const std::vector<std::vector<std::uint32_t>>& sequences,
                               const SaeParams<float>& sae, int layer) {
    if (sequences.empty()) {
        throw DataError("ce_loss_score_sequences: no sequences");
    }
    CeTriple acc;
    for (const auto& seq : sequences) {
        accumulate_ce(model, seq, sae, layer, acc);
    }
    return cels_from(acc);
}

std::vector<ReconReport> evaluate_sae(const DeskParams<float>& model,
                                      const ActivationDataset& heldout,
                                      const std::vector<std::vector<std::uint32_t>>& sequences,
                                      const SaeParams<float>& sae, const std::vector<int>& layers,
                                      std::uint64_t n_rows,
                                      const std::vector<std::vector<double>>& train_means) {
    if (layers.empty()) {
        throw ConfigError("evaluate_sae: empty layer set");
    }
    if (train_means.size() != layers.size()) {
        throw ShapeError("evaluate_sae: one train mean per layer required");
    }
    std::vector<ReconReport> reports;
    reports.reserve(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const int layer = layers[i];
        const MatF& all_rows = heldout.rows(layer);
        if (static_cast<std::uint64_t>(all_rows.rows()) < n_rows) {
            throw DataError("evaluate_sae: layer " + std::to_string(layer) + " has " +
                            std::to_string(all_rows.rows()) + " held-out rows, need " +
                            std::to_string(n_rows));
        }
        MatF x(static_cast<idx>(n_rows), all_rows.cols());
        std::copy_n(all_rows.data(), x.size(), x.data());
        const MatF f = encode(sae, x);
        const MatF xhat = decode(sae, f);

        ReconReport rep;
        rep.layer = layer;
        rep.n_examples = n_rows;
        double l2 = 0.0;
        for (idx r = 0; r < x.rows(); ++r) {
            const float* xr = x.row(r);
            const float* hr = xhat.row(r);
            for (idx c = 0; c < x.cols(); ++c) {
                const double d = static_cast<double>(xr[c]) - static_cast<double>(hr[c]);
                l2 += d * d;
            }
        }
        rep.l2 = l2 / static_cast<double>(n_rows);
        rep.r2 = r_squared(x, xhat, train_means[i]);
        rep.l0 = l0_sparsity(f);
        rep.cels = ce_loss_score_sequences(model, sequences, sae, layer);
        reports.push_back(std::move(rep));
    }
    return reports;
}

template double r_squared(const MatF&, const MatF&, std::span<const double>);
template double r_squared(const MatD&, const MatD&, std::span<const double>);
template double l0_sparsity(const MatF&);
template double l0_sparsity(const MatD&);

} // namespace saeg
