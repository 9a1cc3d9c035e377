#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "saeg/error.hpp"
#include "saeg/evaluation.hpp"
#include "saeg/rng.hpp"

using namespace saeg;

namespace {

DeskConfig tiny_config(std::uint64_t seed = 7) {
    DeskConfig cfg;
    cfg.n_layers = 3;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.vocab = 32;
    cfg.context = 8;
    cfg.seed = seed;
    return cfg;
}

template <class T>
SaeParams<T> random_sae(int d, int expansion, std::uint64_t seed) {
    auto sae = SaeParams<T>::sized(d, expansion);
    RngStream rng(seed);
    for (idx i = 0; i < sae.w_enc.size(); ++i) {
        sae.w_enc.data()[i] = static_cast<T>(rng.normal() * 0.5);
    }
    for (idx i = 0; i < sae.w_dec.size(); ++i) {
        sae.w_dec.data()[i] = static_cast<T>(rng.normal() * 0.5);
    }
    for (auto& v : sae.theta) {
        v = static_cast<T>(0.02);
    }
    return sae;
}

MatF random_rows(idx n, int d, std::uint64_t seed) {
    MatF x(n, d);
    RngStream rng(seed);
    for (idx i = 0; i < x.size(); ++i) {
        x.data()[i] = static_cast<float>(rng.normal());
    }
    return x;
}

} // namespace

TEST_CASE("r_squared identities and error cases") {
    // exactness claims hold in the 64-bit path, where xhat == mu bit-for-bit
    MatD x(16, 4);
    RngStream rng(3);
    for (idx i = 0; i < x.size(); ++i) {
        x.data()[i] = rng.normal();
    }
    std::vector<double> mu(4, 0.0);
    for (idx r = 0; r < x.rows(); ++r) {
        for (int c = 0; c < 4; ++c) {
            mu[static_cast<std::size_t>(c)] += x(r, c);
        }
    }
    for (auto& v : mu) {
        v /= 16.0;
    }

    CHECK(r_squared(x, x, mu) == 1.0); // zero numerator, exact

    MatD mean_pred(16, 4);
    for (idx r = 0; r < 16; ++r) {
        for (int c = 0; c < 4; ++c) {
            mean_pred(r, c) = mu[static_cast<std::size_t>(c)];
        }
    }
    CHECK(r_squared(x, mean_pred, mu) == 0.0); // numerator equals denominator exactly

    // a predictor worse than the mean goes negative
    MatD bad(16, 4);
    for (idx r = 0; r < 16; ++r) {
        for (int c = 0; c < 4; ++c) {
            bad(r, c) = mu[static_cast<std::size_t>(c)] + 10.0;
        }
    }
    CHECK(r_squared(x, bad, mu) < 0.0);

    // constant data: zero denominator
    MatD constant(4, 2);
    constant.fill(2.5);
    const std::vector<double> cmu = {2.5, 2.5};
    CHECK_THROWS_AS(r_squared(constant, constant, cmu), NumericError);
}

TEST_CASE("r_squared is shift invariant in 64-bit") {
    MatD x(8, 3), xhat(8, 3);
    RngStream rng(11);
    for (idx i = 0; i < x.size(); ++i) {
        x.data()[i] = rng.normal();
        xhat.data()[i] = rng.normal();
    }
    std::vector<double> mu = {0.1, -0.4, 0.7};
    const double base = r_squared(x, xhat, mu);

    MatD xs = x, hs = xhat;
    std::vector<double> ms = mu;
    const double shift = 3.25; // exactly representable, keeps differences bit-identical
    for (idx i = 0; i < xs.size(); ++i) {
        xs.data()[i] += shift;
        hs.data()[i] += shift;
    }
    for (auto& v : ms) {
        v += shift;
    }
    CHECK(std::abs(r_squared(xs, hs, ms) - base) < 1e-12);
}

TEST_CASE("l0 counts exact zeros and is scale invariant") {
    MatF f(2, 4);
    CHECK(l0_sparsity(f) == 0.0);
    f.fill(0.5f);
    CHECK(l0_sparsity(f) == 4.0);

    MatF mixed(2, 4);
    mixed(0, 1) = 1.0f; // one active in row 0
    mixed(1, 0) = 2.0f;
    mixed(1, 2) = -3.0f;
    mixed(1, 3) = 0.25f; // three active in row 1
    CHECK(l0_sparsity(mixed) == 2.0);

    MatF scaled = mixed;
    for (idx i = 0; i < scaled.size(); ++i) {
        scaled.data()[i] *= 17.5f;
    }
    CHECK(l0_sparsity(scaled) == l0_sparsity(mixed));
}

TEST_CASE("mmcs identities, hand case and invariances") {
    auto a = random_sae<float>(6, 2, 21);
    // normalize decoder columns so the self-match is exactly cosine 1
    renormalize_decoder<float>(a, nullptr);
    CHECK(mmcs(a, a) == doctest::Approx(1.0).epsilon(1e-6));

    // orthogonal decoders: a uses e0..e3, b uses e4..e5 directions
    auto ortho_a = SaeParams<float>::sized(6, 1);
    auto ortho_b = SaeParams<float>::sized(6, 1);
    for (int c = 0; c < 6; ++c) {
        ortho_a.w_dec((c * 7) % 3, c) = 1.0f; // spans coords 0..2
        ortho_b.w_dec(3 + (c % 3), c) = 1.0f; // spans coords 3..5
    }
    CHECK(mmcs(ortho_a, ortho_b) == doctest::Approx(0.0).epsilon(1e-9));

    // 2-feature hand case: a0 = e0; a1 = (e0+e1)/sqrt2; b0 = e0, b1 = e1.
    auto ha = SaeParams<float>::sized(2, 1);
    ha.w_dec(0, 0) = 1.0f;
    ha.w_dec(0, 1) = static_cast<float>(1.0 / std::sqrt(2.0));
    ha.w_dec(1, 1) = static_cast<float>(1.0 / std::sqrt(2.0));
    auto hb = SaeParams<float>::sized(2, 1);
    hb.w_dec(0, 0) = 1.0f;
    hb.w_dec(1, 1) = 1.0f;
    // max cos for a0 is 1 (vs b0); for a1 it is 1/sqrt2 (either column)
    CHECK(mmcs(ha, hb) == doctest::Approx((1.0 + 1.0 / std::sqrt(2.0)) / 2.0).epsilon(1e-6));

    // permutation + positive rescaling of b's columns leaves mmcs unchanged
    auto b = random_sae<float>(6, 2, 22);
    const double base = mmcs(a, b);
    auto b_shuffled = b;
    RngStream rng(5);
    for (int c = 0; c < b.d_sae; ++c) {
        const int src = (c + 5) % b.d_sae;
        const auto scale = static_cast<float>(0.1 + 4.0 * rng.uniform01());
        for (int r = 0; r < b.d; ++r) {
            b_shuffled.w_dec(r, c) = b.w_dec(r, src) * scale;
        }
    }
    CHECK(mmcs(a, b_shuffled) == doctest::Approx(base).epsilon(1e-6));

    auto wrong = random_sae<float>(4, 2, 23);
    CHECK_THROWS_AS(mmcs(a, wrong), ShapeError);
}

TEST_CASE("ce loss score: identity, zero output and three-run recomputation") {
    const auto model = init_desk_model<float>(tiny_config());
    const std::vector<std::uint32_t> tokens = {1, 5, 9, 2, 7, 3};
    const int layer = 1;

    const auto identity = identity_sae<float>(model.cfg.d_model);
    CHECK(ce_loss_score(model, tokens, identity, layer) == doctest::Approx(1.0).epsilon(1e-6));

    // an SAE that reconstructs exactly zero scores 0 (equals the ablated run)
    auto zero_out = SaeParams<float>::sized(model.cfg.d_model, 1);
    CHECK(ce_loss_score(model, tokens, zero_out, layer) == doctest::Approx(0.0).epsilon(1e-6));

    // mid-quality SAE: in (0,1) when it beats ablation, and either way it
    // must match an independent three-run recomputation
    const auto sae = random_sae<float>(model.cfg.d_model, 2, 31);
    const double score = ce_loss_score(model, tokens, sae, layer);
    const std::span<const std::uint32_t> inputs(tokens.data(), tokens.size() - 1);
    const std::span<const std::uint32_t> targets(tokens.data() + 1, tokens.size() - 1);
    const double ce_clean = cross_entropy(forward(model, inputs).logits, targets);
    SpliceSpec<float> recon;
    recon.layers = {layer};
    recon.mode = SpliceMode::sae_reconstruction;
    const double ce_sae =
        cross_entropy(forward_spliced(model, inputs, recon, &sae).logits, targets);
    SpliceSpec<float> zero;
    zero.layers = {layer};
    zero.mode = SpliceMode::zero_ablation;
    const double ce_zero =
        cross_entropy(forward_spliced<float>(model, inputs, zero, nullptr).logits, targets);
    CHECK(score == doctest::Approx((ce_zero - ce_sae) / (ce_zero - ce_clean)).epsilon(1e-9));
}

TEST_CASE("ce loss score rejects a degenerate denominator") {
    // all-zero unembedding: every run yields identical (uniform) logits
    auto model = DeskParams<float>::sized(tiny_config());
    const std::vector<std::uint32_t> tokens = {1, 2, 3, 4};
    const auto sae = identity_sae<float>(model.cfg.d_model);
    CHECK_THROWS_AS(ce_loss_score(model, tokens, sae, 0), NumericError);
}

TEST_CASE("evaluate_sae emits one deterministic report per layer") {
    const auto model = init_desk_model<float>(tiny_config(9));
    std::map<int, MatF> rows;
    std::vector<std::vector<double>> means;
    const std::vector<int> layers = {0, 1, 2};
    for (int l : layers) {
        rows.emplace(l, random_rows(64, model.cfg.d_model, 100 + static_cast<std::uint64_t>(l)));
    }
    const auto heldout = ActivationDataset::from_rows(std::move(rows));
    for (int l : layers) {
        means.push_back(layer_mean(heldout, l));
    }
    std::vector<std::vector<std::uint32_t>> seqs = {{1, 5, 9, 2, 7, 3}, {2, 8, 1, 1, 6, 4}};
    const auto sae = random_sae<float>(model.cfg.d_model, 2, 55);

    const auto reports = evaluate_sae(model, heldout, seqs, sae, layers, 64, means);
    REQUIRE(reports.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(reports[i].layer == layers[i]);
        CHECK(reports[i].n_examples == 64);
    }
    const auto again = evaluate_sae(model, heldout, seqs, sae, layers, 64, means);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(reports[i].r2 == again[i].r2);
        CHECK(reports[i].cels == again[i].cels);
        CHECK(reports[i].l2 == again[i].l2);
        CHECK(reports[i].l0 == again[i].l0);
    }

    CHECK_THROWS_AS(evaluate_sae(model, heldout, seqs, sae, layers, 65, means), DataError);
}

TEST_CASE("per-layer L2 means aggregate like a pooled computation") {
    // with equal row counts, the mean of per-layer means equals the pooled mean
    const auto model = init_desk_model<float>(tiny_config(13));
    std::map<int, MatF> rows;
    rows.emplace(0, random_rows(32, model.cfg.d_model, 201));
    rows.emplace(1, random_rows(32, model.cfg.d_model, 202));
    const auto heldout = ActivationDataset::from_rows(std::move(rows));
    std::vector<std::vector<double>> means = {layer_mean(heldout, 0), layer_mean(heldout, 1)};
    std::vector<std::vector<std::uint32_t>> seqs = {{1, 5, 9, 2}};
    const auto sae = random_sae<float>(model.cfg.d_model, 2, 66);
    const auto reports = evaluate_sae(model, heldout, seqs, sae, {0, 1}, 32, means);

    double pooled = 0.0;
    for (int l : {0, 1}) {
        const MatF& x = heldout.rows(l);
        const MatF xhat = decode(sae, encode(sae, x));
        for (idx i = 0; i < x.size(); ++i) {
            const double d = static_cast<double>(x.data()[i]) -
                             static_cast<double>(xhat.data()[i]);
            pooled += d * d;
        }
    }
    pooled /= 64.0;
    CHECK((reports[0].l2 + reports[1].l2) / 2.0 == doctest::Approx(pooled).epsilon(1e-9));
}
