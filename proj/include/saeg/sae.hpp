#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "saeg/matrix.hpp"

namespace saeg {

// The activation comes in two readings of the same printed formula:
// `heaviside` gates the pre-activation through unchanged when it exceeds the
// threshold (the cited definition; default), `paper_literal` evaluates
// z * relu(z - theta) as printed.
enum class JumpReluMode { heaviside, paper_literal };

std::string to_string(JumpReluMode mode);
JumpReluMode jumprelu_mode_from_string(const std::string& s);

/// Sparse-autoencoder parameters. Conventions: w_enc is (d_sae x d) and
/// w_dec is (d x d_sae); columns of w_dec are the learned feature directions
/// and are kept at unit L2 norm during training. theta >= 0 entrywise.
template <class T>
struct SaeParams {
    int d = 0;
    int d_sae = 0;
    int expansion = 0;
    JumpReluMode mode = JumpReluMode::heaviside;

    Mat<T> w_enc;
    std::vector<T> b_enc;
    Mat<T> w_dec;
    std::vector<T> b_dec;
    std::vector<T> theta;

    std::uint64_t seed = 0;
    std::uint64_t step = 0;

    static SaeParams sized(int d, int expansion, JumpReluMode mode = JumpReluMode::heaviside);
};

template <class T>
std::vector<T> jumprelu(const std::vector<T>& z, const std::vector<T>& theta, JumpReluMode mode);

/// f = sigma(w_enc (x - b_dec) + b_enc), rows of x are independent samples.
template <class T>
Mat<T> encode(const SaeParams<T>& sae, const Mat<T>& x);

/// Pre-activations z = w_enc (x - b_dec) + b_enc (no nonlinearity).
template <class T>
Mat<T> encode_pre(const SaeParams<T>& sae, const Mat<T>& x);

template <class T>
Mat<T> apply_jumprelu(const SaeParams<T>& sae, const Mat<T>& z);

/// x_hat = w_dec f + b_dec.
template <class T>
Mat<T> decode(const SaeParams<T>& sae, const Mat<T>& f);

template <class T>
struct SaeLoss {
    double total = 0;
    double recon = 0; // mean over rows of ||x - x_hat||^2
    double l1 = 0;    // mean over rows of ||f||_1 (unweighted by lambda)
    double l0 = 0;    // mean over rows of #nonzero features
};

template <class T>
SaeLoss<T> sae_loss(const SaeParams<T>& sae, const Mat<T>& x, double lambda);

/// Loss with the jumprelu gate frozen to the pattern of a reference point
/// (finite-difference oracle support; heaviside mode only).
template <class T>
SaeLoss<T> sae_loss_frozen_gate(const SaeParams<T>& sae, const Mat<T>& x, double lambda,
                                const Mat<T>& gate);

template <class T>
struct SaeGrads {
    Mat<T> w_enc;
    std::vector<T> b_enc;
    Mat<T> w_dec;
    std::vector<T> b_dec;
    std::vector<T> theta;
    SaeLoss<T> loss;
};

/// Analytic gradients of sae_loss. In heaviside mode the theta gradient uses
/// a straight-through estimate with a rectangular kernel of width
/// ste_bandwidth around z = theta; in paper_literal mode it is exact.
template <class T>
SaeGrads<T> sae_grads(const SaeParams<T>& sae, const Mat<T>& x, double lambda, T ste_bandwidth);

/// Rescales every w_dec column to unit norm and projects the matching
/// gradient column orthogonal to the column direction. With
/// `skip_zero_columns` zero-norm columns (the zero-init window) pass through
/// untouched; otherwise they raise NumericError.
template <class T>
void renormalize_decoder(SaeParams<T>& sae, SaeGrads<T>* grads, bool skip_zero_columns = false);

// Checkpoint file: magic "SAES", version u32, d u32, d_sae u32, expansion
// u32, mode u32, seed u64, step u64, then f32 LE blocks in order
// w_enc, b_enc, w_dec, b_dec, theta.
void save_sae(const SaeParams<float>& sae, const std::filesystem::path& path);
SaeParams<float> load_sae(const std::filesystem::path& path);

/// A d_sae = 2d construction that reconstructs any input exactly in
/// heaviside mode (positive and negated copies split the sign ranges).
template <class T>
SaeParams<T> identity_sae(int d);

} // namespace saeg
