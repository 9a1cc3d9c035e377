#include "saeg/sae.hpp"

#include <cmath>
#include <cstring>

#include "saeg/error.hpp"
#include "saeg/io.hpp"

namespace saeg {

std::string to_string(JumpReluMode mode) {
    return mode == JumpReluMode::heaviside ? "heaviside-jumprelu" : "paper-literal";
}

JumpReluMode jumprelu_mode_from_string(const std::string& s) {
    if (s == "heaviside-jumprelu" || s == "heaviside") {
        return JumpReluMode::heaviside;
    }
    if (s == "paper-literal" || s == "literal") {
        return JumpReluMode::paper_literal;
    }
    throw ConfigError("unknown jumprelu mode: " + s);
}

template <class T>
SaeParams<T> SaeParams<T>::sized(int d, int expansion, JumpReluMode mode) {
    if (d <= 0 || expansion <= 0) {
        throw ConfigError("SaeParams: d and expansion must be > 0");
    }
    SaeParams<T> s;
    s.d = d;
    s.expansion = expansion;
    s.d_sae = d * expansion;
    s.mode = mode;
    s.w_enc = Mat<T>(s.d_sae, d);
    s.b_enc.assign(static_cast<std::size_t>(s.d_sae), T{0});
    s.w_dec = Mat<T>(d, s.d_sae);
    s.b_dec.assign(static_cast<std::size_t>(d), T{0});
    s.theta.assign(static_cast<std::size_t>(s.d_sae), T{0});
    return s;
}

namespace {

template <class T>
inline T gate_value(T z, T theta, JumpReluMode mode) {
    if (mode == JumpReluMode::heaviside) {
        return z > theta ? z : T{0};
    }
    const T r = z - theta;
    return r > T{0} ? z * r : T{0};
}

} // namespace

template <class T>
std::vector<T> jumprelu(const std::vector<T>& z, const std::vector<T>& theta, JumpReluMode mode) {
    if (z.size() != theta.size()) {
        throw ShapeError("jumprelu: z and theta sizes differ");
    }
    std::vector<T> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = gate_value(z[i], theta[i], mode);
    }
    return out;
}

template <class T>
Mat<T> encode_pre(const SaeParams<T>& sae, const Mat<T>& x) {
    if (x.cols() != sae.d) {
        throw ShapeError("encode: input width " + std::to_string(x.cols()) + " != d " +
                         std::to_string(sae.d));
    }
    Mat<T> centered(x.rows(), x.cols());
    for (idx r = 0; r < x.rows(); ++r) {
        const T* xr = x.row(r);
        T* cr = centered.row(r);
        for (idx c = 0; c < x.cols(); ++c) {
            cr[c] = xr[c] - sae.b_dec[static_cast<std::size_t>(c)];
        }
    }
    Mat<T> z = matmul(centered, transpose(sae.w_enc));
    for (idx r = 0; r < z.rows(); ++r) {
        T* zr = z.row(r);
        for (idx c = 0; c < z.cols(); ++c) {
            zr[c] += sae.b_enc[static_cast<std::size_t>(c)];
        }
    }
    return z;
}

template <class T>
Mat<T> apply_jumprelu(const SaeParams<T>& sae, const Mat<T>& z) {
    Mat<T> f(z.rows(), z.cols());
    for (idx r = 0; r < z.rows(); ++r) {
        const T* zr = z.row(r);
        T* fr = f.row(r);
        for (idx c = 0; c < z.cols(); ++c) {
            fr[c] = gate_value(zr[c], sae.theta[static_cast<std::size_t>(c)], sae.mode);
        }
    }
    return f;
}

template <class T>
Mat<T> encode(const SaeParams<T>& sae, const Mat<T>& x) {
    return apply_jumprelu(sae, encode_pre(sae, x));
}

template <class T>
Mat<T> decode(const SaeParams<T>& sae, const Mat<T>& f) {
    if (f.cols() != sae.d_sae) {
        throw ShapeError("decode: input width " + std::to_string(f.cols()) + " != d_sae " +
                         std::to_string(sae.d_sae));
    }
    Mat<T> xhat = matmul(f, transpose(sae.w_dec));
    for (idx r = 0; r < xhat.rows(); ++r) {
        T* xr = xhat.row(r);
        for (idx c = 0; c < xhat.cols(); ++c) {
            xr[c] += sae.b_dec[static_cast<std::size_t>(c)];
        }
    }
    return xhat;
}

namespace {

template <class T>
SaeLoss<T> loss_from_parts(const Mat<T>& x, const Mat<T>& xhat, const Mat<T>& f, double lambda) {
    const double inv_n = 1.0 / static_cast<double>(x.rows());
    double recon = 0.0, l1 = 0.0, l0 = 0.0;
    for (idx r = 0; r < x.rows(); ++r) {
        const T* xr = x.row(r);
        const T* hr = xhat.row(r);
        for (idx c = 0; c < x.cols(); ++c) {
            const double diff = static_cast<double>(xr[c]) - static_cast<double>(hr[c]);
            recon += diff * diff;
        }
        const T* fr = f.row(r);
        for (idx c = 0; c < f.cols(); ++c) {
            const double v = static_cast<double>(fr[c]);
            l1 += std::abs(v);
            if (v != 0.0) {
                l0 += 1.0;
            }
        }
    }
    SaeLoss<T> out;
    out.recon = recon * inv_n;
    out.l1 = l1 * inv_n;
    out.l0 = l0 * inv_n;
    out.total = out.recon + lambda * out.l1;
    return out;
}

} // namespace

template <class T>
SaeLoss<T> sae_loss(const SaeParams<T>& sae, const Mat<T>& x, double lambda) {
    const Mat<T> f = encode(sae, x);
    const Mat<T> xhat = decode(sae, f);
    return loss_from_parts(x, xhat, f, lambda);
}

template <class T>
SaeLoss<T> sae_loss_frozen_gate(const SaeParams<T>& sae, const Mat<T>& x, double lambda,
                                const Mat<T>& gate) {
    Mat<T> z = encode_pre(sae, x);
    if (!z.same_shape(gate)) {
        throw ShapeError("sae_loss_frozen_gate: gate shape mismatch");
    }
    Mat<T> f(z.rows(), z.cols());
    for (idx r = 0; r < z.rows(); ++r) {
        const T* zr = z.row(r);
        const T* gr = gate.row(r);
        T* fr = f.row(r);
        for (idx c = 0; c < z.cols(); ++c) {
            fr[c] = gr[c] != T{0} ? zr[c] : T{0};
        }
    }
    const Mat<T> xhat = decode(sae, f);
    return loss_from_parts(x, xhat, f, lambda);
}

template <class T>
SaeGrads<T> sae_grads(const SaeParams<T>& sae, const Mat<T>& x, double lambda, T ste_bandwidth) {
    const idx n = x.rows();
    const T inv_n = T{1} / static_cast<T>(n);

    Mat<T> centered(x.rows(), x.cols());
    for (idx r = 0; r < n; ++r) {
        const T* xr = x.row(r);
        T* cr = centered.row(r);
        for (idx c = 0; c < x.cols(); ++c) {
            cr[c] = xr[c] - sae.b_dec[static_cast<std::size_t>(c)];
        }
    }
    Mat<T> z = matmul(centered, transpose(sae.w_enc));
    for (idx r = 0; r < n; ++r) {
        T* zr = z.row(r);
        for (idx c = 0; c < z.cols(); ++c) {
            zr[c] += sae.b_enc[static_cast<std::size_t>(c)];
        }
    }
    const Mat<T> f = apply_jumprelu(sae, z);
    const Mat<T> xhat = matmul(f, transpose(sae.w_dec)); // bias cancels inside dxhat

    SaeGrads<T> g;

    // d total / d xhat = (2/n)(xhat + b_dec - x), fused with the recon sum
    Mat<T> dxhat(n, sae.d);
    double recon = 0.0;
    for (idx r = 0; r < n; ++r) {
        const T* xr = x.row(r);
        const T* hr = xhat.row(r);
        T* dr = dxhat.row(r);
        double row_recon = 0.0;
        for (idx c = 0; c < sae.d; ++c) {
            const T diff = hr[c] + sae.b_dec[static_cast<std::size_t>(c)] - xr[c];
            row_recon += static_cast<double>(diff) * static_cast<double>(diff);
            dr[c] = T{2} * inv_n * diff;
        }
        recon += row_recon;
    }

    g.w_dec = transpose(matmul_at_b(f, dxhat)); // d x d_sae; rank-1 over rows skips inactive features

    // dF = dxhat @ w_dec + (lambda/n) * sign(f); f is nonnegative when
    // active, so sign(f) is the gate. The gate backward, the theta estimate
    // and the sparsity bookkeeping all share one pass; dz overwrites df.
    Mat<T> df = matmul(dxhat, sae.w_dec);
    const T l1_coeff = static_cast<T>(lambda) * inv_n;
    g.theta.assign(static_cast<std::size_t>(sae.d_sae), T{0});
    g.b_enc.assign(static_cast<std::size_t>(sae.d_sae), T{0});
    double l1 = 0.0, l0 = 0.0;
    Mat<T>& dz = df;
    if (sae.mode == JumpReluMode::heaviside) {
        const T half_band = ste_bandwidth / T{2};
        for (idx r = 0; r < n; ++r) {
            const T* zr = z.row(r);
            const T* fr = f.row(r);
            T* dr = dz.row(r);
            double row_l1 = 0.0;
            for (idx c = 0; c < sae.d_sae; ++c) {
                const T theta = sae.theta[static_cast<std::size_t>(c)];
                const bool active = fr[c] != T{0};
                const T dtot = dr[c] + (active ? l1_coeff : T{0});
                if (active) {
                    row_l1 += static_cast<double>(fr[c]);
                    l0 += 1.0;
                }
                // straight-through: -(theta/eps) inside |z - theta| < eps/2
                if (ste_bandwidth > T{0} && std::abs(zr[c] - theta) < half_band) {
                    g.theta[static_cast<std::size_t>(c)] -= dtot * theta / ste_bandwidth;
                }
                dr[c] = active ? dtot : T{0};
                g.b_enc[static_cast<std::size_t>(c)] += dr[c];
            }
            l1 += row_l1;
        }
    } else {
        for (idx r = 0; r < n; ++r) {
            const T* zr = z.row(r);
            const T* fr = f.row(r);
            T* dr = dz.row(r);
            double row_l1 = 0.0;
            for (idx c = 0; c < sae.d_sae; ++c) {
                const T theta = sae.theta[static_cast<std::size_t>(c)];
                if (zr[c] - theta > T{0}) {
                    const T dtot = dr[c] + l1_coeff;
                    row_l1 += static_cast<double>(fr[c]);
                    l0 += 1.0;
                    g.theta[static_cast<std::size_t>(c)] -= dtot * zr[c];
                    dr[c] = dtot * (T{2} * zr[c] - theta);
                } else {
                    dr[c] = T{0};
                }
                g.b_enc[static_cast<std::size_t>(c)] += dr[c];
            }
            l1 += row_l1;
        }
    }
    g.loss.recon = recon / static_cast<double>(n);
    g.loss.l1 = l1 / static_cast<double>(n);
    g.loss.l0 = l0 / static_cast<double>(n);
    g.loss.total = g.loss.recon + lambda * g.loss.l1;

    g.w_enc = matmul_at_b(dz, centered); // d_sae x d

    // b_dec receives the decoder-bias path and the negated encoder path.
    g.b_dec.assign(static_cast<std::size_t>(sae.d), T{0});
    for (idx r = 0; r < n; ++r) {
        const T* dr = dxhat.row(r);
        for (idx c = 0; c < sae.d; ++c) {
            g.b_dec[static_cast<std::size_t>(c)] += dr[c];
        }
    }
    // g.b_enc already holds colsum(dz)
    Mat<T> dz_colsum(1, sae.d_sae, std::vector<T>(g.b_enc));
    const Mat<T> enc_path = matmul(dz_colsum, sae.w_enc); // 1 x d
    for (idx c = 0; c < sae.d; ++c) {
        g.b_dec[static_cast<std::size_t>(c)] -= enc_path(0, c);
    }
    return g;
}

template <class T>
void renormalize_decoder(SaeParams<T>& sae, SaeGrads<T>* grads, bool skip_zero_columns) {
    for (idx c = 0; c < sae.d_sae; ++c) {
        double norm_sq = 0.0;
        for (idx r = 0; r < sae.d; ++r) {
            const double v = static_cast<double>(sae.w_dec(r, c));
            norm_sq += v * v;
        }
        if (norm_sq == 0.0) {
            if (skip_zero_columns) {
                continue;
            }
            throw NumericError("renormalize_decoder: zero decoder column " + std::to_string(c));
        }
        const T inv_norm = static_cast<T>(1.0 / std::sqrt(norm_sq));
        for (idx r = 0; r < sae.d; ++r) {
            sae.w_dec(r, c) *= inv_norm;
        }
        if (grads != nullptr) {
            // Remove the gradient component parallel to the (unit) column.
            double dot = 0.0;
            for (idx r = 0; r < sae.d; ++r) {
                dot += static_cast<double>(grads->w_dec(r, c)) *
                       static_cast<double>(sae.w_dec(r, c));
            }
            for (idx r = 0; r < sae.d; ++r) {
                grads->w_dec(r, c) -= static_cast<T>(dot) * sae.w_dec(r, c);
            }
        }
    }
}

void save_sae(const SaeParams<float>& sae, const std::filesystem::path& path) {
    std::string buf;
    buf.append("SAES", 4);
    put_u32(buf, 1);
    put_u32(buf, static_cast<std::uint32_t>(sae.d));
    put_u32(buf, static_cast<std::uint32_t>(sae.d_sae));
    put_u32(buf, static_cast<std::uint32_t>(sae.expansion));
    put_u32(buf, sae.mode == JumpReluMode::heaviside ? 0u : 1u);
    put_u64(buf, sae.seed);
    put_u64(buf, sae.step);
    put_f32_array(buf, sae.w_enc.data(), static_cast<std::size_t>(sae.w_enc.size()));
    put_f32_array(buf, sae.b_enc.data(), sae.b_enc.size());
    put_f32_array(buf, sae.w_dec.data(), static_cast<std::size_t>(sae.w_dec.size()));
    put_f32_array(buf, sae.b_dec.data(), sae.b_dec.size());
    put_f32_array(buf, sae.theta.data(), sae.theta.size());
    atomic_write_file(path, buf);
}

SaeParams<float> load_sae(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "SAES", 4) != 0) {
        throw FormatError("not an SAE checkpoint: " + path.string());
    }
    ByteReader rd(std::string_view(bytes).substr(4));
    const std::uint32_t version = rd.get_u32();
    if (version != 1) {
        throw FormatError("unsupported SAE checkpoint version " + std::to_string(version));
    }
    const int d = static_cast<int>(rd.get_u32());
    const int d_sae = static_cast<int>(rd.get_u32());
    const int expansion = static_cast<int>(rd.get_u32());
    const std::uint32_t mode_code = rd.get_u32();
    if (d <= 0 || d_sae != d * expansion) {
        throw CorruptionError("inconsistent SAE checkpoint dimensions");
    }
    SaeParams<float> sae = SaeParams<float>::sized(
        d, expansion, mode_code == 0 ? JumpReluMode::heaviside : JumpReluMode::paper_literal);
    sae.seed = rd.get_u64();
    sae.step = rd.get_u64();
    rd.get_f32_array(sae.w_enc.data(), static_cast<std::size_t>(sae.w_enc.size()));
    rd.get_f32_array(sae.b_enc.data(), sae.b_enc.size());
    rd.get_f32_array(sae.w_dec.data(), static_cast<std::size_t>(sae.w_dec.size()));
    rd.get_f32_array(sae.b_dec.data(), sae.b_dec.size());
    rd.get_f32_array(sae.theta.data(), sae.theta.size());
    if (rd.remaining() != 0) {
        throw CorruptionError("trailing bytes in SAE checkpoint: " + path.string());
    }
    return sae;
}

template <class T>
SaeParams<T> identity_sae(int d) {
    SaeParams<T> sae = SaeParams<T>::sized(d, 2, JumpReluMode::heaviside);
    for (int i = 0; i < d; ++i) {
        sae.w_enc(i, i) = T{1};
        sae.w_enc(d + i, i) = T{-1};
        sae.w_dec(i, i) = T{1};
        sae.w_dec(i, d + i) = T{-1};
    }
    return sae;
}

template struct SaeParams<float>;
template struct SaeParams<double>;
template std::vector<float> jumprelu(const std::vector<float>&, const std::vector<float>&, JumpReluMode);
template std::vector<double> jumprelu(const std::vector<double>&, const std::vector<double>&, JumpReluMode);
template Mat<float> encode_pre(const SaeParams<float>&, const Mat<float>&);
template Mat<double> encode_pre(const SaeParams<double>&, const Mat<double>&);
template Mat<float> apply_jumprelu(const SaeParams<float>&, const Mat<float>&);
template Mat<double> apply_jumprelu(const SaeParams<double>&, const Mat<double>&);
template Mat<float> encode(const SaeParams<float>&, const Mat<float>&);
template Mat<double> encode(const SaeParams<double>&, const Mat<double>&);
template Mat<float> decode(const SaeParams<float>&, const Mat<float>&);
template Mat<double> decode(const SaeParams<double>&, const Mat<double>&);
template SaeLoss<float> sae_loss(const SaeParams<float>&, const Mat<float>&, double);
template SaeLoss<double> sae_loss(const SaeParams<double>&, const Mat<double>&, double);
template SaeLoss<float> sae_loss_frozen_gate(const SaeParams<float>&, const Mat<float>&, double, const Mat<float>&);
template SaeLoss<double> sae_loss_frozen_gate(const SaeParams<double>&, const Mat<double>&, double, const Mat<double>&);
template SaeGrads<float> sae_grads(const SaeParams<float>&, const Mat<float>&, double, float);
template SaeGrads<double> sae_grads(const SaeParams<double>&, const Mat<double>&, double, double);
template void renormalize_decoder(SaeParams<float>&, SaeGrads<float>*, bool);
template void renormalize_decoder(SaeParams<double>&, SaeGrads<double>*, bool);
template SaeParams<float> identity_sae(int);
template SaeParams<double> identity_sae(int);

} // namespace saeg
