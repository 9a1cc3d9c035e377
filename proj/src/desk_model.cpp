#include "saeg/desk_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "saeg/adam.hpp"
#include "saeg/error.hpp"
#include "saeg/io.hpp"
#include "saeg/rng.hpp"

namespace saeg {

namespace {
constexpr double kLnEps = 1e-5;
constexpr double kGeluAlpha = 0.7978845608028653559; // sqrt(2/pi)
constexpr double kGeluBeta = 0.044715;
} // namespace

void DeskConfig::validate() const {
    if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || vocab <= 0 || context <= 0) {
        throw ConfigError("DeskConfig: all extents must be > 0");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("DeskConfig: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    }
}

template <class T>
DeskParams<T> DeskParams<T>::sized(const DeskConfig& cfg) {
    cfg.validate();
    DeskParams<T> p;
    p.cfg = cfg;
    const int d = cfg.d_model;
    p.tok_emb = Mat<T>(cfg.vocab, d);
    p.pos_emb = Mat<T>(cfg.context, d);
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : p.layers) {
        l.ln1_g.assign(static_cast<std::size_t>(d), T{1});
        l.ln1_b.assign(static_cast<std::size_t>(d), T{0});
        l.w_q = Mat<T>(d, d);
        l.w_k = Mat<T>(d, d);
        l.w_v = Mat<T>(d, d);
        l.w_o = Mat<T>(d, d);
        l.b_q.assign(static_cast<std::size_t>(d), T{0});
        l.b_k.assign(static_cast<std::size_t>(d), T{0});
        l.b_v.assign(static_cast<std::size_t>(d), T{0});
        l.b_o.assign(static_cast<std::size_t>(d), T{0});
        l.ln2_g.assign(static_cast<std::size_t>(d), T{1});
        l.ln2_b.assign(static_cast<std::size_t>(d), T{0});
        l.w_fc = Mat<T>(d, 4 * d);
        l.b_fc.assign(static_cast<std::size_t>(4 * d), T{0});
        l.w_proj = Mat<T>(4 * d, d);
        l.b_proj.assign(static_cast<std::size_t>(d), T{0});
    }
    p.lnf_g.assign(static_cast<std::size_t>(d), T{1});
    p.lnf_b.assign(static_cast<std::size_t>(d), T{0});
    p.unembed = Mat<T>(d, cfg.vocab);
    return p;
}

namespace {

template <class T, class P, class Fn>
void visit_desk_blocks(P& p, Fn&& fn) {
    auto mat = [&](const std::string& name, auto& m) { fn(name, std::span(m.values())); };
    auto vec = [&](const std::string& name, auto& v) { fn(name, std::span(v)); };
    mat("tok_emb", p.tok_emb);
    mat("pos_emb", p.pos_emb);
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        auto& l = p.layers[li];
        const std::string pre = "layer" + std::to_string(li) + ".";
        vec(pre + "ln1_g", l.ln1_g);
        vec(pre + "ln1_b", l.ln1_b);
        mat(pre + "w_q", l.w_q);
        vec(pre + "b_q", l.b_q);
        mat(pre + "w_k", l.w_k);
        vec(pre + "b_k", l.b_k);
        mat(pre + "w_v", l.w_v);
        vec(pre + "b_v", l.b_v);
        mat(pre + "w_o", l.w_o);
        vec(pre + "b_o", l.b_o);
        vec(pre + "ln2_g", l.ln2_g);
        vec(pre + "ln2_b", l.ln2_b);
        mat(pre + "w_fc", l.w_fc);
        vec(pre + "b_fc", l.b_fc);
        mat(pre + "w_proj", l.w_proj);
        vec(pre + "b_proj", l.b_proj);
    }
    vec("lnf_g", p.lnf_g);
    vec("lnf_b", p.lnf_b);
    mat("unembed", p.unembed);
}

} // namespace

template <class T>
void DeskParams<T>::for_each_block(
    const std::function<void(const std::string&, std::span<T>)>& fn) {
    visit_desk_blocks<T>(*this, fn);
}

template <class T>
void DeskParams<T>::for_each_block(
    const std::function<void(const std::string&, std::span<const T>)>& fn) const {
    visit_desk_blocks<T>(*this, [&](const std::string& name, std::span<const T> s) { fn(name, s); });
}

template <class T>
std::size_t DeskParams<T>::n_params() const {
    std::size_t n = 0;
    for_each_block([&](const std::string&, std::span<const T> s) { n += s.size(); });
    return n;
}

template <class T>
std::uint64_t DeskParams<T>::checksum() const {
    std::string buf;
    for_each_block([&](const std::string&, std::span<const T> s) {
        for (T v : s) {
            if constexpr (sizeof(T) == 4) {
                put_u32(buf, std::bit_cast<std::uint32_t>(v));
            } else {
                put_u64(buf, std::bit_cast<std::uint64_t>(v));
            }
        }
    });
    return fnv1a64(buf);
}

template <class T>
DeskParams<T> init_desk_model(const DeskConfig& cfg) {
    DeskParams<T> p = DeskParams<T>::sized(cfg);
    RngStream rng(cfg.seed);
    const double d = static_cast<double>(cfg.d_model);
    const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    p.for_each_block([&](const std::string& name, std::span<T> s) {
        double std_dev = 0.0;
        if (name == "tok_emb" || name == "pos_emb") {
            std_dev = 0.05;
        } else if (name.ends_with("w_q") || name.ends_with("w_k") || name.ends_with("w_v")) {
            std_dev = 1.0 / std::sqrt(d);
        } else if (name.ends_with("w_fc")) {
            std_dev = 1.0 / std::sqrt(d);
        } else if (name.ends_with("w_o")) {
            std_dev = resid_scale / std::sqrt(d);
        } else if (name.ends_with("w_proj")) {
            std_dev = resid_scale / std::sqrt(4.0 * d);
        } else if (name == "unembed") {
            std_dev = 1.0 / std::sqrt(d);
        } else {
            return; // norms and biases keep their sized() defaults
        }
        for (T& v : s) {
            v = static_cast<T>(rng.normal() * std_dev);
        }
    });
    return p;
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

namespace {

template <class T>
struct LnCache {
    Mat<T> xhat;
    std::vector<T> inv_std;
};

template <class T>
struct LayerCache {
    Mat<T> x_in;
    LnCache<T> ln1;
    Mat<T> attn_in; // ln1 output
    Mat<T> q, k, v;
    std::vector<Mat<T>> probs; // per head, positions x positions (causal)
    Mat<T> ctx;
    Mat<T> resid_mid;
    LnCache<T> ln2;
    Mat<T> mlp_in; // ln2 output
    Mat<T> h;      // pre-gelu
    Mat<T> gelu_out;
    Mat<T> resid_post; // as consumed downstream (post-splice)
};

template <class T>
struct SeqCaches {
    std::vector<LayerCache<T>> layers;
    LnCache<T> lnf;
    Mat<T> xf; // final layernorm output (or resid of last layer)
    Mat<T> logits;
};

template <class T>
void add_bias(Mat<T>& m, const std::vector<T>& b) {
    for (idx r = 0; r < m.rows(); ++r) {
        T* row = m.row(r);
        for (idx c = 0; c < m.cols(); ++c) {
            row[c] += b[static_cast<std::size_t>(c)];
        }
    }
}

template <class T>
Mat<T> layernorm_fwd(const Mat<T>& x, const std::vector<T>& g, const std::vector<T>& b,
                     LnCache<T>& cache) {
    const idx n = x.rows(), d = x.cols();
    cache.xhat = Mat<T>(n, d);
    cache.inv_std.assign(static_cast<std::size_t>(n), T{0});
    Mat<T> y(n, d);
    for (idx r = 0; r < n; ++r) {
        const T* xr = x.row(r);
        double mean = 0.0;
        for (idx c = 0; c < d; ++c) {
            mean += static_cast<double>(xr[c]);
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (idx c = 0; c < d; ++c) {
            const double diff = static_cast<double>(xr[c]) - mean;
            var += diff * diff;
        }
        var /= static_cast<double>(d);
        const T inv_std = static_cast<T>(1.0 / std::sqrt(var + kLnEps));
        cache.inv_std[static_cast<std::size_t>(r)] = inv_std;
        T* xh = cache.xhat.row(r);
        T* yr = y.row(r);
        for (idx c = 0; c < d; ++c) {
            xh[c] = (xr[c] - static_cast<T>(mean)) * inv_std;
            yr[c] = g[static_cast<std::size_t>(c)] * xh[c] + b[static_cast<std::size_t>(c)];
        }
    }
    return y;
}

// dx for y = g*xhat + b; also accumulates dg/db when provided.
template <class T>
Mat<T> layernorm_bwd(const Mat<T>& dy, const LnCache<T>& cache, const std::vector<T>& g,
                     std::vector<T>* dg, std::vector<T>* db) {
    const idx n = dy.rows(), d = dy.cols();
    Mat<T> dx(n, d);
    for (idx r = 0; r < n; ++r) {
        const T* dyr = dy.row(r);
        const T* xh = cache.xhat.row(r);
        double m1 = 0.0, m2 = 0.0;
        for (idx c = 0; c < d; ++c) {
            const double dxh = static_cast<double>(dyr[c]) *
                               static_cast<double>(g[static_cast<std::size_t>(c)]);
            m1 += dxh;
            m2 += dxh * static_cast<double>(xh[c]);
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        const double inv_std = static_cast<double>(cache.inv_std[static_cast<std::size_t>(r)]);
        T* dxr = dx.row(r);
        for (idx c = 0; c < d; ++c) {
            const double dxh = static_cast<double>(dyr[c]) *
                               static_cast<double>(g[static_cast<std::size_t>(c)]);
            dxr[c] = static_cast<T>(inv_std * (dxh - m1 - static_cast<double>(xh[c]) * m2));
        }
        if (dg != nullptr) {
            for (idx c = 0; c < d; ++c) {
                (*dg)[static_cast<std::size_t>(c)] += dyr[c] * xh[c];
                (*db)[static_cast<std::size_t>(c)] += dyr[c];
            }
        }
    }
    return dx;
}

template <class T>
inline T gelu_value(T x) {
    const double xd = static_cast<double>(x);
    const double u = kGeluAlpha * (xd + kGeluBeta * xd * xd * xd);
    return static_cast<T>(0.5 * xd * (1.0 + std::tanh(u)));
}

template <class T>
inline T gelu_derivative(T x) {
    const double xd = static_cast<double>(x);
    const double u = kGeluAlpha * (xd + kGeluBeta * xd * xd * xd);
    const double t = std::tanh(u);
    const double du = kGeluAlpha * (1.0 + 3.0 * kGeluBeta * xd * xd);
    return static_cast<T>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du);
}

template <class T>
void apply_splice(const DeskParams<T>& p, int layer, const SpliceSpec<T>& splice,
                  const SaeParams<T>* sae, Mat<T>& resid, std::map<int, Mat<T>>* features) {
    switch (splice.mode) {
    case SpliceMode::zero_ablation:
        resid.fill(T{0});
        return;
    case SpliceMode::fixed_values: {
        auto it = splice.fixed.find(layer);
        if (it == splice.fixed.end()) {
            throw ConfigError("fixed_values splice has no matrix for layer " +
                              std::to_string(layer));
        }
        if (!it->second.same_shape(resid)) {
            throw ShapeError("fixed_values splice shape mismatch at layer " +
                             std::to_string(layer));
        }
        resid = it->second;
        return;
    }
    case SpliceMode::sae_reconstruction:
    case SpliceMode::feature_override: {
        if (sae == nullptr) {
            throw ConfigError("SAE splice requested without an attached SAE");
        }
        if (sae->d != p.cfg.d_model) {
            throw ConfigError("SAE dimension " + std::to_string(sae->d) +
                              " does not match d_model " + std::to_string(p.cfg.d_model));
        }
        Mat<T> f = encode(*sae, resid);
        if (splice.mode == SpliceMode::feature_override) {
            idx pos = splice.override_pos;
            if (pos < 0) {
                pos = resid.rows() - 1;
            }
            if (pos >= resid.rows()) {
                throw ConfigError("feature override position out of range");
            }
            T* frow = f.row(pos);
            if (splice.override_full.has_value()) {
                if (static_cast<idx>(splice.override_full->size()) != f.cols()) {
                    throw ShapeError("full feature override has wrong width");
                }
                std::copy(splice.override_full->begin(), splice.override_full->end(), frow);
            }
            for (const auto& [feature, value] : splice.overrides) {
                if (feature < 0 || feature >= sae->d_sae) {
                    throw ConfigError("feature override index out of range");
                }
                frow[feature] = value;
            }
        }
        if (features != nullptr) {
            (*features)[layer] = f;
        }
        resid = decode(*sae, f);
        return;
    }
    }
}

template <class T>
void forward_internal(const DeskParams<T>& p, std::span<const std::uint32_t> tokens,
                      const SpliceSpec<T>* splice, const SaeParams<T>* sae, SeqCaches<T>& c,
                      ForwardOut<T>* out) {
    const DeskConfig& cfg = p.cfg;
    const idx n = static_cast<idx>(tokens.size());
    if (n == 0) {
        throw DataError("forward: empty token sequence");
    }
    if (n > cfg.context) {
        throw DataError("forward: sequence length " + std::to_string(n) + " exceeds context " +
                        std::to_string(cfg.context));
    }
    for (std::uint32_t t : tokens) {
        if (t >= static_cast<std::uint32_t>(cfg.vocab)) {
            throw DataError("forward: token " + std::to_string(t) + " out of vocab");
        }
    }
    if (splice != nullptr) {
        for (int l : splice->layers) {
            if (l < 0 || l >= cfg.n_layers) {
                throw ConfigError("splice layer " + std::to_string(l) + " out of range");
            }
        }
    }
    const int d = cfg.d_model;
    const int n_heads = cfg.n_heads;
    const int dh = cfg.head_dim();
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    c.layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerCache<T>{});

    Mat<T> x(n, d);
    for (idx t = 0; t < n; ++t) {
        const T* te = p.tok_emb.row(static_cast<idx>(tokens[static_cast<std::size_t>(t)]));
        const T* pe = p.pos_emb.row(t);
        T* xr = x.row(t);
        for (idx ccol = 0; ccol < d; ++ccol) {
            xr[ccol] = te[ccol] + pe[ccol];
        }
    }

    if (out != nullptr) {
        out->hooks.resid_post.clear();
        out->hooks.resid_post.reserve(static_cast<std::size_t>(cfg.n_layers));
        out->features.clear();
    }

    for (int li = 0; li < cfg.n_layers; ++li) {
        LayerCache<T>& lc = c.layers[static_cast<std::size_t>(li)];
        const DeskLayer<T>& lw = p.layers[static_cast<std::size_t>(li)];
        lc.x_in = x;

        lc.attn_in = layernorm_fwd(x, lw.ln1_g, lw.ln1_b, lc.ln1);
        lc.q = matmul(lc.attn_in, lw.w_q);
        add_bias(lc.q, lw.b_q);
        lc.k = matmul(lc.attn_in, lw.w_k);
        add_bias(lc.k, lw.b_k);
        lc.v = matmul(lc.attn_in, lw.w_v);
        add_bias(lc.v, lw.b_v);

        lc.probs.assign(static_cast<std::size_t>(n_heads), Mat<T>(n, n));
        lc.ctx = Mat<T>(n, d);
        for (int h = 0; h < n_heads; ++h) {
            const idx hs = static_cast<idx>(h) * dh;
            Mat<T>& prob = lc.probs[static_cast<std::size_t>(h)];
            for (idx t = 0; t < n; ++t) {
                const T* qt = lc.q.row(t) + hs;
                T* pr = prob.row(t);
                T max_s = std::numeric_limits<T>::lowest();
                for (idx u = 0; u <= t; ++u) {
                    const T* ku = lc.k.row(u) + hs;
                    T s = T{0};
                    for (int j = 0; j < dh; ++j) {
                        s += qt[j] * ku[j];
                    }
                    s *= inv_sqrt_dh;
                    pr[u] = s;
                    if (s > max_s) {
                        max_s = s;
                    }
                }
                T sum = T{0};
                for (idx u = 0; u <= t; ++u) {
                    pr[u] = static_cast<T>(std::exp(static_cast<double>(pr[u] - max_s)));
                    sum += pr[u];
                }
                const T inv_sum = T{1} / sum;
                for (idx u = 0; u <= t; ++u) {
                    pr[u] *= inv_sum;
                }
                T* ct = lc.ctx.row(t) + hs;
                for (int j = 0; j < dh; ++j) {
                    T acc = T{0};
                    for (idx u = 0; u <= t; ++u) {
                        acc += pr[u] * (lc.v.row(u) + hs)[j];
                    }
                    ct[j] = acc;
                }
            }
        }

        Mat<T> attn_out = matmul(lc.ctx, lw.w_o);
        add_bias(attn_out, lw.b_o);
        lc.resid_mid = Mat<T>(n, d);
        for (idx t = 0; t < n; ++t) {
            const T* xr = x.row(t);
            const T* ar = attn_out.row(t);
            T* mr = lc.resid_mid.row(t);
            for (idx cc = 0; cc < d; ++cc) {
                mr[cc] = xr[cc] + ar[cc];
            }
        }

        lc.mlp_in = layernorm_fwd(lc.resid_mid, lw.ln2_g, lw.ln2_b, lc.ln2);
        lc.h = matmul(lc.mlp_in, lw.w_fc);
        add_bias(lc.h, lw.b_fc);
        lc.gelu_out = Mat<T>(n, 4 * d);
        for (idx t = 0; t < n; ++t) {
            const T* hr = lc.h.row(t);
            T* gr = lc.gelu_out.row(t);
            for (idx cc = 0; cc < 4 * d; ++cc) {
                gr[cc] = gelu_value(hr[cc]);
            }
        }
        Mat<T> mlp_out = matmul(lc.gelu_out, lw.w_proj);
        add_bias(mlp_out, lw.b_proj);

        x = Mat<T>(n, d);
        for (idx t = 0; t < n; ++t) {
            const T* mr = lc.resid_mid.row(t);
            const T* pr = mlp_out.row(t);
            T* xr = x.row(t);
            for (idx cc = 0; cc < d; ++cc) {
                xr[cc] = mr[cc] + pr[cc];
            }
        }

        if (splice != nullptr &&
            std::find(splice->layers.begin(), splice->layers.end(), li) != splice->layers.end()) {
            apply_splice(p, li, *splice, sae, x, out != nullptr ? &out->features : nullptr);
        }
        lc.resid_post = x;
        if (out != nullptr) {
            out->hooks.resid_post.push_back(x);
        }
    }

    if (cfg.final_layernorm) {
        c.xf = layernorm_fwd(x, p.lnf_g, p.lnf_b, c.lnf);
    } else {
        c.xf = x;
    }
    c.logits = matmul(c.xf, p.unembed);
    if (out != nullptr) {
        out->logits = c.logits;
    }
}

// Walks gradients from the logits back to `stop_layer`'s resid-post (or all
// the way into the embeddings when stop_layer < 0).
template <class T>
Mat<T> backward_internal(const DeskParams<T>& p, std::span<const std::uint32_t> tokens,
                         const SeqCaches<T>& c, const Mat<T>& dlogits, DeskGrads<T>* g,
                         int stop_layer) {
    const DeskConfig& cfg = p.cfg;
    const idx n = dlogits.rows();
    const int d = cfg.d_model;
    const int n_heads = cfg.n_heads;
    const int dh = cfg.head_dim();
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    if (g != nullptr) {
        matmul_at_b_acc(c.xf, dlogits, g->unembed);
    }
    Mat<T> dx = matmul(dlogits, transpose(p.unembed));
    if (cfg.final_layernorm) {
        dx = layernorm_bwd(dx, c.lnf, p.lnf_g, g != nullptr ? &g->lnf_g : nullptr,
                           g != nullptr ? &g->lnf_b : nullptr);
    }

    for (int li = cfg.n_layers - 1; li >= 0; --li) {
        if (li == stop_layer) {
            return dx; // gradient w.r.t. this layer's (possibly spliced) resid-post
        }
        const LayerCache<T>& lc = c.layers[static_cast<std::size_t>(li)];
        const DeskLayer<T>& lw = p.layers[static_cast<std::size_t>(li)];
        DeskLayer<T>* gl = g != nullptr ? &g->layers[static_cast<std::size_t>(li)] : nullptr;

        // MLP sublayer: resid_post = resid_mid + proj(gelu(fc(ln2(resid_mid))))
        Mat<T> dgelu = matmul(dx, transpose(lw.w_proj));
        if (gl != nullptr) {
            matmul_at_b_acc(lc.gelu_out, dx, gl->w_proj);
            for (idx t = 0; t < n; ++t) {
                const T* dr = dx.row(t);
                for (idx cc = 0; cc < d; ++cc) {
                    gl->b_proj[static_cast<std::size_t>(cc)] += dr[cc];
                }
            }
        }
        Mat<T> dh_mat(n, 4 * d);
        for (idx t = 0; t < n; ++t) {
            const T* hr = lc.h.row(t);
            const T* dgr = dgelu.row(t);
            T* dhr = dh_mat.row(t);
            for (idx cc = 0; cc < 4 * d; ++cc) {
                dhr[cc] = dgr[cc] * gelu_derivative(hr[cc]);
            }
        }
        Mat<T> dmlp_in = matmul(dh_mat, transpose(lw.w_fc));
        if (gl != nullptr) {
            matmul_at_b_acc(lc.mlp_in, dh_mat, gl->w_fc);
            for (idx t = 0; t < n; ++t) {
                const T* dhr = dh_mat.row(t);
                for (idx cc = 0; cc < 4 * d; ++cc) {
                    gl->b_fc[static_cast<std::size_t>(cc)] += dhr[cc];
                }
            }
        }
        Mat<T> dresid_mid = layernorm_bwd(dmlp_in, lc.ln2, lw.ln2_g,
                                          gl != nullptr ? &gl->ln2_g : nullptr,
                                          gl != nullptr ? &gl->ln2_b : nullptr);
        for (idx t = 0; t < n; ++t) {
            const T* dr = dx.row(t);
            T* mr = dresid_mid.row(t);
            for (idx cc = 0; cc < d; ++cc) {
                mr[cc] += dr[cc];
            }
        }

        // Attention sublayer: resid_mid = x_in + w_o(attn(ln1(x_in)))
        Mat<T> dctx = matmul(dresid_mid, transpose(lw.w_o));
        if (gl != nullptr) {
            matmul_at_b_acc(lc.ctx, dresid_mid, gl->w_o);
            for (idx t = 0; t < n; ++t) {
                const T* dr = dresid_mid.row(t);
                for (idx cc = 0; cc < d; ++cc) {
                    gl->b_o[static_cast<std::size_t>(cc)] += dr[cc];
                }
            }
        }

        Mat<T> dq(n, d), dk(n, d), dv(n, d);
        std::vector<T> dp(static_cast<std::size_t>(n));
        for (int h = 0; h < n_heads; ++h) {
            const idx hs = static_cast<idx>(h) * dh;
            const Mat<T>& prob = lc.probs[static_cast<std::size_t>(h)];
            for (idx t = 0; t < n; ++t) {
                const T* pr = prob.row(t);
                const T* dct = dctx.row(t) + hs;
                // dP and dV
                double dot = 0.0;
                for (idx u = 0; u <= t; ++u) {
                    const T* vu = lc.v.row(u) + hs;
                    T acc = T{0};
                    for (int j = 0; j < dh; ++j) {
                        acc += dct[j] * vu[j];
                    }
                    dp[static_cast<std::size_t>(u)] = acc;
                    dot += static_cast<double>(acc) * static_cast<double>(pr[u]);
                    T* dvu = dv.row(u) + hs;
                    for (int j = 0; j < dh; ++j) {
                        dvu[j] += pr[u] * dct[j];
                    }
                }
                // softmax backward and score scale
                const T* qt = lc.q.row(t) + hs;
                T* dqt = dq.row(t) + hs;
                for (idx u = 0; u <= t; ++u) {
                    const T ds = pr[u] *
                                 (dp[static_cast<std::size_t>(u)] - static_cast<T>(dot)) *
                                 inv_sqrt_dh;
                    const T* ku = lc.k.row(u) + hs;
                    T* dku = dk.row(u) + hs;
                    for (int j = 0; j < dh; ++j) {
                        dqt[j] += ds * ku[j];
                        dku[j] += ds * qt[j];
                    }
                }
            }
        }

        Mat<T> dattn_in = matmul(dq, transpose(lw.w_q));
        matmul_acc(dk, transpose(lw.w_k), dattn_in);
        matmul_acc(dv, transpose(lw.w_v), dattn_in);
        if (gl != nullptr) {
            matmul_at_b_acc(lc.attn_in, dq, gl->w_q);
            matmul_at_b_acc(lc.attn_in, dk, gl->w_k);
            matmul_at_b_acc(lc.attn_in, dv, gl->w_v);
            for (idx t = 0; t < n; ++t) {
                const T* dqr = dq.row(t);
                const T* dkr = dk.row(t);
                const T* dvr = dv.row(t);
                for (idx cc = 0; cc < d; ++cc) {
                    gl->b_q[static_cast<std::size_t>(cc)] += dqr[cc];
                    gl->b_k[static_cast<std::size_t>(cc)] += dkr[cc];
                    gl->b_v[static_cast<std::size_t>(cc)] += dvr[cc];
                }
            }
        }
        Mat<T> dx_in = layernorm_bwd(dattn_in, lc.ln1, lw.ln1_g,
                                     gl != nullptr ? &gl->ln1_g : nullptr,
                                     gl != nullptr ? &gl->ln1_b : nullptr);
        for (idx t = 0; t < n; ++t) {
            const T* mr = dresid_mid.row(t);
            T* xr = dx_in.row(t);
            for (idx cc = 0; cc < d; ++cc) {
                xr[cc] += mr[cc];
            }
        }
        dx = std::move(dx_in);
    }

    if (g != nullptr) {
        for (idx t = 0; t < n; ++t) {
            const T* dr = dx.row(t);
            T* te = g->tok_emb.row(static_cast<idx>(tokens[static_cast<std::size_t>(t)]));
            T* pe = g->pos_emb.row(t);
            for (idx cc = 0; cc < d; ++cc) {
                te[cc] += dr[cc];
                pe[cc] += dr[cc];
            }
        }
    }
    return dx;
}

} // namespace

template <class T>
ForwardOut<T> forward(const DeskParams<T>& params, std::span<const std::uint32_t> tokens) {
    SeqCaches<T> caches;
    ForwardOut<T> out;
    forward_internal<T>(params, tokens, nullptr, nullptr, caches, &out);
    return out;
}

template <class T>
ForwardOut<T> forward_spliced(const DeskParams<T>& params, std::span<const std::uint32_t> tokens,
                              const SpliceSpec<T>& splice, const SaeParams<T>* sae) {
    SeqCaches<T> caches;
    ForwardOut<T> out;
    forward_internal(params, tokens, &splice, sae, caches, &out);
    return out;
}

template <class T>
double cross_entropy(const Mat<T>& logits, std::span<const std::uint32_t> targets) {
    if (static_cast<idx>(targets.size()) != logits.rows()) {
        throw ShapeError("cross_entropy: targets length != logits rows");
    }
    double total = 0.0;
    for (idx r = 0; r < logits.rows(); ++r) {
        const T* lr = logits.row(r);
        double max_l = -std::numeric_limits<double>::infinity();
        for (idx c = 0; c < logits.cols(); ++c) {
            max_l = std::max(max_l, static_cast<double>(lr[c]));
        }
        double sum = 0.0;
        for (idx c = 0; c < logits.cols(); ++c) {
            sum += std::exp(static_cast<double>(lr[c]) - max_l);
        }
        const auto target = static_cast<idx>(targets[static_cast<std::size_t>(r)]);
        if (target >= logits.cols()) {
            throw DataError("cross_entropy: target out of vocab");
        }
        total -= static_cast<double>(lr[target]) - max_l - std::log(sum);
    }
    return total / static_cast<double>(logits.rows());
}

template <class T>
DeskGrads<T> DeskGrads<T>::sized(const DeskConfig& cfg) {
    DeskParams<T> like = DeskParams<T>::sized(cfg);
    DeskGrads<T> g;
    g.tok_emb = std::move(like.tok_emb);
    g.pos_emb = std::move(like.pos_emb);
    g.layers = std::move(like.layers);
    g.lnf_g.assign(like.lnf_g.size(), T{0});
    g.lnf_b.assign(like.lnf_b.size(), T{0});
    g.unembed = std::move(like.unembed);
    // zero the blocks that sized() seeds with ones
    for (auto& l : g.layers) {
        std::fill(l.ln1_g.begin(), l.ln1_g.end(), T{0});
        std::fill(l.ln2_g.begin(), l.ln2_g.end(), T{0});
    }
    return g;
}

template <class T>
void DeskGrads<T>::for_each_block(
    const std::function<void(const std::string&, std::span<T>)>& fn) {
    visit_desk_blocks<T>(*this, fn);
}

template <class T>
double desk_loss_and_grads(const DeskParams<T>& params,
                           const std::vector<std::vector<std::uint32_t>>& sequences,
                           DeskGrads<T>* grads) {
    std::size_t total_positions = 0;
    for (const auto& seq : sequences) {
        if (seq.size() < 2) {
            throw DataError("training sequence shorter than 2 tokens");
        }
        total_positions += seq.size() - 1;
    }
    const double inv_total = 1.0 / static_cast<double>(total_positions);
    double loss_sum = 0.0;
    SeqCaches<T> caches;
    for (const auto& seq : sequences) {
        const std::span<const std::uint32_t> inputs(seq.data(), seq.size() - 1);
        const std::span<const std::uint32_t> targets(seq.data() + 1, seq.size() - 1);
        forward_internal<T>(params, inputs, nullptr, nullptr, caches, nullptr);
        const Mat<T>& logits = caches.logits;
        Mat<T> dlogits(logits.rows(), logits.cols());
        for (idx r = 0; r < logits.rows(); ++r) {
            const T* lr = logits.row(r);
            double max_l = -std::numeric_limits<double>::infinity();
            for (idx c = 0; c < logits.cols(); ++c) {
                max_l = std::max(max_l, static_cast<double>(lr[c]));
            }
            double sum = 0.0;
            for (idx c = 0; c < logits.cols(); ++c) {
                sum += std::exp(static_cast<double>(lr[c]) - max_l);
            }
            const double log_sum = std::log(sum);
            const auto target = static_cast<idx>(targets[static_cast<std::size_t>(r)]);
            loss_sum -= (static_cast<double>(lr[target]) - max_l - log_sum) * inv_total;
            if (grads != nullptr) {
                T* dr = dlogits.row(r);
                for (idx c = 0; c < logits.cols(); ++c) {
                    const double prob =
                        std::exp(static_cast<double>(lr[c]) - max_l - log_sum);
                    dr[c] = static_cast<T>(prob * inv_total);
                }
                dr[target] -= static_cast<T>(inv_total);
            }
        }
        if (grads != nullptr) {
            backward_internal(params, inputs, caches, dlogits, grads, -1);
        }
    }
    return loss_sum;
}

template <class T>
double AnswerLogitDiff<T>::value(const Mat<T>& logits) const {
    const idx last = logits.rows() - 1;
    return scale * (static_cast<double>(logits(last, a)) - static_cast<double>(logits(last, b)));
}

template <class T>
Mat<T> AnswerLogitDiff<T>::grad(const Mat<T>& logits) const {
    Mat<T> g(logits.rows(), logits.cols());
    const idx last = logits.rows() - 1;
    g(last, a) += static_cast<T>(scale);
    g(last, b) -= static_cast<T>(scale);
    return g;
}

template <class T>
FeatureGradResult<T> grad_wrt_features(const DeskParams<T>& params,
                                       std::span<const std::uint32_t> tokens,
                                       const SaeParams<T>& sae, int layer,
                                       const LogitMetric<T>& metric,
                                       const std::vector<T>* f_override) {
    SpliceSpec<T> splice;
    splice.layers = {layer};
    splice.mode = SpliceMode::feature_override;
    if (f_override != nullptr) {
        splice.override_full = *f_override;
    }
    SeqCaches<T> caches;
    ForwardOut<T> out;
    forward_internal(params, tokens, &splice, &sae, caches, &out);

    FeatureGradResult<T> res;
    res.value = metric.value(out.logits);
    const Mat<T> dlogits = metric.grad(out.logits);
    const Mat<T> dresid = backward_internal<T>(params, tokens, caches, dlogits, nullptr, layer);

    const idx pos = splice.override_pos < 0 ? dresid.rows() - 1 : splice.override_pos;
    const Mat<T>& f = out.features.at(layer);
    res.f_at_pos.assign(f.row(pos), f.row(pos) + f.cols());

    // d metric / d f = w_dec^T (d metric / d xhat at the override row)
    res.grad.assign(static_cast<std::size_t>(sae.d_sae), T{0});
    const T* dxr = dresid.row(pos);
    for (int r = 0; r < sae.d; ++r) {
        const T dx_r = dxr[r];
        if (dx_r == T{0}) {
            continue;
        }
        const T* wrow = sae.w_dec.row(r);
        for (int c2 = 0; c2 < sae.d_sae; ++c2) {
            res.grad[static_cast<std::size_t>(c2)] += dx_r * wrow[c2];
        }
    }
    for (T v : res.grad) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw NumericError("grad_wrt_features: non-finite gradient");
        }
    }
    return res;
}

template <class T>
std::pair<DeskParams<T>, DeskTrainStats> train_desk_model(DeskParams<T> params,
                                                          const Corpus& corpus, int steps,
                                                          double lr, int batch_sequences) {
    if (corpus.n_sequences() == 0) {
        throw DataError("train_desk_model: empty corpus");
    }
    if (batch_sequences <= 0) {
        throw ConfigError("train_desk_model: batch_sequences must be > 0");
    }
    for (std::uint32_t t : corpus.data) {
        if (t >= static_cast<std::uint32_t>(params.cfg.vocab)) {
            throw DataError("train_desk_model: corpus token out of vocab");
        }
    }
    RngStream rng(params.cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    std::vector<AdamState<T>> states;
    params.for_each_block([&](const std::string&, std::span<T> s) {
        states.push_back(AdamState<T>::like(s.size(), T(0.9), T(0.999)));
    });

    DeskTrainStats stats;
    stats.loss_per_step.reserve(static_cast<std::size_t>(steps));
    DeskGrads<T> grads = DeskGrads<T>::sized(params.cfg);
    std::vector<std::vector<std::uint32_t>> batch;
    for (int step = 0; step < steps; ++step) {
        batch.clear();
        for (int b = 0; b < batch_sequences; ++b) {
            const auto si = static_cast<std::size_t>(rng.below(corpus.n_sequences()));
            const auto seq = corpus.sequence(si);
            batch.emplace_back(seq.begin(), seq.end());
        }
        grads.for_each_block([](const std::string&, std::span<T> s) {
            std::fill(s.begin(), s.end(), T{0});
        });
        const double loss = desk_loss_and_grads(params, batch, &grads);
        if (!std::isfinite(loss)) {
            throw TrainingError("desk model loss diverged (NaN/Inf) at step " +
                                std::to_string(step));
        }
        std::size_t bi = 0;
        std::vector<std::pair<std::string, std::span<T>>> grad_blocks;
        grads.for_each_block([&](const std::string& name, std::span<T> s) {
            grad_blocks.emplace_back(name, s);
        });
        params.for_each_block([&](const std::string& name, std::span<T> s) {
            adam_step<T>(s, grad_blocks[bi].second, states[bi], static_cast<T>(lr), name);
            ++bi;
        });
        stats.loss_per_step.push_back(loss);
        ++stats.steps;
    }
    return {std::move(params), std::move(stats)};
}

template <class T>
double corpus_cross_entropy(const DeskParams<T>& params, const Corpus& corpus) {
    if (corpus.n_sequences() == 0) {
        throw DataError("corpus_cross_entropy: empty corpus");
    }
    double total = 0.0;
    std::size_t count = 0;
    SeqCaches<T> caches;
    for (std::size_t s = 0; s < corpus.n_sequences(); ++s) {
        const auto seq = corpus.sequence(s);
        const std::span<const std::uint32_t> inputs(seq.data(), seq.size() - 1);
        const std::span<const std::uint32_t> targets(seq.data() + 1, seq.size() - 1);
        forward_internal<T>(params, inputs, nullptr, nullptr, caches, nullptr);
        total += cross_entropy(caches.logits, targets) * static_cast<double>(targets.size());
        count += targets.size();
    }
    return total / static_cast<double>(count);
}

void save_desk_checkpoint(const DeskParams<float>& params, const std::filesystem::path& path) {
    std::string buf;
    buf.append("SAEM", 4);
    put_u32(buf, 1);
    put_u32(buf, static_cast<std::uint32_t>(params.cfg.n_layers));
    put_u32(buf, static_cast<std::uint32_t>(params.cfg.d_model));
    put_u32(buf, static_cast<std::uint32_t>(params.cfg.n_heads));
    put_u32(buf, static_cast<std::uint32_t>(params.cfg.vocab));
    put_u32(buf, static_cast<std::uint32_t>(params.cfg.context));
    put_u32(buf, params.cfg.final_layernorm ? 1u : 0u);
    put_u64(buf, params.cfg.seed);
    const std::string algo = RngStream::algorithm_id;
    put_u32(buf, static_cast<std::uint32_t>(algo.size()));
    buf += algo;
    params.for_each_block([&](const std::string&, std::span<const float> s) {
        put_f32_array(buf, s.data(), s.size());
    });
    atomic_write_file(path, buf);
}

DeskParams<float> load_desk_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "SAEM", 4) != 0) {
        throw FormatError("not a desk model checkpoint: " + path.string());
    }
    ByteReader rd(std::string_view(bytes).substr(4));
    const std::uint32_t version = rd.get_u32();
    if (version != 1) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    DeskConfig cfg;
    cfg.n_layers = static_cast<int>(rd.get_u32());
    cfg.d_model = static_cast<int>(rd.get_u32());
    cfg.n_heads = static_cast<int>(rd.get_u32());
    cfg.vocab = static_cast<int>(rd.get_u32());
    cfg.context = static_cast<int>(rd.get_u32());
    cfg.final_layernorm = rd.get_u32() != 0;
    cfg.seed = rd.get_u64();
    const std::uint32_t algo_len = rd.get_u32();
    rd.get_bytes(algo_len); // recorded for provenance; not needed to load
    DeskParams<float> params = DeskParams<float>::sized(cfg);
    params.for_each_block([&](const std::string&, std::span<float> s) {
        rd.get_f32_array(s.data(), s.size());
    });
    if (rd.remaining() != 0) {
        throw CorruptionError("trailing bytes in desk checkpoint: " + path.string());
    }
    return params;
}

// explicit instantiations
template struct DeskParams<float>;
template struct DeskParams<double>;
template struct DeskGrads<float>;
template struct DeskGrads<double>;
template struct AnswerLogitDiff<float>;
template struct AnswerLogitDiff<double>;
template DeskParams<float> init_desk_model(const DeskConfig&);
template DeskParams<double> init_desk_model(const DeskConfig&);
template ForwardOut<float> forward(const DeskParams<float>&, std::span<const std::uint32_t>);
template ForwardOut<double> forward(const DeskParams<double>&, std::span<const std::uint32_t>);
template ForwardOut<float> forward_spliced(const DeskParams<float>&, std::span<const std::uint32_t>,
                                           const SpliceSpec<float>&, const SaeParams<float>*);
template ForwardOut<double> forward_spliced(const DeskParams<double>&,
                                            std::span<const std::uint32_t>,
                                            const SpliceSpec<double>&, const SaeParams<double>*);
template double cross_entropy(const MatF&, std::span<const std::uint32_t>);
template double cross_entropy(const MatD&, std::span<const std::uint32_t>);
template double desk_loss_and_grads(const DeskParams<float>&,
                                    const std::vector<std::vector<std::uint32_t>>&,
                                    DeskGrads<float>*);
template double desk_loss_and_grads(const DeskParams<double>&,
                                    const std::vector<std::vector<std::uint32_t>>&,
                                    DeskGrads<double>*);
template FeatureGradResult<float> grad_wrt_features(const DeskParams<float>&,
                                                    std::span<const std::uint32_t>,
                                                    const SaeParams<float>&, int,
                                                    const LogitMetric<float>&,
                                                    const std::vector<float>*);
template FeatureGradResult<double> grad_wrt_features(const DeskParams<double>&,
                                                     std::span<const std::uint32_t>,
                                                     const SaeParams<double>&, int,
                                                     const LogitMetric<double>&,
                                                     const std::vector<double>*);
template std::pair<DeskParams<float>, DeskTrainStats> train_desk_model(DeskParams<float>,
                                                                       const Corpus&, int,
                                                                       double, int);
template std::pair<DeskParams<double>, DeskTrainStats> train_desk_model(DeskParams<double>,
                                                                        const Corpus&, int,
                                                                        double, int);
template double corpus_cross_entropy(const DeskParams<float>&, const Corpus&);
template double corpus_cross_entropy(const DeskParams<double>&, const Corpus&);

} // namespace saeg
