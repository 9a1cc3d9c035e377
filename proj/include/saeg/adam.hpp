#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "saeg/error.hpp"

namespace saeg {

/// First/second moment buffers for one parameter block.
/// Invariants: m and v match the block size, t >= 0, v entries >= 0.
template <class T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
    std::int64_t t = 0;
    T beta1;
    T beta2;
    T eps;

    static AdamState like(std::size_t n, T beta1, T beta2, T eps = T(1e-8)) {
        AdamState s;
        s.m.assign(n, T{0});
        s.v.assign(n, T{0});
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.eps = eps;
        return s;
    }
};

// Bias-corrected Adam update: p -= lr * m_hat / (sqrt(v_hat) + eps).
// With beta1 = 0 the first moment is the raw gradient.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& st, T lr,
               std::string_view block_name = "") {
    if (params.size() != grads.size() || params.size() != st.m.size() ||
        params.size() != st.v.size()) {
        throw ShapeError("adam_step size mismatch for block '" + std::string(block_name) + "'");
    }
    if (!(lr > T{0})) {
        throw ConfigError("adam_step requires lr > 0");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(static_cast<double>(grads[i]))) {
            throw NumericError("non-finite gradient in block '" + std::string(block_name) +
                               "' at index " + std::to_string(i));
        }
    }
    st.t += 1;
    const T b1 = st.beta1, b2 = st.beta2;
    const T b1corr = T{1} - static_cast<T>(std::pow(static_cast<double>(b1), static_cast<double>(st.t)));
    const T b2corr = T{1} - static_cast<T>(std::pow(static_cast<double>(b2), static_cast<double>(st.t)));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        st.m[i] = b1 * st.m[i] + (T{1} - b1) * g;
        st.v[i] = b2 * st.v[i] + (T{1} - b2) * g * g;
        const T m_hat = st.m[i] / b1corr;
        const T v_hat = st.v[i] / b2corr;
        params[i] -= lr * m_hat / (static_cast<T>(std::sqrt(static_cast<double>(v_hat))) + st.eps);
    }
}

} // namespace saeg
