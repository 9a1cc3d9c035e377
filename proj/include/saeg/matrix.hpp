#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "saeg/error.hpp"
#include "saeg/parallel.hpp"

namespace saeg {

using idx = std::int64_t;

/// Dense row-major matrix. Immutable-by-convention once handed to a consumer;
/// the kernels below never alias input and output storage.
template <class T>
class Mat {
  public:
    Mat() = default;

    Mat(idx rows, idx cols) : rows_(rows), cols_(cols), data_(check_extent(rows, cols), T{0}) {}

    Mat(idx rows, idx cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (static_cast<std::size_t>(check_extent(rows, cols)) != data_.size()) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                             std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    // Checked mode: rejects NaN/Inf entries at construction.
    static Mat checked(idx rows, idx cols, std::vector<T> data) {
        Mat m(rows, cols, std::move(data));
        for (std::size_t i = 0; i < m.data_.size(); ++i) {
            if (!std::isfinite(static_cast<double>(m.data_[i]))) {
                throw NumericError("non-finite matrix entry at flat index " + std::to_string(i));
            }
        }
        return m;
    }

    idx rows() const { return rows_; }
    idx cols() const { return cols_; }
    idx size() const { return rows_ * cols_; }
    bool empty() const { return data_.empty(); }

    T* row(idx r) { return data_.data() + r * cols_; }
    const T* row(idx r) const { return data_.data() + r * cols_; }

    T& operator()(idx r, idx c) { return data_[r * cols_ + c]; }
    const T& operator()(idx r, idx c) const { return data_[r * cols_ + c]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    const std::vector<T>& values() const { return data_; }
    std::vector<T>& values() { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  private:
    static idx check_extent(idx rows, idx cols) {
        if (rows < 0 || cols < 0) {
            throw ShapeError("negative matrix extent");
        }
        return rows * cols;
    }

    idx rows_ = 0;
    idx cols_ = 0;
    std::vector<T> data_;
};

using MatF = Mat<float>;
using MatD = Mat<double>;

namespace detail {
// OpenMP regions cost more than they save on small products.
inline int matmul_threads(idx work, idx rows) {
    if (work < (idx{1} << 22) || rows < 4) {
        return 1;
    }
    return thread_cap();
}
} // namespace detail

// c[i,j] = sum_l a[i,l] * b[l,j], summation strictly in ascending l so results
// are bit-identical run to run; parallelism only splits rows of `out`.
template <class T>
void matmul_into(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul inner dimensions " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()));
    }
    if (out.rows() != a.rows() || out.cols() != b.cols()) {
        throw ShapeError("matmul output shape mismatch");
    }
    out.fill(T{0});
    const idx m = a.rows(), k = a.cols(), n = b.cols();
#pragma omp parallel for schedule(static) num_threads(detail::matmul_threads(m * k * n, m))
    for (idx i = 0; i < m; ++i) {
        T* ci = out.row(i);
        const T* ai = a.row(i);
        for (idx l = 0; l < k; ++l) {
            const T ail = ai[l];
            const T* bl = b.row(l);
            for (idx j = 0; j < n; ++j) {
                ci[j] += ail * bl[j];
            }
        }
    }
}

// Same kernel but accumulating into `out` (used when summing gradient
// contributions across a batch of sequences in a fixed order).
template <class T>
void matmul_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul inner dimensions " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()));
    }
    if (out.rows() != a.rows() || out.cols() != b.cols()) {
        throw ShapeError("matmul output shape mismatch");
    }
    const idx m = a.rows(), k = a.cols(), n = b.cols();
#pragma omp parallel for schedule(static) num_threads(detail::matmul_threads(m * k * n, m))
    for (idx i = 0; i < m; ++i) {
        T* ci = out.row(i);
        const T* ai = a.row(i);
        for (idx l = 0; l < k; ++l) {
            const T ail = ai[l];
            const T* bl = b.row(l);
            for (idx j = 0; j < n; ++j) {
                ci[j] += ail * bl[j];
            }
        }
    }
}

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
    Mat<T> out(a.rows(), b.cols());
    matmul_into(a, b, out);
    return out;
}

// c = a * b^T without materializing the transpose: c[i,j] = dot(a_i, b_j),
// summation ascending over the shared axis.
template <class T>
void matmul_a_bt_into(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_a_bt shared dimension " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()));
    }
    if (out.rows() != a.rows() || out.cols() != b.rows()) {
        throw ShapeError("matmul_a_bt output shape mismatch");
    }
    const idx m = a.rows(), k = a.cols(), n = b.rows();
#pragma omp parallel for schedule(static) num_threads(detail::matmul_threads(m * k * n, m))
    for (idx i = 0; i < m; ++i) {
        const T* ai = a.row(i);
        T* ci = out.row(i);
        for (idx j = 0; j < n; ++j) {
            const T* bj = b.row(j);
            T acc{0};
            for (idx l = 0; l < k; ++l) {
                acc += ai[l] * bj[l];
            }
            ci[j] = acc;
        }
    }
}

template <class T>
Mat<T> matmul_a_bt(const Mat<T>& a, const Mat<T>& b) {
    Mat<T> out(a.rows(), b.rows());
    matmul_a_bt_into(a, b, out);
    return out;
}

template <class T>
void matmul_a_bt_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_a_bt shared dimension " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()));
    }
    if (out.rows() != a.rows() || out.cols() != b.rows()) {
        throw ShapeError("matmul_a_bt output shape mismatch");
    }
    const idx m = a.rows(), k = a.cols(), n = b.rows();
#pragma omp parallel for schedule(static) num_threads(detail::matmul_threads(m * k * n, m))
    for (idx i = 0; i < m; ++i) {
        const T* ai = a.row(i);
        T* ci = out.row(i);
        for (idx j = 0; j < n; ++j) {
            const T* bj = b.row(j);
            T acc{0};
            for (idx l = 0; l < k; ++l) {
                acc += ai[l] * bj[l];
            }
            ci[j] += acc;
        }
    }
}

// out += a^T * b as a sequence of rank-1 updates, rows of a/b visited in
// ascending order (single-threaded; every out element accumulates in the
// same fixed order).
template <class T>
void matmul_at_b_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_at_b shared dimension " + std::to_string(a.rows()) + " vs " +
                         std::to_string(b.rows()));
    }
    if (out.rows() != a.cols() || out.cols() != b.cols()) {
        throw ShapeError("matmul_at_b output shape mismatch");
    }
    const idx r = a.rows(), m = a.cols(), n = b.cols();
    for (idx l = 0; l < r; ++l) {
        const T* al = a.row(l);
        const T* bl = b.row(l);
        for (idx i = 0; i < m; ++i) {
            const T ali = al[i];
            if (ali == T{0}) {
                continue;
            }
            T* ci = out.row(i);
            for (idx j = 0; j < n; ++j) {
                ci[j] += ali * bl[j];
            }
        }
    }
}

template <class T>
Mat<T> matmul_at_b(const Mat<T>& a, const Mat<T>& b) {
    Mat<T> out(a.cols(), b.cols());
    matmul_at_b_acc(a, b, out);
    return out;
}

template <class T>
Mat<T> transpose(const Mat<T>& m) {
    Mat<T> t(m.cols(), m.rows());
    for (idx i = 0; i < m.rows(); ++i) {
        const T* mi = m.row(i);
        for (idx j = 0; j < m.cols(); ++j) {
            t(j, i) = mi[j];
        }
    }
    return t;
}

} // namespace saeg
