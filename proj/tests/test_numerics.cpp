#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "saeg/adam.hpp"
#include "saeg/error.hpp"
#include "saeg/matrix.hpp"
#include "saeg/numerics.hpp"
#include "saeg/parallel.hpp"
#include "saeg/rng.hpp"

using namespace saeg;

namespace {

MatD random_mat(idx rows, idx cols, RngStream& rng) {
    MatD m(rows, cols);
    for (idx r = 0; r < rows; ++r) {
        for (idx c = 0; c < cols; ++c) {
            m(r, c) = rng.normal();
        }
    }
    return m;
}

} // namespace

TEST_CASE("matmul identity and hand cases") {
    const MatD a(2, 2, {1.0, 2.0, 3.0, 4.0});
    const MatD eye(2, 2, {1.0, 0.0, 0.0, 1.0});
    const MatD ia = matmul(eye, a);
    for (idx i = 0; i < 4; ++i) {
        CHECK(ia.data()[i] == a.data()[i]);
    }

    const MatD b(2, 1, {0.0, 1.0});
    const MatD ab = matmul(a, b);
    CHECK(ab(0, 0) == 2.0);
    CHECK(ab(1, 0) == 4.0);

    const MatD zero(2, 2);
    const MatD za = matmul(zero, a);
    for (idx i = 0; i < 4; ++i) {
        CHECK(za.data()[i] == 0.0);
    }
}

TEST_CASE("matmul rejects dimension mismatch") {
    const MatD a(2, 3);
    const MatD b(2, 2);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul associativity on random matrices") {
    RngStream rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const MatD a = random_mat(4, 5, rng);
        const MatD b = random_mat(5, 3, rng);
        const MatD c = random_mat(3, 6, rng);
        const MatD left = matmul(matmul(a, b), c);
        const MatD right = matmul(a, matmul(b, c));
        for (idx i = 0; i < left.size(); ++i) {
            CHECK(left.data()[i] == doctest::Approx(right.data()[i]).epsilon(1e-10));
        }
    }
}

TEST_CASE("matmul is bit-identical across runs and thread counts") {
    RngStream rng(11);
    const MatD a = random_mat(17, 23, rng);
    const MatD b = random_mat(23, 9, rng);
    set_thread_cap(1);
    const MatD r1 = matmul(a, b);
    set_thread_cap(4);
    const MatD r2 = matmul(a, b);
    const MatD r3 = matmul(a, b);
    set_thread_cap(0);
    for (idx i = 0; i < r1.size(); ++i) {
        CHECK(r1.data()[i] == r2.data()[i]);
        CHECK(r2.data()[i] == r3.data()[i]);
    }
}

TEST_CASE("checked matrix construction rejects non-finite entries") {
    CHECK_THROWS_AS(MatD::checked(1, 2, {1.0, std::nan("")}), NumericError);
    CHECK_NOTHROW(MatD::checked(1, 2, {1.0, -2.0}));
}

TEST_CASE("adam zero gradient leaves params unchanged and bumps t") {
    std::vector<double> params = {1.5, -2.25, 0.0};
    std::vector<double> grads = {0.0, 0.0, 0.0};
    auto st = AdamState<double>::like(3, 0.0, 0.999);
    st.m = {0.3, -0.1, 0.0}; // arbitrary pre-existing state
    st.v = {0.2, 0.5, 0.0};
    st.t = 7;
    adam_step<double>(params, grads, st, 1e-2, "p");
    CHECK(st.t == 8);
    CHECK(params[0] == 1.5);
    CHECK(params[1] == -2.25);
    CHECK(params[2] == 0.0);
}

TEST_CASE("adam single step matches the hand-evaluated recurrence") {
    // beta1=0, beta2=0.999, t: 0 -> 1, g=1, lr=1e-2, eps=1e-8:
    // m_hat = g, v = 1e-3, v_hat = v / (1 - 0.999) = 1,
    // update = -lr * 1 / (sqrt(1) + eps)
    std::vector<double> params = {1.0};
    std::vector<double> grads = {1.0};
    auto st = AdamState<double>::like(1, 0.0, 0.999);
    adam_step<double>(params, grads, st, 1e-2, "p");
    const double expected = 1.0 - 1e-2 * 1.0 / (1.0 + 1e-8);
    CHECK(params[0] == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("adam with beta1=0 moves against the gradient sign twice") {
    std::vector<double> params = {0.7};
    auto st = AdamState<double>::like(1, 0.0, 0.999);
    const std::vector<double> grads = {2.5};
    const double p0 = params[0];
    adam_step<double>(params, grads, st, 1e-3, "p");
    const double p1 = params[0];
    adam_step<double>(params, grads, st, 1e-3, "p");
    const double p2 = params[0];
    CHECK(p1 < p0);
    CHECK(p2 < p1);
}

TEST_CASE("adam rejects non-finite gradients naming the block") {
    std::vector<double> params = {1.0};
    std::vector<double> grads = {std::numeric_limits<double>::infinity()};
    auto st = AdamState<double>::like(1, 0.0, 0.999);
    try {
        adam_step<double>(params, grads, st, 1e-2, "w_enc");
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("w_enc") != std::string::npos);
    }
}

TEST_CASE("finite differences on simple functions") {
    auto square = [](std::span<const double> x) { return x[0] * x[0]; };
    const std::vector<double> x0 = {3.0};
    const auto g = finite_diff_grad(square, x0, 1e-5);
    CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-6));

    auto constant = [](std::span<const double>) { return 4.25; };
    const std::vector<double> x1 = {1.0, -2.0, 3.0};
    for (double gi : finite_diff_grad(constant, x1, 1e-5)) {
        CHECK(gi == 0.0);
    }

    auto l1 = [](std::span<const double> x) { return std::abs(x[0]) + std::abs(x[1]); };
    const std::vector<double> x2 = {2.0, -3.0};
    const auto gl1 = finite_diff_grad(l1, x2, 1e-5);
    CHECK(gl1[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(gl1[1] == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("finite differences match (A + A^T)x for quadratic forms") {
    RngStream rng(23);
    const int n = 6;
    const MatD a = random_mat(n, n, rng);
    std::vector<double> x(n);
    for (auto& v : x) {
        v = rng.normal();
    }
    auto quad = [&](std::span<const double> p) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                total += p[i] * a(i, j) * p[j];
            }
        }
        return total;
    };
    const auto fd = finite_diff_grad(quad, x, 1e-5);
    for (int i = 0; i < n; ++i) {
        double analytic = 0.0;
        for (int j = 0; j < n; ++j) {
            analytic += (a(i, j) + a(j, i)) * x[j];
        }
        CHECK(fd[i] == doctest::Approx(analytic).epsilon(1e-5));
    }
}

TEST_CASE("finite differences reject non-finite objectives") {
    auto bad = [](std::span<const double>) { return std::nan(""); };
    const std::vector<double> x = {1.0};
    CHECK_THROWS_AS(finite_diff_grad(bad, x, 1e-5), NumericError);
}

TEST_CASE("rng streams are reproducible and seed-sensitive") {
    RngStream a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    bool differs = false;
    RngStream a2(42);
    for (int i = 0; i < 10; ++i) {
        if (a2.next_u64() != c.next_u64()) {
            differs = true;
        }
    }
    CHECK(differs);
    CHECK(a.position() == 100);
}

TEST_CASE("rng below is in range and uniform-ish") {
    RngStream rng(5);
    std::vector<int> counts(7, 0);
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        const auto v = rng.below(7);
        REQUIRE(v < 7);
        ++counts[static_cast<std::size_t>(v)];
    }
    for (int c : counts) {
        CHECK(std::abs(c - n / 7) < 600); // ~6 sigma for a binomial(n, 1/7)
    }
    CHECK_THROWS_AS(rng.below(0), ConfigError);
}

TEST_CASE("rng normal has sane moments") {
    RngStream rng(9);
    double sum = 0.0, sum_sq = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        sum += z;
        sum_sq += z * z;
    }
    CHECK(sum / n == doctest::Approx(0.0).epsilon(0.02));
    CHECK(sum_sq / n == doctest::Approx(1.0).epsilon(0.02));
}
