#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "saeg/dataset.hpp"
#include "saeg/error.hpp"
#include "saeg/io.hpp"
#include "saeg/rng.hpp"
#include "saeg/shard.hpp"

using namespace saeg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    const fs::path dir = fs::temp_directory_path() / "saeg_store_tests";
    fs::create_directories(dir);
    return dir;
}

MatF random_rows(idx rows, idx cols, RngStream& rng) {
    MatF m(rows, cols);
    for (idx i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>(rng.normal());
    }
    return m;
}

} // namespace

TEST_CASE("shard header is 28 bytes and payload sizes add up") {
    // magic(4) + version(4) + layer(4) + d_model(4) + n_rows(8) + dtype(4)
    const auto dir = temp_dir();
    const fs::path empty_path = dir / "empty.shard";
    CHECK(write_shard(3, MatF(0, 4), empty_path) == 0);
    CHECK(fs::file_size(empty_path) == 28);

    const fs::path one_path = dir / "one.shard";
    MatF one(1, 4, {1.0f, 2.0f, 3.0f, 4.0f});
    CHECK(write_shard(0, one, one_path) == 1);
    CHECK(fs::file_size(one_path) == 28 + 16);
}

TEST_CASE("shard round trip is bit exact for random finite payloads") {
    const auto dir = temp_dir();
    RngStream rng(77);
    for (int trial = 0; trial < 10; ++trial) {
        const idx rows = 1 + static_cast<idx>(rng.below(40));
        const idx cols = 1 + static_cast<idx>(rng.below(16));
        MatF m(rows, cols);
        for (idx i = 0; i < m.size(); ++i) {
            // random bit patterns, filtered to finite floats
            float v;
            do {
                v = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
            } while (!std::isfinite(v));
            m.data()[i] = v;
        }
        const fs::path path = dir / ("round" + std::to_string(trial) + ".shard");
        write_shard(static_cast<std::uint32_t>(trial), m, path);
        const auto [header, back] = read_shard(path);
        CHECK(header.layer_index == static_cast<std::uint32_t>(trial));
        CHECK(header.n_rows == static_cast<std::uint64_t>(rows));
        CHECK(header.d_model == static_cast<std::uint32_t>(cols));
        REQUIRE(back.size() == m.size());
        for (idx i = 0; i < m.size(); ++i) {
            CHECK(std::bit_cast<std::uint32_t>(back.data()[i]) ==
                  std::bit_cast<std::uint32_t>(m.data()[i]));
        }
    }
}

TEST_CASE("shard reader rejects bad magic and truncated payloads") {
    const auto dir = temp_dir();
    RngStream rng(3);
    const MatF m = random_rows(3, 4, rng);
    const fs::path path = dir / "victim.shard";
    write_shard(1, m, path);

    // flip a magic byte
    std::string bytes = read_file_bytes(path);
    bytes[0] = 'X';
    atomic_write_file(dir / "badmagic.shard", bytes);
    CHECK_THROWS_AS(read_shard(dir / "badmagic.shard"), FormatError);

    // drop one row of payload
    std::string truncated = read_file_bytes(path);
    truncated.resize(truncated.size() - 4 * sizeof(float));
    atomic_write_file(dir / "short.shard", truncated);
    CHECK_THROWS_AS(read_shard(dir / "short.shard"), CorruptionError);

    // empty header-only round trip
    write_shard(2, MatF(0, 4), dir / "empty2.shard");
    const auto [header, back] = read_shard(dir / "empty2.shard");
    CHECK(header.n_rows == 0);
    CHECK(back.rows() == 0);
    CHECK(back.cols() == 4);
}

TEST_CASE("write_shard rejects non-finite rows naming the row") {
    MatF m(2, 2, {1.0f, 2.0f, std::numeric_limits<float>::infinity(), 0.0f});
    try {
        write_shard(0, m, temp_dir() / "nan.shard");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("row 1") != std::string::npos);
    }
}

TEST_CASE("sampler draws deterministically and bit-exactly from stored rows") {
    RngStream rng(11);
    std::map<int, MatF> rows;
    rows.emplace(0, random_rows(50, 8, rng));
    rows.emplace(1, random_rows(50, 8, rng));
    const auto ds = ActivationDataset::from_rows(std::move(rows));

    BatchSampler s1({0, 1}, 16, RngStream(99));
    BatchSampler s2({0, 1}, 16, RngStream(99));
    const MatF b1 = s1.next(ds);
    const MatF b2 = s2.next(ds);
    for (idx i = 0; i < b1.size(); ++i) {
        CHECK(b1.data()[i] == b2.data()[i]);
    }

    // batch_size=1 draws a stored row bit-exactly
    BatchSampler s3({0, 1}, 1, RngStream(7));
    const MatF one = s3.next(ds);
    const int layer = s3.last_batch_layers()[0];
    bool found = false;
    const MatF& src = ds.rows(layer);
    for (idx r = 0; r < src.rows() && !found; ++r) {
        bool same = true;
        for (idx c = 0; c < src.cols(); ++c) {
            if (std::bit_cast<std::uint32_t>(src(r, c)) !=
                std::bit_cast<std::uint32_t>(one(0, c))) {
                same = false;
                break;
            }
        }
        found = same;
    }
    CHECK(found);

    CHECK_THROWS_AS(BatchSampler({}, 4, RngStream(1)), ConfigError);
}

TEST_CASE("sampler shares draws evenly between two equal layers") {
    RngStream rng(13);
    std::map<int, MatF> rows;
    rows.emplace(0, random_rows(64, 4, rng));
    rows.emplace(1, random_rows(64, 4, rng));
    const auto ds = ActivationDataset::from_rows(std::move(rows));

    const int draws = 100000;
    BatchSampler sampler({0, 1}, draws, RngStream(2024));
    sampler.next(ds);
    int layer0 = 0;
    for (int l : sampler.last_batch_layers()) {
        if (l == 0) {
            ++layer0;
        }
    }
    const double share = static_cast<double>(layer0) / draws;
    // binomial 3-sigma bound: 3 * sqrt(0.25 / draws)
    const double bound = 3.0 * std::sqrt(0.25 / draws);
    CHECK(std::abs(share - 0.5) < bound);
}

TEST_CASE("sampler layer-of-origin counts pass a chi-square check") {
    RngStream rng(17);
    std::map<int, MatF> rows;
    for (int l = 0; l < 4; ++l) {
        rows.emplace(l, random_rows(128, 4, rng));
    }
    const auto ds = ActivationDataset::from_rows(std::move(rows));
    const int draws = 80000;
    BatchSampler sampler({0, 1, 2, 3}, draws, RngStream(5150));
    sampler.next(ds);
    std::vector<int> counts(4, 0);
    for (int l : sampler.last_batch_layers()) {
        ++counts[static_cast<std::size_t>(l)];
    }
    const double expected = draws / 4.0;
    double chi2 = 0.0;
    for (int c : counts) {
        chi2 += (c - expected) * (c - expected) / expected;
    }
    CHECK(chi2 < 16.266); // chi-square 0.999 quantile, 3 dof
}

TEST_CASE("layer_mean on small and statistical cases") {
    std::map<int, MatF> rows;
    rows.emplace(0, MatF(2, 2, {1.0f, 1.0f, 3.0f, 3.0f}));
    rows.emplace(1, MatF(1, 2, {4.0f, -2.0f}));
    const auto ds = ActivationDataset::from_rows(std::move(rows));
    const auto m0 = layer_mean(ds, 0);
    CHECK(m0[0] == doctest::Approx(2.0));
    CHECK(m0[1] == doctest::Approx(2.0));
    const auto m1 = layer_mean(ds, 1);
    CHECK(m1[0] == doctest::Approx(4.0));
    CHECK(m1[1] == doctest::Approx(-2.0));
    CHECK_THROWS_AS(layer_mean(ds, 9), ConfigError);

    // CLT bound: 1e4 standard-normal rows, each coordinate within 5/sqrt(1e4)
    RngStream rng(31);
    std::map<int, MatF> big;
    big.emplace(0, random_rows(10000, 4, rng));
    const auto ds2 = ActivationDataset::from_rows(std::move(big));
    for (double v : layer_mean(ds2, 0)) {
        CHECK(std::abs(v) < 5.0 / std::sqrt(10000.0));
    }
}

TEST_CASE("manifest round trip") {
    const auto dir = temp_dir() / "manifest";
    fs::create_directories(dir);
    RngStream rng(41);
    const MatF rows = random_rows(6, 4, rng);
    write_shard(0, rows, dir / "l0_train.shard");
    write_shard(0, rows, dir / "l0_heldout.shard");

    DatasetManifest m;
    m.d_model = 4;
    m.context = 8;
    m.seed = 17;
    m.rng_algorithm = RngStream::algorithm_id;
    LayerShards ls;
    ls.layer = 0;
    ls.train_shard = "l0_train.shard";
    ls.train_rows = 6;
    ls.heldout_shard = "l0_heldout.shard";
    ls.heldout_rows = 6;
    ls.train_mean = {0.0, 0.0, 0.0, 0.0};
    m.layers.push_back(ls);
    m.save(dir / "manifest.json");

    const auto back = DatasetManifest::load(dir / "manifest.json");
    CHECK(back.d_model == 4);
    CHECK(back.seed == 17);
    CHECK(back.layers.size() == 1);
    const auto ds = ActivationDataset::load(back, ActivationDataset::Split::train);
    CHECK(ds.rows(0).rows() == 6);
}
