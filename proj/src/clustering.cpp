#include "saeg/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <json.hpp>

#include "saeg/error.hpp"
#include "saeg/io.hpp"

namespace saeg {

namespace {
constexpr double kPi = 3.14159265358979323846;

template <class T>
double angular_distance_impl(std::span<const T> p, std::span<const T> q) {
    if (p.size() != q.size()) {
        throw ShapeError("angular_distance: dimension mismatch");
    }
    double dot = 0.0, np = 0.0, nq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pv = static_cast<double>(p[i]);
        const double qv = static_cast<double>(q[i]);
        dot += pv * qv;
        np += pv * pv;
        nq += qv * qv;
    }
    if (np == 0.0 || nq == 0.0) {
        throw NumericError("angular_distance: zero vector");
    }
    double cosine = dot / std::sqrt(np * nq);
    cosine = std::clamp(cosine, -1.0, 1.0);
    return std::acos(cosine) / kPi;
}
} // namespace

double angular_distance(std::span<const double> p, std::span<const double> q) {
    return angular_distance_impl(p, q);
}

double angular_distance(std::span<const float> p, std::span<const float> q) {
    return angular_distance_impl(p, q);
}

void DistanceMatrix::validate() const {
    const int n = size();
    if (entries.cols() != n) {
        throw ShapeError("distance matrix is not square");
    }
    for (int i = 0; i < n; ++i) {
        if (entries(i, i) != 0.0) {
            throw DataError("distance matrix diagonal not zero at " + std::to_string(i));
        }
        for (int j = 0; j < n; ++j) {
            const double v = entries(i, j);
            if (!(v >= 0.0 && v <= 1.0)) {
                throw DataError("distance entry out of [0,1] at (" + std::to_string(i) + "," +
                                std::to_string(j) + ")");
            }
            if (std::abs(v - entries(j, i)) > 1e-9) {
                throw DataError("distance matrix asymmetric at (" + std::to_string(i) + "," +
                                std::to_string(j) + ")");
            }
        }
    }
}

void DistanceMatrix::save_csv(const std::filesystem::path& path) const {
    std::string out;
    const int n = size();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (j > 0) {
                out += ',';
            }
            out += format_g17(entries(i, j));
        }
        out += '\n';
    }
    atomic_write_file(path, out);
}

DistanceMatrix DistanceMatrix::load_csv(const std::filesystem::path& path) {
    const auto rows = parse_csv(read_file_bytes(path));
    const int n = static_cast<int>(rows.size());
    if (n == 0) {
        throw FormatError("empty distance matrix CSV: " + path.string());
    }
    DistanceMatrix d;
    d.entries = MatD(n, n);
    for (int i = 0; i < n; ++i) {
        if (static_cast<int>(rows[static_cast<std::size_t>(i)].size()) != n) {
            throw FormatError("ragged distance matrix CSV row " + std::to_string(i));
        }
        for (int j = 0; j < n; ++j) {
            d.entries(i, j) = std::stod(rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
        }
    }
    d.validate();
    return d;
}

DistanceMatrix mean_distance_matrix(const ActivationDataset& dataset,
                                    const std::vector<int>& layers, std::uint64_t n_tokens) {
    if (layers.empty()) {
        throw ConfigError("mean_distance_matrix: empty layer list");
    }
    if (n_tokens == 0) {
        throw ConfigError("mean_distance_matrix: n_tokens must be > 0");
    }
    const idx rows0 = dataset.rows(layers[0]).rows();
    for (int layer : layers) {
        if (dataset.rows(layer).rows() != rows0) {
            throw DataError("misaligned shards: layer " + std::to_string(layer) + " has " +
                            std::to_string(dataset.rows(layer).rows()) + " rows, expected " +
                            std::to_string(rows0));
        }
    }
    if (static_cast<std::uint64_t>(rows0) < n_tokens) {
        throw DataError("mean_distance_matrix: layers hold " + std::to_string(rows0) +
                        " rows, need " + std::to_string(n_tokens));
    }
    const int n = static_cast<int>(layers.size());
    DistanceMatrix d;
    d.entries = MatD(n, n);
    d.n_tokens = n_tokens;
    const idx dim = dataset.rows(layers[0]).cols();
    for (int p = 0; p < n; ++p) {
        const MatF& mp = dataset.rows(layers[static_cast<std::size_t>(p)]);
        for (int q = p + 1; q < n; ++q) {
            const MatF& mq = dataset.rows(layers[static_cast<std::size_t>(q)]);
            double sum = 0.0;
            for (std::uint64_t t = 0; t < n_tokens; ++t) {
                sum += angular_distance(
                    std::span<const float>(mp.row(static_cast<idx>(t)), static_cast<std::size_t>(dim)),
                    std::span<const float>(mq.row(static_cast<idx>(t)), static_cast<std::size_t>(dim)));
            }
            const double mean = sum / static_cast<double>(n_tokens);
            d.entries(p, q) = mean;
            d.entries(q, p) = mean;
        }
    }
    return d;
}

void LayerPartition::validate(int n_layers) const {
    if (static_cast<int>(groups.size()) != k || k < 1) {
        throw DataError("partition group count does not match k");
    }
    int expected = 0;
    for (const auto& g : groups) {
        if (g.empty()) {
            throw DataError("empty group in partition");
        }
        for (int layer : g) {
            if (layer != expected) {
                throw DataError("partition not contiguous/covering at layer " +
                                std::to_string(expected));
            }
            ++expected;
        }
    }
    if (expected != n_layers) {
        throw DataError("partition covers " + std::to_string(expected) + " layers, expected " +
                        std::to_string(n_layers));
    }
}

std::string LayerPartition::to_json() const {
    nlohmann::json j;
    j["k"] = k;
    j["groups"] = groups;
    return j.dump();
}

LayerPartition LayerPartition::from_json(const std::string& text) {
    LayerPartition p;
    try {
        const auto j = nlohmann::json::parse(text);
        p.k = j.at("k").get<int>();
        p.groups = j.at("groups").get<std::vector<std::vector<int>>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("partition JSON error: " + std::string(e.what()));
    }
    return p;
}

std::vector<LayerPartition> agglomerate_trace(const DistanceMatrix& d) {
    d.validate();
    const int n = d.size();
    // groups as [start, end] ranges; linkage[i] is the complete-linkage
    // distance between group i and group i+1, updated incrementally via
    // D(A u B, C) = max(D(A,C), D(B,C)).
    std::vector<std::pair<int, int>> ranges;
    ranges.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        ranges.emplace_back(i, i);
    }
    std::vector<double> linkage(static_cast<std::size_t>(n > 0 ? n - 1 : 0));
    for (int i = 0; i + 1 < n; ++i) {
        linkage[static_cast<std::size_t>(i)] = d.entries(i, i + 1);
    }

    auto snapshot = [&]() {
        LayerPartition p;
        p.k = static_cast<int>(ranges.size());
        for (const auto& [start, end] : ranges) {
            std::vector<int> g;
            for (int l = start; l <= end; ++l) {
                g.push_back(l);
            }
            p.groups.push_back(std::move(g));
        }
        return p;
    };

    std::vector<LayerPartition> trace(static_cast<std::size_t>(n));
    trace[static_cast<std::size_t>(n - 1)] = snapshot();
    while (ranges.size() > 1) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < linkage.size(); ++i) {
            if (linkage[i] < linkage[best]) { // ties keep the lower layer index
                best = i;
            }
        }
        ranges[best].second = ranges[best + 1].second;
        ranges.erase(ranges.begin() + static_cast<std::ptrdiff_t>(best) + 1);
        // recompute the two affected adjacencies from the merged range
        auto complete_linkage = [&](std::size_t gi, std::size_t gj) {
            double maxd = 0.0;
            for (int a = ranges[gi].first; a <= ranges[gi].second; ++a) {
                for (int b = ranges[gj].first; b <= ranges[gj].second; ++b) {
                    maxd = std::max(maxd, d.entries(a, b));
                }
            }
            return maxd;
        };
        std::vector<double> new_linkage(ranges.size() - 1);
        for (std::size_t i = 0; i + 1 < ranges.size(); ++i) {
            if (i + 1 == best || i == best) {
                new_linkage[i] = complete_linkage(i, i + 1);
            } else if (i < best) {
                new_linkage[i] = linkage[i];
            } else {
                new_linkage[i] = linkage[i + 1];
            }
        }
        linkage = std::move(new_linkage);
        trace[ranges.size() - 1] = snapshot();
    }
    return trace;
}

LayerPartition agglomerate(const DistanceMatrix& d, int k) {
    if (k < 1 || k > d.size()) {
        throw ConfigError("agglomerate: k " + std::to_string(k) + " out of range 1.." +
                          std::to_string(d.size()));
    }
    return agglomerate_trace(d)[static_cast<std::size_t>(k - 1)];
}

std::vector<LayerPartition> partition_table(const DistanceMatrix& d, int k_max) {
    if (k_max < 1 || k_max > d.size()) {
        throw ConfigError("partition_table: k_max out of range");
    }
    auto trace = agglomerate_trace(d);
    trace.resize(static_cast<std::size_t>(k_max));
    return trace;
}

} // namespace saeg
