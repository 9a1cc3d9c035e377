#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "saeg/dataset.hpp"
#include "saeg/matrix.hpp"

namespace saeg {

/// (1/pi) * arccos(cos similarity), a metric in [0,1] on directions.
/// Both vectors must be nonzero; the cosine is clamped to [-1,1] first.
double angular_distance(std::span<const double> p, std::span<const double> q);
double angular_distance(std::span<const float> p, std::span<const float> q);

/// Symmetric matrix of mean angular distances between layers.
struct DistanceMatrix {
    MatD entries; // size x size, zero diagonal
    std::uint64_t n_tokens = 0;

    int size() const { return static_cast<int>(entries.rows()); }
    void validate() const; // zero diagonal, symmetry 1e-9, entries in [0,1]

    void save_csv(const std::filesystem::path& path) const;
    static DistanceMatrix load_csv(const std::filesystem::path& path);
};

/// Entry (p,q) = mean over the first n_tokens aligned rows of the angular
/// distance between the two layers' activations at the same token.
DistanceMatrix mean_distance_matrix(const ActivationDataset& dataset,
                                    const std::vector<int>& layers, std::uint64_t n_tokens);

/// Ordered contiguous groups covering positions 0..L'-1.
struct LayerPartition {
    int k = 0;
    std::vector<std::vector<int>> groups;

    void validate(int n_layers) const; // contiguous, disjoint, covering
    std::string to_json() const;
    static LayerPartition from_json(const std::string& text);
};

/// One bottom-up merge trace: starts from singletons and repeatedly merges
/// the adjacent pair with minimal complete-linkage distance (ties to the
/// lower layer index). trace[k-1] is the partition with k groups; all
/// partitions come from the same trace, so they are nested.
std::vector<LayerPartition> agglomerate_trace(const DistanceMatrix& d);

LayerPartition agglomerate(const DistanceMatrix& d, int k);

/// Partitions for k = 1..k_max.
std::vector<LayerPartition> partition_table(const DistanceMatrix& d, int k_max);

} // namespace saeg
