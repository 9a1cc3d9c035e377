#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "saeg/matrix.hpp"
#include "saeg/rng.hpp"

namespace saeg {

struct LayerShards {
    int layer = 0;
    std::string train_shard;
    std::uint64_t train_rows = 0;
    std::string heldout_shard;
    std::uint64_t heldout_rows = 0;
    std::vector<double> train_mean; // frozen per-layer mean of the train split
};

/// JSON manifest tying together one capture run: shard files per layer plus
/// the corpus/model files they were derived from. Paths are stored relative
/// to the manifest's directory.
struct DatasetManifest {
    int d_model = 0;
    int context = 0;
    std::uint64_t seed = 0;
    std::string rng_algorithm;
    std::string model_checkpoint;
    std::string train_corpus;
    std::string heldout_corpus;
    std::vector<LayerShards> layers;

    std::filesystem::path base_dir; // set on load; not serialized

    static DatasetManifest load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    const LayerShards& layer_info(int layer) const;
    std::filesystem::path resolve(const std::string& rel) const { return base_dir / rel; }
    std::vector<int> layer_indices() const;
};

/// In-memory activation rows for a set of layers (one split of a manifest).
class ActivationDataset {
  public:
    ActivationDataset() = default;

    enum class Split { train, heldout };
    static ActivationDataset load(const DatasetManifest& manifest, Split split);

    /// Builds a dataset directly from in-memory per-layer matrices.
    static ActivationDataset from_rows(std::map<int, MatF> rows);

    int d_model() const { return d_model_; }
    bool has_layer(int layer) const { return rows_.count(layer) > 0; }
    const MatF& rows(int layer) const;
    std::vector<int> layers() const;
    std::uint64_t total_rows(const std::vector<int>& target_layers) const;

  private:
    int d_model_ = 0;
    std::map<int, MatF> rows_;
};

/// Streaming arithmetic mean of one layer's rows, 64-bit accumulation.
std::vector<double> layer_mean(const ActivationDataset& dataset, int layer);

/// Draws batches uniformly with replacement over all (layer, row) pairs of
/// the target layers; deterministic given the stream seed.
class BatchSampler {
  public:
    BatchSampler(std::vector<int> target_layers, idx batch_size, RngStream rng);

    MatF next(const ActivationDataset& dataset);

    const std::vector<int>& target_layers() const { return target_layers_; }
    idx batch_size() const { return batch_size_; }

    /// Layer of origin for each row of the most recent batch (test hook).
    const std::vector<int>& last_batch_layers() const { return last_layers_; }

  private:
    std::vector<int> target_layers_;
    idx batch_size_;
    RngStream rng_;
    std::vector<int> last_layers_;
};

} // namespace saeg
