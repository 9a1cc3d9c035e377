#include "saeg/dataset.hpp"

#include <algorithm>

#include <json.hpp>

#include "saeg/error.hpp"
#include "saeg/io.hpp"
#include "saeg/shard.hpp"

namespace saeg {

using nlohmann::json;

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file_bytes(path));
    } catch (const json::parse_error& e) {
        throw FormatError("manifest parse error: " + std::string(e.what()));
    }
    DatasetManifest m;
    try {
        m.d_model = j.at("d_model").get<int>();
        m.context = j.at("context").get<int>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.rng_algorithm = j.at("rng_algorithm").get<std::string>();
        m.model_checkpoint = j.value("model_checkpoint", std::string());
        m.train_corpus = j.value("train_corpus", std::string());
        m.heldout_corpus = j.value("heldout_corpus", std::string());
        for (const auto& lj : j.at("layers")) {
            LayerShards ls;
            ls.layer = lj.at("layer").get<int>();
            ls.train_shard = lj.at("train_shard").get<std::string>();
            ls.train_rows = lj.at("train_rows").get<std::uint64_t>();
            ls.heldout_shard = lj.value("heldout_shard", std::string());
            ls.heldout_rows = lj.value("heldout_rows", std::uint64_t{0});
            if (lj.contains("train_mean")) {
                ls.train_mean = lj.at("train_mean").get<std::vector<double>>();
            }
            m.layers.push_back(std::move(ls));
        }
    } catch (const json::exception& e) {
        throw FormatError("manifest field error: " + std::string(e.what()));
    }
    m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
    json j;
    j["schema"] = "saeg-dataset-v1";
    j["d_model"] = d_model;
    j["context"] = context;
    j["seed"] = seed;
    j["rng_algorithm"] = rng_algorithm;
    j["model_checkpoint"] = model_checkpoint;
    j["train_corpus"] = train_corpus;
    j["heldout_corpus"] = heldout_corpus;
    j["layers"] = json::array();
    for (const auto& ls : layers) {
        json lj;
        lj["layer"] = ls.layer;
        lj["train_shard"] = ls.train_shard;
        lj["train_rows"] = ls.train_rows;
        lj["heldout_shard"] = ls.heldout_shard;
        lj["heldout_rows"] = ls.heldout_rows;
        lj["train_mean"] = ls.train_mean;
        j["layers"].push_back(std::move(lj));
    }
    atomic_write_file(path, j.dump(2) + "\n");
}

const LayerShards& DatasetManifest::layer_info(int layer) const {
    for (const auto& ls : layers) {
        if (ls.layer == layer) {
            return ls;
        }
    }
    throw ConfigError("manifest has no layer " + std::to_string(layer));
}

std::vector<int> DatasetManifest::layer_indices() const {
    std::vector<int> out;
    out.reserve(layers.size());
    for (const auto& ls : layers) {
        out.push_back(ls.layer);
    }
    return out;
}

ActivationDataset ActivationDataset::load(const DatasetManifest& manifest, Split split) {
    std::map<int, MatF> rows;
    for (const auto& ls : manifest.layers) {
        const std::string& rel = split == Split::train ? ls.train_shard : ls.heldout_shard;
        if (rel.empty()) {
            throw ConfigError("manifest layer " + std::to_string(ls.layer) +
                              " has no shard for the requested split");
        }
        auto [header, mat] = read_shard(manifest.resolve(rel));
        if (static_cast<int>(header.layer_index) != ls.layer) {
            throw DataError("shard layer_index " + std::to_string(header.layer_index) +
                            " does not match manifest layer " + std::to_string(ls.layer));
        }
        rows.emplace(ls.layer, std::move(mat));
    }
    return from_rows(std::move(rows));
}

ActivationDataset ActivationDataset::from_rows(std::map<int, MatF> rows) {
    ActivationDataset ds;
    for (const auto& [layer, mat] : rows) {
        if (mat.rows() == 0) {
            throw DataError("layer " + std::to_string(layer) + " has no rows");
        }
        if (ds.d_model_ == 0) {
            ds.d_model_ = static_cast<int>(mat.cols());
        } else if (ds.d_model_ != static_cast<int>(mat.cols())) {
            throw DataError("inconsistent d_model across layers");
        }
    }
    ds.rows_ = std::move(rows);
    return ds;
}

const MatF& ActivationDataset::rows(int layer) const {
    auto it = rows_.find(layer);
    if (it == rows_.end()) {
        throw ConfigError("dataset has no layer " + std::to_string(layer));
    }
    return it->second;
}

std::vector<int> ActivationDataset::layers() const {
    std::vector<int> out;
    out.reserve(rows_.size());
    for (const auto& [layer, _] : rows_) {
        out.push_back(layer);
    }
    return out;
}

std::uint64_t ActivationDataset::total_rows(const std::vector<int>& target_layers) const {
    std::uint64_t total = 0;
    for (int layer : target_layers) {
        total += static_cast<std::uint64_t>(rows(layer).rows());
    }
    return total;
}

std::vector<double> layer_mean(const ActivationDataset& dataset, int layer) {
    const MatF& m = dataset.rows(layer);
    std::vector<double> mean(static_cast<std::size_t>(m.cols()), 0.0);
    for (idx r = 0; r < m.rows(); ++r) {
        const float* p = m.row(r);
        for (idx c = 0; c < m.cols(); ++c) {
            mean[static_cast<std::size_t>(c)] += static_cast<double>(p[c]);
        }
    }
    const double inv = 1.0 / static_cast<double>(m.rows());
    for (double& v : mean) {
        v *= inv;
    }
    return mean;
}

BatchSampler::BatchSampler(std::vector<int> target_layers, idx batch_size, RngStream rng)
    : target_layers_(std::move(target_layers)), batch_size_(batch_size), rng_(rng) {
    if (target_layers_.empty()) {
        throw ConfigError("BatchSampler: empty target layer set");
    }
    if (batch_size_ <= 0) {
        throw ConfigError("BatchSampler: batch_size must be > 0");
    }
}

MatF BatchSampler::next(const ActivationDataset& dataset) {
    // Cumulative row counts define the uniform distribution over
    // (layer, row) pairs of the target layers.
    std::vector<std::uint64_t> cum;
    cum.reserve(target_layers_.size());
    std::uint64_t total = 0;
    for (int layer : target_layers_) {
        total += static_cast<std::uint64_t>(dataset.rows(layer).rows());
        cum.push_back(total);
    }
    MatF batch(batch_size_, dataset.d_model());
    last_layers_.assign(static_cast<std::size_t>(batch_size_), -1);
    for (idx b = 0; b < batch_size_; ++b) {
        const std::uint64_t pick = rng_.below(total);
        std::size_t li = 0;
        while (pick >= cum[li]) {
            ++li;
        }
        const std::uint64_t base = li == 0 ? 0 : cum[li - 1];
        const int layer = target_layers_[li];
        const MatF& src = dataset.rows(layer);
        const idx row = static_cast<idx>(pick - base);
        std::copy_n(src.row(row), src.cols(), batch.row(b));
        last_layers_[static_cast<std::size_t>(b)] = layer;
    }
    return batch;
}

} // namespace saeg
