#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "saeg/evaluation.hpp"
#include "saeg/runconfig.hpp"
#include "saeg/tasks.hpp"

namespace saeg {

/// Per-command bookkeeping; step_counts carries exact optimizer-step totals
/// per SAE (the speedup accounting).
struct RunSummary {
    std::string command;
    double wall_time_s = 0;
    std::map<std::string, std::uint64_t> step_counts;
    std::vector<std::string> outputs;
    std::vector<std::string> warnings;
    std::string config_hash;

    void save(const std::filesystem::path& path) const;
    static RunSummary load(const std::filesystem::path& path);
};

struct SaeRegistryEntry {
    std::string sae_id;
    std::string path; // relative to the registry file
    int k = 0;        // 0 for per-layer baselines
    int group_index = 0;
    std::vector<int> layers;
    std::uint64_t steps = 0;
    std::uint64_t seed = 0;
};

struct SaeRegistry {
    std::vector<SaeRegistryEntry> saes;
    std::filesystem::path base_dir;

    static SaeRegistry load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    void add(SaeRegistryEntry entry); // sae_ids must stay unique
    const SaeRegistryEntry* find(const std::string& sae_id) const;
    std::filesystem::path resolve(const std::string& rel) const { return base_dir / rel; }
};

struct PrepareOutcome {
    std::filesystem::path checkpoint;
    std::filesystem::path train_corpus;
    std::filesystem::path heldout_corpus;
    double heldout_ce = 0;
    double train_unigram_entropy = 0;
    double greater_than_acc = 0;
    RunSummary summary;
};

/// Generates the corpus, trains the desk model, and writes the checkpoint
/// plus the train/held-out corpus files.
PrepareOutcome cmd_prepare(const RunConfig& cfg, const std::filesystem::path& out_dir,
                           std::uint64_t seed);

struct CaptureOutcome {
    std::filesystem::path manifest;
    RunSummary summary;
};

/// Captures resid-post activations per layer over the corpus into shard
/// files (train + held-out splits) and writes the dataset manifest. An empty
/// `layers` defaults to all layers but the last.
CaptureOutcome cmd_capture(const RunConfig& cfg, const std::filesystem::path& model_checkpoint,
                           const std::filesystem::path& train_corpus,
                           const std::filesystem::path& heldout_corpus,
                           const std::filesystem::path& out_dir, std::vector<int> layers,
                           std::uint64_t train_tokens, std::uint64_t heldout_tokens,
                           std::uint64_t seed);

struct DistancesOutcome {
    std::filesystem::path csv;
    std::filesystem::path summary_json;
    RunSummary summary;
};

DistancesOutcome cmd_distances(const RunConfig& cfg, const std::filesystem::path& manifest_path,
                               std::uint64_t n_tokens, const std::filesystem::path& out_dir);

struct ClusterOutcome {
    std::vector<std::filesystem::path> partition_paths;
    RunSummary summary;
};

ClusterOutcome cmd_cluster(const std::filesystem::path& distances_csv, const std::vector<int>& ks,
                           const std::filesystem::path& out_dir);

struct TrainOutcome {
    std::filesystem::path registry;
    std::vector<std::string> sae_ids;
    RunSummary summary;
};

/// Baseline mode trains one SAE per manifest layer; partition mode trains
/// one SAE per group of the given partition JSON.
TrainOutcome cmd_train(const RunConfig& cfg, const std::filesystem::path& manifest_path,
                       const std::optional<std::filesystem::path>& partition_json, bool baseline,
                       const std::filesystem::path& out_dir, std::uint64_t seed);

struct EvalOutcome {
    std::filesystem::path csv;
    std::filesystem::path json;
    std::vector<ReconReport> reports;
    RunSummary summary;
};

EvalOutcome cmd_eval(const RunConfig& cfg, const std::filesystem::path& manifest_path,
                     const std::filesystem::path& registry_path,
                     const std::filesystem::path& out_dir,
                     const std::vector<std::string>& sae_filter = {});

struct DownstreamOutcome {
    std::filesystem::path ie_csv;
    std::filesystem::path curves_csv;
    RunSummary summary;
};

DownstreamOutcome cmd_downstream(const RunConfig& cfg, const std::filesystem::path& manifest_path,
                                 const std::filesystem::path& registry_path,
                                 const std::vector<TaskKind>& kinds, const std::string& method,
                                 const std::filesystem::path& out_dir, std::uint64_t seed,
                                 const std::vector<std::string>& sae_filter = {});

struct ReportOutcome {
    std::filesystem::path json;
    std::filesystem::path csv;
    RunSummary summary;
};

/// Merges eval reports and run summaries from completed run directories into
/// per-k averages plus the speedup table.
ReportOutcome cmd_report(const std::vector<std::filesystem::path>& run_dirs,
                         const std::filesystem::path& out_dir);

} // namespace saeg
