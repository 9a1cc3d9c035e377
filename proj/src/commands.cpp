#include "saeg/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include <json.hpp>

#include "saeg/attribution.hpp"
#include "saeg/clustering.hpp"
#include "saeg/error.hpp"
#include "saeg/io.hpp"
#include "saeg/sae_train.hpp"
#include "saeg/shard.hpp"

namespace saeg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class Stopwatch {
  public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_;
};

DeskConfig desk_config_from(const RunConfig& cfg, std::uint64_t seed) {
    DeskConfig dc;
    dc.n_layers = cfg.get_int("model.n_layers");
    dc.d_model = cfg.get_int("model.d_model");
    dc.n_heads = cfg.get_int("model.n_heads");
    dc.vocab = cfg.get_int("model.vocab");
    dc.context = cfg.get_int("model.context");
    dc.seed = seed;
    dc.validate();
    return dc;
}

SaeTrainConfig sae_config_from(const RunConfig& cfg) {
    SaeTrainConfig sc;
    sc.expansion = cfg.get_int("sae.expansion");
    sc.lambda = cfg.get_double("sae.lambda");
    sc.lr = cfg.get_double("sae.lr");
    sc.batch = cfg.get_int("sae.batch");
    sc.beta1 = cfg.get_double("sae.beta1");
    sc.beta2 = cfg.get_double("sae.beta2");
    sc.total_tokens = cfg.get_u64("sae.total_tokens");
    sc.l1_warmup_frac = cfg.get_double("sae.l1_warmup_frac");
    sc.lr_decay_frac = cfg.get_double("sae.lr_decay_frac");
    sc.checkpoint_every_steps = cfg.get_u64("sae.checkpoint_every_steps");
    sc.mode = jumprelu_mode_from_string(cfg.get("sae.mode"));
    sc.theta_init = cfg.get_double("sae.theta_init");
    sc.ste_bandwidth = cfg.get_double("sae.ste_bandwidth");
    sc.validate();
    return sc;
}

std::vector<std::vector<std::uint32_t>> corpus_sequences(const Corpus& corpus, std::size_t n) {
    if (corpus.n_sequences() < n) {
        throw DataError("corpus holds " + std::to_string(corpus.n_sequences()) +
                        " sequences, need " + std::to_string(n));
    }
    std::vector<std::vector<std::uint32_t>> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto seq = corpus.sequence(i);
        out.emplace_back(seq.begin(), seq.end());
    }
    return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t end = csv.find(',', pos);
        if (end == std::string::npos) {
            end = csv.size();
        }
        out.push_back(std::stoi(csv.substr(pos, end - pos)));
        pos = end + 1;
    }
    return out;
}

} // namespace

void RunSummary::save(const fs::path& path) const {
    json j;
    j["command"] = command;
    j["wall_time_s"] = wall_time_s;
    j["step_counts"] = step_counts;
    j["outputs"] = outputs;
    j["warnings"] = warnings;
    j["config_hash"] = config_hash;
    atomic_write_file(path, j.dump(2) + "\n");
}

RunSummary RunSummary::load(const fs::path& path) {
    RunSummary s;
    try {
        const auto j = json::parse(read_file_bytes(path));
        s.command = j.at("command").get<std::string>();
        s.wall_time_s = j.at("wall_time_s").get<double>();
        s.step_counts = j.at("step_counts").get<std::map<std::string, std::uint64_t>>();
        s.outputs = j.at("outputs").get<std::vector<std::string>>();
        s.warnings = j.value("warnings", std::vector<std::string>{});
        s.config_hash = j.at("config_hash").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError("run summary parse error: " + std::string(e.what()));
    }
    return s;
}

SaeRegistry SaeRegistry::load(const fs::path& path) {
    SaeRegistry reg;
    reg.base_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    try {
        const auto j = json::parse(read_file_bytes(path));
        for (const auto& sj : j.at("saes")) {
            SaeRegistryEntry e;
            e.sae_id = sj.at("sae_id").get<std::string>();
            e.path = sj.at("path").get<std::string>();
            e.k = sj.at("k").get<int>();
            e.group_index = sj.at("group_index").get<int>();
            e.layers = sj.at("layers").get<std::vector<int>>();
            e.steps = sj.at("steps").get<std::uint64_t>();
            e.seed = sj.at("seed").get<std::uint64_t>();
            reg.saes.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw FormatError("registry parse error: " + std::string(e.what()));
    }
    return reg;
}

void SaeRegistry::save(const fs::path& path) const {
    json j;
    j["saes"] = json::array();
    for (const auto& e : saes) {
        json sj;
        sj["sae_id"] = e.sae_id;
        sj["path"] = e.path;
        sj["k"] = e.k;
        sj["group_index"] = e.group_index;
        sj["layers"] = e.layers;
        sj["steps"] = e.steps;
        sj["seed"] = e.seed;
        j["saes"].push_back(std::move(sj));
    }
    atomic_write_file(path, j.dump(2) + "\n");
}

void SaeRegistry::add(SaeRegistryEntry entry) {
    if (find(entry.sae_id) != nullptr) {
        throw ConfigError("duplicate sae_id in registry: " + entry.sae_id);
    }
    saes.push_back(std::move(entry));
}

const SaeRegistryEntry* SaeRegistry::find(const std::string& sae_id) const {
    for (const auto& e : saes) {
        if (e.sae_id == sae_id) {
            return &e;
        }
    }
    return nullptr;
}

PrepareOutcome cmd_prepare(const RunConfig& cfg, const fs::path& out_dir, std::uint64_t seed) {
    Stopwatch clock;
    fs::create_directories(out_dir);
    const DeskConfig dc = desk_config_from(cfg, seed);

    const int n_train = cfg.get_int("corpus.train_sequences");
    const int n_heldout = cfg.get_int("corpus.heldout_sequences");
    const Corpus full = gen_corpus(seed, n_train + n_heldout, dc);
    Corpus train{dc.context, {}};
    Corpus heldout{dc.context, {}};
    const std::size_t split = static_cast<std::size_t>(n_train) *
                              static_cast<std::size_t>(dc.context);
    train.data.assign(full.data.begin(), full.data.begin() + static_cast<std::ptrdiff_t>(split));
    heldout.data.assign(full.data.begin() + static_cast<std::ptrdiff_t>(split), full.data.end());

    PrepareOutcome out;
    out.train_corpus = out_dir / "train_corpus.bin";
    out.heldout_corpus = out_dir / "heldout_corpus.bin";
    write_corpus(train, out.train_corpus);
    write_corpus(heldout, out.heldout_corpus);

    auto params = init_desk_model<float>(dc);
    const int steps = cfg.get_int("model.train_steps");
    auto [trained, stats] = train_desk_model(std::move(params), train, steps,
                                             cfg.get_double("model.lr"),
                                             cfg.get_int("model.train_batch"));
    out.heldout_ce = corpus_cross_entropy(trained, heldout);
    out.train_unigram_entropy = unigram_entropy(train, dc.vocab);
    out.greater_than_acc = greater_than_accuracy(trained, seed ^ 0x6b43a9b5ULL, 200);
    if (steps > 0 && out.heldout_ce >= out.train_unigram_entropy) {
        throw TrainingError("desk model held-out CE " + format_g17(out.heldout_ce) +
                            " did not beat the unigram baseline " +
                            format_g17(out.train_unigram_entropy));
    }

    out.checkpoint = out_dir / "desk_model.ckpt";
    save_desk_checkpoint(trained, out.checkpoint);

    json metrics;
    metrics["heldout_ce"] = out.heldout_ce;
    metrics["train_unigram_entropy"] = out.train_unigram_entropy;
    metrics["greater_than_accuracy"] = out.greater_than_acc;
    metrics["final_train_loss"] = stats.loss_per_step.empty() ? 0.0 : stats.loss_per_step.back();
    metrics["steps"] = stats.steps;
    atomic_write_file(out_dir / "prepare_metrics.json", metrics.dump(2) + "\n");

    out.summary.command = "prepare";
    out.summary.wall_time_s = clock.seconds();
    out.summary.step_counts["desk_model"] = static_cast<std::uint64_t>(stats.steps);
    out.summary.outputs = {"desk_model.ckpt", "train_corpus.bin", "heldout_corpus.bin",
                           "prepare_metrics.json"};
    out.summary.config_hash = cfg.resolved_hash();
    out.summary.save(out_dir / "prepare_summary.json");
    return out;
}

CaptureOutcome cmd_capture(const RunConfig& cfg, const fs::path& model_checkpoint,
                           const fs::path& train_corpus, const fs::path& heldout_corpus,
                           const fs::path& out_dir, std::vector<int> layers,
                           std::uint64_t train_tokens, std::uint64_t heldout_tokens,
                           std::uint64_t seed) {
    Stopwatch clock;
    fs::create_directories(out_dir);
    const DeskParams<float> model = load_desk_checkpoint(model_checkpoint);
    const DeskConfig& dc = model.cfg;
    if (layers.empty()) {
        for (int l = 0; l + 1 < dc.n_layers; ++l) {
            layers.push_back(l); // the last layer stays out of the grouping path
        }
    }
    for (int l : layers) {
        if (l < 0 || l >= dc.n_layers) {
            throw ConfigError("capture layer " + std::to_string(l) + " out of range");
        }
    }

    const Corpus train = read_corpus(train_corpus, dc.context);
    const Corpus heldout = read_corpus(heldout_corpus, dc.context);

    auto capture_split = [&](const Corpus& corpus, std::uint64_t want_rows)
        -> std::map<int, MatF> {
        const auto per_seq = static_cast<std::uint64_t>(dc.context);
        const std::uint64_t need_seqs = (want_rows + per_seq - 1) / per_seq;
        if (corpus.n_sequences() < need_seqs) {
            throw DataError("corpus has " + std::to_string(corpus.n_sequences()) +
                            " sequences, capture needs " + std::to_string(need_seqs));
        }
        std::map<int, MatF> rows;
        for (int l : layers) {
            rows.emplace(l, MatF(static_cast<idx>(want_rows), dc.d_model));
        }
        std::uint64_t written = 0;
        for (std::uint64_t s = 0; s < need_seqs; ++s) {
            const auto out = forward(model, corpus.sequence(static_cast<std::size_t>(s)));
            const std::uint64_t take =
                std::min<std::uint64_t>(per_seq, want_rows - written);
            for (int l : layers) {
                const Mat<float>& src = out.hooks.resid_post[static_cast<std::size_t>(l)];
                std::copy_n(src.data(), take * static_cast<std::uint64_t>(dc.d_model),
                            rows.at(l).row(static_cast<idx>(written)));
            }
            written += take;
        }
        return rows;
    };

    const auto train_rows = capture_split(train, train_tokens);
    const auto heldout_rows = capture_split(heldout, heldout_tokens);

    DatasetManifest manifest;
    manifest.d_model = dc.d_model;
    manifest.context = dc.context;
    manifest.seed = seed;
    manifest.rng_algorithm = RngStream::algorithm_id;
    manifest.model_checkpoint =
        fs::relative(model_checkpoint, out_dir).string();
    manifest.train_corpus = fs::relative(train_corpus, out_dir).string();
    manifest.heldout_corpus = fs::relative(heldout_corpus, out_dir).string();

    CaptureOutcome out;
    for (int l : layers) {
        LayerShards ls;
        ls.layer = l;
        ls.train_shard = "layer" + std::to_string(l) + "_train.shard";
        ls.heldout_shard = "layer" + std::to_string(l) + "_heldout.shard";
        ls.train_rows = write_shard(static_cast<std::uint32_t>(l), train_rows.at(l),
                                    out_dir / ls.train_shard);
        ls.heldout_rows = write_shard(static_cast<std::uint32_t>(l), heldout_rows.at(l),
                                      out_dir / ls.heldout_shard);
        // frozen per-layer train mean, used later as mu in R^2
        const MatF& m = train_rows.at(l);
        std::vector<double> mean(static_cast<std::size_t>(m.cols()), 0.0);
        for (idx r = 0; r < m.rows(); ++r) {
            const float* p = m.row(r);
            for (idx c = 0; c < m.cols(); ++c) {
                mean[static_cast<std::size_t>(c)] += static_cast<double>(p[c]);
            }
        }
        for (double& v : mean) {
            v /= static_cast<double>(m.rows());
        }
        ls.train_mean = std::move(mean);
        manifest.layers.push_back(std::move(ls));
        out.summary.outputs.push_back(ls.train_shard);
        out.summary.outputs.push_back(ls.heldout_shard);
    }
    out.manifest = out_dir / "dataset_manifest.json";
    manifest.save(out.manifest);
    out.summary.outputs.push_back("dataset_manifest.json");
    out.summary.command = "capture";
    out.summary.wall_time_s = clock.seconds();
    out.summary.config_hash = cfg.resolved_hash();
    out.summary.save(out_dir / "capture_summary.json");
    return out;
}

DistancesOutcome cmd_distances(const RunConfig& cfg, const fs::path& manifest_path,
                               std::uint64_t n_tokens, const fs::path& out_dir) {
    Stopwatch clock;
    fs::create_directories(out_dir);
    const auto manifest = DatasetManifest::load(manifest_path);
    const auto dataset = ActivationDataset::load(manifest, ActivationDataset::Split::train);
    const auto layers = manifest.layer_indices();
    const DistanceMatrix d = mean_distance_matrix(dataset, layers, n_tokens);

    DistancesOutcome out;
    out.csv = out_dir / "distances.csv";
    d.save_csv(out.csv);

    json j;
    j["layers"] = layers;
    j["n_tokens"] = n_tokens;
    j["config_hash"] = cfg.resolved_hash();
    out.summary_json = out_dir / "distances_summary.json";
    atomic_write_file(out.summary_json, j.dump(2) + "\n");

    out.summary.command = "distances";
    out.summary.wall_time_s = clock.seconds();
    out.summary.outputs = {"distances.csv", "distances_summary.json"};
    out.summary.config_hash = cfg.resolved_hash();
    out.summary.save(out_dir / "distances_run_summary.json");
    return out;
}

ClusterOutcome cmd_cluster(const fs::path& distances_csv, const std::vector<int>& ks,
                           const fs::path& out_dir) {
    Stopwatch clock;
    fs::create_directories(out_dir);
    const DistanceMatrix d = DistanceMatrix::load_csv(distances_csv);
    ClusterOutcome out;
    for (int k : ks) {
        const LayerPartition p = agglomerate(d, k); // ConfigError when k out of range
        const fs::path path = out_dir / ("partition_k" + std::to_string(k) + ".json");
        atomic_write_file(path, p.to_json() + "\n");
        out.partition_paths.push_back(path);
        out.summary.outputs.push_back(path.filename().string());
    }
    out.summary.command = "cluster";
    out.summary.wall_time_s = clock.seconds();
    out.summary.save(out_dir / "cluster_summary.json");
    return out;
}

TrainOutcome cmd_train(const RunConfig& cfg, const fs::path& manifest_path,
                       const std::optional<fs::path>& partition_json, bool baseline,
                       const fs::path& out_dir, std::uint64_t seed) {
    Stopwatch clock;
    if (baseline == partition_json.has_value()) {
        throw ConfigError("cmd_train: pass exactly one of --baseline or a partition file");
    }
    fs::create_directories(out_dir / "saes");
    fs::create_directories(out_dir / "logs");
    const auto manifest = DatasetManifest::load(manifest_path);
    const auto dataset = ActivationDataset::load(manifest, ActivationDataset::Split::train);
    const auto manifest_layers = manifest.layer_indices();

    struct Job {
        std::string sae_id;
        int k;
        int group_index;
        std::vector<int> layers;
    };
    std::vector<Job> jobs;
    if (baseline) {
        for (int l : manifest_layers) {
            jobs.push_back({"baseline_layer" + std::to_string(l), 0, l, {l}});
        }
    } else {
        const LayerPartition part =
            LayerPartition::from_json(read_file_bytes(*partition_json));
        part.validate(static_cast<int>(manifest_layers.size()));
        for (int j = 0; j < part.k; ++j) {
            std::vector<int> layers;
            for (int pos : part.groups[static_cast<std::size_t>(j)]) {
                layers.push_back(manifest_layers[static_cast<std::size_t>(pos)]);
            }
            jobs.push_back({"k" + std::to_string(part.k) + "_group" + std::to_string(j + 1),
                            part.k, j + 1, std::move(layers)});
        }
    }

    const fs::path registry_path = out_dir / "sae_registry.json";
    SaeRegistry registry;
    registry.base_dir = out_dir;
    if (fs::exists(registry_path)) {
        registry = SaeRegistry::load(registry_path);
    }

    TrainOutcome out;
    SaeTrainConfig base_cfg = sae_config_from(cfg);
    for (const auto& job : jobs) {
        SaeTrainConfig sc = base_cfg;
        sc.seed = seed ^ fnv1a64(job.sae_id);
        SaeObserver observer;
        if (sc.checkpoint_every_steps > 0) {
            observer = [&](std::uint64_t step, const SaeParams<float>& snapshot) {
                if ((step + 1) % sc.checkpoint_every_steps == 0) {
                    save_sae(snapshot, out_dir / "saes" /
                                           (job.sae_id + ".step" + std::to_string(step + 1) +
                                            ".sae"));
                }
            };
        }
        auto [sae, log] = train_sae(dataset, job.layers, sc, observer);
        const std::string rel = "saes/" + job.sae_id + ".sae";
        save_sae(sae, out_dir / rel);
        log.save_csv(out_dir / "logs" / (job.sae_id + "_trainlog.csv"));

        SaeRegistryEntry entry;
        entry.sae_id = job.sae_id;
        entry.path = rel;
        entry.k = job.k;
        entry.group_index = job.group_index;
        entry.layers = job.layers;
        entry.steps = sc.total_steps();
        entry.seed = sc.seed;
        registry.add(std::move(entry));

        out.sae_ids.push_back(job.sae_id);
        out.summary.step_counts[job.sae_id] = sc.total_steps();
        out.summary.outputs.push_back(rel);
    }
    registry.save(registry_path);
    out.registry = registry_path;
    out.summary.outputs.push_back("sae_registry.json");
    out.summary.command = baseline ? "train-baseline" : "train-grouped";
    out.summary.wall_time_s = clock.seconds();
    out.summary.config_hash = cfg.resolved_hash();
    out.summary.save(out_dir /
                     (baseline ? "train_baseline_summary.json" : "train_grouped_summary.json"));
    return out;
}

EvalOutcome cmd_eval(const RunConfig& cfg, const fs::path& manifest_path,
                     const fs::path& registry_path, const fs::path& out_dir,
                     const std::vector<std::string>& sae_filter) {
    Stopwatch clock;
    fs::create_directories(out_dir);
    const auto manifest = DatasetManifest::load(manifest_path);
    const auto heldout = ActivationDataset::load(manifest, ActivationDataset::Split::heldout);
    const auto model = load_desk_checkpoint(manifest.resolve(manifest.model_checkpoint));
    const auto registry = SaeRegistry::load(registry_path);

    const auto heldout_corpus = read_corpus(manifest.resolve(manifest.heldout_corpus),
                                            manifest.context);
    const auto sequences = corpus_sequences(
        heldout_corpus, static_cast<std::size_t>(cfg.get_int("eval.n_sequences")));
    const std::uint64_t n_rows = cfg.get_u64("eval.n_rows");

    auto selected = [&](const SaeRegistryEntry& e) {
        return sae_filter.empty() ||
               std::find(sae_filter.begin(), sae_filter.end(), e.sae_id) != sae_filter.end();
    };

    EvalOutcome out;
    for (const auto& entry : registry.saes) {
        if (!selected(entry)) {
            continue;
        }
        const SaeParams<float> sae = load_sae(registry.resolve(entry.path));
        std::vector<std::vector<double>> means;
        for (int layer : entry.layers) {
            means.push_back(manifest.layer_info(layer).train_mean);
        }
        auto reports = evaluate_sae(model, heldout, sequences, sae, entry.layers, n_rows, means);
        for (auto& rep : reports) {
            rep.sae_id = entry.sae_id;
            rep.k = entry.k;
            rep.group_index = entry.group_index;
            if (entry.k >= 1) {
                const auto* base =
                    registry.find("baseline_layer" + std::to_string(rep.layer));
                if (base == nullptr) {
                    throw ConfigError("no baseline SAE for layer " + std::to_string(rep.layer) +
                                      " (needed for MMCS)");
                }
                const SaeParams<float> baseline_sae = load_sae(registry.resolve(base->path));
                rep.mmcs_vs_baseline = mmcs(sae, baseline_sae);
            }
            out.reports.push_back(std::move(rep));
        }
    }

    CsvWriter csv({"sae_id", "k", "group_index", "layer", "cels", "r2", "l2", "l0",
                   "mmcs_vs_baseline"});
    json jrows = json::array();
    for (const auto& r : out.reports) {
        csv.add_row({r.sae_id, std::to_string(r.k), std::to_string(r.group_index),
                     std::to_string(r.layer), format_g17(r.cels), format_g17(r.r2),
                     format_g17(r.l2), format_g17(r.l0),
                     r.mmcs_vs_baseline ? format_g17(*r.mmcs_vs_baseline) : ""});
        json jr;
        jr["sae_id"] = r.sae_id;
        jr["k"] = r.k;
        jr["group_index"] = r.group_index;
        jr["layer"] = r.layer;
        jr["cels"] = r.cels;
        jr["r2"] = r.r2;
        jr["l2"] = r.l2;
        jr["l0"] = r.l0;
        if (r.mmcs_vs_baseline) {
            jr["mmcs_vs_baseline"] = *r.mmcs_vs_baseline;
        } else {
            jr["mmcs_vs_baseline"] = nullptr;
        }
        jrows.push_back(std::move(jr));
    }
    out.csv = out_dir / "eval_report.csv";
    out.json = out_dir / "eval_report.json";
    csv.write(out.csv);
    json jdoc;
    jdoc["config_hash"] = cfg.resolved_hash();
    jdoc["rows"] = std::move(jrows);
    atomic_write_file(out.json, jdoc.dump(2) + "\n");

    out.summary.command = "eval";
    out.summary.wall_time_s = clock.seconds();
    out.summary.outputs = {"eval_report.csv", "eval_report.json"};
    out.summary.config_hash = cfg.resolved_hash();
    out.summary.save(out_dir / "eval_summary.json");
    return out;
}

DownstreamOutcome cmd_downstream(const RunConfig& cfg, const fs::path& manifest_path,
                                 const fs::path& registry_path,
                                 const std::vector<TaskKind>& kinds, const std::string& method,
                                 const fs::path& out_dir, std::uint64_t seed,
                                 const std::vector<std::string>& sae_filter) {
    Stopwatch clock;
    if (method != "atp" && method != "ig" && method != "exact") {
        throw ConfigError("cmd_downstream: method must be atp, ig or exact");
    }
    fs::create_directories(out_dir);
    const auto manifest = DatasetManifest::load(manifest_path);
    const auto model = load_desk_checkpoint(manifest.resolve(manifest.model_checkpoint));
    const auto registry = SaeRegistry::load(registry_path);

    const int n_instances = cfg.get_int("downstream.n_instances");
    const int ig_n = cfg.get_int("downstream.ig_n");
    const bool ig_averaged = cfg.get_bool("downstream.ig_averaged");
    const bool use_abs = cfg.get_bool("downstream.use_absolute_ie");
    const auto pct_grid = parse_int_list(cfg.get("downstream.pct_grid"));
    const auto count_grid = parse_int_list(cfg.get("downstream.count_grid"));

    DownstreamOutcome out;
    CsvWriter ie_csv({"task", "sae_id", "layer", "method", "feature", "ie"});
    CsvWriter curve_csv({"task", "sae_id", "layer", "selection_size", "faithfulness",
                         "completeness"});

    auto selected = [&](const SaeRegistryEntry& e) {
        return sae_filter.empty() ||
               std::find(sae_filter.begin(), sae_filter.end(), e.sae_id) != sae_filter.end();
    };

    for (TaskKind kind : kinds) {
        const TaskSet tasks =
            build_task(kind, seed ^ fnv1a64(to_string(kind)), n_instances, model.cfg, &model);
        save_taskset(tasks, out_dir / ("tasks_" + to_string(kind) + ".jsonl"));
        if (tasks.solved_frac <= 0.5) {
            out.summary.warnings.push_back("task " + to_string(kind) +
                                           " at or below chance (solved_frac=" +
                                           format_g17(tasks.solved_frac) + "); proceeding");
        }
        for (const auto& entry : registry.saes) {
            if (!selected(entry)) {
                continue;
            }
            const SaeParams<float> sae = load_sae(registry.resolve(entry.path));
            for (int layer : entry.layers) {
                const auto ctx = TaskAblationContext::build(model, sae, layer, tasks);
                // per-feature IE averaged over instances
                std::vector<double> ie(static_cast<std::size_t>(sae.d_sae), 0.0);
                for (const auto& inst : tasks.instances) {
                    std::vector<double> one;
                    if (method == "atp") {
                        one = atp_ie(model, sae, layer, inst);
                    } else if (method == "ig") {
                        one = ig_ie(model, sae, layer, inst, ig_n, ig_averaged);
                    } else {
                        SplicedTaskMetric<float> metric(model, sae, layer, inst);
                        one.assign(static_cast<std::size_t>(sae.d_sae), 0.0);
                        for (int f = 0; f < sae.d_sae; ++f) {
                            if (metric.f_clean()[static_cast<std::size_t>(f)] != 0.0f ||
                                metric.f_patch()[static_cast<std::size_t>(f)] != 0.0f) {
                                one[static_cast<std::size_t>(f)] = exact_ie_feature(
                                    metric, metric.f_clean(), metric.f_patch(), f);
                            }
                        }
                    }
                    for (std::size_t i = 0; i < ie.size(); ++i) {
                        ie[i] += one[i];
                    }
                }
                for (auto& v : ie) {
                    v /= static_cast<double>(tasks.instances.size());
                }
                for (int f = 0; f < sae.d_sae; ++f) {
                    if (ctx.active[static_cast<std::size_t>(f)]) {
                        ie_csv.add_row({to_string(kind), entry.sae_id, std::to_string(layer),
                                        method, std::to_string(f),
                                        format_g17(ie[static_cast<std::size_t>(f)])});
                    }
                }
                for (int pct : pct_grid) {
                    const auto sel =
                        select_features(ie, ctx.active, SelectionRule::top_fraction,
                                        static_cast<double>(pct) / 100.0, 0, use_abs);
                    const double faith = faithfulness(model, sae, layer, tasks, sel, ctx);
                    const double compl_ = completeness(model, sae, layer, tasks, sel, ctx);
                    curve_csv.add_row({to_string(kind), entry.sae_id, std::to_string(layer),
                                       "pct" + std::to_string(pct), format_g17(faith),
                                       format_g17(compl_)});
                }
                for (int count : count_grid) {
                    const auto sel = select_features(ie, ctx.active, SelectionRule::top_count,
                                                     0.0, count, use_abs);
                    const double faith = faithfulness(model, sae, layer, tasks, sel, ctx);
                    const double compl_ = completeness(model, sae, layer, tasks, sel, ctx);
                    curve_csv.add_row({to_string(kind), entry.sae_id, std::to_string(layer),
                                       "cnt" + std::to_string(count), format_g17(faith),
                                       format_g17(compl_)});
                }
            }
        }
    }

    out.ie_csv = out_dir / "ie_scores.csv";
    out.curves_csv = out_dir / "curves.csv";
    ie_csv.write(out.ie_csv);
    curve_csv.write(out.curves_csv);
    out.summary.command = "downstream";
    out.summary.wall_time_s = clock.seconds();
    out.summary.outputs = {"ie_scores.csv", "curves.csv"};
    out.summary.config_hash = cfg.resolved_hash();
    out.summary.save(out_dir / "downstream_summary.json");
    return out;
}

ReportOutcome cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
    Stopwatch clock;
    fs::create_directories(out_dir);

    struct Agg {
        double cels = 0, r2 = 0, l2 = 0, l0 = 0;
        double mmcs = 0;
        int rows = 0;
        int mmcs_rows = 0;
    };
    std::map<int, Agg> by_k;
    std::map<std::string, std::uint64_t> steps_by_sae;

    for (const auto& dir : run_dirs) {
        const fs::path eval_csv = dir / "eval_report.csv";
        if (fs::exists(eval_csv)) {
            const auto rows = parse_csv(read_file_bytes(eval_csv));
            for (std::size_t i = 1; i < rows.size(); ++i) {
                const auto& r = rows[i];
                if (r.size() < 9) {
                    throw FormatError("eval report row has too few columns in " +
                                      eval_csv.string());
                }
                Agg& a = by_k[std::stoi(r[1])];
                a.cels += std::stod(r[4]);
                a.r2 += std::stod(r[5]);
                a.l2 += std::stod(r[6]);
                a.l0 += std::stod(r[7]);
                a.rows += 1;
                if (!r[8].empty()) {
                    a.mmcs += std::stod(r[8]);
                    a.mmcs_rows += 1;
                }
            }
        }
        for (const auto& entry : fs::directory_iterator(dir)) {
            const std::string name = entry.path().filename().string();
            if (name.size() > 13 && name.substr(name.size() - 13) == "_summary.json") {
                const RunSummary s = RunSummary::load(entry.path());
                for (const auto& [sae_id, steps] : s.step_counts) {
                    steps_by_sae[sae_id] = steps;
                }
            }
        }
    }

    std::uint64_t baseline_steps = 0;
    int baseline_layers = 0;
    std::map<int, std::uint64_t> steps_by_k;
    std::map<int, int> saes_by_k;
    for (const auto& [sae_id, steps] : steps_by_sae) {
        if (sae_id.rfind("baseline_layer", 0) == 0) {
            baseline_steps += steps;
            ++baseline_layers;
        } else if (sae_id.rfind("k", 0) == 0) {
            const auto us = sae_id.find('_');
            if (us != std::string::npos) {
                const int k = std::stoi(sae_id.substr(1, us - 1));
                steps_by_k[k] += steps;
                saes_by_k[k] += 1;
            }
        }
    }

    json j;
    j["per_k"] = json::array();
    CsvWriter csv({"k", "rows", "cels", "r2", "l2", "l0", "mmcs", "total_steps",
                   "speedup_vs_baseline"});
    for (const auto& [k, a] : by_k) {
        const double inv = a.rows > 0 ? 1.0 / a.rows : 0.0;
        json row;
        row["k"] = k;
        row["rows"] = a.rows;
        row["cels"] = a.cels * inv;
        row["r2"] = a.r2 * inv;
        row["l2"] = a.l2 * inv;
        row["l0"] = a.l0 * inv;
        row["mmcs"] = a.mmcs_rows > 0 ? json(a.mmcs / a.mmcs_rows) : json(nullptr);
        const std::uint64_t steps = k == 0 ? baseline_steps : steps_by_k[k];
        row["total_steps"] = steps;
        double speedup = 1.0;
        if (k >= 1 && baseline_layers > 0) {
            speedup = static_cast<double>(baseline_layers) / static_cast<double>(k);
        }
        row["speedup_vs_baseline"] = speedup;
        j["per_k"].push_back(row);
        csv.add_row({std::to_string(k), std::to_string(a.rows), format_g17(a.cels * inv),
                     format_g17(a.r2 * inv), format_g17(a.l2 * inv), format_g17(a.l0 * inv),
                     a.mmcs_rows > 0 ? format_g17(a.mmcs / a.mmcs_rows) : "",
                     std::to_string(steps), format_g17(speedup)});
    }
    j["baseline_total_steps"] = baseline_steps;
    j["baseline_layers"] = baseline_layers;
    j["steps_by_sae"] = steps_by_sae;

    ReportOutcome out;
    out.json = out_dir / "report.json";
    out.csv = out_dir / "report.csv";
    atomic_write_file(out.json, j.dump(2) + "\n");
    csv.write(out.csv);
    out.summary.command = "report";
    out.summary.wall_time_s = clock.seconds();
    out.summary.outputs = {"report.json", "report.csv"};
    out.summary.save(out_dir / "report_summary.json");
    return out;
}

} // namespace saeg
