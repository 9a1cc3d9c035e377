// Command-line pipeline: prepare -> capture -> distances -> cluster ->
// train -> eval -> downstream -> report. All outputs are deterministic for
// fixed seeds; SAE_GROUPS_THREADS caps worker threads.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "saeg/commands.hpp"
#include "saeg/error.hpp"
#include "saeg/parallel.hpp"

using namespace saeg;

int main(int argc, char** argv) {
    CLI::App app{"grouped sparse-autoencoder training and evaluation pipeline"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may follow the subcommand

    std::uint64_t seed = 1;
    std::string config_path;
    std::vector<std::string> overrides;
    bool deterministic = true;
    int threads = 0;
    app.add_option("--seed", seed, "global seed");
    app.add_option("--config", config_path, "key=value config file");
    app.add_option("--set", overrides, "config override key=value (repeatable)");
    app.add_flag("--deterministic,!--no-deterministic", deterministic,
                 "fixed-order reductions (always on; flag kept for interface stability)");
    app.add_option("--threads", threads, "worker thread cap (default: SAE_GROUPS_THREADS or all)");

    // prepare
    auto* prepare = app.add_subcommand("prepare", "generate corpus and train the desk model");
    std::string prepare_out = "runs/prepare";
    prepare->add_option("--out", prepare_out, "output directory");

    // capture
    auto* capture = app.add_subcommand("capture", "capture resid-post activations into shards");
    std::string cap_model, cap_train_corpus, cap_heldout_corpus, cap_out = "runs/capture";
    std::vector<int> cap_layers;
    std::uint64_t cap_train_tokens = 0, cap_heldout_tokens = 0;
    bool cap_include_last = false;
    capture->add_option("--model", cap_model, "desk model checkpoint")->required();
    capture->add_option("--train-corpus", cap_train_corpus, "train corpus file")->required();
    capture->add_option("--heldout-corpus", cap_heldout_corpus, "held-out corpus file")
        ->required();
    capture->add_option("--out", cap_out, "output directory");
    capture->add_option("--layers", cap_layers, "explicit layer list (default: all but last)");
    capture->add_option("--train-tokens", cap_train_tokens,
                        "rows per train shard (default: config capture.train_tokens)");
    capture->add_option("--heldout-tokens", cap_heldout_tokens,
                        "rows per held-out shard (default: config capture.heldout_tokens)");
    capture->add_flag("--include-last", cap_include_last,
                      "capture the last layer too (full distance matrices)");

    // distances
    auto* distances = app.add_subcommand("distances", "mean angular distances between layers");
    std::string dist_manifest, dist_out = "runs/distances";
    std::uint64_t dist_tokens = 0;
    distances->add_option("--manifest", dist_manifest, "dataset manifest")->required();
    distances->add_option("--out", dist_out, "output directory");
    distances->add_option("--n-tokens", dist_tokens,
                          "tokens to average over (default: config distances.n_tokens)");

    // cluster
    auto* cluster = app.add_subcommand("cluster", "complete-linkage contiguous layer groups");
    std::string clu_csv, clu_out = "runs/cluster";
    std::vector<int> clu_ks;
    cluster->add_option("--distances", clu_csv, "distance matrix CSV")->required();
    cluster->add_option("--k", clu_ks, "group counts (repeatable)")->required();
    cluster->add_option("--out", clu_out, "output directory");

    // train
    auto* train = app.add_subcommand("train", "train per-layer baseline or grouped SAEs");
    std::string tr_manifest, tr_partition, tr_out = "runs/train";
    bool tr_baseline = false;
    train->add_option("--manifest", tr_manifest, "dataset manifest")->required();
    train->add_option("--partition", tr_partition, "partition JSON (grouped mode)");
    train->add_flag("--baseline", tr_baseline, "train one SAE per layer");
    train->add_option("--out", tr_out, "output directory");

    // eval
    auto* eval = app.add_subcommand("eval", "reconstruction + MMCS reports");
    std::string ev_manifest, ev_registry, ev_out = "runs/eval";
    std::vector<std::string> ev_saes;
    eval->add_option("--manifest", ev_manifest, "dataset manifest")->required();
    eval->add_option("--registry", ev_registry, "SAE registry JSON")->required();
    eval->add_option("--sae", ev_saes, "restrict to these sae_ids");
    eval->add_option("--out", ev_out, "output directory");

    // downstream
    auto* downstream = app.add_subcommand("downstream", "counterfactual-task IE and curves");
    std::string ds_manifest, ds_registry, ds_method = "atp", ds_out = "runs/downstream";
    std::vector<std::string> ds_tasks = {"ioi", "greater-than", "agreement"};
    std::vector<std::string> ds_saes;
    downstream->add_option("--manifest", ds_manifest, "dataset manifest")->required();
    downstream->add_option("--registry", ds_registry, "SAE registry JSON")->required();
    downstream->add_option("--method", ds_method, "ie method: atp | ig | exact");
    downstream->add_option("--task", ds_tasks, "task kinds (repeatable)");
    downstream->add_option("--sae", ds_saes, "restrict to these sae_ids");
    downstream->add_option("--out", ds_out, "output directory");

    // report
    auto* report = app.add_subcommand("report", "merge run outputs into per-k tables");
    std::vector<std::string> rp_dirs;
    std::string rp_out = "runs/report";
    report->add_option("--run", rp_dirs, "completed run directories (repeatable)")->required();
    report->add_option("--out", rp_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (threads > 0) {
            set_thread_cap(threads);
        }
        RunConfig cfg = RunConfig::defaults();
        if (!config_path.empty()) {
            cfg.load_file(config_path);
        }
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("--set expects key=value, got: " + kv);
            }
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }

        if (prepare->parsed()) {
            const auto out = cmd_prepare(cfg, prepare_out, seed);
            std::cout << "checkpoint: " << out.checkpoint.string() << "\n"
                      << "heldout_ce: " << out.heldout_ce
                      << " (unigram baseline " << out.train_unigram_entropy << ")\n"
                      << "greater_than_accuracy: " << out.greater_than_acc << "\n";
        } else if (capture->parsed()) {
            if (cap_include_last && !cap_layers.empty()) {
                throw ConfigError("--include-last conflicts with an explicit --layers list");
            }
            if (cap_include_last) {
                const auto model = load_desk_checkpoint(cap_model);
                for (int l = 0; l < model.cfg.n_layers; ++l) {
                    cap_layers.push_back(l);
                }
            }
            const auto out = cmd_capture(
                cfg, cap_model, cap_train_corpus, cap_heldout_corpus, cap_out, cap_layers,
                cap_train_tokens > 0 ? cap_train_tokens : cfg.get_u64("capture.train_tokens"),
                cap_heldout_tokens > 0 ? cap_heldout_tokens
                                       : cfg.get_u64("capture.heldout_tokens"),
                seed);
            std::cout << "manifest: " << out.manifest.string() << "\n";
        } else if (distances->parsed()) {
            const auto out = cmd_distances(
                cfg, dist_manifest,
                dist_tokens > 0 ? dist_tokens : cfg.get_u64("distances.n_tokens"), dist_out);
            std::cout << "distances: " << out.csv.string() << "\n";
        } else if (cluster->parsed()) {
            const auto out = cmd_cluster(clu_csv, clu_ks, clu_out);
            for (const auto& p : out.partition_paths) {
                std::cout << "partition: " << p.string() << "\n";
            }
        } else if (train->parsed()) {
            std::optional<std::filesystem::path> partition;
            if (!tr_partition.empty()) {
                partition = tr_partition;
            }
            const auto out = cmd_train(cfg, tr_manifest, partition, tr_baseline, tr_out, seed);
            std::uint64_t total = 0;
            for (const auto& [id, steps] : out.summary.step_counts) {
                std::cout << id << ": " << steps << " steps\n";
                total += steps;
            }
            std::cout << "total optimizer steps: " << total << "\n";
        } else if (eval->parsed()) {
            const auto out = cmd_eval(cfg, ev_manifest, ev_registry, ev_out, ev_saes);
            std::cout << "eval report: " << out.csv.string() << " (" << out.reports.size()
                      << " rows)\n";
        } else if (downstream->parsed()) {
            std::vector<TaskKind> kinds;
            for (const auto& t : ds_tasks) {
                kinds.push_back(task_kind_from_string(t));
            }
            const auto out = cmd_downstream(cfg, ds_manifest, ds_registry, kinds, ds_method,
                                            ds_out, seed, ds_saes);
            for (const auto& w : out.summary.warnings) {
                std::cerr << "warning: " << w << "\n";
            }
            std::cout << "curves: " << out.curves_csv.string() << "\n";
        } else if (report->parsed()) {
            std::vector<std::filesystem::path> dirs(rp_dirs.begin(), rp_dirs.end());
            const auto out = cmd_report(dirs, rp_out);
            std::cout << "report: " << out.json.string() << "\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
