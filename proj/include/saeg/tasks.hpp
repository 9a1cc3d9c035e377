#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "saeg/desk_model.hpp"

namespace saeg {

enum class TaskKind { ioi_analogue, greater_than_analogue, agreement_analogue };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

/// One counterfactual pair: position-aligned prompts whose minimal slot
/// difference flips the preferred answer.
struct TaskInstance {
    std::vector<std::uint32_t> x_clean;
    std::vector<std::uint32_t> x_patch;
    int a_clean = 0;
    int a_patch = 0;
};

struct TaskSet {
    TaskKind kind = TaskKind::greater_than_analogue;
    std::uint64_t seed = 0;
    std::vector<TaskInstance> instances;
    // Fraction of instances where the model prefers a_clean on x_clean;
    // -1 when no model was attached at build time.
    double solved_frac = -1.0;
};

/// Builds n counterfactual pairs from the template grammars; when `model`
/// is given, records the model-solvable fraction.
TaskSet build_task(TaskKind kind, std::uint64_t seed, int n, const DeskConfig& cfg,
                   const DeskParams<float>* model = nullptr);

std::uint64_t task_hash(const TaskSet& tasks);

// JSON lines: one metadata line then one object per instance.
void save_taskset(const TaskSet& tasks, const std::filesystem::path& path);
TaskSet load_taskset(const std::filesystem::path& path);

/// logit(a_clean) - logit(a_patch) at the final position of a clean forward
/// pass.
double answer_metric(const DeskParams<float>& model, std::span<const std::uint32_t> tokens,
                     int a_clean, int a_patch);

/// Greedy completion accuracy of interval prompts, restricted to the year
/// alphabet; chance level is span_max / year_count.
double greater_than_accuracy(const DeskParams<float>& model, std::uint64_t seed, int n);

} // namespace saeg
