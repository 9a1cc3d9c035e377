#include "saeg/tasks.hpp"

#include <json.hpp>

#include "saeg/error.hpp"
#include "saeg/io.hpp"
#include "saeg/rng.hpp"

namespace saeg {

std::string to_string(TaskKind kind) {
    switch (kind) {
    case TaskKind::ioi_analogue:
        return "ioi";
    case TaskKind::greater_than_analogue:
        return "greater-than";
    case TaskKind::agreement_analogue:
        return "agreement";
    }
    return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "ioi") {
        return TaskKind::ioi_analogue;
    }
    if (s == "greater-than") {
        return TaskKind::greater_than_analogue;
    }
    if (s == "agreement") {
        return TaskKind::agreement_analogue;
    }
    throw ConfigError("unknown task kind: " + s);
}

namespace {

TaskInstance make_ioi(RngStream& rng) {
    const int a = tokens::name_begin + static_cast<int>(rng.below(tokens::name_count));
    int b = tokens::name_begin + static_cast<int>(rng.below(tokens::name_count - 1));
    if (b >= a) {
        ++b;
    }
    const int obj = tokens::object_begin + static_cast<int>(rng.below(tokens::object_count));
    TaskInstance inst;
    // clean: B gives, so the indirect object is A; patch swaps the giver.
    inst.x_clean = {static_cast<std::uint32_t>(a), tokens::marker_and,
                    static_cast<std::uint32_t>(b), tokens::marker_went,
                    static_cast<std::uint32_t>(b), tokens::marker_gave,
                    static_cast<std::uint32_t>(obj), tokens::marker_to};
    inst.x_patch = inst.x_clean;
    inst.x_patch[4] = static_cast<std::uint32_t>(a);
    inst.a_clean = a;
    inst.a_patch = b;
    return inst;
}

TaskInstance make_greater_than(RngStream& rng) {
    // Start years far enough apart that the plausible end-year windows
    // (start+1 .. start+span_max) do not overlap.
    const int gap = tokens::year_span_max + 15;
    const int s_clean = 5 + static_cast<int>(rng.below(36)); // 5..40
    const int s_patch = s_clean + gap;
    const int a_clean = s_clean + 1 + static_cast<int>(rng.below(tokens::year_span_max));
    const int a_patch = s_patch + 1 + static_cast<int>(rng.below(tokens::year_span_max));
    TaskInstance inst;
    inst.x_clean = {tokens::marker_from, static_cast<std::uint32_t>(tokens::year(s_clean)),
                    tokens::marker_until};
    inst.x_patch = {tokens::marker_from, static_cast<std::uint32_t>(tokens::year(s_patch)),
                    tokens::marker_until};
    inst.a_clean = tokens::year(a_clean);
    inst.a_patch = tokens::year(a_patch);
    return inst;
}

TaskInstance make_agreement(RngStream& rng) {
    const bool clean_plural = rng.below(2) == 1;
    const int subj_idx = static_cast<int>(rng.below(tokens::subj_count));
    const int lemma = static_cast<int>(rng.below(tokens::verb_count));
    const int subj_clean =
        (clean_plural ? tokens::subj_plur_begin : tokens::subj_sing_begin) + subj_idx;
    const int subj_patch =
        (clean_plural ? tokens::subj_sing_begin : tokens::subj_plur_begin) + subj_idx;
    TaskInstance inst;
    inst.x_clean = {tokens::marker_the, static_cast<std::uint32_t>(subj_clean)};
    inst.x_patch = {tokens::marker_the, static_cast<std::uint32_t>(subj_patch)};
    inst.a_clean = (clean_plural ? tokens::verb_plur_begin : tokens::verb_sing_begin) + lemma;
    inst.a_patch = (clean_plural ? tokens::verb_sing_begin : tokens::verb_plur_begin) + lemma;
    return inst;
}

} // namespace

TaskSet build_task(TaskKind kind, std::uint64_t seed, int n, const DeskConfig& cfg,
                   const DeskParams<float>* model) {
    if (n <= 0) {
        throw ConfigError("build_task: n must be > 0");
    }
    if (cfg.vocab < tokens::min_vocab) {
        throw ConfigError("build_task: vocab " + std::to_string(cfg.vocab) +
                          " smaller than template alphabet");
    }
    RngStream rng(seed);
    TaskSet set;
    set.kind = kind;
    set.seed = seed;
    set.instances.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        switch (kind) {
        case TaskKind::ioi_analogue:
            set.instances.push_back(make_ioi(rng));
            break;
        case TaskKind::greater_than_analogue:
            set.instances.push_back(make_greater_than(rng));
            break;
        case TaskKind::agreement_analogue:
            set.instances.push_back(make_agreement(rng));
            break;
        }
        const auto& inst = set.instances.back();
        if (inst.x_clean.size() != inst.x_patch.size() || inst.a_clean == inst.a_patch) {
            throw DataError("build_task: malformed instance");
        }
    }
    if (model != nullptr) {
        int solved = 0;
        for (const auto& inst : set.instances) {
            if (answer_metric(*model, inst.x_clean, inst.a_clean, inst.a_patch) > 0.0) {
                ++solved;
            }
        }
        set.solved_frac = static_cast<double>(solved) / static_cast<double>(n);
    }
    return set;
}

std::uint64_t task_hash(const TaskSet& tasks) {
    std::string buf;
    put_u32(buf, static_cast<std::uint32_t>(tasks.kind));
    put_u64(buf, tasks.seed);
    for (const auto& inst : tasks.instances) {
        for (std::uint32_t t : inst.x_clean) {
            put_u32(buf, t);
        }
        for (std::uint32_t t : inst.x_patch) {
            put_u32(buf, t);
        }
        put_u32(buf, static_cast<std::uint32_t>(inst.a_clean));
        put_u32(buf, static_cast<std::uint32_t>(inst.a_patch));
    }
    return fnv1a64(buf);
}

void save_taskset(const TaskSet& tasks, const std::filesystem::path& path) {
    std::string out;
    nlohmann::json meta;
    meta["kind"] = to_string(tasks.kind);
    meta["seed"] = tasks.seed;
    meta["n"] = tasks.instances.size();
    meta["solved_frac"] = tasks.solved_frac;
    out += meta.dump();
    out += '\n';
    for (const auto& inst : tasks.instances) {
        nlohmann::json j;
        j["x_clean"] = inst.x_clean;
        j["x_patch"] = inst.x_patch;
        j["a_clean"] = inst.a_clean;
        j["a_patch"] = inst.a_patch;
        out += j.dump();
        out += '\n';
    }
    atomic_write_file(path, out);
}

TaskSet load_taskset(const std::filesystem::path& path) {
    const std::string text = read_file_bytes(path);
    TaskSet tasks;
    std::size_t pos = 0;
    bool first = true;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) {
            end = text.size();
        }
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            if (first) {
                tasks.kind = task_kind_from_string(j.at("kind").get<std::string>());
                tasks.seed = j.at("seed").get<std::uint64_t>();
                tasks.solved_frac = j.value("solved_frac", -1.0);
                first = false;
            } else {
                TaskInstance inst;
                inst.x_clean = j.at("x_clean").get<std::vector<std::uint32_t>>();
                inst.x_patch = j.at("x_patch").get<std::vector<std::uint32_t>>();
                inst.a_clean = j.at("a_clean").get<int>();
                inst.a_patch = j.at("a_patch").get<int>();
                tasks.instances.push_back(std::move(inst));
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("task set parse error: " + std::string(e.what()));
        }
    }
    if (first) {
        throw FormatError("task set file is empty: " + path.string());
    }
    return tasks;
}

double answer_metric(const DeskParams<float>& model, std::span<const std::uint32_t> tokens,
                     int a_clean, int a_patch) {
    const auto out = forward(model, tokens);
    return AnswerLogitDiff<float>(a_clean, a_patch).value(out.logits);
}

double greater_than_accuracy(const DeskParams<float>& model, std::uint64_t seed, int n) {
    RngStream rng(seed);
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        const int start = tokens::year_start_min +
                          static_cast<int>(rng.below(tokens::year_start_max -
                                                     tokens::year_start_min + 1));
        const std::vector<std::uint32_t> prompt = {
            tokens::marker_from, static_cast<std::uint32_t>(tokens::year(start)),
            tokens::marker_until};
        const auto out = forward(model, prompt);
        const idx last = out.logits.rows() - 1;
        int best_year = 0;
        float best_logit = std::numeric_limits<float>::lowest();
        for (int y = 0; y < tokens::year_count; ++y) {
            const float logit = out.logits(last, tokens::year(y));
            if (logit > best_logit) {
                best_logit = logit;
                best_year = y;
            }
        }
        if (best_year > start && best_year <= start + tokens::year_span_max) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

} // namespace saeg
