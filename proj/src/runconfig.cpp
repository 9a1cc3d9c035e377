#include "saeg/runconfig.hpp"

#include <algorithm>

#include "saeg/error.hpp"
#include "saeg/io.hpp"

namespace saeg {

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.kv_ = {
        {"model.n_layers", "6"},
        {"model.d_model", "64"},
        {"model.n_heads", "4"},
        {"model.vocab", "512"},
        {"model.context", "64"},
        {"model.train_steps", "1500"},
        {"model.train_batch", "12"},
        {"model.lr", "1e-3"},
        {"corpus.train_sequences", "6000"},
        {"corpus.heldout_sequences", "1600"},
        {"capture.train_tokens", "200000"},
        {"capture.heldout_tokens", "102400"},
        {"distances.n_tokens", "100000"},
        {"sae.expansion", "8"},
        {"sae.lambda", "1.0"},
        {"sae.lr", "3e-5"},
        {"sae.batch", "1024"},
        {"sae.beta1", "0.0"},
        {"sae.beta2", "0.999"},
        {"sae.total_tokens", "2097152"},
        {"sae.l1_warmup_frac", "0.05"},
        {"sae.lr_decay_frac", "0.20"},
        {"sae.checkpoint_every_steps", "0"},
        {"sae.mode", "heaviside-jumprelu"},
        {"sae.theta_init", "0.001"},
        {"sae.ste_bandwidth", "0.001"},
        {"eval.n_rows", "100000"},
        {"eval.n_sequences", "256"},
        {"downstream.n_instances", "32"},
        {"downstream.ig_n", "10"},
        {"downstream.ig_averaged", "true"},
        {"downstream.use_absolute_ie", "true"},
        {"downstream.pct_grid", "1,2,5,10,20,50,100"},
        {"downstream.count_grid", "1,2,5,10,20,50"},
    };
    return c;
}

namespace {
std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) {
        return "";
    }
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}
} // namespace

void RunConfig::load_file(const std::filesystem::path& path) {
    const std::string text = read_file_bytes(path);
    std::size_t pos = 0;
    int line_no = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) {
            end = text.size();
        }
        std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + " is not key=value: " +
                              line);
        }
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = kv_.find(key);
    if (it == kv_.end()) {
        throw ConfigError("unknown config key: " + key);
    }
    it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) {
        throw ConfigError("unknown config key: " + key);
    }
    return it->second;
}

int RunConfig::get_int(const std::string& key) const {
    try {
        return std::stoi(get(key));
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + " is not an integer: " + get(key));
    }
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    try {
        return std::stoull(get(key));
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + " is not an unsigned integer: " + get(key));
    }
}

double RunConfig::get_double(const std::string& key) const {
    try {
        return std::stod(get(key));
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + " is not a number: " + get(key));
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw ConfigError("config key " + key + " is not a boolean: " + v);
}

std::string RunConfig::dump() const {
    std::string out;
    for (const auto& [k, v] : kv_) { // std::map iterates sorted
        out += k;
        out += " = ";
        out += v;
        out += '\n';
    }
    return out;
}

std::string RunConfig::resolved_hash() const {
    return hex_u64(fnv1a64(dump()));
}

} // namespace saeg
