#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace saeg {

/// Flat key=value experiment configuration: built-in defaults, overridden by
/// an optional config file and then by --set pairs. Unknown keys are
/// rejected. Every report embeds resolved_hash() for provenance.
class RunConfig {
  public:
    static RunConfig defaults();

    void load_file(const std::filesystem::path& path);
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    int get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    std::string resolved_hash() const;
    std::string dump() const;

  private:
    std::map<std::string, std::string> kv_;
};

} // namespace saeg
