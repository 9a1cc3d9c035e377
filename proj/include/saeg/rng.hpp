#pragma once

#include <cstdint>

namespace saeg {

/// Seeded xoshiro256++ stream (state initialized with splitmix64).
/// Integer-only state transitions, so the sequence is identical on every
/// platform; `position()` counts raw 64-bit draws for replay bookkeeping.
class RngStream {
  public:
    static constexpr const char* algorithm_id = "xoshiro256++/splitmix64";

    explicit RngStream(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform in [0,1) with 53 random bits.
    double uniform01();

    /// Standard normal via Box-Muller (second variate cached).
    double normal();

    /// Uniform integer in [0,n) by bitmask rejection. n must be > 0.
    std::uint64_t below(std::uint64_t n);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t position() const { return position_; }

  private:
    std::uint64_t s_[4];
    std::uint64_t seed_ = 0;
    std::uint64_t position_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace saeg
