#pragma once

#include <cstdint>

namespace saeg {

/// Shape of the desk-scale decoder-only transformer.
struct DeskConfig {
    int n_layers = 6;
    int d_model = 64;
    int n_heads = 4;
    int vocab = 512;
    int context = 64;
    std::uint64_t seed = 1;
    // Test fixtures disable the final layernorm to make the path from a
    // splice point to the logits affine.
    bool final_layernorm = true;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
};

} // namespace saeg
