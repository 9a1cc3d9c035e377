#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "saeg/desk_config.hpp"

namespace saeg {

// Token-id layout for the synthetic corpus. The first block is filler noise;
// the rest are the template alphabets the three task grammars draw from.
namespace tokens {
constexpr int noise_begin = 0;
constexpr int noise_count = 256;
constexpr int name_begin = 256;
constexpr int name_count = 16;
constexpr int object_begin = 272;
constexpr int object_count = 16;
constexpr int verb_sing_begin = 288;
constexpr int verb_plur_begin = 296;
constexpr int verb_count = 8; // per number; lemma i pairs sing[i] with plur[i]
constexpr int subj_sing_begin = 304;
constexpr int subj_plur_begin = 312;
constexpr int subj_count = 8;
constexpr int year_begin = 320;
constexpr int year_count = 100; // two-digit years 00..99
constexpr int marker_and = 420;
constexpr int marker_went = 421;
constexpr int marker_gave = 422;
constexpr int marker_to = 423;
constexpr int marker_from = 424;
constexpr int marker_until = 425;
constexpr int marker_the = 426;
constexpr int min_vocab = 427;

// Interval grammar: end = start + delta, delta in [1, span_max].
constexpr int year_span_max = 20;
constexpr int year_start_min = 1;
constexpr int year_start_max = year_count - year_span_max - 1; // end stays in range

constexpr int year(int v) { return year_begin + v; }
} // namespace tokens

/// Fixed-length token sequences (each exactly `context` long), stored flat.
struct Corpus {
    int context = 0;
    std::vector<std::uint32_t> data;

    std::size_t n_sequences() const {
        return context > 0 ? data.size() / static_cast<std::size_t>(context) : 0;
    }
    std::span<const std::uint32_t> sequence(std::size_t i) const {
        return {data.data() + i * static_cast<std::size_t>(context),
                static_cast<std::size_t>(context)};
    }
};

/// Mixture of templated segments (name-object narratives, two-digit interval
/// spans, subject-verb number patterns) and uniform noise spans.
/// Deterministic per seed.
Corpus gen_corpus(std::uint64_t seed, int n_sequences, const DeskConfig& cfg);

// Flat u32 little-endian token ids, no framing; sequence length is the model
// context, carried out of band.
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus read_corpus(const std::filesystem::path& path, int context);

std::uint64_t corpus_hash(const Corpus& corpus);

/// Entropy (nats) of the empirical unigram distribution.
double unigram_entropy(const Corpus& corpus, int vocab);

} // namespace saeg
