#include "saeg/corpus.hpp"

#include <cmath>
#include <string>

#include "saeg/error.hpp"
#include "saeg/io.hpp"
#include "saeg/rng.hpp"

namespace saeg {

namespace {

void append_noise(std::vector<std::uint32_t>& seq, int len, RngStream& rng) {
    for (int i = 0; i < len; ++i) {
        seq.push_back(static_cast<std::uint32_t>(
            tokens::noise_begin + rng.below(tokens::noise_count)));
    }
}

// [A and B went giver gave obj to receiver]; the receiver is whichever of
// the two names did not give.
void append_narrative(std::vector<std::uint32_t>& seq, RngStream& rng) {
    const int a = tokens::name_begin + static_cast<int>(rng.below(tokens::name_count));
    int b = tokens::name_begin + static_cast<int>(rng.below(tokens::name_count - 1));
    if (b >= a) {
        ++b;
    }
    const bool giver_is_b = rng.below(2) == 1;
    const int giver = giver_is_b ? b : a;
    const int receiver = giver_is_b ? a : b;
    const int obj = tokens::object_begin + static_cast<int>(rng.below(tokens::object_count));
    seq.insert(seq.end(), {static_cast<std::uint32_t>(a), tokens::marker_and,
                           static_cast<std::uint32_t>(b), tokens::marker_went,
                           static_cast<std::uint32_t>(giver), tokens::marker_gave,
                           static_cast<std::uint32_t>(obj), tokens::marker_to,
                           static_cast<std::uint32_t>(receiver)});
}

// [from start until end] with end - start in [1, year_span_max].
void append_interval(std::vector<std::uint32_t>& seq, RngStream& rng) {
    const int start = tokens::year_start_min +
                      static_cast<int>(rng.below(tokens::year_start_max - tokens::year_start_min + 1));
    const int delta = 1 + static_cast<int>(rng.below(tokens::year_span_max));
    seq.insert(seq.end(), {tokens::marker_from, static_cast<std::uint32_t>(tokens::year(start)),
                           tokens::marker_until,
                           static_cast<std::uint32_t>(tokens::year(start + delta))});
}

// [the subj verb], verb number agreeing with the subject's.
void append_agreement(std::vector<std::uint32_t>& seq, RngStream& rng) {
    const bool plural = rng.below(2) == 1;
    const int subj = (plural ? tokens::subj_plur_begin : tokens::subj_sing_begin) +
                     static_cast<int>(rng.below(tokens::subj_count));
    const int verb = (plural ? tokens::verb_plur_begin : tokens::verb_sing_begin) +
                     static_cast<int>(rng.below(tokens::verb_count));
    seq.insert(seq.end(),
               {tokens::marker_the, static_cast<std::uint32_t>(subj),
                static_cast<std::uint32_t>(verb)});
}

} // namespace

Corpus gen_corpus(std::uint64_t seed, int n_sequences, const DeskConfig& cfg) {
    if (n_sequences <= 0) {
        throw ConfigError("gen_corpus: n_sequences must be > 0");
    }
    if (cfg.vocab < tokens::min_vocab) {
        throw ConfigError("gen_corpus: vocab " + std::to_string(cfg.vocab) +
                          " smaller than template alphabet (" +
                          std::to_string(tokens::min_vocab) + ")");
    }
    RngStream rng(seed);
    Corpus corpus;
    corpus.context = cfg.context;
    corpus.data.reserve(static_cast<std::size_t>(n_sequences) *
                        static_cast<std::size_t>(cfg.context));
    std::vector<std::uint32_t> seq;
    for (int s = 0; s < n_sequences; ++s) {
        seq.clear();
        const std::size_t target = static_cast<std::size_t>(cfg.context);
        while (seq.size() < target) {
            const std::size_t room = target - seq.size();
            const std::uint64_t pick = rng.below(100);
            if (pick < 35 || room < 3) {
                const int max_len = static_cast<int>(room < 10 ? room : 10);
                append_noise(seq, 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len))), rng);
            } else if (pick < 60 && room >= 9) {
                append_narrative(seq, rng);
            } else if (pick < 85 && room >= 4) {
                append_interval(seq, rng);
            } else if (room >= 3) {
                append_agreement(seq, rng);
            } else {
                append_noise(seq, static_cast<int>(room), rng);
            }
        }
        corpus.data.insert(corpus.data.end(), seq.begin(), seq.begin() + target);
    }
    return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    std::string buf;
    buf.reserve(corpus.data.size() * 4);
    for (std::uint32_t t : corpus.data) {
        put_u32(buf, t);
    }
    atomic_write_file(path, buf);
}

Corpus read_corpus(const std::filesystem::path& path, int context) {
    if (context <= 0) {
        throw ConfigError("read_corpus: context must be > 0");
    }
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() % 4 != 0) {
        throw CorruptionError("corpus byte length not a multiple of 4: " + path.string());
    }
    const std::size_t n = bytes.size() / 4;
    if (n % static_cast<std::size_t>(context) != 0) {
        throw CorruptionError("corpus token count " + std::to_string(n) +
                              " not a multiple of context " + std::to_string(context));
    }
    ByteReader rd(bytes);
    Corpus corpus;
    corpus.context = context;
    corpus.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        corpus.data[i] = rd.get_u32();
    }
    return corpus;
}

std::uint64_t corpus_hash(const Corpus& corpus) {
    std::string buf;
    buf.reserve(corpus.data.size() * 4 + 4);
    put_u32(buf, static_cast<std::uint32_t>(corpus.context));
    for (std::uint32_t t : corpus.data) {
        put_u32(buf, t);
    }
    return fnv1a64(buf);
}

double unigram_entropy(const Corpus& corpus, int vocab) {
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(vocab), 0);
    for (std::uint32_t t : corpus.data) {
        if (t >= static_cast<std::uint32_t>(vocab)) {
            throw DataError("corpus token " + std::to_string(t) + " out of vocab");
        }
        ++counts[t];
    }
    const double total = static_cast<double>(corpus.data.size());
    double h = 0.0;
    for (std::uint64_t c : counts) {
        if (c > 0) {
            const double p = static_cast<double>(c) / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

} // namespace saeg
