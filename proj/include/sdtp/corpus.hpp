#pragma once

// Byte-level corpus handling: plain UTF-8 text or JSON-lines with a
// "text" field, fixed-length training windows with one lookahead byte
// for labels, and a deterministic synthetic corpus generator used by the
// bundled sample data and the test suites.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sdtp/common.hpp"

namespace sdtp {

struct Corpus {
    std::vector<uint8_t> bytes;

    size_t size() const { return bytes.size(); }
};

Corpus load_corpus(const std::string& path);

struct Window {
    std::vector<int> tokens;  // window length
    std::vector<int> labels;  // next byte per position
};

// Non-overlapping windows of `window` tokens with a one-byte lookahead;
// offsets are deterministic. `stride` defaults to `window`.
std::vector<size_t> window_offsets(const Corpus& corpus, int window, int stride = 0);

Window make_window(const Corpus& corpus, size_t offset, int window);

// Structured pseudo-text: template sentences over a small vocabulary with
// interleaved key=value records, so a byte LM has both predictable filler
// and informative rare tokens.
std::string synth_corpus(size_t n_bytes, uint64_t seed);

}  // namespace sdtp
