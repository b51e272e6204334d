#pragma once

#include <string>
#include <vector>

#include "nse/model.hpp"

namespace nse {

// Files produced for one traced example.
struct TraceFiles {
  std::string memory_key_csv;   // z^q grid, T x |Q|
  std::string memory_key_svg;
  std::string gate_csv;         // gating mode: g^q grid, T x |Q|
  std::string gate_svg;
  std::string halting_csv;      // adaptive mode: per-step e and p
  std::string top_words_csv;    // top-3 attended document words per step
};

// Writes CSV grids (header row of query tokens, one row per loop step) and
// grayscale SVG heatmaps (0 dark, 1 light). Output is byte-deterministic.
TraceFiles write_trace(const std::string& out_dir, const std::string& stem,
                       const ForwardResult& result, const HaltingMode& mode,
                       const std::vector<std::string>& query_tokens,
                       const std::vector<std::string>& doc_tokens);

}  // namespace nse
