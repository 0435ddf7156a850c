#pragma once

#include <string>
#include <vector>

#include "meddiff/corpus.hpp"
#include "meddiff/model.hpp"

namespace meddiff {

struct CodeMapEntry {
    int code = 0;        // mapped-to code index (a column of W_v)
    long count = 0;      // how many probes landed on it
    int synth_rank = 0;  // 1-based rank by count (descending)
    int orig_rank = -1;  // 1-based rank in the supplied frequency table, -1 if none
};

struct CodeMapResult {
    std::vector<CodeMapEntry> entries;  // sorted by count desc, code asc
    long total_probes = 0;
    std::vector<int> excluded_codes;  // zero-norm columns of W_v, left out of the argmax
};

// Nearest code by cosine against columns of W_v; zero-norm columns are
// skipped. Ties resolve to the lowest index. Returns -1 if every column is
// zero-norm.
int argmax_cosine(const Eigen::VectorXd& probe, const Eigen::MatrixXd& W_v);

// Per-code occurrence counts over all visits of a cohort (for orig_rank).
std::vector<long> code_frequencies(const Cohort& cohort);

// Feed each single code through a one-visit probe (delta t 0), sample one
// synthetic embedding per repetition conditioned on the probe's own hidden
// state, and map it back to the closest W_v column.
CodeMapResult map_synthetic_codes(const ModelParams& params, const DiffusionSchedule& schedule,
                                  FusionMode mode, const RngStream& rng,
                                  const std::vector<long>* original_counts = nullptr,
                                  int repetitions = 1);

// CSV rows: label, source (original|synthetic), then d_h hidden values at
// 6 decimals; two rows per record. Written atomically.
void export_hidden_states(const ModelParams& params, const DiffusionSchedule& schedule,
                          FusionMode mode, const Cohort& sample, const std::string& path,
                          const RngStream& rng);

}  // namespace meddiff
