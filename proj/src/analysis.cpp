#include "meddiff/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "meddiff/error.hpp"

namespace meddiff {

int argmax_cosine(const Eigen::VectorXd& probe, const Eigen::MatrixXd& W_v) {
    const double probe_norm = probe.norm();
    if (probe_norm == 0.0) throw ValidationError("cannot map a zero probe vector");
    int best = -1;
    double best_cos = 0.0;
    for (int j = 0; j < W_v.cols(); ++j) {
        const double col_norm = W_v.col(j).norm();
        if (col_norm == 0.0) continue;
        const double cos = probe.dot(W_v.col(j)) / (probe_norm * col_norm);
        if (best == -1 || cos > best_cos) {
            best = j;
            best_cos = cos;
        }
    }
    return best;
}

std::vector<long> code_frequencies(const Cohort& cohort) {
    std::vector<long> counts(static_cast<size_t>(cohort.vocab_size), 0);
    for (const PatientRecord& record : cohort.records) {
        for (const Visit& visit : record.visits) {
            for (int code : visit.codes) counts[static_cast<size_t>(code)] += 1;
        }
    }
    return counts;
}

namespace {

// 1-based descending ranks over counts; ties resolve to the lower code index.
std::vector<int> ranks_desc(const std::vector<long>& counts) {
    std::vector<int> order(counts.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (counts[static_cast<size_t>(a)] != counts[static_cast<size_t>(b)]) {
            return counts[static_cast<size_t>(a)] > counts[static_cast<size_t>(b)];
        }
        return a < b;
    });
    std::vector<int> ranks(counts.size());
    for (size_t r = 0; r < order.size(); ++r) ranks[static_cast<size_t>(order[r])] = static_cast<int>(r) + 1;
    return ranks;
}

}  // namespace

CodeMapResult map_synthetic_codes(const ModelParams& params, const DiffusionSchedule& schedule,
                                  FusionMode mode, const RngStream& rng,
                                  const std::vector<long>* original_counts, int repetitions) {
    const int M = static_cast<int>(params.embed.W_v.cols());
    if (M < 2) throw ValidationError("code mapping needs M >= 2");
    if (repetitions < 1) throw ValidationError("repetitions must be >= 1");
    if (original_counts && static_cast<int>(original_counts->size()) != M) {
        throw ValidationError("original frequency table size mismatch");
    }

    CodeMapResult result;
    for (int j = 0; j < M; ++j) {
        if (params.embed.W_v.col(j).norm() == 0.0) result.excluded_codes.push_back(j);
    }
    if (static_cast<int>(result.excluded_codes.size()) == M) {
        throw ValidationError("every embedding column is zero-norm; nothing to map against");
    }

    std::vector<long> counts(static_cast<size_t>(M), 0);
    for (int code = 0; code < M; ++code) {
        Visit probe_visit;
        probe_visit.day = 0;
        probe_visit.codes = {code};
        const Eigen::VectorXd e = embed_visit(probe_visit, 0, params.embed, nullptr);
        const std::vector<Eigen::VectorXd> hidden = lstm_forward({e}, params.lstm, nullptr);
        // Conditioning on the probe's own hidden state keeps the sample
        // code-dependent; the zero initial state would erase the probe.
        const Eigen::VectorXd projection = params.fusion.W_h * hidden.back();
        const RngStream code_rng = rng.child(static_cast<std::uint64_t>(code));
        for (int rep = 0; rep < repetitions; ++rep) {
            const Eigen::VectorXd sample = sample_synthetic_visit_projected(
                projection, schedule, params.fusion, mode, params.noise,
                code_rng.child(static_cast<std::uint64_t>(rep)), nullptr);
            const int mapped = argmax_cosine(sample, params.embed.W_v);
            if (mapped >= 0) {
                counts[static_cast<size_t>(mapped)] += 1;
                result.total_probes += 1;
            }
        }
    }

    std::vector<int> mapped_codes;
    for (int j = 0; j < M; ++j) {
        if (counts[static_cast<size_t>(j)] > 0) mapped_codes.push_back(j);
    }
    std::sort(mapped_codes.begin(), mapped_codes.end(), [&](int a, int b) {
        if (counts[static_cast<size_t>(a)] != counts[static_cast<size_t>(b)]) {
            return counts[static_cast<size_t>(a)] > counts[static_cast<size_t>(b)];
        }
        return a < b;
    });

    std::vector<int> orig_ranks;
    if (original_counts) orig_ranks = ranks_desc(*original_counts);
    for (size_t r = 0; r < mapped_codes.size(); ++r) {
        CodeMapEntry entry;
        entry.code = mapped_codes[r];
        entry.count = counts[static_cast<size_t>(entry.code)];
        entry.synth_rank = static_cast<int>(r) + 1;
        if (original_counts) entry.orig_rank = orig_ranks[static_cast<size_t>(entry.code)];
        result.entries.push_back(entry);
    }
    return result;
}

void export_hidden_states(const ModelParams& params, const DiffusionSchedule& schedule,
                          FusionMode mode, const Cohort& sample, const std::string& path,
                          const RngStream& rng) {
    validate_cohort(sample);
    const long d_h = params.lstm.W_i.rows();

    std::string out = "label,source";
    for (long i = 0; i < d_h; ++i) out += ",h" + std::to_string(i);
    out += '\n';

    for (size_t r = 0; r < sample.records.size(); ++r) {
        const PatientRecord& record = sample.records[r];
        const int anchor = record.visits.back().day;
        std::vector<Eigen::VectorXd> embeddings;
        embeddings.reserve(record.visits.size());
        for (const Visit& visit : record.visits) {
            embeddings.push_back(embed_visit(visit, anchor, params.embed, nullptr));
        }
        const std::vector<Eigen::VectorXd> hidden = lstm_forward(embeddings, params.lstm, nullptr);
        const std::vector<Eigen::VectorXd> synth =
            sample_synthetic_sequence(embeddings, hidden, schedule, params.fusion, mode,
                                      params.noise, rng.child(r));
        const std::vector<Eigen::VectorXd> synth_hidden = lstm_forward(synth, params.lstm, nullptr);

        for (const auto* h : {&hidden.back(), &synth_hidden.back()}) {
            out += std::to_string(record.label);
            out += h == &hidden.back() ? ",original" : ",synthetic";
            for (long i = 0; i < d_h; ++i) {
                out += ',';
                out += format_fixed6((*h)[i]);
            }
            out += '\n';
        }
    }
    write_text_file_atomic(path, out);
}

}  // namespace meddiff
