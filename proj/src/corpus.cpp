#include "meddiff/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <string_view>

#include "meddiff/error.hpp"
#include "meddiff/rng.hpp"

namespace meddiff {

namespace {

constexpr std::string_view kVocabHeader = "#vocab ";

long parse_long(std::string_view token, int lineno, const char* what) {
    long value = 0;
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
    if (ec != std::errc() || ptr != token.data() + token.size()) {
        throw ParseError("line " + std::to_string(lineno) + ": bad " + what + " `" + std::string(token) + "`");
    }
    return value;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
    std::vector<std::string_view> parts;
    size_t start = 0;
    while (true) {
        size_t pos = text.find(sep, start);
        if (pos == std::string_view::npos) {
            parts.push_back(text.substr(start));
            return parts;
        }
        parts.push_back(text.substr(start, pos - start));
        start = pos + 1;
    }
}

Visit parse_visit(std::string_view token, int vocab_size, int lineno) {
    size_t colon = token.find(':');
    if (colon == std::string_view::npos) {
        throw ParseError("line " + std::to_string(lineno) + ": visit `" + std::string(token) + "` missing `day:codes`");
    }
    Visit visit;
    long day = parse_long(token.substr(0, colon), lineno, "day");
    if (day < 0) {
        throw ParseError("line " + std::to_string(lineno) + ": negative day " + std::to_string(day));
    }
    visit.day = static_cast<int>(day);
    std::string_view code_part = token.substr(colon + 1);
    if (code_part.empty()) {
        throw ParseError("line " + std::to_string(lineno) + ": visit has no codes");
    }
    long prev = -1;
    for (std::string_view code_token : split(code_part, ',')) {
        long code = parse_long(code_token, lineno, "code");
        if (code < 0 || code >= vocab_size) {
            throw ValidationError("line " + std::to_string(lineno) + ": code " + std::to_string(code) +
                                  " out of range [0, " + std::to_string(vocab_size) + ")");
        }
        if (code <= prev) {
            throw ParseError("line " + std::to_string(lineno) + ": codes not strictly ascending at " + std::to_string(code));
        }
        visit.codes.push_back(static_cast<int>(code));
        prev = code;
    }
    return visit;
}

// floor quotas, then hand out the remainder by largest fractional part
// (ties broken by lowest index).
std::array<int, 3> largest_remainder(int total, const std::array<double, 3>& ratios) {
    std::array<int, 3> out{};
    std::array<double, 3> frac{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        double quota = total * ratios[i];
        out[i] = static_cast<int>(std::floor(quota + 1e-9));
        frac[i] = quota - out[i];
        assigned += out[i];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (frac[a] != frac[b]) return frac[a] > frac[b];
        return a < b;
    });
    for (int i = 0; assigned < total; ++i) {
        out[order[i % 3]] += 1;
        ++assigned;
    }
    return out;
}

template <typename T>
void seeded_shuffle(std::vector<T>& items, RngStream& rng) {
    for (size_t i = items.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace

void validate_visit(const Visit& visit, int vocab_size) {
    if (visit.codes.empty()) throw ValidationError("visit has no codes");
    if (visit.day < 0) throw ValidationError("visit day is negative");
    int prev = -1;
    for (int code : visit.codes) {
        if (code < 0 || code >= vocab_size) {
            throw ValidationError("code " + std::to_string(code) + " out of range [0, " + std::to_string(vocab_size) + ")");
        }
        if (code <= prev) throw ValidationError("visit codes not strictly ascending");
        prev = code;
    }
}

void validate_record(const PatientRecord& record, int vocab_size) {
    if (record.visits.empty()) throw ValidationError("record has no visits");
    if (record.label != 0 && record.label != 1) throw ValidationError("label must be 0 or 1");
    int prev_day = -1;
    for (const Visit& visit : record.visits) {
        validate_visit(visit, vocab_size);
        if (visit.day < prev_day) throw ValidationError("visits not sorted by day");
        prev_day = visit.day;
    }
}

void validate_cohort(const Cohort& cohort) {
    if (cohort.vocab_size < 1) throw ValidationError("vocab_size must be >= 1");
    if (cohort.records.empty()) throw ValidationError("empty cohort");
    for (const PatientRecord& record : cohort.records) validate_record(record, cohort.vocab_size);
}

void validate_cohort_spec(const CohortSpec& spec) {
    if (spec.n_patients < 1) throw ValidationError("n_patients must be >= 1");
    if (!(spec.positive_fraction > 0.0 && spec.positive_fraction < 1.0)) {
        throw ValidationError("positive_fraction must be in (0, 1)");
    }
    if (spec.mean_visits < 1.0) throw ValidationError("mean_visits must be >= 1");
    if (spec.mean_codes_per_visit <= 0.0) throw ValidationError("mean_codes_per_visit must be > 0");
    if (spec.vocab_size < 1) throw ValidationError("vocab_size must be >= 1");
    if (!(spec.signal_strength >= 0.0 && spec.signal_strength <= 1.0)) {
        throw ValidationError("signal_strength must be in [0, 1]");
    }
    if (spec.max_span_days < 0) throw ValidationError("max_span_days must be >= 0");
    std::set<int> seen;
    for (int code : spec.signal_codes) {
        if (code < 0 || code >= spec.vocab_size) {
            throw ValidationError("signal code " + std::to_string(code) + " out of range");
        }
        if (!seen.insert(code).second) throw ValidationError("duplicate signal code " + std::to_string(code));
    }
    if (static_cast<int>(spec.signal_codes.size()) >= spec.vocab_size) {
        throw ValidationError("signal_codes must leave at least one background code");
    }
}

Cohort parse_corpus(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("line 1: missing `#vocab <M>` header");
    if (line.rfind(kVocabHeader, 0) != 0) {
        throw ParseError("line 1: expected `#vocab <M>`, got `" + line + "`");
    }
    Cohort cohort;
    long vocab = parse_long(std::string_view(line).substr(kVocabHeader.size()), 1, "vocab size");
    if (vocab < 1) throw ValidationError("line 1: vocab size must be >= 1");
    cohort.vocab_size = static_cast<int>(vocab);

    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            throw ParseError("line " + std::to_string(lineno) + ": empty record line");
        }
        size_t tab = line.find('\t');
        if (tab == std::string_view::npos) {
            throw ParseError("line " + std::to_string(lineno) + ": missing tab after label");
        }
        PatientRecord record;
        long label = parse_long(std::string_view(line).substr(0, tab), lineno, "label");
        if (label != 0 && label != 1) {
            throw ParseError("line " + std::to_string(lineno) + ": label must be 0 or 1");
        }
        record.label = static_cast<int>(label);
        int prev_day = -1;
        for (std::string_view visit_token : split(std::string_view(line).substr(tab + 1), ';')) {
            Visit visit = parse_visit(visit_token, cohort.vocab_size, lineno);
            if (visit.day < prev_day) {
                throw ParseError("line " + std::to_string(lineno) + ": visits not sorted by day");
            }
            prev_day = visit.day;
            record.visits.push_back(std::move(visit));
        }
        cohort.records.push_back(std::move(record));
    }
    if (cohort.records.empty()) throw ValidationError("empty cohort");
    return cohort;
}

Cohort load_corpus(const std::string& path) { return parse_corpus(read_text_file(path)); }

std::string serialize_corpus(const Cohort& cohort) {
    std::string out = "#vocab " + std::to_string(cohort.vocab_size) + "\n";
    for (const PatientRecord& record : cohort.records) {
        out += std::to_string(record.label);
        out += '\t';
        for (size_t v = 0; v < record.visits.size(); ++v) {
            if (v > 0) out += ';';
            const Visit& visit = record.visits[v];
            out += std::to_string(visit.day);
            out += ':';
            for (size_t c = 0; c < visit.codes.size(); ++c) {
                if (c > 0) out += ',';
                out += std::to_string(visit.codes[c]);
            }
        }
        out += '\n';
    }
    return out;
}

void save_corpus(const Cohort& cohort, const std::string& path) {
    write_text_file_atomic(path, serialize_corpus(cohort));
}

Cohort generate_cohort(const CohortSpec& spec, std::uint64_t seed) {
    validate_cohort_spec(spec);
    RngStream root(seed);

    const int n = spec.n_patients;
    const int n_pos = std::min<int>(n, std::max<int>(0, static_cast<int>(std::llround(n * spec.positive_fraction))));
    std::vector<int> labels(static_cast<size_t>(n), 0);
    std::fill(labels.begin(), labels.begin() + n_pos, 1);
    RngStream label_rng = root.child(0);
    seeded_shuffle(labels, label_rng);

    std::vector<int> background;
    background.reserve(static_cast<size_t>(spec.vocab_size));
    std::set<int> signal_set(spec.signal_codes.begin(), spec.signal_codes.end());
    for (int code = 0; code < spec.vocab_size; ++code) {
        if (!signal_set.count(code)) background.push_back(code);
    }

    Cohort cohort;
    cohort.vocab_size = spec.vocab_size;
    cohort.records.reserve(static_cast<size_t>(n));
    RngStream patients = root.child(1);
    for (int i = 0; i < n; ++i) {
        RngStream rng = patients.child(static_cast<std::uint64_t>(i));
        PatientRecord record;
        record.label = labels[static_cast<size_t>(i)];

        const int n_visits = std::max(1, rng.poisson(spec.mean_visits));
        std::vector<int> days(static_cast<size_t>(n_visits));
        for (int& day : days) day = static_cast<int>(rng.uniform_int(0, spec.max_span_days));
        std::sort(days.begin(), days.end());

        std::vector<std::set<int>> visit_codes(static_cast<size_t>(n_visits));
        for (auto& codes : visit_codes) {
            int want = std::max(1, rng.poisson(spec.mean_codes_per_visit));
            want = std::min<int>(want, static_cast<int>(background.size()));
            while (static_cast<int>(codes.size()) < want) {
                codes.insert(background[static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(background.size()) - 1))]);
            }
        }

        const double keep = record.label == 1 ? spec.signal_strength : spec.signal_strength / 4.0;
        for (int code : spec.signal_codes) {
            if (rng.uniform() < keep) {
                visit_codes[static_cast<size_t>(rng.uniform_int(0, n_visits - 1))].insert(code);
            }
        }

        record.visits.reserve(static_cast<size_t>(n_visits));
        for (int v = 0; v < n_visits; ++v) {
            Visit visit;
            visit.day = days[static_cast<size_t>(v)];
            visit.codes.assign(visit_codes[static_cast<size_t>(v)].begin(), visit_codes[static_cast<size_t>(v)].end());
            record.visits.push_back(std::move(visit));
        }
        cohort.records.push_back(std::move(record));
    }
    return cohort;
}

CohortSplit split_cohort(const Cohort& cohort, const std::array<double, 3>& ratios, std::uint64_t seed) {
    validate_cohort(cohort);
    double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1");
    for (double r : ratios) {
        if (r < 0.0) throw ValidationError("split ratios must be non-negative");
    }

    const int n = static_cast<int>(cohort.records.size());
    std::array<int, 3> sizes = largest_remainder(n, ratios);
    for (int s : sizes) {
        if (s == 0) throw ValidationError("split would be empty");
    }

    std::vector<int> pos_idx, neg_idx;
    for (int i = 0; i < n; ++i) {
        (cohort.records[static_cast<size_t>(i)].label == 1 ? pos_idx : neg_idx).push_back(i);
    }
    std::array<int, 3> pos_counts = largest_remainder(static_cast<int>(pos_idx.size()), ratios);
    // Keep every split's negative count non-negative; excess positives move
    // to the split with the most negative slack.
    for (int i = 0; i < 3; ++i) {
        while (pos_counts[i] > sizes[i]) {
            int best = -1;
            for (int j = 0; j < 3; ++j) {
                if (j == i) continue;
                if (pos_counts[j] < sizes[j] && (best == -1 || sizes[j] - pos_counts[j] > sizes[best] - pos_counts[best])) {
                    best = j;
                }
            }
            if (best == -1) throw ValidationError("cannot stratify split");
            --pos_counts[i];
            ++pos_counts[best];
        }
    }

    RngStream root(seed);
    RngStream pos_rng = root.child(0);
    RngStream neg_rng = root.child(1);
    seeded_shuffle(pos_idx, pos_rng);
    seeded_shuffle(neg_idx, neg_rng);

    CohortSplit result;
    Cohort* parts[3] = {&result.train, &result.val, &result.test};
    size_t pos_at = 0, neg_at = 0;
    for (int s = 0; s < 3; ++s) {
        std::vector<int> chosen;
        chosen.insert(chosen.end(), pos_idx.begin() + static_cast<long>(pos_at),
                      pos_idx.begin() + static_cast<long>(pos_at) + pos_counts[s]);
        pos_at += static_cast<size_t>(pos_counts[s]);
        const int neg_count = sizes[s] - pos_counts[s];
        chosen.insert(chosen.end(), neg_idx.begin() + static_cast<long>(neg_at),
                      neg_idx.begin() + static_cast<long>(neg_at) + neg_count);
        neg_at += static_cast<size_t>(neg_count);
        std::sort(chosen.begin(), chosen.end());
        parts[s]->vocab_size = cohort.vocab_size;
        parts[s]->records.reserve(chosen.size());
        for (int idx : chosen) parts[s]->records.push_back(cohort.records[static_cast<size_t>(idx)]);
    }
    return result;
}

CohortSpec cohort_spec_from_kv(const KvMap& kv) {
    CohortSpec spec;
    spec.n_patients = static_cast<int>(kv_get_int(kv, "n_patients", spec.n_patients));
    spec.positive_fraction = kv_get_double(kv, "positive_fraction", spec.positive_fraction);
    spec.mean_visits = kv_get_double(kv, "mean_visits", spec.mean_visits);
    spec.mean_codes_per_visit = kv_get_double(kv, "mean_codes_per_visit", spec.mean_codes_per_visit);
    spec.vocab_size = static_cast<int>(kv_get_int(kv, "vocab_size", spec.vocab_size));
    spec.signal_strength = kv_get_double(kv, "signal_strength", spec.signal_strength);
    spec.max_span_days = static_cast<int>(kv_get_int(kv, "max_span_days", spec.max_span_days));
    std::string codes = kv_get_string(kv, "signal_codes", "");
    spec.signal_codes.clear();
    if (!codes.empty()) {
        for (std::string_view token : split(codes, ',')) {
            long value = 0;
            auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
            if (ec != std::errc() || ptr != token.data() + token.size()) {
                throw ValidationError("signal_codes: bad code `" + std::string(token) + "`");
            }
            spec.signal_codes.push_back(static_cast<int>(value));
        }
    }
    validate_cohort_spec(spec);
    return spec;
}

KvMap cohort_spec_to_kv(const CohortSpec& spec) {
    KvMap kv;
    kv["n_patients"] = std::to_string(spec.n_patients);
    kv["positive_fraction"] = format_fixed6(spec.positive_fraction);
    kv["mean_visits"] = format_fixed6(spec.mean_visits);
    kv["mean_codes_per_visit"] = format_fixed6(spec.mean_codes_per_visit);
    kv["vocab_size"] = std::to_string(spec.vocab_size);
    kv["signal_strength"] = format_fixed6(spec.signal_strength);
    kv["max_span_days"] = std::to_string(spec.max_span_days);
    std::string codes;
    for (size_t i = 0; i < spec.signal_codes.size(); ++i) {
        if (i > 0) codes += ',';
        codes += std::to_string(spec.signal_codes[i]);
    }
    kv["signal_codes"] = codes;
    return kv;
}

}  // namespace meddiff
