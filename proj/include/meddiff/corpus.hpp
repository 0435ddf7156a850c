#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "meddiff/config.hpp"

namespace meddiff {

// One clinical visit: a non-empty set of code indices (kept sorted, unique)
// and a day stamp relative to the cohort epoch.
struct Visit {
    std::vector<int> codes;
    int day = 0;
};

struct PatientRecord {
    std::vector<Visit> visits;  // sorted by day, non-decreasing
    int label = 0;              // 1 = positive case
};

struct Cohort {
    std::vector<PatientRecord> records;
    int vocab_size = 0;
};

// Parameters of the seeded synthetic cohort generator. Positive patients
// carry each signal code somewhere in their history with probability
// signal_strength; negatives with signal_strength / 4.
struct CohortSpec {
    int n_patients = 0;
    double positive_fraction = 0.25;
    double mean_visits = 1.0;
    double mean_codes_per_visit = 1.0;
    int vocab_size = 0;
    std::vector<int> signal_codes;
    double signal_strength = 0.0;
    int max_span_days = 180;
};

struct CohortSplit {
    Cohort train;
    Cohort val;
    Cohort test;
};

void validate_visit(const Visit& visit, int vocab_size);
void validate_record(const PatientRecord& record, int vocab_size);
void validate_cohort(const Cohort& cohort);
void validate_cohort_spec(const CohortSpec& spec);

Cohort load_corpus(const std::string& path);
void save_corpus(const Cohort& cohort, const std::string& path);
std::string serialize_corpus(const Cohort& cohort);
Cohort parse_corpus(const std::string& text);

Cohort generate_cohort(const CohortSpec& spec, std::uint64_t seed);

// Stratified, seed-driven three-way split. Ratios must sum to 1; every
// split must receive at least one record.
CohortSplit split_cohort(const Cohort& cohort, const std::array<double, 3>& ratios, std::uint64_t seed);

CohortSpec cohort_spec_from_kv(const KvMap& kv);
KvMap cohort_spec_to_kv(const CohortSpec& spec);

}  // namespace meddiff
