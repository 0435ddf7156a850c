#pragma once

#include <string>
#include <vector>

#include "meddiff/config.hpp"

namespace meddiff {

struct MetricsReport {
    double pr_auc = 0.0;
    double f1 = 0.0;
    double kappa = 0.0;
    int n_samples = 0;
    double threshold = 0.5;
};

struct MetricsAggregate {
    MetricsReport mean;
    MetricsReport stddev;  // population std per metric
    int n_runs = 0;
};

// Average precision over descending score thresholds; ties share a threshold.
// Requires at least one positive label.
double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Binary positive-class F1; 0 when precision + recall is 0.
double f1(const std::vector<int>& predictions, const std::vector<int>& labels);

// (p_o - p_e) / (1 - p_e); if p_e = 1, returns 1 on perfect agreement else 0.
double cohen_kappa(const std::vector<int>& predictions, const std::vector<int>& labels);

// Thresholds positive-class scores (score >= threshold -> 1) and fills a report.
MetricsReport compute_report(const std::vector<double>& scores, const std::vector<int>& labels,
                             double threshold = 0.5);

MetricsAggregate aggregate_runs(const std::vector<MetricsReport>& reports);

KvMap report_to_kv(const MetricsReport& report);
KvMap aggregate_to_kv(const MetricsAggregate& agg);

}  // namespace meddiff
