#include "meddiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "meddiff/error.hpp"

namespace meddiff {

namespace {

void require_equal_lengths(size_t a, size_t b) {
    if (a != b) {
        throw ValidationError("length mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
    }
}

void require_binary(const std::vector<int>& values, const char* what) {
    for (int v : values) {
        if (v != 0 && v != 1) throw ValidationError(std::string(what) + " must be 0 or 1");
    }
}

}  // namespace

double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    require_equal_lengths(scores.size(), labels.size());
    require_binary(labels, "labels");
    const size_t n = scores.size();
    if (n == 0) throw ValidationError("pr_auc on empty input");
    const int total_pos = std::accumulate(labels.begin(), labels.end(), 0);
    if (total_pos == 0) throw ValidationError("pr_auc requires at least one positive label");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    double ap = 0.0;
    double recall_prev = 0.0;
    int tp = 0, fp = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? tp : fp) += 1;
            ++j;
        }
        const double recall = static_cast<double>(tp) / total_pos;
        const double precision = static_cast<double>(tp) / (tp + fp);
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j;
    }
    return ap;
}

double f1(const std::vector<int>& predictions, const std::vector<int>& labels) {
    require_equal_lengths(predictions.size(), labels.size());
    require_binary(predictions, "predictions");
    require_binary(labels, "labels");
    int tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (predictions[i] == 1 && labels[i] == 1) ++tp;
        else if (predictions[i] == 1) ++fp;
        else if (labels[i] == 1) ++fn;
    }
    const int denom = 2 * tp + fp + fn;
    if (denom == 0) return 0.0;
    return 2.0 * tp / denom;
}

double cohen_kappa(const std::vector<int>& predictions, const std::vector<int>& labels) {
    require_equal_lengths(predictions.size(), labels.size());
    require_binary(predictions, "predictions");
    require_binary(labels, "labels");
    const size_t n = labels.size();
    if (n == 0) throw ValidationError("cohen_kappa on empty input");
    int tp = 0, fp = 0, fn = 0, tn = 0;
    for (size_t i = 0; i < n; ++i) {
        if (predictions[i] == 1 && labels[i] == 1) ++tp;
        else if (predictions[i] == 1) ++fp;
        else if (labels[i] == 1) ++fn;
        else ++tn;
    }
    const double nn = static_cast<double>(n);
    const double p_o = (tp + tn) / nn;
    const double p_e = ((tp + fp) / nn) * ((tp + fn) / nn) + ((fn + tn) / nn) * ((fp + tn) / nn);
    if (p_e >= 1.0) return p_o >= 1.0 ? 1.0 : 0.0;
    return (p_o - p_e) / (1.0 - p_e);
}

MetricsReport compute_report(const std::vector<double>& scores, const std::vector<int>& labels,
                             double threshold) {
    MetricsReport report;
    report.threshold = threshold;
    report.n_samples = static_cast<int>(labels.size());
    report.pr_auc = pr_auc(scores, labels);
    std::vector<int> predictions(scores.size());
    for (size_t i = 0; i < scores.size(); ++i) predictions[i] = scores[i] >= threshold ? 1 : 0;
    report.f1 = f1(predictions, labels);
    report.kappa = cohen_kappa(predictions, labels);
    return report;
}

MetricsAggregate aggregate_runs(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw ValidationError("aggregate_runs on empty input");
    MetricsAggregate agg;
    agg.n_runs = static_cast<int>(reports.size());
    auto stats = [&](auto field) {
        double mean = 0.0;
        for (const MetricsReport& r : reports) mean += field(r);
        mean /= reports.size();
        double var = 0.0;
        for (const MetricsReport& r : reports) {
            const double d = field(r) - mean;
            var += d * d;
        }
        var /= reports.size();
        return std::pair<double, double>(mean, std::sqrt(var));
    };
    std::tie(agg.mean.pr_auc, agg.stddev.pr_auc) = stats([](const MetricsReport& r) { return r.pr_auc; });
    std::tie(agg.mean.f1, agg.stddev.f1) = stats([](const MetricsReport& r) { return r.f1; });
    std::tie(agg.mean.kappa, agg.stddev.kappa) = stats([](const MetricsReport& r) { return r.kappa; });
    agg.mean.n_samples = reports.front().n_samples;
    agg.mean.threshold = reports.front().threshold;
    agg.stddev.threshold = 0.0;
    return agg;
}

KvMap report_to_kv(const MetricsReport& report) {
    KvMap kv;
    kv["pr_auc"] = format_fixed6(report.pr_auc);
    kv["f1"] = format_fixed6(report.f1);
    kv["kappa"] = format_fixed6(report.kappa);
    kv["n_samples"] = std::to_string(report.n_samples);
    kv["threshold"] = format_fixed6(report.threshold);
    return kv;
}

KvMap aggregate_to_kv(const MetricsAggregate& agg) {
    KvMap kv;
    kv["pr_auc_mean"] = format_fixed6(agg.mean.pr_auc);
    kv["pr_auc_std"] = format_fixed6(agg.stddev.pr_auc);
    kv["f1_mean"] = format_fixed6(agg.mean.f1);
    kv["f1_std"] = format_fixed6(agg.stddev.f1);
    kv["kappa_mean"] = format_fixed6(agg.mean.kappa);
    kv["kappa_std"] = format_fixed6(agg.stddev.kappa);
    kv["n_runs"] = std::to_string(agg.n_runs);
    return kv;
}

}  // namespace meddiff
