#pragma once

#include <optional>
#include <string>
#include <vector>

#include "meddiff/corpus.hpp"
#include "meddiff/metrics.hpp"
#include "meddiff/model.hpp"

namespace meddiff {

enum class AblationMode { None, AS1, AS2, AS3 };

AblationMode ablation_from_string(const std::string& name);
std::string ablation_to_string(AblationMode mode);

struct TrainConfig {
    int epochs = 30;
    double learning_rate = 1e-3;
    double weight_decay = 1e-3;
    int plateau_patience = 5;
    double plateau_factor = 0.2;
    int d_e = 256;
    int d_h = 256;
    int d_f = 64;
    int d_b = 64;
    int d_s = 32;
    int diffusion_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double lambda_S = 0.5;
    double lambda_D = 0.1;
    std::uint64_t seed = 0;
    int batch_size = 1;
    AblationMode ablation_mode = AblationMode::None;
    bool diffusion_full_sum = false;
    double train_ratio = 0.75;
    double val_ratio = 0.10;
    double test_ratio = 0.15;
    double threshold = 0.5;
};

void validate_train_config(const TrainConfig& config);
TrainConfig train_config_from_kv(const KvMap& kv);
KvMap train_config_to_kv(const TrainConfig& config);

// Effective loss/fusion switches after applying the ablation mode.
struct TrainContext {
    FusionMode fusion_mode = FusionMode::Learned;
    double lambda_S = 0.5;
    double lambda_D = 0.1;
    bool full_sum = false;
};

TrainContext make_context(const TrainConfig& config);

// Rng layout: root(seed) -> child(0) init; child(1).child(epoch) per epoch,
// whose child(0) shuffles and child(1).child(i) drives patient i. Inside a
// patient stream, child(0).child(k) draws the visit-k loss noise and
// child(1).child(k) drives the visit-k sampler.
RngStream patient_stream(std::uint64_t seed, int epoch, std::uint64_t patient_index);

struct PatientLoss {
    double total = 0.0;
    double ce_orig = 0.0;
    double ce_synth = 0.0;
    double l_diff = 0.0;
};

// One per-draw slice of the diffusion objective for one visit.
struct LossDrawCache {
    NoiseDraw draw;
    NoiseCache noise;
    Eigen::VectorXd eps_hat;
};

struct PatientTrace {
    std::vector<EmbedCache> embed_caches;
    std::vector<Eigen::VectorXd> embeddings;
    LstmTrace lstm_orig;
    std::vector<Eigen::VectorXd> hidden;
    Eigen::Vector2d probs_orig;

    std::vector<Eigen::VectorXd> projections;  // W_h h_{k-1}, zero for k=1
    std::vector<FusionCache> clean_fusion;     // fusion at (e_k, p_k)
    std::vector<Eigen::VectorXd> targets;      // fused clean targets
    std::vector<std::vector<LossDrawCache>> loss_draws;

    std::vector<VisitSampleCache> sample_caches;
    std::vector<Eigen::VectorXd> synth_embeddings;
    LstmTrace lstm_synth;
    Eigen::Vector2d probs_synth;
};

// Full Eq-15 forward for one patient; rng consumption is independent of the
// parameter values so a replay reproduces every draw.
PatientLoss forward_patient(const PatientRecord& record, const ModelParams& params,
                            const DiffusionSchedule& schedule, const TrainContext& ctx,
                            const RngStream& patient_rng, PatientTrace* trace);

// Analytic gradient of PatientLoss.total; accumulates into grads.
void backward_patient(const PatientRecord& record, const ModelParams& params,
                      const DiffusionSchedule& schedule, const TrainContext& ctx,
                      const PatientTrace& trace, ModelParams& grads);

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;  // mean per-patient total loss
    double val_f1 = 0.0;
    double learning_rate = 0.0;
};

struct TrainResult {
    ModelParams params;  // snapshot with the highest validation F1
    DiffusionSchedule schedule;
    TrainConfig config;
    double best_val_f1 = 0.0;
    int epoch_of_best = 0;
    std::vector<EpochStats> history;
};

TrainResult train(const TrainConfig& config, const Cohort& train_set, const Cohort& val_set);

// Positive-class probability per record, in cohort order.
std::vector<double> score_cohort(const ModelParams& params, const Cohort& cohort);
MetricsReport evaluate_model(const ModelParams& params, const Cohort& cohort, double threshold = 0.5);

struct GradCheckEntry {
    std::string tensor;
    double max_rel_error = 0.0;
    double analytic_at_max = 0.0;
    double fd_at_max = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    bool passed = false;
    double tolerance = 0.0;
};

// Sum of per-patient losses with the training rng layout at epoch 0.
double batch_loss(const std::vector<PatientRecord>& batch, const ModelParams& params,
                  const DiffusionSchedule& schedule, const TrainContext& ctx, std::uint64_t seed);

ModelParams batch_gradients(const std::vector<PatientRecord>& batch, const ModelParams& params,
                            const DiffusionSchedule& schedule, const TrainContext& ctx,
                            std::uint64_t seed, const ModelDims& dims);

// Central finite differences (step 1e-4) against the analytic gradients; the
// comparison is split out so tests can inject faults.
GradCheckReport compare_gradients(ModelParams& analytic, ModelParams& finite_diff, double tolerance,
                                  double floor = 1e-6);

GradCheckReport gradient_check(const ModelDims& dims, const std::vector<PatientRecord>& batch,
                               const TrainConfig& config, double tolerance,
                               double fd_step = 1e-4);

MetricsReport run_ablation(AblationMode mode, const TrainConfig& config, const Cohort& cohort);

struct SweepCell {
    double lambda_D = 0.0;
    double lambda_S = 0.0;
    MetricsReport report;
};

// One train/evaluate per grid pair; cell seeds offset from config.seed by the
// row-major cell index. MEDDIFF_THREADS caps parallel cells (default 1).
std::vector<SweepCell> sweep(const std::vector<double>& lambda_D_grid,
                             const std::vector<double>& lambda_S_grid, const TrainConfig& config,
                             const Cohort& cohort);

}  // namespace meddiff
