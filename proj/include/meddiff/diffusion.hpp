#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "meddiff/rng.hpp"

namespace meddiff {

struct DiffusionSchedule {
    int N = 0;
    Eigen::VectorXd beta;       // length N, index n-1 holds beta_n
    Eigen::VectorXd alpha;      // 1 - beta
    Eigen::VectorXd alpha_bar;  // cumulative product of alpha
};

DiffusionSchedule build_schedule(int N, double beta_start, double beta_end);

// beta_tilde_n = beta_n (1 - alpha_bar_{n-1}) / (1 - alpha_bar_n); zero at n=1.
double posterior_variance(const DiffusionSchedule& schedule, int n);

// Step-wise attention over the diffusion latent e and the projected history
// p = W_h h_prev. AS1 drops the history term entirely; AS2 pins both weights
// to 0.5.
enum class FusionMode { Learned, AS1, AS2 };

struct FusionParams {
    Eigen::MatrixXd W_a;  // 2 x d_b
    Eigen::MatrixXd W_b;  // d_b x 2 d_e
    Eigen::VectorXd b_b;  // d_b
    Eigen::MatrixXd W_h;  // d_e x d_h
};

struct FusionCache {
    Eigen::VectorXd e, p;
    Eigen::VectorXd t;  // tanh(W_b [e; p] + b_b)
    double gamma_e = 1.0, gamma_h = 0.0;
};

struct FusionResult {
    double gamma_e = 1.0, gamma_h = 0.0;
    Eigen::VectorXd fused;
};

// Core form over the precomputed projection p = W_h h_prev.
FusionResult fuse_step_projected(const Eigen::VectorXd& e, const Eigen::VectorXd& p,
                                 const FusionParams& params, FusionMode mode,
                                 FusionCache* cache = nullptr);

FusionResult fuse_step(const Eigen::VectorXd& e, const Eigen::VectorXd& h_prev,
                       const FusionParams& params, FusionMode mode = FusionMode::Learned);

// Accumulates dL/de into d_e_out and dL/dp into d_p_out (both must be sized);
// attention parameter gradients go to grads. W_h itself is handled by the
// caller, which owns the h_prev -> p projection.
void fuse_step_backward(const Eigen::VectorXd& d_fused, const FusionCache& cache,
                        const FusionParams& params, FusionMode mode, FusionParams& grads,
                        Eigen::VectorXd& d_e_out, Eigen::VectorXd& d_p_out);

// Two tanh hidden layers over [x; sinusoidal step encoding], linear output.
struct NoisePredictorParams {
    int d_s = 32;
    Eigen::MatrixXd W1;  // d_e x (d_e + d_s)
    Eigen::VectorXd b1;  // d_e
    Eigen::MatrixXd W2;  // d_e x d_e
    Eigen::VectorXd b2;  // d_e
    Eigen::MatrixXd W3;  // d_e x d_e
    Eigen::VectorXd b3;  // d_e
};

struct NoiseCache {
    Eigen::VectorXd input;  // [x; enc]
    Eigen::VectorXd a1, a2;
};

Eigen::VectorXd step_encoding(int n, int d_s);
Eigen::VectorXd predict_noise(const Eigen::VectorXd& x, int n, const NoisePredictorParams& params,
                              NoiseCache* cache = nullptr);
// Accumulates parameter gradients and adds dL/dx into d_x_out.
void predict_noise_backward(const Eigen::VectorXd& d_out, const NoiseCache& cache,
                            const NoisePredictorParams& params, NoisePredictorParams& grads,
                            Eigen::VectorXd& d_x_out);

Eigen::VectorXd forward_noise(const Eigen::VectorXd& x0, int n, const DiffusionSchedule& schedule,
                              const Eigen::VectorXd& eps);

// One pre-drawn Monte Carlo sample of the per-visit objective.
struct NoiseDraw {
    int n = 1;
    Eigen::VectorXd eps;
};

// Step and noise draws for one visit; consumption is parameter-independent so
// an rng replay reproduces them exactly.
NoiseDraw draw_visit_noise(const DiffusionSchedule& schedule, int d_e, RngStream& rng);

using NoiseFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, int n)>;

// Per-visit term (1/d_e) ||eps - eps_hat||^2 evaluated at the pre-drawn sample;
// summed over visits by the caller.
double diffusion_visit_loss(const Eigen::VectorXd& target, const DiffusionSchedule& schedule,
                            const NoiseFn& predict, const NoiseDraw& draw);

// Eq-style Monte Carlo loss over a visit list: visit k draws from rng.child(k).
// When full_sum is set, every step n contributes one draw instead of one
// uniformly sampled n per visit.
double diffusion_loss(const std::vector<Eigen::VectorXd>& targets, const DiffusionSchedule& schedule,
                      const NoisePredictorParams& params, const RngStream& rng,
                      bool full_sum = false);

// Caches for backprop through the reverse sampling chain.
struct ReverseStepCache {
    int n = 0;
    Eigen::VectorXd state;       // e_{k,n} entering the step
    FusionCache fusion;
    NoiseCache noise;
    Eigen::VectorXd eps_hat;
};

struct VisitSampleCache {
    std::vector<ReverseStepCache> steps;  // ordered n = N .. 1
};

// Ancestral sampling of one synthetic visit embedding conditioned on
// p = W_h h_prev, recomputing the fusion at every step. Deterministic given rng.
Eigen::VectorXd sample_synthetic_visit_projected(const Eigen::VectorXd& p,
                                                 const DiffusionSchedule& schedule,
                                                 const FusionParams& fusion, FusionMode mode,
                                                 const NoisePredictorParams& noise, RngStream rng,
                                                 VisitSampleCache* cache = nullptr);

Eigen::VectorXd sample_synthetic_visit(const Eigen::VectorXd& h_prev, const DiffusionSchedule& schedule,
                                       const FusionParams& fusion, FusionMode mode,
                                       const NoisePredictorParams& noise, RngStream rng);

// Backward through the whole reverse chain: given dL/d(sample), accumulates
// fusion and noise-network gradients and adds dL/dp into d_p_out.
void sample_synthetic_visit_backward(const Eigen::VectorXd& d_sample, const VisitSampleCache& cache,
                                     const DiffusionSchedule& schedule, const FusionParams& fusion,
                                     FusionMode mode, const NoisePredictorParams& noise,
                                     FusionParams& fusion_grads, NoisePredictorParams& noise_grads,
                                     Eigen::VectorXd& d_p_out);

// Visit k of the sequence is conditioned on h_{k-1} of the ORIGINAL sequence
// (h_0 = 0) and consumes rng.child(k). e_seq is only length-checked; the
// conditioning never reads it.
std::vector<Eigen::VectorXd> sample_synthetic_sequence(const std::vector<Eigen::VectorXd>& e_seq,
                                                       const std::vector<Eigen::VectorXd>& h_seq,
                                                       const DiffusionSchedule& schedule,
                                                       const FusionParams& fusion, FusionMode mode,
                                                       const NoisePredictorParams& noise,
                                                       const RngStream& rng);

}  // namespace meddiff
