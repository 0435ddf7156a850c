#include "meddiff/diffusion.hpp"

#include <cmath>

#include "meddiff/error.hpp"

namespace meddiff {

DiffusionSchedule build_schedule(int N, double beta_start, double beta_end) {
    if (N < 1) throw ValidationError("schedule needs N >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ValidationError("schedule needs 0 < beta_start <= beta_end < 1");
    }
    DiffusionSchedule s;
    s.N = N;
    s.beta.resize(N);
    s.alpha.resize(N);
    s.alpha_bar.resize(N);
    double prod = 1.0;
    for (int i = 0; i < N; ++i) {
        const double beta = N == 1 ? beta_start
                                   : beta_start + (beta_end - beta_start) * i / (N - 1);
        s.beta[i] = beta;
        s.alpha[i] = 1.0 - beta;
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
    }
    return s;
}

double posterior_variance(const DiffusionSchedule& schedule, int n) {
    if (n < 1 || n > schedule.N) throw ValidationError("step out of range");
    const double ab_prev = n >= 2 ? schedule.alpha_bar[n - 2] : 1.0;
    return schedule.beta[n - 1] * (1.0 - ab_prev) / (1.0 - schedule.alpha_bar[n - 1]);
}

FusionResult fuse_step_projected(const Eigen::VectorXd& e, const Eigen::VectorXd& p,
                                 const FusionParams& params, FusionMode mode, FusionCache* cache) {
    FusionResult out;
    if (mode == FusionMode::AS1) {
        out.gamma_e = 1.0;
        out.gamma_h = 0.0;
        out.fused = e;
    } else if (mode == FusionMode::AS2) {
        out.gamma_e = 0.5;
        out.gamma_h = 0.5;
        out.fused = 0.5 * e + 0.5 * p;
    } else {
        Eigen::VectorXd ep(e.size() + p.size());
        ep << e, p;
        const Eigen::VectorXd t = (params.W_b * ep + params.b_b).array().tanh().matrix();
        const Eigen::Vector2d logits = params.W_a * t;
        const double m = logits.maxCoeff();
        const Eigen::Vector2d w = (logits.array() - m).exp();
        const Eigen::Vector2d gamma = w / w.sum();
        out.gamma_e = gamma[0];
        out.gamma_h = gamma[1];
        out.fused = gamma[0] * e + gamma[1] * p;
        if (cache) cache->t = t;
    }
    if (cache) {
        cache->e = e;
        cache->p = p;
        cache->gamma_e = out.gamma_e;
        cache->gamma_h = out.gamma_h;
    }
    return out;
}

FusionResult fuse_step(const Eigen::VectorXd& e, const Eigen::VectorXd& h_prev,
                       const FusionParams& params, FusionMode mode) {
    return fuse_step_projected(e, params.W_h * h_prev, params, mode, nullptr);
}

void fuse_step_backward(const Eigen::VectorXd& d_fused, const FusionCache& cache,
                        const FusionParams& params, FusionMode mode, FusionParams& grads,
                        Eigen::VectorXd& d_e_out, Eigen::VectorXd& d_p_out) {
    if (mode == FusionMode::AS1) {
        d_e_out += d_fused;
        return;
    }
    if (mode == FusionMode::AS2) {
        d_e_out += 0.5 * d_fused;
        d_p_out += 0.5 * d_fused;
        return;
    }
    d_e_out += cache.gamma_e * d_fused;
    d_p_out += cache.gamma_h * d_fused;

    // fused = gamma_e e + gamma_h p; gammas from softmax(W_a tanh(W_b[e;p]+b_b)).
    const double d_gamma_e = d_fused.dot(cache.e);
    const double d_gamma_h = d_fused.dot(cache.p);
    const double dot = cache.gamma_e * d_gamma_e + cache.gamma_h * d_gamma_h;
    Eigen::Vector2d d_logits;
    d_logits[0] = cache.gamma_e * (d_gamma_e - dot);
    d_logits[1] = cache.gamma_h * (d_gamma_h - dot);

    grads.W_a.noalias() += d_logits * cache.t.transpose();
    const Eigen::VectorXd d_t = params.W_a.transpose() * d_logits;
    const Eigen::VectorXd d_z = (d_t.array() * (1.0 - cache.t.array().square())).matrix();
    Eigen::VectorXd ep(cache.e.size() + cache.p.size());
    ep << cache.e, cache.p;
    grads.W_b.noalias() += d_z * ep.transpose();
    grads.b_b += d_z;
    const Eigen::VectorXd d_ep = params.W_b.transpose() * d_z;
    d_e_out += d_ep.head(cache.e.size());
    d_p_out += d_ep.tail(cache.p.size());
}

Eigen::VectorXd step_encoding(int n, int d_s) {
    if (d_s < 2 || d_s % 2 != 0) throw ValidationError("step encoding size must be even and >= 2");
    Eigen::VectorXd enc(d_s);
    for (int i = 0; i < d_s / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / d_s);
        enc[2 * i] = std::sin(n * freq);
        enc[2 * i + 1] = std::cos(n * freq);
    }
    return enc;
}

Eigen::VectorXd predict_noise(const Eigen::VectorXd& x, int n, const NoisePredictorParams& params,
                              NoiseCache* cache) {
    Eigen::VectorXd input(x.size() + params.d_s);
    input << x, step_encoding(n, params.d_s);
    const Eigen::VectorXd a1 = (params.W1 * input + params.b1).array().tanh().matrix();
    const Eigen::VectorXd a2 = (params.W2 * a1 + params.b2).array().tanh().matrix();
    if (cache) {
        cache->input = input;
        cache->a1 = a1;
        cache->a2 = a2;
    }
    return params.W3 * a2 + params.b3;
}

void predict_noise_backward(const Eigen::VectorXd& d_out, const NoiseCache& cache,
                            const NoisePredictorParams& params, NoisePredictorParams& grads,
                            Eigen::VectorXd& d_x_out) {
    grads.W3.noalias() += d_out * cache.a2.transpose();
    grads.b3 += d_out;
    const Eigen::VectorXd d_a2 = params.W3.transpose() * d_out;
    const Eigen::VectorXd d_z2 = (d_a2.array() * (1.0 - cache.a2.array().square())).matrix();
    grads.W2.noalias() += d_z2 * cache.a1.transpose();
    grads.b2 += d_z2;
    const Eigen::VectorXd d_a1 = params.W2.transpose() * d_z2;
    const Eigen::VectorXd d_z1 = (d_a1.array() * (1.0 - cache.a1.array().square())).matrix();
    grads.W1.noalias() += d_z1 * cache.input.transpose();
    grads.b1 += d_z1;
    const long d_x = cache.input.size() - params.d_s;
    d_x_out += (params.W1.transpose() * d_z1).head(d_x);
}

Eigen::VectorXd forward_noise(const Eigen::VectorXd& x0, int n, const DiffusionSchedule& schedule,
                              const Eigen::VectorXd& eps) {
    if (n < 1 || n > schedule.N) throw ValidationError("step out of range");
    if (x0.size() != eps.size()) throw ValidationError("forward_noise shape mismatch");
    const double ab = schedule.alpha_bar[n - 1];
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

NoiseDraw draw_visit_noise(const DiffusionSchedule& schedule, int d_e, RngStream& rng) {
    NoiseDraw draw;
    draw.n = static_cast<int>(rng.uniform_int(1, schedule.N));
    draw.eps.resize(d_e);
    for (long i = 0; i < d_e; ++i) draw.eps[i] = rng.normal();
    return draw;
}

double diffusion_visit_loss(const Eigen::VectorXd& target, const DiffusionSchedule& schedule,
                            const NoiseFn& predict, const NoiseDraw& draw) {
    const Eigen::VectorXd x_n = forward_noise(target, draw.n, schedule, draw.eps);
    const Eigen::VectorXd eps_hat = predict(x_n, draw.n);
    return (draw.eps - eps_hat).squaredNorm() / static_cast<double>(target.size());
}

double diffusion_loss(const std::vector<Eigen::VectorXd>& targets, const DiffusionSchedule& schedule,
                      const NoisePredictorParams& params, const RngStream& rng, bool full_sum) {
    if (targets.empty()) throw ValidationError("diffusion_loss needs at least one target");
    const NoiseFn predict = [&](const Eigen::VectorXd& x, int n) {
        return predict_noise(x, n, params, nullptr);
    };
    double total = 0.0;
    for (size_t k = 0; k < targets.size(); ++k) {
        RngStream visit_rng = rng.child(k);
        const int d_e = static_cast<int>(targets[k].size());
        if (full_sum) {
            for (int n = 1; n <= schedule.N; ++n) {
                NoiseDraw draw;
                draw.n = n;
                draw.eps.resize(d_e);
                for (int i = 0; i < d_e; ++i) draw.eps[i] = visit_rng.normal();
                total += diffusion_visit_loss(targets[k], schedule, predict, draw);
            }
        } else {
            NoiseDraw draw = draw_visit_noise(schedule, d_e, visit_rng);
            total += diffusion_visit_loss(targets[k], schedule, predict, draw);
        }
    }
    return total;
}

Eigen::VectorXd sample_synthetic_visit_projected(const Eigen::VectorXd& p,
                                                 const DiffusionSchedule& schedule,
                                                 const FusionParams& fusion, FusionMode mode,
                                                 const NoisePredictorParams& noise, RngStream rng,
                                                 VisitSampleCache* cache) {
    const long d_e = p.size();
    Eigen::VectorXd state(d_e);
    for (long i = 0; i < d_e; ++i) state[i] = rng.normal();

    if (cache) {
        cache->steps.clear();
        cache->steps.reserve(static_cast<size_t>(schedule.N));
    }
    for (int n = schedule.N; n >= 1; --n) {
        ReverseStepCache step;
        step.n = n;
        if (cache) step.state = state;
        FusionResult fused = fuse_step_projected(state, p, fusion, mode, cache ? &step.fusion : nullptr);
        const Eigen::VectorXd eps_hat =
            predict_noise(fused.fused, n, noise, cache ? &step.noise : nullptr);
        if (cache) step.eps_hat = eps_hat;

        const double beta = schedule.beta[n - 1];
        const double ab = schedule.alpha_bar[n - 1];
        const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha[n - 1]);
        Eigen::VectorXd mean = inv_sqrt_alpha * (fused.fused - (beta / std::sqrt(1.0 - ab)) * eps_hat);
        if (n > 1) {
            const double sigma = std::sqrt(posterior_variance(schedule, n));
            for (long i = 0; i < d_e; ++i) mean[i] += sigma * rng.normal();
        }
        state = std::move(mean);
        if (cache) cache->steps.push_back(std::move(step));
    }
    return state;
}

Eigen::VectorXd sample_synthetic_visit(const Eigen::VectorXd& h_prev, const DiffusionSchedule& schedule,
                                       const FusionParams& fusion, FusionMode mode,
                                       const NoisePredictorParams& noise, RngStream rng) {
    return sample_synthetic_visit_projected(fusion.W_h * h_prev, schedule, fusion, mode, noise,
                                            rng, nullptr);
}

void sample_synthetic_visit_backward(const Eigen::VectorXd& d_sample, const VisitSampleCache& cache,
                                     const DiffusionSchedule& schedule, const FusionParams& fusion,
                                     FusionMode mode, const NoisePredictorParams& noise,
                                     FusionParams& fusion_grads, NoisePredictorParams& noise_grads,
                                     Eigen::VectorXd& d_p_out) {
    const long d_e = d_sample.size();
    Eigen::VectorXd d_state = d_sample;
    // Steps are cached in order n = N..1; walk them back from n=1 up to n=N.
    for (size_t s = cache.steps.size(); s-- > 0;) {
        const ReverseStepCache& step = cache.steps[s];
        const int n = step.n;
        const double beta = schedule.beta[n - 1];
        const double ab = schedule.alpha_bar[n - 1];
        const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha[n - 1]);
        // mean = (fused - coeff eps_hat)/sqrt(alpha); injected noise is constant.
        const Eigen::VectorXd d_mean = d_state;
        Eigen::VectorXd d_fused = inv_sqrt_alpha * d_mean;
        const Eigen::VectorXd d_eps_hat = -(beta / std::sqrt(1.0 - ab)) * inv_sqrt_alpha * d_mean;

        predict_noise_backward(d_eps_hat, step.noise, noise, noise_grads, d_fused);

        Eigen::VectorXd d_prev_state = Eigen::VectorXd::Zero(d_e);
        fuse_step_backward(d_fused, step.fusion, fusion, mode, fusion_grads, d_prev_state, d_p_out);
        d_state = std::move(d_prev_state);
    }
    // d_state now holds the gradient wrt the initial Gaussian draw; no params.
}

std::vector<Eigen::VectorXd> sample_synthetic_sequence(const std::vector<Eigen::VectorXd>& e_seq,
                                                       const std::vector<Eigen::VectorXd>& h_seq,
                                                       const DiffusionSchedule& schedule,
                                                       const FusionParams& fusion, FusionMode mode,
                                                       const NoisePredictorParams& noise,
                                                       const RngStream& rng) {
    if (e_seq.size() != h_seq.size()) throw ValidationError("embedding/hidden length mismatch");
    if (h_seq.empty()) throw ValidationError("cannot sample an empty sequence");
    const long d_h = fusion.W_h.cols();
    std::vector<Eigen::VectorXd> out;
    out.reserve(h_seq.size());
    for (size_t k = 0; k < h_seq.size(); ++k) {
        const Eigen::VectorXd h_prev = k == 0 ? Eigen::VectorXd::Zero(d_h).eval() : h_seq[k - 1];
        out.push_back(sample_synthetic_visit_projected(fusion.W_h * h_prev, schedule, fusion, mode,
                                                       noise, rng.child(k), nullptr));
    }
    return out;
}

}  // namespace meddiff
