#include "meddiff/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "meddiff/error.hpp"

namespace meddiff {

namespace {

void zero_grads(ModelParams& grads) {
    for (TensorRef& ref : tensor_refs(grads)) {
        std::fill(ref.data, ref.data + ref.size(), 0.0);
    }
}

struct AdamOpt {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;
    std::vector<Eigen::ArrayXd> m, v;

    void init(const std::vector<TensorRef>& refs) {
        m.clear();
        v.clear();
        for (const TensorRef& ref : refs) {
            m.push_back(Eigen::ArrayXd::Zero(ref.size()));
            v.push_back(Eigen::ArrayXd::Zero(ref.size()));
        }
    }

    // Decoupled weight decay: direct shrinkage scaled by lr, not mixed into
    // the moment estimates.
    void step(std::vector<TensorRef>& params, std::vector<TensorRef>& grads, double lr, double wd) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        for (size_t i = 0; i < params.size(); ++i) {
            Eigen::Map<Eigen::ArrayXd> p(params[i].data, params[i].size());
            Eigen::Map<const Eigen::ArrayXd> g(grads[i].data, grads[i].size());
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g.square();
            p -= lr * wd * p;
            p -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
    }
};

void require_finite(double value, const char* term) {
    if (!std::isfinite(value)) {
        throw std::runtime_error(std::string("non-finite ") + term);
    }
}

int env_thread_cap() {
    const char* raw = std::getenv("MEDDIFF_THREADS");
    if (!raw) return 1;
    char* end = nullptr;
    const long parsed = std::strtol(raw, &end, 10);
    if (end == raw || *end != '\0' || parsed < 1) return 1;
    return static_cast<int>(std::min<long>(parsed, 64));
}

}  // namespace

AblationMode ablation_from_string(const std::string& name) {
    if (name == "none") return AblationMode::None;
    if (name == "AS1") return AblationMode::AS1;
    if (name == "AS2") return AblationMode::AS2;
    if (name == "AS3") return AblationMode::AS3;
    throw ValidationError("unknown ablation mode `" + name + "` (none|AS1|AS2|AS3)");
}

std::string ablation_to_string(AblationMode mode) {
    switch (mode) {
        case AblationMode::None: return "none";
        case AblationMode::AS1: return "AS1";
        case AblationMode::AS2: return "AS2";
        case AblationMode::AS3: return "AS3";
    }
    throw ValidationError("invalid ablation mode");
}

void validate_train_config(const TrainConfig& c) {
    if (c.epochs < 1) throw ValidationError("epochs must be >= 1");
    if (!(c.learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
    if (c.weight_decay < 0.0) throw ValidationError("weight_decay must be >= 0");
    if (c.plateau_patience < 1) throw ValidationError("plateau_patience must be >= 1");
    if (!(c.plateau_factor > 0.0 && c.plateau_factor < 1.0)) {
        throw ValidationError("plateau_factor must be in (0, 1)");
    }
    if (c.d_e < 1 || c.d_h < 1 || c.d_f < 1 || c.d_b < 1) {
        throw ValidationError("model dimensions must be >= 1");
    }
    if (c.d_s < 2 || c.d_s % 2 != 0) throw ValidationError("d_s must be even and >= 2");
    if (c.diffusion_steps < 1) throw ValidationError("diffusion_steps must be >= 1");
    if (!(c.beta_start > 0.0 && c.beta_start <= c.beta_end && c.beta_end < 1.0)) {
        throw ValidationError("beta range must satisfy 0 < start <= end < 1");
    }
    if (c.lambda_S < 0.0 || c.lambda_D < 0.0) throw ValidationError("loss weights must be >= 0");
    if (c.batch_size < 1) throw ValidationError("batch_size must be >= 1");
    const double ratio_sum = c.train_ratio + c.val_ratio + c.test_ratio;
    if (!(c.train_ratio > 0.0 && c.val_ratio > 0.0 && c.test_ratio > 0.0) ||
        std::abs(ratio_sum - 1.0) > 1e-9) {
        throw ValidationError("split ratios must be positive and sum to 1");
    }
    if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ValidationError("threshold must be in (0, 1)");
}

TrainConfig train_config_from_kv(const KvMap& kv) {
    TrainConfig c;
    c.epochs = static_cast<int>(kv_get_int(kv, "epochs", c.epochs));
    c.learning_rate = kv_get_double(kv, "learning_rate", c.learning_rate);
    c.weight_decay = kv_get_double(kv, "weight_decay", c.weight_decay);
    c.plateau_patience = static_cast<int>(kv_get_int(kv, "plateau_patience", c.plateau_patience));
    c.plateau_factor = kv_get_double(kv, "plateau_factor", c.plateau_factor);
    c.d_e = static_cast<int>(kv_get_int(kv, "d_e", c.d_e));
    c.d_h = static_cast<int>(kv_get_int(kv, "d_h", c.d_h));
    c.d_f = static_cast<int>(kv_get_int(kv, "d_f", c.d_f));
    c.d_b = static_cast<int>(kv_get_int(kv, "d_b", c.d_b));
    c.d_s = static_cast<int>(kv_get_int(kv, "d_s", c.d_s));
    c.diffusion_steps = static_cast<int>(kv_get_int(kv, "diffusion_steps", c.diffusion_steps));
    c.beta_start = kv_get_double(kv, "beta_start", c.beta_start);
    c.beta_end = kv_get_double(kv, "beta_end", c.beta_end);
    c.lambda_S = kv_get_double(kv, "lambda_S", c.lambda_S);
    c.lambda_D = kv_get_double(kv, "lambda_D", c.lambda_D);
    c.seed = static_cast<std::uint64_t>(kv_get_int(kv, "seed", static_cast<long>(c.seed)));
    c.batch_size = static_cast<int>(kv_get_int(kv, "batch_size", c.batch_size));
    c.ablation_mode = ablation_from_string(kv_get_string(kv, "ablation_mode", "none"));
    c.diffusion_full_sum = kv_get_bool(kv, "diffusion_full_sum", c.diffusion_full_sum);
    c.train_ratio = kv_get_double(kv, "train_ratio", c.train_ratio);
    c.val_ratio = kv_get_double(kv, "val_ratio", c.val_ratio);
    c.test_ratio = kv_get_double(kv, "test_ratio", c.test_ratio);
    c.threshold = kv_get_double(kv, "threshold", c.threshold);
    validate_train_config(c);
    return c;
}

KvMap train_config_to_kv(const TrainConfig& c) {
    KvMap kv;
    kv["epochs"] = std::to_string(c.epochs);
    kv["learning_rate"] = format_fixed6(c.learning_rate);
    kv["weight_decay"] = format_fixed6(c.weight_decay);
    kv["plateau_patience"] = std::to_string(c.plateau_patience);
    kv["plateau_factor"] = format_fixed6(c.plateau_factor);
    kv["d_e"] = std::to_string(c.d_e);
    kv["d_h"] = std::to_string(c.d_h);
    kv["d_f"] = std::to_string(c.d_f);
    kv["d_b"] = std::to_string(c.d_b);
    kv["d_s"] = std::to_string(c.d_s);
    kv["diffusion_steps"] = std::to_string(c.diffusion_steps);
    kv["beta_start"] = format_fixed6(c.beta_start);
    kv["beta_end"] = format_fixed6(c.beta_end);
    kv["lambda_S"] = format_fixed6(c.lambda_S);
    kv["lambda_D"] = format_fixed6(c.lambda_D);
    kv["seed"] = std::to_string(c.seed);
    kv["batch_size"] = std::to_string(c.batch_size);
    kv["ablation_mode"] = ablation_to_string(c.ablation_mode);
    kv["diffusion_full_sum"] = c.diffusion_full_sum ? "true" : "false";
    kv["train_ratio"] = format_fixed6(c.train_ratio);
    kv["val_ratio"] = format_fixed6(c.val_ratio);
    kv["test_ratio"] = format_fixed6(c.test_ratio);
    kv["threshold"] = format_fixed6(c.threshold);
    return kv;
}

TrainContext make_context(const TrainConfig& config) {
    TrainContext ctx;
    switch (config.ablation_mode) {
        case AblationMode::None: ctx.fusion_mode = FusionMode::Learned; break;
        case AblationMode::AS1: ctx.fusion_mode = FusionMode::AS1; break;
        case AblationMode::AS2: ctx.fusion_mode = FusionMode::AS2; break;
        case AblationMode::AS3: ctx.fusion_mode = FusionMode::Learned; break;
    }
    ctx.lambda_S = config.ablation_mode == AblationMode::AS3 ? 0.0 : config.lambda_S;
    ctx.lambda_D = config.lambda_D;
    ctx.full_sum = config.diffusion_full_sum;
    return ctx;
}

RngStream patient_stream(std::uint64_t seed, int epoch, std::uint64_t patient_index) {
    return RngStream(seed).child(1).child(static_cast<std::uint64_t>(epoch)).child(1).child(patient_index);
}

PatientLoss forward_patient(const PatientRecord& record, const ModelParams& params,
                            const DiffusionSchedule& schedule, const TrainContext& ctx,
                            const RngStream& patient_rng, PatientTrace* trace) {
    const size_t K = record.visits.size();
    if (K == 0) throw ValidationError("patient record has no visits");
    const int anchor = record.visits.back().day;
    const long d_e = params.embed.W_v.rows();

    std::vector<Eigen::VectorXd> embeddings(K);
    if (trace) trace->embed_caches.assign(K, EmbedCache{});
    for (size_t k = 0; k < K; ++k) {
        embeddings[k] = embed_visit(record.visits[k], anchor, params.embed,
                                    trace ? &trace->embed_caches[k] : nullptr);
    }

    LstmTrace local_trace;
    LstmTrace* lstm_trace = trace ? &trace->lstm_orig : &local_trace;
    const std::vector<Eigen::VectorXd> hidden = lstm_forward(embeddings, params.lstm, lstm_trace);

    const Eigen::Vector2d probs = predict_risk(hidden.back(), params.head);
    PatientLoss loss;
    loss.ce_orig = cross_entropy(probs, record.label);
    require_finite(loss.ce_orig, "ce_orig");

    const bool need_diff = ctx.lambda_D != 0.0;
    const bool need_synth = ctx.lambda_S != 0.0;

    std::vector<Eigen::VectorXd> projections;
    if (need_diff || need_synth) {
        projections.resize(K);
        projections[0] = Eigen::VectorXd::Zero(d_e);
        for (size_t k = 1; k < K; ++k) projections[k] = params.fusion.W_h * hidden[k - 1];
    }

    if (need_diff) {
        if (trace) {
            trace->clean_fusion.assign(K, FusionCache{});
            trace->targets.assign(K, Eigen::VectorXd{});
            trace->loss_draws.assign(K, {});
        }
        const RngStream loss_rng = patient_rng.child(0);
        for (size_t k = 0; k < K; ++k) {
            FusionCache local_fusion;
            FusionCache* fusion_cache = trace ? &trace->clean_fusion[k] : &local_fusion;
            const FusionResult fused =
                fuse_step_projected(embeddings[k], projections[k], params.fusion, ctx.fusion_mode,
                                    fusion_cache);
            if (trace) trace->targets[k] = fused.fused;

            RngStream visit_rng = loss_rng.child(k);
            const int draws = ctx.full_sum ? schedule.N : 1;
            for (int d = 0; d < draws; ++d) {
                NoiseDraw draw;
                if (ctx.full_sum) {
                    draw.n = d + 1;
                    draw.eps.resize(d_e);
                    for (long i = 0; i < d_e; ++i) draw.eps[i] = visit_rng.normal();
                } else {
                    draw = draw_visit_noise(schedule, static_cast<int>(d_e), visit_rng);
                }
                const Eigen::VectorXd x_n = forward_noise(fused.fused, draw.n, schedule, draw.eps);
                LossDrawCache ldc;
                const Eigen::VectorXd eps_hat =
                    predict_noise(x_n, draw.n, params.noise, trace ? &ldc.noise : nullptr);
                loss.l_diff += (draw.eps - eps_hat).squaredNorm() / static_cast<double>(d_e);
                if (trace) {
                    ldc.draw = std::move(draw);
                    ldc.eps_hat = eps_hat;
                    trace->loss_draws[k].push_back(std::move(ldc));
                }
            }
        }
        require_finite(loss.l_diff, "l_diff");
    }

    if (need_synth) {
        if (trace) trace->sample_caches.assign(K, VisitSampleCache{});
        std::vector<Eigen::VectorXd> synth(K);
        const RngStream sample_rng = patient_rng.child(1);
        for (size_t k = 0; k < K; ++k) {
            synth[k] = sample_synthetic_visit_projected(projections[k], schedule, params.fusion,
                                                        ctx.fusion_mode, params.noise,
                                                        sample_rng.child(k),
                                                        trace ? &trace->sample_caches[k] : nullptr);
        }
        LstmTrace synth_local;
        LstmTrace* synth_trace = trace ? &trace->lstm_synth : &synth_local;
        const std::vector<Eigen::VectorXd> synth_hidden = lstm_forward(synth, params.lstm, synth_trace);
        const Eigen::Vector2d synth_probs = predict_risk(synth_hidden.back(), params.head);
        loss.ce_synth = cross_entropy(synth_probs, record.label);
        require_finite(loss.ce_synth, "ce_synth");
        if (trace) {
            trace->synth_embeddings = std::move(synth);
            trace->probs_synth = synth_probs;
        }
    }

    if (trace) {
        trace->embeddings = std::move(embeddings);
        trace->hidden = hidden;
        trace->probs_orig = probs;
        trace->projections = std::move(projections);
    }

    loss.total = loss.ce_orig + ctx.lambda_S * loss.ce_synth + ctx.lambda_D * loss.l_diff;
    require_finite(loss.total, "total loss");
    return loss;
}

void backward_patient(const PatientRecord& record, const ModelParams& params,
                      const DiffusionSchedule& schedule, const TrainContext& ctx,
                      const PatientTrace& trace, ModelParams& grads) {
    const size_t K = record.visits.size();
    const long d_e = params.embed.W_v.rows();
    const long d_h = params.lstm.W_i.rows();
    const bool need_diff = ctx.lambda_D != 0.0;
    const bool need_synth = ctx.lambda_S != 0.0;

    std::vector<Eigen::VectorXd> d_embed_ext(K, Eigen::VectorXd::Zero(d_e));
    std::vector<Eigen::VectorXd> d_proj(K, Eigen::VectorXd::Zero(d_e));
    std::vector<Eigen::VectorXd> d_hidden_ext(K, Eigen::VectorXd::Zero(d_h));

    head_backward(trace.hidden.back(), trace.probs_orig, record.label, 1.0, params.head, grads.head,
                  d_hidden_ext[K - 1]);

    if (need_synth) {
        std::vector<Eigen::VectorXd> d_synth_hidden(K, Eigen::VectorXd::Zero(d_h));
        head_backward(trace.lstm_synth.steps.back().h, trace.probs_synth, record.label, ctx.lambda_S,
                      params.head, grads.head, d_synth_hidden[K - 1]);
        std::vector<Eigen::VectorXd> d_synth_inputs;
        lstm_backward(trace.lstm_synth, params.lstm, d_synth_hidden, grads.lstm, &d_synth_inputs);
        for (size_t k = 0; k < K; ++k) {
            sample_synthetic_visit_backward(d_synth_inputs[k], trace.sample_caches[k], schedule,
                                            params.fusion, ctx.fusion_mode, params.noise,
                                            grads.fusion, grads.noise, d_proj[k]);
        }
    }

    if (need_diff) {
        for (size_t k = 0; k < K; ++k) {
            Eigen::VectorXd d_target = Eigen::VectorXd::Zero(d_e);
            for (const LossDrawCache& ldc : trace.loss_draws[k]) {
                const Eigen::VectorXd d_eps_hat =
                    (2.0 * ctx.lambda_D / static_cast<double>(d_e)) * (ldc.eps_hat - ldc.draw.eps);
                Eigen::VectorXd d_x_n = Eigen::VectorXd::Zero(d_e);
                predict_noise_backward(d_eps_hat, ldc.noise, params.noise, grads.noise, d_x_n);
                d_target += std::sqrt(schedule.alpha_bar[ldc.draw.n - 1]) * d_x_n;
            }
            fuse_step_backward(d_target, trace.clean_fusion[k], params.fusion, ctx.fusion_mode,
                               grads.fusion, d_embed_ext[k], d_proj[k]);
        }
    }

    if (need_diff || need_synth) {
        for (size_t k = 1; k < K; ++k) {
            grads.fusion.W_h.noalias() += d_proj[k] * trace.hidden[k - 1].transpose();
            d_hidden_ext[k - 1] += params.fusion.W_h.transpose() * d_proj[k];
        }
    }

    std::vector<Eigen::VectorXd> d_inputs;
    lstm_backward(trace.lstm_orig, params.lstm, d_hidden_ext, grads.lstm, &d_inputs);
    for (size_t k = 0; k < K; ++k) {
        embed_visit_backward(d_inputs[k] + d_embed_ext[k], trace.embed_caches[k], params.embed,
                             grads.embed);
    }
}

std::vector<double> score_cohort(const ModelParams& params, const Cohort& cohort) {
    std::vector<double> scores;
    scores.reserve(cohort.records.size());
    for (const PatientRecord& record : cohort.records) {
        const int anchor = record.visits.back().day;
        std::vector<Eigen::VectorXd> embeddings;
        embeddings.reserve(record.visits.size());
        for (const Visit& visit : record.visits) {
            embeddings.push_back(embed_visit(visit, anchor, params.embed, nullptr));
        }
        const std::vector<Eigen::VectorXd> hidden = lstm_forward(embeddings, params.lstm, nullptr);
        scores.push_back(positive_probability(predict_risk(hidden.back(), params.head)));
    }
    return scores;
}

MetricsReport evaluate_model(const ModelParams& params, const Cohort& cohort, double threshold) {
    const std::vector<double> scores = score_cohort(params, cohort);
    std::vector<int> labels;
    labels.reserve(cohort.records.size());
    for (const PatientRecord& record : cohort.records) labels.push_back(record.label);
    return compute_report(scores, labels, threshold);
}

TrainResult train(const TrainConfig& config, const Cohort& train_set, const Cohort& val_set) {
    validate_train_config(config);
    validate_cohort(train_set);
    validate_cohort(val_set);
    if (train_set.vocab_size != val_set.vocab_size) {
        throw ValidationError("train/val vocab_size mismatch");
    }

    const ModelDims dims{train_set.vocab_size, config.d_e, config.d_h,
                         config.d_f,           config.d_b, config.d_s};
    const RngStream root(config.seed);
    ModelParams params = init_model(dims, root.child(0));
    ModelParams grads = make_zero_model(dims);
    std::vector<TensorRef> param_refs = tensor_refs(params);
    std::vector<TensorRef> grad_refs = tensor_refs(grads);

    const DiffusionSchedule schedule =
        build_schedule(config.diffusion_steps, config.beta_start, config.beta_end);
    const TrainContext ctx = make_context(config);

    AdamOpt opt;
    opt.init(param_refs);

    std::vector<int> val_labels;
    for (const PatientRecord& record : val_set.records) val_labels.push_back(record.label);

    TrainResult result;
    result.config = config;
    result.schedule = schedule;
    result.best_val_f1 = -1.0;

    double lr = config.learning_rate;
    int bad_epochs = 0;
    const size_t n = train_set.records.size();

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const RngStream epoch_rng = root.child(1).child(static_cast<std::uint64_t>(epoch));
        RngStream shuffle_rng = epoch_rng.child(0);
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        for (size_t i = n; i > 1; --i) {
            const size_t j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }

        double loss_sum = 0.0;
        int in_batch = 0;
        zero_grads(grads);
        for (size_t idx : order) {
            const RngStream prng = epoch_rng.child(1).child(idx);
            PatientTrace trace;
            try {
                const PatientLoss loss = forward_patient(train_set.records[idx], params, schedule,
                                                         ctx, prng, &trace);
                backward_patient(train_set.records[idx], params, schedule, ctx, trace, grads);
                loss_sum += loss.total;
            } catch (const std::runtime_error& err) {
                throw std::runtime_error(std::string(err.what()) + " (epoch " + std::to_string(epoch) +
                                         ", patient " + std::to_string(idx) + ")");
            }
            if (++in_batch == config.batch_size) {
                opt.step(param_refs, grad_refs, lr, config.weight_decay);
                zero_grads(grads);
                in_batch = 0;
            }
        }
        if (in_batch > 0) {
            opt.step(param_refs, grad_refs, lr, config.weight_decay);
            zero_grads(grads);
        }

        const std::vector<double> val_scores = score_cohort(params, val_set);
        std::vector<int> val_preds(val_scores.size());
        for (size_t i = 0; i < val_scores.size(); ++i) {
            val_preds[i] = val_scores[i] >= config.threshold ? 1 : 0;
        }
        const double val_f1 = f1(val_preds, val_labels);

        result.history.push_back({epoch, loss_sum / static_cast<double>(n), val_f1, lr});

        if (val_f1 > result.best_val_f1) {
            result.best_val_f1 = val_f1;
            result.epoch_of_best = epoch;
            result.params = params;
            bad_epochs = 0;
        } else if (++bad_epochs >= config.plateau_patience) {
            lr *= config.plateau_factor;
            bad_epochs = 0;
        }
    }
    return result;
}

double batch_loss(const std::vector<PatientRecord>& batch, const ModelParams& params,
                  const DiffusionSchedule& schedule, const TrainContext& ctx, std::uint64_t seed) {
    double total = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        total += forward_patient(batch[i], params, schedule, ctx, patient_stream(seed, 0, i), nullptr)
                     .total;
    }
    return total;
}

ModelParams batch_gradients(const std::vector<PatientRecord>& batch, const ModelParams& params,
                            const DiffusionSchedule& schedule, const TrainContext& ctx,
                            std::uint64_t seed, const ModelDims& dims) {
    ModelParams grads = make_zero_model(dims);
    for (size_t i = 0; i < batch.size(); ++i) {
        PatientTrace trace;
        forward_patient(batch[i], params, schedule, ctx, patient_stream(seed, 0, i), &trace);
        backward_patient(batch[i], params, schedule, ctx, trace, grads);
    }
    return grads;
}

GradCheckReport compare_gradients(ModelParams& analytic, ModelParams& finite_diff, double tolerance,
                                  double floor) {
    GradCheckReport report;
    report.tolerance = tolerance;
    std::vector<TensorRef> a_refs = tensor_refs(analytic);
    std::vector<TensorRef> f_refs = tensor_refs(finite_diff);
    for (size_t t = 0; t < a_refs.size(); ++t) {
        GradCheckEntry entry;
        entry.tensor = a_refs[t].name;
        for (long i = 0; i < a_refs[t].size(); ++i) {
            const double a = a_refs[t].data[i];
            const double f = f_refs[t].data[i];
            const double rel = std::abs(a - f) / std::max({std::abs(a), std::abs(f), floor});
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.analytic_at_max = a;
                entry.fd_at_max = f;
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.entries.push_back(std::move(entry));
    }
    report.passed = report.max_rel_error <= tolerance;
    return report;
}

GradCheckReport gradient_check(const ModelDims& dims, const std::vector<PatientRecord>& batch,
                               const TrainConfig& config, double tolerance, double fd_step) {
    if (batch.empty() || batch.size() > 2) {
        throw ValidationError("gradient_check expects a microbatch of 1-2 patients");
    }
    const DiffusionSchedule schedule =
        build_schedule(config.diffusion_steps, config.beta_start, config.beta_end);
    const TrainContext ctx = make_context(config);
    ModelParams params = init_model(dims, RngStream(config.seed).child(0));

    ModelParams analytic = batch_gradients(batch, params, schedule, ctx, config.seed, dims);
    ModelParams finite_diff = make_zero_model(dims);

    std::vector<TensorRef> p_refs = tensor_refs(params);
    std::vector<TensorRef> f_refs = tensor_refs(finite_diff);
    for (size_t t = 0; t < p_refs.size(); ++t) {
        for (long i = 0; i < p_refs[t].size(); ++i) {
            const double orig = p_refs[t].data[i];
            p_refs[t].data[i] = orig + fd_step;
            const double plus = batch_loss(batch, params, schedule, ctx, config.seed);
            p_refs[t].data[i] = orig - fd_step;
            const double minus = batch_loss(batch, params, schedule, ctx, config.seed);
            p_refs[t].data[i] = orig;
            f_refs[t].data[i] = (plus - minus) / (2.0 * fd_step);
        }
    }
    return compare_gradients(analytic, finite_diff, tolerance);
}

MetricsReport run_ablation(AblationMode mode, const TrainConfig& config, const Cohort& cohort) {
    TrainConfig cell = config;
    cell.ablation_mode = mode;
    const CohortSplit split =
        split_cohort(cohort, {cell.train_ratio, cell.val_ratio, cell.test_ratio}, cell.seed);
    const TrainResult trained = train(cell, split.train, split.val);
    return evaluate_model(trained.params, split.test, cell.threshold);
}

std::vector<SweepCell> sweep(const std::vector<double>& lambda_D_grid,
                             const std::vector<double>& lambda_S_grid, const TrainConfig& config,
                             const Cohort& cohort) {
    if (lambda_D_grid.empty() || lambda_S_grid.empty()) {
        throw ValidationError("sweep grids must be non-empty");
    }
    std::vector<SweepCell> cells(lambda_D_grid.size() * lambda_S_grid.size());
    std::vector<TrainConfig> configs(cells.size());
    for (size_t i = 0; i < lambda_D_grid.size(); ++i) {
        for (size_t j = 0; j < lambda_S_grid.size(); ++j) {
            const size_t flat = i * lambda_S_grid.size() + j;
            TrainConfig cell = config;
            cell.lambda_D = lambda_D_grid[i];
            cell.lambda_S = lambda_S_grid[j];
            cell.seed = config.seed + flat;
            configs[flat] = cell;
            cells[flat].lambda_D = cell.lambda_D;
            cells[flat].lambda_S = cell.lambda_S;
        }
    }

    const int threads = std::min<int>(env_thread_cap(), static_cast<int>(cells.size()));
    std::atomic<size_t> next{0};
    std::vector<std::string> errors(cells.size());
    auto worker = [&]() {
        while (true) {
            const size_t at = next.fetch_add(1);
            if (at >= cells.size()) return;
            try {
                cells[at].report = run_ablation(configs[at].ablation_mode, configs[at], cohort);
            } catch (const std::exception& err) {
                errors[at] = err.what();
            }
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(threads));
        for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (std::thread& th : pool) th.join();
    }
    for (size_t i = 0; i < cells.size(); ++i) {
        if (!errors[i].empty()) {
            throw std::runtime_error("sweep cell " + std::to_string(i) + " failed: " + errors[i]);
        }
    }
    return cells;
}

}  // namespace meddiff
