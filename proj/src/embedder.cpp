#include "meddiff/embedder.hpp"

#include "meddiff/error.hpp"

namespace meddiff {

namespace {

constexpr double kTimeScale = 180.0;

void check_codes(const std::vector<int>& codes, long vocab) {
    for (int code : codes) {
        if (code < 0 || code >= vocab) {
            throw ValidationError("code " + std::to_string(code) + " out of range [0, " + std::to_string(vocab) + ")");
        }
    }
}

}  // namespace

Eigen::VectorXd embed_codes(const std::vector<int>& codes, const EmbedderParams& params) {
    check_codes(codes, params.W_v.cols());
    Eigen::VectorXd pre = params.b_v;
    for (int code : codes) pre += params.W_v.col(code);
    return pre.cwiseMax(0.0);
}

Eigen::VectorXd embed_time(int delta_days, const EmbedderParams& params) {
    if (delta_days < 0) throw ValidationError("delta_days must be >= 0");
    const Eigen::VectorXd u = params.w_f * (delta_days / kTimeScale) + params.b_f;
    const Eigen::VectorXd bump = (1.0 - u.array().square().tanh()).matrix();
    return params.W_t * bump + params.b_t;
}

Eigen::VectorXd embed_visit(const Visit& visit, int anchor_day, const EmbedderParams& params,
                            EmbedCache* cache) {
    if (anchor_day < visit.day) throw ValidationError("anchor_day precedes visit day");
    check_codes(visit.codes, params.W_v.cols());

    Eigen::VectorXd code_pre = params.b_v;
    for (int code : visit.codes) code_pre += params.W_v.col(code);

    const double scaled_dt = (anchor_day - visit.day) / kTimeScale;
    const Eigen::VectorXd u = params.w_f * scaled_dt + params.b_f;
    const Eigen::VectorXd s = u.array().square().tanh();

    if (cache) {
        cache->codes = visit.codes;
        cache->scaled_dt = scaled_dt;
        cache->code_pre = code_pre;
        cache->u = u;
        cache->s = s;
    }
    return code_pre.cwiseMax(0.0) + params.W_t * (1.0 - s.array()).matrix() + params.b_t;
}

void embed_visit_backward(const Eigen::VectorXd& d_embedding, const EmbedCache& cache,
                          const EmbedderParams& params, EmbedderParams& grads) {
    // ReLU branch: gradient passes where the pre-activation was positive.
    const Eigen::VectorXd d_code_pre =
        (cache.code_pre.array() > 0.0).select(d_embedding, Eigen::VectorXd::Zero(d_embedding.size()));
    for (int code : cache.codes) grads.W_v.col(code) += d_code_pre;
    grads.b_v += d_code_pre;

    // Time branch: out = W_t (1 - s) + b_t with s = tanh(u^2).
    grads.W_t.noalias() += d_embedding * (1.0 - cache.s.array()).matrix().transpose();
    grads.b_t += d_embedding;
    const Eigen::VectorXd d_s = -(params.W_t.transpose() * d_embedding);
    const Eigen::VectorXd d_u =
        (d_s.array() * (1.0 - cache.s.array().square()) * 2.0 * cache.u.array()).matrix();
    grads.w_f += d_u * cache.scaled_dt;
    grads.b_f += d_u;
}

}  // namespace meddiff
