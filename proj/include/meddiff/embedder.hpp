#pragma once

#include <Eigen/Dense>
#include <vector>

#include "meddiff/corpus.hpp"

namespace meddiff {

// Visit embedding e_k = code embedding + time-gap embedding.
// The time gap feeds a bump 1 - tanh(u^2) of an affine map of delta_days/180.
struct EmbedderParams {
    Eigen::MatrixXd W_v;  // d_e x M
    Eigen::VectorXd b_v;  // d_e
    Eigen::VectorXd w_f;  // d_f, weight on the scalar delta_days/180
    Eigen::VectorXd b_f;  // d_f
    Eigen::MatrixXd W_t;  // d_e x d_f
    Eigen::VectorXd b_t;  // d_e
};

// Forward intermediates needed by embed_visit_backward.
struct EmbedCache {
    std::vector<int> codes;
    double scaled_dt = 0.0;     // delta_days / 180
    Eigen::VectorXd code_pre;   // W_v c + b_v, before ReLU
    Eigen::VectorXd u;          // w_f * scaled_dt + b_f
    Eigen::VectorXd s;          // tanh(u^2)
};

Eigen::VectorXd embed_codes(const std::vector<int>& codes, const EmbedderParams& params);
Eigen::VectorXd embed_time(int delta_days, const EmbedderParams& params);
Eigen::VectorXd embed_visit(const Visit& visit, int anchor_day, const EmbedderParams& params,
                            EmbedCache* cache = nullptr);

// Accumulates parameter gradients for dL/d(embedding) of one visit.
void embed_visit_backward(const Eigen::VectorXd& d_embedding, const EmbedCache& cache,
                          const EmbedderParams& params, EmbedderParams& grads);

}  // namespace meddiff
