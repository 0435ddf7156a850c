#pragma once

#include <Eigen/Dense>
#include <vector>

namespace meddiff {

// Single-layer unidirectional LSTM with h_0 = c_0 = 0.
struct LstmParams {
    Eigen::MatrixXd W_i, W_f, W_o, W_g;  // d_h x d_e, input projections per gate
    Eigen::MatrixXd U_i, U_f, U_o, U_g;  // d_h x d_h, recurrent projections
    Eigen::VectorXd b_i, b_f, b_o, b_g;  // d_h
};

struct LstmStepCache {
    Eigen::VectorXd x;  // input embedding
    Eigen::VectorXd i, f, o, g;
    Eigen::VectorXd c, tanh_c, h;
};

struct LstmTrace {
    std::vector<LstmStepCache> steps;
};

// Returns [h_1..h_K]; fills trace when given (needed for backward).
std::vector<Eigen::VectorXd> lstm_forward(const std::vector<Eigen::VectorXd>& inputs,
                                          const LstmParams& params, LstmTrace* trace = nullptr);

// Backpropagation through time. d_h_ext[k] is the external gradient arriving at
// h_{k+1} (from heads, fusion conditioning, etc). Accumulates into grads and,
// when d_inputs is given, writes dL/dx_k per step.
void lstm_backward(const LstmTrace& trace, const LstmParams& params,
                   const std::vector<Eigen::VectorXd>& d_h_ext, LstmParams& grads,
                   std::vector<Eigen::VectorXd>* d_inputs = nullptr);

}  // namespace meddiff
