#include "meddiff/predictor.hpp"

#include <algorithm>
#include <cmath>

#include "meddiff/error.hpp"

namespace meddiff {

namespace {
constexpr double kProbFloor = 1e-12;
}

Eigen::Vector2d predict_risk(const Eigen::VectorXd& h_last, const HeadParams& params) {
    const Eigen::Vector2d logits = params.W_y * h_last + params.b_y;
    const double m = logits.maxCoeff();
    const Eigen::Vector2d w = (logits.array() - m).exp();
    return w / w.sum();
}

double cross_entropy(const Eigen::Vector2d& probs, int label) {
    if (label != 0 && label != 1) throw ValidationError("label must be 0 or 1");
    const double p = std::clamp(probs[label_to_index(label)], kProbFloor, 1.0);
    return -std::log(p);
}

double total_loss(double ce_orig, double ce_synth, double l_diff, const LossWeights& weights) {
    return ce_orig + weights.lambda_S * ce_synth + weights.lambda_D * l_diff;
}

void head_backward(const Eigen::VectorXd& h_last, const Eigen::Vector2d& probs, int label,
                   double weight, const HeadParams& params, HeadParams& grads,
                   Eigen::VectorXd& d_h_out) {
    // Softmax + CE collapse to probs - onehot; the clamp only fires at
    // probabilities below 1e-12, where the gradient is taken unclamped.
    Eigen::Vector2d d_logits = probs;
    d_logits[label_to_index(label)] -= 1.0;
    d_logits *= weight;
    grads.W_y.noalias() += d_logits * h_last.transpose();
    grads.b_y += d_logits;
    d_h_out += params.W_y.transpose() * d_logits;
}

}  // namespace meddiff
