#pragma once

#include <Eigen/Dense>

namespace meddiff {

// Softmax risk head shared by the original and synthetic paths.
// Index 0 of the output is the positive class, project-wide.
struct HeadParams {
    Eigen::MatrixXd W_y;  // 2 x d_h
    Eigen::Vector2d b_y;
};

struct LossWeights {
    double lambda_S = 0.5;
    double lambda_D = 0.1;
};

Eigen::Vector2d predict_risk(const Eigen::VectorXd& h_last, const HeadParams& params);

// -log p(label) with the probability clamped to [1e-12, 1].
double cross_entropy(const Eigen::Vector2d& probs, int label);

double total_loss(double ce_orig, double ce_synth, double l_diff, const LossWeights& weights);

// d(weight * CE)/dh for one sample; accumulates head gradients.
void head_backward(const Eigen::VectorXd& h_last, const Eigen::Vector2d& probs, int label,
                   double weight, const HeadParams& params, HeadParams& grads,
                   Eigen::VectorXd& d_h_out);

// Positive-class probability for scoring; label 1 maps to softmax index 0.
inline double positive_probability(const Eigen::Vector2d& probs) { return probs[0]; }
inline int label_to_index(int label) { return label == 1 ? 0 : 1; }

}  // namespace meddiff
