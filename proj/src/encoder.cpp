#include "meddiff/encoder.hpp"

#include "meddiff/error.hpp"

namespace meddiff {

namespace {

Eigen::VectorXd sigmoid(const Eigen::VectorXd& z) {
    return (1.0 / (1.0 + (-z.array()).exp())).matrix();
}

}  // namespace

std::vector<Eigen::VectorXd> lstm_forward(const std::vector<Eigen::VectorXd>& inputs,
                                          const LstmParams& params, LstmTrace* trace) {
    if (inputs.empty()) throw ValidationError("lstm_forward on empty sequence");
    const long d_h = params.W_i.rows();
    const long d_e = params.W_i.cols();
    if (inputs.front().size() != d_e) {
        throw ValidationError("lstm input size " + std::to_string(inputs.front().size()) +
                              " does not match d_e " + std::to_string(d_e));
    }

    std::vector<Eigen::VectorXd> hs;
    hs.reserve(inputs.size());
    if (trace) {
        trace->steps.clear();
        trace->steps.reserve(inputs.size());
    }

    Eigen::VectorXd h = Eigen::VectorXd::Zero(d_h);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(d_h);
    for (const Eigen::VectorXd& x : inputs) {
        const Eigen::VectorXd i = sigmoid(params.W_i * x + params.U_i * h + params.b_i);
        const Eigen::VectorXd f = sigmoid(params.W_f * x + params.U_f * h + params.b_f);
        const Eigen::VectorXd o = sigmoid(params.W_o * x + params.U_o * h + params.b_o);
        const Eigen::VectorXd g = (params.W_g * x + params.U_g * h + params.b_g).array().tanh().matrix();
        c = (f.array() * c.array() + i.array() * g.array()).matrix();
        const Eigen::VectorXd tanh_c = c.array().tanh().matrix();
        h = (o.array() * tanh_c.array()).matrix();
        if (trace) trace->steps.push_back({x, i, f, o, g, c, tanh_c, h});
        hs.push_back(h);
    }
    return hs;
}

void lstm_backward(const LstmTrace& trace, const LstmParams& params,
                   const std::vector<Eigen::VectorXd>& d_h_ext, LstmParams& grads,
                   std::vector<Eigen::VectorXd>* d_inputs) {
    const size_t K = trace.steps.size();
    if (d_h_ext.size() != K) throw ValidationError("lstm_backward gradient count mismatch");
    const long d_h = params.W_i.rows();
    if (d_inputs) d_inputs->assign(K, Eigen::VectorXd());

    Eigen::VectorXd dh = Eigen::VectorXd::Zero(d_h);
    Eigen::VectorXd dc = Eigen::VectorXd::Zero(d_h);
    for (size_t k = K; k-- > 0;) {
        const LstmStepCache& s = trace.steps[k];
        const Eigen::VectorXd c_prev =
            k > 0 ? trace.steps[k - 1].c : Eigen::VectorXd::Zero(d_h).eval();
        const Eigen::VectorXd h_prev =
            k > 0 ? trace.steps[k - 1].h : Eigen::VectorXd::Zero(d_h).eval();

        dh += d_h_ext[k];
        const Eigen::VectorXd d_o = (dh.array() * s.tanh_c.array()).matrix();
        dc += (dh.array() * s.o.array() * (1.0 - s.tanh_c.array().square())).matrix();
        const Eigen::VectorXd d_i = (dc.array() * s.g.array()).matrix();
        const Eigen::VectorXd d_g = (dc.array() * s.i.array()).matrix();
        const Eigen::VectorXd d_f = (dc.array() * c_prev.array()).matrix();
        const Eigen::VectorXd dc_prev = (dc.array() * s.f.array()).matrix();

        // Pre-activation gradients through sigmoid / tanh.
        const Eigen::VectorXd dz_i = (d_i.array() * s.i.array() * (1.0 - s.i.array())).matrix();
        const Eigen::VectorXd dz_f = (d_f.array() * s.f.array() * (1.0 - s.f.array())).matrix();
        const Eigen::VectorXd dz_o = (d_o.array() * s.o.array() * (1.0 - s.o.array())).matrix();
        const Eigen::VectorXd dz_g = (d_g.array() * (1.0 - s.g.array().square())).matrix();

        grads.W_i.noalias() += dz_i * s.x.transpose();
        grads.W_f.noalias() += dz_f * s.x.transpose();
        grads.W_o.noalias() += dz_o * s.x.transpose();
        grads.W_g.noalias() += dz_g * s.x.transpose();
        grads.U_i.noalias() += dz_i * h_prev.transpose();
        grads.U_f.noalias() += dz_f * h_prev.transpose();
        grads.U_o.noalias() += dz_o * h_prev.transpose();
        grads.U_g.noalias() += dz_g * h_prev.transpose();
        grads.b_i += dz_i;
        grads.b_f += dz_f;
        grads.b_o += dz_o;
        grads.b_g += dz_g;

        if (d_inputs) {
            (*d_inputs)[k] = params.W_i.transpose() * dz_i + params.W_f.transpose() * dz_f +
                             params.W_o.transpose() * dz_o + params.W_g.transpose() * dz_g;
        }
        dh = params.U_i.transpose() * dz_i + params.U_f.transpose() * dz_f +
             params.U_o.transpose() * dz_o + params.U_g.transpose() * dz_g;
        dc = dc_prev;
    }
}

}  // namespace meddiff
