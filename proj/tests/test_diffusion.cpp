#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <utility>
#include <vector>

#include "doctest.h"
#include "meddiff/diffusion.hpp"
#include "meddiff/error.hpp"
#include "meddiff/rng.hpp"

using namespace meddiff;

namespace {

FusionParams make_fusion(int d_e, int d_h, int d_b) {
    FusionParams p;
    p.W_a = Eigen::MatrixXd::Zero(2, d_b);
    p.W_b = Eigen::MatrixXd::Zero(d_b, 2 * d_e);
    p.b_b = Eigen::VectorXd::Zero(d_b);
    p.W_h = Eigen::MatrixXd::Zero(d_e, d_h);
    return p;
}

FusionParams random_fusion(int d_e, int d_h, int d_b, RngStream rng) {
    FusionParams p = make_fusion(d_e, d_h, d_b);
    for (auto* m : {&p.W_a, &p.W_b, &p.W_h}) {
        for (long i = 0; i < m->size(); ++i) m->data()[i] = 0.6 * rng.normal();
    }
    for (long i = 0; i < p.b_b.size(); ++i) p.b_b(i) = 0.6 * rng.normal();
    return p;
}

NoisePredictorParams make_noise_net(int d_e, int d_s) {
    NoisePredictorParams p;
    p.d_s = d_s;
    p.W1 = Eigen::MatrixXd::Zero(d_e, d_e + d_s);
    p.b1 = Eigen::VectorXd::Zero(d_e);
    p.W2 = Eigen::MatrixXd::Zero(d_e, d_e);
    p.b2 = Eigen::VectorXd::Zero(d_e);
    p.W3 = Eigen::MatrixXd::Zero(d_e, d_e);
    p.b3 = Eigen::VectorXd::Zero(d_e);
    return p;
}

NoisePredictorParams random_noise_net(int d_e, int d_s, RngStream rng) {
    NoisePredictorParams p = make_noise_net(d_e, d_s);
    for (auto* m : {&p.W1, &p.W2, &p.W3}) {
        for (long i = 0; i < m->size(); ++i) m->data()[i] = 0.5 * rng.normal();
    }
    for (auto* v : {&p.b1, &p.b2, &p.b3}) {
        for (long i = 0; i < v->size(); ++i) (*v)(i) = 0.5 * rng.normal();
    }
    return p;
}

Eigen::VectorXd random_vec(int d, RngStream rng) {
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v(i) = rng.normal();
    return v;
}

}  // namespace

TEST_CASE("schedule arithmetic") {
    const DiffusionSchedule s = build_schedule(2, 0.5, 0.5);
    CHECK(s.alpha_bar[0] == doctest::Approx(0.5));
    CHECK(s.alpha_bar[1] == doctest::Approx(0.25));

    const DiffusionSchedule one = build_schedule(1, 1e-4, 1e-4);
    CHECK(one.alpha_bar[0] == doctest::Approx(0.9999));

    const DiffusionSchedule dflt = build_schedule(100, 1e-4, 0.02);
    CHECK(dflt.beta[0] == doctest::Approx(1e-4));
    CHECK(dflt.beta[99] == doctest::Approx(0.02));
    for (int i = 1; i < dflt.N; ++i) CHECK(dflt.alpha_bar[i] < dflt.alpha_bar[i - 1]);
    CHECK(dflt.alpha_bar[99] > 0.0);
    CHECK(dflt.alpha_bar[99] < 1.0);
}

TEST_CASE("schedule bounds") {
    CHECK_THROWS_AS(build_schedule(0, 1e-4, 0.02), ValidationError);
    CHECK_THROWS_AS(build_schedule(10, 0.0, 0.02), ValidationError);
    CHECK_THROWS_AS(build_schedule(10, 0.02, 1e-4), ValidationError);
    CHECK_THROWS_AS(build_schedule(10, 0.5, 1.0), ValidationError);
}

TEST_CASE("posterior variance is zero at the first step") {
    const DiffusionSchedule s = build_schedule(2, 0.5, 0.5);
    CHECK(posterior_variance(s, 1) == doctest::Approx(0.0));
    CHECK(posterior_variance(s, 2) == doctest::Approx(0.5 * 0.5 / 0.75));
    CHECK_THROWS_AS(posterior_variance(s, 0), ValidationError);
    CHECK_THROWS_AS(posterior_variance(s, 3), ValidationError);
}

TEST_CASE("fusion weights are a softmax pair") {
    const int d_e = 4, d_h = 3, d_b = 4;
    const FusionParams p = random_fusion(d_e, d_h, d_b, RngStream(21));
    RngStream rng(22);
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::VectorXd e = random_vec(d_e, rng.child(2 * trial));
        const Eigen::VectorXd h = random_vec(d_h, rng.child(2 * trial + 1));
        const FusionResult r = fuse_step(e, h, p);
        CHECK(std::abs(r.gamma_e + r.gamma_h - 1.0) < 1e-12);
        CHECK(r.gamma_e > 0.0);
        CHECK(r.gamma_h > 0.0);
        CHECK((r.fused - (r.gamma_e * e + r.gamma_h * (p.W_h * h))).norm() < 1e-12);
    }
}

TEST_CASE("zero attention matrix gives the midpoint") {
    const int d_e = 3, d_h = 2, d_b = 4;
    FusionParams p = random_fusion(d_e, d_h, d_b, RngStream(23));
    p.W_a.setZero();
    const Eigen::VectorXd e = random_vec(d_e, RngStream(24));
    const Eigen::VectorXd h = random_vec(d_h, RngStream(25));
    const FusionResult r = fuse_step(e, h, p);
    CHECK(r.gamma_e == doctest::Approx(0.5));
    CHECK(r.gamma_h == doctest::Approx(0.5));
    CHECK((r.fused - 0.5 * (e + p.W_h * h)).norm() < 1e-12);
}

TEST_CASE("fusing equal points returns the point") {
    const int d_e = 3, d_h = 3, d_b = 4;
    FusionParams p = random_fusion(d_e, d_h, d_b, RngStream(26));
    p.W_h = Eigen::MatrixXd::Identity(d_e, d_h);
    const Eigen::VectorXd e = random_vec(d_e, RngStream(27));
    const FusionResult r = fuse_step(e, e, p);  // W_h h = e
    CHECK((r.fused - e).norm() < 1e-12);
}

TEST_CASE("fusion matches a scalar-loop oracle") {
    const int d_e = 3, d_h = 2, d_b = 4;
    const FusionParams p = random_fusion(d_e, d_h, d_b, RngStream(28));
    const Eigen::VectorXd e = random_vec(d_e, RngStream(29));
    const Eigen::VectorXd h = random_vec(d_h, RngStream(30));

    std::vector<double> proj(d_e, 0.0);
    for (int r = 0; r < d_e; ++r) {
        for (int c = 0; c < d_h; ++c) proj[r] += p.W_h(r, c) * h(c);
    }
    std::vector<double> t(d_b);
    for (int r = 0; r < d_b; ++r) {
        double z = p.b_b(r);
        for (int c = 0; c < d_e; ++c) z += p.W_b(r, c) * e(c);
        for (int c = 0; c < d_e; ++c) z += p.W_b(r, d_e + c) * proj[c];
        t[r] = std::tanh(z);
    }
    double l0 = 0.0, l1 = 0.0;
    for (int c = 0; c < d_b; ++c) {
        l0 += p.W_a(0, c) * t[c];
        l1 += p.W_a(1, c) * t[c];
    }
    const double ge = std::exp(l0) / (std::exp(l0) + std::exp(l1));
    const double gh = 1.0 - ge;

    const FusionResult r = fuse_step(e, h, p);
    CHECK(std::abs(r.gamma_e - ge) < 1e-12);
    CHECK(std::abs(r.gamma_h - gh) < 1e-12);
    for (int i = 0; i < d_e; ++i) {
        CHECK(std::abs(r.fused(i) - (ge * e(i) + gh * proj[i])) < 1e-12);
    }
}

TEST_CASE("ablation fusion modes") {
    const int d_e = 3, d_h = 2, d_b = 4;
    const FusionParams p = random_fusion(d_e, d_h, d_b, RngStream(31));
    const Eigen::VectorXd e = random_vec(d_e, RngStream(32));
    const Eigen::VectorXd h = random_vec(d_h, RngStream(33));

    const FusionResult drop = fuse_step(e, h, p, FusionMode::AS1);
    CHECK(drop.gamma_e == 1.0);
    CHECK(drop.gamma_h == 0.0);
    for (int i = 0; i < d_e; ++i) CHECK(drop.fused(i) == e(i));  // bitwise copy

    const FusionResult half = fuse_step(e, h, p, FusionMode::AS2);
    CHECK(half.gamma_e == 0.5);
    CHECK(half.gamma_h == 0.5);
    CHECK((half.fused - (0.5 * e + 0.5 * (p.W_h * h))).norm() < 1e-15);
}

TEST_CASE("fusion backward matches finite differences") {
    const int d_e = 3, d_b = 4;
    FusionParams p = random_fusion(d_e, 2, d_b, RngStream(34));
    Eigen::VectorXd e = random_vec(d_e, RngStream(35));
    Eigen::VectorXd proj = random_vec(d_e, RngStream(36));
    const Eigen::VectorXd w = random_vec(d_e, RngStream(37));

    const auto loss = [&](const Eigen::VectorXd& ee, const Eigen::VectorXd& pp) {
        return w.dot(fuse_step_projected(ee, pp, p, FusionMode::Learned).fused);
    };

    FusionCache cache;
    fuse_step_projected(e, proj, p, FusionMode::Learned, &cache);
    FusionParams grads = make_fusion(d_e, 2, d_b);
    Eigen::VectorXd d_e_acc = Eigen::VectorXd::Zero(d_e);
    Eigen::VectorXd d_p_acc = Eigen::VectorXd::Zero(d_e);
    fuse_step_backward(w, cache, p, FusionMode::Learned, grads, d_e_acc, d_p_acc);

    const double step = 1e-6;
    const auto fd_check = [&](double* slot, double analytic) {
        const double keep = *slot;
        *slot = keep + step;
        const double up = loss(e, proj);
        *slot = keep - step;
        const double down = loss(e, proj);
        *slot = keep;
        const double fd = (up - down) / (2.0 * step);
        CHECK(std::abs(analytic - fd) < 1e-6 * std::max({std::abs(analytic), std::abs(fd), 1.0}));
    };
    for (long i = 0; i < p.W_a.size(); ++i) fd_check(p.W_a.data() + i, grads.W_a.data()[i]);
    for (long i = 0; i < p.W_b.size(); ++i) fd_check(p.W_b.data() + i, grads.W_b.data()[i]);
    for (long i = 0; i < p.b_b.size(); ++i) fd_check(p.b_b.data() + i, grads.b_b.data()[i]);
    for (int i = 0; i < d_e; ++i) fd_check(e.data() + i, d_e_acc(i));
    for (int i = 0; i < d_e; ++i) fd_check(proj.data() + i, d_p_acc(i));
}

TEST_CASE("step encoding values and bounds") {
    const Eigen::VectorXd enc = step_encoding(3, 4);
    CHECK(enc(0) == doctest::Approx(std::sin(3.0)));
    CHECK(enc(1) == doctest::Approx(std::cos(3.0)));
    CHECK(enc(2) == doctest::Approx(std::sin(0.03)));
    CHECK(enc(3) == doctest::Approx(std::cos(0.03)));
    for (int n = 1; n <= 50; ++n) {
        CHECK(step_encoding(n, 8).lpNorm<Eigen::Infinity>() <= 1.0);
    }
    CHECK((step_encoding(1, 8) - step_encoding(2, 8)).norm() > 1e-3);
    CHECK_THROWS_AS(step_encoding(1, 3), ValidationError);
    CHECK_THROWS_AS(step_encoding(1, 0), ValidationError);
}

TEST_CASE("noise predictor zero weights and purity") {
    const int d_e = 3, d_s = 4;
    const NoisePredictorParams zero = make_noise_net(d_e, d_s);
    const Eigen::VectorXd x = random_vec(d_e, RngStream(38));
    CHECK(predict_noise(x, 2, zero).norm() == 0.0);

    const NoisePredictorParams p = random_noise_net(d_e, d_s, RngStream(39));
    const Eigen::VectorXd a = predict_noise(x, 5, p);
    const Eigen::VectorXd b = predict_noise(x, 5, p);
    CHECK((a - b).norm() == 0.0);
    CHECK(a.allFinite());
}

TEST_CASE("noise predictor matches a scalar-loop oracle") {
    const int d_e = 3, d_s = 4;
    const NoisePredictorParams p = random_noise_net(d_e, d_s, RngStream(40));
    const Eigen::VectorXd x = random_vec(d_e, RngStream(41));
    const int n = 7;

    std::vector<double> input(d_e + d_s);
    for (int i = 0; i < d_e; ++i) input[i] = x(i);
    const Eigen::VectorXd enc = step_encoding(n, d_s);
    for (int i = 0; i < d_s; ++i) input[d_e + i] = enc(i);

    std::vector<double> a1(d_e), a2(d_e), out(d_e);
    for (int r = 0; r < d_e; ++r) {
        double z = p.b1(r);
        for (int c = 0; c < d_e + d_s; ++c) z += p.W1(r, c) * input[c];
        a1[r] = std::tanh(z);
    }
    for (int r = 0; r < d_e; ++r) {
        double z = p.b2(r);
        for (int c = 0; c < d_e; ++c) z += p.W2(r, c) * a1[c];
        a2[r] = std::tanh(z);
    }
    for (int r = 0; r < d_e; ++r) {
        double z = p.b3(r);
        for (int c = 0; c < d_e; ++c) z += p.W3(r, c) * a2[c];
        out[r] = z;
    }

    const Eigen::VectorXd got = predict_noise(x, n, p);
    for (int i = 0; i < d_e; ++i) CHECK(std::abs(got(i) - out[i]) < 1e-12);
}

TEST_CASE("noise predictor backward matches finite differences") {
    const int d_e = 3, d_s = 4;
    NoisePredictorParams p = random_noise_net(d_e, d_s, RngStream(42));
    Eigen::VectorXd x = random_vec(d_e, RngStream(43));
    const Eigen::VectorXd w = random_vec(d_e, RngStream(44));
    const int n = 3;

    NoiseCache cache;
    predict_noise(x, n, p, &cache);
    NoisePredictorParams grads = make_noise_net(d_e, d_s);
    Eigen::VectorXd d_x = Eigen::VectorXd::Zero(d_e);
    predict_noise_backward(w, cache, p, grads, d_x);

    const double step = 1e-6;
    const auto loss = [&]() { return w.dot(predict_noise(x, n, p)); };
    const auto fd_check = [&](double* slot, double analytic) {
        const double keep = *slot;
        *slot = keep + step;
        const double up = loss();
        *slot = keep - step;
        const double down = loss();
        *slot = keep;
        const double fd = (up - down) / (2.0 * step);
        CHECK(std::abs(analytic - fd) < 1e-6 * std::max({std::abs(analytic), std::abs(fd), 1.0}));
    };
    NoisePredictorParams* gp = &grads;
    for (auto [m, g] : {std::pair{&p.W1, &gp->W1}, {&p.W2, &gp->W2}, {&p.W3, &gp->W3}}) {
        for (long i = 0; i < m->size(); ++i) fd_check(m->data() + i, g->data()[i]);
    }
    for (auto [v, g] : {std::pair{&p.b1, &gp->b1}, {&p.b2, &gp->b2}, {&p.b3, &gp->b3}}) {
        for (long i = 0; i < v->size(); ++i) fd_check(v->data() + i, (*g)(i));
    }
    for (int i = 0; i < d_e; ++i) fd_check(x.data() + i, d_x(i));
}

TEST_CASE("forward noising plug-in arithmetic") {
    const DiffusionSchedule s = build_schedule(2, 0.5, 0.5);  // alpha_bar_2 = 0.25
    Eigen::VectorXd x0(2), eps(2);
    x0 << 2.0, 0.0;
    eps << 0.0, 1.0;
    const Eigen::VectorXd x2 = forward_noise(x0, 2, s, eps);
    CHECK(x2(0) == doctest::Approx(1.0));
    CHECK(x2(1) == doctest::Approx(std::sqrt(0.75)));
    CHECK_THROWS_AS(forward_noise(x0, 0, s, eps), ValidationError);
    CHECK_THROWS_AS(forward_noise(x0, 3, s, eps), ValidationError);
}

TEST_CASE("noiseless limit returns the input") {
    const DiffusionSchedule s = build_schedule(3, 1e-12, 1e-12);
    const Eigen::VectorXd x0 = random_vec(4, RngStream(45));
    const Eigen::VectorXd eps = random_vec(4, RngStream(46));
    CHECK((forward_noise(x0, 3, s, eps) - x0).lpNorm<Eigen::Infinity>() < 1e-5);
}

TEST_CASE("closed form matches iterated noising in the first two moments") {
    const int N = 10, d_e = 2, draws = 10000;
    const DiffusionSchedule s = build_schedule(N, 0.05, 0.4);
    Eigen::VectorXd x0(d_e);
    x0 << 1.0, -2.0;
    const int n = N;
    const double ab = s.alpha_bar[n - 1];

    RngStream rng(47);
    Eigen::MatrixXd closed(d_e, draws), iterated(d_e, draws);
    for (int t = 0; t < draws; ++t) {
        closed.col(t) = forward_noise(x0, n, s, random_vec(d_e, rng.child(2 * t)));
        RngStream step_rng = rng.child(2 * t + 1);
        Eigen::VectorXd x = x0;
        for (int i = 1; i <= n; ++i) {
            Eigen::VectorXd e(d_e);
            for (int j = 0; j < d_e; ++j) e(j) = step_rng.normal();
            x = std::sqrt(1.0 - s.beta[i - 1]) * x + std::sqrt(s.beta[i - 1]) * e;
        }
        iterated.col(t) = x;
    }

    const double sigma2 = 1.0 - ab;
    const double se_mean = std::sqrt(sigma2 / draws);
    const double se_var = sigma2 * std::sqrt(2.0 / (draws - 1));
    for (int j = 0; j < d_e; ++j) {
        for (const Eigen::MatrixXd* m : {&closed, &iterated}) {
            const double mean = m->row(j).mean();
            const double var = (m->row(j).array() - mean).square().sum() / (draws - 1);
            CHECK(std::abs(mean - std::sqrt(ab) * x0(j)) < 3.0 * se_mean);
            CHECK(std::abs(var - sigma2) < 3.0 * se_var);
        }
    }
}

TEST_CASE("perfect predictor zeroes the per-visit loss") {
    const DiffusionSchedule s = build_schedule(5, 0.1, 0.3);
    const Eigen::VectorXd target = random_vec(3, RngStream(48));
    RngStream rng(49);
    NoiseDraw draw = draw_visit_noise(s, 3, rng);
    const NoiseFn perfect = [&](const Eigen::VectorXd&, int) { return draw.eps; };
    CHECK(diffusion_visit_loss(target, s, perfect, draw) == 0.0);
}

TEST_CASE("zero predictor loss is the mean squared noise") {
    const int d_e = 4, visits = 10000;
    const DiffusionSchedule s = build_schedule(8, 0.05, 0.3);
    const NoisePredictorParams zero = make_noise_net(d_e, 4);
    const std::vector<Eigen::VectorXd> targets(visits, random_vec(d_e, RngStream(50)));
    const double total = diffusion_loss(targets, s, zero, RngStream(51));
    // Each visit contributes ||eps||^2 / d_e with expectation 1.
    const double per_visit = total / visits;
    const double se = std::sqrt(2.0 / d_e / visits);
    CHECK(std::abs(per_visit - 1.0) < 3.0 * se);
}

TEST_CASE("loss decomposes over visits under replayed substreams") {
    const int d_e = 3;
    const DiffusionSchedule s = build_schedule(6, 0.05, 0.3);
    const NoisePredictorParams p = random_noise_net(d_e, 4, RngStream(52));
    const Eigen::VectorXd t0 = random_vec(d_e, RngStream(53));
    const Eigen::VectorXd t1 = random_vec(d_e, RngStream(54));
    const RngStream rng(55);

    const NoiseFn predict = [&](const Eigen::VectorXd& x, int n) { return predict_noise(x, n, p); };
    double manual = 0.0;
    const std::vector<Eigen::VectorXd> targets = {t0, t1};
    for (size_t k = 0; k < targets.size(); ++k) {
        RngStream visit_rng = rng.child(k);
        const NoiseDraw draw = draw_visit_noise(s, d_e, visit_rng);
        manual += diffusion_visit_loss(targets[k], s, predict, draw);
    }
    CHECK(diffusion_loss(targets, s, p, rng) == doctest::Approx(manual).epsilon(1e-15));

    // Doubling a visit list with replayed draws doubles each visit's term.
    RngStream v0 = rng.child(0);
    const NoiseDraw d0 = draw_visit_noise(s, d_e, v0);
    const double single = diffusion_visit_loss(t0, s, predict, d0);
    CHECK(diffusion_visit_loss(t0, s, predict, d0) + diffusion_visit_loss(t0, s, predict, d0) ==
          doctest::Approx(2.0 * single).epsilon(1e-15));
}

TEST_CASE("full-sum mode touches every step") {
    const int d_e = 2, N = 5;
    const DiffusionSchedule s = build_schedule(N, 0.1, 0.3);
    const NoisePredictorParams p = random_noise_net(d_e, 4, RngStream(56));
    const std::vector<Eigen::VectorXd> targets = {random_vec(d_e, RngStream(57))};
    const RngStream rng(58);

    RngStream visit_rng = rng.child(0);
    const NoiseFn predict = [&](const Eigen::VectorXd& x, int n) { return predict_noise(x, n, p); };
    double manual = 0.0;
    for (int n = 1; n <= N; ++n) {
        NoiseDraw draw;
        draw.n = n;
        draw.eps = Eigen::VectorXd(d_e);
        for (int i = 0; i < d_e; ++i) draw.eps(i) = visit_rng.normal();
        manual += diffusion_visit_loss(targets[0], s, predict, draw);
    }
    CHECK(diffusion_loss(targets, s, p, rng, true) == doctest::Approx(manual).epsilon(1e-15));
}

TEST_CASE("sampler shape and determinism") {
    const int d_e = 4, d_h = 3, d_b = 4, d_s = 4;
    const DiffusionSchedule s = build_schedule(6, 0.05, 0.3);
    const FusionParams fusion = random_fusion(d_e, d_h, d_b, RngStream(59));
    const NoisePredictorParams noise = random_noise_net(d_e, d_s, RngStream(60));
    const Eigen::VectorXd h = random_vec(d_h, RngStream(61));

    const Eigen::VectorXd a = sample_synthetic_visit(h, s, fusion, FusionMode::Learned, noise, RngStream(62));
    const Eigen::VectorXd b = sample_synthetic_visit(h, s, fusion, FusionMode::Learned, noise, RngStream(62));
    const Eigen::VectorXd c = sample_synthetic_visit(h, s, fusion, FusionMode::Learned, noise, RngStream(63));
    CHECK(a.size() == d_e);
    CHECK((a - b).norm() == 0.0);
    CHECK((a - c).norm() > 0.0);
    CHECK(a.allFinite());
}

TEST_CASE("single-step sampler with a silent network matches the hand formula") {
    const int d_e = 3, d_h = 2, d_b = 4;
    const DiffusionSchedule s = build_schedule(1, 0.2, 0.2);
    const FusionParams fusion = random_fusion(d_e, d_h, d_b, RngStream(64));
    const NoisePredictorParams zero = make_noise_net(d_e, 4);
    const Eigen::VectorXd h = random_vec(d_h, RngStream(65));

    // The sampler's first d_e draws form the initial state.
    RngStream replay(66);
    Eigen::VectorXd z(d_e);
    for (int i = 0; i < d_e; ++i) z(i) = replay.normal();
    const Eigen::VectorXd expected = fuse_step(z, h, fusion).fused / std::sqrt(s.alpha[0]);

    const Eigen::VectorXd got = sample_synthetic_visit(h, s, fusion, FusionMode::Learned, zero, RngStream(66));
    CHECK((got - expected).lpNorm<Eigen::Infinity>() < 1e-14);
}

TEST_CASE("reverse step inverts a noiseless single-step chain") {
    // x0 = (x1 - sqrt(1 - alpha_bar_1) eps) / sqrt(alpha_bar_1) for N=1.
    const DiffusionSchedule s = build_schedule(1, 0.3, 0.3);
    const Eigen::VectorXd x0 = random_vec(4, RngStream(67));
    const Eigen::VectorXd eps = random_vec(4, RngStream(68));
    const Eigen::VectorXd x1 = forward_noise(x0, 1, s, eps);
    const double ab = s.alpha_bar[0];
    const Eigen::VectorXd rec = (x1 - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    CHECK((rec - x0).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("sequence sampling is causal in the conditioning states") {
    const int d_e = 3, d_h = 2, d_b = 4, K = 3;
    const DiffusionSchedule s = build_schedule(4, 0.05, 0.3);
    const FusionParams fusion = random_fusion(d_e, d_h, d_b, RngStream(69));
    const NoisePredictorParams noise = random_noise_net(d_e, 4, RngStream(70));

    std::vector<Eigen::VectorXd> e_seq, h_seq;
    for (int k = 0; k < K; ++k) {
        e_seq.push_back(random_vec(d_e, RngStream(71 + k)));
        h_seq.push_back(random_vec(d_h, RngStream(81 + k)));
    }
    const RngStream rng(90);
    const auto base = sample_synthetic_sequence(e_seq, h_seq, s, fusion, FusionMode::Learned, noise, rng);
    REQUIRE(base.size() == static_cast<size_t>(K));

    auto bumped = h_seq;
    bumped[1] += Eigen::VectorXd::Ones(d_h);
    const auto after = sample_synthetic_sequence(e_seq, bumped, s, fusion, FusionMode::Learned, noise, rng);
    // Visit k conditions on h_{k-1}: only the visit after the bump moves.
    CHECK((base[0] - after[0]).norm() == 0.0);
    CHECK((base[1] - after[1]).norm() == 0.0);
    CHECK((base[2] - after[2]).norm() > 0.0);

    CHECK_THROWS_AS(
        sample_synthetic_sequence(e_seq, {h_seq[0]}, s, fusion, FusionMode::Learned, noise, rng),
        ValidationError);
    CHECK_THROWS_AS(sample_synthetic_sequence({}, {}, s, fusion, FusionMode::Learned, noise, rng),
                    ValidationError);
}

TEST_CASE("sampler backward matches finite differences through the chain") {
    const int d_e = 3, d_h = 2, d_b = 2, d_s = 2, N = 3;
    const DiffusionSchedule s = build_schedule(N, 0.05, 0.3);
    FusionParams fusion = random_fusion(d_e, d_h, d_b, RngStream(91));
    NoisePredictorParams noise = random_noise_net(d_e, d_s, RngStream(92));
    Eigen::VectorXd proj = random_vec(d_e, RngStream(93));
    const Eigen::VectorXd w = random_vec(d_e, RngStream(94));
    const std::uint64_t seed = 95;

    const auto loss = [&]() {
        return w.dot(sample_synthetic_visit_projected(proj, s, fusion, FusionMode::Learned, noise,
                                                      RngStream(seed)));
    };

    VisitSampleCache cache;
    sample_synthetic_visit_projected(proj, s, fusion, FusionMode::Learned, noise, RngStream(seed), &cache);
    REQUIRE(cache.steps.size() == static_cast<size_t>(N));
    FusionParams fusion_grads = make_fusion(d_e, d_h, d_b);
    NoisePredictorParams noise_grads = make_noise_net(d_e, d_s);
    Eigen::VectorXd d_p = Eigen::VectorXd::Zero(d_e);
    sample_synthetic_visit_backward(w, cache, s, fusion, FusionMode::Learned, noise, fusion_grads,
                                    noise_grads, d_p);

    const double step = 1e-5;
    const auto fd_check = [&](double* slot, double analytic) {
        const double keep = *slot;
        *slot = keep + step;
        const double up = loss();
        *slot = keep - step;
        const double down = loss();
        *slot = keep;
        const double fd = (up - down) / (2.0 * step);
        CHECK(std::abs(analytic - fd) < 2e-5 * std::max({std::abs(analytic), std::abs(fd), 1.0}));
    };
    for (long i = 0; i < fusion.W_a.size(); ++i) fd_check(fusion.W_a.data() + i, fusion_grads.W_a.data()[i]);
    for (long i = 0; i < fusion.W_b.size(); ++i) fd_check(fusion.W_b.data() + i, fusion_grads.W_b.data()[i]);
    for (long i = 0; i < fusion.b_b.size(); ++i) fd_check(fusion.b_b.data() + i, fusion_grads.b_b.data()[i]);
    for (auto [m, g] : {std::pair{&noise.W1, &noise_grads.W1},
                        {&noise.W2, &noise_grads.W2},
                        {&noise.W3, &noise_grads.W3}}) {
        for (long i = 0; i < m->size(); ++i) fd_check(m->data() + i, g->data()[i]);
    }
    for (auto [v, g] : {std::pair{&noise.b1, &noise_grads.b1},
                        {&noise.b2, &noise_grads.b2},
                        {&noise.b3, &noise_grads.b3}}) {
        for (long i = 0; i < v->size(); ++i) fd_check(v->data() + i, (*g)(i));
    }
    for (int i = 0; i < d_e; ++i) fd_check(proj.data() + i, d_p(i));
}
