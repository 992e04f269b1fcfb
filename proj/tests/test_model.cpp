#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "otrec/gradcheck.hpp"
#include "otrec/ink.hpp"
#include "otrec/model.hpp"
#include "otrec/rng.hpp"

using namespace otrec;

namespace {

BinaryImage test_image(int side, uint64_t seed) {
    Rng rng(seed);
    BinaryImage img(side);
    for (int i = 0; i < side; ++i) img.set(static_cast<int>(rng.uniform_int(side)), i);
    return img;
}

GmmStep random_step(int M, Rng& rng) {
    std::vector<double> raw(static_cast<size_t>(6 * M + 3));
    for (auto& v : raw) v = rng.uniform(-2, 2);
    return head_transform(raw, M);
}

// independent scalar evaluation of the two losses
double ref_loss_position(const PointSequence& targets, const std::vector<GmmStep>& steps) {
    double acc = 0;
    for (int t = 0; t < targets.n_real; ++t) {
        const auto& rec = targets.points[static_cast<size_t>(t)];
        const GmmStep& s = steps[static_cast<size_t>(t)];
        double p = 0;
        for (size_t m = 0; m < s.pi.size(); ++m) {
            const double dx = (rec.x - s.mu_x[m]) / s.sigma_x[m];
            const double dy = (rec.y - s.mu_y[m]) / s.sigma_y[m];
            const double r = s.rho[m];
            const double e = std::exp(-(dx * dx + dy * dy - 2 * r * dx * dy) / (2 * (1 - r * r)));
            p += s.pi[m] * e / (2 * M_PI * s.sigma_x[m] * s.sigma_y[m] * std::sqrt(1 - r * r));
        }
        acc += std::max(std::log(p), -30.0);
    }
    return -acc / targets.n_real;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("encoder produces the expected feature grid shapes") {
    ModelConfig cfg;  // defaults: depths 8/32/128/256, side 64
    cfg.lstm_size = 8;
    TrajectoryModel<float> net(cfg, 3);
    const Tensor<float> gf = encode_image(net, test_image(64, 1), ForwardMode::train);
    CHECK(gf.shape == std::vector<int>{16, 256});  // 4x4 positions, depth 256

    ModelConfig small = cfg;
    small.conv_depths = {2, 4, 8, 16};
    TrajectoryModel<float> net2(small, 3);
    const Tensor<float> gf2 = encode_image(net2, test_image(64, 1), ForwardMode::train);
    CHECK(gf2.shape == std::vector<int>{16, 16});
}

TEST_CASE("encoder eval forward is deterministic") {
    TrajectoryModel<float> net(ModelConfig::micro(), 9);
    BinaryImage zero(64);
    encode_image(net, zero, ForwardMode::train);  // initialize running stats
    const Tensor<float> a = encode_image(net, zero, ForwardMode::eval);
    const Tensor<float> b = encode_image(net, zero, ForwardMode::eval);
    CHECK(a.data == b.data);
}

TEST_CASE("attend with zero weights is uniform over 16 positions") {
    Rng rng(5);
    Tensor<double> gf({4, 4, 8});
    for (auto& v : gf.data) v = rng.uniform(-1, 1);
    const AttendResult r = attend(gf, Tensor<double>({6}, 0.3), Tensor<double>({8, 5}, 0.0),
                                  Tensor<double>({5, 6}, 0.0), Tensor<double>({5}, 0.0),
                                  Tensor<double>({5}, 0.0));
    for (double v : r.map.data) CHECK(v == doctest::Approx(1.0 / 16));
}

TEST_CASE("attend with a forced one-hot map returns the selected feature exactly") {
    Rng rng(6);
    Tensor<double> gf({2, 2, 3});
    for (auto& v : gf.data) v = rng.uniform(-1, 1);
    gf.data[0 * 3 + 0] = 0.0;  // zero the score channel everywhere but position 2
    gf.data[1 * 3 + 0] = 0.0;
    gf.data[2 * 3 + 0] = 1.0;
    gf.data[3 * 3 + 0] = 0.0;
    Tensor<double> u({3, 2}, 0.0);
    u.at(0, 0) = 4000.0;
    Tensor<double> w({2}, 0.0);
    w[0] = 1.0;
    const AttendResult r = attend(gf, Tensor<double>({4}, 0.0), u, Tensor<double>({2, 4}, 0.0),
                                  Tensor<double>({2}, 0.0), w);
    CHECK(r.map.data[2] == 1.0);
    for (int k = 0; k < 3; ++k) CHECK(r.context[k] == gf.data[2 * 3 + k]);
}

TEST_CASE("attend invariants hold for random draws") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const int D = 3, da = 4, L = 5;
        Tensor<double> gf({2, 2, D});
        for (auto& v : gf.data) v = rng.uniform(-3, 3);
        Tensor<double> query({L});
        for (auto& v : query.data) v = rng.uniform(-3, 3);
        Tensor<double> u({D, da}), v({da, L}), b({da}), w({da});
        for (auto& x : u.data) x = rng.uniform(-2, 2);
        for (auto& x : v.data) x = rng.uniform(-2, 2);
        for (auto& x : b.data) x = rng.uniform(-2, 2);
        for (auto& x : w.data) x = rng.uniform(-2, 2);
        const AttendResult r = attend(gf, query, u, v, b, w);
        double total = 0;
        for (double mv : r.map.data) {
            CHECK(mv >= 0.0);
            total += mv;
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
        for (int k = 0; k < D; ++k) {
            double lo = 1e18, hi = -1e18;
            for (int p = 0; p < 4; ++p) {
                lo = std::min(lo, gf.data[static_cast<size_t>(p * D + k)]);
                hi = std::max(hi, gf.data[static_cast<size_t>(p * D + k)]);
            }
            CHECK(r.context[k] >= lo - 1e-9);
            CHECK(r.context[k] <= hi + 1e-9);
        }
    }
}

TEST_CASE("head_transform of a zero vector is the uniform step") {
    const int M = 20;
    CHECK(ModelConfig{}.head_units() == 123);
    const GmmStep step = head_transform(std::vector<double>(123, 0.0), M);
    for (int m = 0; m < M; ++m) {
        CHECK(step.pi[m] == doctest::Approx(0.05));
        CHECK(step.sigma_x[m] == doctest::Approx(1.0));
        CHECK(step.sigma_y[m] == doctest::Approx(1.0));
        CHECK(step.rho[m] == doctest::Approx(0.0));
        CHECK(step.mu_x[m] == 0.0);
    }
    for (int k = 0; k < 3; ++k) CHECK(step.pen[k] == doctest::Approx(1.0 / 3));
}

TEST_CASE("head_transform invariants hold for random raw vectors") {
    Rng rng(8);
    for (int trial = 0; trial < 300; ++trial) {
        const int M = 1 + static_cast<int>(rng.uniform_int(20));
        std::vector<double> raw(static_cast<size_t>(6 * M + 3));
        for (auto& v : raw) v = rng.uniform(-30, 30);
        const GmmStep step = head_transform(raw, M);
        double pi_sum = 0, pen_sum = 0;
        for (int m = 0; m < M; ++m) {
            pi_sum += step.pi[m];
            CHECK(step.sigma_x[m] > 0.0);
            CHECK(step.sigma_y[m] <= 1.0001e4);
            CHECK(std::abs(step.rho[m]) < 1.0);
        }
        for (double p : step.pen) pen_sum += p;
        CHECK(pi_sum == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(pen_sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("gmm_density analytic values for a unit gaussian") {
    GmmStep step;
    step.pi = {1.0};
    step.mu_x = {0.0};
    step.mu_y = {0.0};
    step.sigma_x = {1.0};
    step.sigma_y = {1.0};
    step.rho = {0.0};
    step.pen = {1, 0, 0};
    CHECK(gmm_density(0, 0, step) == doctest::Approx(1.0 / (2 * M_PI)).epsilon(1e-9));
    CHECK(gmm_density(1, 0, step) == doctest::Approx(std::exp(-0.5) / (2 * M_PI)).epsilon(1e-9));
}

TEST_CASE("gmm_density integrates to one") {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        const GmmStep step = random_step(4, rng);
        // trapezoid over the union of component boxes [mu +- 6 sigma]
        double lo_x = 1e18, hi_x = -1e18, lo_y = 1e18, hi_y = -1e18;
        for (size_t m = 0; m < 4; ++m) {
            lo_x = std::min(lo_x, step.mu_x[m] - 6 * step.sigma_x[m]);
            hi_x = std::max(hi_x, step.mu_x[m] + 6 * step.sigma_x[m]);
            lo_y = std::min(lo_y, step.mu_y[m] - 6 * step.sigma_y[m]);
            hi_y = std::max(hi_y, step.mu_y[m] + 6 * step.sigma_y[m]);
        }
        const int n = 220;
        const double dx = (hi_x - lo_x) / n, dy = (hi_y - lo_y) / n;
        double total = 0;
        for (int i = 0; i <= n; ++i) {
            for (int j = 0; j <= n; ++j) {
                const double wx = (i == 0 || i == n) ? 0.5 : 1.0;
                const double wy = (j == 0 || j == n) ? 0.5 : 1.0;
                total += wx * wy * gmm_density(lo_x + i * dx, lo_y + j * dy, step);
            }
        }
        total *= dx * dy;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-2));
    }
}

TEST_CASE("gmm_density and loss_position are mixture-permutation invariant") {
    Rng rng(10);
    const GmmStep step = random_step(5, rng);
    GmmStep rotated = step;
    std::rotate(rotated.pi.begin(), rotated.pi.begin() + 2, rotated.pi.end());
    std::rotate(rotated.mu_x.begin(), rotated.mu_x.begin() + 2, rotated.mu_x.end());
    std::rotate(rotated.mu_y.begin(), rotated.mu_y.begin() + 2, rotated.mu_y.end());
    std::rotate(rotated.sigma_x.begin(), rotated.sigma_x.begin() + 2, rotated.sigma_x.end());
    std::rotate(rotated.sigma_y.begin(), rotated.sigma_y.begin() + 2, rotated.sigma_y.end());
    std::rotate(rotated.rho.begin(), rotated.rho.begin() + 2, rotated.rho.end());
    CHECK(gmm_density(0.3, 0.6, step) == doctest::Approx(gmm_density(0.3, 0.6, rotated)).epsilon(1e-12));

    PointSequence targets;
    targets.n_real = 1;
    targets.points = {PointRecord{0.3, 0.6, 2}};
    CHECK(loss_position(targets, {step}) ==
          doctest::Approx(loss_position(targets, {rotated})).epsilon(1e-12));
}

TEST_CASE("loss_position analytic value at a sharp mixture mean") {
    GmmStep step;
    step.pi = {1.0, 0.0};
    step.mu_x = {0.25, 0.9};
    step.mu_y = {0.75, 0.9};
    step.sigma_x = {0.05, 1.0};
    step.sigma_y = {0.05, 1.0};
    step.rho = {0.0, 0.0};
    step.pen = {1, 0, 0};
    PointSequence targets;
    targets.n_real = 1;
    targets.points = {PointRecord{0.25, 0.75, 2}};
    CHECK(loss_position(targets, {step}) ==
          doctest::Approx(-std::log(1.0 / (2 * M_PI * 0.0025))).epsilon(1e-6));
}

TEST_CASE("loss_pen analytic values") {
    GmmStep exact;
    exact.pi = {1};
    exact.mu_x = {0};
    exact.mu_y = {0};
    exact.sigma_x = {1};
    exact.sigma_y = {1};
    exact.rho = {0};
    exact.pen = {1, 0, 0};
    GmmStep uniform = exact;
    uniform.pen = {1.0 / 3, 1.0 / 3, 1.0 / 3};

    PointSequence targets;
    targets.n_real = 2;
    targets.points = {PointRecord{0, 0, 0}, PointRecord{0, 0, 0}};
    CHECK(loss_pen(targets, {exact, exact}) == doctest::Approx(0.0));
    CHECK(loss_pen(targets, {uniform, uniform}) == doctest::Approx(std::log(3.0)).epsilon(1e-9));
}

TEST_CASE("losses match independent scalar references on random cases") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int M = 1 + static_cast<int>(rng.uniform_int(6));
        const int n_real = 1 + static_cast<int>(rng.uniform_int(5));
        const int T = n_real + static_cast<int>(rng.uniform_int(3));
        PointSequence targets;
        targets.n_real = n_real;
        std::vector<GmmStep> steps;
        for (int t = 0; t < T; ++t) {
            PointRecord rec;
            rec.x = rng.uniform(0, 1);
            rec.y = rng.uniform(0, 1);
            rec.pen = t >= n_real ? 2 : static_cast<int>(rng.uniform_int(3));
            targets.points.push_back(rec);
            steps.push_back(random_step(M, rng));
        }
        CHECK(loss_position(targets, steps) ==
              doctest::Approx(ref_loss_position(targets, steps)).epsilon(1e-9));
        double lp = 0;
        for (int t = 0; t < T; ++t)
            lp -= std::log(steps[static_cast<size_t>(t)]
                               .pen[static_cast<size_t>(targets.points[static_cast<size_t>(t)].pen)]);
        lp /= T;
        CHECK(loss_pen(targets, steps) == doctest::Approx(lp).epsilon(1e-9));
        CHECK(loss_total(2.5, 1.0986) == doctest::Approx(3.5986));
    }
}

TEST_CASE("decoder_step with zero weights gives uniform mixtures and pens") {
    ModelConfig cfg = ModelConfig::micro();
    cfg.lstm_size = 16;
    TrajectoryModel<float> net(cfg, 1);
    for (auto& p : net.params) p.value.fill(0.0f);
    Graph<float> g;
    GraphBinding<float> bind(g, net.params);
    const Var gf = encode_image_graph(net, g, bind, image_to_input(g, test_image(64, 2)),
                                      ForwardMode::frozen);
    const Var proj = project_features(g, bind, gf);
    const DecoderStateVars<float> state = initial_decoder_state<float>(g, cfg.lstm_size);
    Tensor<float> start({5});
    for (int i = 0; i < 5; ++i) start[i] = static_cast<float>(kStartVector[static_cast<size_t>(i)]);
    const DecoderStepVars<float> out =
        decoder_step_graph(net, g, bind, gf, proj, state, g.constant(std::move(start)));
    const GmmStep step = extract_gmm_step(g.val(out.raw), cfg.mixtures);
    for (double p : step.pi) CHECK(p == doctest::Approx(1.0 / cfg.mixtures));
    for (double p : step.pen) CHECK(p == doctest::Approx(1.0 / 3));
}

TEST_CASE("decoder_step is deterministic") {
    TrajectoryModel<float> net(ModelConfig::micro(), 4);
    const BinaryImage img = test_image(64, 3);
    auto run = [&]() {
        Graph<float> g;
        GraphBinding<float> bind(g, net.params);
        const Var gf = encode_image_graph(net, g, bind, image_to_input(g, img), ForwardMode::frozen);
        const Var proj = project_features(g, bind, gf);
        DecoderStateVars<float> state = initial_decoder_state<float>(g, net.config.lstm_size);
        Tensor<float> start({5});
        for (int i = 0; i < 5; ++i)
            start[i] = static_cast<float>(kStartVector[static_cast<size_t>(i)]);
        const auto out = decoder_step_graph(net, g, bind, gf, proj, state, g.constant(std::move(start)));
        return g.val(out.raw).data;
    };
    CHECK(run() == run());
}

TEST_CASE("grad_check: attend") {
    Rng rng(12);
    const int D = 3, da = 4, L = 5, P = 4;
    Tensor<double> gf({P, D});
    for (auto& v : gf.data) v = rng.uniform(-1, 1);
    std::vector<Tensor<double>> inputs;
    inputs.push_back(gf);
    inputs.push_back([&] {
        Tensor<double> t({L});
        for (auto& v : t.data) v = rng.uniform(-1, 1);
        return t;
    }());
    for (auto shape : std::vector<std::vector<int>>{{D, da}, {da, L}, {da}, {da}}) {
        Tensor<double> t(shape);
        for (auto& v : t.data) v = rng.uniform(-1, 1);
        inputs.push_back(t);
    }
    Tensor<double> cot_map({P}), cot_ctx({D});
    for (auto& v : cot_map.data) v = rng.uniform(-1, 1);
    for (auto& v : cot_ctx.data) v = rng.uniform(-1, 1);
    const double err = grad_check(
        [&](Graph<double>& g, const std::vector<Var>& v) {
            const Var proj = g.matmul(v[0], v[2]);
            const AttendVars<double> out = attend_graph(g, v[0], proj, v[1], v[3], v[4], v[5]);
            return g.add(g.dot_const(out.map, cot_map), g.dot_const(out.context, cot_ctx));
        },
        inputs);
    CHECK(err <= 1e-5);
}

TEST_CASE("grad_check: head transform and gmm log-density") {
    Rng rng(13);
    const int M = 3;
    std::vector<Tensor<double>> inputs;
    Tensor<double> raw({6 * M + 3});
    for (auto& v : raw.data) v = rng.uniform(-1.5, 1.5);
    inputs.push_back(raw);
    const double err = grad_check(
        [&](Graph<double>& g, const std::vector<Var>& v) {
            const GmmHeadVars<double> head = head_transform_graph(g, v[0], M);
            const Var logp = gmm_logp_graph(g, head, 0.4, 0.6);
            const Var pen = pen_ce_graph(g, head, 1);
            return g.add(g.neg(logp), pen);
        },
        inputs);
    CHECK(err <= 1e-6);
}

TEST_CASE("grad_check: two-step micro model end to end") {
    ModelConfig cfg;
    cfg.image_side = 16;
    cfg.conv_depths = {1, 1, 1, 2};
    cfg.lstm_size = 4;
    cfg.mixtures = 2;
    cfg.attention_dim = 3;
    const BinaryImage img = test_image(16, 5);
    const PointRecord targets[2] = {{0.3, 0.7, 0}, {0.6, 0.2, 2}};

    TrajectoryModel<double> net(cfg, 0);
    auto build = [&](Graph<double>& g, const std::vector<Var>& vars) {
        GraphBinding<double> bind(g, net.params, vars);
        const Var gf = encode_image_graph(net, g, bind, image_to_input(g, img), ForwardMode::frozen);
        const Var proj = project_features(g, bind, gf);
        DecoderStateVars<double> state = initial_decoder_state<double>(g, cfg.lstm_size);
        Tensor<double> start({5});
        for (int i = 0; i < 5; ++i) start[i] = kStartVector[static_cast<size_t>(i)];
        Var x_prev = g.constant(std::move(start));
        std::vector<Var> logps, pens;
        for (int t = 0; t < 2; ++t) {
            const auto step = decoder_step_graph(net, g, bind, gf, proj, state, x_prev);
            state = step.state;
            const auto head = head_transform_graph(g, step.raw, cfg.mixtures);
            logps.push_back(gmm_logp_graph(g, head, targets[t].x, targets[t].y));
            pens.push_back(pen_ce_graph(g, head, targets[t].pen));
            if (t == 0) {
                Tensor<double> next({5}, 0.0);
                next[0] = targets[0].x;
                next[1] = targets[0].y;
                next[2 + targets[0].pen] = 1.0;
                x_prev = g.constant(std::move(next));
            }
        }
        const Var ls = g.neg(g.scale(g.add_n(logps), 0.5));
        const Var lp = g.scale(g.add_n(pens), 0.5);
        return g.add(ls, lp);
    };

    // Resample the initialization (with non-zero biases) until every
    // piecewise-linear input clears the kink tolerance; central differences
    // are only valid away from the breakpoints.
    bool conditioned = false;
    for (uint64_t seed = 21; seed < 121 && !conditioned; ++seed) {
        net = TrajectoryModel<double>(cfg, seed);
        Rng brng(seed ^ 0xb1a5);
        for (auto& p : net.params) {
            if (p.name.ends_with(".b") || p.name.ends_with(".beta"))
                for (auto& v : p.value.data) v = brng.uniform(-0.4, 0.4);
        }
        Graph<double> g;
        std::vector<Var> vars;
        for (const auto& p : net.params) vars.push_back(g.leaf(p.value));
        build(g, vars);
        conditioned = g.kink_margin() >= 1e-3;
    }
    REQUIRE(conditioned);

    std::vector<Tensor<double>> inputs;
    for (const auto& p : net.params) inputs.push_back(p.value);
    const double err = grad_check(build, inputs, 1e-5);
    CHECK(err <= 1e-3);
}

TEST_SUITE_END();
