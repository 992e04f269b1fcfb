#include <cmath>

#include "doctest.h"
#include "otrec/adam.hpp"
#include "otrec/gradcheck.hpp"
#include "otrec/graph.hpp"
#include "otrec/params.hpp"
#include "otrec/rng.hpp"

using namespace otrec;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// keep values away from activation kinks
Tensor<double> random_tensor_off_kink(std::vector<int> shape, Rng& rng, double margin = 1e-2) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) {
        do {
            v = rng.uniform(-1.0, 1.0);
        } while (std::abs(v) < margin);
    }
    return t;
}

Tensor<double> weighted_sum_weights(int64_t n, Rng& rng) {
    Tensor<double> w({static_cast<int>(n)});
    for (auto& v : w.data) v = rng.uniform(-1.0, 1.0);
    return w;
}

}  // namespace

TEST_SUITE_BEGIN("numerics");

TEST_CASE("conv2d identity kernel reproduces the input") {
    Graph<float> g;
    Rng rng(1);
    Tensor<float> x({2, 6, 6});
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1, 1));
    Tensor<float> w({2, 2, 3, 3}, 0.0f);
    w.data[0 * 18 + 0 * 9 + 4] = 1.0f;  // out 0 <- in 0 center
    w.data[1 * 18 + 1 * 9 + 4] = 1.0f;  // out 1 <- in 1 center
    const Var y = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(Tensor<float>({2}, 0.0f)));
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(g.val(y)[i] == doctest::Approx(x[i]));
}

TEST_CASE("conv2d all-zero kernels emit the bias") {
    Graph<float> g;
    Tensor<float> x({1, 4, 4}, 3.0f);
    const Var y = g.conv2d(g.leaf(x), g.leaf(Tensor<float>({3, 1, 3, 3}, 0.0f)),
                           g.leaf(Tensor<float>({3}, -1.5f)));
    for (int64_t i = 0; i < g.val(y).numel(); ++i) CHECK(g.val(y)[i] == doctest::Approx(-1.5f));
}

TEST_CASE("conv2d matches a direct four-loop oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const int C = 1 + static_cast<int>(rng.uniform_int(3));
        const int O = 1 + static_cast<int>(rng.uniform_int(3));
        const int H = 3 + static_cast<int>(rng.uniform_int(4));
        const int W = 3 + static_cast<int>(rng.uniform_int(4));
        Tensor<double> x = random_tensor({C, H, W}, rng);
        Tensor<double> w = random_tensor({O, C, 3, 3}, rng);
        Tensor<double> b = random_tensor({O}, rng);
        Graph<double> g;
        const Var y = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b));
        for (int o = 0; o < O; ++o) {
            for (int i = 0; i < H; ++i) {
                for (int j = 0; j < W; ++j) {
                    double acc = b[o];
                    for (int c = 0; c < C; ++c) {
                        for (int ky = 0; ky < 3; ++ky) {
                            for (int kx = 0; kx < 3; ++kx) {
                                const int yy = i + ky - 1, xx = j + kx - 1;
                                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                                acc += x.at(c, yy, xx) * w[((o * C + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    CHECK(g.val(y).at(o, i, j) == doctest::Approx(acc).epsilon(1e-9));
                }
            }
        }
    }
}

TEST_CASE("maxpool2d basics") {
    Graph<float> g;
    Tensor<float> flat({1, 2, 2});
    flat.data = {1, 2, 3, 4};
    CHECK(g.val(g.maxpool2d(g.leaf(flat)))[0] == 4.0f);

    Tensor<float> c({3, 4, 4}, 2.5f);
    const Var y = g.maxpool2d(g.leaf(c));
    CHECK(g.val(y).shape == std::vector<int>{3, 2, 2});
    for (float v : g.val(y).data) CHECK(v == 2.5f);

    Tensor<float> odd({1, 3, 4});
    CHECK_THROWS_AS(g.maxpool2d(g.leaf(odd)), std::runtime_error);
}

TEST_CASE("maxpool2d matches a window-max oracle") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<double> x = random_tensor({2, 4, 4}, rng);
        Graph<double> g;
        const Var y = g.maxpool2d(g.leaf(x));
        for (int c = 0; c < 2; ++c) {
            for (int i = 0; i < 2; ++i) {
                for (int j = 0; j < 2; ++j) {
                    const double want =
                        std::max({x.at(c, 2 * i, 2 * j), x.at(c, 2 * i, 2 * j + 1),
                                  x.at(c, 2 * i + 1, 2 * j), x.at(c, 2 * i + 1, 2 * j + 1)});
                    CHECK(g.val(y).at(c, i, j) == want);
                }
            }
        }
    }
}

TEST_CASE("batchnorm normalizes per channel in train mode") {
    Rng rng(4);
    Tensor<float> x({3, 4, 4});
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(-5, 5));
    BnStats<float> stats;
    Graph<float> g;
    const Var y = g.batchnorm(g.leaf(x), g.leaf(Tensor<float>({3}, 1.0f)),
                              g.leaf(Tensor<float>({3}, 0.0f)), &stats, true, 0.1f, 1e-5f);
    for (int c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (int i = 0; i < 16; ++i) mean += g.val(y)[c * 16 + i];
        mean /= 16;
        for (int i = 0; i < 16; ++i) {
            const double d = g.val(y)[c * 16 + i] - mean;
            var += d * d;
        }
        var /= 16;
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-4));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
    CHECK(stats.initialized);
}

TEST_CASE("batchnorm with zero gamma emits beta") {
    Tensor<float> x({2, 2, 2});
    x.data = {1, 2, 3, 4, 5, 6, 7, 8};
    BnStats<float> stats;
    Graph<float> g;
    const Var y = g.batchnorm(g.leaf(x), g.leaf(Tensor<float>({2}, 0.0f)),
                              g.leaf(Tensor<float>({2}, 7.0f)), &stats, true, 0.1f, 1e-5f);
    for (float v : g.val(y).data) CHECK(v == doctest::Approx(7.0f));
}

TEST_CASE("batchnorm eval mode is read-only and needs initialized stats") {
    Tensor<float> x({1, 2, 2});
    x.data = {1, 2, 3, 4};
    BnStats<float> stats;
    Graph<float> g;
    const auto gamma = g.leaf(Tensor<float>({1}, 1.0f));
    const auto beta = g.leaf(Tensor<float>({1}, 0.0f));
    CHECK_THROWS_AS(g.batchnorm(g.leaf(x), gamma, beta, &stats, false, 0.1f, 1e-5f),
                    std::runtime_error);
    g.batchnorm(g.leaf(x), gamma, beta, &stats, true, 0.1f, 1e-5f);
    const Tensor<float> saved_mean = stats.mean;
    const Var e1 = g.batchnorm(g.leaf(x), gamma, beta, &stats, false, 0.1f, 1e-5f);
    const Var e2 = g.batchnorm(g.leaf(x), gamma, beta, &stats, false, 0.1f, 1e-5f);
    CHECK(g.val(e1).data == g.val(e2).data);
    CHECK(stats.mean.data == saved_mean.data);
}

TEST_CASE("activation and softmax basics") {
    Graph<double> g;
    Tensor<double> x({2});
    x.data = {-1.0, 2.0};
    const auto y = g.val(g.leaky_relu(g.leaf(x), 0.01));
    CHECK(y[0] == doctest::Approx(-0.01));
    CHECK(y[1] == doctest::Approx(2.0));

    const auto sm = g.val(g.softmax(g.leaf(Tensor<double>({16}, 0.0))));
    for (double v : sm.data) CHECK(v == doctest::Approx(1.0 / 16));

    Tensor<double> w({3, 3}, 0.0);
    for (int i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    Tensor<double> in({3});
    in.data = {4, 5, 6};
    const auto lin = g.val(g.linear(g.leaf(in), g.leaf(w), g.leaf(Tensor<double>({3}, 0.0))));
    CHECK(lin.data == in.data);
}

TEST_CASE("softmax outputs are a distribution for any input") {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        Graph<double> g;
        const auto y = g.val(g.softmax(g.leaf(random_tensor({12}, rng, -40, 40))));
        double total = 0;
        for (double v : y.data) {
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("lstm_cell analytic zero-weight case") {
    const int H = 4;
    Graph<double> g;
    Tensor<double> c0({H});
    c0.data = {0.5, -0.25, 1.0, 0.0};
    const auto [h1, c1] = g.lstm_cell(
        g.leaf(Tensor<double>({3}, 0.0)), g.leaf(Tensor<double>({H}, 0.0)), g.leaf(c0),
        g.leaf(Tensor<double>({4 * H, 3}, 0.0)), g.leaf(Tensor<double>({4 * H, H}, 0.0)),
        g.leaf(Tensor<double>({4 * H}, 0.0)));
    for (int i = 0; i < H; ++i) {
        CHECK(g.val(c1)[i] == doctest::Approx(0.5 * c0[i]));
        CHECK(g.val(h1)[i] == doctest::Approx(0.5 * std::tanh(0.5 * c0[i])));
    }
}

TEST_CASE("lstm_cell zero state stays zero under zero weights") {
    Graph<double> g;
    const int H = 3;
    const auto [h1, c1] = g.lstm_cell(
        g.leaf(Tensor<double>({2}, 0.0)), g.leaf(Tensor<double>({H}, 0.0)),
        g.leaf(Tensor<double>({H}, 0.0)), g.leaf(Tensor<double>({4 * H, 2}, 0.0)),
        g.leaf(Tensor<double>({4 * H, H}, 0.0)), g.leaf(Tensor<double>({4 * H}, 0.0)));
    for (int i = 0; i < H; ++i) {
        CHECK(g.val(h1)[i] == 0.0);
        CHECK(g.val(c1)[i] == 0.0);
    }
}

TEST_CASE("lstm_cell matches a scalar gate-by-gate oracle") {
    Rng rng(7);
    auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (int trial = 0; trial < 50; ++trial) {
        const int H = 1 + static_cast<int>(rng.uniform_int(4));
        const int D = 1 + static_cast<int>(rng.uniform_int(4));
        Tensor<double> x = random_tensor({D}, rng);
        Tensor<double> h = random_tensor({H}, rng);
        Tensor<double> c = random_tensor({H}, rng);
        Tensor<double> wx = random_tensor({4 * H, D}, rng);
        Tensor<double> wh = random_tensor({4 * H, H}, rng);
        Tensor<double> b = random_tensor({4 * H}, rng);
        Graph<double> g;
        const auto [h1, c1] = g.lstm_cell(g.leaf(x), g.leaf(h), g.leaf(c), g.leaf(wx), g.leaf(wh),
                                          g.leaf(b));
        for (int i = 0; i < H; ++i) {
            auto gate = [&](int row) {
                double acc = b[row];
                for (int k = 0; k < D; ++k) acc += wx.at(row, k) * x[k];
                for (int k = 0; k < H; ++k) acc += wh.at(row, k) * h[k];
                return acc;
            };
            const double ig = sigmoid(gate(i));
            const double fg = sigmoid(gate(H + i));
            const double gg = std::tanh(gate(2 * H + i));
            const double og = sigmoid(gate(3 * H + i));
            const double cc = fg * c[i] + ig * gg;
            CHECK(g.val(c1)[i] == doctest::Approx(cc).epsilon(1e-9));
            CHECK(g.val(h1)[i] == doctest::Approx(og * std::tanh(cc)).epsilon(1e-9));
        }
    }
}

TEST_CASE("adam first step moves by about lr") {
    ParamStore<double> store;
    store.add("x", {1}).value[0] = 3.0;
    store.require("x").grad[0] = 0.37;
    Adam<double> adam(1e-3);
    adam.step(store);
    CHECK(store.require("x").value[0] == doctest::Approx(3.0 - 1e-3).epsilon(2e-6));
    CHECK(adam.t == 1);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
    ParamStore<double> store;
    store.add("x", {3}).value.fill(1.25);
    Adam<double> adam(0.1);
    adam.step(store);
    for (double v : store.require("x").value.data) CHECK(v == 1.25);
    CHECK(adam.t == 1);
}

TEST_CASE("adam descends x^2 monotonically") {
    ParamStore<double> store;
    store.add("x", {1}).value[0] = 1.0;
    Adam<double> adam(0.1);
    double prev = 1.0;
    for (int i = 0; i < 10; ++i) {
        store.require("x").grad[0] = 2.0 * store.require("x").value[0];
        adam.step(store);
        const double cur = std::abs(store.require("x").value[0]);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("adam rejects non-finite gradients") {
    ParamStore<double> store;
    store.add("x", {1}).grad[0] = std::numeric_limits<double>::quiet_NaN();
    Adam<double> adam(0.1);
    CHECK_THROWS_WITH_AS(adam.step(store), doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("grad_check: linear") {
    Rng rng(10);
    std::vector<Tensor<double>> inputs{random_tensor({5}, rng), random_tensor({4, 5}, rng),
                                       random_tensor({4}, rng)};
    const Tensor<double> cot = weighted_sum_weights(4, rng);
    const double err = grad_check(
        [&](Graph<double>& g, const std::vector<Var>& v) {
            return g.dot_const(g.linear(v[0], v[1], v[2]), cot);
        },
        inputs);
    CHECK(err <= 1e-6);
}

TEST_CASE("grad_check: softmax cross-entropy composite") {
    Rng rng(11);
    std::vector<Tensor<double>> inputs{random_tensor({7}, rng, -2, 2)};
    Tensor<double> onehot({7}, 0.0);
    onehot[3] = 1.0;
    const double err = grad_check(
        [&](Graph<double>& g, const std::vector<Var>& v) {
            return g.neg(g.dot_const(g.log_softmax(v[0]), onehot));
        },
        inputs);
    CHECK(err <= 1e-6);
}

TEST_CASE("grad_check: conv2d, pooling and leaky relu away from kinks") {
    Rng rng(12);
    std::vector<Tensor<double>> inputs{random_tensor_off_kink({2, 4, 4}, rng),
                                       random_tensor({3, 2, 3, 3}, rng),
                                       random_tensor({3}, rng)};
    const Tensor<double> cot = weighted_sum_weights(3 * 2 * 2, rng);
    const double err = grad_check(
        [&](Graph<double>& g, const std::vector<Var>& v) {
            const Var conv = g.conv2d(v[0], v[1], v[2]);
            const Var act = g.leaky_relu(conv, 0.01);
            const Var pooled = g.maxpool2d(act);
            return g.dot_const(g.reshape(pooled, {12}), cot);
        },
        inputs);
    CHECK(err <= 1e-5);
}

TEST_CASE("grad_check: batchnorm train mode") {
    Rng rng(13);
    std::vector<Tensor<double>> inputs{random_tensor({2, 4, 4}, rng), random_tensor({2}, rng, 0.5, 2.0),
                                       random_tensor({2}, rng)};
    const Tensor<double> cot = weighted_sum_weights(32, rng);
    const double err = grad_check(
        [&](Graph<double>& g, const std::vector<Var>& v) {
            const Var y = g.batchnorm(v[0], v[1], v[2], nullptr, true, 0.1, 1e-5);
            return g.dot_const(g.reshape(y, {32}), cot);
        },
        inputs);
    CHECK(err <= 1e-6);
}

TEST_CASE("grad_check: lstm_cell including the cell path") {
    Rng rng(14);
    const int H = 3, D = 2;
    std::vector<Tensor<double>> inputs{random_tensor({D}, rng),        random_tensor({H}, rng),
                                       random_tensor({H}, rng),        random_tensor({4 * H, D}, rng),
                                       random_tensor({4 * H, H}, rng), random_tensor({4 * H}, rng)};
    const Tensor<double> cot_h = weighted_sum_weights(H, rng);
    const Tensor<double> cot_c = weighted_sum_weights(H, rng);
    const double err = grad_check(
        [&](Graph<double>& g, const std::vector<Var>& v) {
            const auto [h1, c1] = g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]);
            return g.add(g.dot_const(h1, cot_h), g.dot_const(c1, cot_c));
        },
        inputs);
    CHECK(err <= 1e-6);
}

TEST_CASE("grad_check: tanh, exp, division and logsumexp chain") {
    Rng rng(15);
    std::vector<Tensor<double>> inputs{random_tensor({6}, rng, 0.5, 2.0),
                                       random_tensor({6}, rng, -1.5, 1.5)};
    const double err = grad_check(
        [&](Graph<double>& g, const std::vector<Var>& v) {
            const Var a = g.exp_(g.tanh_(v[1]));
            const Var b = g.div(v[0], a);
            return g.logsumexp(g.log_(b));
        },
        inputs);
    CHECK(err <= 1e-6);
}

TEST_CASE("ops are bitwise deterministic") {
    Rng rng(16);
    Tensor<float> x({3, 8, 8});
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1, 1));
    Tensor<float> w({4, 3, 3, 3});
    for (auto& v : w.data) v = static_cast<float>(rng.uniform(-1, 1));
    auto run = [&]() {
        Graph<float> g;
        const Var y =
            g.maxpool2d(g.leaky_relu(g.conv2d(g.leaf(x), g.leaf(w), g.leaf(Tensor<float>({4}, 0.1f))),
                                     0.01f));
        return g.val(g.softmax(g.reshape(y, {64}))).data;
    };
    CHECK(run() == run());
}

TEST_SUITE_END();
