#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "otrec/adam.hpp"
#include "otrec/graph.hpp"
#include "otrec/ink.hpp"
#include "otrec/params.hpp"

namespace otrec {

struct ModelConfig {
    int image_side = 64;
    std::array<int, 4> conv_depths = {8, 32, 128, 256};
    int lstm_size = 1024;
    int mixtures = 20;
    int attention_dim = 64;
    double leaky_slope = 0.01;
    bool use_attention = true;

    void validate() const {
        if (mixtures < 1) throwf("mixtures must be >= 1");
        if (image_side % 16 != 0 || image_side <= 0)
            throwf("image_side must be a positive multiple of 16, got %d", image_side);
        for (int d : conv_depths)
            if (d < 1) throwf("conv depths must be positive");
        if (lstm_size < 1 || attention_dim < 1) throwf("lstm_size/attention_dim must be positive");
    }

    int grid() const { return image_side / 16; }           // H_gf = W_gf
    int positions() const { return grid() * grid(); }
    int feature_depth() const { return conv_depths[3]; }   // D_gf
    int head_units() const { return 6 * mixtures + 3; }

    static ModelConfig micro() {
        ModelConfig cfg;
        cfg.conv_depths = {4, 8, 16, 32};
        cfg.lstm_size = 128;
        cfg.mixtures = 5;
        return cfg;
    }
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// Gaussian-mixture output of one decoding timestep, after the head transform.
struct GmmStep {
    std::vector<double> pi, mu_x, mu_y, sigma_x, sigma_y, rho;
    std::array<double, 3> pen{};
};

constexpr double kSigmaLogitLo = -9.210340371976182;  // ln 1e-4
constexpr double kSigmaLogitHi = 9.210340371976184;   // ln 1e4
constexpr double kRhoScale = 0.99999;
constexpr double kLogDensityFloor = -30.0;

// raw layout: [pi M | mu_x M | mu_y M | sigma_x M | sigma_y M | rho M | pen 3]
GmmStep head_transform(const std::vector<double>& raw, int mixtures);

double gmm_density(double x, double y, const GmmStep& step);

// Eq-style mixture-density losses on plain values; the graph builders below
// implement the same math differentiably.
double loss_position(const PointSequence& targets, const std::vector<GmmStep>& steps);
double loss_pen(const PointSequence& padded_targets, const std::vector<GmmStep>& steps);
inline double loss_total(double ls, double lp) { return ls + lp; }

template <typename S>
struct TrajectoryModel {
    ModelConfig config;
    ParamStore<S> params;
    BnStats<S> bn2, bn3;
    int64_t step_count = 0;
    int t_max_hint = 0;

    TrajectoryModel() = default;

    TrajectoryModel(const ModelConfig& cfg, uint64_t init_seed) : config(cfg) {
        cfg.validate();
        Rng rng(init_seed);
        const auto& d = cfg.conv_depths;
        auto conv = [&](const std::string& name, int in_ch, int out_ch) {
            Param<S>& w = params.add(name + ".w", {out_ch, in_ch, 3, 3});
            glorot_init(w.value, in_ch * 9, out_ch * 9, rng);
            params.add(name + ".b", {out_ch});
        };
        conv("conv1", 1, d[0]);
        conv("conv2", d[0], d[1]);
        params.add("bn2.gamma", {d[1]}).value.fill(S(1));
        params.add("bn2.beta", {d[1]});
        conv("conv3", d[1], d[2]);
        params.add("bn3.gamma", {d[2]}).value.fill(S(1));
        params.add("bn3.beta", {d[2]});
        conv("conv4", d[2], d[3]);

        const int D = cfg.feature_depth();
        const int da = cfg.attention_dim;
        const int H = cfg.lstm_size;
        Param<S>& u = params.add("att.u", {D, da});
        glorot_init(u.value, D, da, rng);
        Param<S>& v = params.add("att.v", {da, H});
        glorot_init(v.value, H, da, rng);
        params.add("att.b", {da});
        Param<S>& w = params.add("att.w", {da});
        glorot_init(w.value, da, 1, rng);

        const int in_dim = D + 5;
        Param<S>& wx = params.add("lstm.wx", {4 * H, in_dim});
        glorot_init(wx.value, in_dim, 4 * H, rng);
        Param<S>& wh = params.add("lstm.wh", {4 * H, H});
        glorot_init(wh.value, H, 4 * H, rng);
        Param<S>& bias = params.add("lstm.b", {4 * H});
        for (int i = H; i < 2 * H; ++i) bias.value[i] = S(1);  // forget gate bias

        Param<S>& hw = params.add("head.w", {cfg.head_units(), H});
        glorot_init(hw.value, H, cfg.head_units(), rng);
        params.add("head.b", {cfg.head_units()});
    }
};

// ---- graph builders ----

template <typename S>
Var image_to_input(Graph<S>& g, const BinaryImage& img) {
    Tensor<S> x({1, img.side, img.side});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<S>(img.pixels[static_cast<size_t>(i)]);
    return g.constant(std::move(x));
}

// train: batch-stat normalization, running stats updated.
// frozen: batch-stat normalization, running stats untouched (loss probes).
// eval: running-stat normalization (inference).
enum class ForwardMode { train, frozen, eval };

// conv -> LReLU -> pool, conv -> BN -> LReLU -> pool (x2), conv -> LReLU -> pool.
// Output is the global-feature grid flattened to [positions, depth].
template <typename S>
Var encode_image_graph(TrajectoryModel<S>& net, Graph<S>& g, const GraphBinding<S>& bind, Var image,
                       ForwardMode mode) {
    const S slope = static_cast<S>(net.config.leaky_slope);
    const S momentum = static_cast<S>(0.1);
    const S eps = static_cast<S>(1e-5);
    const bool batch_stats = mode != ForwardMode::eval;
    auto bn = [&](Var x, const char* prefix, BnStats<S>& stats) {
        BnStats<S>* sp = mode == ForwardMode::frozen ? nullptr : &stats;
        return g.batchnorm(x, bind[std::string(prefix) + ".gamma"],
                           bind[std::string(prefix) + ".beta"], sp, batch_stats, momentum, eps);
    };
    Var x = image;
    x = g.maxpool2d(g.leaky_relu(g.conv2d(x, bind["conv1.w"], bind["conv1.b"]), slope));
    x = g.conv2d(x, bind["conv2.w"], bind["conv2.b"]);
    x = g.maxpool2d(g.leaky_relu(bn(x, "bn2", net.bn2), slope));
    x = g.conv2d(x, bind["conv3.w"], bind["conv3.b"]);
    x = g.maxpool2d(g.leaky_relu(bn(x, "bn3", net.bn3), slope));
    x = g.maxpool2d(g.leaky_relu(g.conv2d(x, bind["conv4.w"], bind["conv4.b"]), slope));
    const int D = net.config.feature_depth();
    const int P = net.config.positions();
    return g.transpose2d(g.reshape(x, {D, P}));  // [P, D]
}

template <typename S>
struct AttendVars {
    Var map;      // [P]
    Var context;  // [D]
};

// scores = w . ReLU(gf U + V query + b); map = softmax over positions;
// context = sum_p map[p] gf[p]. proj_gf = gf U may be precomputed once per
// image and shared across timesteps.
template <typename S>
AttendVars<S> attend_graph(Graph<S>& g, Var gf_pd, Var proj_gf, Var query, Var v, Var b, Var w) {
    const Var vq = g.linear(query, v, b);
    const Var hidden = g.relu(g.add_rowvec(proj_gf, vq));
    const Var scores = g.matvec(hidden, w);
    const Var map = g.softmax(scores);
    const Var context = g.vecmat(map, gf_pd);
    return {map, context};
}

// mean-pooled context for the no-attention ablation; map stays uniform
template <typename S>
AttendVars<S> mean_context_graph(Graph<S>& g, Var gf_pd) {
    const int P = g.val(gf_pd).dim(0);
    const Var uniform = g.constant(Tensor<S>({P}, S(1) / static_cast<S>(P)));
    return {uniform, g.vecmat(uniform, gf_pd)};
}

template <typename S>
struct DecoderStateVars {
    Var h, c, query;
};

template <typename S>
DecoderStateVars<S> initial_decoder_state(Graph<S>& g, int lstm_size) {
    const Var h = g.constant(Tensor<S>({lstm_size}, S(0)));
    const Var c = g.constant(Tensor<S>({lstm_size}, S(0)));
    return {h, c, h};
}

template <typename S>
struct DecoderStepVars {
    Var raw;  // [6M+3]
    Var map;  // [P]
    DecoderStateVars<S> state;
};

// X_t = local_context ⊕ x_prev; one LSTM step; head projection to 6M+3 units.
template <typename S>
DecoderStepVars<S> decoder_step_graph(TrajectoryModel<S>& net, Graph<S>& g,
                                      const GraphBinding<S>& bind, Var gf_pd, Var proj_gf,
                                      const DecoderStateVars<S>& state, Var x_prev) {
    AttendVars<S> att = net.config.use_attention
                            ? attend_graph(g, gf_pd, proj_gf, state.query, bind["att.v"],
                                           bind["att.b"], bind["att.w"])
                            : mean_context_graph(g, gf_pd);
    const Var xt = g.concat(att.context, x_prev);
    auto [h_new, c_new] = g.lstm_cell(xt, state.h, state.c, bind["lstm.wx"], bind["lstm.wh"],
                                      bind["lstm.b"]);
    const Var raw = g.linear(h_new, bind["head.w"], bind["head.b"]);
    return {raw, att.map, {h_new, c_new, h_new}};
}

template <typename S>
Var project_features(Graph<S>& g, const GraphBinding<S>& bind, Var gf_pd) {
    return g.matmul(gf_pd, bind["att.u"]);
}

template <typename S>
struct GmmHeadVars {
    Var log_pi, mu_x, mu_y, sigma_x, sigma_y, rho, pen_logp;
};

template <typename S>
GmmHeadVars<S> head_transform_graph(Graph<S>& g, Var raw, int M) {
    if (g.val(raw).numel() != 6 * M + 3)
        throwf("head_transform: expected %d units, got %lld", 6 * M + 3,
               static_cast<long long>(g.val(raw).numel()));
    GmmHeadVars<S> out;
    out.log_pi = g.log_softmax(g.slice(raw, 0, M));
    out.mu_x = g.slice(raw, M, M);
    out.mu_y = g.slice(raw, 2 * M, M);
    out.sigma_x = g.exp_(g.clamp(g.slice(raw, 3 * M, M), static_cast<S>(kSigmaLogitLo),
                                 static_cast<S>(kSigmaLogitHi)));
    out.sigma_y = g.exp_(g.clamp(g.slice(raw, 4 * M, M), static_cast<S>(kSigmaLogitLo),
                                 static_cast<S>(kSigmaLogitHi)));
    out.rho = g.scale(g.tanh_(g.slice(raw, 5 * M, M)), static_cast<S>(kRhoScale));
    out.pen_logp = g.log_softmax(g.slice(raw, 6 * M, 3));
    return out;
}

// log p(x, y) under the mixture, floored at kLogDensityFloor
template <typename S>
Var gmm_logp_graph(Graph<S>& g, const GmmHeadVars<S>& hv, double tx, double ty) {
    const Var dx = g.rsub_scalar(static_cast<S>(tx), hv.mu_x);
    const Var dy = g.rsub_scalar(static_cast<S>(ty), hv.mu_y);
    const Var zx = g.div(dx, hv.sigma_x);
    const Var zy = g.div(dy, hv.sigma_y);
    const Var one_minus_r2 = g.rsub_scalar(S(1), g.square(hv.rho));
    const Var z = g.sub(g.add(g.square(zx), g.square(zy)), g.scale(g.mul(hv.rho, g.mul(zx, zy)), S(2)));
    const Var log_norm =
        g.add_scalar(g.add(g.add(g.log_(hv.sigma_x), g.log_(hv.sigma_y)),
                           g.scale(g.log_(one_minus_r2), static_cast<S>(0.5))),
                     static_cast<S>(std::log(2.0 * M_PI)));
    const Var quad = g.div(z, g.scale(one_minus_r2, S(2)));
    const Var log_n = g.neg(g.add(log_norm, quad));
    return g.clamp_min(g.logsumexp(g.add(hv.log_pi, log_n)), static_cast<S>(kLogDensityFloor));
}

// cross-entropy of the pen-state head against a one-hot target
template <typename S>
Var pen_ce_graph(Graph<S>& g, const GmmHeadVars<S>& hv, int pen_state) {
    Tensor<S> onehot({3}, S(0));
    onehot[pen_state] = S(1);
    return g.neg(g.dot_const(hv.pen_logp, std::move(onehot)));
}

// GmmStep extraction from a raw head vector of any scalar type
template <typename S>
GmmStep extract_gmm_step(const Tensor<S>& raw, int M) {
    std::vector<double> raw_d(raw.data.begin(), raw.data.end());
    return head_transform(raw_d, M);
}

// ---- plain wrappers used by tests and evaluation ----

struct AttendResult {
    Tensor<double> map;      // [H_gf, W_gf]
    Tensor<double> context;  // [D_gf]
};

// gf as [H,W,D] grid; weights u [D,d_att], v [d_att,L], b [d_att], w [d_att]
AttendResult attend(const Tensor<double>& gf_grid, const Tensor<double>& query,
                    const Tensor<double>& u, const Tensor<double>& v, const Tensor<double>& b,
                    const Tensor<double>& w);

// Encoder forward; returns the [P, D] feature matrix values.
template <typename S>
Tensor<S> encode_image(TrajectoryModel<S>& net, const BinaryImage& img,
                       ForwardMode mode = ForwardMode::eval) {
    Graph<S> g;
    GraphBinding<S> bind(g, net.params);
    const Var gf = encode_image_graph(net, g, bind, image_to_input(g, img), mode);
    return g.val(gf);
}

}  // namespace otrec
