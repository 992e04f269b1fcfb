#include "otrec/model.hpp"

#include <cmath>

#include "json.hpp"

namespace otrec {

using nlohmann::json;

std::string model_config_to_json(const ModelConfig& cfg) {
    json j{{"image_side", cfg.image_side},
           {"conv_depths", cfg.conv_depths},
           {"lstm_size", cfg.lstm_size},
           {"mixtures", cfg.mixtures},
           {"attention_dim", cfg.attention_dim},
           {"leaky_slope", cfg.leaky_slope},
           {"use_attention", cfg.use_attention}};
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig cfg;
    cfg.image_side = j.at("image_side").get<int>();
    const auto depths = j.at("conv_depths").get<std::vector<int>>();
    if (depths.size() != 4) throwf("conv_depths must have 4 entries");
    std::copy(depths.begin(), depths.end(), cfg.conv_depths.begin());
    cfg.lstm_size = j.at("lstm_size").get<int>();
    cfg.mixtures = j.at("mixtures").get<int>();
    cfg.attention_dim = j.at("attention_dim").get<int>();
    cfg.leaky_slope = j.at("leaky_slope").get<double>();
    cfg.use_attention = j.at("use_attention").get<bool>();
    cfg.validate();
    return cfg;
}

GmmStep head_transform(const std::vector<double>& raw, int mixtures) {
    const int M = mixtures;
    if (static_cast<int>(raw.size()) != 6 * M + 3)
        throwf("head_transform: expected %d units, got %zu", 6 * M + 3, raw.size());
    GmmStep step;
    step.pi.resize(M);
    step.mu_x.assign(raw.begin() + M, raw.begin() + 2 * M);
    step.mu_y.assign(raw.begin() + 2 * M, raw.begin() + 3 * M);
    step.sigma_x.resize(M);
    step.sigma_y.resize(M);
    step.rho.resize(M);

    double mx = raw[0];
    for (int m = 1; m < M; ++m) mx = std::max(mx, raw[m]);
    double z = 0;
    for (int m = 0; m < M; ++m) {
        step.pi[m] = std::exp(raw[m] - mx);
        z += step.pi[m];
    }
    for (int m = 0; m < M; ++m) step.pi[m] /= z;

    for (int m = 0; m < M; ++m) {
        step.sigma_x[m] = std::exp(std::clamp(raw[3 * M + m], kSigmaLogitLo, kSigmaLogitHi));
        step.sigma_y[m] = std::exp(std::clamp(raw[4 * M + m], kSigmaLogitLo, kSigmaLogitHi));
        step.rho[m] = kRhoScale * std::tanh(raw[5 * M + m]);
    }

    double pmx = raw[6 * M];
    for (int k = 1; k < 3; ++k) pmx = std::max(pmx, raw[6 * M + k]);
    double pz = 0;
    for (int k = 0; k < 3; ++k) {
        step.pen[k] = std::exp(raw[6 * M + k] - pmx);
        pz += step.pen[k];
    }
    for (int k = 0; k < 3; ++k) step.pen[k] /= pz;
    return step;
}

double gmm_density(double x, double y, const GmmStep& step) {
    double p = 0;
    const int M = static_cast<int>(step.pi.size());
    for (int m = 0; m < M; ++m) {
        const double sx = step.sigma_x[m];
        const double sy = step.sigma_y[m];
        const double r = step.rho[m];
        const double one_minus_r2 = 1.0 - r * r;
        const double zx = (x - step.mu_x[m]) / sx;
        const double zy = (y - step.mu_y[m]) / sy;
        const double q = zx * zx + zy * zy - 2.0 * r * zx * zy;
        const double norm = 2.0 * M_PI * sx * sy * std::sqrt(one_minus_r2);
        p += step.pi[m] * std::exp(-q / (2.0 * one_minus_r2)) / norm;
    }
    return p;
}

double loss_position(const PointSequence& targets, const std::vector<GmmStep>& steps) {
    const int n = targets.n_real;
    if (static_cast<int>(steps.size()) < n)
        throwf("loss_position: %zu steps for %d real points", steps.size(), n);
    double total = 0;
    for (int t = 0; t < n; ++t) {
        const double p = gmm_density(targets.points[static_cast<size_t>(t)].x,
                                     targets.points[static_cast<size_t>(t)].y, steps[static_cast<size_t>(t)]);
        total += std::max(std::log(p), kLogDensityFloor);
    }
    return -total / static_cast<double>(n);
}

double loss_pen(const PointSequence& padded_targets, const std::vector<GmmStep>& steps) {
    const size_t T = padded_targets.points.size();
    if (steps.size() != T)
        throwf("loss_pen: %zu steps for padded length %zu", steps.size(), T);
    double total = 0;
    for (size_t t = 0; t < T; ++t) {
        const int k = padded_targets.points[t].pen;
        total += std::log(std::max(steps[t].pen[static_cast<size_t>(k)], 1e-300));
    }
    return -total / static_cast<double>(T);
}

AttendResult attend(const Tensor<double>& gf_grid, const Tensor<double>& query,
                    const Tensor<double>& u, const Tensor<double>& v, const Tensor<double>& b,
                    const Tensor<double>& w) {
    if (gf_grid.rank() != 3) throwf("attend: gf must be [H,W,D]");
    const int H = gf_grid.dim(0), W = gf_grid.dim(1), D = gf_grid.dim(2);
    Graph<double> g;
    Tensor<double> gf_pd = gf_grid;
    gf_pd.shape = {H * W, D};
    const Var gf = g.leaf(std::move(gf_pd));
    const Var q = g.leaf(query);
    const Var uv = g.leaf(u);
    const Var vv = g.leaf(v);
    const Var bv = g.leaf(b);
    const Var wv = g.leaf(w);
    const Var proj = g.matmul(gf, uv);
    const AttendVars<double> out = attend_graph(g, gf, proj, q, vv, bv, wv);
    AttendResult res;
    res.map = g.val(out.map);
    res.map.shape = {H, W};
    res.context = g.val(out.context);
    return res;
}

}  // namespace otrec
