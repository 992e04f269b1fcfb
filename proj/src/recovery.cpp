#include "otrec/recovery.hpp"

#include <algorithm>
#include <cmath>

namespace otrec {

static int argmax(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

static std::vector<double> temperature_weights(const std::vector<double>& probs, double tau) {
    // softmax(log p / tau)
    std::vector<double> logs(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) logs[i] = std::log(std::max(probs[i], 1e-300)) / tau;
    const double mx = *std::max_element(logs.begin(), logs.end());
    double z = 0;
    for (auto& v : logs) {
        v = std::exp(v - mx);
        z += v;
    }
    for (auto& v : logs) v /= z;
    return logs;
}

static int draw_categorical(const std::vector<double>& weights, Rng& rng) {
    const double u = rng.uniform();
    double cum = 0;
    for (size_t i = 0; i < weights.size(); ++i) {
        cum += weights[i];
        if (u < cum) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
}

SelectedPoint select_point(const GmmStep& step, RecoveryConfig::Mode mode, double temperature,
                           Rng* rng) {
    SelectedPoint out;
    if (mode == RecoveryConfig::Mode::greedy) {
        const int m = argmax(step.pi);
        out.x = step.mu_x[static_cast<size_t>(m)];
        out.y = step.mu_y[static_cast<size_t>(m)];
        int pen = 0;
        for (int k = 1; k < 3; ++k) {
            if (step.pen[static_cast<size_t>(k)] > step.pen[static_cast<size_t>(pen)]) pen = k;
        }
        out.pen = pen;
    } else {
        if (!rng) throwf("select_point: sampling requires an rng");
        if (temperature <= 0) throwf("select_point: temperature must be > 0");
        const double tau = temperature;
        const int m = draw_categorical(temperature_weights(step.pi, tau), *rng);
        const double sx = step.sigma_x[static_cast<size_t>(m)] * std::sqrt(tau);
        const double sy = step.sigma_y[static_cast<size_t>(m)] * std::sqrt(tau);
        const double r = step.rho[static_cast<size_t>(m)];
        const double z1 = rng->gaussian();
        const double z2 = rng->gaussian();
        out.x = step.mu_x[static_cast<size_t>(m)] + sx * z1;
        out.y = step.mu_y[static_cast<size_t>(m)] + sy * (r * z1 + std::sqrt(1.0 - r * r) * z2);
        const std::vector<double> pen_probs(step.pen.begin(), step.pen.end());
        out.pen = draw_categorical(temperature_weights(pen_probs, tau), *rng);
    }
    out.x = std::clamp(out.x, 0.0, 1.0);
    out.y = std::clamp(out.y, 0.0, 1.0);
    return out;
}

RecoveryResult recover(TrajectoryModel<float>& net, const BinaryImage& image,
                       const RecoveryConfig& cfg) {
    if (image.side != net.config.image_side)
        throwf("recover: image side %d does not match model side %d", image.side,
               net.config.image_side);
    int t_max = cfg.t_max > 0 ? cfg.t_max : net.t_max_hint;
    if (t_max < 1) t_max = 1;

    Graph<float> g;
    GraphBinding<float> bind(g, net.params);
    const Var gf = encode_image_graph(net, g, bind, image_to_input(g, image), ForwardMode::eval);
    const Var proj = net.config.use_attention ? project_features(g, bind, gf) : gf;
    DecoderStateVars<float> state = initial_decoder_state<float>(g, net.config.lstm_size);

    Tensor<float> start({5});
    for (int i = 0; i < 5; ++i) start[i] = static_cast<float>(kStartVector[static_cast<size_t>(i)]);
    Var x_prev = g.constant(std::move(start));

    Rng rng(cfg.seed);
    RecoveryResult result;
    result.truncated = true;
    const int grid = net.config.grid();
    for (int t = 0; t < t_max; ++t) {
        DecoderStepVars<float> step = decoder_step_graph(net, g, bind, gf, proj, state, x_prev);
        state = step.state;
        const GmmStep gmm = extract_gmm_step(g.val(step.raw), net.config.mixtures);
        const SelectedPoint sel = select_point(gmm, cfg.mode, cfg.temperature, &rng);
        if (cfg.collect_attention) {
            Tensor<float> map = g.val(step.map);
            map.shape = {grid, grid};
            result.attention_maps.push_back(std::move(map));
        }
        result.points.push_back(PointRecord{sel.x, sel.y, sel.pen});
        if (sel.pen == 2) {
            result.truncated = false;
            break;
        }
        Tensor<float> next({5}, 0.0f);
        next[0] = static_cast<float>(sel.x);
        next[1] = static_cast<float>(sel.y);
        next[2 + sel.pen] = 1.0f;
        x_prev = g.constant(std::move(next));
    }
    result.trajectory = trajectory_from_points(result.points, image.side);
    return result;
}

void export_recovered(const std::vector<Trajectory>& trajs, const std::vector<bool>& truncated,
                      const std::vector<std::string>& ids, const std::vector<std::string>& labels,
                      const std::string& path) {
    if (trajs.size() != ids.size() || trajs.size() != labels.size() ||
        trajs.size() != truncated.size())
        throwf("export_recovered: mismatched list lengths");
    std::vector<InkSample> samples;
    samples.reserve(trajs.size());
    for (size_t i = 0; i < trajs.size(); ++i) {
        InkSample s;
        s.id = ids[i];
        s.label = labels[i];
        s.strokes = trajs[i].strokes;
        s.truncated = truncated[i];
        samples.push_back(std::move(s));
    }
    write_ink(samples, path);
}

}  // namespace otrec
