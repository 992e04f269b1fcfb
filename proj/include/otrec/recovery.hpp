#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "otrec/ink.hpp"
#include "otrec/model.hpp"

namespace otrec {

struct RecoveryConfig {
    enum class Mode { greedy, sample };

    int t_max = 0;  // 0 -> checkpoint hint
    Mode mode = Mode::greedy;
    double temperature = 1.0;
    uint64_t seed = 0;
    bool collect_attention = false;
};

struct SelectedPoint {
    double x = 0, y = 0;
    int pen = 0;
};

struct RecoveryResult {
    Trajectory trajectory;                       // canvas units [0, side-1]
    std::vector<PointRecord> points;             // normalized emitted points
    std::vector<Tensor<float>> attention_maps;   // [H_gf, W_gf] per step, if collected
    bool truncated = false;                      // hit t_max before a stop state
};

// greedy: mean of the argmax-weight component and argmax pen state.
// sample: component/pen drawn from temperature-adjusted categoricals, point
// drawn from the chosen bivariate normal with covariance scaled by tau.
// Coordinates clamped to [0, 1].
SelectedPoint select_point(const GmmStep& step, RecoveryConfig::Mode mode, double temperature,
                           Rng* rng);

// Free-running decode: encode once, loop from the start vector feeding each
// selection back in, stop on a predicted end-of-trajectory state or at t_max.
RecoveryResult recover(TrajectoryModel<float>& net, const BinaryImage& image,
                       const RecoveryConfig& cfg);

// Recovered trajectories in the standard ink format, with per-record
// truncation flags.
void export_recovered(const std::vector<Trajectory>& trajs, const std::vector<bool>& truncated,
                      const std::vector<std::string>& ids, const std::vector<std::string>& labels,
                      const std::string& path);

}  // namespace otrec
