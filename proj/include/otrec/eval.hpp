#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "otrec/ink.hpp"
#include "otrec/params.hpp"
#include "otrec/training.hpp"

namespace otrec {

struct DtwResult {
    double cost = 0;
    double normalized = 0;  // cost / alignment path length
};

// Classic DTW over the flattened point sequences with Euclidean local cost,
// boundary-aligned at both ends. pen_penalty adds a fixed cost per aligned
// pair whose pen states differ (0 = pure geometry).
DtwResult dtw_distance(const Trajectory& a, const Trajectory& b, double pen_penalty = 0.0);

// IoU between rasterize(recovered) and the reference image.
double raster_iou(const Trajectory& recovered, const BinaryImage& image);

// Black gold strokes and red recovered strokes as SVG polylines.
void export_svg(const Trajectory& gold, const Trajectory& recovered, const std::string& path,
                int side);

// Per timestep: a max-normalized P5 PGM of the attention map upscaled to
// side x side, plus an SVG of the recovery through that step.
void export_attention(const std::vector<Tensor<float>>& maps,
                      const std::vector<PointRecord>& points, const std::string& dir, int side);

// ---- offline CNN classifier ----

struct ClassifierConfig {
    int image_side = 64;
    std::array<int, 4> conv_depths = {100, 200, 300, 400};
    int fc_size = 500;
    double dropout = 0.25;
    std::vector<std::string> labels;  // sorted

    void validate() const;
    int flat_dim() const {
        const int grid = image_side / 16;
        return conv_depths[3] * grid * grid;
    }
};

struct Classifier {
    ClassifierConfig config;
    ParamStore<float> params;
    int64_t step_count = 0;

    Classifier() = default;
    Classifier(const ClassifierConfig& cfg, uint64_t init_seed);
};

struct ClassifierTrainOptions {
    int epochs = 20;
    double lr = 1e-3;
    uint64_t seed = 0;
    int batch_size = 32;
    // Accuracy-window early stopping: once held-out accuracy reaches
    // stop_acc_min the run stops (intended to land inside [min, max]).
    const Dataset* heldout = nullptr;
    double stop_acc_min = -1.0;
    double stop_acc_max = 2.0;
    int check_every_steps = 0;  // 0 = once per epoch
};

Classifier train_offline_classifier(const Dataset& data, ClassifierConfig cfg,
                                    const ClassifierTrainOptions& opt);

// softmax probabilities in label order
std::vector<double> classify_one(const Classifier& clf, const BinaryImage& image);
std::vector<std::vector<double>> classify(const Classifier& clf,
                                          const std::vector<BinaryImage>& images);
double classifier_accuracy(const Classifier& clf, const Dataset& ds);

void save_classifier(const Classifier& clf, const std::string& path);
Classifier load_classifier(const std::string& path);

// ---- score files and fusion ----

using LabelScores = std::map<std::string, double>;
using ScoreFile = std::map<std::string, LabelScores>;

ScoreFile read_scores(const std::string& path);
void write_scores(const ScoreFile& scores, const std::string& path);

ScoreFile scores_from_classifier(const Classifier& clf, const std::vector<BinaryImage>& images,
                                 const std::vector<std::string>& ids);

struct FusionResult {
    ScoreFile scores;  // combined log-scores
    std::map<std::string, std::string> predictions;
};

// P_comb = gamma log(P_off) + (1 - gamma) log(P_on), probabilities floored at
// 1e-12; argmax ties broken by lexicographic label order.
FusionResult fuse_scores(const ScoreFile& off, const ScoreFile& on, double gamma);

std::vector<std::pair<double, double>> gamma_sweep(const ScoreFile& off, const ScoreFile& on,
                                                   const std::map<std::string, std::string>& gold,
                                                   const std::vector<double>& grid);
void write_sweep_csv(const std::vector<std::pair<double, double>>& rows, const std::string& path);

std::string classifier_predict_label(const LabelScores& scores);

}  // namespace otrec
