#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "otrec/ink.hpp"
#include "otrec/model.hpp"

namespace otrec {

struct PreparedSample {
    std::string label;
    PointSequence seq;
    BinaryImage image;
};

struct Dataset {
    int side = 64;
    std::vector<PreparedSample> samples;

    std::vector<std::string> label_set() const;
};

// rescale -> point reduction -> sequence encoding + rasterization
Dataset prepare_dataset(const std::vector<InkSample>& samples, int side, double dp_epsilon);

// OTRD container
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

struct TrainConfig {
    int batch_size = 64;
    int max_epochs = 100;
    double lr = 1e-3;
    uint64_t seed = 0;
    double dp_epsilon = 2.0;
    ModelConfig model;
    int patience = 10;          // early stop on held-out loss
    double grad_clip = 5.0;     // global norm
    int64_t max_steps = 0;      // optimizer-step cap, 0 = none
    double stop_loss_ratio = 0; // stop once epoch L <= ratio * initial L, 0 = off
};

struct EpochRecord {
    int epoch = 0;
    int64_t step = 0;
    double L = 0, L_s = 0, L_p = 0;
};

struct TrainResult {
    std::vector<EpochRecord> log;
    double initial_loss = 0;
    double final_loss = 0;
    int best_epoch = -1;  // epoch of the retained held-out best, -1 if no val set
};

struct BatchLoss {
    double L = 0, L_s = 0, L_p = 0;
    int T = 0;  // padded unroll length
};

// Teacher-forced unroll over one mini-batch: per sample, encode the image,
// loop t = 1..T feeding target record t-1 (the start vector at t = 1), and
// average the GMM/pen losses over the batch. With backprop set, parameter
// gradients are accumulated into the store (scaled by 1/batch).
BatchLoss teacher_forced_batch(TrajectoryModel<float>& net,
                               const std::vector<const PreparedSample*>& batch, ForwardMode mode,
                               bool backprop);

// Mean teacher-forced loss over a whole dataset without touching any state.
BatchLoss dataset_loss(TrajectoryModel<float>& net, const Dataset& ds, ForwardMode mode,
                       int batch_size);

// Adam training loop with seeded shuffling, gradient clipping, optional
// held-out early stopping, and a JSONL per-epoch loss log.
TrainResult train_model(TrajectoryModel<float>& net, const Dataset& train_set,
                        const Dataset* val_set, const TrainConfig& cfg,
                        const std::string& loss_log_path = "");

// OTRK checkpoint container
void save_checkpoint(const TrajectoryModel<float>& net, const std::string& path);
TrajectoryModel<float> load_checkpoint(const std::string& path);

// shared by the classifier checkpoint
struct CheckpointBlob {
    std::string config_json;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
};
void write_checkpoint_blob(const CheckpointBlob& blob, const std::string& path);
CheckpointBlob read_checkpoint_blob(const std::string& path);

}  // namespace otrec
