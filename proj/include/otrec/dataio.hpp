#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace otrec {

using Stroke = std::vector<std::pair<double, double>>;

// One online pattern: ordered strokes of (x, y) points in arbitrary source units.
struct InkSample {
    std::string id;
    std::string label;
    std::vector<Stroke> strokes;
    bool truncated = false;  // set by recovery when decoding hit the step cap

    void validate() const;
};

struct SynthesisConfig {
    int category_count = 4;
    int samples_per_category = 4;
    int stroke_count_min = 3;
    int stroke_count_max = 5;
    double jitter_std = 0.0;  // canvas units
    uint64_t seed = 0;

    void validate() const;
};

// ink jsonl: one {"id","label","strokes"} object per line
std::vector<InkSample> read_ink(const std::string& path);
void write_ink(const std::vector<InkSample>& samples, const std::string& path);

// Deterministic multi-stroke glyph corpus on a 256x256 canvas. All samples of
// a category share one stroke template; per-sample variation is gaussian
// jitter on every point.
std::vector<InkSample> generate_synthetic(const SynthesisConfig& cfg);

// Deterministic split, stratified by label whenever every label has >= 2 samples.
std::pair<std::vector<InkSample>, std::vector<InkSample>> split_dataset(
    const std::vector<InkSample>& samples, double train_fraction, uint64_t seed);

constexpr double kSyntheticCanvas = 256.0;

}  // namespace otrec
