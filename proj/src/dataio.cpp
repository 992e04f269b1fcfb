#include "otrec/dataio.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "otrec/rng.hpp"
#include "otrec/tensor.hpp"

namespace otrec {

using nlohmann::json;

void InkSample::validate() const {
    if (strokes.empty()) throwf("empty strokes: %s", id.c_str());
    for (const auto& stroke : strokes) {
        if (stroke.empty()) throwf("empty stroke in sample: %s", id.c_str());
    }
}

void SynthesisConfig::validate() const {
    if (category_count < 1) throwf("category_count must be >= 1, got %d", category_count);
    if (samples_per_category < 1)
        throwf("samples_per_category must be >= 1, got %d", samples_per_category);
    if (stroke_count_min < 1 || stroke_count_min > stroke_count_max)
        throwf("invalid stroke count range [%d, %d]", stroke_count_min, stroke_count_max);
    if (jitter_std < 0) throwf("jitter_std must be >= 0");
}

std::vector<InkSample> read_ink(const std::string& path) {
    std::ifstream in(path);
    if (!in) throwf("cannot open ink file: %s", path.c_str());
    std::vector<InkSample> samples;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json record = json::parse(line, nullptr, false);
        if (record.is_discarded() || !record.is_object() || !record.contains("id") ||
            !record.contains("label") || !record.contains("strokes")) {
            throwf("%s:%d: malformed ink record", path.c_str(), line_no);
        }
        InkSample sample;
        try {
            sample.id = record.at("id").get<std::string>();
            sample.label = record.at("label").get<std::string>();
            for (const auto& stroke_json : record.at("strokes")) {
                Stroke stroke;
                for (const auto& pt : stroke_json) {
                    stroke.emplace_back(pt.at(0).get<double>(), pt.at(1).get<double>());
                }
                sample.strokes.push_back(std::move(stroke));
            }
            if (record.contains("truncated")) sample.truncated = record.at("truncated").get<bool>();
        } catch (const json::exception& e) {
            throwf("%s:%d: malformed ink record (%s)", path.c_str(), line_no, e.what());
        }
        sample.validate();
        samples.push_back(std::move(sample));
    }
    return samples;
}

static json sample_to_json(const InkSample& sample) {
    json strokes = json::array();
    for (const auto& stroke : sample.strokes) {
        json pts = json::array();
        for (const auto& [x, y] : stroke) pts.push_back(json::array({x, y}));
        strokes.push_back(std::move(pts));
    }
    json record{{"id", sample.id}, {"label", sample.label}, {"strokes", std::move(strokes)}};
    if (sample.truncated) record["truncated"] = true;
    return record;
}

void write_ink(const std::vector<InkSample>& samples, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throwf("cannot write ink file: %s", path.c_str());
    for (const auto& sample : samples) {
        sample.validate();
        out << sample_to_json(sample).dump() << "\n";
    }
    if (!out) throwf("write failed: %s", path.c_str());
}

// Templates are polylines with vertices on an 8x8 grid mapped into the canvas.
// A random walk over distinct cells keeps segments non-degenerate.
static std::vector<Stroke> make_template(Rng& rng, int stroke_count) {
    const int grid = 8;
    const double cell = kSyntheticCanvas / grid;
    std::vector<Stroke> strokes;
    for (int s = 0; s < stroke_count; ++s) {
        const int segments = 2 + static_cast<int>(rng.uniform_int(4));  // 2..5
        Stroke stroke;
        int gx = static_cast<int>(rng.uniform_int(grid));
        int gy = static_cast<int>(rng.uniform_int(grid));
        stroke.emplace_back((gx + 0.5) * cell, (gy + 0.5) * cell);
        for (int p = 0; p < segments; ++p) {
            int nx, ny;
            do {
                nx = static_cast<int>(rng.uniform_int(grid));
                ny = static_cast<int>(rng.uniform_int(grid));
            } while (nx == gx && ny == gy);
            gx = nx;
            gy = ny;
            stroke.emplace_back((gx + 0.5) * cell, (gy + 0.5) * cell);
        }
        strokes.push_back(std::move(stroke));
    }
    // canonical stroke order: top-to-bottom, then left-to-right by start point
    std::stable_sort(strokes.begin(), strokes.end(), [](const Stroke& a, const Stroke& b) {
        if (a.front().second != b.front().second) return a.front().second < b.front().second;
        return a.front().first < b.front().first;
    });
    return strokes;
}

std::vector<InkSample> generate_synthetic(const SynthesisConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    std::vector<InkSample> samples;
    samples.reserve(static_cast<size_t>(cfg.category_count) * cfg.samples_per_category);
    for (int c = 0; c < cfg.category_count; ++c) {
        const int span = cfg.stroke_count_max - cfg.stroke_count_min + 1;
        const int stroke_count =
            cfg.stroke_count_min + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(span)));
        const std::vector<Stroke> tmpl = make_template(rng, stroke_count);
        for (int k = 0; k < cfg.samples_per_category; ++k) {
            InkSample sample;
            sample.label = "cat" + std::to_string(c);
            sample.id = sample.label + "_" + std::to_string(k);
            sample.strokes = tmpl;
            if (cfg.jitter_std > 0) {
                for (auto& stroke : sample.strokes) {
                    for (auto& [x, y] : stroke) {
                        x += cfg.jitter_std * rng.gaussian();
                        y += cfg.jitter_std * rng.gaussian();
                    }
                }
            }
            samples.push_back(std::move(sample));
        }
    }
    return samples;
}

std::pair<std::vector<InkSample>, std::vector<InkSample>> split_dataset(
    const std::vector<InkSample>& samples, double train_fraction, uint64_t seed) {
    if (samples.size() < 2) throwf("split needs >= 2 samples, got %zu", samples.size());
    if (train_fraction <= 0 || train_fraction >= 1)
        throwf("train_fraction must be in (0,1), got %g", train_fraction);

    std::map<std::string, std::vector<size_t>> by_label;
    for (size_t i = 0; i < samples.size(); ++i) by_label[samples[i].label].push_back(i);
    bool stratify = true;
    for (const auto& [label, idx] : by_label) {
        if (idx.size() < 2) stratify = false;
    }

    Rng rng(seed);
    std::vector<size_t> train_idx, test_idx;
    auto split_group = [&](std::vector<size_t> idx) {
        rng.shuffle(idx);
        size_t n_train = static_cast<size_t>(train_fraction * static_cast<double>(idx.size()));
        n_train = std::min(std::max<size_t>(n_train, 1), idx.size() - 1);
        train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<long>(n_train));
        test_idx.insert(test_idx.end(), idx.begin() + static_cast<long>(n_train), idx.end());
    };
    if (stratify) {
        for (const auto& [label, idx] : by_label) split_group(idx);
    } else {
        std::vector<size_t> all(samples.size());
        for (size_t i = 0; i < all.size(); ++i) all[i] = i;
        split_group(std::move(all));
    }
    if (train_idx.empty() || test_idx.empty())
        throwf("train_fraction %g yields an empty split", train_fraction);

    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    std::pair<std::vector<InkSample>, std::vector<InkSample>> out;
    for (size_t i : train_idx) out.first.push_back(samples[i]);
    for (size_t i : test_idx) out.second.push_back(samples[i]);
    return out;
}

}  // namespace otrec
