#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "otrec/dataio.hpp"

namespace otrec {

// Strokes rescaled into the [0, side-1]^2 pixel grid.
struct Trajectory {
    std::vector<Stroke> strokes;

    size_t point_count() const {
        size_t n = 0;
        for (const auto& s : strokes) n += s.size();
        return n;
    }
};

// One decoder record: normalized coordinates plus a one-hot pen state.
// pen 0 = pen down, 1 = stroke end, 2 = end of trajectory.
struct PointRecord {
    double x = 0, y = 0;
    int pen = 0;
};

struct PointSequence {
    std::vector<PointRecord> points;
    int n_real = 0;  // count of non-padding records
};

struct BinaryImage {
    int side = 0;
    std::vector<uint8_t> pixels;  // row-major, row 0 = top, values {0,1}

    BinaryImage() = default;
    explicit BinaryImage(int side_in) : side(side_in), pixels(static_cast<size_t>(side_in) * side_in, 0) {}

    uint8_t get(int x, int y) const { return pixels[static_cast<size_t>(y) * side + x]; }
    void set(int x, int y) {
        if (x >= 0 && x < side && y >= 0 && y < side) pixels[static_cast<size_t>(y) * side + x] = 1;
    }
    size_t ink_count() const {
        size_t n = 0;
        for (uint8_t p : pixels) n += p;
        return n;
    }
};

// start-of-decoding input (x, y, ps0, ps1, ps2) = (0, 0, 0, 1, 0)
constexpr std::array<double, 5> kStartVector = {0, 0, 0, 1, 0};

// Isotropic rescale of the tight bounding box into [0, side-1]^2; the longer
// box side spans the full range, the shorter one is centered. A degenerate
// box collapses to the image center.
Trajectory rescale(const InkSample& sample, int side = 64);

// Per-stroke Douglas-Peucker simplification with perpendicular tolerance epsilon.
Trajectory reduce_points(const Trajectory& traj, double epsilon);

// Concatenate strokes into decoder targets; coordinates divided by (side-1).
PointSequence encode_sequence(const Trajectory& traj, int side);

// Pad every sequence to the batch maximum with (0,0,0,0,1) records.
// Returns per-sequence real lengths.
std::vector<int> pad_sequences(std::vector<PointSequence>& seqs);

// Bresenham rendering of consecutive in-stroke point pairs, stroke width 1.
BinaryImage rasterize(const Trajectory& traj, int side);

// round-half-up on both axes, fixed across platforms
inline int round_coord(double v) { return static_cast<int>(std::floor(v + 0.5)); }

Trajectory trajectory_from_points(const std::vector<PointRecord>& pts, int side);

}  // namespace otrec
