#include "otrec/ink.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "otrec/tensor.hpp"

namespace otrec {

Trajectory rescale(const InkSample& sample, int side) {
    sample.validate();
    double min_x = std::numeric_limits<double>::infinity(), min_y = min_x;
    double max_x = -min_x, max_y = -min_y;
    for (const auto& stroke : sample.strokes) {
        for (const auto& [x, y] : stroke) {
            min_x = std::min(min_x, x);
            max_x = std::max(max_x, x);
            min_y = std::min(min_y, y);
            max_y = std::max(max_y, y);
        }
    }
    const double w = max_x - min_x;
    const double h = max_y - min_y;
    const double extent = static_cast<double>(side - 1);
    const double longest = std::max(w, h);
    const double scale = longest > 0 ? extent / longest : 0.0;
    const double off_x = (extent - w * scale) / 2.0;
    const double off_y = (extent - h * scale) / 2.0;

    Trajectory out;
    out.strokes.reserve(sample.strokes.size());
    for (const auto& stroke : sample.strokes) {
        Stroke mapped;
        mapped.reserve(stroke.size());
        for (const auto& [x, y] : stroke) {
            mapped.emplace_back((x - min_x) * scale + off_x, (y - min_y) * scale + off_y);
        }
        out.strokes.push_back(std::move(mapped));
    }
    return out;
}

static double perpendicular_distance(const std::pair<double, double>& p,
                                     const std::pair<double, double>& a,
                                     const std::pair<double, double>& b) {
    const double dx = b.first - a.first;
    const double dy = b.second - a.second;
    const double len2 = dx * dx + dy * dy;
    if (len2 == 0.0) return std::hypot(p.first - a.first, p.second - a.second);
    return std::abs(dy * p.first - dx * p.second + b.first * a.second - b.second * a.first) /
           std::sqrt(len2);
}

static void douglas_peucker(const Stroke& pts, size_t lo, size_t hi, double epsilon,
                            std::vector<bool>& keep) {
    if (hi <= lo + 1) return;
    double best = -1.0;
    size_t best_i = lo;
    for (size_t i = lo + 1; i < hi; ++i) {
        const double d = perpendicular_distance(pts[i], pts[lo], pts[hi]);
        if (d > best) {
            best = d;
            best_i = i;
        }
    }
    if (best > epsilon) {
        keep[best_i] = true;
        douglas_peucker(pts, lo, best_i, epsilon, keep);
        douglas_peucker(pts, best_i, hi, epsilon, keep);
    }
}

Trajectory reduce_points(const Trajectory& traj, double epsilon) {
    if (epsilon <= 0) throwf("epsilon must be > 0, got %g", epsilon);
    Trajectory out;
    out.strokes.reserve(traj.strokes.size());
    for (const auto& stroke : traj.strokes) {
        if (stroke.size() <= 2) {
            out.strokes.push_back(stroke);
            continue;
        }
        std::vector<bool> keep(stroke.size(), false);
        keep.front() = keep.back() = true;
        douglas_peucker(stroke, 0, stroke.size() - 1, epsilon, keep);
        Stroke reduced;
        for (size_t i = 0; i < stroke.size(); ++i) {
            if (keep[i]) reduced.push_back(stroke[i]);
        }
        out.strokes.push_back(std::move(reduced));
    }
    return out;
}

PointSequence encode_sequence(const Trajectory& traj, int side) {
    const double denom = static_cast<double>(side - 1);
    PointSequence seq;
    const size_t total = traj.point_count();
    seq.points.reserve(total);
    size_t emitted = 0;
    for (size_t s = 0; s < traj.strokes.size(); ++s) {
        const Stroke& stroke = traj.strokes[s];
        for (size_t i = 0; i < stroke.size(); ++i) {
            ++emitted;
            PointRecord rec;
            rec.x = stroke[i].first / denom;
            rec.y = stroke[i].second / denom;
            if (emitted == total) {
                rec.pen = 2;
            } else if (i + 1 == stroke.size()) {
                rec.pen = 1;
            } else {
                rec.pen = 0;
            }
            seq.points.push_back(rec);
        }
    }
    seq.n_real = static_cast<int>(total);
    return seq;
}

std::vector<int> pad_sequences(std::vector<PointSequence>& seqs) {
    if (seqs.empty()) throwf("pad_sequences: empty batch");
    int max_len = 0;
    std::vector<int> lengths;
    lengths.reserve(seqs.size());
    for (const auto& seq : seqs) {
        lengths.push_back(seq.n_real);
        max_len = std::max(max_len, seq.n_real);
    }
    for (auto& seq : seqs) {
        PointRecord pad;
        pad.pen = 2;
        seq.points.resize(static_cast<size_t>(max_len), pad);
    }
    return lengths;
}

static void draw_line(BinaryImage& img, int x0, int y0, int x1, int y1) {
    const int dx = std::abs(x1 - x0);
    const int dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1;
    const int sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
        img.set(x0, y0);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

BinaryImage rasterize(const Trajectory& traj, int side) {
    BinaryImage img(side);
    for (const auto& stroke : traj.strokes) {
        if (stroke.size() == 1) {
            img.set(round_coord(stroke[0].first), round_coord(stroke[0].second));
            continue;
        }
        for (size_t i = 0; i + 1 < stroke.size(); ++i) {
            draw_line(img, round_coord(stroke[i].first), round_coord(stroke[i].second),
                      round_coord(stroke[i + 1].first), round_coord(stroke[i + 1].second));
        }
    }
    return img;
}

Trajectory trajectory_from_points(const std::vector<PointRecord>& pts, int side) {
    const double denom = static_cast<double>(side - 1);
    Trajectory traj;
    Stroke current;
    for (const auto& rec : pts) {
        current.emplace_back(rec.x * denom, rec.y * denom);
        if (rec.pen == 1 || rec.pen == 2) {
            traj.strokes.push_back(std::move(current));
            current.clear();
            if (rec.pen == 2) break;
        }
    }
    if (!current.empty()) traj.strokes.push_back(std::move(current));
    return traj;
}

}  // namespace otrec
