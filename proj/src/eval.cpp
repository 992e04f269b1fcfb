#include "otrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace otrec {

using nlohmann::json;

namespace {

struct FlatPoint {
    double x, y;
    int pen;
};

std::vector<FlatPoint> flatten(const Trajectory& traj) {
    std::vector<FlatPoint> pts;
    const size_t total = traj.point_count();
    pts.reserve(total);
    size_t emitted = 0;
    for (const auto& stroke : traj.strokes) {
        for (size_t i = 0; i < stroke.size(); ++i) {
            ++emitted;
            int pen = 0;
            if (emitted == total) {
                pen = 2;
            } else if (i + 1 == stroke.size()) {
                pen = 1;
            }
            pts.push_back({stroke[i].first, stroke[i].second, pen});
        }
    }
    return pts;
}

}  // namespace

DtwResult dtw_distance(const Trajectory& a, const Trajectory& b, double pen_penalty) {
    const std::vector<FlatPoint> pa = flatten(a);
    const std::vector<FlatPoint> pb = flatten(b);
    if (pa.empty() || pb.empty()) throwf("dtw_distance: empty trajectory");
    const size_t n = pa.size(), m = pb.size();

    auto local = [&](size_t i, size_t j) {
        double c = std::hypot(pa[i].x - pb[j].x, pa[i].y - pb[j].y);
        if (pen_penalty != 0.0 && pa[i].pen != pb[j].pen) c += pen_penalty;
        return c;
    };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> cost(n * m, inf);
    std::vector<int> length(n * m, 0);
    auto idx = [m](size_t i, size_t j) { return i * m + j; };

    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < m; ++j) {
            const double c = local(i, j);
            if (i == 0 && j == 0) {
                cost[idx(i, j)] = c;
                length[idx(i, j)] = 1;
                continue;
            }
            // predecessor preference on ties: diagonal, then insert, then delete
            double best = inf;
            int best_len = 0;
            if (i > 0 && j > 0 && cost[idx(i - 1, j - 1)] < best) {
                best = cost[idx(i - 1, j - 1)];
                best_len = length[idx(i - 1, j - 1)];
            }
            if (i > 0 && cost[idx(i - 1, j)] < best) {
                best = cost[idx(i - 1, j)];
                best_len = length[idx(i - 1, j)];
            }
            if (j > 0 && cost[idx(i, j - 1)] < best) {
                best = cost[idx(i, j - 1)];
                best_len = length[idx(i, j - 1)];
            }
            cost[idx(i, j)] = best + c;
            length[idx(i, j)] = best_len + 1;
        }
    }
    DtwResult out;
    out.cost = cost[idx(n - 1, m - 1)];
    out.normalized = out.cost / static_cast<double>(length[idx(n - 1, m - 1)]);
    return out;
}

double raster_iou(const Trajectory& recovered, const BinaryImage& image) {
    const BinaryImage rec = rasterize(recovered, image.side);
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < image.pixels.size(); ++i) {
        const bool a = rec.pixels[i] != 0;
        const bool b = image.pixels[i] != 0;
        inter += a && b;
        uni += a || b;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

void append_polylines(std::string& svg, const Trajectory& traj, const char* color) {
    char buf[64];
    for (const auto& stroke : traj.strokes) {
        svg += "<polyline points=\"";
        for (size_t i = 0; i < stroke.size(); ++i) {
            if (i) svg += " ";
            snprintf(buf, sizeof(buf), "%.3f,%.3f", stroke[i].first, stroke[i].second);
            svg += buf;
        }
        svg += "\" fill=\"none\" stroke=\"";
        svg += color;
        svg += "\" stroke-width=\"1\"/>\n";
    }
}

}  // namespace

void export_svg(const Trajectory& gold, const Trajectory& recovered, const std::string& path,
                int side) {
    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " +
                      std::to_string(side) + " " + std::to_string(side) + "\">\n";
    append_polylines(svg, gold, "black");
    append_polylines(svg, recovered, "red");
    svg += "</svg>\n";
    std::ofstream out(path, std::ios::binary);
    if (!out) throwf("cannot write svg: %s", path.c_str());
    out << svg;
}

void export_attention(const std::vector<Tensor<float>>& maps,
                      const std::vector<PointRecord>& points, const std::string& dir, int side) {
    std::filesystem::create_directories(dir);
    char name[64];
    for (size_t t = 0; t < maps.size(); ++t) {
        const Tensor<float>& map = maps[t];
        if (map.rank() != 2) throwf("export_attention: maps must be [H,W]");
        const int h = map.dim(0), w = map.dim(1);
        float mx = 0.0f;
        for (float v : map.data) mx = std::max(mx, v);
        const int fy = side / h, fx = side / w;
        std::string pgm = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
        pgm.reserve(pgm.size() + static_cast<size_t>(side) * side);
        for (int y = 0; y < side; ++y) {
            for (int x = 0; x < side; ++x) {
                const float v = map.at(y / fy, x / fx);
                const int px = mx > 0 ? static_cast<int>(std::lround(v / mx * 255.0f)) : 0;
                pgm.push_back(static_cast<char>(std::clamp(px, 0, 255)));
            }
        }
        snprintf(name, sizeof(name), "/attention_%04zu.pgm", t + 1);
        std::ofstream out(dir + name, std::ios::binary);
        if (!out) throwf("cannot write attention map in %s", dir.c_str());
        out << pgm;

        const std::vector<PointRecord> prefix(points.begin(),
                                              points.begin() + static_cast<long>(std::min(t + 1, points.size())));
        snprintf(name, sizeof(name), "/partial_%04zu.svg", t + 1);
        export_svg(Trajectory{}, trajectory_from_points(prefix, side), dir + name, side);
    }
}

// ---- score files and fusion ----

ScoreFile read_scores(const std::string& path) {
    std::ifstream in(path);
    if (!in) throwf("cannot open score file: %s", path.c_str());
    ScoreFile scores;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("id") || !j.contains("scores"))
            throwf("%s:%d: malformed score record", path.c_str(), line_no);
        LabelScores ls;
        for (const auto& [label, p] : j.at("scores").items()) ls[label] = p.get<double>();
        scores[j.at("id").get<std::string>()] = std::move(ls);
    }
    return scores;
}

void write_scores(const ScoreFile& scores, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throwf("cannot write score file: %s", path.c_str());
    for (const auto& [id, ls] : scores) {
        json s = json::object();
        for (const auto& [label, p] : ls) s[label] = p;
        out << json{{"id", id}, {"scores", s}}.dump() << "\n";
    }
}

std::string classifier_predict_label(const LabelScores& scores) {
    if (scores.empty()) throwf("empty score row");
    auto best = scores.begin();
    for (auto it = std::next(scores.begin()); it != scores.end(); ++it) {
        if (it->second > best->second) best = it;  // ties keep the earlier label
    }
    return best->first;
}

FusionResult fuse_scores(const ScoreFile& off, const ScoreFile& on, double gamma) {
    if (gamma < 0.0 || gamma > 1.0) throwf("gamma must be in [0,1], got %g", gamma);
    if (off.size() != on.size())
        throwf("fuse: %zu offline ids vs %zu online ids", off.size(), on.size());
    FusionResult result;
    for (const auto& [id, off_scores] : off) {
        auto on_it = on.find(id);
        if (on_it == on.end()) throwf("fuse: id %s missing from the online scores", id.c_str());
        const LabelScores& on_scores = on_it->second;
        if (off_scores.size() != on_scores.size())
            throwf("fuse: id %s has %zu offline labels vs %zu online labels", id.c_str(),
                   off_scores.size(), on_scores.size());
        LabelScores combined;
        for (const auto& [label, p_off] : off_scores) {
            auto jt = on_scores.find(label);
            if (jt == on_scores.end())
                throwf("fuse: id %s label %s missing from the online scores", id.c_str(),
                       label.c_str());
            const double lo = std::log(std::max(p_off, 1e-12));
            const double ln = std::log(std::max(jt->second, 1e-12));
            combined[label] = gamma * lo + (1.0 - gamma) * ln;
        }
        result.predictions[id] = classifier_predict_label(combined);
        result.scores[id] = std::move(combined);
    }
    return result;
}

std::vector<std::pair<double, double>> gamma_sweep(const ScoreFile& off, const ScoreFile& on,
                                                   const std::map<std::string, std::string>& gold,
                                                   const std::vector<double>& grid) {
    if (grid.empty()) throwf("gamma_sweep: empty grid");
    std::vector<std::pair<double, double>> rows;
    rows.reserve(grid.size());
    for (double gamma : grid) {
        const FusionResult fused = fuse_scores(off, on, gamma);
        size_t correct = 0, total = 0;
        for (const auto& [id, pred] : fused.predictions) {
            auto it = gold.find(id);
            if (it == gold.end()) throwf("gamma_sweep: no gold label for id %s", id.c_str());
            ++total;
            correct += pred == it->second;
        }
        rows.emplace_back(gamma, static_cast<double>(correct) / static_cast<double>(total));
    }
    return rows;
}

void write_sweep_csv(const std::vector<std::pair<double, double>>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throwf("cannot write sweep csv: %s", path.c_str());
    out << "gamma,accuracy\n";
    char buf[64];
    for (const auto& [gamma, acc] : rows) {
        snprintf(buf, sizeof(buf), "%g,%.6f\n", gamma, acc);
        out << buf;
    }
}

}  // namespace otrec
