#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "otrec/dataio.hpp"
#include "otrec/eval.hpp"
#include "otrec/ink.hpp"
#include "otrec/model.hpp"
#include "otrec/recovery.hpp"
#include "otrec/training.hpp"

namespace py = pybind11;
using namespace otrec;

namespace {

using PyStrokes = std::vector<std::vector<std::pair<double, double>>>;

InkSample sample_from_parts(const std::string& id, const std::string& label,
                            const PyStrokes& strokes) {
    InkSample s;
    s.id = id;
    s.label = label;
    for (const auto& stroke : strokes) s.strokes.emplace_back(stroke.begin(), stroke.end());
    s.validate();
    return s;
}

PyStrokes strokes_to_py(const std::vector<Stroke>& strokes) {
    PyStrokes out;
    for (const auto& stroke : strokes) out.emplace_back(stroke.begin(), stroke.end());
    return out;
}

BinaryImage image_from_array(const py::array_t<uint8_t>& arr) {
    const auto buf = arr.request();
    if (buf.ndim != 2 || buf.shape[0] != buf.shape[1])
        throw py::value_error("image must be a square 2-D uint8 array");
    BinaryImage img(static_cast<int>(buf.shape[0]));
    const auto view = arr.unchecked<2>();
    for (int y = 0; y < img.side; ++y)
        for (int x = 0; x < img.side; ++x)
            if (view(y, x)) img.set(x, y);
    return img;
}

py::array_t<uint8_t> image_to_array(const BinaryImage& img) {
    py::array_t<uint8_t> arr({img.side, img.side});
    auto view = arr.mutable_unchecked<2>();
    for (int y = 0; y < img.side; ++y)
        for (int x = 0; x < img.side; ++x) view(y, x) = img.get(x, y);
    return arr;
}

ModelConfig config_from_dict(const py::dict& d) {
    ModelConfig cfg;
    if (d.contains("preset") && d["preset"].cast<std::string>() == "micro")
        cfg = ModelConfig::micro();
    if (d.contains("image_side")) cfg.image_side = d["image_side"].cast<int>();
    if (d.contains("conv_depths")) {
        const auto depths = d["conv_depths"].cast<std::vector<int>>();
        if (depths.size() != 4) throw py::value_error("conv_depths must have 4 entries");
        std::copy(depths.begin(), depths.end(), cfg.conv_depths.begin());
    }
    if (d.contains("lstm_size")) cfg.lstm_size = d["lstm_size"].cast<int>();
    if (d.contains("mixtures")) cfg.mixtures = d["mixtures"].cast<int>();
    if (d.contains("attention_dim")) cfg.attention_dim = d["attention_dim"].cast<int>();
    if (d.contains("use_attention")) cfg.use_attention = d["use_attention"].cast<bool>();
    cfg.validate();
    return cfg;
}

struct PyModel {
    TrajectoryModel<float> net;
};

}  // namespace

PYBIND11_MODULE(_otrec, m) {
    m.doc() = "online trajectory recovery from offline handwriting images";

    m.def(
        "generate_synthetic",
        [](int categories, int samples_per_category, int stroke_min, int stroke_max, double jitter,
           uint64_t seed) {
            SynthesisConfig cfg;
            cfg.category_count = categories;
            cfg.samples_per_category = samples_per_category;
            cfg.stroke_count_min = stroke_min;
            cfg.stroke_count_max = stroke_max;
            cfg.jitter_std = jitter;
            cfg.seed = seed;
            py::list out;
            for (const auto& s : generate_synthetic(cfg))
                out.append(py::make_tuple(s.id, s.label, strokes_to_py(s.strokes)));
            return out;
        },
        py::arg("categories") = 4, py::arg("samples_per_category") = 4, py::arg("stroke_min") = 3,
        py::arg("stroke_max") = 5, py::arg("jitter") = 0.0, py::arg("seed") = 0);

    m.def(
        "preprocess",
        [](const PyStrokes& strokes, int side, double epsilon) {
            const InkSample s = sample_from_parts("s", "", strokes);
            return strokes_to_py(reduce_points(rescale(s, side), epsilon).strokes);
        },
        "rescale into the pixel grid and apply point reduction", py::arg("strokes"),
        py::arg("side") = 64, py::arg("epsilon") = 2.0);

    m.def(
        "rasterize",
        [](const PyStrokes& strokes, int side) {
            Trajectory t;
            for (const auto& stroke : strokes) t.strokes.emplace_back(stroke.begin(), stroke.end());
            return image_to_array(otrec::rasterize(t, side));
        },
        py::arg("strokes"), py::arg("side") = 64);

    m.def(
        "dtw",
        [](const PyStrokes& a, const PyStrokes& b, double pen_penalty) {
            Trajectory ta, tb;
            for (const auto& s : a) ta.strokes.emplace_back(s.begin(), s.end());
            for (const auto& s : b) tb.strokes.emplace_back(s.begin(), s.end());
            const DtwResult r = dtw_distance(ta, tb, pen_penalty);
            return py::make_tuple(r.cost, r.normalized);
        },
        py::arg("a"), py::arg("b"), py::arg("pen_penalty") = 0.0);

    m.def(
        "raster_iou",
        [](const PyStrokes& strokes, const py::array_t<uint8_t>& image) {
            Trajectory t;
            for (const auto& s : strokes) t.strokes.emplace_back(s.begin(), s.end());
            return raster_iou(t, image_from_array(image));
        },
        py::arg("strokes"), py::arg("image"));

    m.def(
        "fuse_scores",
        [](const ScoreFile& off, const ScoreFile& on, double gamma) {
            const FusionResult r = fuse_scores(off, on, gamma);
            return py::make_tuple(r.scores, r.predictions);
        },
        py::arg("off"), py::arg("on"), py::arg("gamma"));

    m.def(
        "gamma_sweep",
        [](const ScoreFile& off, const ScoreFile& on, const std::map<std::string, std::string>& gold,
           const std::vector<double>& grid) { return gamma_sweep(off, on, gold, grid); },
        py::arg("off"), py::arg("on"), py::arg("gold"), py::arg("grid"));

    py::class_<PyModel>(m, "TrajectoryModel")
        .def_static(
            "train",
            [](const py::list& samples, const py::dict& options) {
                std::vector<InkSample> ink;
                for (const auto& item : samples) {
                    const auto t = item.cast<py::tuple>();
                    ink.push_back(sample_from_parts(t[0].cast<std::string>(),
                                                    t[1].cast<std::string>(),
                                                    t[2].cast<PyStrokes>()));
                }
                TrainConfig cfg;
                cfg.model = config_from_dict(options);
                if (options.contains("epochs")) cfg.max_epochs = options["epochs"].cast<int>();
                if (options.contains("batch")) cfg.batch_size = options["batch"].cast<int>();
                if (options.contains("lr")) cfg.lr = options["lr"].cast<double>();
                if (options.contains("seed")) cfg.seed = options["seed"].cast<uint64_t>();
                if (options.contains("max_steps")) cfg.max_steps = options["max_steps"].cast<int64_t>();
                if (options.contains("stop_ratio"))
                    cfg.stop_loss_ratio = options["stop_ratio"].cast<double>();
                const double epsilon =
                    options.contains("epsilon") ? options["epsilon"].cast<double>() : 2.0;
                const uint64_t init_seed =
                    options.contains("init_seed") ? options["init_seed"].cast<uint64_t>() : 1;
                const Dataset ds = prepare_dataset(ink, cfg.model.image_side, epsilon);
                auto model = std::make_unique<PyModel>(
                    PyModel{TrajectoryModel<float>(cfg.model, init_seed)});
                train_model(model->net, ds, nullptr, cfg);
                return model;
            },
            py::arg("samples"), py::arg("options") = py::dict())
        .def_static("load",
                    [](const std::string& path) {
                        return std::make_unique<PyModel>(PyModel{load_checkpoint(path)});
                    })
        .def("save", [](const PyModel& self, const std::string& path) {
            save_checkpoint(self.net, path);
        })
        .def_property_readonly("step_count", [](const PyModel& self) { return self.net.step_count; })
        .def_property_readonly("t_max_hint", [](const PyModel& self) { return self.net.t_max_hint; })
        .def(
            "recover",
            [](PyModel& self, const py::array_t<uint8_t>& image, const std::string& mode,
               double temperature, uint64_t seed, int t_max) {
                RecoveryConfig cfg;
                cfg.mode = mode == "sample" ? RecoveryConfig::Mode::sample
                                            : RecoveryConfig::Mode::greedy;
                cfg.temperature = temperature;
                cfg.seed = seed;
                cfg.t_max = t_max;
                const RecoveryResult r = recover(self.net, image_from_array(image), cfg);
                return py::make_tuple(strokes_to_py(r.trajectory.strokes), r.truncated);
            },
            py::arg("image"), py::arg("mode") = "greedy", py::arg("temperature") = 1.0,
            py::arg("seed") = 0, py::arg("t_max") = 0);

    m.attr("__version__") = "0.1.0";
}
