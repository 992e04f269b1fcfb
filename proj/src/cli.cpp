#include "otrec/cli.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "otrec/dataio.hpp"
#include "otrec/eval.hpp"
#include "otrec/ink.hpp"
#include "otrec/model.hpp"
#include "otrec/recovery.hpp"
#include "otrec/training.hpp"

namespace otrec {

using nlohmann::json;

namespace {

std::string scalar_to_flag(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

void add_json_config(CLI::App* cmd) {
    // the value is consumed by expand_config_args before parsing
    static std::string sink;
    cmd->add_option("--config", sink, "JSON config file; flags override its values");
}

// Config files are flat JSON objects whose keys mirror the long flag names.
// Keys already present on the command line are skipped, so explicit flags win.
std::vector<std::string> expand_config_args(std::vector<std::string> args) {
    std::string config_path;
    for (size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config_path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
        }
    }
    if (config_path.empty()) return args;
    std::ifstream in(config_path);
    if (!in) throwf("cannot open config file: %s", config_path.c_str());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throwf("%s: config file must contain a JSON object", config_path.c_str());
    auto given = [&](const std::string& flag) {
        const std::string eq = flag + "=";
        for (const auto& a : args) {
            if (a == flag || a.rfind(eq, 0) == 0) return true;
        }
        return false;
    };
    for (const auto& [key, value] : j.items()) {
        const std::string flag = "--" + key;
        if (given(flag)) continue;
        if (value.is_boolean()) {
            if (value.get<bool>()) args.push_back(flag);
        } else if (value.is_array()) {
            args.push_back(flag);
            for (const auto& v : value) args.push_back(scalar_to_flag(v));
        } else {
            args.push_back(flag);
            args.push_back(scalar_to_flag(value));
        }
    }
    return args;
}

struct ModelFlags {
    std::string preset = "paper";
    std::vector<int> depths;
    int lstm_size = -1;
    int mixtures = -1;
    int attention_dim = -1;
    double leaky_slope = -1;
    bool no_attention = false;
    int side = 64;

    void attach(CLI::App* cmd) {
        cmd->add_option("--preset", preset, "model preset: paper or micro")
            ->check(CLI::IsMember({"paper", "micro"}));
        cmd->add_option("--depths", depths, "conv depths (4 values)")->expected(4);
        cmd->add_option("--lstm-size", lstm_size, "LSTM cells");
        cmd->add_option("--mixtures", mixtures, "GMM component count");
        cmd->add_option("--attention-dim", attention_dim, "attention inner dimension");
        cmd->add_option("--leaky-slope", leaky_slope, "LeakyReLU negative slope");
        cmd->add_flag("--no-attention", no_attention, "replace attention with mean pooling");
        cmd->add_option("--side", side, "image side in pixels");
    }

    ModelConfig build() const {
        ModelConfig cfg = preset == "micro" ? ModelConfig::micro() : ModelConfig{};
        cfg.image_side = side;
        if (!depths.empty()) std::copy(depths.begin(), depths.end(), cfg.conv_depths.begin());
        if (lstm_size > 0) cfg.lstm_size = lstm_size;
        if (mixtures > 0) cfg.mixtures = mixtures;
        if (attention_dim > 0) cfg.attention_dim = attention_dim;
        if (leaky_slope >= 0) cfg.leaky_slope = leaky_slope;
        cfg.use_attention = !no_attention;
        cfg.validate();
        return cfg;
    }
};

struct PreprocessedInk {
    std::vector<std::string> ids, labels;
    std::vector<Trajectory> trajectories;
    std::vector<BinaryImage> images;
};

PreprocessedInk preprocess_ink(const std::vector<InkSample>& samples, int side, double epsilon) {
    PreprocessedInk out;
    for (const auto& s : samples) {
        const Trajectory traj = reduce_points(rescale(s, side), epsilon);
        out.ids.push_back(s.id);
        out.labels.push_back(s.label);
        out.images.push_back(rasterize(traj, side));
        out.trajectories.push_back(traj);
    }
    return out;
}

int run_app(CLI::App& app, int argc, const char* const* argv) {
    try {
        std::vector<std::string> args;
        for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
        args = expand_config_args(std::move(args));
        std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
        app.parse(args);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const std::exception& e) {
        fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"offline-to-online handwriting trajectory recovery"};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic ink dataset");
    add_json_config(gen);
    struct {
        std::string out;
        SynthesisConfig cfg;
        std::vector<int> strokes{3, 5};
    } gen_args;
    gen->add_option("--out", gen_args.out, "output ink jsonl")->required();
    gen->add_option("--categories", gen_args.cfg.category_count, "category count");
    gen->add_option("--samples", gen_args.cfg.samples_per_category, "samples per category");
    gen->add_option("--strokes", gen_args.strokes, "stroke count range MIN MAX")->expected(2);
    gen->add_option("--jitter", gen_args.cfg.jitter_std, "gaussian jitter std (canvas units)");
    gen->add_option("--seed", gen_args.cfg.seed, "rng seed");
    gen->callback([&] {
        gen_args.cfg.stroke_count_min = gen_args.strokes.at(0);
        gen_args.cfg.stroke_count_max = gen_args.strokes.at(1);
        const auto samples = generate_synthetic(gen_args.cfg);
        write_ink(samples, gen_args.out);
        fprintf(stderr, "wrote %zu samples to %s\n", samples.size(), gen_args.out.c_str());
    });

    // ---- prepare ----
    auto* prep = app.add_subcommand("prepare", "preprocess ink into a training dataset");
    add_json_config(prep);
    struct {
        std::string in, out;
        int side = 64;
        double epsilon = 2.0;
    } prep_args;
    prep->add_option("--in", prep_args.in, "input ink jsonl")->required();
    prep->add_option("--out", prep_args.out, "output dataset file")->required();
    prep->add_option("--side", prep_args.side, "image side");
    prep->add_option("--dp-epsilon", prep_args.epsilon, "point-reduction tolerance (pixels)");
    prep->callback([&] {
        const auto samples = read_ink(prep_args.in);
        const Dataset ds = prepare_dataset(samples, prep_args.side, prep_args.epsilon);
        write_dataset(ds, prep_args.out);
        fprintf(stderr, "prepared %zu samples (side %d) into %s\n", ds.samples.size(),
                ds.side, prep_args.out.c_str());
    });

    // ---- train ----
    auto* train = app.add_subcommand("train", "train the recovery model");
    add_json_config(train);
    struct {
        std::string data, val, out, loss_log;
        TrainConfig cfg;
        ModelFlags model;
        uint64_t init_seed = 1;
    } train_args;
    train->add_option("--data", train_args.data, "training dataset")->required();
    train->add_option("--val", train_args.val, "held-out dataset for early stopping");
    train->add_option("--out", train_args.out, "output checkpoint")->required();
    train->add_option("--loss-log", train_args.loss_log, "per-epoch loss log (jsonl)");
    train->add_option("--epochs", train_args.cfg.max_epochs, "max epochs");
    train->add_option("--batch", train_args.cfg.batch_size, "mini-batch size");
    train->add_option("--lr", train_args.cfg.lr, "Adam learning rate");
    train->add_option("--seed", train_args.cfg.seed, "shuffle seed");
    train->add_option("--init-seed", train_args.init_seed, "weight init seed");
    train->add_option("--patience", train_args.cfg.patience, "early-stop patience (epochs)");
    train->add_option("--grad-clip", train_args.cfg.grad_clip, "global gradient-norm clip");
    train->add_option("--max-steps", train_args.cfg.max_steps, "optimizer step cap (0 = none)");
    train->add_option("--stop-ratio", train_args.cfg.stop_loss_ratio,
                      "stop once epoch loss <= ratio * initial loss (0 = off)");
    train_args.model.attach(train);
    train->callback([&] {
        const Dataset data = read_dataset(train_args.data);
        Dataset val;
        const bool has_val = !train_args.val.empty();
        if (has_val) val = read_dataset(train_args.val);
        train_args.cfg.model = train_args.model.build();
        if (train_args.cfg.model.image_side != data.side)
            throwf("dataset side %d does not match model side %d", data.side,
                   train_args.cfg.model.image_side);
        TrajectoryModel<float> net(train_args.cfg.model, train_args.init_seed);
        const TrainResult result = train_model(net, data, has_val ? &val : nullptr,
                                               train_args.cfg, train_args.loss_log);
        for (const auto& rec : result.log) {
            fprintf(stderr, "epoch %d step %" PRId64 " L=%.4f L_s=%.4f L_p=%.4f\n", rec.epoch,
                    rec.step, rec.L, rec.L_s, rec.L_p);
        }
        save_checkpoint(net, train_args.out);
        fprintf(stderr, "initial L=%.4f final L=%.4f checkpoint=%s\n", result.initial_loss,
                result.final_loss, train_args.out.c_str());
    });

    // ---- recover ----
    auto* rec = app.add_subcommand("recover", "decode trajectories from ink-derived images");
    add_json_config(rec);
    struct {
        std::string in, ckpt, out, mode = "greedy";
        double temperature = 1.0;
        double epsilon = 2.0;
        uint64_t seed = 0;
        int t_max = 0;
    } rec_args;
    rec->add_option("--in", rec_args.in, "input ink jsonl")->required();
    rec->add_option("--ckpt", rec_args.ckpt, "model checkpoint")->required();
    rec->add_option("--out", rec_args.out, "output ink jsonl")->required();
    rec->add_option("--mode", rec_args.mode, "point selection: greedy or sample")
        ->check(CLI::IsMember({"greedy", "sample"}));
    rec->add_option("--temperature", rec_args.temperature, "sampling temperature");
    rec->add_option("--seed", rec_args.seed, "sampling seed");
    rec->add_option("--t-max", rec_args.t_max, "decoding step cap (0 = checkpoint hint)");
    rec->add_option("--dp-epsilon", rec_args.epsilon, "point-reduction tolerance");
    rec->callback([&] {
        TrajectoryModel<float> net = load_checkpoint(rec_args.ckpt);
        const auto samples = read_ink(rec_args.in);
        const PreprocessedInk prep2 =
            preprocess_ink(samples, net.config.image_side, rec_args.epsilon);
        RecoveryConfig cfg;
        cfg.mode = rec_args.mode == "sample" ? RecoveryConfig::Mode::sample
                                             : RecoveryConfig::Mode::greedy;
        cfg.temperature = rec_args.temperature;
        cfg.seed = rec_args.seed;
        cfg.t_max = rec_args.t_max;
        std::vector<Trajectory> trajs;
        std::vector<bool> truncated;
        for (const auto& img : prep2.images) {
            RecoveryResult r = recover(net, img, cfg);
            trajs.push_back(std::move(r.trajectory));
            truncated.push_back(r.truncated);
        }
        export_recovered(trajs, truncated, prep2.ids, prep2.labels, rec_args.out);
        fprintf(stderr, "recovered %zu trajectories into %s\n", trajs.size(), rec_args.out.c_str());
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "DTW / raster-IoU report against gold ink");
    add_json_config(ev);
    struct {
        std::string gold, recovered, out;
        int side = 64;
        double epsilon = 2.0;
        double pen_penalty = 0.0;
    } ev_args;
    ev->add_option("--gold", ev_args.gold, "gold ink jsonl")->required();
    ev->add_option("--recovered", ev_args.recovered, "recovered ink jsonl")->required();
    ev->add_option("--out", ev_args.out, "per-sample CSV report")->required();
    ev->add_option("--side", ev_args.side, "image side");
    ev->add_option("--dp-epsilon", ev_args.epsilon, "gold point-reduction tolerance");
    ev->add_option("--pen-penalty", ev_args.pen_penalty, "DTW pen-state mismatch penalty");
    ev->callback([&] {
        const auto gold = read_ink(ev_args.gold);
        const auto recovered = read_ink(ev_args.recovered);
        std::map<std::string, const InkSample*> gold_by_id;
        for (const auto& s : gold) gold_by_id[s.id] = &s;
        FILE* out = fopen(ev_args.out.c_str(), "wb");
        if (!out) throwf("cannot write report: %s", ev_args.out.c_str());
        fprintf(out, "id,dtw,dtw_norm,iou,strokes_gold,strokes_recovered\n");
        double sum_dtw = 0, sum_norm = 0, sum_iou = 0;
        size_t stroke_hits = 0;
        for (const auto& r : recovered) {
            auto it = gold_by_id.find(r.id);
            if (it == gold_by_id.end()) throwf("no gold sample with id %s", r.id.c_str());
            const Trajectory gt = reduce_points(rescale(*it->second, ev_args.side), ev_args.epsilon);
            Trajectory rt;
            rt.strokes = r.strokes;
            const DtwResult d = dtw_distance(gt, rt, ev_args.pen_penalty);
            const double iou = raster_iou(rt, rasterize(gt, ev_args.side));
            fprintf(out, "%s,%.6f,%.6f,%.6f,%zu,%zu\n", r.id.c_str(), d.cost, d.normalized, iou,
                    gt.strokes.size(), rt.strokes.size());
            sum_dtw += d.cost;
            sum_norm += d.normalized;
            sum_iou += iou;
            stroke_hits += gt.strokes.size() == rt.strokes.size();
        }
        fclose(out);
        const double n = static_cast<double>(recovered.size());
        json summary{{"samples", recovered.size()},
                     {"mean_dtw", sum_dtw / n},
                     {"mean_dtw_norm", sum_norm / n},
                     {"mean_iou", sum_iou / n},
                     {"stroke_count_accuracy", static_cast<double>(stroke_hits) / n}};
        printf("%s\n", summary.dump().c_str());
    });

    // ---- export-svg ----
    auto* svg = app.add_subcommand("export-svg", "black/red overlay SVGs per sample");
    add_json_config(svg);
    struct {
        std::string gold, recovered, out_dir;
        int side = 64;
        double epsilon = 2.0;
    } svg_args;
    svg->add_option("--gold", svg_args.gold, "gold ink jsonl")->required();
    svg->add_option("--recovered", svg_args.recovered, "recovered ink jsonl")->required();
    svg->add_option("--out-dir", svg_args.out_dir, "output directory")->required();
    svg->add_option("--side", svg_args.side, "image side");
    svg->add_option("--dp-epsilon", svg_args.epsilon, "gold point-reduction tolerance");
    svg->callback([&] {
        const auto gold = read_ink(svg_args.gold);
        const auto recovered = read_ink(svg_args.recovered);
        std::map<std::string, const InkSample*> gold_by_id;
        for (const auto& s : gold) gold_by_id[s.id] = &s;
        std::filesystem::create_directories(svg_args.out_dir);
        for (const auto& r : recovered) {
            auto it = gold_by_id.find(r.id);
            if (it == gold_by_id.end()) throwf("no gold sample with id %s", r.id.c_str());
            const Trajectory gt =
                reduce_points(rescale(*it->second, svg_args.side), svg_args.epsilon);
            Trajectory rt;
            rt.strokes = r.strokes;
            export_svg(gt, rt, svg_args.out_dir + "/" + r.id + ".svg", svg_args.side);
        }
        fprintf(stderr, "wrote %zu overlays to %s\n", recovered.size(), svg_args.out_dir.c_str());
    });

    // ---- export-attention ----
    auto* att = app.add_subcommand("export-attention",
                                   "attention maps + partial recoveries for one sample");
    add_json_config(att);
    struct {
        std::string in, ckpt, id, out_dir;
        double epsilon = 2.0;
        int t_max = 0;
    } att_args;
    att->add_option("--in", att_args.in, "input ink jsonl")->required();
    att->add_option("--ckpt", att_args.ckpt, "model checkpoint")->required();
    att->add_option("--id", att_args.id, "sample id to decode")->required();
    att->add_option("--out-dir", att_args.out_dir, "output directory")->required();
    att->add_option("--t-max", att_args.t_max, "decoding step cap (0 = checkpoint hint)");
    att->add_option("--dp-epsilon", att_args.epsilon, "point-reduction tolerance");
    att->callback([&] {
        TrajectoryModel<float> net = load_checkpoint(att_args.ckpt);
        const auto samples = read_ink(att_args.in);
        const InkSample* picked = nullptr;
        for (const auto& s : samples) {
            if (s.id == att_args.id) picked = &s;
        }
        if (!picked) throwf("no sample with id %s in %s", att_args.id.c_str(), att_args.in.c_str());
        const Trajectory traj =
            reduce_points(rescale(*picked, net.config.image_side), att_args.epsilon);
        RecoveryConfig cfg;
        cfg.collect_attention = true;
        cfg.t_max = att_args.t_max;
        const RecoveryResult r = recover(net, rasterize(traj, net.config.image_side), cfg);
        export_attention(r.attention_maps, r.points, att_args.out_dir, net.config.image_side);
        fprintf(stderr, "wrote %zu timesteps to %s\n", r.attention_maps.size(),
                att_args.out_dir.c_str());
    });

    // ---- train-classifier ----
    auto* tc = app.add_subcommand("train-classifier", "train the offline CNN recognizer");
    add_json_config(tc);
    struct {
        std::string data, heldout, out;
        ClassifierTrainOptions opt;
        std::vector<int> depths{100, 200, 300, 400};
        int fc_size = 500;
        double dropout = 0.25;
        double stop_min = -1, stop_max = 2;
    } tc_args;
    tc->add_option("--data", tc_args.data, "training dataset")->required();
    tc->add_option("--out", tc_args.out, "output checkpoint")->required();
    tc->add_option("--heldout", tc_args.heldout, "held-out dataset for the accuracy window");
    tc->add_option("--epochs", tc_args.opt.epochs, "max epochs");
    tc->add_option("--lr", tc_args.opt.lr, "Adam learning rate");
    tc->add_option("--seed", tc_args.opt.seed, "seed");
    tc->add_option("--batch", tc_args.opt.batch_size, "mini-batch size");
    tc->add_option("--depths", tc_args.depths, "conv depths (4 values)")->expected(4);
    tc->add_option("--fc", tc_args.fc_size, "fully-connected width");
    tc->add_option("--dropout", tc_args.dropout, "dropout rate");
    tc->add_option("--stop-acc-min", tc_args.stop_min, "stop once held-out accuracy >= this");
    tc->add_option("--stop-acc-max", tc_args.stop_max, "intended accuracy ceiling (reporting)");
    tc->add_option("--check-every", tc_args.opt.check_every_steps,
                   "held-out accuracy check interval in steps (0 = per epoch)");
    tc->callback([&] {
        const Dataset data = read_dataset(tc_args.data);
        Dataset heldout;
        if (!tc_args.heldout.empty()) {
            heldout = read_dataset(tc_args.heldout);
            tc_args.opt.heldout = &heldout;
        }
        tc_args.opt.stop_acc_min = tc_args.stop_min;
        tc_args.opt.stop_acc_max = tc_args.stop_max;
        ClassifierConfig cfg;
        std::copy(tc_args.depths.begin(), tc_args.depths.end(), cfg.conv_depths.begin());
        cfg.fc_size = tc_args.fc_size;
        cfg.dropout = tc_args.dropout;
        const Classifier clf = train_offline_classifier(data, cfg, tc_args.opt);
        save_classifier(clf, tc_args.out);
        fprintf(stderr, "trained %zu-way classifier (%" PRId64 " steps) into %s\n",
                clf.config.labels.size(), clf.step_count, tc_args.out.c_str());
        if (tc_args.opt.heldout)
            fprintf(stderr, "held-out accuracy %.4f\n", classifier_accuracy(clf, heldout));
    });

    // ---- classify ----
    auto* cl = app.add_subcommand("classify", "score ink samples with a trained classifier");
    add_json_config(cl);
    struct {
        std::string in, ckpt, out;
        double epsilon = 2.0;
    } cl_args;
    cl->add_option("--in", cl_args.in, "input ink jsonl (gold or recovered)")->required();
    cl->add_option("--ckpt", cl_args.ckpt, "classifier checkpoint")->required();
    cl->add_option("--out", cl_args.out, "output score jsonl")->required();
    cl->add_option("--dp-epsilon", cl_args.epsilon, "point-reduction tolerance");
    cl->callback([&] {
        const Classifier clf = load_classifier(cl_args.ckpt);
        const auto samples = read_ink(cl_args.in);
        const PreprocessedInk prep2 =
            preprocess_ink(samples, clf.config.image_side, cl_args.epsilon);
        const ScoreFile scores = scores_from_classifier(clf, prep2.images, prep2.ids);
        write_scores(scores, cl_args.out);
        fprintf(stderr, "scored %zu samples into %s\n", scores.size(), cl_args.out.c_str());
    });

    // ---- fuse ----
    auto* fu = app.add_subcommand("fuse", "combine offline/online scores");
    add_json_config(fu);
    struct {
        std::string off, on, out;
        double gamma = 0.7;
    } fu_args;
    fu->add_option("--off", fu_args.off, "offline score jsonl")->required();
    fu->add_option("--on", fu_args.on, "online score jsonl")->required();
    fu->add_option("--gamma", fu_args.gamma, "offline weight in [0,1]");
    fu->add_option("--out", fu_args.out, "output fused score jsonl")->required();
    fu->callback([&] {
        const FusionResult fused =
            fuse_scores(read_scores(fu_args.off), read_scores(fu_args.on), fu_args.gamma);
        std::ofstream out(fu_args.out, std::ios::binary);
        if (!out) throwf("cannot write fused scores: %s", fu_args.out.c_str());
        for (const auto& [id, ls] : fused.scores) {
            json s = json::object();
            for (const auto& [label, v] : ls) s[label] = v;
            out << json{{"id", id}, {"scores", s}, {"prediction", fused.predictions.at(id)}}.dump()
                << "\n";
        }
        fprintf(stderr, "fused %zu samples at gamma=%g into %s\n", fused.scores.size(),
                fu_args.gamma, fu_args.out.c_str());
    });

    // ---- sweep ----
    auto* sw = app.add_subcommand("sweep", "fused accuracy across a gamma grid");
    add_json_config(sw);
    struct {
        std::string off, on, labels, out;
        double lo = 0.4, hi = 1.0, step = 0.1;
    } sw_args;
    sw->add_option("--off", sw_args.off, "offline score jsonl")->required();
    sw->add_option("--on", sw_args.on, "online score jsonl")->required();
    sw->add_option("--labels", sw_args.labels, "gold ink jsonl supplying labels")->required();
    sw->add_option("--out", sw_args.out, "output CSV")->required();
    sw->add_option("--gamma-min", sw_args.lo, "grid start");
    sw->add_option("--gamma-max", sw_args.hi, "grid end (inclusive)");
    sw->add_option("--gamma-step", sw_args.step, "grid step");
    sw->callback([&] {
        std::map<std::string, std::string> gold;
        for (const auto& s : read_ink(sw_args.labels)) gold[s.id] = s.label;
        std::vector<double> grid;
        for (double gm = sw_args.lo; gm <= sw_args.hi + 1e-9; gm += sw_args.step)
            grid.push_back(std::min(gm, 1.0));
        const auto rows = gamma_sweep(read_scores(sw_args.off), read_scores(sw_args.on), gold, grid);
        write_sweep_csv(rows, sw_args.out);
        for (const auto& [gamma, acc] : rows)
            fprintf(stderr, "gamma=%.2f accuracy=%.4f\n", gamma, acc);
    });

    return run_app(app, argc, argv);
}

}  // namespace otrec
