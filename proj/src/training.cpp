#include "otrec/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "otrec/adam.hpp"
#include "otrec/binio.hpp"
#include "otrec/rng.hpp"

namespace otrec {

using nlohmann::json;

std::vector<std::string> Dataset::label_set() const {
    std::set<std::string> labels;
    for (const auto& s : samples) labels.insert(s.label);
    return {labels.begin(), labels.end()};
}

Dataset prepare_dataset(const std::vector<InkSample>& samples, int side, double dp_epsilon) {
    Dataset ds;
    ds.side = side;
    ds.samples.reserve(samples.size());
    for (const auto& sample : samples) {
        const Trajectory scaled = rescale(sample, side);
        const Trajectory reduced = reduce_points(scaled, dp_epsilon);
        PreparedSample prep;
        prep.label = sample.label;
        prep.seq = encode_sequence(reduced, side);
        prep.image = rasterize(reduced, side);
        ds.samples.push_back(std::move(prep));
    }
    return ds;
}

static constexpr char kDatasetMagic[4] = {'O', 'T', 'R', 'D'};
static constexpr uint32_t kDatasetVersion = 1;

void write_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throwf("cannot write dataset: %s", path.c_str());
    out.write(kDatasetMagic, 4);
    binio::put_u32(out, kDatasetVersion);
    binio::put_u64(out, ds.samples.size());
    binio::put_u32(out, static_cast<uint32_t>(ds.side));
    const size_t n_bytes = (static_cast<size_t>(ds.side) * ds.side + 7) / 8;
    for (const auto& s : ds.samples) {
        binio::put_u32(out, static_cast<uint32_t>(s.label.size()));
        out.write(s.label.data(), static_cast<std::streamsize>(s.label.size()));
        binio::put_u32(out, static_cast<uint32_t>(s.seq.n_real));
        for (int i = 0; i < s.seq.n_real; ++i) {
            const PointRecord& r = s.seq.points[static_cast<size_t>(i)];
            binio::put_f32(out, static_cast<float>(r.x));
            binio::put_f32(out, static_cast<float>(r.y));
            binio::put_f32(out, r.pen == 0 ? 1.0f : 0.0f);
            binio::put_f32(out, r.pen == 1 ? 1.0f : 0.0f);
            binio::put_f32(out, r.pen == 2 ? 1.0f : 0.0f);
        }
        std::vector<uint8_t> packed(n_bytes, 0);
        for (size_t i = 0; i < s.image.pixels.size(); ++i) {
            if (s.image.pixels[i]) packed[i / 8] |= static_cast<uint8_t>(0x80u >> (i % 8));
        }
        out.write(reinterpret_cast<const char*>(packed.data()),
                  static_cast<std::streamsize>(packed.size()));
    }
    if (!out) throwf("write failed: %s", path.c_str());
}

Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throwf("cannot open dataset: %s", path.c_str());
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kDatasetMagic, 4) != 0)
        throwf("%s: bad dataset magic (expected OTRD)", path.c_str());
    const uint32_t version = binio::get_u32(in);
    if (version != kDatasetVersion) throwf("%s: unsupported dataset version %u", path.c_str(), version);
    const uint64_t count = binio::get_u64(in);
    Dataset ds;
    ds.side = static_cast<int>(binio::get_u32(in));
    if (ds.side <= 0 || ds.side > 4096) throwf("%s: implausible image side %d", path.c_str(), ds.side);
    const size_t n_bytes = (static_cast<size_t>(ds.side) * ds.side + 7) / 8;
    ds.samples.reserve(count);
    for (uint64_t k = 0; k < count; ++k) {
        PreparedSample s;
        const uint32_t label_len = binio::get_u32(in);
        s.label.resize(label_len);
        in.read(s.label.data(), label_len);
        const uint32_t n_real = binio::get_u32(in);
        s.seq.n_real = static_cast<int>(n_real);
        s.seq.points.resize(n_real);
        for (uint32_t i = 0; i < n_real; ++i) {
            PointRecord& r = s.seq.points[i];
            r.x = binio::get_f32(in);
            r.y = binio::get_f32(in);
            const float ps0 = binio::get_f32(in);
            const float ps1 = binio::get_f32(in);
            const float ps2 = binio::get_f32(in);
            r.pen = ps2 > 0.5f ? 2 : (ps1 > 0.5f ? 1 : 0);
            (void)ps0;
        }
        std::vector<uint8_t> packed(n_bytes);
        in.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(n_bytes));
        if (static_cast<size_t>(in.gcount()) != n_bytes)
            throwf("%s: truncated dataset file", path.c_str());
        s.image = BinaryImage(ds.side);
        for (size_t i = 0; i < s.image.pixels.size(); ++i) {
            s.image.pixels[i] = (packed[i / 8] >> (7 - i % 8)) & 1u;
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

BatchLoss teacher_forced_batch(TrajectoryModel<float>& net,
                               const std::vector<const PreparedSample*>& batch, ForwardMode mode,
                               bool backprop) {
    if (batch.empty()) throwf("teacher_forced_batch: empty batch");
    std::vector<PointSequence> seqs;
    seqs.reserve(batch.size());
    for (const auto* s : batch) seqs.push_back(s->seq);
    pad_sequences(seqs);
    const int T = static_cast<int>(seqs[0].points.size());
    const int M = net.config.mixtures;
    const float inv_batch = 1.0f / static_cast<float>(batch.size());

    BatchLoss total;
    total.T = T;
    for (size_t bi = 0; bi < batch.size(); ++bi) {
        const PointSequence& target = seqs[bi];
        Graph<float> g;
        GraphBinding<float> bind(g, net.params);
        const Var gf = encode_image_graph(net, g, bind, image_to_input(g, batch[bi]->image), mode);
        const Var proj = net.config.use_attention ? project_features(g, bind, gf) : gf;
        DecoderStateVars<float> state = initial_decoder_state<float>(g, net.config.lstm_size);

        Tensor<float> start({5});
        for (int i = 0; i < 5; ++i) start[i] = static_cast<float>(kStartVector[static_cast<size_t>(i)]);
        Var x_prev = g.constant(std::move(start));

        std::vector<Var> logps, pen_ces;
        logps.reserve(static_cast<size_t>(target.n_real));
        pen_ces.reserve(static_cast<size_t>(T));
        for (int t = 0; t < T; ++t) {
            DecoderStepVars<float> step = decoder_step_graph(net, g, bind, gf, proj, state, x_prev);
            state = step.state;
            const GmmHeadVars<float> head = head_transform_graph(g, step.raw, M);
            const PointRecord& rec = target.points[static_cast<size_t>(t)];
            if (t < target.n_real) {
                logps.push_back(gmm_logp_graph(g, head, rec.x, rec.y));
            }
            pen_ces.push_back(pen_ce_graph(g, head, rec.pen));
            if (t + 1 < T) {
                Tensor<float> next({5}, 0.0f);
                next[0] = static_cast<float>(rec.x);
                next[1] = static_cast<float>(rec.y);
                next[2 + rec.pen] = 1.0f;
                x_prev = g.constant(std::move(next));
            }
        }
        const Var ls = g.neg(g.scale(g.add_n(logps), 1.0f / static_cast<float>(target.n_real)));
        const Var lp = g.scale(g.add_n(pen_ces), 1.0f / static_cast<float>(T));
        const Var loss = g.add(ls, lp);

        const double sample_loss = g.val(loss)[0];
        if (!std::isfinite(sample_loss))
            throwf("non-finite loss at batch position %zu (label %s)", bi, batch[bi]->label.c_str());
        total.L += sample_loss * inv_batch;
        total.L_s += static_cast<double>(g.val(ls)[0]) * inv_batch;
        total.L_p += static_cast<double>(g.val(lp)[0]) * inv_batch;

        if (backprop) {
            g.backward(loss);
            bind.accumulate_grads(inv_batch);
        }
    }
    return total;
}

BatchLoss dataset_loss(TrajectoryModel<float>& net, const Dataset& ds, ForwardMode mode,
                       int batch_size) {
    BatchLoss total;
    size_t done = 0;
    while (done < ds.samples.size()) {
        const size_t n = std::min<size_t>(static_cast<size_t>(batch_size), ds.samples.size() - done);
        std::vector<const PreparedSample*> batch;
        batch.reserve(n);
        for (size_t i = 0; i < n; ++i) batch.push_back(&ds.samples[done + i]);
        const BatchLoss part = teacher_forced_batch(net, batch, mode, false);
        const double w = static_cast<double>(n) / static_cast<double>(ds.samples.size());
        total.L += part.L * w;
        total.L_s += part.L_s * w;
        total.L_p += part.L_p * w;
        total.T = std::max(total.T, part.T);
        done += n;
    }
    return total;
}

static void append_log(std::ofstream* out, const EpochRecord& rec) {
    if (!out || !out->is_open()) return;
    json j{{"epoch", rec.epoch}, {"step", rec.step}, {"L", rec.L}, {"L_s", rec.L_s}, {"L_p", rec.L_p}};
    *out << j.dump() << "\n";
}

TrainResult train_model(TrajectoryModel<float>& net, const Dataset& train_set,
                        const Dataset* val_set, const TrainConfig& cfg,
                        const std::string& loss_log_path) {
    if (train_set.samples.empty()) throwf("train: empty dataset");
    if (cfg.batch_size < 1 || cfg.max_epochs < 1) throwf("train: bad batch size or epoch count");

    int longest = 1;
    for (const auto& s : train_set.samples) longest = std::max(longest, s.seq.n_real);
    net.t_max_hint = static_cast<int>(std::ceil(1.25 * longest));

    std::ofstream log_out;
    if (!loss_log_path.empty()) {
        log_out.open(loss_log_path, std::ios::binary);
        if (!log_out) throwf("cannot write loss log: %s", loss_log_path.c_str());
    }

    TrainResult result;
    const BatchLoss initial = dataset_loss(net, train_set, ForwardMode::frozen, cfg.batch_size);
    result.initial_loss = initial.L;
    EpochRecord rec0{0, 0, initial.L, initial.L_s, initial.L_p};
    result.log.push_back(rec0);
    append_log(&log_out, rec0);

    Adam<float> adam(cfg.lr);
    Rng rng(cfg.seed);
    std::vector<size_t> order(train_set.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    struct Snapshot {
        std::vector<Tensor<float>> values;
        BnStats<float> bn2, bn3;
    };
    Snapshot best;
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;

    auto take_snapshot = [&]() {
        best.values.clear();
        for (const auto& p : net.params) best.values.push_back(p.value);
        best.bn2 = net.bn2;
        best.bn3 = net.bn3;
    };
    auto restore_snapshot = [&]() {
        for (size_t i = 0; i < net.params.size(); ++i) net.params[i].value = best.values[i];
        net.bn2 = best.bn2;
        net.bn3 = best.bn3;
    };

    int64_t step = 0;
    bool stopped = false;
    for (int epoch = 1; epoch <= cfg.max_epochs && !stopped; ++epoch) {
        rng.shuffle(order);
        double epoch_l = 0, epoch_ls = 0, epoch_lp = 0;
        size_t seen = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t n = std::min<size_t>(static_cast<size_t>(cfg.batch_size), order.size() - start);
            std::vector<const PreparedSample*> batch;
            batch.reserve(n);
            for (size_t i = 0; i < n; ++i) batch.push_back(&train_set.samples[order[start + i]]);
            net.params.zero_grads();
            const BatchLoss bl = teacher_forced_batch(net, batch, ForwardMode::train, true);
            const double norm = net.params.grad_norm();
            if (!std::isfinite(norm)) throwf("non-finite gradient norm at step %lld",
                                             static_cast<long long>(step + 1));
            if (cfg.grad_clip > 0 && norm > cfg.grad_clip) net.params.scale_grads(cfg.grad_clip / norm);
            adam.step(net.params);
            ++step;
            net.step_count = step;
            epoch_l += bl.L * static_cast<double>(n);
            epoch_ls += bl.L_s * static_cast<double>(n);
            epoch_lp += bl.L_p * static_cast<double>(n);
            seen += n;
            if (cfg.max_steps > 0 && step >= cfg.max_steps) {
                stopped = true;
                break;
            }
        }
        EpochRecord rec{epoch, step, epoch_l / static_cast<double>(seen),
                        epoch_ls / static_cast<double>(seen), epoch_lp / static_cast<double>(seen)};
        result.log.push_back(rec);
        append_log(&log_out, rec);

        if (val_set) {
            const BatchLoss vl = dataset_loss(net, *val_set, ForwardMode::eval, cfg.batch_size);
            if (vl.L < best_val) {
                best_val = vl.L;
                result.best_epoch = epoch;
                since_best = 0;
                take_snapshot();
            } else if (++since_best >= cfg.patience) {
                stopped = true;
            }
        }
        if (cfg.stop_loss_ratio > 0 && rec.L <= cfg.stop_loss_ratio * result.initial_loss) {
            stopped = true;
        }
    }

    if (val_set && result.best_epoch >= 0) restore_snapshot();
    result.final_loss = dataset_loss(net, train_set, ForwardMode::frozen, cfg.batch_size).L;
    return result;
}

// ---- checkpoint container ----

static constexpr char kCheckpointMagic[4] = {'O', 'T', 'R', 'K'};
static constexpr uint32_t kCheckpointVersion = 1;

void write_checkpoint_blob(const CheckpointBlob& blob, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throwf("cannot write checkpoint: %s", path.c_str());
    out.write(kCheckpointMagic, 4);
    binio::put_u32(out, kCheckpointVersion);
    binio::put_string(out, blob.config_json);
    binio::put_u64(out, blob.tensors.size());
    for (const auto& [name, tensor] : blob.tensors) {
        binio::put_string(out, name);
        binio::put_u8(out, 0);  // dtype f32
        binio::put_u8(out, static_cast<uint8_t>(tensor.rank()));
        for (int d : tensor.shape) binio::put_u64(out, static_cast<uint64_t>(d));
        binio::put_tensor_payload(out, tensor);
    }
    if (!out) throwf("write failed: %s", path.c_str());
}

CheckpointBlob read_checkpoint_blob(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throwf("cannot open checkpoint: %s", path.c_str());
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throwf("%s: bad checkpoint magic in header (expected OTRK)", path.c_str());
    const uint32_t version = binio::get_u32(in);
    if (version != kCheckpointVersion)
        throwf("%s: unsupported checkpoint version %u", path.c_str(), version);
    CheckpointBlob blob;
    blob.config_json = binio::get_string(in);
    const uint64_t count = binio::get_u64(in);
    for (uint64_t i = 0; i < count; ++i) {
        const std::string name = binio::get_string(in);
        const uint8_t dtype = binio::get_u8(in);
        if (dtype != 0) throwf("%s: tensor %s has unsupported dtype %u", path.c_str(), name.c_str(), dtype);
        const int rank = binio::get_u8(in);
        std::vector<int> shape(static_cast<size_t>(rank));
        for (auto& d : shape) d = static_cast<int>(binio::get_u64(in));
        Tensor<float> t(shape);
        binio::get_tensor_payload(in, t);
        if (!in) throwf("%s: truncated checkpoint while reading %s", path.c_str(), name.c_str());
        blob.tensors.emplace_back(name, std::move(t));
    }
    return blob;
}

void save_checkpoint(const TrajectoryModel<float>& net, const std::string& path) {
    CheckpointBlob blob;
    json meta{{"kind", "trajectory"},
              {"model", json::parse(model_config_to_json(net.config))},
              {"step_count", net.step_count},
              {"t_max_hint", net.t_max_hint},
              {"bn2_initialized", net.bn2.initialized},
              {"bn3_initialized", net.bn3.initialized}};
    blob.config_json = meta.dump();
    for (const auto& p : net.params) blob.tensors.emplace_back(p.name, p.value);
    if (net.bn2.initialized) {
        blob.tensors.emplace_back("bn2.running_mean", net.bn2.mean);
        blob.tensors.emplace_back("bn2.running_var", net.bn2.var);
    }
    if (net.bn3.initialized) {
        blob.tensors.emplace_back("bn3.running_mean", net.bn3.mean);
        blob.tensors.emplace_back("bn3.running_var", net.bn3.var);
    }
    write_checkpoint_blob(blob, path);
}

TrajectoryModel<float> load_checkpoint(const std::string& path) {
    const CheckpointBlob blob = read_checkpoint_blob(path);
    json meta = json::parse(blob.config_json, nullptr, false);
    if (meta.is_discarded() || !meta.contains("kind"))
        throwf("%s: malformed checkpoint config", path.c_str());
    if (meta.at("kind").get<std::string>() != "trajectory")
        throwf("%s: checkpoint kind is %s, expected trajectory", path.c_str(),
               meta.at("kind").get<std::string>().c_str());
    TrajectoryModel<float> net(model_config_from_json(meta.at("model").dump()), 0);
    net.step_count = meta.at("step_count").get<int64_t>();
    net.t_max_hint = meta.at("t_max_hint").get<int>();
    const bool bn2_init = meta.at("bn2_initialized").get<bool>();
    const bool bn3_init = meta.at("bn3_initialized").get<bool>();

    std::set<std::string> loaded;
    for (const auto& [name, tensor] : blob.tensors) {
        if (name == "bn2.running_mean") {
            net.bn2.mean = tensor;
        } else if (name == "bn2.running_var") {
            net.bn2.var = tensor;
        } else if (name == "bn3.running_mean") {
            net.bn3.mean = tensor;
        } else if (name == "bn3.running_var") {
            net.bn3.var = tensor;
        } else {
            Param<float>* p = net.params.find(name);
            if (!p) throwf("%s: unexpected tensor %s", path.c_str(), name.c_str());
            if (p->value.shape != tensor.shape)
                throwf("%s: tensor %s has shape %s but config implies %s", path.c_str(),
                       name.c_str(), shape_str(tensor.shape).c_str(),
                       shape_str(p->value.shape).c_str());
            p->value = tensor;
        }
        loaded.insert(name);
    }
    for (const auto& p : net.params) {
        if (!loaded.count(p.name)) throwf("%s: missing tensor %s", path.c_str(), p.name.c_str());
    }
    net.bn2.initialized = bn2_init;
    net.bn3.initialized = bn3_init;
    if ((bn2_init && net.bn2.mean.numel() == 0) || (bn3_init && net.bn3.mean.numel() == 0))
        throwf("%s: missing running statistics", path.c_str());
    return net;
}

}  // namespace otrec
