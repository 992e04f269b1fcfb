#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"
#include "otrec/adam.hpp"
#include "otrec/eval.hpp"
#include "otrec/graph.hpp"
#include "otrec/model.hpp"

namespace otrec {

using nlohmann::json;

void ClassifierConfig::validate() const {
    if (image_side % 16 != 0 || image_side <= 0)
        throwf("classifier image_side must be a positive multiple of 16");
    for (int d : conv_depths)
        if (d < 1) throwf("classifier conv depths must be positive");
    if (fc_size < 1) throwf("classifier fc_size must be positive");
    if (dropout < 0 || dropout >= 1) throwf("classifier dropout must be in [0,1)");
    if (labels.size() < 2) throwf("classifier needs at least 2 categories, got %zu", labels.size());
    if (!std::is_sorted(labels.begin(), labels.end())) throwf("classifier labels must be sorted");
}

Classifier::Classifier(const ClassifierConfig& cfg, uint64_t init_seed) : config(cfg) {
    cfg.validate();
    Rng rng(init_seed);
    const auto& d = cfg.conv_depths;
    auto conv = [&](const std::string& name, int in_ch, int out_ch) {
        Param<float>& w = params.add(name + ".w", {out_ch, in_ch, 3, 3});
        glorot_init(w.value, in_ch * 9, out_ch * 9, rng);
        params.add(name + ".b", {out_ch});
    };
    conv("conv1", 1, d[0]);
    conv("conv2", d[0], d[1]);
    conv("conv3", d[1], d[2]);
    conv("conv4", d[2], d[3]);
    Param<float>& fc = params.add("fc.w", {cfg.fc_size, cfg.flat_dim()});
    glorot_init(fc.value, cfg.flat_dim(), cfg.fc_size, rng);
    params.add("fc.b", {cfg.fc_size});
    const int k = static_cast<int>(cfg.labels.size());
    Param<float>& out = params.add("out.w", {k, cfg.fc_size});
    glorot_init(out.value, cfg.fc_size, k, rng);
    params.add("out.b", {k});
}

// conv -> ReLU -> pool (x4) -> FC ReLU -> dropout -> linear logits
static Var classifier_logits(const Classifier& clf, Graph<float>& g,
                             const GraphBinding<float>& bind, const BinaryImage& image, bool train,
                             Rng* dropout_rng) {
    if (image.side != clf.config.image_side)
        throwf("classify: image side %d does not match classifier side %d", image.side,
               clf.config.image_side);
    Var x = image_to_input(g, image);
    x = g.maxpool2d(g.relu(g.conv2d(x, bind["conv1.w"], bind["conv1.b"])));
    x = g.maxpool2d(g.relu(g.conv2d(x, bind["conv2.w"], bind["conv2.b"])));
    x = g.maxpool2d(g.relu(g.conv2d(x, bind["conv3.w"], bind["conv3.b"])));
    x = g.maxpool2d(g.relu(g.conv2d(x, bind["conv4.w"], bind["conv4.b"])));
    x = g.reshape(x, {clf.config.flat_dim()});
    x = g.relu(g.linear(x, bind["fc.w"], bind["fc.b"]));
    if (train && dropout_rng)
        x = g.dropout(x, static_cast<float>(clf.config.dropout), *dropout_rng, true);
    return g.linear(x, bind["out.w"], bind["out.b"]);
}

std::vector<double> classify_one(const Classifier& clf, const BinaryImage& image) {
    Graph<float> g;
    // params are read-only here; binding copies values into the graph
    GraphBinding<float> bind(g, const_cast<ParamStore<float>&>(clf.params));
    const Var logits = classifier_logits(clf, g, bind, image, false, nullptr);
    const Tensor<float> probs = Graph<float>::softmax_fwd(g.val(logits));
    return {probs.data.begin(), probs.data.end()};
}

std::vector<std::vector<double>> classify(const Classifier& clf,
                                          const std::vector<BinaryImage>& images) {
    std::vector<std::vector<double>> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(classify_one(clf, img));
    return out;
}

double classifier_accuracy(const Classifier& clf, const Dataset& ds) {
    if (ds.samples.empty()) throwf("classifier_accuracy: empty dataset");
    size_t correct = 0;
    for (const auto& s : ds.samples) {
        const std::vector<double> probs = classify_one(clf, s.image);
        const size_t best =
            static_cast<size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        correct += clf.config.labels[best] == s.label;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.samples.size());
}

Classifier train_offline_classifier(const Dataset& data, ClassifierConfig cfg,
                                    const ClassifierTrainOptions& opt) {
    if (data.samples.empty()) throwf("train_offline_classifier: empty dataset");
    cfg.image_side = data.side;
    cfg.labels = data.label_set();
    if (cfg.labels.size() < 2)
        throwf("train_offline_classifier: need >= 2 categories, got %zu", cfg.labels.size());
    Classifier clf(cfg, opt.seed);

    std::map<std::string, int> label_index;
    for (size_t i = 0; i < cfg.labels.size(); ++i) label_index[cfg.labels[i]] = static_cast<int>(i);

    Adam<float> adam(opt.lr);
    Rng shuffle_rng(opt.seed ^ 0x5ca1ab1eULL);
    Rng dropout_rng(opt.seed ^ 0xd20b0a7ULL);
    std::vector<size_t> order(data.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    int64_t step = 0;
    bool stop = false;
    auto window_check = [&]() {
        if (!opt.heldout || opt.stop_acc_min < 0) return false;
        const double acc = classifier_accuracy(clf, *opt.heldout);
        return acc >= opt.stop_acc_min;
    };
    for (int epoch = 1; epoch <= opt.epochs && !stop; ++epoch) {
        shuffle_rng.shuffle(order);
        for (size_t start = 0; start < order.size() && !stop;
             start += static_cast<size_t>(opt.batch_size)) {
            const size_t n = std::min<size_t>(static_cast<size_t>(opt.batch_size),
                                              order.size() - start);
            clf.params.zero_grads();
            const float inv_n = 1.0f / static_cast<float>(n);
            for (size_t i = 0; i < n; ++i) {
                const PreparedSample& s = data.samples[order[start + i]];
                Graph<float> g;
                GraphBinding<float> bind(g, clf.params);
                const Var logits = classifier_logits(clf, g, bind, s.image, true, &dropout_rng);
                const Var logp = g.log_softmax(logits);
                Tensor<float> onehot({static_cast<int>(cfg.labels.size())}, 0.0f);
                onehot[label_index.at(s.label)] = 1.0f;
                const Var loss = g.neg(g.dot_const(logp, std::move(onehot)));
                if (!std::isfinite(g.val(loss)[0]))
                    throwf("classifier: non-finite loss (label %s)", s.label.c_str());
                g.backward(loss);
                bind.accumulate_grads(inv_n);
            }
            adam.step(clf.params);
            ++step;
            clf.step_count = step;
            if (opt.check_every_steps > 0 && step % opt.check_every_steps == 0 && window_check())
                stop = true;
        }
        if (!stop && opt.check_every_steps == 0 && window_check()) stop = true;
    }
    return clf;
}

ScoreFile scores_from_classifier(const Classifier& clf, const std::vector<BinaryImage>& images,
                                 const std::vector<std::string>& ids) {
    if (images.size() != ids.size()) throwf("scores_from_classifier: ids/images length mismatch");
    ScoreFile out;
    for (size_t i = 0; i < images.size(); ++i) {
        const std::vector<double> probs = classify_one(clf, images[i]);
        LabelScores ls;
        for (size_t k = 0; k < clf.config.labels.size(); ++k) ls[clf.config.labels[k]] = probs[k];
        out[ids[i]] = std::move(ls);
    }
    return out;
}

void save_classifier(const Classifier& clf, const std::string& path) {
    CheckpointBlob blob;
    json meta{{"kind", "classifier"},
              {"image_side", clf.config.image_side},
              {"conv_depths", clf.config.conv_depths},
              {"fc_size", clf.config.fc_size},
              {"dropout", clf.config.dropout},
              {"labels", clf.config.labels},
              {"step_count", clf.step_count}};
    blob.config_json = meta.dump();
    for (const auto& p : clf.params) blob.tensors.emplace_back(p.name, p.value);
    write_checkpoint_blob(blob, path);
}

Classifier load_classifier(const std::string& path) {
    const CheckpointBlob blob = read_checkpoint_blob(path);
    json meta = json::parse(blob.config_json, nullptr, false);
    if (meta.is_discarded() || !meta.contains("kind"))
        throwf("%s: malformed checkpoint config", path.c_str());
    if (meta.at("kind").get<std::string>() != "classifier")
        throwf("%s: checkpoint kind is %s, expected classifier", path.c_str(),
               meta.at("kind").get<std::string>().c_str());
    ClassifierConfig cfg;
    cfg.image_side = meta.at("image_side").get<int>();
    const auto depths = meta.at("conv_depths").get<std::vector<int>>();
    if (depths.size() != 4) throwf("%s: conv_depths must have 4 entries", path.c_str());
    std::copy(depths.begin(), depths.end(), cfg.conv_depths.begin());
    cfg.fc_size = meta.at("fc_size").get<int>();
    cfg.dropout = meta.at("dropout").get<double>();
    cfg.labels = meta.at("labels").get<std::vector<std::string>>();
    Classifier clf(cfg, 0);
    clf.step_count = meta.at("step_count").get<int64_t>();
    std::set<std::string> loaded;
    for (const auto& [name, tensor] : blob.tensors) {
        Param<float>* p = clf.params.find(name);
        if (!p) throwf("%s: unexpected tensor %s", path.c_str(), name.c_str());
        if (p->value.shape != tensor.shape)
            throwf("%s: tensor %s has shape %s but config implies %s", path.c_str(), name.c_str(),
                   shape_str(tensor.shape).c_str(), shape_str(p->value.shape).c_str());
        p->value = tensor;
        loaded.insert(name);
    }
    for (const auto& p : clf.params) {
        if (!loaded.count(p.name)) throwf("%s: missing tensor %s", path.c_str(), p.name.c_str());
    }
    return clf;
}

}  // namespace otrec
