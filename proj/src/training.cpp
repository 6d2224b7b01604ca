#include "visaff/training.hpp"

#include "visaff/errors.hpp"
#include "visaff/rng.hpp"
#include "visaff/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

using nlohmann::json;

namespace visaff::train {

using fusion::ConvFeatures;
using fusion::ConvGraph;
using fusion::FusionModel;
using fusion::GateTrace;
using num::Tape;
using num::Tensor;
using num::Var;

TrainConfig TrainConfig::from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("config: expected a JSON object");

    TrainConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        const json& v = it.value();
        if (key == "lambda_cl") c.lambda_cl = v.get<double>();
        else if (key == "lambda_aux") c.lambda_aux = v.get<double>();
        else if (key == "tau_infonce") c.tau_infonce = v.get<double>();
        else if (key == "tau_supcon") c.tau_supcon = v.get<double>();
        else if (key == "learning_rate") c.learning_rate = v.get<double>();
        else if (key == "adam_beta1") c.adam_beta1 = v.get<double>();
        else if (key == "adam_beta2") c.adam_beta2 = v.get<double>();
        else if (key == "adam_eps") c.adam_eps = v.get<double>();
        else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
        else if (key == "epochs") c.epochs = v.get<std::size_t>();
        else if (key == "patience") c.patience = v.get<std::size_t>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "hidden_dim") c.hidden_dim = v.get<std::size_t>();
        else if (key == "proj_dim") c.proj_dim = v.get<std::size_t>();
        else if (key == "stop_grad_reliability") c.stop_grad_reliability = v.get<bool>();
        else if (key == "retrieval_mode") c.retrieval_mode = fusion::retrieval_mode_from_string(v.get<std::string>());
        else if (key == "use_text_reference") c.use_text_reference = v.get<bool>();
        else if (key == "use_audio_reference") c.use_audio_reference = v.get<bool>();
        else if (key == "use_infonce") c.use_infonce = v.get<bool>();
        else if (key == "use_supcon") c.use_supcon = v.get<bool>();
        else if (key == "force_reliability") {
            if (v.is_null()) c.force_reliability.reset();
            else c.force_reliability = v.get<double>();
        } else {
            throw ValidationError("config: unknown key \"" + key + "\"");
        }
    }
    if (c.lambda_cl < 0.0 || c.lambda_aux < 0.0) {
        throw ValidationError("config: lambda weights must be non-negative");
    }
    if (!(c.tau_infonce > 0.0) || !(c.tau_supcon > 0.0)) {
        throw ValidationError("config: temperatures must be positive");
    }
    if (c.batch_size == 0) throw ValidationError("config: batch_size must be positive");
    return c;
}

std::string TrainConfig::to_json() const {
    json j;
    j["lambda_cl"] = lambda_cl;
    j["lambda_aux"] = lambda_aux;
    j["tau_infonce"] = tau_infonce;
    j["tau_supcon"] = tau_supcon;
    j["learning_rate"] = learning_rate;
    j["adam_beta1"] = adam_beta1;
    j["adam_beta2"] = adam_beta2;
    j["adam_eps"] = adam_eps;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["patience"] = patience;
    j["seed"] = seed;
    j["hidden_dim"] = hidden_dim;
    j["proj_dim"] = proj_dim;
    j["stop_grad_reliability"] = stop_grad_reliability;
    j["retrieval_mode"] = fusion::to_string(retrieval_mode);
    j["use_text_reference"] = use_text_reference;
    j["use_audio_reference"] = use_audio_reference;
    j["use_infonce"] = use_infonce;
    j["use_supcon"] = use_supcon;
    j["force_reliability"] = force_reliability ? json(*force_reliability) : json(nullptr);
    return j.dump();
}

bool TrainConfig::same_except_seed(const TrainConfig& other) const {
    TrainConfig a = *this;
    TrainConfig b = other;
    a.seed = 0;
    b.seed = 0;
    return a.to_json() == b.to_json();
}

Var loss_infonce(const Var& z_v, const Var& z_m, double tau) {
    const std::size_t b = z_v.value().rows;
    if (b < 2) throw ValidationError("loss_infonce: batch size must be >= 2");
    if (z_m.value().rows != b) throw ValidationError("loss_infonce: batch size mismatch");
    if (!(tau > 0.0)) throw ValidationError("loss_infonce: temperature must be positive");

    std::vector<int> diagonal(b);
    std::iota(diagonal.begin(), diagonal.end(), 0);

    Var sim_vm = num::scale(num::matmul_nt(z_v, z_m), 1.0 / tau);
    Var sim_mv = num::scale(num::matmul_nt(z_m, z_v), 1.0 / tau);
    Var fwd = num::cross_entropy_mean(sim_vm, diagonal);
    Var bwd = num::cross_entropy_mean(sim_mv, diagonal);
    return num::scale(num::add(fwd, bwd), 0.5);
}

SupConResult loss_supcon(const Var& z, const std::vector<int>& labels, double tau) {
    const std::size_t b = z.value().rows;
    if (b < 2) throw ValidationError("loss_supcon: batch size must be >= 2");
    if (labels.size() != b) throw ValidationError("loss_supcon: label count mismatch");
    if (!(tau > 0.0)) throw ValidationError("loss_supcon: temperature must be positive");

    Tensor non_self(b, b);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) non_self.at(i, j) = i == j ? 0.0 : 1.0;

    // positive-pair weights: W[a][p] = 1/|P(a)| for same-label p != a
    Tensor weights(b, b);
    Tensor anchor_rows(b, 1);
    std::size_t anchors = 0;
    for (std::size_t a = 0; a < b; ++a) {
        std::size_t positives = 0;
        for (std::size_t p = 0; p < b; ++p) {
            if (p != a && labels[p] == labels[a]) ++positives;
        }
        if (positives == 0) continue;
        ++anchors;
        anchor_rows.at(a, 0) = 1.0;
        for (std::size_t p = 0; p < b; ++p) {
            if (p != a && labels[p] == labels[a]) {
                weights.at(a, p) = 1.0 / static_cast<double>(positives);
            }
        }
    }

    SupConResult result;
    if (anchors == 0) {
        result.loss = z.tape()->constant(Tensor::scalar(0.0));
        result.no_anchors = true;
        return result;
    }

    Var sim = num::scale(num::matmul_nt(z, z), 1.0 / tau);
    Var lse = num::logsumexp_rows(sim, &non_self); // [b, 1]
    Var pulled = num::weighted_sum(sim, weights);
    Var pushed = num::weighted_sum(lse, anchor_rows);
    result.loss = num::scale(num::sub(pushed, pulled), 1.0 / static_cast<double>(anchors));
    return result;
}

Var loss_total(Tape& tape, const std::vector<ConvGraph>& graphs,
               const std::vector<std::vector<int>>& labels, const TrainConfig& config,
               LossBreakdown* breakdown) {
    if (graphs.empty()) throw ValidationError("loss_total: empty batch");
    if (labels.size() != graphs.size()) throw ValidationError("loss_total: label batch mismatch");

    std::vector<Var> logit_parts, aux_parts, zv_parts, zt_parts, za_parts;
    std::vector<int> flat_labels;
    for (std::size_t g = 0; g < graphs.size(); ++g) {
        logit_parts.push_back(graphs[g].logits);
        aux_parts.push_back(graphs[g].aux_logits);
        if (graphs[g].z_v.valid()) zv_parts.push_back(graphs[g].z_v);
        if (graphs[g].z_t.valid()) zt_parts.push_back(graphs[g].z_t);
        if (graphs[g].z_a.valid()) za_parts.push_back(graphs[g].z_a);
        flat_labels.insert(flat_labels.end(), labels[g].begin(), labels[g].end());
    }

    Var all_logits = num::concat_rows(logit_parts);
    Var all_aux = num::concat_rows(aux_parts);
    if (flat_labels.size() != all_logits.value().rows) {
        throw ValidationError("loss_total: utterance/label count mismatch");
    }

    Var cls = num::cross_entropy_mean(all_logits, flat_labels);
    Var aux = num::cross_entropy_mean(all_aux, flat_labels);

    const std::size_t batch_utts = flat_labels.size();
    std::vector<Var> cl_terms;
    if (config.lambda_cl > 0.0 && batch_utts >= 2 && !zv_parts.empty()) {
        Var z_v = num::concat_rows(zv_parts);
        if (config.use_infonce) {
            std::vector<Var> nce;
            if (!zt_parts.empty()) nce.push_back(loss_infonce(z_v, num::concat_rows(zt_parts), config.tau_infonce));
            if (!za_parts.empty()) nce.push_back(loss_infonce(z_v, num::concat_rows(za_parts), config.tau_infonce));
            if (!nce.empty()) {
                Var acc = nce[0];
                for (std::size_t i = 1; i < nce.size(); ++i) acc = num::add(acc, nce[i]);
                cl_terms.push_back(num::scale(acc, 1.0 / static_cast<double>(nce.size())));
            }
        }
        if (config.use_supcon) {
            std::vector<Var> sup;
            sup.push_back(loss_supcon(z_v, flat_labels, config.tau_supcon).loss);
            if (!zt_parts.empty()) {
                sup.push_back(loss_supcon(num::concat_rows(zt_parts), flat_labels, config.tau_supcon).loss);
            }
            if (!za_parts.empty()) {
                sup.push_back(loss_supcon(num::concat_rows(za_parts), flat_labels, config.tau_supcon).loss);
            }
            Var acc = sup[0];
            for (std::size_t i = 1; i < sup.size(); ++i) acc = num::add(acc, sup[i]);
            cl_terms.push_back(num::scale(acc, 1.0 / static_cast<double>(sup.size())));
        }
    }

    Var cl = cl_terms.empty() ? tape.constant(Tensor::scalar(0.0)) : cl_terms[0];
    for (std::size_t i = 1; i < cl_terms.size(); ++i) cl = num::add(cl, cl_terms[i]);

    Var total = num::add(num::add(cls, num::scale(cl, config.lambda_cl)),
                         num::scale(aux, config.lambda_aux));
    if (breakdown) {
        breakdown->cls = cls.value().item();
        breakdown->cl = cl.value().item();
        breakdown->aux = aux.value().item();
        breakdown->total = total.value().item();
    }
    return total;
}

double weighted_f1(std::span<const int> preds, std::span<const int> labels, std::size_t k) {
    MetricsReport report = compute_metrics(preds, labels, k);
    return report.weighted_f1;
}

MetricsReport compute_metrics(std::span<const int> preds, std::span<const int> labels,
                              std::size_t k) {
    if (preds.size() != labels.size()) throw ValidationError("metrics: size mismatch");
    if (preds.empty()) throw ValidationError("metrics: empty input");

    MetricsReport report;
    report.confusion.assign(k, std::vector<std::size_t>(k, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int y = labels[i];
        const int p = preds[i];
        if (y < 0 || static_cast<std::size_t>(y) >= k || p < 0 || static_cast<std::size_t>(p) >= k) {
            throw ValidationError("metrics: label or prediction out of range");
        }
        report.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)]++;
        if (y == p) ++correct;
    }
    report.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());

    double wf1 = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t tp = report.confusion[c][c];
        std::size_t fp = 0, fn = 0, supp = 0;
        for (std::size_t o = 0; o < k; ++o) {
            supp += report.confusion[c][o];
            if (o != c) {
                fn += report.confusion[c][o];
                fp += report.confusion[o][c];
            }
        }
        const double precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
        const double f1 =
            (precision + recall) == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
        report.per_class_f1[static_cast<int>(c)] = f1;
        report.support[static_cast<int>(c)] = supp;
        wf1 += f1 * static_cast<double>(supp) / static_cast<double>(preds.size());
    }
    report.weighted_f1 = wf1;
    return report;
}

std::string MetricsReport::to_json() const {
    json j;
    j["accuracy"] = accuracy;
    j["weighted_f1"] = weighted_f1;
    json f1 = json::object();
    json supp = json::object();
    for (const auto& [c, v] : per_class_f1) f1[std::to_string(c)] = v;
    for (const auto& [c, v] : support) supp[std::to_string(c)] = v;
    j["per_class_f1"] = f1;
    j["support"] = supp;
    j["confusion"] = confusion;
    return j.dump();
}

ConvFeatures build_conv_features(const data::Conversation& conv,
                                 const providers::FeatureSource& features, bool require_labels) {
    const std::size_t n = conv.utterances.size();
    ConvFeatures out;
    out.conv_id = conv.conv_id;
    out.labels.resize(n);
    out.visual_corrupted.assign(n, false);

    std::vector<std::string> missing;
    auto fetch = [&](providers::Modality m) {
        Tensor matrix;
        for (std::size_t i = 0; i < n; ++i) {
            const providers::FeatureKey key{conv.conv_id, i};
            const providers::FeatureRecord* rec = features.find(m, key);
            if (!rec) {
                missing.push_back(providers::to_string(m) + ":" + key.serialized());
                continue;
            }
            if (matrix.rows == 0) matrix = Tensor(n, rec->dim());
            for (std::size_t j = 0; j < rec->dim(); ++j) {
                matrix.at(i, j) = static_cast<double>(rec->values[j]);
            }
            if (m == providers::Modality::visual) out.visual_corrupted[i] = rec->corrupted;
        }
        return matrix;
    };

    out.visual = fetch(providers::Modality::visual);
    out.text = fetch(providers::Modality::text);
    out.audio = fetch(providers::Modality::audio);
    if (!missing.empty()) {
        std::string joined;
        for (const auto& m : missing) joined += (joined.empty() ? "" : ", ") + m;
        throw ValidationError("missing cached features: " + joined);
    }

    for (std::size_t i = 0; i < n; ++i) {
        out.labels[i] = conv.utterances[i].label;
        if (require_labels && !out.labels[i]) {
            throw ValidationError("utterance without label in conversation " + conv.conv_id);
        }
    }
    return out;
}

Adam::Adam(num::ParamStore& params, double lr, double beta1, double beta2, double eps)
    : params_(&params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params.count());
    v_.resize(params.count());
    for (std::size_t i = 0; i < params.count(); ++i) {
        m_[i].assign(params.at(i).value.size(), 0.0);
        v_[i].assign(params.at(i).value.size(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_->count(); ++i) {
        num::Parameter& p = params_->at(i);
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad.data[j];
            m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
            v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            p.value.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

namespace {

fusion::FusionConfig make_fusion_config(const TrainConfig& config, std::size_t num_classes,
                                        std::size_t dv, std::size_t dt, std::size_t da) {
    fusion::FusionConfig fc;
    fc.num_classes = num_classes;
    fc.visual_dim = dv;
    fc.text_dim = dt;
    fc.audio_dim = da;
    fc.hidden_dim = config.hidden_dim;
    fc.proj_dim = config.proj_dim;
    fc.stop_grad_reliability = config.stop_grad_reliability;
    fc.retrieval_mode = config.retrieval_mode;
    fc.use_text_reference = config.use_text_reference;
    fc.use_audio_reference = config.use_audio_reference;
    fc.force_reliability = config.force_reliability;
    return fc;
}

std::string log_entry_json(const TrainLogEntry& e) {
    json j;
    j["epoch"] = e.epoch;
    json loss;
    loss["total"] = e.loss.total;
    loss["cls"] = e.loss.cls;
    loss["cl"] = e.loss.cl;
    loss["aux"] = e.loss.aux;
    j["loss"] = loss;
    j["val_wf1"] = e.val_wf1;
    return j.dump();
}

double validation_wf1(const FusionModel& model, const std::vector<ConvFeatures>& val_feats,
                      std::size_t k) {
    std::vector<int> preds, labels;
    for (const auto& feats : val_feats) {
        const auto traces = model.run_conversation(feats);
        for (const auto& tr : traces) {
            preds.push_back(tr.prediction);
            labels.push_back(*tr.label);
        }
    }
    return weighted_f1(preds, labels, k);
}

} // namespace

TrainResult train(const TrainConfig& config, const data::Dataset& dataset,
                  const providers::FeatureSource& features) {
    dataset.validate();

    const auto train_convs = dataset.split_conversations(data::Split::train);
    const auto val_convs = dataset.split_conversations(data::Split::val);
    if (train_convs.empty()) throw ValidationError("train: no training conversations");
    if (val_convs.empty()) throw ValidationError("train: no validation conversations");

    std::vector<ConvFeatures> train_feats, val_feats;
    for (const auto* c : train_convs) train_feats.push_back(build_conv_features(*c, features, true));
    for (const auto* c : val_convs) val_feats.push_back(build_conv_features(*c, features, true));

    const std::size_t k = dataset.num_classes();
    fusion::FusionConfig fc =
        make_fusion_config(config, k, train_feats[0].visual.cols, train_feats[0].text.cols,
                           train_feats[0].audio.cols);

    FusionModel model(fc);
    model.init_params(config.seed);
    Adam optimizer(model.params(), config.learning_rate, config.adam_beta1, config.adam_beta2,
                   config.adam_eps);

    TrainResult result;
    result.fusion_config = fc;

    // best-so-far snapshot; epochs == 0 leaves the initialization in place
    auto snapshot = [&]() {
        num::ParamStore copy;
        for (std::size_t i = 0; i < model.params().count(); ++i) {
            copy.add(model.params().at(i).name, model.params().at(i).value);
        }
        return copy;
    };
    result.params = snapshot();

    double best = -1.0;
    std::size_t since_best = 0;
    std::ostringstream log_stream;

    std::vector<std::size_t> order(train_feats.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        auto rng = make_rng(config.seed ^ mix64(epoch + 1), "batch");
        // Fisher-Yates; std::shuffle is implementation-defined
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = rng() % i;
            std::swap(order[i - 1], order[j]);
        }

        double epoch_total = 0.0, epoch_cls = 0.0, epoch_cl = 0.0, epoch_aux = 0.0;
        std::size_t epoch_utts = 0;

        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            Tape tape;
            num::ParamBinding binding(model.params());
            std::vector<ConvGraph> graphs;
            std::vector<std::vector<int>> labels;
            std::size_t batch_utts = 0;
            fusion::ForwardOptions opts;
            opts.trainable = true;
            opts.build_projections = config.lambda_cl > 0.0;
            for (std::size_t b = start; b < end; ++b) {
                const ConvFeatures& feats = train_feats[order[b]];
                graphs.push_back(model.build_graph(tape, binding, feats, opts));
                std::vector<int> conv_labels;
                for (const auto& l : feats.labels) conv_labels.push_back(*l);
                labels.push_back(std::move(conv_labels));
                batch_utts += feats.length();
            }
            LossBreakdown bd;
            Var total = loss_total(tape, graphs, labels, config, &bd);
            if (!std::isfinite(bd.total)) {
                throw ValidationError("training diverged (non-finite loss) at epoch " +
                                      std::to_string(epoch) + ", batch starting at conversation " +
                                      std::to_string(start));
            }
            model.params().zero_grad();
            tape.backward(total);
            binding.accumulate_grads(tape);
            optimizer.step();

            const auto w = static_cast<double>(batch_utts);
            epoch_total += bd.total * w;
            epoch_cls += bd.cls * w;
            epoch_cl += bd.cl * w;
            epoch_aux += bd.aux * w;
            epoch_utts += batch_utts;
        }

        TrainLogEntry entry;
        entry.epoch = epoch;
        const auto w = static_cast<double>(epoch_utts);
        entry.loss = {epoch_total / w, epoch_cls / w, epoch_cl / w, epoch_aux / w};
        entry.val_wf1 = validation_wf1(model, val_feats, k);
        result.log.push_back(entry);
        log_stream << log_entry_json(entry) << "\n";

        if (entry.val_wf1 > best) {
            best = entry.val_wf1;
            result.best_val_wf1 = best;
            result.best_epoch = epoch;
            result.params = snapshot();
            since_best = 0;
        } else {
            ++since_best;
            if (since_best >= config.patience) break;
        }
    }

    if (config.epochs > 0 && best < 0.0) {
        result.best_val_wf1 = 0.0;
    }
    result.log_jsonl = log_stream.str();
    return result;
}

fusion::FusionModel model_from_result(const TrainResult& result) {
    FusionModel model(result.fusion_config);
    for (std::size_t i = 0; i < result.params.count(); ++i) {
        model.params().get(result.params.at(i).name).value = result.params.at(i).value;
    }
    return model;
}

EvalResult evaluate(const FusionModel& model, const data::Dataset& dataset, data::Split split,
                    const providers::FeatureSource& features) {
    const auto convs = dataset.split_conversations(split);
    if (convs.empty()) throw ValidationError("evaluate: split has no conversations");

    EvalResult result;
    std::vector<int> preds, labels;
    for (const auto* conv : convs) {
        ConvFeatures feats = build_conv_features(*conv, features, false);
        auto traces = model.run_conversation(feats);
        for (auto& tr : traces) {
            if (tr.label) {
                preds.push_back(tr.prediction);
                labels.push_back(*tr.label);
            }
            result.traces.push_back(std::move(tr));
        }
    }
    if (labels.empty()) throw ValidationError("evaluate: split has no labeled utterances");
    result.metrics = compute_metrics(preds, labels, dataset.num_classes());
    return result;
}

std::string traces_to_jsonl(std::span<const GateTrace> traces) {
    std::ostringstream out;
    for (const auto& tr : traces) {
        json j;
        j["conv_id"] = tr.conv_id;
        j["index"] = tr.index;
        j["label"] = tr.label ? json(*tr.label) : json(nullptr);
        j["corrupted"] = tr.corrupted;
        j["c"] = tr.reliability;
        j["aux_logits"] = tr.aux_logits;
        j["logits"] = tr.logits;
        j["c0_logits"] = tr.logits_c0;
        j["prediction"] = tr.prediction;
        j["visual_prediction"] = tr.visual_prediction;
        out << j.dump() << "\n";
    }
    return out.str();
}

std::vector<GateTrace> traces_from_jsonl(const std::string& text) {
    std::vector<GateTrace> traces;
    std::size_t line_no = 0;
    for (const std::string& line : split_lines(text)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError("traces: malformed line " + std::to_string(line_no) + ": " +
                                  e.what());
        }
        GateTrace tr;
        tr.conv_id = j.at("conv_id").get<std::string>();
        tr.index = j.at("index").get<std::size_t>();
        if (!j.at("label").is_null()) tr.label = j.at("label").get<int>();
        tr.corrupted = j.value("corrupted", false);
        tr.reliability = j.at("c").get<double>();
        tr.aux_logits = j.at("aux_logits").get<std::vector<double>>();
        tr.logits = j.at("logits").get<std::vector<double>>();
        tr.logits_c0 = j.at("c0_logits").get<std::vector<double>>();
        tr.prediction = j.at("prediction").get<int>();
        tr.visual_prediction = j.at("visual_prediction").get<int>();
        traces.push_back(std::move(tr));
    }
    return traces;
}

BinReport bin_by_confidence(std::span<const GateTrace> traces, std::span<const double> edges) {
    if (edges.size() < 2) throw ValidationError("bins: need at least two edges");
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (!(edges[i] > edges[i - 1])) throw ValidationError("bins: edges must be strictly increasing");
    }
    if (edges.front() != 0.0 || edges.back() != 1.0) {
        throw ValidationError("bins: edges must span [0,1]");
    }

    const std::size_t nbins = edges.size() - 1;
    std::vector<std::vector<const GateTrace*>> members(nbins);
    std::size_t k = 0;
    for (const auto& tr : traces) {
        if (!tr.label) throw ValidationError("bins: traces must carry labels");
        k = std::max(k, tr.logits.size());
        std::size_t bin = nbins - 1; // last bin closed
        for (std::size_t b = 0; b + 1 < nbins + 1; ++b) {
            if (tr.reliability >= edges[b] && tr.reliability < edges[b + 1]) {
                bin = b;
                break;
            }
        }
        members[bin].push_back(&tr);
    }

    BinReport report;
    report.edges.assign(edges.begin(), edges.end());
    for (std::size_t b = 0; b < nbins; ++b) {
        BinRow row;
        row.lo = edges[b];
        row.hi = edges[b + 1];
        row.count = members[b].size();
        if (!members[b].empty()) {
            std::vector<int> labels, full, visual;
            for (const GateTrace* tr : members[b]) {
                labels.push_back(*tr->label);
                full.push_back(tr->prediction);
                visual.push_back(tr->visual_prediction);
            }
            row.wf1_full = weighted_f1(full, labels, k);
            row.wf1_visual = weighted_f1(visual, labels, k);
            row.gain = row.wf1_full - row.wf1_visual;
        }
        report.bins.push_back(row);
    }
    return report;
}

std::string BinReport::to_json() const {
    json j;
    j["edges"] = edges;
    json rows = json::array();
    for (const auto& b : bins) {
        json r;
        r["lo"] = b.lo;
        r["hi"] = b.hi;
        r["count"] = b.count;
        r["wf1_visual"] = b.wf1_visual;
        r["wf1_full"] = b.wf1_full;
        r["gain"] = b.gain;
        rows.push_back(r);
    }
    j["bins"] = rows;
    return j.dump();
}

std::string BinReport::to_csv() const {
    std::ostringstream out;
    out << "bin_lo,bin_hi,count,wf1_visual,wf1_full,gain\n";
    for (const auto& b : bins) {
        out << json(b.lo).dump() << "," << json(b.hi).dump() << "," << b.count << ","
            << json(b.wf1_visual).dump() << "," << json(b.wf1_full).dump() << ","
            << json(b.gain).dump() << "\n";
    }
    return out.str();
}

AggregateReport seed_average(std::span<const TrainConfig> configs,
                             std::span<const MetricsReport> reports) {
    if (configs.size() != reports.size() || configs.size() < 2) {
        throw ValidationError("seed_average: need >= 2 aligned runs");
    }
    for (std::size_t i = 1; i < configs.size(); ++i) {
        if (!configs[0].same_except_seed(configs[i])) {
            throw ValidationError("seed_average: configs differ in a non-seed field");
        }
        if (configs[i].seed == configs[0].seed && i != 0) {
            // duplicate seeds are allowed but pointless; not an error
        }
    }

    auto stat_of = [](std::vector<double>& xs) {
        AggregateStat s;
        s.mean = mean_of(xs);
        double acc = 0.0;
        for (double x : xs) acc += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
        return s;
    };

    AggregateReport agg;
    agg.runs = reports.size();
    std::vector<double> accs, wf1s;
    for (const auto& r : reports) {
        accs.push_back(r.accuracy);
        wf1s.push_back(r.weighted_f1);
    }
    agg.metrics["accuracy"] = stat_of(accs);
    agg.metrics["weighted_f1"] = stat_of(wf1s);
    for (const auto& [cls, _] : reports[0].per_class_f1) {
        std::vector<double> vals;
        for (const auto& r : reports) {
            auto it = r.per_class_f1.find(cls);
            vals.push_back(it == r.per_class_f1.end() ? 0.0 : it->second);
        }
        agg.metrics["f1_" + std::to_string(cls)] = stat_of(vals);
    }
    return agg;
}

std::string AggregateReport::to_json() const {
    json j;
    j["runs"] = runs;
    json m = json::object();
    for (const auto& [name, stat] : metrics) {
        json s;
        s["mean"] = stat.mean;
        s["stddev"] = stat.stddev;
        m[name] = s;
    }
    j["metrics"] = m;
    return j.dump();
}

} // namespace visaff::train
