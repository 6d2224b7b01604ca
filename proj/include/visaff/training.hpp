#pragma once

#include "visaff/datamodel.hpp"
#include "visaff/fusion.hpp"
#include "visaff/numcore.hpp"
#include "visaff/providers.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace visaff::train {

struct TrainConfig {
    double lambda_cl = 0.1;
    double lambda_aux = 0.5;
    double tau_infonce = 0.07;
    double tau_supcon = 0.1;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 8; // whole conversations
    std::size_t epochs = 30;
    std::size_t patience = 10;
    std::uint64_t seed = 42;
    std::size_t hidden_dim = 128;
    std::size_t proj_dim = 64;
    bool stop_grad_reliability = true;
    fusion::RetrievalMode retrieval_mode = fusion::RetrievalMode::causal_prefix;
    bool use_text_reference = true;
    bool use_audio_reference = true;
    bool use_infonce = true;
    bool use_supcon = true;
    std::optional<double> force_reliability;

    // Flat JSON object; every key optional, unknown keys are errors.
    static TrainConfig from_json(const std::string& json_text);
    std::string to_json() const;
    bool same_except_seed(const TrainConfig& other) const;
};

// ---- contrastive losses ----

// Symmetric InfoNCE over cosine similarities of aligned (same-utterance)
// pairs; z_v and z_m must be L2-normalized rows, batch size >= 2.
num::Var loss_infonce(const num::Var& z_v, const num::Var& z_m, double tau);

struct SupConResult {
    num::Var loss;
    bool no_anchors = false; // every label unique: defined-empty, loss 0
};

SupConResult loss_supcon(const num::Var& z, const std::vector<int>& labels, double tau);

struct LossBreakdown {
    double total = 0.0;
    double cls = 0.0;
    double cl = 0.0;
    double aux = 0.0;
};

// L = L_cls + lambda_cl * L_cl + lambda_aux * L_aux over one batch of
// conversation graphs. Labels must be present for every utterance.
num::Var loss_total(num::Tape& tape, const std::vector<fusion::ConvGraph>& graphs,
                    const std::vector<std::vector<int>>& labels, const TrainConfig& config,
                    LossBreakdown* breakdown = nullptr);

// ---- metrics ----

struct MetricsReport {
    double accuracy = 0.0;
    double weighted_f1 = 0.0;
    std::map<int, double> per_class_f1;
    std::map<int, std::size_t> support;
    std::vector<std::vector<std::size_t>> confusion; // [true][pred]

    std::string to_json() const;
};

double weighted_f1(std::span<const int> preds, std::span<const int> labels, std::size_t k);
MetricsReport compute_metrics(std::span<const int> preds, std::span<const int> labels,
                              std::size_t k);

// ---- data plumbing ----

// Upcasts cached f32 features to f64 matrices; missing keys are listed in the
// error message.
fusion::ConvFeatures build_conv_features(const data::Conversation& conv,
                                         const providers::FeatureSource& features,
                                         bool require_labels);

// ---- training ----

struct TrainLogEntry {
    std::size_t epoch = 0;
    LossBreakdown loss;
    double val_wf1 = 0.0;
};

struct TrainResult {
    fusion::FusionConfig fusion_config;
    num::ParamStore params; // best-validation parameters
    std::vector<TrainLogEntry> log;
    double best_val_wf1 = 0.0;
    std::size_t best_epoch = 0;
    std::string log_jsonl; // one record per epoch, byte-stable
};

// Algorithm: frozen cached features only; Adam on the head parameters;
// early stopping on validation W-F1; deterministic given (config, caches).
TrainResult train(const TrainConfig& config, const data::Dataset& dataset,
                  const providers::FeatureSource& features);

fusion::FusionModel model_from_result(const TrainResult& result);

// ---- evaluation ----

struct EvalResult {
    MetricsReport metrics;
    std::vector<fusion::GateTrace> traces;
};

EvalResult evaluate(const fusion::FusionModel& model, const data::Dataset& dataset,
                    data::Split split, const providers::FeatureSource& features);

std::string traces_to_jsonl(std::span<const fusion::GateTrace> traces);
std::vector<fusion::GateTrace> traces_from_jsonl(const std::string& text);

// ---- confidence-binned gain analysis ----

struct BinRow {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    double wf1_visual = 0.0;
    double wf1_full = 0.0;
    double gain = 0.0;
};

struct BinReport {
    std::vector<double> edges;
    std::vector<BinRow> bins;

    std::string to_json() const;
    std::string to_csv() const; // bin_lo,bin_hi,count,wf1_visual,wf1_full,gain
};

// Samples are assigned to [edge_j, edge_{j+1}); the last bin is closed.
BinReport bin_by_confidence(std::span<const fusion::GateTrace> traces,
                            std::span<const double> edges);

// ---- seed averaging ----

struct AggregateStat {
    double mean = 0.0;
    double stddev = 0.0; // sample standard deviation
};

struct AggregateReport {
    std::size_t runs = 0;
    std::map<std::string, AggregateStat> metrics;

    std::string to_json() const;
};

AggregateReport seed_average(std::span<const TrainConfig> configs,
                             std::span<const MetricsReport> reports);

// ---- optimizer ----

class Adam {
public:
    Adam(num::ParamStore& params, double lr, double beta1, double beta2, double eps);
    void step(); // consumes Parameter::grad

private:
    num::ParamStore* params_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

} // namespace visaff::train
