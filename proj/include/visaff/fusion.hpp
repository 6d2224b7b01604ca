#pragma once

#include "visaff/numcore.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace visaff::fusion {

enum class RetrievalMode { causal_prefix, current_only };

std::string to_string(RetrievalMode m);
RetrievalMode retrieval_mode_from_string(const std::string& s);

struct FusionConfig {
    std::size_t num_classes = 4;
    std::size_t visual_dim = 64;
    std::size_t text_dim = 48;
    std::size_t audio_dim = 48;
    std::size_t hidden_dim = 128;
    std::size_t proj_dim = 64;
    // c is a constant during gate backpropagation; aux params learn via L_aux only.
    bool stop_grad_reliability = true;
    RetrievalMode retrieval_mode = RetrievalMode::causal_prefix;
    bool use_text_reference = true;
    bool use_audio_reference = true;
    // Forces c to a fixed value (gate-off ablation uses 1.0).
    std::optional<double> force_reliability;

    std::size_t active_externals() const {
        return (use_text_reference ? 1u : 0u) + (use_audio_reference ? 1u : 0u);
    }
};

// Aligned per-conversation feature matrices, one row per utterance.
struct ConvFeatures {
    std::string conv_id;
    num::Tensor visual; // [n, visual_dim]
    num::Tensor text;   // [n, text_dim]
    num::Tensor audio;  // [n, audio_dim]
    std::vector<std::optional<int>> labels;
    std::vector<bool> visual_corrupted;

    std::size_t length() const { return visual.rows; }
};

struct GateTrace {
    std::string conv_id;
    std::size_t index = 0;
    std::optional<int> label;
    bool corrupted = false;
    double reliability = 0.0; // c_i
    std::vector<double> aux_logits;
    std::vector<double> logits;    // o_i
    std::vector<double> logits_c0; // same model with c forced to 0
    int prediction = 0;
    int visual_prediction = 0;
    std::vector<double> delta;
    std::vector<double> h_star;
    std::vector<double> retrieved_text;
    std::vector<double> retrieved_audio;
};

struct LinearVars {
    num::Var w;
    num::Var b;
};

num::Var linear(const num::Var& x, const LinearVars& layer);

// ---- the individual head operations ----

// One layer of single-head causally masked self-attention plus a residual
// connection over the projected inputs; h_i depends only on rows 0..i.
num::Var encode_context(const num::Var& projected, const LinearVars& q, const LinearVars& k,
                        const LinearVars& v);

// Visual-query cross-attention over the causal slice of an external modality.
// `attention_out`, when given, receives the softmax weights (non-negative,
// summing to 1).
num::Var retrieve_reference(const num::Var& query_state, const num::Var& key_states,
                            const LinearVars& q, const LinearVars& k, const LinearVars& v,
                            std::vector<double>* attention_out = nullptr);

// Delta = MLP([h~_t - h_v ; h~_a - h_v]); two layers with tanh in between.
num::Var residual_complement(const num::Var& h_v, const std::vector<num::Var>& retrieved,
                             const LinearVars& l1, const LinearVars& l2);

struct ReliabilityResult {
    double reliability = 0.0; // max softmax probability, in [1/K, 1]
    std::vector<double> probabilities;
};

ReliabilityResult compute_reliability(std::span<const double> aux_logits_row);

// h_v* = h_v + (1 - c) * Delta, elementwise; c must lie in [0, 1].
std::vector<double> complement_visual(std::span<const double> h_v, std::span<const double> delta,
                                      double c);

num::Var classify(const std::vector<num::Var>& parts, const LinearVars& l1, const LinearVars& l2);

// ---- the assembled model ----

struct ForwardOptions {
    bool trainable = true;
    bool build_projections = true;
    // Overrides config.force_reliability for this pass (the theory module's
    // externally complemented predictor forces 0).
    std::optional<double> force_reliability_override;
};

struct ConvGraph {
    num::Var enc_v, enc_t, enc_a; // [n, H]; enc_t/enc_a only when active
    num::Var ret_t, ret_a;        // [n, H]
    num::Var delta;               // [n, H]; invalid when no external modality is active
    num::Var h_star;              // [n, H]
    num::Var aux_logits;          // [n, K]
    num::Var logits;              // [n, K]
    num::Var z_v, z_t, z_a;       // [n, proj_dim] contrastive projections
    std::vector<double> reliability;
    std::vector<num::Var> reliability_vars; // populated when c is differentiable
};

class FusionModel {
public:
    explicit FusionModel(FusionConfig cfg);

    void init_params(std::uint64_t seed); // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    num::ParamStore& params() { return params_; }
    const num::ParamStore& params() const { return params_; }
    const FusionConfig& config() const { return cfg_; }

    ConvGraph build_graph(num::Tape& tape, num::ParamBinding& binding, const ConvFeatures& feats,
                          const ForwardOptions& opts) const;

    // Evaluation pass: GateTraces for one conversation, including the
    // c-forced-to-0 logits needed by the theory module.
    std::vector<GateTrace> run_conversation(const ConvFeatures& feats) const;

private:
    FusionConfig cfg_;
    num::ParamStore params_;
};

} // namespace visaff::fusion
