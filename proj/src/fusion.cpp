#include "visaff/fusion.hpp"

#include "visaff/errors.hpp"
#include "visaff/rng.hpp"

#include <cmath>

namespace visaff::fusion {

using num::ParamBinding;
using num::ParamStore;
using num::Tape;
using num::Tensor;
using num::Var;

std::string to_string(RetrievalMode m) {
    return m == RetrievalMode::causal_prefix ? "causal_prefix" : "current_only";
}

RetrievalMode retrieval_mode_from_string(const std::string& s) {
    if (s == "causal_prefix") return RetrievalMode::causal_prefix;
    if (s == "current_only") return RetrievalMode::current_only;
    throw ValidationError("unknown retrieval mode: " + s);
}

Var linear(const Var& x, const LinearVars& layer) {
    return num::add_bias(num::matmul(x, layer.w), layer.b);
}

Var encode_context(const Var& projected, const LinearVars& q, const LinearVars& k,
                   const LinearVars& v) {
    const std::size_t n = projected.value().rows;
    if (n == 0) throw ValidationError("encode_context: empty sequence");
    const std::size_t h = q.w.value().cols;

    Var queries = linear(projected, q);
    Var keys = linear(projected, k);
    Var values = linear(projected, v);

    Var scores = num::scale(num::matmul_nt(queries, keys), 1.0 / std::sqrt(static_cast<double>(h)));
    Tensor causal(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) causal.at(i, j) = 1.0;
    Var weights = num::softmax_rows(scores, &causal);
    return num::add(projected, num::matmul(weights, values));
}

Var retrieve_reference(const Var& query_state, const Var& key_states, const LinearVars& q,
                       const LinearVars& k, const LinearVars& v,
                       std::vector<double>* attention_out) {
    if (key_states.value().rows == 0) throw ValidationError("retrieve_reference: empty key sequence");
    const std::size_t h = q.w.value().cols;

    Var query = linear(query_state, q);                        // [1, H]
    Var keys = linear(key_states, k);                          // [m, H]
    Var values = linear(key_states, v);                        // [m, H]
    Var scores = num::scale(num::matmul_nt(query, keys), 1.0 / std::sqrt(static_cast<double>(h)));
    Var weights = num::softmax_rows(scores);                   // [1, m]
    if (attention_out) *attention_out = weights.value().data;
    return num::matmul(weights, values);                       // [1, H]
}

Var residual_complement(const Var& h_v, const std::vector<Var>& retrieved, const LinearVars& l1,
                        const LinearVars& l2) {
    if (retrieved.empty()) throw ValidationError("residual_complement: no retrieved references");
    std::vector<Var> diffs;
    diffs.reserve(retrieved.size());
    for (const Var& r : retrieved) diffs.push_back(num::sub(r, h_v));
    Var stacked = diffs.size() == 1 ? diffs[0] : num::concat_cols(diffs);
    return linear(num::tanh_op(linear(stacked, l1)), l2);
}

ReliabilityResult compute_reliability(std::span<const double> aux_logits_row) {
    ReliabilityResult out;
    out.probabilities = num::softmax(aux_logits_row);
    out.reliability = out.probabilities[num::argmax_index(out.probabilities)];
    return out;
}

std::vector<double> complement_visual(std::span<const double> h_v, std::span<const double> delta,
                                      double c) {
    if (h_v.size() != delta.size()) throw ValidationError("complement_visual: dim mismatch");
    if (!(c >= 0.0 && c <= 1.0)) throw ValidationError("complement_visual: c out of [0,1]");
    std::vector<double> out(h_v.size());
    for (std::size_t i = 0; i < h_v.size(); ++i) out[i] = h_v[i] + (1.0 - c) * delta[i];
    return out;
}

Var classify(const std::vector<Var>& parts, const LinearVars& l1, const LinearVars& l2) {
    if (parts.empty()) throw ValidationError("classify: no inputs");
    Var cat = parts.size() == 1 ? parts[0] : num::concat_cols(parts);
    return linear(num::tanh_op(linear(cat, l1)), l2);
}

FusionModel::FusionModel(FusionConfig cfg) : cfg_(cfg) {
    if (cfg_.hidden_dim == 0 || cfg_.num_classes < 2) {
        throw ValidationError("fusion config: invalid hidden_dim or num_classes");
    }
    const std::size_t h = cfg_.hidden_dim;
    const std::size_t k = cfg_.num_classes;
    const std::size_t p = cfg_.proj_dim;
    const std::size_t externals = cfg_.active_externals();

    auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out) {
        params_.add(name + ".w", Tensor(in, out));
        params_.add(name + ".b", Tensor(1, out));
    };

    add_linear("in.v", cfg_.visual_dim, h);
    if (cfg_.use_text_reference) add_linear("in.t", cfg_.text_dim, h);
    if (cfg_.use_audio_reference) add_linear("in.a", cfg_.audio_dim, h);

    for (const std::string m : {"v", "t", "a"}) {
        if (m == "t" && !cfg_.use_text_reference) continue;
        if (m == "a" && !cfg_.use_audio_reference) continue;
        add_linear("enc." + m + ".q", h, h);
        add_linear("enc." + m + ".k", h, h);
        add_linear("enc." + m + ".v", h, h);
    }

    if (externals > 0) {
        add_linear("xattn.q", h, h);
        if (cfg_.use_text_reference) {
            add_linear("xattn.t.k", h, h);
            add_linear("xattn.t.v", h, h);
        }
        if (cfg_.use_audio_reference) {
            add_linear("xattn.a.k", h, h);
            add_linear("xattn.a.v", h, h);
        }
        add_linear("delta.l1", externals * h, h);
        add_linear("delta.l2", h, h);
    }

    add_linear("aux", h, k);
    add_linear("cls.l1", (1 + externals) * h, h);
    add_linear("cls.l2", h, k);

    add_linear("proj.v", h, p);
    if (cfg_.use_text_reference) add_linear("proj.t", h, p);
    if (cfg_.use_audio_reference) add_linear("proj.a", h, p);
}

void FusionModel::init_params(std::uint64_t seed) {
    auto rng = make_rng(seed, "init");
    for (std::size_t i = 0; i < params_.count(); ++i) {
        num::Parameter& p = params_.at(i);
        // fan_in: weight matrices are [in, out]; biases use their layer's fan_in,
        // recovered from the matching ".w" registered immediately before.
        std::size_t fan_in = p.value.rows;
        if (p.name.size() > 2 && p.name.compare(p.name.size() - 2, 2, ".b") == 0 && i > 0) {
            fan_in = params_.at(i - 1).value.rows;
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& v : p.value.data) v = uniform_in(rng, -bound, bound);
    }
}

namespace {

struct BoundLinear {
    LinearVars vars;
};

LinearVars bind_linear(Tape& tape, ParamBinding& binding, const std::string& name) {
    return {binding.use(tape, name + ".w"), binding.use(tape, name + ".b")};
}

} // namespace

ConvGraph FusionModel::build_graph(Tape& tape, ParamBinding& binding, const ConvFeatures& feats,
                                   const ForwardOptions& opts) const {
    const std::size_t n = feats.length();
    if (n == 0) throw ValidationError("forward: empty conversation");
    if (feats.visual.cols != cfg_.visual_dim) throw ValidationError("forward: visual dim mismatch");
    if (cfg_.use_text_reference && (feats.text.rows != n || feats.text.cols != cfg_.text_dim)) {
        throw ValidationError("forward: text features misaligned");
    }
    if (cfg_.use_audio_reference && (feats.audio.rows != n || feats.audio.cols != cfg_.audio_dim)) {
        throw ValidationError("forward: audio features misaligned");
    }

    ConvGraph g;
    const std::optional<double> forced =
        opts.force_reliability_override ? opts.force_reliability_override : cfg_.force_reliability;
    if (forced && !(*forced >= 0.0 && *forced <= 1.0)) {
        throw ValidationError("force_reliability must lie in [0,1]");
    }

    auto encode = [&](const Tensor& raw, const std::string& m) {
        Var features = tape.constant(raw);
        Var projected = linear(features, bind_linear(tape, binding, "in." + m));
        return encode_context(projected, bind_linear(tape, binding, "enc." + m + ".q"),
                              bind_linear(tape, binding, "enc." + m + ".k"),
                              bind_linear(tape, binding, "enc." + m + ".v"));
    };

    g.enc_v = encode(feats.visual, "v");
    if (cfg_.use_text_reference) g.enc_t = encode(feats.text, "t");
    if (cfg_.use_audio_reference) g.enc_a = encode(feats.audio, "a");

    const std::size_t externals = cfg_.active_externals();

    if (externals > 0) {
        LinearVars xq = bind_linear(tape, binding, "xattn.q");
        auto retrieve_all = [&](const Var& enc_m, const std::string& m) {
            LinearVars xk = bind_linear(tape, binding, "xattn." + m + ".k");
            LinearVars xv = bind_linear(tape, binding, "xattn." + m + ".v");
            std::vector<Var> rows;
            rows.reserve(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t r0 = cfg_.retrieval_mode == RetrievalMode::causal_prefix ? 0 : i;
                Var keys = num::slice_rows(enc_m, r0, i + 1);
                rows.push_back(retrieve_reference(num::row(g.enc_v, i), keys, xq, xk, xv));
            }
            return num::concat_rows(rows);
        };
        if (cfg_.use_text_reference) g.ret_t = retrieve_all(g.enc_t, "t");
        if (cfg_.use_audio_reference) g.ret_a = retrieve_all(g.enc_a, "a");

        std::vector<Var> retrieved;
        if (cfg_.use_text_reference) retrieved.push_back(g.ret_t);
        if (cfg_.use_audio_reference) retrieved.push_back(g.ret_a);
        g.delta = residual_complement(g.enc_v, retrieved, bind_linear(tape, binding, "delta.l1"),
                                      bind_linear(tape, binding, "delta.l2"));
    }

    g.aux_logits = linear(g.enc_v, bind_linear(tape, binding, "aux"));

    g.reliability.resize(n);
    const bool differentiable_c = !cfg_.stop_grad_reliability && !forced && opts.trainable;
    if (forced) {
        std::fill(g.reliability.begin(), g.reliability.end(), *forced);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            std::span<const double> row_logits(g.aux_logits.value().data.data() + i * cfg_.num_classes,
                                               cfg_.num_classes);
            g.reliability[i] = compute_reliability(row_logits).reliability;
        }
    }

    if (externals == 0) {
        g.h_star = g.enc_v;
    } else if (!differentiable_c) {
        std::vector<double> one_minus(n);
        for (std::size_t i = 0; i < n; ++i) one_minus[i] = 1.0 - g.reliability[i];
        g.h_star = num::add(g.enc_v, num::row_scale(g.delta, one_minus));
    } else {
        Var probs = num::softmax_rows(g.aux_logits);
        std::vector<Var> rows;
        rows.reserve(n);
        g.reliability_vars.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::span<const double> prow(probs.value().data.data() + i * cfg_.num_classes,
                                         cfg_.num_classes);
            const std::size_t best = num::argmax_index(prow);
            Var c_var = num::element(probs, i, best);
            g.reliability_vars.push_back(c_var);
            Var one_minus = num::sub(tape.constant(Tensor::scalar(1.0)), c_var);
            rows.push_back(num::add(num::row(g.enc_v, i),
                                    num::scale_by_var(num::row(g.delta, i), one_minus)));
        }
        g.h_star = num::concat_rows(rows);
    }

    std::vector<Var> cls_in{g.h_star};
    if (cfg_.use_text_reference) cls_in.push_back(g.ret_t);
    if (cfg_.use_audio_reference) cls_in.push_back(g.ret_a);
    g.logits = classify(cls_in, bind_linear(tape, binding, "cls.l1"),
                        bind_linear(tape, binding, "cls.l2"));

    if (opts.build_projections) {
        auto project = [&](const Var& enc_m, const std::string& m) {
            return num::l2_normalize_rows(linear(enc_m, bind_linear(tape, binding, "proj." + m)));
        };
        g.z_v = project(g.enc_v, "v");
        if (cfg_.use_text_reference) g.z_t = project(g.enc_t, "t");
        if (cfg_.use_audio_reference) g.z_a = project(g.enc_a, "a");
    }
    return g;
}

std::vector<GateTrace> FusionModel::run_conversation(const ConvFeatures& feats) const {
    ForwardOptions opts;
    opts.trainable = false;
    opts.build_projections = false;

    // const_cast is confined to read-only bindings: with trainable=false the
    // leaves never receive gradients and the store is not mutated.
    ParamStore& store = const_cast<ParamStore&>(params_);

    Tape tape;
    ParamBinding binding(store);
    ConvGraph g = build_graph(tape, binding, feats, opts);

    ForwardOptions c0_opts = opts;
    c0_opts.force_reliability_override = 0.0;
    Tape c0_tape;
    ParamBinding c0_binding(store);
    ConvGraph g_c0 = build_graph(c0_tape, c0_binding, feats, c0_opts);

    const std::size_t n = feats.length();
    const std::size_t k = cfg_.num_classes;
    std::vector<GateTrace> traces(n);
    for (std::size_t i = 0; i < n; ++i) {
        GateTrace& tr = traces[i];
        tr.conv_id = feats.conv_id;
        tr.index = i;
        tr.label = feats.labels.size() == n ? feats.labels[i] : std::nullopt;
        tr.corrupted = feats.visual_corrupted.size() == n && feats.visual_corrupted[i];
        tr.reliability = g.reliability[i];
        auto row_of = [&](const Tensor& t, std::size_t cols) {
            return std::vector<double>(t.data.begin() + static_cast<std::ptrdiff_t>(i * cols),
                                       t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols));
        };
        tr.aux_logits = row_of(g.aux_logits.value(), k);
        tr.logits = row_of(g.logits.value(), k);
        tr.logits_c0 = row_of(g_c0.logits.value(), k);
        tr.prediction = static_cast<int>(num::argmax_index(tr.logits));
        tr.visual_prediction = static_cast<int>(num::argmax_index(tr.aux_logits));
        tr.h_star = row_of(g.h_star.value(), cfg_.hidden_dim);
        if (cfg_.active_externals() > 0) tr.delta = row_of(g.delta.value(), cfg_.hidden_dim);
        if (cfg_.use_text_reference) tr.retrieved_text = row_of(g.ret_t.value(), cfg_.hidden_dim);
        if (cfg_.use_audio_reference) tr.retrieved_audio = row_of(g.ret_a.value(), cfg_.hidden_dim);
    }
    return traces;
}

} // namespace visaff::fusion
