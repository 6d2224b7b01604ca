#include "visaff/theory.hpp"

#include "visaff/errors.hpp"
#include "visaff/numcore.hpp"
#include "visaff/rng.hpp"
#include "visaff/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

using nlohmann::json;

namespace visaff::theory {

double BoundedLoss::operator()(std::span<const double> probs, int label) const {
    if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) {
        throw ValidationError("bounded loss: label out of range");
    }
    const double k = static_cast<double>(probs.size());
    const double floor = std::exp(-bound);
    const double eps = k * floor;
    if (eps >= 1.0) throw ValidationError("bounded loss: M too small for this class count");
    return -std::log((1.0 - eps) * probs[static_cast<std::size_t>(label)] + floor);
}

double BoundedLoss::lipschitz() const {
    return std::exp(bound); // (1 - eps) / exp(-M) < e^M
}

std::vector<double> fuse_predictions(double c, std::span<const double> p_visual,
                                     std::span<const double> p_aux) {
    if (!(c >= 0.0 && c <= 1.0)) throw ValidationError("fuse_predictions: c out of [0,1]");
    if (p_visual.size() != p_aux.size() || p_visual.empty()) {
        throw ValidationError("fuse_predictions: distribution size mismatch");
    }
    auto check = [](std::span<const double> p) {
        double s = 0.0;
        for (double v : p) {
            if (!(v >= 0.0)) throw ValidationError("fuse_predictions: negative probability");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ValidationError("fuse_predictions: input not normalized");
    };
    check(p_visual);
    check(p_aux);
    std::vector<double> out(p_visual.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = c * p_visual[i] + (1.0 - c) * p_aux[i];
    }
    return out;
}

RiskSample make_risk_sample(double c, std::span<const double> p_visual,
                            std::span<const double> p_aux, int label, const LossFn& loss) {
    RiskSample s;
    s.c = c;
    s.label = label;
    s.loss_visual = loss(p_visual, label);
    s.loss_aux = loss(p_aux, label);
    s.loss_fused = loss(fuse_predictions(c, p_visual, p_aux), label);
    return s;
}

double convexity_check(std::span<const RiskSample> samples) {
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& s : samples) {
        const double mix = s.c * s.loss_visual + (1.0 - s.c) * s.loss_aux;
        worst = std::max(worst, s.loss_fused - mix);
    }
    return worst;
}

DecompositionReport risk_decomposition(std::span<const RiskSample> samples, double loss_bound) {
    if (samples.size() < 2) {
        throw ValidationError("risk_decomposition: need >= 2 samples (covariance undefined)");
    }
    const std::size_t n = samples.size();
    std::vector<double> c(n), lv(n), la(n), lf(n), mix(n);
    for (std::size_t i = 0; i < n; ++i) {
        c[i] = samples[i].c;
        lv[i] = samples[i].loss_visual;
        la[i] = samples[i].loss_aux;
        lf[i] = samples[i].loss_fused;
        mix[i] = c[i] * lv[i] + (1.0 - c[i]) * la[i];
    }

    DecompositionReport rep;
    rep.samples = n;
    rep.loss_bound = loss_bound;
    rep.fused_risk = mean_of(lf);
    rep.mean_c = mean_of(c);
    rep.weighted_visual = rep.mean_c * mean_of(lv);
    rep.weighted_aux = (1.0 - rep.mean_c) * mean_of(la);
    rep.cov_c_visual = covariance(c, lv);
    rep.cov_c_aux = covariance(c, la);
    rep.identity_value =
        rep.weighted_visual + rep.weighted_aux + rep.cov_c_visual - rep.cov_c_aux;
    rep.identity_residual = std::abs(mean_of(mix) - rep.identity_value);
    rep.slack = rep.identity_value - rep.fused_risk;
    rep.max_convexity_violation = convexity_check(samples);
    return rep;
}

std::string DecompositionReport::to_json() const {
    json j;
    j["samples"] = samples;
    j["fused_risk"] = fused_risk;
    j["mean_c"] = mean_c;
    j["weighted_visual"] = weighted_visual;
    j["weighted_aux"] = weighted_aux;
    j["cov_c_visual"] = cov_c_visual;
    j["cov_c_aux"] = cov_c_aux;
    j["identity_value"] = identity_value;
    j["identity_residual"] = identity_residual;
    j["slack"] = slack;
    j["max_convexity_violation"] = max_convexity_violation;
    j["loss_bound"] = loss_bound;
    return j.dump();
}

namespace {

double signed_max_correlation(const std::vector<std::vector<double>>& losses,
                              const std::vector<int>& signs) {
    const std::size_t n = signs.size();
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& row : losses) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += signs[i] * row[i];
        best = std::max(best, s / static_cast<double>(n));
    }
    return best;
}

} // namespace

double empirical_rademacher(const std::vector<std::vector<double>>& losses, std::size_t draws,
                            std::mt19937_64& rng) {
    if (losses.empty()) throw ValidationError("empirical_rademacher: empty hypothesis sample");
    if (draws < 100) throw ValidationError("empirical_rademacher: need >= 100 sign draws");
    const std::size_t n = losses[0].size();
    if (n == 0) throw ValidationError("empirical_rademacher: empty data");
    for (const auto& row : losses) {
        if (row.size() != n) throw ValidationError("empirical_rademacher: ragged loss matrix");
    }
    std::vector<double> values(draws);
    std::vector<int> signs(n);
    for (std::size_t d = 0; d < draws; ++d) {
        for (std::size_t i = 0; i < n; ++i) signs[i] = (rng() & 1) ? 1 : -1;
        values[d] = signed_max_correlation(losses, signs);
    }
    return mean_of(values);
}

double exhaustive_rademacher(const std::vector<std::vector<double>>& losses) {
    if (losses.empty()) throw ValidationError("exhaustive_rademacher: empty hypothesis sample");
    const std::size_t n = losses[0].size();
    if (n == 0 || n > 20) throw ValidationError("exhaustive_rademacher: n must be in [1, 20]");
    const std::size_t total = std::size_t{1} << n;
    std::vector<double> values(total);
    std::vector<int> signs(n);
    for (std::size_t mask = 0; mask < total; ++mask) {
        for (std::size_t i = 0; i < n; ++i) signs[i] = (mask >> i) & 1 ? 1 : -1;
        values[mask] = signed_max_correlation(losses, signs);
    }
    return mean_of(values);
}

BoundReport bound_check(const TrainerFn& trainer, const DistributionSampler& sampler,
                        const HypothesisSampler& hypotheses, const BoundConfig& config,
                        double lipschitz) {
    if (config.n < 2) throw ValidationError("bound_check: n must be >= 2");
    if (config.resamples == 0) throw ValidationError("bound_check: need >= 1 resample");

    const BoundedLoss loss{config.loss_bound};
    const bool degenerate = config.delta >= 1.0;
    const double ln_term = std::max(0.0, std::log(2.0 / config.delta));
    const double confidence_term =
        3.0 * config.loss_bound * std::sqrt(ln_term / (2.0 * static_cast<double>(config.n)));

    BoundReport rep;
    rep.delta = config.delta;
    rep.n = config.n;
    rep.loss_bound = config.loss_bound;
    rep.lipschitz = lipschitz;
    rep.resamples = config.resamples;
    rep.degenerate_delta = degenerate;

    std::vector<double> emp_risks, rads, bounds, true_risks;
    for (std::size_t r = 0; r < config.resamples; ++r) {
        auto rng = make_rng(config.seed ^ mix64(r + 1), "resample");

        std::vector<LabeledPoint> sample;
        sample.reserve(config.n);
        for (std::size_t i = 0; i < config.n; ++i) sample.push_back(sampler(rng));

        PredictFn trained = trainer(sample);

        std::vector<double> point_losses(config.n);
        for (std::size_t i = 0; i < config.n; ++i) {
            point_losses[i] = loss(trained(sample[i].x), sample[i].label);
        }
        const double emp_risk = mean_of(point_losses);

        auto rad_rng = make_rng(config.seed ^ mix64(r + 1), "rademacher");
        std::vector<PredictFn> hyp = hypotheses(trained, rad_rng);
        std::vector<std::vector<double>> loss_matrix(hyp.size(), std::vector<double>(config.n));
        for (std::size_t h = 0; h < hyp.size(); ++h) {
            for (std::size_t i = 0; i < config.n; ++i) {
                loss_matrix[h][i] = loss(hyp[h](sample[i].x), sample[i].label);
            }
        }
        const double rad = empirical_rademacher(loss_matrix, config.rademacher_draws, rad_rng);

        const double bound_value = emp_risk + 2.0 * lipschitz * rad + confidence_term;

        auto held_rng = make_rng(config.seed ^ mix64(r + 1), "heldout");
        std::vector<double> held_losses(config.heldout);
        for (std::size_t i = 0; i < config.heldout; ++i) {
            const LabeledPoint p = sampler(held_rng);
            held_losses[i] = loss(trained(p.x), p.label);
        }
        const double true_risk = mean_of(held_losses);

        emp_risks.push_back(emp_risk);
        rads.push_back(rad);
        bounds.push_back(bound_value);
        true_risks.push_back(true_risk);
        if (!degenerate && true_risk > bound_value) ++rep.violations;
    }

    rep.mean_empirical_risk = mean_of(emp_risks);
    rep.mean_rademacher = mean_of(rads);
    rep.mean_bound = mean_of(bounds);
    rep.mean_true_risk = mean_of(true_risks);
    rep.violation_fraction =
        static_cast<double>(rep.violations) / static_cast<double>(config.resamples);
    return rep;
}

std::string BoundReport::to_json() const {
    json j;
    j["delta"] = delta;
    j["n"] = n;
    j["loss_bound"] = loss_bound;
    j["lipschitz"] = lipschitz;
    j["resamples"] = resamples;
    j["mean_empirical_risk"] = mean_empirical_risk;
    j["mean_rademacher"] = mean_rademacher;
    j["rademacher_note"] = "lower estimate over a finite hypothesis subsample";
    j["mean_bound"] = mean_bound;
    j["mean_true_risk"] = mean_true_risk;
    j["violations"] = violations;
    j["violation_fraction"] = violation_fraction;
    j["degenerate_delta"] = degenerate_delta;
    return j.dump();
}

namespace {

struct LinearModel {
    std::size_t dim = 0;
    std::size_t classes = 0;
    std::vector<double> w; // [classes x dim]
    std::vector<double> b;

    std::vector<double> probs(const std::vector<double>& x) const {
        std::vector<double> logits(classes);
        for (std::size_t c = 0; c < classes; ++c) {
            double s = b[c];
            for (std::size_t d = 0; d < dim; ++d) s += w[c * dim + d] * x[d];
            logits[c] = s;
        }
        return num::softmax(logits);
    }
};

constexpr std::size_t kLinearDim = 6;
constexpr std::size_t kLinearClasses = 3;

std::vector<double> linear_class_center(std::size_t label) {
    auto rng = make_rng(977, "linear-centers/" + std::to_string(label));
    std::vector<double> c(kLinearDim);
    for (double& v : c) v = 1.5 * normal(rng);
    return c;
}

} // namespace

BoundReport linear_bound_experiment(const BoundConfig& config) {
    std::vector<std::vector<double>> centers;
    for (std::size_t c = 0; c < kLinearClasses; ++c) centers.push_back(linear_class_center(c));

    DistributionSampler sampler = [centers](std::mt19937_64& rng) {
        LabeledPoint p;
        p.label = static_cast<int>(rng() % kLinearClasses);
        p.x.resize(kLinearDim);
        for (std::size_t d = 0; d < kLinearDim; ++d) {
            p.x[d] = centers[static_cast<std::size_t>(p.label)][d] + normal(rng, 0.0, 0.8);
        }
        return p;
    };

    TrainerFn trainer = [](const std::vector<LabeledPoint>& sample) {
        LinearModel model;
        model.dim = kLinearDim;
        model.classes = kLinearClasses;
        model.w.assign(kLinearClasses * kLinearDim, 0.0);
        model.b.assign(kLinearClasses, 0.0);
        const double lr = 0.5;
        const std::size_t steps = 120;
        const double inv_n = 1.0 / static_cast<double>(sample.size());
        for (std::size_t step = 0; step < steps; ++step) {
            std::vector<double> gw(model.w.size(), 0.0), gb(model.b.size(), 0.0);
            for (const auto& p : sample) {
                std::vector<double> probs = model.probs(p.x);
                for (std::size_t c = 0; c < kLinearClasses; ++c) {
                    const double diff =
                        (probs[c] - (static_cast<int>(c) == p.label ? 1.0 : 0.0)) * inv_n;
                    gb[c] += diff;
                    for (std::size_t d = 0; d < kLinearDim; ++d) gw[c * kLinearDim + d] += diff * p.x[d];
                }
            }
            for (std::size_t i = 0; i < model.w.size(); ++i) model.w[i] -= lr * gw[i];
            for (std::size_t i = 0; i < model.b.size(); ++i) model.b[i] -= lr * gb[i];
        }
        return PredictFn([model](const std::vector<double>& x) { return model.probs(x); });
    };

    const std::size_t hyp_draws = config.hypothesis_draws;
    HypothesisSampler hypotheses = [hyp_draws](const PredictFn& trained, std::mt19937_64& rng) {
        std::vector<PredictFn> out;
        out.push_back(trained);
        for (std::size_t h = 0; h < hyp_draws; ++h) {
            // random parameter draws around the trained point, realized as a
            // perturbation applied to the trained model's probabilities in
            // logit space
            std::vector<double> shift(kLinearClasses * kLinearDim);
            std::vector<double> bias(kLinearClasses);
            for (double& v : shift) v = normal(rng, 0.0, 0.15);
            for (double& v : bias) v = normal(rng, 0.0, 0.15);
            out.push_back(PredictFn([trained, shift, bias](const std::vector<double>& x) {
                std::vector<double> p = trained(x);
                std::vector<double> logits(p.size());
                for (std::size_t c = 0; c < p.size(); ++c) {
                    double s = std::log(std::max(p[c], 1e-300)) + bias[c];
                    for (std::size_t d = 0; d < x.size(); ++d) s += shift[c * kLinearDim + d] * x[d];
                    logits[c] = s;
                }
                return num::softmax(logits);
            }));
        }
        return out;
    };

    const BoundedLoss loss{config.loss_bound};
    return bound_check(trainer, sampler, hypotheses, config, loss.lipschitz());
}

GateCorrelation gate_loss_correlation(std::span<const fusion::GateTrace> traces,
                                      double loss_bound) {
    if (traces.size() < 2) throw ValidationError("gate_loss_correlation: need >= 2 traces");
    const BoundedLoss loss{loss_bound};
    std::vector<double> c, lv, la;
    for (const auto& tr : traces) {
        if (!tr.label) throw ValidationError("gate_loss_correlation: traces must carry labels");
        c.push_back(tr.reliability);
        lv.push_back(loss(num::softmax(tr.aux_logits), *tr.label));
        la.push_back(loss(num::softmax(tr.logits_c0), *tr.label));
    }
    GateCorrelation out;
    const double c0 = c[0];
    out.degenerate = std::all_of(c.begin(), c.end(), [c0](double v) { return v == c0; });
    if (out.degenerate) return out;
    out.cov_c_visual = covariance(c, lv);
    out.cov_c_aux = covariance(c, la);
    return out;
}

std::string GateCorrelation::to_json() const {
    json j;
    j["cov_c_visual"] = cov_c_visual;
    j["cov_c_aux"] = cov_c_aux;
    j["degenerate"] = degenerate;
    return j.dump();
}

std::vector<RiskSample> risk_samples_from_traces(std::span<const fusion::GateTrace> traces,
                                                 double loss_bound) {
    const BoundedLoss loss{loss_bound};
    LossFn fn = [&loss](std::span<const double> p, int y) { return loss(p, y); };
    std::vector<RiskSample> out;
    out.reserve(traces.size());
    for (const auto& tr : traces) {
        if (!tr.label) throw ValidationError("risk samples: traces must carry labels");
        out.push_back(make_risk_sample(tr.reliability, num::softmax(tr.aux_logits),
                                       num::softmax(tr.logits_c0), *tr.label, fn));
    }
    return out;
}

} // namespace visaff::theory
