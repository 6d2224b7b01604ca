#pragma once

#include "visaff/fusion.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace visaff::theory {

// Bounded convex cross-entropy surrogate over the probability simplex:
//   loss(p, y) = -log((1 - eps) * p[y] + exp(-M)),  eps = K * exp(-M).
// Range [0, M], convex in p (affine composed with -log), so the Theorem-1
// premises hold exactly; a hard min(ce, M) clip would lose convexity right at
// the clip boundary. M is reported alongside every use.
struct BoundedLoss {
    double bound = 10.0; // M

    double operator()(std::span<const double> probs, int label) const;
    // sup over the simplex of |d loss / d p[y]|; documented, not tight.
    double lipschitz() const;
};

using LossFn = std::function<double(std::span<const double>, int)>;

struct RiskSample {
    double c = 0.0;
    double loss_visual = 0.0;
    double loss_aux = 0.0;
    double loss_fused = 0.0;
    int label = 0;
};

// Componentwise convex combination; preserves the simplex.
std::vector<double> fuse_predictions(double c, std::span<const double> p_visual,
                                     std::span<const double> p_aux);

RiskSample make_risk_sample(double c, std::span<const double> p_visual,
                            std::span<const double> p_aux, int label, const LossFn& loss);

// max over samples of loss_fused - (c * loss_visual + (1-c) * loss_aux);
// <= ~1e-10 whenever the generating loss was convex.
double convexity_check(std::span<const RiskSample> samples);

struct DecompositionReport {
    std::size_t samples = 0;
    double fused_risk = 0.0;     // empirical R(h_fuse)
    double mean_c = 0.0;
    double weighted_visual = 0.0; // E[c] * R(h_v)
    double weighted_aux = 0.0;    // E[1-c] * R(h_aux)
    double cov_c_visual = 0.0;
    double cov_c_aux = 0.0;
    double identity_value = 0.0;    // decomposition right-hand side
    double identity_residual = 0.0; // |E[c l_v] + E[(1-c) l_aux] - identity_value|
    double slack = 0.0;             // identity_value - fused_risk
    double max_convexity_violation = 0.0;
    double loss_bound = 0.0;

    std::string to_json() const;
};

// Covariances are population (1/n) covariances; the identity is exact only
// under that convention. Requires >= 2 samples.
DecompositionReport risk_decomposition(std::span<const RiskSample> samples, double loss_bound);

// losses[h][i]: loss of hypothesis h on data point i.
// Sampled estimate over `draws` Rademacher sign vectors (draws >= 100); a
// lower estimate of the class complexity since the hypothesis set is finite.
double empirical_rademacher(const std::vector<std::vector<double>>& losses, std::size_t draws,
                            std::mt19937_64& rng);
// Exact expectation by enumerating all 2^n sign vectors; n <= 20.
double exhaustive_rademacher(const std::vector<std::vector<double>>& losses);

struct LabeledPoint {
    std::vector<double> x;
    int label = 0;
};

using DistributionSampler = std::function<LabeledPoint(std::mt19937_64&)>;
using PredictFn = std::function<std::vector<double>(const std::vector<double>&)>; // -> probs
using TrainerFn = std::function<PredictFn(const std::vector<LabeledPoint>&)>;
using HypothesisSampler =
    std::function<std::vector<PredictFn>(const PredictFn& trained, std::mt19937_64&)>;

struct BoundConfig {
    std::size_t n = 200;
    double delta = 0.1;
    std::size_t resamples = 200;
    std::size_t rademacher_draws = 200;
    std::size_t hypothesis_draws = 15;
    std::size_t heldout = 2000;
    double loss_bound = 10.0; // M
    std::uint64_t seed = 42;
};

struct BoundReport {
    double delta = 0.0;
    std::size_t n = 0;
    double loss_bound = 0.0; // M
    double lipschitz = 0.0;  // L
    std::size_t resamples = 0;
    double mean_empirical_risk = 0.0;
    double mean_rademacher = 0.0; // lower estimate (finite hypothesis subsample)
    double mean_bound = 0.0;
    double mean_true_risk = 0.0; // held-out Monte Carlo estimate
    std::size_t violations = 0;
    double violation_fraction = 0.0;
    bool degenerate_delta = false; // delta >= 1: guarantee vacuous, report only

    std::string to_json() const;
};

BoundReport bound_check(const TrainerFn& trainer, const DistributionSampler& sampler,
                        const HypothesisSampler& hypotheses, const BoundConfig& config,
                        double lipschitz);

// The concrete experiment behind `verify-bound`: gaussian class clusters and a
// tiny multinomial logistic class trained by full-batch gradient descent.
BoundReport linear_bound_experiment(const BoundConfig& config);

struct GateCorrelation {
    double cov_c_visual = 0.0;
    double cov_c_aux = 0.0;
    bool degenerate = false; // constant c across traces

    std::string to_json() const;
};

GateCorrelation gate_loss_correlation(std::span<const fusion::GateTrace> traces,
                                      double loss_bound = 10.0);

// p_v from the aux (video-only) logits, p_aux from the c-forced-0 logits.
std::vector<RiskSample> risk_samples_from_traces(std::span<const fusion::GateTrace> traces,
                                                 double loss_bound = 10.0);

} // namespace visaff::theory
