#pragma once

#include "visaff/datamodel.hpp"
#include "visaff/providers.hpp"
#include "visaff/training.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace visaff::bench {

// Shape + feature recipe for a generated dataset; the unit `gen-synthetic`
// consumes and the acceptance suite trains on.
struct SyntheticBenchmark {
    std::string name = "custom";
    std::vector<std::string> label_names;
    std::size_t train_convs = 40;
    std::size_t val_convs = 10;
    std::size_t test_convs = 10;
    std::size_t min_utterances = 6;
    std::size_t max_utterances = 10;
    providers::SyntheticSpec features;

    static SyntheticBenchmark from_json(const std::string& text);
    std::string to_json() const;
    void validate() const;
};

// Fully separable features; the sanity benchmark a linear probe should ace.
SyntheticBenchmark separable_benchmark();

// 30% of visual features blurred toward zero; text and audio are individually
// noisy but complementary. The standard benchmark for gate/ablation analysis.
SyntheticBenchmark corrupted_benchmark();

// Desk-scale training config matched to the benchmarks above.
train::TrainConfig benchmark_train_config();

data::Dataset make_dataset(const SyntheticBenchmark& bench, std::uint64_t seed);

providers::FeatureCache make_cache(const SyntheticBenchmark& bench, const data::Dataset& dataset,
                                   providers::Modality modality, std::uint64_t seed);

struct SyntheticBundle {
    data::Dataset dataset;
    providers::FeatureCache visual;
    providers::FeatureCache text;
    providers::FeatureCache audio;

    providers::CacheFeatureSource source() const {
        return providers::CacheFeatureSource(&visual, &text, &audio);
    }
};

SyntheticBundle make_bundle(const SyntheticBenchmark& bench, std::uint64_t seed);

} // namespace visaff::bench
