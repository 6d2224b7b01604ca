#pragma once

#include "visaff/benchmarks.hpp"
#include "visaff/theory.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace visaff::pipeline {

namespace fs = std::filesystem;

// File names inside a data directory produced by gen-synthetic.
inline constexpr const char* kDatasetFile = "dataset.jsonl";
inline constexpr const char* kVisualCache = "visual.cache";
inline constexpr const char* kTextCache = "text.cache";
inline constexpr const char* kAudioCache = "audio.cache";
inline constexpr const char* kBenchmarkFile = "benchmark.json";

struct LoadedData {
    data::Dataset dataset;
    providers::FeatureCache visual, text, audio;

    providers::CacheFeatureSource source() const {
        return providers::CacheFeatureSource(&visual, &text, &audio);
    }
};

LoadedData load_data_dir(const fs::path& data_dir);

void write_bundle(const bench::SyntheticBundle& bundle, const bench::SyntheticBenchmark& bench,
                  const fs::path& out_dir);

// ---- checkpoints ----

void save_checkpoint(const fs::path& path, const train::TrainConfig& config,
                     const train::TrainResult& result);

struct LoadedCheckpoint {
    train::TrainConfig train_config;
    fusion::FusionModel model;
};

LoadedCheckpoint load_checkpoint(const fs::path& path);

// ---- subcommand bodies (shared by the CLI and the python bindings) ----

struct GenSummary {
    fs::path dataset, visual, text, audio, benchmark;
};
GenSummary run_gen_synthetic(const bench::SyntheticBenchmark& bench, const fs::path& out_dir,
                             std::uint64_t seed);

struct TrainSummary {
    fs::path checkpoint, log;
    double best_val_wf1 = 0.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};
TrainSummary run_train(const fs::path& data_dir, const train::TrainConfig& config,
                       const fs::path& out_dir);

struct EvalSummary {
    fs::path metrics, traces;
    double weighted_f1 = 0.0;
    double accuracy = 0.0;
};
EvalSummary run_eval(const fs::path& checkpoint, const fs::path& data_dir, data::Split split,
                     const fs::path& out_dir);

struct BinsSummary {
    fs::path report, csv;
};
BinsSummary run_bins(const fs::path& traces_path, const std::vector<double>& edges,
                     const fs::path& out_dir);

struct BoundSummary {
    fs::path report;
    double violation_fraction = 0.0;
};
BoundSummary run_verify_bound(const theory::BoundConfig& config, const fs::path& out_dir);

struct DecompositionSummary {
    fs::path report, correlation;
    double identity_residual = 0.0;
    double slack = 0.0;
};
DecompositionSummary run_verify_decomposition(const fs::path& traces_path, double loss_bound,
                                              const fs::path& out_dir);

struct SeedsSummary {
    fs::path report;
    std::vector<fs::path> run_reports;
    double mean_wf1 = 0.0;
};
SeedsSummary run_seeds(const fs::path& data_dir, const train::TrainConfig& base_config,
                       std::size_t runs, const fs::path& out_dir);

// ---- remote extraction ----

struct ExtractOptions {
    fs::path dataset_path;
    fs::path cache_path;
    providers::EndpointConfig endpoint; // VISAFF_ENDPOINT env wins over this
    std::size_t frames_per_clip = 8;
    std::size_t context_window = 8;
    std::size_t vad_top_n = 5;
    fs::path template_file;
    fs::path vad_lexicon;
    bool resume = false;
    std::size_t workers = 4;
    std::optional<fs::path> manifest_path; // default: cache path + ".manifest.json"
};

struct ExtractFailure {
    std::string key;
    std::string error;
};

struct ExtractSummary {
    std::size_t extracted = 0;
    std::size_t skipped = 0;
    std::size_t requests = 0;
    std::vector<ExtractFailure> failures;
    fs::path manifest;
};

ExtractSummary run_extract(const ExtractOptions& options);

} // namespace visaff::pipeline
