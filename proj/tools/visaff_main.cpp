#include "visaff/errors.hpp"
#include "visaff/pipeline.hpp"
#include "visaff/util.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#ifndef VISAFF_DEFAULT_ASSET_DIR
#define VISAFF_DEFAULT_ASSET_DIR "assets"
#endif

namespace {

using namespace visaff;

std::vector<double> parse_edges(const std::string& csv) {
    std::vector<double> edges;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) edges.push_back(std::stod(item));
    }
    return edges;
}

train::TrainConfig load_config(const std::string& path) {
    if (path.empty()) return train::TrainConfig{};
    return train::TrainConfig::from_json(read_text_file(path));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"visaff: speaker-centered two-stage emotion recognition engine"};
    app.require_subcommand(1);
    std::function<int()> action;

    const std::string asset_dir = VISAFF_DEFAULT_ASSET_DIR;

    // ---- gen-synthetic ----
    auto* gen = app.add_subcommand("gen-synthetic",
                                   "Generate a synthetic dataset plus feature caches");
    std::string gen_preset = "separable";
    std::string gen_spec;
    std::string gen_out;
    std::uint64_t gen_seed = 42;
    gen->add_option("--preset", gen_preset, "Benchmark preset (separable|corrupted)")
        ->capture_default_str();
    gen->add_option("--spec", gen_spec, "Benchmark spec JSON file (overrides --preset)")
        ->capture_default_str();
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--seed", gen_seed, "Generation seed")->capture_default_str();
    gen->callback([&]() {
        action = [&]() {
            bench::SyntheticBenchmark bench;
            if (!gen_spec.empty()) {
                bench = bench::SyntheticBenchmark::from_json(read_text_file(gen_spec));
            } else if (gen_preset == "separable") {
                bench = bench::separable_benchmark();
            } else if (gen_preset == "corrupted") {
                bench = bench::corrupted_benchmark();
            } else {
                throw ValidationError("unknown preset: " + gen_preset);
            }
            auto summary = pipeline::run_gen_synthetic(bench, gen_out, gen_seed);
            std::cout << "dataset: " << summary.dataset.string() << "\n"
                      << "visual cache: " << summary.visual.string() << "\n"
                      << "text cache: " << summary.text.string() << "\n"
                      << "audio cache: " << summary.audio.string() << "\n"
                      << "benchmark: " << summary.benchmark.string() << "\n";
            return 0;
        };
    });

    // ---- extract ----
    auto* extract = app.add_subcommand("extract",
                                       "Extract visual features through the embedding service");
    pipeline::ExtractOptions xopts;
    std::string x_dataset, x_cache, x_endpoint, x_template, x_lexicon, x_manifest;
    x_template = asset_dir + std::string("/prompt_templates.txt");
    x_lexicon = asset_dir + std::string("/vad_lexicon.tsv");
    extract->add_option("--dataset", x_dataset, "Dataset JSONL path")->required();
    extract->add_option("--cache", x_cache, "Visual feature cache to populate")->required();
    extract->add_option("--endpoint", x_endpoint, "Service base URL (VISAFF_ENDPOINT wins)")
        ->capture_default_str();
    extract->add_option("--frames-per-clip", xopts.frames_per_clip, "Frames sampled per clip")
        ->capture_default_str();
    extract->add_option("--context-window", xopts.context_window, "Dialogue context window")
        ->capture_default_str();
    extract->add_option("--vad-top-n", xopts.vad_top_n, "Lexical VAD entries per prompt")
        ->capture_default_str();
    extract->add_option("--template-file", x_template, "Prompt template file")
        ->capture_default_str();
    extract->add_option("--vad-lexicon", x_lexicon, "VAD lexicon TSV")->capture_default_str();
    extract->add_flag("--resume", xopts.resume, "Skip utterances already in the cache");
    extract->add_option("--workers", xopts.workers, "Concurrent request workers")
        ->capture_default_str();
    extract->add_option("--timeout-ms", xopts.endpoint.timeout_ms, "Request timeout")
        ->capture_default_str();
    extract->add_option("--retries", xopts.endpoint.max_retries, "Retry budget per utterance")
        ->capture_default_str();
    extract->add_option("--backoff-ms", xopts.endpoint.initial_backoff_ms,
                        "Initial retry backoff")
        ->capture_default_str();
    extract->add_option("--manifest", x_manifest, "Failure manifest path")->capture_default_str();
    extract->callback([&]() {
        action = [&]() {
            xopts.dataset_path = x_dataset;
            xopts.cache_path = x_cache;
            xopts.endpoint.base_url = x_endpoint;
            xopts.template_file = x_template;
            xopts.vad_lexicon = x_lexicon;
            if (!x_manifest.empty()) xopts.manifest_path = x_manifest;
            auto summary = pipeline::run_extract(xopts);
            std::cout << "extracted: " << summary.extracted << "\n"
                      << "skipped: " << summary.skipped << "\n"
                      << "failures: " << summary.failures.size() << "\n"
                      << "manifest: " << summary.manifest.string() << "\n";
            return summary.failures.empty() ? 0 : 2;
        };
    });

    // ---- train ----
    auto* tr = app.add_subcommand("train", "Train the fusion head on cached features");
    std::string t_data, t_out, t_config;
    std::uint64_t t_seed = 0;
    bool t_seed_set = false;
    std::int64_t t_epochs = -1;
    tr->add_option("--data", t_data, "Data directory from gen-synthetic/extract")->required();
    tr->add_option("--out", t_out, "Output directory")->required();
    tr->add_option("--config", t_config, "TrainConfig JSON file")->capture_default_str();
    tr->add_option("--seed", t_seed, "Seed override (wins over config)")
        ->capture_default_str()
        ->each([&](const std::string&) { t_seed_set = true; });
    tr->add_option("--epochs", t_epochs, "Epoch override (wins over config)")
        ->capture_default_str();
    tr->callback([&]() {
        action = [&]() {
            train::TrainConfig config = load_config(t_config);
            if (t_seed_set) config.seed = t_seed;
            if (t_epochs >= 0) config.epochs = static_cast<std::size_t>(t_epochs);
            auto summary = pipeline::run_train(t_data, config, t_out);
            std::cout << "checkpoint: " << summary.checkpoint.string() << "\n"
                      << "log: " << summary.log.string() << "\n"
                      << "best_val_wf1: " << summary.best_val_wf1 << "\n"
                      << "best_epoch: " << summary.best_epoch << "\n";
            return 0;
        };
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and export gate traces");
    std::string e_ckpt, e_data, e_split = "test", e_out;
    ev->add_option("--checkpoint", e_ckpt, "Checkpoint path")->required();
    ev->add_option("--data", e_data, "Data directory")->required();
    ev->add_option("--split", e_split, "Split to evaluate (train|val|test)")
        ->capture_default_str();
    ev->add_option("--out", e_out, "Output directory")->required();
    ev->callback([&]() {
        action = [&]() {
            auto summary =
                pipeline::run_eval(e_ckpt, e_data, data::split_from_string(e_split), e_out);
            std::cout << "metrics: " << summary.metrics.string() << "\n"
                      << "traces: " << summary.traces.string() << "\n"
                      << "weighted_f1: " << summary.weighted_f1 << "\n"
                      << "accuracy: " << summary.accuracy << "\n";
            return 0;
        };
    });

    // ---- bins ----
    auto* bins = app.add_subcommand("bins", "Confidence-binned gain analysis over gate traces");
    std::string b_traces, b_out, b_edges = "0,0.2,0.4,0.6,0.8,1";
    bins->add_option("--traces", b_traces, "GateTrace JSONL path")->required();
    bins->add_option("--edges", b_edges, "Comma-separated bin edges over [0,1]")
        ->capture_default_str();
    bins->add_option("--out", b_out, "Output directory")->required();
    bins->callback([&]() {
        action = [&]() {
            auto summary = pipeline::run_bins(b_traces, parse_edges(b_edges), b_out);
            std::cout << "report: " << summary.report.string() << "\n"
                      << "csv: " << summary.csv.string() << "\n";
            return 0;
        };
    });

    // ---- verify-bound ----
    auto* vb = app.add_subcommand("verify-bound",
                                  "Monte-Carlo check of the generalization bound");
    theory::BoundConfig bc;
    std::string vb_out;
    vb->add_option("--n", bc.n, "Training-set size per resample")->capture_default_str();
    vb->add_option("--delta", bc.delta, "Confidence parameter")->capture_default_str();
    vb->add_option("--resamples", bc.resamples, "Independent training-set draws")
        ->capture_default_str();
    vb->add_option("--rademacher-draws", bc.rademacher_draws, "Sign vectors per estimate")
        ->capture_default_str();
    vb->add_option("--hypothesis-draws", bc.hypothesis_draws,
                   "Perturbed predictors per Rademacher estimate")
        ->capture_default_str();
    vb->add_option("--heldout", bc.heldout, "Held-out points for true-risk estimates")
        ->capture_default_str();
    vb->add_option("--loss-bound", bc.loss_bound, "Loss bound M")->capture_default_str();
    vb->add_option("--seed", bc.seed, "Experiment seed")->capture_default_str();
    vb->add_option("--out", vb_out, "Output directory")->required();
    vb->callback([&]() {
        action = [&]() {
            auto summary = pipeline::run_verify_bound(bc, vb_out);
            std::cout << "report: " << summary.report.string() << "\n"
                      << "violation_fraction: " << summary.violation_fraction << "\n";
            return 0;
        };
    });

    // ---- verify-decomposition ----
    auto* vd = app.add_subcommand("verify-decomposition",
                                  "Risk decomposition and gate covariance over traces");
    std::string vd_traces, vd_out;
    double vd_bound = 10.0;
    vd->add_option("--traces", vd_traces, "GateTrace JSONL path")->required();
    vd->add_option("--loss-bound", vd_bound, "Loss bound M")->capture_default_str();
    vd->add_option("--out", vd_out, "Output directory")->required();
    vd->callback([&]() {
        action = [&]() {
            auto summary = pipeline::run_verify_decomposition(vd_traces, vd_bound, vd_out);
            std::cout << "report: " << summary.report.string() << "\n"
                      << "correlation: " << summary.correlation.string() << "\n"
                      << "identity_residual: " << summary.identity_residual << "\n"
                      << "slack: " << summary.slack << "\n";
            return 0;
        };
    });

    // ---- seeds ----
    auto* seeds = app.add_subcommand("seeds", "Train and evaluate across consecutive seeds");
    std::string s_data, s_out, s_config;
    std::size_t s_n = 5;
    std::uint64_t s_seed = 42;
    seeds->add_option("--data", s_data, "Data directory")->required();
    seeds->add_option("--config", s_config, "TrainConfig JSON file")->capture_default_str();
    seeds->add_option("--n", s_n, "Number of runs")->capture_default_str();
    seeds->add_option("--seed", s_seed, "Base seed (runs use seed..seed+n-1)")
        ->capture_default_str();
    seeds->add_option("--out", s_out, "Output directory")->required();
    seeds->callback([&]() {
        action = [&]() {
            train::TrainConfig config = load_config(s_config);
            config.seed = s_seed;
            auto summary = pipeline::run_seeds(s_data, config, s_n, s_out);
            std::cout << "report: " << summary.report.string() << "\n";
            for (const auto& p : summary.run_reports) {
                std::cout << "run: " << p.string() << "\n";
            }
            std::cout << "mean_wf1: " << summary.mean_wf1 << "\n";
            return 0;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        return action();
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const RemoteError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
