#include "visaff/pipeline.hpp"

#include "visaff/errors.hpp"
#include "visaff/rng.hpp"
#include "visaff/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>

using nlohmann::json;

namespace visaff::pipeline {

LoadedData load_data_dir(const fs::path& data_dir) {
    const fs::path dataset_path = data_dir / kDatasetFile;
    if (!fs::exists(dataset_path)) {
        throw ValidationError("missing dataset file: " + dataset_path.string());
    }
    for (const char* name : {kVisualCache, kTextCache, kAudioCache}) {
        if (!fs::exists(data_dir / name)) {
            throw ValidationError("missing cache file: " + (data_dir / name).string());
        }
    }
    LoadedData out{data::load_dataset(dataset_path),
                   providers::FeatureCache::load(data_dir / kVisualCache),
                   providers::FeatureCache::load(data_dir / kTextCache),
                   providers::FeatureCache::load(data_dir / kAudioCache)};
    return out;
}

void write_bundle(const bench::SyntheticBundle& bundle, const bench::SyntheticBenchmark& bench,
                  const fs::path& out_dir) {
    fs::create_directories(out_dir);
    data::save_dataset(bundle.dataset, out_dir / kDatasetFile);
    bundle.visual.save(out_dir / kVisualCache);
    bundle.text.save(out_dir / kTextCache);
    bundle.audio.save(out_dir / kAudioCache);
    write_text_file(out_dir / kBenchmarkFile, bench.to_json() + "\n");
}

void save_checkpoint(const fs::path& path, const train::TrainConfig& config,
                     const train::TrainResult& result) {
    json extra;
    extra["train_config"] = json::parse(config.to_json());
    extra["num_classes"] = result.fusion_config.num_classes;
    extra["visual_dim"] = result.fusion_config.visual_dim;
    extra["text_dim"] = result.fusion_config.text_dim;
    extra["audio_dim"] = result.fusion_config.audio_dim;
    write_text_file(path, num::serialize_params(result.params, extra.dump()));
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw ValidationError("missing checkpoint: " + path.string());
    const std::string text = read_text_file(path);
    const auto lines = split_lines(text);
    if (lines.empty()) throw ValidationError("checkpoint empty: " + path.string());
    json header = json::parse(lines[0]);
    if (!header.contains("train_config")) {
        throw ValidationError("checkpoint missing train_config header");
    }
    train::TrainConfig config = train::TrainConfig::from_json(header.at("train_config").dump());

    train::TrainResult shape;
    shape.fusion_config.num_classes = header.at("num_classes").get<std::size_t>();
    shape.fusion_config.visual_dim = header.at("visual_dim").get<std::size_t>();
    shape.fusion_config.text_dim = header.at("text_dim").get<std::size_t>();
    shape.fusion_config.audio_dim = header.at("audio_dim").get<std::size_t>();
    shape.fusion_config.hidden_dim = config.hidden_dim;
    shape.fusion_config.proj_dim = config.proj_dim;
    shape.fusion_config.stop_grad_reliability = config.stop_grad_reliability;
    shape.fusion_config.retrieval_mode = config.retrieval_mode;
    shape.fusion_config.use_text_reference = config.use_text_reference;
    shape.fusion_config.use_audio_reference = config.use_audio_reference;
    shape.fusion_config.force_reliability = config.force_reliability;

    fusion::FusionModel model(shape.fusion_config);
    num::deserialize_params(text, model.params());
    return {config, std::move(model)};
}

GenSummary run_gen_synthetic(const bench::SyntheticBenchmark& bench, const fs::path& out_dir,
                             std::uint64_t seed) {
    bench::SyntheticBundle bundle = bench::make_bundle(bench, seed);
    write_bundle(bundle, bench, out_dir);
    return {out_dir / kDatasetFile, out_dir / kVisualCache, out_dir / kTextCache,
            out_dir / kAudioCache, out_dir / kBenchmarkFile};
}

TrainSummary run_train(const fs::path& data_dir, const train::TrainConfig& config,
                       const fs::path& out_dir) {
    LoadedData data = load_data_dir(data_dir);
    auto source = data.source();
    train::TrainResult result = train::train(config, data.dataset, source);

    fs::create_directories(out_dir);
    const fs::path ckpt = out_dir / "checkpoint.ckpt";
    const fs::path log = out_dir / "train_log.jsonl";
    save_checkpoint(ckpt, config, result);
    write_text_file(log, result.log_jsonl);
    write_text_file(out_dir / "train_config.json", config.to_json() + "\n");

    TrainSummary summary;
    summary.checkpoint = ckpt;
    summary.log = log;
    summary.best_val_wf1 = result.best_val_wf1;
    summary.best_epoch = result.best_epoch;
    summary.epochs_run = result.log.size();
    return summary;
}

EvalSummary run_eval(const fs::path& checkpoint, const fs::path& data_dir, data::Split split,
                     const fs::path& out_dir) {
    LoadedCheckpoint loaded = load_checkpoint(checkpoint);
    LoadedData data = load_data_dir(data_dir);
    auto source = data.source();
    train::EvalResult result = train::evaluate(loaded.model, data.dataset, split, source);

    fs::create_directories(out_dir);
    EvalSummary summary;
    summary.metrics = out_dir / "metrics.json";
    summary.traces = out_dir / "traces.jsonl";
    write_text_file(summary.metrics, result.metrics.to_json() + "\n");
    write_text_file(summary.traces, train::traces_to_jsonl(result.traces));
    summary.weighted_f1 = result.metrics.weighted_f1;
    summary.accuracy = result.metrics.accuracy;
    return summary;
}

BinsSummary run_bins(const fs::path& traces_path, const std::vector<double>& edges,
                     const fs::path& out_dir) {
    if (!fs::exists(traces_path)) throw ValidationError("missing traces: " + traces_path.string());
    auto traces = train::traces_from_jsonl(read_text_file(traces_path));
    train::BinReport report = train::bin_by_confidence(traces, edges);

    fs::create_directories(out_dir);
    BinsSummary summary;
    summary.report = out_dir / "bin_report.json";
    summary.csv = out_dir / "bins.csv";
    write_text_file(summary.report, report.to_json() + "\n");
    write_text_file(summary.csv, report.to_csv());
    return summary;
}

BoundSummary run_verify_bound(const theory::BoundConfig& config, const fs::path& out_dir) {
    theory::BoundReport report = theory::linear_bound_experiment(config);
    fs::create_directories(out_dir);
    BoundSummary summary;
    summary.report = out_dir / "bound_report.json";
    write_text_file(summary.report, report.to_json() + "\n");
    summary.violation_fraction = report.violation_fraction;
    return summary;
}

DecompositionSummary run_verify_decomposition(const fs::path& traces_path, double loss_bound,
                                              const fs::path& out_dir) {
    if (!fs::exists(traces_path)) throw ValidationError("missing traces: " + traces_path.string());
    auto traces = train::traces_from_jsonl(read_text_file(traces_path));
    auto samples = theory::risk_samples_from_traces(traces, loss_bound);
    theory::DecompositionReport report = theory::risk_decomposition(samples, loss_bound);
    theory::GateCorrelation correlation = theory::gate_loss_correlation(traces, loss_bound);

    fs::create_directories(out_dir);
    DecompositionSummary summary;
    summary.report = out_dir / "decomposition_report.json";
    summary.correlation = out_dir / "gate_correlation.json";
    write_text_file(summary.report, report.to_json() + "\n");
    write_text_file(summary.correlation, correlation.to_json() + "\n");
    summary.identity_residual = report.identity_residual;
    summary.slack = report.slack;
    return summary;
}

SeedsSummary run_seeds(const fs::path& data_dir, const train::TrainConfig& base_config,
                       std::size_t runs, const fs::path& out_dir) {
    if (runs < 2) throw ValidationError("seeds: need >= 2 runs");
    LoadedData data = load_data_dir(data_dir);
    auto source = data.source();

    std::vector<train::TrainConfig> configs;
    std::vector<train::MetricsReport> reports;
    SeedsSummary summary;
    fs::create_directories(out_dir);

    for (std::size_t r = 0; r < runs; ++r) {
        train::TrainConfig config = base_config;
        config.seed = base_config.seed + r;
        train::TrainResult result = train::train(config, data.dataset, source);
        fusion::FusionModel model = train::model_from_result(result);
        train::EvalResult eval = train::evaluate(model, data.dataset, data::Split::test, source);

        const fs::path run_report = out_dir / ("metrics_seed" + std::to_string(config.seed) + ".json");
        write_text_file(run_report, eval.metrics.to_json() + "\n");
        summary.run_reports.push_back(run_report);
        configs.push_back(config);
        reports.push_back(eval.metrics);
    }

    train::AggregateReport agg = train::seed_average(configs, reports);
    summary.report = out_dir / "seed_report.json";
    write_text_file(summary.report, agg.to_json() + "\n");
    summary.mean_wf1 = agg.metrics.at("weighted_f1").mean;
    return summary;
}

namespace {

std::vector<fs::path> list_frames(const fs::path& dir) {
    std::vector<fs::path> frames;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file()) frames.push_back(entry.path());
    }
    std::sort(frames.begin(), frames.end());
    return frames;
}

} // namespace

ExtractSummary run_extract(const ExtractOptions& options) {
    providers::EndpointConfig endpoint = options.endpoint;
    if (const char* env = std::getenv("VISAFF_ENDPOINT"); env && *env) {
        endpoint.base_url = env;
    }
    if (endpoint.base_url.empty()) {
        throw ValidationError("no endpoint configured (flag --endpoint or VISAFF_ENDPOINT)");
    }

    data::Dataset dataset = data::load_dataset(options.dataset_path);
    prompting::PromptTemplates templates = prompting::PromptTemplates::load(options.template_file);
    prompting::VadLexicon lexicon = prompting::VadLexicon::load(options.vad_lexicon);
    prompting::PromptOptions popts;
    popts.frames_per_clip = options.frames_per_clip;
    popts.context_window = options.context_window;
    popts.vad_top_n = options.vad_top_n;

    // probe the service dim with the first un-cached utterance unless a cache
    // already pins it
    std::optional<std::uint32_t> dim;
    std::unique_ptr<providers::CacheAppender> appender;
    if (fs::exists(options.cache_path)) {
        providers::FeatureCache existing = providers::FeatureCache::load(options.cache_path);
        if (!options.resume && existing.size() > 0) {
            throw ValidationError("cache already exists (pass --resume to continue): " +
                                  options.cache_path.string());
        }
        dim = existing.dim();
        appender = std::make_unique<providers::CacheAppender>(options.cache_path,
                                                              providers::Modality::visual,
                                                              existing.dim());
    }

    struct Job {
        const data::Conversation* conv;
        std::size_t index;
    };
    std::vector<Job> jobs;
    for (const auto& conv : dataset.conversations) {
        for (const auto& u : conv.utterances) {
            jobs.push_back({&conv, u.index});
        }
    }

    ExtractSummary summary;
    std::atomic<std::size_t> requests{0};
    std::mutex failures_mutex;

    struct Outcome {
        std::optional<providers::FeatureRecord> record;
        std::optional<std::string> error;
        bool skipped = false;
    };

    auto process = [&](const Job& job) -> Outcome {
        const data::Utterance& u = job.conv->utterances[job.index];
        const providers::FeatureKey key{u.conv_id, u.index};
        if (appender && appender->contains(key)) return {.skipped = true};
        try {
            if (!u.media.video_path) throw ValidationError("utterance has no video_path");
            if (!u.media.reference_image_path) {
                throw ValidationError("utterance has no reference_image_path");
            }
            const auto frame_files = list_frames(*u.media.video_path);
            if (frame_files.empty()) {
                throw ValidationError("no frame files in " + *u.media.video_path);
            }
            const auto indices =
                prompting::sample_frame_indices(frame_files.size(), options.frames_per_clip);
            std::vector<std::vector<std::uint8_t>> frames;
            for (std::size_t idx : indices) frames.push_back(read_binary_file(frame_files[idx]));
            const auto reference = read_binary_file(*u.media.reference_image_path);

            prompting::PromptBundle bundle =
                prompting::build_prompt_bundle(*job.conv, job.index, frame_files.size(), templates,
                                               lexicon, popts);
            requests.fetch_add(1);
            providers::FeatureRecord rec =
                providers::extract_remote(bundle, frames, reference, endpoint);
            return {.record = std::move(rec)};
        } catch (const std::exception& e) {
            return {.error = std::string(e.what())};
        }
    };

    const std::size_t workers = std::max<std::size_t>(1, options.workers);
    const std::size_t chunk = std::max<std::size_t>(workers * 4, 8);
    for (std::size_t start = 0; start < jobs.size(); start += chunk) {
        const std::size_t end = std::min(jobs.size(), start + chunk);
        std::vector<Outcome> outcomes(end - start);
        std::atomic<std::size_t> next{start};
        auto worker = [&]() {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= end) break;
                outcomes[i - start] = process(jobs[i]);
            }
        };
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(workers, end - start); ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();

        // single writer commits in dataset order; byte-reproducible artifacts
        for (std::size_t i = start; i < end; ++i) {
            Outcome& o = outcomes[i - start];
            const providers::FeatureKey key{jobs[i].conv->conv_id, jobs[i].index};
            if (o.skipped) {
                ++summary.skipped;
            } else if (o.error) {
                summary.failures.push_back({key.serialized(), *o.error});
            } else {
                if (!appender) {
                    dim = static_cast<std::uint32_t>(o.record->dim());
                    appender = std::make_unique<providers::CacheAppender>(
                        options.cache_path, providers::Modality::visual, *dim);
                }
                try {
                    appender->append(*o.record);
                    ++summary.extracted;
                } catch (const std::exception& e) {
                    summary.failures.push_back({key.serialized(), e.what()});
                }
            }
        }
    }

    summary.requests = requests.load();
    summary.manifest = options.manifest_path
                           ? *options.manifest_path
                           : fs::path(options.cache_path.string() + ".manifest.json");
    json manifest;
    manifest["extracted"] = summary.extracted;
    manifest["skipped"] = summary.skipped;
    manifest["requests"] = summary.requests;
    json failed = json::array();
    for (const auto& f : summary.failures) {
        json e;
        e["key"] = f.key;
        e["error"] = f.error;
        failed.push_back(e);
    }
    manifest["failed"] = failed;
    write_text_file(summary.manifest, manifest.dump(2) + "\n");
    return summary;
}

} // namespace visaff::pipeline
