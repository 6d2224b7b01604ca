#include "visaff/benchmarks.hpp"

#include "visaff/errors.hpp"
#include "visaff/rng.hpp"

#include <json.hpp>

#include <array>

using nlohmann::json;

namespace visaff::bench {

namespace {

// transcripts only flavor the prompts; features are synthesized separately
constexpr std::array<const char*, 8> kSentencePool = {
    "I feel so happy about this, it is wonderful news",
    "That is terrible, I am really sad and disappointed",
    "Stop it right now, I am furious and angry with you",
    "I am scared, this place makes me nervous and anxious",
    "Oh wow, I am so surprised, I did not expect that at all",
    "Fine, whatever you say, it does not matter to me",
    "That is gross, I am disgusted by the whole thing",
    "Okay, let us stay calm and talk this through",
};

} // namespace

SyntheticBenchmark SyntheticBenchmark::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("benchmark spec: invalid JSON: ") + e.what());
    }
    SyntheticBenchmark b;
    b.name = j.value("name", std::string("custom"));
    b.label_names = j.at("label_names").get<std::vector<std::string>>();
    b.train_convs = j.value("train_convs", b.train_convs);
    b.val_convs = j.value("val_convs", b.val_convs);
    b.test_convs = j.value("test_convs", b.test_convs);
    b.min_utterances = j.value("min_utterances", b.min_utterances);
    b.max_utterances = j.value("max_utterances", b.max_utterances);

    providers::SyntheticSpec& f = b.features;
    f.num_classes = b.label_names.size();
    f.visual_dim = j.value("visual_dim", f.visual_dim);
    f.text_dim = j.value("text_dim", f.text_dim);
    f.audio_dim = j.value("audio_dim", f.audio_dim);
    f.class_centers_seed = j.value("class_centers_seed", f.class_centers_seed);
    f.noise_sigma = j.value("noise_sigma", f.noise_sigma);
    f.corruption_rate = j.value("corruption_rate", f.corruption_rate);
    if (j.contains("corruption_mode")) {
        f.corruption_mode = providers::corruption_mode_from_string(j.at("corruption_mode"));
    }
    f.informativeness_visual = j.value("informativeness_visual", f.informativeness_visual);
    f.informativeness_text = j.value("informativeness_text", f.informativeness_text);
    f.informativeness_audio = j.value("informativeness_audio", f.informativeness_audio);
    b.validate();
    return b;
}

std::string SyntheticBenchmark::to_json() const {
    json j;
    j["name"] = name;
    j["label_names"] = label_names;
    j["train_convs"] = train_convs;
    j["val_convs"] = val_convs;
    j["test_convs"] = test_convs;
    j["min_utterances"] = min_utterances;
    j["max_utterances"] = max_utterances;
    j["visual_dim"] = features.visual_dim;
    j["text_dim"] = features.text_dim;
    j["audio_dim"] = features.audio_dim;
    j["class_centers_seed"] = features.class_centers_seed;
    j["noise_sigma"] = features.noise_sigma;
    j["corruption_rate"] = features.corruption_rate;
    j["corruption_mode"] = providers::to_string(features.corruption_mode);
    j["informativeness_visual"] = features.informativeness_visual;
    j["informativeness_text"] = features.informativeness_text;
    j["informativeness_audio"] = features.informativeness_audio;
    return j.dump(2);
}

void SyntheticBenchmark::validate() const {
    if (label_names.size() < 2) throw ValidationError("benchmark: need >= 2 labels");
    if (label_names.size() != features.num_classes) {
        throw ValidationError("benchmark: label count does not match feature spec");
    }
    if (min_utterances == 0 || max_utterances < min_utterances) {
        throw ValidationError("benchmark: bad utterance range");
    }
    if (train_convs == 0 || val_convs == 0 || test_convs == 0) {
        throw ValidationError("benchmark: every split needs conversations");
    }
    features.validate();
}

SyntheticBenchmark separable_benchmark() {
    SyntheticBenchmark b;
    b.name = "separable";
    b.label_names = {"neutral", "joy", "sadness", "anger"};
    b.train_convs = 40;
    b.val_convs = 10;
    b.test_convs = 10;
    b.min_utterances = 6;
    b.max_utterances = 10;
    b.features.num_classes = 4;
    b.features.visual_dim = 24;
    b.features.text_dim = 16;
    b.features.audio_dim = 16;
    b.features.noise_sigma = 0.05;
    b.features.corruption_rate = 0.0;
    b.features.informativeness_visual = 1.0;
    b.features.informativeness_text = 1.0;
    b.features.informativeness_audio = 1.0;
    b.validate();
    return b;
}

SyntheticBenchmark corrupted_benchmark() {
    SyntheticBenchmark b;
    b.name = "corrupted";
    b.label_names = {"neutral", "joy", "sadness", "anger", "fear", "surprise"};
    b.train_convs = 48;
    b.val_convs = 12;
    b.test_convs = 12;
    b.min_utterances = 6;
    b.max_utterances = 10;
    b.features.num_classes = 6;
    b.features.visual_dim = 24;
    b.features.text_dim = 16;
    b.features.audio_dim = 16;
    b.features.noise_sigma = 0.9;
    b.features.corruption_rate = 0.3;
    b.features.corruption_mode = providers::CorruptionMode::blur;
    b.features.informativeness_visual = 1.0;
    b.features.informativeness_text = 0.75;
    b.features.informativeness_audio = 0.75;
    b.validate();
    return b;
}

train::TrainConfig benchmark_train_config() {
    train::TrainConfig c;
    c.hidden_dim = 32;
    c.proj_dim = 16;
    c.batch_size = 8;
    c.epochs = 30;
    c.patience = 10;
    c.learning_rate = 3e-3;
    return c;
}

data::Dataset make_dataset(const SyntheticBenchmark& bench, std::uint64_t seed) {
    bench.validate();
    auto rng = make_rng(seed, "data");

    data::Dataset ds;
    ds.name = bench.name;
    for (std::size_t i = 0; i < bench.label_names.size(); ++i) {
        ds.labels.push_back({static_cast<int>(i), bench.label_names[i]});
    }

    auto add_split = [&](data::Split split, std::size_t count, const std::string& prefix) {
        for (std::size_t ci = 0; ci < count; ++ci) {
            data::Conversation conv;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%s_%03zu", prefix.c_str(), ci);
            conv.conv_id = buf;
            conv.split = split;
            const std::size_t span = bench.max_utterances - bench.min_utterances + 1;
            const std::size_t len = bench.min_utterances + rng() % span;
            for (std::size_t i = 0; i < len; ++i) {
                data::Utterance u;
                u.conv_id = conv.conv_id;
                u.index = i;
                u.speaker_id = (i % 2 == 0) ? "speaker_a" : "speaker_b";
                u.label = static_cast<int>(rng() % bench.label_names.size());
                u.transcript = kSentencePool[rng() % kSentencePool.size()];
                conv.utterances.push_back(std::move(u));
            }
            ds.conversations.push_back(std::move(conv));
        }
    };

    add_split(data::Split::train, bench.train_convs, "train");
    add_split(data::Split::val, bench.val_convs, "val");
    add_split(data::Split::test, bench.test_convs, "test");
    ds.validate();
    return ds;
}

providers::FeatureCache make_cache(const SyntheticBenchmark& bench, const data::Dataset& dataset,
                                   providers::Modality modality, std::uint64_t seed) {
    providers::FeatureCache cache(modality,
                                  static_cast<std::uint32_t>(bench.features.dim_of(modality)));
    for (const auto& conv : dataset.conversations) {
        for (const auto& u : conv.utterances) {
            if (!u.label) throw ValidationError("synthetic generation requires labels");
            providers::FeatureKey key{u.conv_id, u.index};
            cache.put(providers::synthesize_features(bench.features, key, *u.label, modality, seed));
        }
    }
    return cache;
}

SyntheticBundle make_bundle(const SyntheticBenchmark& bench, std::uint64_t seed) {
    SyntheticBundle bundle;
    bundle.dataset = make_dataset(bench, seed);
    bundle.visual = make_cache(bench, bundle.dataset, providers::Modality::visual, seed);
    bundle.text = make_cache(bench, bundle.dataset, providers::Modality::text, seed);
    bundle.audio = make_cache(bench, bundle.dataset, providers::Modality::audio, seed);
    return bundle;
}

} // namespace visaff::bench
