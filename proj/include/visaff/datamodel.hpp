#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace visaff::data {

enum class Split { train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct EmotionLabel {
    int id = 0;
    std::string name;
};

struct MediaRefs {
    std::optional<std::string> video_path;
    std::optional<std::string> audio_path;
    std::optional<std::string> reference_image_path;
};

struct Utterance {
    std::string conv_id;
    std::size_t index = 0;
    std::string speaker_id;
    std::string transcript;
    std::optional<int> label; // absent at inference time
    MediaRefs media;

    bool operator==(const Utterance& other) const;
};

struct Conversation {
    std::string conv_id;
    Split split = Split::train;
    std::vector<Utterance> utterances;
};

struct Dataset {
    std::string name;
    std::vector<EmotionLabel> labels;
    std::vector<Conversation> conversations;

    std::size_t num_classes() const { return labels.size(); }
    std::size_t total_utterances() const;
    std::vector<const Conversation*> split_conversations(Split s) const;
    void validate() const; // throws ValidationError on any invariant breach
};

// JSONL on disk: header line with the label set, then one utterance per line.
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

// Utterances 0..i inclusive; the causal contract every downstream consumer
// relies on. Throws on out-of-range i.
std::span<const Utterance> history_view(const Conversation& conv, std::size_t i);

} // namespace visaff::data
