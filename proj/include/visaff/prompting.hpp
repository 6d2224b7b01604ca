#pragma once

#include "visaff/datamodel.hpp"

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace visaff::prompting {

struct VadEntry {
    double valence = 0.0;
    double arousal = 0.0;
    double dominance = 0.0;
    bool operator==(const VadEntry&) const = default;
};

// Lowercase token -> (v, a, d), all components in [0, 1]. Immutable after load.
class VadLexicon {
public:
    static VadLexicon load(const std::filesystem::path& tsv_path);
    static VadLexicon from_entries(std::map<std::string, VadEntry> entries);

    std::optional<VadEntry> lookup(const std::string& token) const;
    std::size_t size() const { return entries_.size(); }
    const std::map<std::string, VadEntry>& entries() const { return entries_; }

private:
    std::map<std::string, VadEntry> entries_;
};

enum class Level3 { low, mid, high };
enum class Rate3 { slow, mid, fast };

struct AudioDescriptors {
    Level3 pitch = Level3::mid;
    Level3 energy = Level3::mid;
    Rate3 rate = Rate3::mid;
    bool operator==(const AudioDescriptors&) const = default;
};

std::string to_string(Level3 v);
std::string to_string(Rate3 v);

// The four prompt templates, in composition order. Loaded from the versioned
// template file; sections are separated by ---SECTION--- lines.
struct PromptTemplates {
    std::string task;    // {speaker}
    std::string context; // {lines}
    std::string audio;   // {descriptors}
    std::string vad;     // {vad_entries}

    static PromptTemplates load(const std::filesystem::path& path);
};

struct PromptOptions {
    std::size_t frames_per_clip = 8;
    std::size_t context_window = 8;
    std::size_t vad_top_n = 5;
};

struct PromptBundle {
    std::string conv_id;
    std::size_t index = 0;
    std::vector<std::size_t> frame_indices;
    std::optional<std::string> reference_image;
    std::string task_prompt;
    std::string ctx_prompt;
    std::string aud_prompt;
    std::string vad_prompt;
    std::string composed;
};

inline constexpr const char* kPromptSeparator = "\n\n";
inline constexpr const char* kNoAudioSentence = "No audio description available.";
inline constexpr const char* kNoVadSentence =
    "No affective word priors found in the utterance.";

// min(k, total_frames) uniformly spaced indices: floor(j * total / m).
std::vector<std::size_t> sample_frame_indices(std::size_t total_frames, std::size_t k);

std::string build_task_prompt(const data::Utterance& utterance, const PromptTemplates& tpl);

std::string build_context_prompt(std::span<const data::Utterance> history, std::size_t window,
                                 const PromptTemplates& tpl);

std::string build_audio_prompt(const std::optional<AudioDescriptors>& descriptors,
                               const PromptTemplates& tpl);

// Inverse of the descriptor rendering inside build_audio_prompt.
std::optional<AudioDescriptors> parse_descriptors(const std::string& rendered);

std::optional<VadEntry> vad_lookup(const std::string& token, const VadLexicon& lex);

// Lowercased, punctuation-stripped whitespace tokens, in order.
std::vector<std::string> tokenize(const std::string& text);

// Affective salience used to pick lexicon hits: distance from neutral.
inline double vad_salience(const VadEntry& e) {
    return std::abs(e.valence - 0.5) + std::abs(e.arousal - 0.5);
}

std::string build_vad_prompt(const std::string& transcript, const VadLexicon& lex,
                             std::size_t top_n, const PromptTemplates& tpl);

// Concatenation in the order task, ctx, aud, vad; empty parts are skipped.
std::string compose_prompt(const std::string& task, const std::string& ctx,
                           const std::string& aud, const std::string& vad);

PromptBundle build_prompt_bundle(const data::Conversation& conv, std::size_t index,
                                 std::size_t total_frames, const PromptTemplates& tpl,
                                 const VadLexicon& lex, const PromptOptions& opts,
                                 const std::optional<AudioDescriptors>& descriptors = std::nullopt);

} // namespace visaff::prompting
