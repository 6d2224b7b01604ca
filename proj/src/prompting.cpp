#include "visaff/prompting.hpp"

#include "visaff/errors.hpp"
#include "visaff/util.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace visaff::prompting {

VadLexicon VadLexicon::load(const std::filesystem::path& tsv_path) {
    const std::string text = read_text_file(tsv_path);
    std::map<std::string, VadEntry> entries;
    std::size_t line_no = 0;
    for (const std::string& raw : split_lines(text)) {
        ++line_no;
        if (raw.empty() || raw[0] == '#') continue;
        std::istringstream ss(raw);
        std::string term, v, a, d;
        if (!std::getline(ss, term, '\t') || !std::getline(ss, v, '\t') ||
            !std::getline(ss, a, '\t') || !std::getline(ss, d, '\t')) {
            throw ValidationError("vad lexicon: malformed line " + std::to_string(line_no));
        }
        VadEntry e{std::stod(v), std::stod(a), std::stod(d)};
        if (term.empty()) throw ValidationError("vad lexicon: empty term at line " + std::to_string(line_no));
        for (double x : {e.valence, e.arousal, e.dominance}) {
            if (!(x >= 0.0 && x <= 1.0)) {
                throw ValidationError("vad lexicon: value out of [0,1] at line " + std::to_string(line_no));
            }
        }
        entries[to_lower(term)] = e;
    }
    return from_entries(std::move(entries));
}

VadLexicon VadLexicon::from_entries(std::map<std::string, VadEntry> entries) {
    VadLexicon lex;
    lex.entries_ = std::move(entries);
    return lex;
}

std::optional<VadEntry> VadLexicon::lookup(const std::string& token) const {
    auto it = entries_.find(to_lower(token));
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

std::string to_string(Level3 v) {
    switch (v) {
        case Level3::low: return "low";
        case Level3::mid: return "mid";
        case Level3::high: return "high";
    }
    return "mid";
}

std::string to_string(Rate3 v) {
    switch (v) {
        case Rate3::slow: return "slow";
        case Rate3::mid: return "mid";
        case Rate3::fast: return "fast";
    }
    return "mid";
}

PromptTemplates PromptTemplates::load(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    std::vector<std::string> sections;
    std::string cur;
    for (const std::string& line : split_lines(text)) {
        if (line == "---SECTION---") {
            sections.push_back(cur);
            cur.clear();
        } else {
            if (!cur.empty()) cur += "\n";
            cur += line;
        }
    }
    sections.push_back(cur);
    if (sections.size() != 4) {
        throw ValidationError("template file must contain exactly 4 sections, got " +
                              std::to_string(sections.size()));
    }
    PromptTemplates tpl;
    tpl.task = sections[0];
    tpl.context = sections[1];
    tpl.audio = sections[2];
    tpl.vad = sections[3];
    return tpl;
}

namespace {

std::string substitute(const std::string& tpl, const std::string& placeholder,
                       const std::string& value) {
    auto pos = tpl.find(placeholder);
    if (pos == std::string::npos) {
        throw ValidationError("template missing placeholder " + placeholder);
    }
    std::string out = tpl;
    while (pos != std::string::npos) {
        out.replace(pos, placeholder.size(), value);
        pos = out.find(placeholder, pos + value.size());
    }
    return out;
}

} // namespace

std::vector<std::size_t> sample_frame_indices(std::size_t total_frames, std::size_t k) {
    if (total_frames == 0) throw ValidationError("zero-length clip");
    if (k == 0) throw ValidationError("frame count must be positive");
    const std::size_t m = std::min(k, total_frames);
    std::vector<std::size_t> indices(m);
    for (std::size_t j = 0; j < m; ++j) {
        indices[j] = std::min(j * total_frames / m, total_frames - 1);
    }
    return indices;
}

std::string build_task_prompt(const data::Utterance& utterance, const PromptTemplates& tpl) {
    if (utterance.speaker_id.empty()) throw ValidationError("speaker_id must be non-empty");
    return substitute(tpl.task, "{speaker}", utterance.speaker_id);
}

std::string build_context_prompt(std::span<const data::Utterance> history, std::size_t window,
                                 const PromptTemplates& tpl) {
    if (history.empty()) throw ValidationError("context history must be non-empty");
    if (window == 0) throw ValidationError("context window must be positive");
    const std::size_t n = std::min(window, history.size());
    const std::size_t start = history.size() - n;
    std::string lines;
    for (std::size_t j = 0; j < n; ++j) {
        const auto& u = history[start + j];
        if (j > 0) lines += "\n";
        lines += u.speaker_id + ": " + u.transcript;
        if (start + j + 1 == history.size()) lines += " [current]";
    }
    return substitute(tpl.context, "{lines}", lines);
}

std::string build_audio_prompt(const std::optional<AudioDescriptors>& descriptors,
                               const PromptTemplates& tpl) {
    if (!descriptors) return kNoAudioSentence;
    const std::string rendered = "pitch: " + to_string(descriptors->pitch) +
                                 ", energy: " + to_string(descriptors->energy) +
                                 ", rate: " + to_string(descriptors->rate);
    return substitute(tpl.audio, "{descriptors}", rendered);
}

namespace {

template <typename E>
std::optional<E> parse_enum_after(const std::string& text, const std::string& key,
                                  const std::vector<std::pair<std::string, E>>& values) {
    auto pos = text.find(key);
    if (pos == std::string::npos) return std::nullopt;
    pos += key.size();
    for (const auto& [word, val] : values) {
        if (text.compare(pos, word.size(), word) == 0) return val;
    }
    return std::nullopt;
}

} // namespace

std::optional<AudioDescriptors> parse_descriptors(const std::string& rendered) {
    auto pitch = parse_enum_after<Level3>(rendered, "pitch: ",
                                          {{"low", Level3::low}, {"mid", Level3::mid}, {"high", Level3::high}});
    auto energy = parse_enum_after<Level3>(rendered, "energy: ",
                                           {{"low", Level3::low}, {"mid", Level3::mid}, {"high", Level3::high}});
    auto rate = parse_enum_after<Rate3>(rendered, "rate: ",
                                        {{"slow", Rate3::slow}, {"mid", Rate3::mid}, {"fast", Rate3::fast}});
    if (!pitch || !energy || !rate) return std::nullopt;
    return AudioDescriptors{*pitch, *energy, *rate};
}

std::optional<VadEntry> vad_lookup(const std::string& token, const VadLexicon& lex) {
    return lex.lookup(token);
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char raw : text) {
        unsigned char c = static_cast<unsigned char>(raw);
        if (std::isalnum(c) || raw == '\'') {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

std::string build_vad_prompt(const std::string& transcript, const VadLexicon& lex,
                             std::size_t top_n, const PromptTemplates& tpl) {
    struct Hit {
        std::string token;
        VadEntry entry;
        double salience;
        std::size_t position;
    };
    std::vector<Hit> hits;
    std::size_t pos = 0;
    for (const std::string& token : tokenize(transcript)) {
        const std::size_t this_pos = pos++;
        if (std::any_of(hits.begin(), hits.end(),
                        [&](const Hit& h) { return h.token == token; })) {
            continue; // first occurrence decides the tie-break position
        }
        auto entry = lex.lookup(token);
        if (!entry) continue;
        hits.push_back({token, *entry, vad_salience(*entry), this_pos});
    }
    if (hits.empty()) return kNoVadSentence;

    std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
        if (a.salience != b.salience) return a.salience > b.salience;
        return a.position < b.position;
    });
    if (hits.size() > top_n) hits.resize(top_n);

    std::ostringstream entries;
    entries << std::fixed << std::setprecision(2);
    for (std::size_t i = 0; i < hits.size(); ++i) {
        if (i > 0) entries << "; ";
        entries << hits[i].token << " (V=" << hits[i].entry.valence
                << ", A=" << hits[i].entry.arousal << ", D=" << hits[i].entry.dominance << ")";
    }
    return substitute(tpl.vad, "{vad_entries}", entries.str());
}

std::string compose_prompt(const std::string& task, const std::string& ctx,
                           const std::string& aud, const std::string& vad) {
    if (task.empty()) throw ValidationError("task prompt must be non-empty");
    std::string out;
    for (const std::string* part : {&task, &ctx, &aud, &vad}) {
        if (part->empty()) continue;
        if (!out.empty()) out += kPromptSeparator;
        out += *part;
    }
    return out;
}

PromptBundle build_prompt_bundle(const data::Conversation& conv, std::size_t index,
                                 std::size_t total_frames, const PromptTemplates& tpl,
                                 const VadLexicon& lex, const PromptOptions& opts,
                                 const std::optional<AudioDescriptors>& descriptors) {
    const auto history = data::history_view(conv, index);
    const data::Utterance& u = history.back();

    PromptBundle bundle;
    bundle.conv_id = conv.conv_id;
    bundle.index = index;
    bundle.frame_indices = sample_frame_indices(total_frames, opts.frames_per_clip);
    bundle.reference_image = u.media.reference_image_path;
    bundle.task_prompt = build_task_prompt(u, tpl);
    bundle.ctx_prompt = build_context_prompt(history, opts.context_window, tpl);
    bundle.aud_prompt = build_audio_prompt(descriptors, tpl);
    bundle.vad_prompt = build_vad_prompt(u.transcript, lex, opts.vad_top_n, tpl);
    bundle.composed = compose_prompt(bundle.task_prompt, bundle.ctx_prompt, bundle.aud_prompt,
                                     bundle.vad_prompt);
    return bundle;
}

} // namespace visaff::prompting
