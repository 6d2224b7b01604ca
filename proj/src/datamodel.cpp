#include "visaff/datamodel.hpp"

#include "visaff/errors.hpp"

#include <json.hpp>

#include <fstream>
#include <map>
#include <set>
#include <sstream>

using nlohmann::json;

namespace visaff::data {

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split: \"" + s + "\"");
}

bool Utterance::operator==(const Utterance& other) const {
    return conv_id == other.conv_id && index == other.index && speaker_id == other.speaker_id &&
           transcript == other.transcript && label == other.label &&
           media.video_path == other.media.video_path &&
           media.audio_path == other.media.audio_path &&
           media.reference_image_path == other.media.reference_image_path;
}

std::size_t Dataset::total_utterances() const {
    std::size_t n = 0;
    for (const auto& c : conversations) n += c.utterances.size();
    return n;
}

std::vector<const Conversation*> Dataset::split_conversations(Split s) const {
    std::vector<const Conversation*> out;
    for (const auto& c : conversations) {
        if (c.split == s) out.push_back(&c);
    }
    return out;
}

void Dataset::validate() const {
    if (labels.size() < 2) throw ValidationError("label set must contain at least 2 labels");
    std::set<std::string> label_names;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i].id != static_cast<int>(i)) {
            throw ValidationError("label ids must be dense 0..K-1");
        }
        if (!label_names.insert(labels[i].name).second) {
            throw ValidationError("duplicate label name: " + labels[i].name);
        }
    }
    const int k = static_cast<int>(labels.size());
    std::map<std::string, Split> split_of;
    for (const auto& conv : conversations) {
        auto [it, inserted] = split_of.emplace(conv.conv_id, conv.split);
        if (!inserted) {
            throw ValidationError("conv_id appears in more than one conversation/split: " +
                                  conv.conv_id);
        }
        for (std::size_t i = 0; i < conv.utterances.size(); ++i) {
            const auto& u = conv.utterances[i];
            if (u.conv_id != conv.conv_id) {
                throw ValidationError("utterance conv_id mismatch in " + conv.conv_id);
            }
            if (u.index != i) {
                throw ValidationError("gapless ordering violated in conversation " + conv.conv_id);
            }
            if (u.label && (*u.label < 0 || *u.label >= k)) {
                throw ValidationError("label id out of range in conversation " + conv.conv_id);
            }
        }
    }
}

namespace {

std::optional<std::string> opt_string(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
}

json opt_to_json(const std::optional<std::string>& v) {
    if (!v) return nullptr;
    return *v;
}

} // namespace

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset: " + path.string());

    Dataset ds;
    ds.name = path.stem().string();

    std::string line;
    std::size_t line_no = 0;

    if (!std::getline(in, line)) throw ValidationError("dataset is empty: " + path.string());
    ++line_no;
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw ValidationError("malformed header (line 1): " + std::string(e.what()));
    }
    if (!header.contains("schema") || header.at("schema") != "visaff-dataset/1") {
        throw ValidationError("unsupported dataset schema (line 1)");
    }
    if (!header.contains("labels") || !header.at("labels").is_array()) {
        throw ValidationError("header missing labels array (line 1)");
    }
    int next_id = 0;
    for (const auto& name : header.at("labels")) {
        ds.labels.push_back({next_id++, name.get<std::string>()});
    }

    std::map<std::string, std::size_t> conv_index; // conv_id -> position, insertion order kept
    std::set<std::pair<std::string, std::size_t>> seen_keys;

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError("malformed line " + std::to_string(line_no) + ": " + e.what());
        }
        Utterance u;
        Split split;
        try {
            u.conv_id = j.at("conv_id").get<std::string>();
            u.index = j.at("index").get<std::size_t>();
            split = split_from_string(j.at("split").get<std::string>());
            u.speaker_id = j.at("speaker_id").get<std::string>();
            u.transcript = j.at("transcript").get<std::string>();
            if (j.contains("label") && !j.at("label").is_null()) {
                u.label = j.at("label").get<int>();
            }
            u.media.video_path = opt_string(j, "video_path");
            u.media.audio_path = opt_string(j, "audio_path");
            u.media.reference_image_path = opt_string(j, "reference_image_path");
        } catch (const json::exception& e) {
            throw ValidationError("malformed line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!seen_keys.insert({u.conv_id, u.index}).second) {
            throw ValidationError("duplicate (conv_id, index) at line " + std::to_string(line_no) +
                                  ": (" + u.conv_id + ", " + std::to_string(u.index) + ")");
        }
        auto it = conv_index.find(u.conv_id);
        if (it == conv_index.end()) {
            conv_index.emplace(u.conv_id, ds.conversations.size());
            Conversation conv;
            conv.conv_id = u.conv_id;
            conv.split = split;
            ds.conversations.push_back(std::move(conv));
            it = conv_index.find(u.conv_id);
        }
        Conversation& conv = ds.conversations[it->second];
        if (conv.split != split) {
            throw ValidationError("conversation " + u.conv_id +
                                  " appears with two different splits (line " +
                                  std::to_string(line_no) + ")");
        }
        conv.utterances.push_back(std::move(u));
    }

    ds.validate();
    return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open dataset for writing: " + path.string());

    json header;
    header["schema"] = "visaff-dataset/1";
    json labels = json::array();
    for (const auto& l : dataset.labels) labels.push_back(l.name);
    header["labels"] = labels;
    out << header.dump() << "\n";

    for (const auto& conv : dataset.conversations) {
        for (const auto& u : conv.utterances) {
            json j;
            j["conv_id"] = u.conv_id;
            j["index"] = u.index;
            j["split"] = to_string(conv.split);
            j["speaker_id"] = u.speaker_id;
            j["transcript"] = u.transcript;
            j["label"] = u.label ? json(*u.label) : json(nullptr);
            j["video_path"] = opt_to_json(u.media.video_path);
            j["audio_path"] = opt_to_json(u.media.audio_path);
            j["reference_image_path"] = opt_to_json(u.media.reference_image_path);
            out << j.dump() << "\n";
        }
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::span<const Utterance> history_view(const Conversation& conv, std::size_t i) {
    if (i >= conv.utterances.size()) {
        throw ValidationError("history_view index out of range: " + std::to_string(i));
    }
    return {conv.utterances.data(), i + 1};
}

} // namespace visaff::data
