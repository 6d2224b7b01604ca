#pragma once

#include "visaff/prompting.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace visaff::providers {

enum class Modality { visual, text, audio };
enum class Provider { remote, synthetic };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

struct FeatureKey {
    std::string conv_id;
    std::size_t index = 0;

    bool operator<(const FeatureKey& o) const {
        return std::tie(conv_id, index) < std::tie(o.conv_id, o.index);
    }
    bool operator==(const FeatureKey& o) const {
        return conv_id == o.conv_id && index == o.index;
    }
    std::string serialized() const { return conv_id + "\t" + std::to_string(index); }
};

struct FeatureRecord {
    FeatureKey key;
    Modality modality = Modality::visual;
    Provider provider = Provider::synthetic;
    bool corrupted = false;
    std::vector<float> values; // stored precision; training upcasts to f64

    std::size_t dim() const { return values.size(); }
    std::vector<double> as_f64() const { return {values.begin(), values.end()}; }
};

// Binary feature cache. Layout:
//   header: magic "VAFF" | version u32 | dim u32 | count u64 | modality_tag[8]
//   record: key_len u16 | key bytes (utf-8) | flags u8 | dim x f32 LE | crc32
// All integers little-endian; crc32 covers the record bytes before it.
class FeatureCache {
public:
    FeatureCache() = default;
    FeatureCache(Modality modality, std::uint32_t dim);

    static FeatureCache load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    // Idempotent for identical payloads; throws on a conflicting payload for
    // an existing key or on a dim mismatch. Returns false if already present.
    bool put(const FeatureRecord& record);
    const FeatureRecord* get(const FeatureKey& key) const;
    bool contains(const FeatureKey& key) const { return get(key) != nullptr; }

    Modality modality() const { return modality_; }
    std::uint32_t dim() const { return dim_; }
    std::size_t size() const { return records_.size(); }
    const std::vector<FeatureRecord>& records() const { return records_; } // insertion order

private:
    Modality modality_ = Modality::visual;
    std::uint32_t dim_ = 0;
    std::vector<FeatureRecord> records_;
    std::map<FeatureKey, std::size_t> index_;
};

// Append-oriented writer used by `extract`: each record is written and flushed
// before the header count is committed, so a crash never yields a header that
// claims unwritten records.
class CacheAppender {
public:
    CacheAppender(const std::filesystem::path& path, Modality modality, std::uint32_t dim);
    ~CacheAppender();
    CacheAppender(const CacheAppender&) = delete;
    CacheAppender& operator=(const CacheAppender&) = delete;

    bool contains(const FeatureKey& key) const { return cache_.contains(key); }
    void append(const FeatureRecord& record);
    const FeatureCache& cache() const { return cache_; }

private:
    std::filesystem::path path_;
    FeatureCache cache_;
};

enum class CorruptionMode { blur, swap, dropout };

std::string to_string(CorruptionMode m);
CorruptionMode corruption_mode_from_string(const std::string& s);

struct SyntheticSpec {
    std::size_t num_classes = 4;
    std::size_t visual_dim = 64;
    std::size_t text_dim = 48;
    std::size_t audio_dim = 48;
    std::uint64_t class_centers_seed = 7;
    double noise_sigma = 0.1;
    double corruption_rate = 0.0;
    CorruptionMode corruption_mode = CorruptionMode::blur;
    double informativeness_visual = 1.0;
    double informativeness_text = 1.0;
    double informativeness_audio = 1.0;

    std::size_t dim_of(Modality m) const;
    double informativeness_of(Modality m) const;
    void validate() const;
};

// Shrink factor applied by CorruptionMode::blur.
inline constexpr double kBlurShrink = 0.1;

std::vector<double> class_center(const SyntheticSpec& spec, Modality modality, int label);

// Pure function of (spec, key, modality, label, seed): two processes produce
// identical records. Corruption only ever applies to the visual modality.
FeatureRecord synthesize_features(const SyntheticSpec& spec, const FeatureKey& key, int label,
                                  Modality modality, std::uint64_t seed);

// ---- remote extraction (frozen embedding service client) ----

struct EndpointConfig {
    std::string base_url;
    int timeout_ms = 10000;
    int max_retries = 3; // retries after the first attempt
    int initial_backoff_ms = 50;
};

struct EmbedRequest {
    std::vector<std::string> frames_b64;
    std::string reference_b64;
    std::string prompt;
};

struct EmbedResult {
    std::vector<float> embedding;
    std::uint32_t dim = 0;
    std::string model;
    std::size_t attempts = 0;
};

// POST {base_url}/embed. Retries connection failures and 5xx responses with
// exponential backoff; other non-2xx responses fail immediately with the body
// echoed. Throws RemoteError.
EmbedResult post_embed(const EndpointConfig& endpoint, const EmbedRequest& request);

FeatureRecord extract_remote(const prompting::PromptBundle& bundle,
                             const std::vector<std::vector<std::uint8_t>>& frames,
                             const std::vector<std::uint8_t>& reference,
                             const EndpointConfig& endpoint);

// ---- feature lookup used by training ----

// Indirection point so tests can observe which keys training touches.
class FeatureSource {
public:
    virtual ~FeatureSource() = default;
    virtual const FeatureRecord* find(Modality m, const FeatureKey& key) const = 0;
};

class CacheFeatureSource : public FeatureSource {
public:
    CacheFeatureSource(const FeatureCache* visual, const FeatureCache* text,
                       const FeatureCache* audio)
        : visual_(visual), text_(text), audio_(audio) {}
    const FeatureRecord* find(Modality m, const FeatureKey& key) const override;

private:
    const FeatureCache* visual_;
    const FeatureCache* text_;
    const FeatureCache* audio_;
};

} // namespace visaff::providers
