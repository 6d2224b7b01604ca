#include "visaff/providers.hpp"

#include "visaff/errors.hpp"
#include "visaff/rng.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace visaff::providers {

std::string to_string(Modality m) {
    switch (m) {
        case Modality::visual: return "visual";
        case Modality::text: return "text";
        case Modality::audio: return "audio";
    }
    return "visual";
}

Modality modality_from_string(const std::string& s) {
    if (s == "visual") return Modality::visual;
    if (s == "text") return Modality::text;
    if (s == "audio") return Modality::audio;
    throw ValidationError("unknown modality: " + s);
}

namespace {

constexpr char kMagic[4] = {'V', 'A', 'F', 'F'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFlagCorrupted = 0x01;
constexpr std::uint8_t kFlagRemote = 0x02;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xff));
}

std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int b = 3; b >= 0; --b) v = (v << 8) | p[b];
    return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int b = 7; b >= 0; --b) v = (v << 8) | p[b];
    return v;
}

std::vector<std::uint8_t> encode_record(const FeatureRecord& rec) {
    const std::string key = rec.key.serialized();
    if (key.size() > 0xffff) throw ValidationError("cache key too long");
    std::vector<std::uint8_t> body;
    put_u16(body, static_cast<std::uint16_t>(key.size()));
    body.insert(body.end(), key.begin(), key.end());
    std::uint8_t flags = 0;
    if (rec.corrupted) flags |= kFlagCorrupted;
    if (rec.provider == Provider::remote) flags |= kFlagRemote;
    body.push_back(flags);
    for (float f : rec.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof(bits));
        put_u32(body, bits);
    }
    const std::uint32_t crc =
        static_cast<std::uint32_t>(::crc32(0L, body.data(), static_cast<uInt>(body.size())));
    put_u32(body, crc);
    return body;
}

std::vector<std::uint8_t> encode_header(Modality modality, std::uint32_t dim, std::uint64_t count) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_u32(out, dim);
    put_u64(out, count);
    std::string tag = to_string(modality);
    tag.resize(8, '\0');
    out.insert(out.end(), tag.begin(), tag.end());
    return out;
}

constexpr std::size_t kHeaderSize = 4 + 4 + 4 + 8 + 8;
constexpr std::size_t kCountOffset = 4 + 4 + 4;

} // namespace

FeatureCache::FeatureCache(Modality modality, std::uint32_t dim) : modality_(modality), dim_(dim) {
    if (dim == 0) throw ValidationError("cache dim must be positive");
}

bool FeatureCache::put(const FeatureRecord& record) {
    if (record.dim() != dim_) {
        throw ValidationError("cache dim mismatch: record dim " + std::to_string(record.dim()) +
                              ", cache dim " + std::to_string(dim_));
    }
    if (record.modality != modality_) {
        throw ValidationError("cache modality mismatch for key " + record.key.serialized());
    }
    for (float v : record.values) {
        if (!std::isfinite(v)) {
            throw ValidationError("feature vector contains a non-finite component: " +
                                  record.key.serialized());
        }
    }
    auto it = index_.find(record.key);
    if (it != index_.end()) {
        const FeatureRecord& existing = records_[it->second];
        if (existing.values != record.values || existing.corrupted != record.corrupted ||
            existing.provider != record.provider) {
            throw ValidationError("conflicting payload for existing key " + record.key.serialized());
        }
        return false;
    }
    index_.emplace(record.key, records_.size());
    records_.push_back(record);
    return true;
}

const FeatureRecord* FeatureCache::get(const FeatureKey& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return nullptr;
    return &records_[it->second];
}

void FeatureCache::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open cache for writing: " + path.string());
    auto header = encode_header(modality_, dim_, records_.size());
    out.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
    for (const auto& rec : records_) {
        auto body = encode_record(rec);
        out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    }
    if (!out) throw IoError("cache write failed: " + path.string());
}

FeatureCache FeatureCache::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open cache: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < kHeaderSize) throw ValidationError("cache truncated: " + path.string());
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw ValidationError("bad cache magic: " + path.string());
    }
    const std::uint32_t version = get_u32(bytes.data() + 4);
    if (version != kVersion) {
        throw ValidationError("unsupported cache version " + std::to_string(version));
    }
    const std::uint32_t dim = get_u32(bytes.data() + 8);
    const std::uint64_t count = get_u64(bytes.data() + 12);
    std::string tag(reinterpret_cast<const char*>(bytes.data() + 20), 8);
    tag.erase(std::find(tag.begin(), tag.end(), '\0'), tag.end());

    FeatureCache cache(modality_from_string(tag), dim);
    std::size_t off = kHeaderSize;
    for (std::uint64_t r = 0; r < count; ++r) {
        if (off + 2 > bytes.size()) throw ValidationError("cache record truncated: " + path.string());
        const std::uint16_t key_len = get_u16(bytes.data() + off);
        const std::size_t body_len = 2 + key_len + 1 + static_cast<std::size_t>(dim) * 4;
        if (off + body_len + 4 > bytes.size()) {
            throw ValidationError("cache record truncated: " + path.string());
        }
        const std::uint32_t stored_crc = get_u32(bytes.data() + off + body_len);
        const std::uint32_t actual_crc = static_cast<std::uint32_t>(
            ::crc32(0L, bytes.data() + off, static_cast<uInt>(body_len)));
        if (stored_crc != actual_crc) {
            throw ValidationError("cache checksum failure in record " + std::to_string(r) + " of " +
                                  path.string());
        }
        const char* key_bytes = reinterpret_cast<const char*>(bytes.data() + off + 2);
        const std::string key_str(key_bytes, key_len);
        const auto tab = key_str.find('\t');
        if (tab == std::string::npos) throw ValidationError("cache key malformed: " + key_str);

        FeatureRecord rec;
        rec.key.conv_id = key_str.substr(0, tab);
        rec.key.index = static_cast<std::size_t>(std::stoull(key_str.substr(tab + 1)));
        const std::uint8_t flags = bytes[off + 2 + key_len];
        rec.corrupted = (flags & kFlagCorrupted) != 0;
        rec.provider = (flags & kFlagRemote) ? Provider::remote : Provider::synthetic;
        rec.modality = cache.modality();
        rec.values.resize(dim);
        const std::uint8_t* vec = bytes.data() + off + 2 + key_len + 1;
        for (std::uint32_t j = 0; j < dim; ++j) {
            const std::uint32_t bits = get_u32(vec + 4 * j);
            float f;
            std::memcpy(&f, &bits, sizeof(f));
            rec.values[j] = f;
        }
        cache.put(rec);
        off += body_len + 4;
    }
    return cache;
}

CacheAppender::CacheAppender(const std::filesystem::path& path, Modality modality,
                             std::uint32_t dim)
    : path_(path) {
    if (std::filesystem::exists(path)) {
        cache_ = FeatureCache::load(path);
        if (cache_.modality() != modality || cache_.dim() != dim) {
            throw ValidationError("existing cache header incompatible: " + path.string());
        }
    } else {
        cache_ = FeatureCache(modality, dim);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot create cache: " + path.string());
        auto header = encode_header(modality, dim, 0);
        out.write(reinterpret_cast<const char*>(header.data()),
                  static_cast<std::streamsize>(header.size()));
        if (!out) throw IoError("cache write failed: " + path.string());
    }
}

CacheAppender::~CacheAppender() = default;

void CacheAppender::append(const FeatureRecord& record) {
    if (!cache_.put(record)) return; // idempotent re-append, nothing to write
    std::fstream out(path_, std::ios::binary | std::ios::in | std::ios::out);
    if (!out) throw IoError("cannot open cache for append: " + path_.string());
    out.seekp(0, std::ios::end);
    auto body = encode_record(record);
    out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    out.flush();
    if (!out) throw IoError("cache append failed: " + path_.string());
    // commit: bump the header count only after the record bytes are down
    std::vector<std::uint8_t> count_bytes;
    put_u64(count_bytes, cache_.size());
    out.seekp(kCountOffset, std::ios::beg);
    out.write(reinterpret_cast<const char*>(count_bytes.data()),
              static_cast<std::streamsize>(count_bytes.size()));
    out.flush();
    if (!out) throw IoError("cache commit failed: " + path_.string());
}

std::string to_string(CorruptionMode m) {
    switch (m) {
        case CorruptionMode::blur: return "blur";
        case CorruptionMode::swap: return "swap";
        case CorruptionMode::dropout: return "dropout";
    }
    return "blur";
}

CorruptionMode corruption_mode_from_string(const std::string& s) {
    if (s == "blur") return CorruptionMode::blur;
    if (s == "swap") return CorruptionMode::swap;
    if (s == "dropout") return CorruptionMode::dropout;
    throw ValidationError("unknown corruption mode: " + s);
}

std::size_t SyntheticSpec::dim_of(Modality m) const {
    switch (m) {
        case Modality::visual: return visual_dim;
        case Modality::text: return text_dim;
        case Modality::audio: return audio_dim;
    }
    return visual_dim;
}

double SyntheticSpec::informativeness_of(Modality m) const {
    switch (m) {
        case Modality::visual: return informativeness_visual;
        case Modality::text: return informativeness_text;
        case Modality::audio: return informativeness_audio;
    }
    return informativeness_visual;
}

void SyntheticSpec::validate() const {
    if (num_classes < 2) throw ValidationError("synthetic spec: num_classes must be >= 2");
    for (std::size_t d : {visual_dim, text_dim, audio_dim}) {
        if (d < 2) throw ValidationError("synthetic spec: dims must be >= 2");
        if (d < num_classes) {
            throw ValidationError("synthetic spec: dims must be >= num_classes "
                                  "(orthonormal class centers)");
        }
    }
    if (!(noise_sigma >= 0.0)) throw ValidationError("synthetic spec: noise_sigma must be >= 0");
    if (corruption_rate < 0.0 || corruption_rate > 1.0) {
        throw ValidationError("synthetic spec: corruption_rate must be in [0,1]");
    }
    for (double x : {informativeness_visual, informativeness_text, informativeness_audio}) {
        if (x < 0.0 || x > 1.0) {
            throw ValidationError("synthetic spec: informativeness must be in [0,1]");
        }
    }
}

namespace {
// Equidistant class geometry: gaussian draws orthonormalized by Gram-Schmidt
// and scaled, so every pair of centers sits exactly kCenterScale * sqrt(2)
// apart in every modality. Requires dim >= num_classes.
constexpr double kCenterScale = 4.0;
} // namespace

std::vector<double> class_center(const SyntheticSpec& spec, Modality modality, int label) {
    const std::size_t dim = spec.dim_of(modality);
    const std::size_t k = spec.num_classes;
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
        throw ValidationError("class_center: label out of range");
    }
    auto rng = make_rng(spec.class_centers_seed, "centers/" + to_string(modality));
    std::vector<std::vector<double>> basis;
    for (std::size_t c = 0; c <= static_cast<std::size_t>(label); ++c) {
        std::vector<double> v(dim);
        for (double& x : v) x = normal(rng);
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::size_t j = 0; j < dim; ++j) dot += v[j] * b[j];
            for (std::size_t j = 0; j < dim; ++j) v[j] -= dot * b[j];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-9) throw ValidationError("class_center: degenerate draw");
        for (double& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    std::vector<double> center = basis.back();
    for (double& x : center) x *= kCenterScale;
    return center;
}

FeatureRecord synthesize_features(const SyntheticSpec& spec, const FeatureKey& key, int label,
                                  Modality modality, std::uint64_t seed) {
    spec.validate();
    if (label < 0 || static_cast<std::size_t>(label) >= spec.num_classes) {
        throw ValidationError("synthesize_features: label out of range");
    }
    const std::size_t dim = spec.dim_of(modality);
    const double info = spec.informativeness_of(modality);

    auto rng = std::mt19937_64(
        mix64(substream_seed(seed, "data") ^ fnv1a64(key.serialized()) ^
              fnv1a64(to_string(modality))));

    // draw order is part of the determinism contract: other-class, noise, corruption
    int other = label;
    if (spec.num_classes > 1) {
        const auto pick = static_cast<int>(rng() % (spec.num_classes - 1));
        other = pick >= label ? pick + 1 : pick;
    }

    const std::vector<double> own = class_center(spec, modality, label);
    const std::vector<double> alt = class_center(spec, modality, other);
    std::vector<double> vec(dim);
    for (std::size_t j = 0; j < dim; ++j) {
        vec[j] = info * own[j] + (1.0 - info) * alt[j] + normal(rng, 0.0, spec.noise_sigma);
    }

    FeatureRecord rec;
    rec.key = key;
    rec.modality = modality;
    rec.provider = Provider::synthetic;
    if (modality == Modality::visual && spec.corruption_rate > 0.0 &&
        uniform01(rng) < spec.corruption_rate) {
        rec.corrupted = true;
        switch (spec.corruption_mode) {
            case CorruptionMode::blur:
                for (double& v : vec) v *= kBlurShrink;
                break;
            case CorruptionMode::swap:
                vec = class_center(spec, modality, other);
                break;
            case CorruptionMode::dropout:
                std::fill(vec.begin(), vec.end(), 0.0);
                break;
        }
    }

    rec.values.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) rec.values[j] = static_cast<float>(vec[j]);
    return rec;
}

const FeatureRecord* CacheFeatureSource::find(Modality m, const FeatureKey& key) const {
    const FeatureCache* cache = nullptr;
    switch (m) {
        case Modality::visual: cache = visual_; break;
        case Modality::text: cache = text_; break;
        case Modality::audio: cache = audio_; break;
    }
    if (!cache) return nullptr;
    return cache->get(key);
}

} // namespace visaff::providers
