#pragma once

// Utterance records and their on-disk container: a one-line magic string,
// a one-line JSON header (id, sizes, dims, version, per-blob CRC32, phoneme
// ids), then raw little-endian blobs in fixed order:
//   f0_hz (T f32), energy_raw (T f32), mel10 (T*10 f32 row-major),
//   vuv (T bytes), durations_frames (P u32), speaker_vec (D f32).

#include <bit>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "promode/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "record format assumes a little-endian host");

namespace promode {

constexpr int kRecordFormatVersion = 1;
constexpr const char* kRecordMagic = "PROMODE-RECORD v1";

enum class IoErrorCode { MissingField, UnsupportedVersion, ChecksumMismatch, Malformed };

struct IoError : Error {
    IoErrorCode code;
    IoError(IoErrorCode c, const std::string& msg) : Error(msg), code(c) {}
};

struct UtteranceRecord {
    std::string id;
    std::vector<float> f0_hz;        // 0 at unvoiced frames
    std::vector<float> energy_raw;   // linear magnitude, >= 0
    std::vector<float> mel10;        // T x 10 row-major
    std::vector<uint8_t> vuv;        // per-frame 0/1
    std::vector<uint32_t> phoneme_ids;
    std::vector<uint32_t> durations_frames;
    std::vector<float> speaker_vec;
    float frame_hop_ms = 11.6f;

    size_t frames() const { return f0_hz.size(); }
    size_t phonemes() const { return phoneme_ids.size(); }
    size_t mel_dim() const { return frames() ? mel10.size() / frames() : 10; }
};

// Returns every violated invariant (empty list == valid record).
inline std::vector<std::string> validate(const UtteranceRecord& r) {
    std::vector<std::string> v;
    size_t t = r.frames();
    if (r.energy_raw.size() != t) v.push_back("energy length != frame count");
    if (t > 0 && r.mel10.size() != t * 10) v.push_back("mel10 length != 10 * frame count");
    if (r.vuv.size() != t) v.push_back("vuv length != frame count");
    if (r.phoneme_ids.size() != r.durations_frames.size())
        v.push_back("phoneme count != duration count");
    uint64_t dur_sum = 0;
    for (uint32_t d : r.durations_frames) {
        dur_sum += d;
        if (d < 1) v.push_back("duration < 1");
    }
    if (dur_sum != t) v.push_back("duration sum != frame count");
    for (uint8_t f : r.vuv)
        if (f > 1) {
            v.push_back("vuv not binary");
            break;
        }
    for (size_t i = 0; i < t && i < r.vuv.size(); ++i) {
        if (r.f0_hz[i] > 0.0f && r.vuv[i] == 0) {
            v.push_back("f0 > 0 at unvoiced frame");
            break;
        }
        if (r.f0_hz[i] < 0.0f) {
            v.push_back("negative f0");
            break;
        }
    }
    for (float e : r.energy_raw)
        if (e < 0.0f) {
            v.push_back("negative raw energy");
            break;
        }
    return v;
}

namespace detail {

template <class T>
void write_blob(std::ostream& os, const std::vector<T>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             std::streamsize(v.size() * sizeof(T)));
}

template <class T>
void read_blob(std::istream& is, std::vector<T>& v, size_t count,
               const char* name, uint32_t expect_crc) {
    v.resize(count);
    is.read(reinterpret_cast<char*>(v.data()), std::streamsize(count * sizeof(T)));
    if (!is)
        throw IoError(IoErrorCode::Malformed,
                      std::string("record: truncated blob ") + name);
    if (crc32_vec(v) != expect_crc)
        throw IoError(IoErrorCode::ChecksumMismatch,
                      std::string("record: checksum failure in ") + name);
}

inline nlohmann::json require(const nlohmann::json& j, const char* field) {
    if (!j.contains(field))
        throw IoError(IoErrorCode::MissingField,
                      std::string("missing field: ") + field);
    return j.at(field);
}

} // namespace detail

inline void write_record(const UtteranceRecord& r, const std::string& path) {
    auto violations = validate(r);
    if (!violations.empty())
        throw Error("write_record: invalid record: " + violations.front());
    nlohmann::json h;
    h["id"] = r.id;
    h["T"] = r.frames();
    h["P"] = r.phonemes();
    h["mel_dim"] = 10;
    h["speaker_dim"] = r.speaker_vec.size();
    h["frame_hop_ms"] = r.frame_hop_ms;
    h["version"] = kRecordFormatVersion;
    h["phoneme_ids"] = r.phoneme_ids;
    h["crc32"] = {{"f0_hz", crc32_vec(r.f0_hz)},
                  {"energy_raw", crc32_vec(r.energy_raw)},
                  {"mel10", crc32_vec(r.mel10)},
                  {"vuv", crc32_vec(r.vuv)},
                  {"durations_frames", crc32_vec(r.durations_frames)},
                  {"speaker_vec", crc32_vec(r.speaker_vec)}};
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("write_record: cannot open " + path);
    os << kRecordMagic << "\n" << h.dump() << "\n";
    detail::write_blob(os, r.f0_hz);
    detail::write_blob(os, r.energy_raw);
    detail::write_blob(os, r.mel10);
    detail::write_blob(os, r.vuv);
    detail::write_blob(os, r.durations_frames);
    detail::write_blob(os, r.speaker_vec);
    if (!os) throw Error("write_record: write failed for " + path);
}

inline UtteranceRecord read_record(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("read_record: cannot open " + path);
    std::string magic, header_line;
    std::getline(is, magic);
    if (magic != kRecordMagic)
        throw IoError(IoErrorCode::Malformed, "read_record: bad magic in " + path);
    std::getline(is, header_line);
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(IoErrorCode::Malformed,
                      "read_record: bad header: " + std::string(e.what()));
    }
    int version = detail::require(h, "version").get<int>();
    if (version != kRecordFormatVersion)
        throw IoError(IoErrorCode::UnsupportedVersion,
                      "unsupported version: " + std::to_string(version));
    UtteranceRecord r;
    r.id = detail::require(h, "id").get<std::string>();
    size_t t = detail::require(h, "T").get<size_t>();
    size_t p = detail::require(h, "P").get<size_t>();
    size_t spk = detail::require(h, "speaker_dim").get<size_t>();
    r.frame_hop_ms = detail::require(h, "frame_hop_ms").get<float>();
    r.phoneme_ids = detail::require(h, "phoneme_ids").get<std::vector<uint32_t>>();
    if (r.phoneme_ids.size() != p)
        throw IoError(IoErrorCode::Malformed, "read_record: phoneme count mismatch");
    auto crc = detail::require(h, "crc32");
    detail::read_blob(is, r.f0_hz, t, "f0_hz",
                      detail::require(crc, "f0_hz").get<uint32_t>());
    detail::read_blob(is, r.energy_raw, t, "energy_raw",
                      detail::require(crc, "energy_raw").get<uint32_t>());
    detail::read_blob(is, r.mel10, t * 10, "mel10",
                      detail::require(crc, "mel10").get<uint32_t>());
    detail::read_blob(is, r.vuv, t, "vuv",
                      detail::require(crc, "vuv").get<uint32_t>());
    detail::read_blob(is, r.durations_frames, p, "durations_frames",
                      detail::require(crc, "durations_frames").get<uint32_t>());
    detail::read_blob(is, r.speaker_vec, spk, "speaker_vec",
                      detail::require(crc, "speaker_vec").get<uint32_t>());
    return r;
}

struct Manifest {
    std::string corpus;
    uint64_t seed = 0;
    int format_version = kRecordFormatVersion;
    std::map<std::string, std::vector<std::string>> splits; // split -> record paths

    const std::vector<std::string>& split(const std::string& name) const {
        auto it = splits.find(name);
        if (it == splits.end()) throw Error("manifest: no split named " + name);
        return it->second;
    }
};

inline void write_manifest(const Manifest& m, const std::string& path) {
    nlohmann::json j;
    j["corpus"] = m.corpus;
    j["seed"] = m.seed;
    j["format_version"] = m.format_version;
    j["splits"] = m.splits;
    std::ofstream os(path);
    if (!os) throw Error("write_manifest: cannot open " + path);
    os << j.dump(2) << "\n";
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("read_manifest: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(IoErrorCode::Malformed,
                      "read_manifest: " + std::string(e.what()));
    }
    Manifest m;
    m.corpus = detail::require(j, "corpus").get<std::string>();
    m.seed = detail::require(j, "seed").get<uint64_t>();
    m.format_version = detail::require(j, "format_version").get<int>();
    if (m.format_version != kRecordFormatVersion)
        throw IoError(IoErrorCode::UnsupportedVersion, "unsupported manifest version");
    m.splits = detail::require(j, "splits")
                   .get<std::map<std::string, std::vector<std::string>>>();
    return m;
}

// record paths are stored relative to the manifest's directory
inline std::string resolve_record_path(const std::string& manifest_path,
                                       const std::string& rec_path) {
    namespace fs = std::filesystem;
    fs::path p(rec_path);
    if (p.is_absolute()) return rec_path;
    return (fs::path(manifest_path).parent_path() / p).string();
}

} // namespace promode
