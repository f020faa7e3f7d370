#pragma once

// Checkpoint container: magic line, JSON header (model config, format
// version, parameter manifest with names/shapes/CRC32s, optional trainer
// state), then raw little-endian f32 parameter blobs in manifest order,
// then optional Adam moment blobs (m then v per parameter, same order).

#include <fstream>

#include "promode/model.hpp"

namespace promode {

constexpr int kCheckpointFormatVersion = 1;
constexpr const char* kCheckpointMagic = "PROMODE-CKPT v1";

struct TrainerState {
    uint64_t iteration = 0;
    uint64_t seed = 0;
    bool present = false;
};

namespace detail {

template <class S>
std::vector<float> to_f32(const std::vector<S>& v) {
    return std::vector<float>(v.begin(), v.end());
}

} // namespace detail

template <class S>
void save_checkpoint(const Model<S>& model, const std::string& path,
                     const TrainerState* trainer = nullptr) {
    nlohmann::json h;
    h["version"] = kCheckpointFormatVersion;
    h["config"] = model.config();
    nlohmann::json manifest = nlohmann::json::array();
    std::vector<std::vector<float>> blobs;
    for (const auto& p : model.store().params()) {
        auto f32 = detail::to_f32(p.tensor.data());
        manifest.push_back({{"name", p.name},
                            {"shape", p.tensor.shape()},
                            {"crc32", crc32_vec(f32)}});
        blobs.push_back(std::move(f32));
    }
    h["params"] = manifest;
    if (trainer && trainer->present)
        h["trainer"] = {{"iteration", trainer->iteration}, {"seed", trainer->seed}};
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("save_checkpoint: cannot open " + path);
    os << kCheckpointMagic << "\n" << h.dump() << "\n";
    for (auto& b : blobs) detail::write_blob(os, b);
    if (trainer && trainer->present) {
        for (const auto& p : model.store().params()) {
            auto m = p.m.empty() ? std::vector<S>(p.tensor.size(), S(0)) : p.m;
            auto v = p.v.empty() ? std::vector<S>(p.tensor.size(), S(0)) : p.v;
            auto mb = detail::to_f32(m);
            auto vb = detail::to_f32(v);
            detail::write_blob(os, mb);
            detail::write_blob(os, vb);
        }
    }
    if (!os) throw Error("save_checkpoint: write failed for " + path);
}

// Reads only the header (cheap config inspection).
inline ModelConfig read_checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("load_checkpoint: cannot open " + path);
    std::string magic, header;
    std::getline(is, magic);
    if (magic != kCheckpointMagic)
        throw IoError(IoErrorCode::Malformed, "load_checkpoint: bad magic");
    std::getline(is, header);
    nlohmann::json h = nlohmann::json::parse(header);
    int version = detail::require(h, "version").get<int>();
    if (version != kCheckpointFormatVersion)
        throw IoError(IoErrorCode::UnsupportedVersion,
                      "unsupported checkpoint version: " + std::to_string(version));
    ModelConfig cfg = detail::require(h, "config").get<ModelConfig>();
    return cfg;
}

template <class S>
Model<S> load_checkpoint(const std::string& path, TrainerState* trainer = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("load_checkpoint: cannot open " + path);
    std::string magic, header;
    std::getline(is, magic);
    if (magic != kCheckpointMagic)
        throw IoError(IoErrorCode::Malformed, "load_checkpoint: bad magic");
    std::getline(is, header);
    nlohmann::json h = nlohmann::json::parse(header);
    int version = detail::require(h, "version").get<int>();
    if (version != kCheckpointFormatVersion)
        throw IoError(IoErrorCode::UnsupportedVersion,
                      "unsupported checkpoint version: " + std::to_string(version));
    ModelConfig cfg = detail::require(h, "config").get<ModelConfig>();
    Model<S> model(cfg);
    auto manifest = detail::require(h, "params");
    auto& params = model.store().params();
    if (manifest.size() != params.size())
        throw IoError(IoErrorCode::Malformed, "checkpoint: parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        std::string name = detail::require(manifest[i], "name").get<std::string>();
        if (name != params[i].name)
            throw IoError(IoErrorCode::Malformed,
                          "checkpoint: parameter order mismatch at " + name);
        std::vector<float> blob;
        detail::read_blob(is, blob, params[i].tensor.size(), name.c_str(),
                          detail::require(manifest[i], "crc32").get<uint32_t>());
        auto& dst = params[i].tensor.data();
        for (size_t k = 0; k < blob.size(); ++k) dst[k] = S(blob[k]);
    }
    if (trainer) {
        trainer->present = h.contains("trainer");
        if (trainer->present) {
            trainer->iteration = h["trainer"]["iteration"].get<uint64_t>();
            trainer->seed = h["trainer"]["seed"].get<uint64_t>();
            for (auto& p : params) {
                std::vector<float> mb(p.tensor.size()), vb(p.tensor.size());
                is.read(reinterpret_cast<char*>(mb.data()),
                        std::streamsize(mb.size() * sizeof(float)));
                is.read(reinterpret_cast<char*>(vb.data()),
                        std::streamsize(vb.size() * sizeof(float)));
                if (!is)
                    throw IoError(IoErrorCode::Malformed,
                                  "checkpoint: truncated optimizer state");
                p.m.assign(mb.begin(), mb.end());
                p.v.assign(vb.begin(), vb.end());
            }
        }
    }
    return model;
}

} // namespace promode
