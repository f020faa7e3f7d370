#pragma once

// Deterministic synthetic prosody corpus. Utterances carry learnable
// text->prosody structure: per-phoneme intrinsic pitch (global across the
// corpus), per-utterance declination and register offset, accent bumps on
// random phonemes, and speaker-level base F0 / range / energy gain. Within an
// utterance the style parameters are sampled once, so the unmasked half
// carries information about the masked half beyond per-speaker means.

#include <filesystem>

#include "promode/preprocess.hpp"
#include "promode/record.hpp"

namespace promode {

struct GenConfig {
    size_t phoneme_inventory = 40;
    double unvoiced_fraction = 0.3; // ids below inventory*fraction are unvoiced
    size_t min_phonemes = 6, max_phonemes = 14;
    uint32_t min_dur_frames = 3, max_dur_frames = 14;
    double base_f0_min = 80.0, base_f0_max = 300.0;
    double f0_range_min = 2.0, f0_range_max = 12.0;
    double accent_prob = 0.25;
    double accent_amp_max = 3.0; // semitones
    double jitter_scale = 0.02;  // fraction of the speaker range, per frame
    // When false, the stored speaker embedding carries timbre and energy but
    // no pitch information (like a register-free voice print), so a model can
    // only recover the speaker's register from the audio prompt itself.
    bool speaker_vec_register = true;
    size_t speaker_dim = 16;
    float frame_hop_ms = 11.6f;
    uint64_t seed = 1;
    size_t train_size = 200, dev_size = 20, test_size = 20;
    size_t train_speakers = 20, dev_speakers = 4, test_speakers = 4;
};

inline void to_json(nlohmann::json& j, const GenConfig& c) {
    j = {{"phoneme_inventory", c.phoneme_inventory},
         {"unvoiced_fraction", c.unvoiced_fraction},
         {"min_phonemes", c.min_phonemes},
         {"max_phonemes", c.max_phonemes},
         {"min_dur_frames", c.min_dur_frames},
         {"max_dur_frames", c.max_dur_frames},
         {"base_f0_min", c.base_f0_min},
         {"base_f0_max", c.base_f0_max},
         {"f0_range_min", c.f0_range_min},
         {"f0_range_max", c.f0_range_max},
         {"accent_prob", c.accent_prob},
         {"accent_amp_max", c.accent_amp_max},
         {"jitter_scale", c.jitter_scale},
         {"speaker_vec_register", c.speaker_vec_register},
         {"speaker_dim", c.speaker_dim},
         {"frame_hop_ms", c.frame_hop_ms},
         {"seed", c.seed},
         {"train_size", c.train_size},
         {"dev_size", c.dev_size},
         {"test_size", c.test_size},
         {"train_speakers", c.train_speakers},
         {"dev_speakers", c.dev_speakers},
         {"test_speakers", c.test_speakers}};
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
    GenConfig d;
    c.phoneme_inventory = j.value("phoneme_inventory", d.phoneme_inventory);
    c.unvoiced_fraction = j.value("unvoiced_fraction", d.unvoiced_fraction);
    c.min_phonemes = j.value("min_phonemes", d.min_phonemes);
    c.max_phonemes = j.value("max_phonemes", d.max_phonemes);
    c.min_dur_frames = j.value("min_dur_frames", d.min_dur_frames);
    c.max_dur_frames = j.value("max_dur_frames", d.max_dur_frames);
    c.base_f0_min = j.value("base_f0_min", d.base_f0_min);
    c.base_f0_max = j.value("base_f0_max", d.base_f0_max);
    c.f0_range_min = j.value("f0_range_min", d.f0_range_min);
    c.f0_range_max = j.value("f0_range_max", d.f0_range_max);
    c.accent_prob = j.value("accent_prob", d.accent_prob);
    c.accent_amp_max = j.value("accent_amp_max", d.accent_amp_max);
    c.jitter_scale = j.value("jitter_scale", d.jitter_scale);
    c.speaker_vec_register = j.value("speaker_vec_register", d.speaker_vec_register);
    c.speaker_dim = j.value("speaker_dim", d.speaker_dim);
    c.frame_hop_ms = j.value("frame_hop_ms", d.frame_hop_ms);
    c.seed = j.value("seed", d.seed);
    c.train_size = j.value("train_size", d.train_size);
    c.dev_size = j.value("dev_size", d.dev_size);
    c.test_size = j.value("test_size", d.test_size);
    c.train_speakers = j.value("train_speakers", d.train_speakers);
    c.dev_speakers = j.value("dev_speakers", d.dev_speakers);
    c.test_speakers = j.value("test_speakers", d.test_speakers);
}

struct SpeakerProfile {
    double base_f0_hz = 150.0;
    double f0_range_semitones = 6.0;
    double energy_gain = 1.0;
    std::vector<double> timbre_vec; // 10-dim, drives mel10 offsets
    std::vector<float> speaker_vec; // stored in records
};

inline bool phoneme_is_voiced(uint32_t id, const GenConfig& cfg) {
    return id >= uint32_t(double(cfg.phoneme_inventory) * cfg.unvoiced_fraction);
}

// Global (corpus-independent) intrinsic pitch of a phoneme id, in [-1, 1].
inline double phoneme_intrinsic(uint32_t id) {
    return double(mix_seed(id, 0x9e37) % 20001) / 10000.0 - 1.0;
}

inline SpeakerProfile sample_speaker(uint64_t seed, const GenConfig& cfg = {}) {
    Rng rng(mix_seed(seed, 0x5eed));
    SpeakerProfile p;
    // log-uniform base F0
    p.base_f0_hz = cfg.base_f0_min *
                   std::exp2(rng.uniform() * std::log2(cfg.base_f0_max / cfg.base_f0_min));
    p.f0_range_semitones = rng.uniform(cfg.f0_range_min, cfg.f0_range_max);
    p.energy_gain = rng.uniform(0.5, 2.0);
    p.timbre_vec.resize(10);
    for (auto& v : p.timbre_vec) v = rng.normal(0.0, 0.3);
    p.speaker_vec.resize(cfg.speaker_dim, 0.0f);
    if (cfg.speaker_dim >= 3) {
        if (cfg.speaker_vec_register) {
            p.speaker_vec[0] = float(std::log2(p.base_f0_hz / cfg.base_f0_min));
            p.speaker_vec[1] = float(p.f0_range_semitones / cfg.f0_range_max);
        } else {
            // Register-free voice print: pitch dims carry unrelated noise so the
            // only source of the speaker's register is the audio prompt itself.
            Rng mask_rng(mix_seed(seed, 0x0f0f));
            p.speaker_vec[0] = float(mask_rng.normal(0.0, 1.0));
            p.speaker_vec[1] = float(mask_rng.normal(0.0, 1.0));
        }
        p.speaker_vec[2] = float(p.energy_gain);
    }
    for (size_t i = 3; i < cfg.speaker_dim; ++i) {
        size_t k = i - 3;
        p.speaker_vec[i] = k < p.timbre_vec.size() ? float(p.timbre_vec[k])
                                                   : float(rng.normal(0.0, 1.0));
    }
    return p;
}

inline UtteranceRecord synth_utterance(const SpeakerProfile& profile,
                                       const GenConfig& cfg,
                                       std::vector<uint32_t> phoneme_ids,
                                       uint64_t seed) {
    if (phoneme_ids.empty()) throw Error("synth_utterance: empty phoneme sequence");
    Rng rng(mix_seed(seed, 0x07fe));

    size_t p = phoneme_ids.size();
    std::vector<uint32_t> durations(p);
    for (auto& d : durations)
        d = cfg.min_dur_frames +
            uint32_t(rng.uniform_int(cfg.max_dur_frames - cfg.min_dur_frames + 1));
    size_t t_total = 0;
    for (uint32_t d : durations) t_total += d;

    double range = profile.f0_range_semitones;
    // per-utterance style, sampled once: register offset, declination, accents
    double utt_offset = rng.uniform(-0.25, 0.25) * range;
    double decl_slope = -rng.uniform(0.05, 0.35) * range; // semitones across the utterance
    double accent_amp = rng.uniform(0.3, 1.0) * cfg.accent_amp_max;
    std::vector<bool> accented(p);
    for (size_t i = 0; i < p; ++i) accented[i] = rng.uniform() < cfg.accent_prob;

    UtteranceRecord r;
    r.phoneme_ids = phoneme_ids;
    r.durations_frames = durations;
    r.speaker_vec = profile.speaker_vec;
    r.frame_hop_ms = cfg.frame_hop_ms;
    r.f0_hz.resize(t_total);
    r.energy_raw.resize(t_total);
    r.mel10.resize(t_total * 10);
    r.vuv.resize(t_total);

    size_t pos = 0;
    for (size_t i = 0; i < p; ++i) {
        bool voiced = phoneme_is_voiced(phoneme_ids[i], cfg);
        double intrinsic = phoneme_intrinsic(phoneme_ids[i]) * 0.25 * range;
        for (size_t f = 0; f < durations[i]; ++f, ++pos) {
            double frac_utt = double(pos) / double(t_total);
            double frac_ph = (double(f) + 0.5) / double(durations[i]);
            double bump = accented[i]
                              ? accent_amp * 0.5 * (1.0 - std::cos(2.0 * M_PI * frac_ph))
                              : 0.0;
            double jitter = std::clamp(rng.normal(0.0, cfg.jitter_scale * range),
                                       -0.15 * range, 0.15 * range);
            double st = utt_offset + decl_slope * frac_utt + intrinsic + bump + jitter;
            r.vuv[pos] = voiced ? 1 : 0;
            r.f0_hz[pos] = voiced
                               ? float(profile.base_f0_hz * std::exp2(st / 12.0))
                               : 0.0f;
            double eg = profile.energy_gain;
            double e = voiced ? eg * (0.6 + 0.3 * bump / std::max(accent_amp, 1e-9) +
                                      0.1 * phoneme_intrinsic(phoneme_ids[i]))
                              : eg * 0.15;
            e *= 1.0 + 0.05 * std::clamp(rng.normal(), -3.0, 3.0);
            r.energy_raw[pos] = float(std::max(e, 0.01));
            double st_norm = voiced ? st / 12.0 : -1.0;
            double loge = std::log2(std::max(double(r.energy_raw[pos]), 1e-5));
            for (size_t k = 0; k < 10; ++k) {
                double a = 0.3 * std::sin(0.7 * double(k + 1));
                double b = 0.2 * std::cos(0.5 * double(k + 1));
                r.mel10[pos * 10 + k] =
                    float(profile.timbre_vec[k] + a * st_norm + b * loge +
                          0.05 * rng.normal());
            }
        }
    }
    return r;
}

// Samples a phoneme sequence for an utterance.
inline std::vector<uint32_t> sample_phoneme_seq(const GenConfig& cfg, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x51d));
    size_t n = cfg.min_phonemes +
               rng.uniform_int(cfg.max_phonemes - cfg.min_phonemes + 1);
    std::vector<uint32_t> ids(n);
    for (auto& id : ids) id = uint32_t(rng.uniform_int(cfg.phoneme_inventory));
    return ids;
}

// Writes record files and a manifest under out_dir. Speakers are disjoint
// across splits; rerunning with the same config reproduces identical bytes.
inline Manifest build_corpus(const GenConfig& cfg, const std::string& out_dir,
                             bool force = false) {
    namespace fs = std::filesystem;
    fs::path root(out_dir);
    fs::path manifest_path = root / "manifest.json";
    if (fs::exists(manifest_path) && !force) {
        Manifest existing = read_manifest(manifest_path.string());
        if (existing.seed != cfg.seed)
            throw Error("build_corpus: incompatible manifest already at " +
                        manifest_path.string() + " (use force to overwrite)");
    }
    fs::create_directories(root);

    struct SplitSpec {
        const char* name;
        size_t size, speakers, speaker_base;
    };
    std::vector<SplitSpec> specs = {
        {"train", cfg.train_size, cfg.train_speakers, 0},
        {"dev", cfg.dev_size, cfg.dev_speakers, cfg.train_speakers},
        {"test", cfg.test_size, cfg.test_speakers,
         cfg.train_speakers + cfg.dev_speakers},
    };

    Manifest m;
    m.corpus = "synthcorpus";
    m.seed = cfg.seed;
    for (auto& sp : specs) {
        if (sp.speakers == 0 && sp.size > 0)
            throw Error("build_corpus: split with utterances but no speakers");
        fs::create_directories(root / sp.name);
        std::vector<SpeakerProfile> profiles(sp.speakers);
        for (size_t s = 0; s < sp.speakers; ++s)
            profiles[s] = sample_speaker(mix_seed(cfg.seed, 0x5b, sp.speaker_base + s), cfg);
        for (size_t u = 0; u < sp.size; ++u) {
            size_t spk_local = u % sp.speakers;
            uint64_t utt_seed = mix_seed(cfg.seed, sp.speaker_base * 131071 + 7, u);
            auto ids = sample_phoneme_seq(cfg, mix_seed(utt_seed, 1));
            UtteranceRecord r =
                synth_utterance(profiles[spk_local], cfg, ids, mix_seed(utt_seed, 2));
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%s_s%03zu_u%05zu", sp.name,
                          sp.speaker_base + spk_local, u);
            r.id = buf;
            std::string rel = std::string(sp.name) + "/" + buf + ".rec";
            write_record(r, (root / rel).string());
            m.splits[sp.name].push_back(rel);
        }
        if (sp.size == 0) m.splits[sp.name] = {};
    }
    write_manifest(m, manifest_path.string());
    return m;
}

// Speaker index parsed back from a record id ("split_sNNN_uNNNNN").
inline int speaker_index_of(const std::string& record_id) {
    auto pos = record_id.find("_s");
    if (pos == std::string::npos) return -1;
    return std::atoi(record_id.c_str() + pos + 2);
}

} // namespace promode
