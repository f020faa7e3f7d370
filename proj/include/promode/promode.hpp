#pragma once

// Umbrella header plus small cross-module conveniences.

#include "promode/checkpoint.hpp"
#include "promode/gradcheck.hpp"
#include "promode/metrics.hpp"
#include "promode/plot.hpp"
#include "promode/synthcorpus.hpp"
#include "promode/trainer.hpp"

namespace promode {

// Deterministic toy utterance matching a model config's vocab/speaker dims,
// used by gradient checks and shape tests.
inline FrameFeatures toy_features(const ModelConfig& mc, uint64_t seed,
                                  size_t phonemes = 4, uint32_t dur_frames = 3) {
    GenConfig g;
    g.phoneme_inventory = mc.phoneme_vocab;
    g.speaker_dim = mc.speaker_dim;
    g.min_phonemes = g.max_phonemes = phonemes;
    g.min_dur_frames = g.max_dur_frames = dur_frames;
    auto spk = sample_speaker(mix_seed(seed, 11), g);
    auto ids = sample_phoneme_seq(g, mix_seed(seed, 12));
    auto rec = synth_utterance(spk, g, ids, mix_seed(seed, 13));
    return make_features(rec, mc.preprocess);
}

// Loads one manifest split into model-facing features.
inline std::vector<FrameFeatures> load_split_features(const std::string& manifest_path,
                                                      const Manifest& m,
                                                      const std::string& split,
                                                      const PreprocessConfig& pp,
                                                      size_t max_records = 0) {
    std::vector<FrameFeatures> out;
    for (const auto& rel : m.split(split)) {
        if (max_records && out.size() >= max_records) break;
        out.push_back(make_features(
            read_record(resolve_record_path(manifest_path, rel)), pp));
    }
    return out;
}

inline std::vector<UtteranceRecord> load_split_records(const std::string& manifest_path,
                                                       const Manifest& m,
                                                       const std::string& split,
                                                       size_t max_records = 0) {
    std::vector<UtteranceRecord> out;
    for (const auto& rel : m.split(split)) {
        if (max_records && out.size() >= max_records) break;
        out.push_back(read_record(resolve_record_path(manifest_path, rel)));
    }
    return out;
}

// Ablation presets mirroring the model's switchable components.
inline void apply_ablation(ModelConfig& cfg, const std::string& name) {
    if (name.empty()) return;
    if (name == "aol") cfg.disable_aol = true;
    else if (name == "dur") cfg.drop_duration = true;
    else if (name == "mel10") cfg.drop_mel10 = true;
    else if (name == "context-text") cfg.drop_context_text = true;
    else if (name == "f0") cfg.drop_f0 = true;
    else if (name == "energy") cfg.drop_energy = true;
    else if (name == "modadaln") cfg.global_adaln = true;
    else
        throw Error("unknown ablation preset: " + name +
                    " (expected aol|dur|mel10|context-text|f0|energy|modadaln)");
}

// Full-model FD gradient check on the tiny config (all parameter tensors,
// sampled coordinates). Returns the worst relative error found.
inline GradCheckResult model_grad_check(uint64_t seed, size_t samples_per_tensor = 2,
                                        double step = 1e-5) {
    ModelConfig mc = tiny_config();
    mc.init_seed = seed;
    Model<double> model(mc);
    auto f = toy_features(mc, mix_seed(seed, 21)); // T = 12
    auto mask = sample_mask(f.durations, mc.mask_ratio, mix_seed(seed, 22));
    std::vector<Tensor<double>> inputs;
    for (auto& p : model.store().params()) inputs.push_back(p.tensor);
    auto fn = [&]() { return model.forward_loss(f, mask).total; };
    return grad_check_sampled(fn, inputs, samples_per_tensor, mix_seed(seed, 23), step);
}

} // namespace promode
