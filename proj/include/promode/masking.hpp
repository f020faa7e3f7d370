#pragma once

// Phoneme-aligned frame masks: a phoneme is either fully masked or fully
// available. Sampling shuffles phoneme order with the seed and greedily adds
// whole phonemes while below the target ratio, stopping early when adding the
// next phoneme would overshoot by more than the current undershoot.

#include "promode/common.hpp"

namespace promode {

struct FrameMask {
    std::vector<bool> flags; // true = masked
    double ratio_achieved = 0.0;

    size_t masked_count() const {
        size_t c = 0;
        for (bool f : flags) c += f;
        return c;
    }
};

inline FrameMask sample_mask(const std::vector<uint32_t>& durations_frames,
                             double target_ratio, uint64_t seed) {
    if (durations_frames.empty()) throw Error("sample_mask: empty durations");
    if (target_ratio < 0.0 || target_ratio > 1.0)
        throw Error("sample_mask: target ratio out of [0,1]");
    size_t total = 0;
    for (uint32_t d : durations_frames) {
        if (d == 0) throw Error("sample_mask: zero duration");
        total += d;
    }
    std::vector<size_t> order(durations_frames.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());

    std::vector<bool> pick(durations_frames.size(), false);
    size_t masked = 0;
    for (size_t i : order) {
        if (double(masked) >= target_ratio * double(total)) break;
        size_t with = masked + durations_frames[i];
        double over = double(with) / double(total) - target_ratio;
        double under = target_ratio - double(masked) / double(total);
        if (over > under) break;
        pick[i] = true;
        masked = with;
    }

    FrameMask m;
    m.flags.resize(total, false);
    size_t pos = 0;
    for (size_t i = 0; i < durations_frames.size(); ++i) {
        if (pick[i])
            for (size_t f = pos; f < pos + durations_frames[i]; ++f) m.flags[f] = true;
        pos += durations_frames[i];
    }
    m.ratio_achieved = double(masked) / double(total);
    return m;
}

// Continuation mask: every frame from `split_frame` on is masked.
inline FrameMask continuation_mask(size_t total_frames, size_t split_frame) {
    FrameMask m;
    m.flags.resize(total_frames, false);
    for (size_t i = split_frame; i < total_frames; ++i) m.flags[i] = true;
    m.ratio_achieved = total_frames
                           ? double(total_frames - split_frame) / double(total_frames)
                           : 0.0;
    return m;
}

// Frame index of the phoneme boundary nearest to frame_count/2.
inline size_t nearest_boundary_split(const std::vector<uint32_t>& durations) {
    size_t total = 0;
    for (uint32_t d : durations) total += d;
    double half = double(total) / 2.0;
    size_t pos = 0, best = 0;
    double best_dist = half; // boundary at 0 excluded; start with boundary after first phoneme
    for (size_t i = 0; i + 1 < durations.size(); ++i) {
        pos += durations[i];
        double dist = std::abs(double(pos) - half);
        if (best == 0 || dist < best_dist) {
            best = pos;
            best_dist = dist;
        }
    }
    return best;
}

} // namespace promode
