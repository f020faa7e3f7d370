#pragma once

// Evaluation stack: DTW alignment (steps {(1,0),(0,1),(1,1)}, |a-b| local
// cost, diagonal-preferred ties), raw pitch/chroma accuracy, frame and
// phoneme error metrics, mean/stddev differences, and the prompt/continuation
// evaluation protocol producing a MetricReport.

#include <map>

#include "promode/checkpoint.hpp"
#include "promode/masking.hpp"

namespace promode {

struct DtwResult {
    double cost = 0.0;
    std::vector<std::pair<size_t, size_t>> path; // (i,j), 0-based, starts (0,0)
};

inline DtwResult dtw(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw Error("dtw: empty input");
    size_t n = a.size(), m = b.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> d((n + 1) * (m + 1), inf);
    std::vector<uint8_t> move(n * m, 0); // 0=diag 1=up(i-1,j) 2=left(i,j-1)
    auto D = [&](size_t i, size_t j) -> double& { return d[i * (m + 1) + j]; };
    D(0, 0) = 0.0;
    for (size_t i = 1; i <= n; ++i)
        for (size_t j = 1; j <= m; ++j) {
            double c = std::abs(a[i - 1] - b[j - 1]);
            double diag = D(i - 1, j - 1), up = D(i - 1, j), left = D(i, j - 1);
            double best = diag;
            uint8_t mv = 0;
            if (up < best) { best = up; mv = 1; }
            if (left < best) { best = left; mv = 2; }
            D(i, j) = c + best;
            move[(i - 1) * m + (j - 1)] = mv;
        }
    DtwResult r;
    r.cost = D(n, m);
    size_t i = n, j = m;
    while (i > 0 && j > 0) {
        r.path.push_back({i - 1, j - 1});
        switch (move[(i - 1) * m + (j - 1)]) {
            case 0: --i; --j; break;
            case 1: --i; break;
            default: --j; break;
        }
    }
    std::reverse(r.path.begin(), r.path.end());
    return r;
}

// Collapses a DTW path into a prediction sequence on the ground-truth
// timeline: pred_aligned[i] = mean of pred[j] over path pairs (i, j).
inline std::vector<double> align_to_gt(const std::vector<double>& gt,
                                       const std::vector<double>& pred) {
    auto r = dtw(gt, pred);
    std::vector<double> out(gt.size(), 0.0);
    std::vector<size_t> cnt(gt.size(), 0);
    for (auto [i, j] : r.path) {
        out[i] += pred[j];
        ++cnt[i];
    }
    for (size_t i = 0; i < out.size(); ++i) out[i] /= double(cnt[i]);
    return out;
}

inline double cents_diff(double pred_hz, double gt_hz) {
    return 1200.0 * std::log2(pred_hz / gt_hz);
}

enum class PitchAccuracyMode { RPA, RCA };

struct PitchAccuracyDiagnostics {
    size_t counted = 0, correct = 0, nonpositive_pred = 0;
};

// Over aligned equal-length sequences, restricted to gt-voiced frames.
inline double pitch_accuracy(const std::vector<double>& gt_f0,
                             const std::vector<double>& pred_f0,
                             const std::vector<uint8_t>& gt_vuv,
                             PitchAccuracyMode mode, double threshold_cents = 50.0,
                             PitchAccuracyDiagnostics* diag = nullptr) {
    if (gt_f0.size() != pred_f0.size() || gt_f0.size() != gt_vuv.size())
        throw Error("pitch_accuracy: length mismatch");
    if (threshold_cents <= 0) throw Error("pitch_accuracy: threshold must be > 0");
    size_t counted = 0, correct = 0, nonpos = 0;
    for (size_t i = 0; i < gt_f0.size(); ++i) {
        if (!gt_vuv[i] || gt_f0[i] <= 0) continue;
        ++counted;
        if (pred_f0[i] <= 0) {
            ++nonpos; // counted incorrect, flagged
            continue;
        }
        double c = cents_diff(pred_f0[i], gt_f0[i]);
        if (mode == PitchAccuracyMode::RCA) {
            c = std::fmod(c, 1200.0);
            if (c > 600.0) c -= 1200.0;
            if (c < -600.0) c += 1200.0;
        }
        if (std::abs(c) <= threshold_cents) ++correct;
    }
    if (diag) *diag = {counted, correct, nonpos};
    if (counted == 0) return 0.0;
    return 100.0 * double(correct) / double(counted);
}

struct ErrorMetrics {
    double rmse = 0.0, mae_frame = 0.0, mae_log = 0.0;
};

// F0 variant: inputs in Hz; MAE over gt-voiced frames, RMSE over all frames.
inline ErrorMetrics f0_error_metrics(const std::vector<double>& gt,
                                     const std::vector<double>& pred,
                                     const std::vector<uint8_t>& gt_vuv) {
    if (gt.size() != pred.size() || gt.size() != gt_vuv.size())
        throw Error("error_metrics: length mismatch");
    KahanSum mae, mse;
    size_t voiced = 0;
    for (size_t i = 0; i < gt.size(); ++i) {
        double e = pred[i] - gt[i];
        mse.add(e * e);
        if (gt_vuv[i]) {
            mae.add(std::abs(e));
            ++voiced;
        }
    }
    ErrorMetrics m;
    m.rmse = std::sqrt(mse.value() / double(gt.size()));
    m.mae_frame = voiced ? mae.value() / double(voiced) : 0.0;
    return m;
}

// Energy variant: inputs are log2 values; MAE/RMSE on the linear scale,
// MAE_log on the log2 scale.
inline ErrorMetrics energy_error_metrics(const std::vector<double>& gt_log,
                                         const std::vector<double>& pred_log) {
    if (gt_log.size() != pred_log.size()) throw Error("error_metrics: length mismatch");
    KahanSum mae, mse, mlog;
    for (size_t i = 0; i < gt_log.size(); ++i) {
        double g = std::exp2(gt_log[i]), p = std::exp2(pred_log[i]);
        mae.add(std::abs(p - g));
        mse.add((p - g) * (p - g));
        mlog.add(std::abs(pred_log[i] - gt_log[i]));
    }
    ErrorMetrics m;
    m.rmse = std::sqrt(mse.value() / double(gt_log.size()));
    m.mae_frame = mae.value() / double(gt_log.size());
    m.mae_log = mlog.value() / double(gt_log.size());
    return m;
}

struct StatsDiff {
    double d_mu = 0.0, d_sigma = 0.0;
    bool sigma_defined = true;
};

namespace detail {
inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
    KahanSum s;
    for (double x : v) s.add(x);
    double mu = s.value() / double(v.size());
    KahanSum q;
    for (double x : v) q.add((x - mu) * (x - mu));
    return {mu, std::sqrt(q.value() / double(v.size()))};
}
} // namespace detail

// |mu_gt - mu_pred| and |sigma_gt - sigma_pred| at frame or phoneme level.
// F0 passes gt_vuv to restrict to voiced frames / pools.
inline StatsDiff stats_diff(const std::vector<double>& gt,
                            const std::vector<double>& pred,
                            const std::vector<uint32_t>* durations,
                            const std::vector<uint8_t>* gt_vuv, bool phoneme_level) {
    std::vector<double> g, p;
    if (phoneme_level) {
        if (!durations) throw Error("stats_diff: phoneme level requires durations");
        auto gp = phoneme_pool(gt, *durations, gt_vuv);
        auto pp = phoneme_pool(pred, *durations, gt_vuv);
        for (size_t i = 0; i < gp.size(); ++i) {
            if (!gp[i] || !pp[i]) continue; // all-unvoiced span excluded
            g.push_back(*gp[i]);
            p.push_back(*pp[i]);
        }
    } else {
        for (size_t i = 0; i < gt.size(); ++i) {
            if (gt_vuv && !(*gt_vuv)[i]) continue;
            g.push_back(gt[i]);
            p.push_back(pred[i]);
        }
    }
    StatsDiff out;
    if (g.empty()) {
        out.sigma_defined = false;
        return out;
    }
    auto [gmu, gsd] = detail::mean_sd(g);
    auto [pmu, psd] = detail::mean_sd(p);
    out.d_mu = std::abs(gmu - pmu);
    if (g.size() < 2)
        out.sigma_defined = false;
    else
        out.d_sigma = std::abs(gsd - psd);
    return out;
}

struct FeatureBlock {
    double rpa = 0, rca = 0; // F0 only
    double rmse = 0, mae_frame = 0, mae_phoneme = 0, mae_log = 0;
    double mu_frame = 0, sigma_frame = 0, mu_phoneme = 0, sigma_phoneme = 0;
};

struct MetricReport {
    FeatureBlock f0, energy;
    size_t utterance_count = 0;
    size_t skipped = 0; // <2 phonemes, or no voiced frames in the target
    nlohmann::json config_echo;
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
    auto block = [](const FeatureBlock& b, bool is_f0) {
        nlohmann::json x = {{"RMSE", b.rmse},
                            {"MAE_frame", b.mae_frame},
                            {"MAE_phoneme", b.mae_phoneme},
                            {"mu_frame", b.mu_frame},
                            {"sigma_frame", b.sigma_frame},
                            {"mu_phoneme", b.mu_phoneme},
                            {"sigma_phoneme", b.sigma_phoneme}};
        if (is_f0) {
            x["RPA"] = b.rpa;
            x["RCA"] = b.rca;
        } else {
            x["MAE_log"] = b.mae_log;
        }
        return x;
    };
    j = {{"F0", block(r.f0, true)},
         {"Energy", block(r.energy, false)},
         {"utterance_count", r.utterance_count},
         {"skipped", r.skipped},
         {"config", r.config_echo}};
}

// Per-utterance continuation evaluation payload, exposed for plots/diagnostics.
struct ContinuationEval {
    std::string id;
    size_t split_frame = 0;
    std::vector<double> gt_f0, pred_f0_aligned;   // second half, gt timeline
    std::vector<double> gt_elog, pred_elog_aligned;
    std::vector<uint8_t> gt_vuv;
    std::vector<uint32_t> tail_durations;
};

template <class S>
struct EvalOptions {
    bool copy_gt = false;      // test hook: predictions forced to ground truth
    const Model<S>* model = nullptr;
};

// Runs the continuation protocol on one utterance: split at the phoneme boundary
// nearest T/2, encode first half + masked second half, decode PD2 with full
// text and ground-truth durations, DTW-align each feature over the tail.
template <class S>
bool evaluate_one(const UtteranceRecord& rec, const EvalOptions<S>& opt,
                  const PreprocessConfig& pp, ContinuationEval& out) {
    if (rec.phonemes() < 2) return false;
    auto f = make_features(rec, pp);
    size_t split = nearest_boundary_split(rec.durations_frames);
    if (split == 0 || split >= f.frames) return false;
    size_t tail = f.frames - split;

    out.id = rec.id;
    out.split_frame = split;
    out.gt_f0.assign(f.f0_hz.begin() + split, f.f0_hz.end());
    out.gt_elog.assign(f.energy_log.begin() + split, f.energy_log.end());
    out.gt_vuv.assign(f.vuv.begin() + split, f.vuv.end());
    size_t acc = 0;
    for (size_t i = 0; i < rec.durations_frames.size(); ++i) {
        if (acc >= split) out.tail_durations.push_back(rec.durations_frames[i]);
        acc += rec.durations_frames[i];
    }

    std::vector<double> pred_f0(tail), pred_elog(tail);
    if (opt.copy_gt) {
        pred_f0 = out.gt_f0;
        pred_elog = out.gt_elog;
    } else {
        if (!opt.model) throw Error("evaluate: no model and no copy_gt hook");
        auto p = opt.model->infer_continuation(f, split);
        for (size_t i = 0; i < tail; ++i) {
            pred_f0[i] = double(p.f0_hz.data()[split + i]);
            pred_elog[i] = double(p.energy_log.data()[split + i]);
        }
    }
    out.pred_f0_aligned = align_to_gt(out.gt_f0, pred_f0);
    out.pred_elog_aligned = align_to_gt(out.gt_elog, pred_elog);
    return true;
}

template <class S>
MetricReport evaluate_continuation(const std::vector<UtteranceRecord>& records,
                                   const EvalOptions<S>& opt,
                                   const PreprocessConfig& pp = {},
                                   std::vector<ContinuationEval>* details = nullptr) {
    if (records.empty()) throw Error("evaluate_continuation: empty split");
    MetricReport rep;
    struct Acc {
        KahanSum rpa, rca, rmse, mae_f, mae_p, mae_log, mu_f, sd_f, mu_p, sd_p;
        size_t n = 0, n_sd_f = 0, n_sd_p = 0, n_p = 0;
    } af, ae;

    for (const auto& rec : records) {
        ContinuationEval ce;
        if (!evaluate_one(rec, opt, pp, ce)) {
            ++rep.skipped;
            continue;
        }
        bool any_voiced = false;
        for (uint8_t v : ce.gt_vuv) any_voiced |= (v != 0);
        if (!any_voiced) {
            ++rep.skipped;
            continue;
        }
        if (details) details->push_back(ce);

        // F0 block
        af.rpa.add(pitch_accuracy(ce.gt_f0, ce.pred_f0_aligned, ce.gt_vuv,
                                  PitchAccuracyMode::RPA));
        af.rca.add(pitch_accuracy(ce.gt_f0, ce.pred_f0_aligned, ce.gt_vuv,
                                  PitchAccuracyMode::RCA));
        auto fe = f0_error_metrics(ce.gt_f0, ce.pred_f0_aligned, ce.gt_vuv);
        af.rmse.add(fe.rmse);
        af.mae_f.add(fe.mae_frame);
        auto f_fr = stats_diff(ce.gt_f0, ce.pred_f0_aligned, nullptr, &ce.gt_vuv, false);
        af.mu_f.add(f_fr.d_mu);
        if (f_fr.sigma_defined) { af.sd_f.add(f_fr.d_sigma); ++af.n_sd_f; }
        auto gp = phoneme_pool(ce.gt_f0, ce.tail_durations, &ce.gt_vuv);
        auto pp2 = phoneme_pool(ce.pred_f0_aligned, ce.tail_durations, &ce.gt_vuv);
        KahanSum mae_ph;
        size_t nph = 0;
        for (size_t i = 0; i < gp.size(); ++i)
            if (gp[i] && pp2[i]) { mae_ph.add(std::abs(*gp[i] - *pp2[i])); ++nph; }
        if (nph) { af.mae_p.add(mae_ph.value() / double(nph)); ++af.n_p; }
        auto f_ph = stats_diff(ce.gt_f0, ce.pred_f0_aligned, &ce.tail_durations,
                               &ce.gt_vuv, true);
        af.mu_p.add(f_ph.d_mu);
        if (f_ph.sigma_defined) { af.sd_p.add(f_ph.d_sigma); ++af.n_sd_p; }
        ++af.n;

        // Energy block (linear for MAE/RMSE/stats, log2 for MAE_log)
        auto ee = energy_error_metrics(ce.gt_elog, ce.pred_elog_aligned);
        ae.rmse.add(ee.rmse);
        ae.mae_f.add(ee.mae_frame);
        ae.mae_log.add(ee.mae_log);
        std::vector<double> glin(ce.gt_elog.size()), plin(ce.gt_elog.size());
        for (size_t i = 0; i < glin.size(); ++i) {
            glin[i] = std::exp2(ce.gt_elog[i]);
            plin[i] = std::exp2(ce.pred_elog_aligned[i]);
        }
        auto e_fr = stats_diff(glin, plin, nullptr, nullptr, false);
        ae.mu_f.add(e_fr.d_mu);
        if (e_fr.sigma_defined) { ae.sd_f.add(e_fr.d_sigma); ++ae.n_sd_f; }
        auto gpe = phoneme_pool(glin, ce.tail_durations, nullptr);
        auto ppe = phoneme_pool(plin, ce.tail_durations, nullptr);
        KahanSum emae_ph;
        size_t enph = 0;
        for (size_t i = 0; i < gpe.size(); ++i)
            if (gpe[i] && ppe[i]) { emae_ph.add(std::abs(*gpe[i] - *ppe[i])); ++enph; }
        if (enph) { ae.mae_p.add(emae_ph.value() / double(enph)); ++ae.n_p; }
        auto e_ph = stats_diff(glin, plin, &ce.tail_durations, nullptr, true);
        ae.mu_p.add(e_ph.d_mu);
        if (e_ph.sigma_defined) { ae.sd_p.add(e_ph.d_sigma); ++ae.n_sd_p; }
        ++ae.n;
    }

    rep.utterance_count = af.n;
    if (af.n == 0) return rep;
    auto avg = [](const KahanSum& s, size_t n) { return n ? s.value() / double(n) : 0.0; };
    rep.f0.rpa = avg(af.rpa, af.n);
    rep.f0.rca = avg(af.rca, af.n);
    rep.f0.rmse = avg(af.rmse, af.n);
    rep.f0.mae_frame = avg(af.mae_f, af.n);
    rep.f0.mae_phoneme = avg(af.mae_p, af.n_p);
    rep.f0.mu_frame = avg(af.mu_f, af.n);
    rep.f0.sigma_frame = avg(af.sd_f, af.n_sd_f);
    rep.f0.mu_phoneme = avg(af.mu_p, af.n);
    rep.f0.sigma_phoneme = avg(af.sd_p, af.n_sd_p);
    rep.energy.rmse = avg(ae.rmse, ae.n);
    rep.energy.mae_frame = avg(ae.mae_f, ae.n);
    rep.energy.mae_log = avg(ae.mae_log, ae.n);
    rep.energy.mae_phoneme = avg(ae.mae_p, ae.n_p);
    rep.energy.mu_frame = avg(ae.mu_f, ae.n);
    rep.energy.sigma_frame = avg(ae.sd_f, ae.n_sd_f);
    rep.energy.mu_phoneme = avg(ae.mu_p, ae.n);
    rep.energy.sigma_phoneme = avg(ae.sd_p, ae.n_sd_p);
    return rep;
}

// Baseline predictor: every voiced tail frame predicted as the speaker's mean
// voiced F0, pooled over all of that speaker's records in `records` (speakers
// identified by their stored embedding). This captures the speaker's register
// but none of the per-utterance style, which is exactly what the model is
// supposed to read from the prompt. Returns the corpus-average tail F0 frame
// MAE, computed the same way as the model evaluation.
inline double speaker_mean_f0_baseline_mae(const std::vector<UtteranceRecord>& records,
                                           const PreprocessConfig& pp = {}) {
    auto speaker_key = [](const UtteranceRecord& r) {
        return std::string(reinterpret_cast<const char*>(r.speaker_vec.data()),
                           r.speaker_vec.size() * sizeof(float));
    };
    std::map<std::string, std::pair<KahanSum, size_t>> by_speaker;
    for (const auto& rec : records) {
        auto& acc = by_speaker[speaker_key(rec)];
        for (size_t i = 0; i < rec.frames(); ++i)
            if (rec.vuv[i]) { acc.first.add(rec.f0_hz[i]); ++acc.second; }
    }
    KahanSum total;
    size_t n = 0;
    for (const auto& rec : records) {
        if (rec.phonemes() < 2) continue;
        auto f = make_features(rec, pp);
        size_t split = nearest_boundary_split(rec.durations_frames);
        if (split == 0 || split >= f.frames) continue;
        const auto& acc = by_speaker[speaker_key(rec)];
        if (acc.second == 0) continue;
        double mean_f0 = acc.first.value() / double(acc.second);
        std::vector<double> gt(f.f0_hz.begin() + split, f.f0_hz.end());
        std::vector<uint8_t> vuv(f.vuv.begin() + split, f.vuv.end());
        bool any = false;
        for (uint8_t v : vuv) any |= (v != 0);
        if (!any) continue;
        std::vector<double> pred(gt.size(), mean_f0);
        auto aligned = align_to_gt(gt, pred);
        total.add(f0_error_metrics(gt, aligned, vuv).mae_frame);
        ++n;
    }
    if (n == 0) throw Error("baseline: no usable utterances");
    return total.value() / double(n);
}

namespace detail {
// Index of the phoneme starting exactly at frame_split (a duration boundary).
inline size_t phoneme_at_frame(const std::vector<uint32_t>& durations,
                               size_t frame_split) {
    size_t pos = 0, k = 0;
    for (; k < durations.size() && pos != frame_split; ++k) pos += durations[k];
    return k;
}
} // namespace detail

// Mean |dF0| over the continuation frames of record a when its prompt half
// (acoustics and prompt text) is replaced by record b's prompt half. The swap
// happens at the record level — the hybrid utterance runs through the full
// continuation path — so the score reflects everything the model reads from
// the prompt, not just one internal pathway.
template <typename S>
double prompt_sensitivity(const Model<S>& model,
                          const std::vector<UtteranceRecord>& records,
                          size_t max_pairs = 16, const PreprocessConfig& pp = {}) {
    KahanSum total;
    size_t n = 0;
    // all ordered pairs at increasing stride, so small corpora still yield
    // enough swaps to average the per-pair noise down
    size_t count = records.size();
    for (size_t stride = 1; stride < count && n < max_pairs; ++stride)
    for (size_t a = 0; a < count && n < max_pairs; ++a) {
        size_t b = (a + stride) % count;
        const UtteranceRecord& ra = records[a];
        const UtteranceRecord& rb = records[b];
        if (ra.phonemes() < 2 || rb.phonemes() < 2) continue;
        size_t split_a = nearest_boundary_split(ra.durations_frames);
        size_t split_b = nearest_boundary_split(rb.durations_frames);
        size_t ta = ra.frames();
        if (!split_a || split_a >= ta || !split_b || split_b >= rb.frames())
            continue;
        size_t ka = detail::phoneme_at_frame(ra.durations_frames, split_a);
        size_t kb = detail::phoneme_at_frame(rb.durations_frames, split_b);
        auto fa = make_features(ra, pp);
        auto p_own = model.infer_continuation(fa, split_a);
        // hybrid record: b's prompt half, a's continuation half
        UtteranceRecord h;
        h.speaker_vec = ra.speaker_vec;
        h.frame_hop_ms = ra.frame_hop_ms;
        h.phoneme_ids.assign(rb.phoneme_ids.begin(), rb.phoneme_ids.begin() + kb);
        h.phoneme_ids.insert(h.phoneme_ids.end(), ra.phoneme_ids.begin() + ka,
                             ra.phoneme_ids.end());
        h.durations_frames.assign(rb.durations_frames.begin(),
                                  rb.durations_frames.begin() + kb);
        h.durations_frames.insert(h.durations_frames.end(),
                                  ra.durations_frames.begin() + ka,
                                  ra.durations_frames.end());
        size_t tail = ta - split_a;
        size_t th = split_b + tail;
        h.f0_hz.resize(th);
        h.energy_raw.resize(th);
        h.vuv.resize(th);
        h.mel10.resize(th * 10);
        auto copy_frames = [&](const UtteranceRecord& src, size_t src0,
                               size_t dst0, size_t len) {
            for (size_t i = 0; i < len; ++i) {
                h.f0_hz[dst0 + i] = src.f0_hz[src0 + i];
                h.energy_raw[dst0 + i] = src.energy_raw[src0 + i];
                h.vuv[dst0 + i] = src.vuv[src0 + i];
                for (size_t c = 0; c < 10; ++c)
                    h.mel10[(dst0 + i) * 10 + c] = src.mel10[(src0 + i) * 10 + c];
            }
        };
        copy_frames(rb, 0, 0, split_b);
        copy_frames(ra, split_a, split_b, tail);
        auto fh = make_features(h, pp);
        auto p_swp = model.infer_continuation(fh, split_b);
        KahanSum diff;
        for (size_t i = 0; i < tail; ++i)
            diff.add(std::abs(double(p_own.f0_hz.data()[split_a + i]) -
                              double(p_swp.f0_hz.data()[split_b + i])));
        if (tail) {
            total.add(diff.value() / double(tail));
            ++n;
        }
    }
    if (n == 0) throw Error("prompt_sensitivity: no usable pairs");
    return total.value() / double(n);
}

} // namespace promode
