#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <functional>
#include <set>
#include <promode/promode.hpp>

using namespace promode;

namespace {

// Independent memoized DP oracle for the DTW cost (no path).
double dtw_cost_oracle(const std::vector<double>& a, const std::vector<double>& b) {
    size_t n = a.size(), m = b.size();
    std::vector<double> memo(n * m, -1.0);
    std::function<double(size_t, size_t)> go = [&](size_t i, size_t j) -> double {
        double& slot = memo[i * m + j];
        if (slot >= 0.0) return slot;
        double c = std::abs(a[i] - b[j]);
        if (i == 0 && j == 0) return slot = c;
        double best = std::numeric_limits<double>::infinity();
        if (i > 0 && j > 0) best = std::min(best, go(i - 1, j - 1));
        if (i > 0) best = std::min(best, go(i - 1, j));
        if (j > 0) best = std::min(best, go(i, j - 1));
        return slot = c + best;
    };
    return go(n - 1, m - 1);
}

std::vector<double> random_seq(Rng& rng, size_t max_len) {
    std::vector<double> v(1 + rng.uniform_int(max_len));
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    return v;
}

std::vector<UtteranceRecord> small_eval_corpus(size_t n, uint64_t seed) {
    GenConfig g;
    g.min_phonemes = 6;
    g.max_phonemes = 10;
    std::vector<UtteranceRecord> recs;
    for (size_t u = 0; u < n; ++u) {
        auto spk = sample_speaker(mix_seed(seed, u), g);
        auto ids = sample_phoneme_seq(g, mix_seed(seed, 0x11, u));
        auto r = synth_utterance(spk, g, ids, mix_seed(seed, 0x22, u));
        r.id = "eval_s000_u0000" + std::to_string(u);
        recs.push_back(std::move(r));
    }
    return recs;
}

} // namespace

TEST_CASE("dtw: identity alignment has zero cost and a pure diagonal path") {
    std::vector<double> a = {1.0, 2.5, -0.5, 7.0};
    auto r = dtw(a, a);
    CHECK(r.cost == 0.0);
    REQUIRE(r.path.size() == a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(r.path[i].first == i);
        CHECK(r.path[i].second == i);
    }
    CHECK_THROWS_AS(dtw({}, a), Error);
    CHECK_THROWS_AS(dtw(a, {}), Error);
}

TEST_CASE("dtw: pinned unequal-length example") {
    auto r = dtw({0.0, 0.0, 1.0}, {0.0, 1.0});
    CHECK(r.cost == 0.0);
    REQUIRE(r.path.size() == 3);
    CHECK(r.path[0] == std::pair<size_t, size_t>(0, 0));
    CHECK(r.path[1] == std::pair<size_t, size_t>(1, 0));
    CHECK(r.path[2] == std::pair<size_t, size_t>(2, 1));
}

TEST_CASE("dtw cost is symmetric") {
    for (uint64_t rep = 0; rep < 1000; ++rep) {
        Rng rng(mix_seed(0x11d, rep));
        auto a = random_seq(rng, 12);
        auto b = random_seq(rng, 12);
        CHECK(dtw(a, b).cost == doctest::Approx(dtw(b, a).cost).epsilon(1e-12));
    }
}

TEST_CASE("dtw matches the exhaustive DP oracle") {
    for (uint64_t rep = 0; rep < 500; ++rep) {
        Rng rng(mix_seed(0x22e, rep));
        auto a = random_seq(rng, 8);
        auto b = random_seq(rng, 8);
        auto r = dtw(a, b);
        CHECK(r.cost == doctest::Approx(dtw_cost_oracle(a, b)).epsilon(1e-12));
        // path validity: starts (0,0), ends (n-1,m-1), steps in the move set,
        // and the path cost re-sums to the reported cost
        REQUIRE(!r.path.empty());
        CHECK(r.path.front() == std::pair<size_t, size_t>(0, 0));
        CHECK(r.path.back() == std::pair<size_t, size_t>(a.size() - 1, b.size() - 1));
        double resum = 0.0;
        for (size_t k = 0; k < r.path.size(); ++k) {
            resum += std::abs(a[r.path[k].first] - b[r.path[k].second]);
            if (k) {
                size_t di = r.path[k].first - r.path[k - 1].first;
                size_t dj = r.path[k].second - r.path[k - 1].second;
                CHECK(di <= 1);
                CHECK(dj <= 1);
                CHECK(di + dj >= 1);
            }
        }
        CHECK(resum == doctest::Approx(r.cost).epsilon(1e-12));
    }
}

TEST_CASE("align_to_gt averages predictions over the gt timeline") {
    auto out = align_to_gt({0.0, 0.0, 1.0}, {0.0, 1.0});
    REQUIRE(out.size() == 3);
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 0.0);
    CHECK(out[2] == 1.0);
}

TEST_CASE("pitch accuracy: exact, near, octave, and degenerate cases") {
    std::vector<uint8_t> v2 = {1, 1};
    CHECK(pitch_accuracy({200, 300}, {200, 300}, v2, PitchAccuracyMode::RPA) == 100.0);

    // 205 Hz vs 200 Hz is ~42.8 cents (inside 50), 206 is ~51.2 (outside)
    CHECK(pitch_accuracy({200, 200}, {205, 206}, v2, PitchAccuracyMode::RPA) ==
          doctest::Approx(50.0));

    // octave error: 0% raw pitch accuracy, 100% chroma accuracy
    std::vector<uint8_t> v1 = {1};
    CHECK(pitch_accuracy({200}, {400}, v1, PitchAccuracyMode::RPA) == 0.0);
    CHECK(pitch_accuracy({200}, {400}, v1, PitchAccuracyMode::RCA) == 100.0);

    // unvoiced gt frames are excluded entirely
    std::vector<uint8_t> vu = {1, 0};
    CHECK(pitch_accuracy({200, 0}, {200, 999}, vu, PitchAccuracyMode::RPA) == 100.0);

    // nonpositive predictions count as wrong and are flagged
    PitchAccuracyDiagnostics diag;
    CHECK(pitch_accuracy({200, 200}, {0, 200}, v2, PitchAccuracyMode::RPA, 50.0,
                         &diag) == doctest::Approx(50.0));
    CHECK(diag.counted == 2);
    CHECK(diag.correct == 1);
    CHECK(diag.nonpositive_pred == 1);

    CHECK(pitch_accuracy({0, 0}, {1, 1}, {0, 0}, PitchAccuracyMode::RPA) == 0.0);
    CHECK_THROWS_AS(pitch_accuracy({1}, {1, 2}, v2, PitchAccuracyMode::RPA), Error);
    CHECK_THROWS_AS(pitch_accuracy({1}, {1}, v1, PitchAccuracyMode::RPA, 0.0), Error);
}

TEST_CASE("RCA is never below RPA") {
    for (uint64_t rep = 0; rep < 500; ++rep) {
        Rng rng(mix_seed(0x33f, rep));
        size_t n = 1 + rng.uniform_int(20);
        std::vector<double> gt(n), pred(n);
        std::vector<uint8_t> vuv(n);
        for (size_t i = 0; i < n; ++i) {
            gt[i] = rng.uniform(80.0, 400.0);
            pred[i] = rng.uniform(40.0, 800.0);
            vuv[i] = rng.uniform() < 0.8 ? 1 : 0;
        }
        double rpa = pitch_accuracy(gt, pred, vuv, PitchAccuracyMode::RPA);
        double rca = pitch_accuracy(gt, pred, vuv, PitchAccuracyMode::RCA);
        CHECK(rca >= rpa);
    }
}

TEST_CASE("error metrics: hand-checked values") {
    std::vector<uint8_t> v = {1, 1};
    auto zero = f0_error_metrics({100, 200}, {100, 200}, v);
    CHECK(zero.mae_frame == 0.0);
    CHECK(zero.rmse == 0.0);

    auto m = f0_error_metrics({100, 200}, {110, 190}, v);
    CHECK(m.mae_frame == doctest::Approx(10.0));
    CHECK(m.rmse == doctest::Approx(10.0));

    // voiced-only MAE, all-frame RMSE
    std::vector<uint8_t> vu = {1, 0};
    auto mu = f0_error_metrics({100, 0}, {110, 20}, vu);
    CHECK(mu.mae_frame == doctest::Approx(10.0));
    CHECK(mu.rmse == doctest::Approx(std::sqrt((100.0 + 400.0) / 2.0)));

    auto e = energy_error_metrics({2.0, 2.0}, {2.5, 1.5});
    CHECK(e.mae_log == doctest::Approx(0.5));
    double hi = std::exp2(2.5) - 4.0, lo = 4.0 - std::exp2(1.5);
    CHECK(e.mae_frame == doctest::Approx((hi + lo) / 2.0));
    CHECK(e.rmse == doctest::Approx(std::sqrt((hi * hi + lo * lo) / 2.0)));
}

TEST_CASE("stats_diff: frame level, phoneme level, degenerate inputs") {
    auto zero = stats_diff({1, 2, 3}, {1, 2, 3}, nullptr, nullptr, false);
    CHECK(zero.d_mu == 0.0);
    CHECK(zero.d_sigma == 0.0);
    CHECK(zero.sigma_defined);

    std::vector<uint32_t> durs = {2, 2};
    auto ph = stats_diff({1, 1, 3, 3}, {2, 2, 4, 4}, &durs, nullptr, true);
    CHECK(ph.d_mu == doctest::Approx(1.0));
    CHECK(ph.d_sigma == doctest::Approx(0.0));

    // one usable value: mean defined, sigma not
    std::vector<uint8_t> vuv = {1, 0, 0};
    auto one = stats_diff({5, 0, 0}, {7, 0, 0}, nullptr, &vuv, false);
    CHECK(one.d_mu == doctest::Approx(2.0));
    CHECK(!one.sigma_defined);

    std::vector<uint8_t> none = {0, 0};
    auto empty = stats_diff({0, 0}, {1, 1}, nullptr, &none, false);
    CHECK(!empty.sigma_defined);
    CHECK(empty.d_mu == 0.0);

    // random input vs an independent two-pass population oracle
    for (uint64_t rep = 0; rep < 200; ++rep) {
        Rng rng(mix_seed(0x44a, rep));
        size_t n = 50;
        std::vector<double> g(n), p(n);
        for (size_t i = 0; i < n; ++i) {
            g[i] = rng.uniform(0.0, 10.0);
            p[i] = rng.uniform(0.0, 10.0);
        }
        auto got = stats_diff(g, p, nullptr, nullptr, false);
        auto moments = [&](const std::vector<double>& v) {
            double mu = 0;
            for (double x : v) mu += x;
            mu /= double(n);
            double var = 0;
            for (double x : v) var += (x - mu) * (x - mu);
            return std::pair<double, double>(mu, std::sqrt(var / double(n)));
        };
        auto [gmu, gsd] = moments(g);
        auto [pmu, psd] = moments(p);
        CHECK(got.d_mu == doctest::Approx(std::abs(gmu - pmu)).epsilon(1e-9));
        CHECK(got.d_sigma == doctest::Approx(std::abs(gsd - psd)).epsilon(1e-9));
    }
}

TEST_CASE("copy-gt evaluation is a perfect score end to end") {
    auto recs = small_eval_corpus(6, 77);
    EvalOptions<float> opt;
    opt.copy_gt = true;
    std::vector<ContinuationEval> details;
    auto rep = evaluate_continuation(recs, opt, {}, &details);
    CHECK(rep.utterance_count == 6);
    CHECK(rep.skipped == 0);
    CHECK(rep.f0.rpa == doctest::Approx(100.0));
    CHECK(rep.f0.rca == doctest::Approx(100.0));
    CHECK(rep.f0.mae_frame == doctest::Approx(0.0));
    CHECK(rep.f0.rmse == doctest::Approx(0.0));
    CHECK(rep.f0.mu_frame == doctest::Approx(0.0));
    CHECK(rep.energy.mae_log == doctest::Approx(0.0));
    CHECK(rep.energy.rmse == doctest::Approx(0.0));
    REQUIRE(details.size() == 6);
    for (auto& d : details) {
        CHECK(d.split_frame > 0);
        CHECK(d.gt_f0.size() == d.gt_vuv.size());
        size_t dur_sum = 0;
        for (uint32_t x : d.tail_durations) dur_sum += x;
        CHECK(dur_sum == d.gt_f0.size());
    }
}

TEST_CASE("report JSON schema carries exactly the expected fields") {
    auto recs = small_eval_corpus(3, 78);
    EvalOptions<float> opt;
    opt.copy_gt = true;
    nlohmann::json j = evaluate_continuation(recs, opt);
    REQUIRE(j.contains("F0"));
    REQUIRE(j.contains("Energy"));
    CHECK(j.contains("utterance_count"));
    CHECK(j.contains("skipped"));
    CHECK(j.contains("config"));
    std::set<std::string> f0_keys, e_keys;
    for (auto& [k, _] : j["F0"].items()) f0_keys.insert(k);
    for (auto& [k, _] : j["Energy"].items()) e_keys.insert(k);
    CHECK(f0_keys == std::set<std::string>({"RPA", "RCA", "RMSE", "MAE_frame",
                                            "MAE_phoneme", "mu_frame", "sigma_frame",
                                            "mu_phoneme", "sigma_phoneme"}));
    CHECK(e_keys == std::set<std::string>({"MAE_log", "RMSE", "MAE_frame",
                                           "MAE_phoneme", "mu_frame", "sigma_frame",
                                           "mu_phoneme", "sigma_phoneme"}));
}

TEST_CASE("evaluation result does not depend on record order") {
    auto recs = small_eval_corpus(8, 79);
    ModelConfig mc = tiny_config();
    mc.speaker_dim = 16;
    mc.phoneme_vocab = 64;
    Model<float> model(mc);
    Rng rng(5);
    for (auto& p : model.store().params())
        for (auto& v : p.tensor.data()) v = float(rng.normal(0.0, 0.05));
    EvalOptions<float> opt;
    opt.model = &model;
    auto a = evaluate_continuation(recs, opt);
    std::reverse(recs.begin(), recs.end());
    auto b = evaluate_continuation(recs, opt);
    CHECK(a.utterance_count == b.utterance_count);
    CHECK(a.f0.mae_frame == doctest::Approx(b.f0.mae_frame).epsilon(1e-9));
    CHECK(a.f0.rpa == doctest::Approx(b.f0.rpa).epsilon(1e-9));
    CHECK(a.energy.mae_log == doctest::Approx(b.energy.mae_log).epsilon(1e-9));
    CHECK(a.f0.sigma_phoneme == doctest::Approx(b.f0.sigma_phoneme).epsilon(1e-9));
}

TEST_CASE("prompt-mean baseline: constant-F0 corpus has zero baseline error") {
    GenConfig g;
    g.jitter_scale = 0.0;
    g.accent_prob = 0.0;
    g.f0_range_min = g.f0_range_max = 1e-9; // flat contours
    g.min_phonemes = 6;
    g.max_phonemes = 8;
    std::vector<UtteranceRecord> recs;
    for (size_t u = 0; u < 4; ++u) {
        auto spk = sample_speaker(mix_seed(91, u), g);
        auto ids = sample_phoneme_seq(g, mix_seed(92, u));
        recs.push_back(synth_utterance(spk, g, ids, mix_seed(93, u)));
        recs.back().id = "flat_s000_u0000" + std::to_string(u);
    }
    CHECK(speaker_mean_f0_baseline_mae(recs) == doctest::Approx(0.0).epsilon(1e-6));

    // and with real variation it is strictly positive
    auto varied = small_eval_corpus(4, 94);
    CHECK(speaker_mean_f0_baseline_mae(varied) > 0.0);
}

TEST_CASE("prompt sensitivity is zero at init and positive after randomization") {
    auto recs = small_eval_corpus(5, 95);
    ModelConfig mc = tiny_config();
    mc.speaker_dim = 16;
    mc.phoneme_vocab = 64;
    Model<float> zeroed(mc);
    // zero-init heads: output identically zero whatever the latent
    CHECK(prompt_sensitivity(zeroed, recs) == 0.0);

    Model<float> model(mc);
    Rng rng(6);
    for (auto& p : model.store().params())
        for (auto& v : p.tensor.data()) v = float(rng.normal(0.0, 0.05));
    CHECK(prompt_sensitivity(model, recs) > 0.0);
}
