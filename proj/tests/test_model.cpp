#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <promode/promode.hpp>

using namespace promode;

namespace {

// Zero-initialized heads make several behavioral probes vacuous; fill every
// parameter with small noise so outputs actually depend on the inputs.
template <class S>
void randomize_params(Model<S>& model, uint64_t seed, double scale = 0.05) {
    Rng rng(mix_seed(seed, 0x7a7a));
    for (auto& p : model.store().params())
        for (auto& v : p.tensor.data()) v = S(rng.normal(0.0, scale));
}

template <class S>
bool same_data(const Tensor<S>& a, const Tensor<S>& b) {
    return a.data() == b.data();
}

template <class S>
Predictions<S> predictions_from_gt(const FrameFeatures& f, double vuv_logit_mag) {
    size_t t = f.frames;
    std::vector<S> f0(t), en(t), vl(t), mel(f.mel10.begin(), f.mel10.end());
    for (size_t i = 0; i < t; ++i) {
        f0[i] = S(f.f0_hz[i]);
        en[i] = S(f.energy_log[i]);
        vl[i] = S(f.vuv[i] ? vuv_logit_mag : -vuv_logit_mag);
    }
    Predictions<S> p;
    p.f0_hz = Tensor<S>::from_data({t, 1}, std::move(f0));
    p.energy_log = Tensor<S>::from_data({t, 1}, std::move(en));
    p.mel10 = Tensor<S>::from_data({t, 10}, std::move(mel));
    p.vuv_logit = Tensor<S>::from_data({t, 1}, std::move(vl));
    return p;
}

} // namespace

TEST_CASE("shape contracts hold across sequence lengths") {
    ModelConfig mc = desk_config();
    Model<float> model(mc);
    size_t pdim = mc.pd2_dim();
    struct Probe { size_t phonemes; uint32_t dur; };
    for (auto pr : {Probe{10, 5}, Probe{20, 10}, Probe{30, 20}}) {
        auto f = toy_features(mc, 3, pr.phonemes, pr.dur);
        size_t t = pr.phonemes * pr.dur;
        REQUIRE(f.frames == t);
        auto mask = sample_mask(f.durations, mc.mask_ratio, 5);
        auto emb = model.embed_inputs(f, mask, false);
        CHECK(emb.dim(0) == t);
        CHECK(emb.dim(1) == mc.combined_dim);

        auto latent = model.encode(emb);
        CHECK(latent.dim(0) == mc.latent_count); // independent of T
        CHECK(latent.dim(1) == mc.latent_dim);

        auto p1 = model.decode_pd1(model.embed_inputs(f, mask, true), latent);
        CHECK(p1.f0_hz.dim(0) == t);
        CHECK(p1.f0_hz.dim(1) == 1);
        CHECK(p1.mel10.dim(1) == 10);

        auto mod = model.modulate(latent, emb);
        for (auto* m : {&mod.shift1, &mod.scale1, &mod.gate1,
                        &mod.shift2, &mod.scale2, &mod.gate2}) {
            CHECK(m->dim(0) == t);
            CHECK(m->dim(1) == pdim);
        }

        auto p2 = model.decode_pd2(model.embed_text(f), latent, mod);
        CHECK(p2.f0_hz.dim(0) == t);
        CHECK(p2.energy_log.dim(0) == t);
        CHECK(p2.mel10.dim(0) == t);
        CHECK(p2.vuv_logit.dim(0) == t);
    }
}

TEST_CASE("forward passes are pure (bit-identical reruns)") {
    ModelConfig mc = tiny_config();
    Model<float> model(mc);
    randomize_params(model, 9);
    auto f = toy_features(mc, 4);
    auto mask = sample_mask(f.durations, mc.mask_ratio, 6);
    auto a = model.infer_continuation(f, nearest_boundary_split(f.durations));
    auto b = model.infer_continuation(f, nearest_boundary_split(f.durations));
    CHECK(same_data(a.f0_hz, b.f0_hz));
    CHECK(same_data(a.energy_log, b.energy_log));
    CHECK(same_data(a.mel10, b.mel10));
    CHECK(same_data(a.vuv_logit, b.vuv_logit));

    auto l1 = model.forward_loss(f, mask);
    auto l2 = model.forward_loss(f, mask);
    CHECK(l1.total.item() == l2.total.item());
}

TEST_CASE("masked frames are invisible: perturbing them cannot change outputs") {
    ModelConfig mc = tiny_config();
    Model<float> model(mc);
    randomize_params(model, 10);
    auto f = toy_features(mc, 4);
    auto mask = sample_mask(f.durations, 0.5, 3);
    REQUIRE(mask.masked_count() > 0);
    REQUIRE(mask.masked_count() < f.frames);

    size_t mi = 0;
    while (!mask.flags[mi]) ++mi;
    FrameFeatures g = f;
    g.f0_hz[mi] += 55.0;
    g.energy_log[mi] += 2.0;
    for (size_t k = 0; k < 10; ++k) g.mel10[mi * 10 + k] += 1.0;

    auto ea = model.embed_inputs(f, mask, false);
    auto eb = model.embed_inputs(g, mask, false);
    CHECK(same_data(ea, eb));

    auto la = model.encode(ea);
    auto pa = model.decode_pd2(model.embed_text(f), la, model.modulate(la, ea));
    auto lb = model.encode(eb);
    auto pb = model.decode_pd2(model.embed_text(g), lb, model.modulate(lb, eb));
    CHECK(same_data(pa.f0_hz, pb.f0_hz));

    // control: the same perturbation at a visible frame does change the embedding
    size_t vi = 0;
    while (mask.flags[vi]) ++vi;
    FrameFeatures h = f;
    h.f0_hz[vi] += 55.0;
    CHECK(!same_data(ea, model.embed_inputs(h, mask, false)));
}

TEST_CASE("zero-initialized heads start silent") {
    ModelConfig mc = tiny_config();
    Model<float> model(mc);
    auto f = toy_features(mc, 4);
    auto mask = sample_mask(f.durations, mc.mask_ratio, 2);
    auto emb = model.embed_inputs(f, mask, false);
    auto latent = model.encode(emb);

    auto p1 = model.decode_pd1(model.embed_inputs(f, mask, true), latent);
    for (auto* t : {&p1.f0_hz, &p1.energy_log, &p1.mel10, &p1.vuv_logit})
        for (float v : t->data()) CHECK(v == 0.0f);

    auto mod = model.modulate(latent, emb);
    for (auto* t : {&mod.shift1, &mod.scale1, &mod.gate1,
                    &mod.shift2, &mod.scale2, &mod.gate2})
        for (float v : t->data()) CHECK(v == 0.0f);

    auto p2 = model.decode_pd2(model.embed_text(f), latent, mod);
    for (auto* t : {&p2.f0_hz, &p2.energy_log, &p2.mel10, &p2.vuv_logit})
        for (float v : t->data()) CHECK(v == 0.0f);
}

TEST_CASE("conditional trunk with zero gates is an exact identity") {
    ModelConfig mc = tiny_config();
    Model<float> model(mc);
    // randomize everything except the modulation heads that feed the gates
    Rng rng(77);
    for (auto& p : model.store().params()) {
        if (p.name.rfind("mod.head.", 0) == 0) continue;
        for (auto& v : p.tensor.data()) v = float(rng.normal(0.0, 0.1));
    }
    auto f = toy_features(mc, 4);
    auto mask = sample_mask(f.durations, mc.mask_ratio, 2);
    auto emb = model.embed_inputs(f, mask, false);
    auto latent = model.encode(emb);
    auto mod = model.modulate(latent, emb); // all zero by construction
    auto h = model.embed_text(f);
    auto out = model.apply_pd2_trunk(h, mod);
    CHECK(same_data(out, h)); // bit-exact pass-through
}

TEST_CASE("global adaln broadcasts a single six-tuple over all frames") {
    ModelConfig mc = tiny_config();
    mc.global_adaln = true;
    Model<float> model(mc);
    randomize_params(model, 12);
    auto f = toy_features(mc, 4);
    auto mask = sample_mask(f.durations, mc.mask_ratio, 2);
    auto emb = model.embed_inputs(f, mask, false);
    auto mod = model.modulate(model.encode(emb), emb);
    size_t pdim = mc.pd2_dim();
    for (auto* m : {&mod.shift1, &mod.scale1, &mod.gate1,
                    &mod.shift2, &mod.scale2, &mod.gate2}) {
        REQUIRE(m->dim(0) == f.frames);
        const auto& d = m->data();
        for (size_t t = 1; t < f.frames; ++t)
            for (size_t c = 0; c < pdim; ++c) CHECK(d[t * pdim + c] == d[c]);
    }

    // the per-frame (default) variant does vary across frames
    ModelConfig mc2 = tiny_config();
    Model<float> varies(mc2);
    randomize_params(varies, 12);
    auto emb2 = varies.embed_inputs(f, mask, false);
    auto mod2 = varies.modulate(varies.encode(emb2), emb2);
    const auto& d2 = mod2.gate1.data();
    bool any_diff = false;
    for (size_t c = 0; c < pdim; ++c)
        if (d2[pdim + c] != d2[c]) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("PD2 predictions depend on the latent (prompt information flows)") {
    ModelConfig mc = tiny_config();
    Model<float> model(mc);
    randomize_params(model, 15);
    auto fa = toy_features(mc, 30);
    auto fb = toy_features(mc, 31);
    auto mask_a = continuation_mask(fa.frames, fa.frames / 2);
    auto mask_b = continuation_mask(fb.frames, fb.frames / 2);
    auto lat_a = model.encode_features(fa, mask_a);
    auto lat_b = model.encode_features(fb, mask_b);
    auto text = model.embed_text(fa);
    auto pa = model.decode_pd2(text, lat_a, model.modulate(lat_a, model.embed_inputs(fa, mask_a, false)));
    auto pb = model.decode_pd2(text, lat_b, model.modulate(lat_b, model.embed_inputs(fa, mask_a, false)));
    CHECK(!same_data(pa.f0_hz, pb.f0_hz));
}

TEST_CASE("loss: exact predictions give (near) zero loss") {
    ModelConfig mc = tiny_config();
    mc.disable_aol = true;
    Model<double> model(mc);
    auto f = toy_features(mc, 4);
    auto mask = sample_mask(f.durations, 0.5, 4);
    auto p = predictions_from_gt<double>(f, 20.0);
    auto lb = model.loss(nullptr, p, f, mask);
    CHECK(lb.total.item() < 1e-6);
    CHECK(lb.pd2_f0 == 0.0);
    CHECK(lb.pd2_energy == 0.0);
    CHECK(lb.pd2_mel == 0.0);
    CHECK(lb.pd2_vuv < 1e-6);
    CHECK(lb.pd1_sum() == 0.0);
}

TEST_CASE("loss: zero vuv logit costs exactly ln 2 per frame") {
    ModelConfig mc = tiny_config();
    mc.disable_aol = true;
    Model<double> model(mc);
    auto f = toy_features(mc, 4);
    auto mask = sample_mask(f.durations, 0.5, 4);
    auto p = predictions_from_gt<double>(f, 20.0);
    for (auto& v : p.vuv_logit.data()) v = 0.0;
    auto lb = model.loss(nullptr, p, f, mask);
    CHECK(lb.pd2_vuv == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("loss decomposes into its logged components") {
    ModelConfig mc = tiny_config();
    Model<double> model(mc);
    randomize_params(model, 21);
    auto f = toy_features(mc, 4);
    auto mask = sample_mask(f.durations, mc.mask_ratio, 4);
    auto lb = model.forward_loss(f, mask);
    CHECK(lb.total.item() ==
          doctest::Approx(lb.pd1_sum() + lb.pd2_sum()).epsilon(1e-9));
    CHECK(lb.pd1_sum() > 0.0); // the auxiliary decoder contributes by default

    ModelConfig no_aol = mc;
    no_aol.disable_aol = true;
    Model<double> m2(no_aol);
    randomize_params(m2, 21);
    auto lb2 = m2.forward_loss(f, mask);
    CHECK(lb2.pd1_sum() == 0.0);
    CHECK(lb2.total.item() == doctest::Approx(lb2.pd2_sum()).epsilon(1e-9));
}

TEST_CASE("whole-model gradients match finite differences") {
    auto res = model_grad_check(/*seed=*/1, /*samples_per_tensor=*/2);
    CAPTURE(res.max_rel_error);
    CAPTURE(res.worst_input);
    CHECK(res.ok(1e-4));
}

TEST_CASE("encoder gradients wrt the learned latents match finite differences") {
    ModelConfig mc = tiny_config();
    Model<double> model(mc);
    randomize_params(model, 33, 0.1);
    auto f = toy_features(mc, 8);
    auto mask = sample_mask(f.durations, mc.mask_ratio, 8);
    auto latents = model.store().find("encoder.latents").tensor;
    auto fn = [&]() {
        return mean_all(model.encode_features(f, mask));
    };
    auto res = grad_check(fn, {latents});
    CAPTURE(res.max_rel_error);
    CHECK(res.ok(1e-5));
}

TEST_CASE("configuration validation rejects inconsistent settings") {
    ModelConfig mc = tiny_config();
    mc.latent_dim = 15; // not divisible by enc_heads=2
    CHECK_THROWS_AS(Model<float>{mc}, Error);

    ModelConfig odd = tiny_config();
    odd.combined_dim = 17;
    CHECK_THROWS_AS(Model<float>{odd}, Error);

    ModelConfig all_dropped = tiny_config();
    all_dropped.drop_f0 = all_dropped.drop_energy = all_dropped.drop_mel10 = true;
    CHECK_THROWS_AS(Model<float>{all_dropped}, Error);
}

TEST_CASE("mismatched mask length is rejected") {
    ModelConfig mc = tiny_config();
    Model<float> model(mc);
    auto f = toy_features(mc, 4);
    FrameMask bad;
    bad.flags.resize(f.frames + 1, false);
    CHECK_THROWS_AS(model.embed_inputs(f, bad, false), Error);
}

TEST_CASE("feature drop flags silence exactly their feature") {
    ModelConfig mc = tiny_config();
    ModelConfig dropped = mc;
    dropped.drop_f0 = true;
    Model<float> a(mc), b(dropped);
    randomize_params(a, 40);
    randomize_params(b, 40);
    auto f = toy_features(mc, 4);
    auto mask = sample_mask(f.durations, 0.3, 4);
    FrameFeatures g = f;
    size_t vi = 0;
    while (mask.flags[vi]) ++vi;
    g.f0_hz[vi] += 30.0;
    // with drop_f0, changing visible F0 cannot move the embedding
    CHECK(same_data(b.embed_inputs(f, mask, false), b.embed_inputs(g, mask, false)));
    CHECK(!same_data(a.embed_inputs(f, mask, false), a.embed_inputs(g, mask, false)));
}
