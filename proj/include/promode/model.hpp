#pragma once

// The ProMode network: per-feature embedding stacks, rotary stamping,
// ConvNeXt-V2 input convolutions, Perceiver encoder (learned latent queries,
// cross-attention, self-attention stack), unconditional decoder PD1,
// per-frame adaLN-zero modulation, and conditional decoder PD2.

#include "promode/masking.hpp"
#include "promode/preprocess.hpp"
#include "promode/record.hpp"
#include "promode/tensor.hpp"

namespace promode {

struct ModelConfig {
    size_t feat_embed_dim = 128;
    size_t combined_dim = 768;
    size_t conv_layers = 4, conv_hidden = 512, conv_kernel = 7;
    size_t enc_layers = 18, enc_heads = 8;
    size_t latent_count = 64, latent_dim = 768;
    size_t enc_ff_hidden = 0; // 0 -> 2 * latent_dim
    size_t pd2_layers = 4, pd2_heads = 4, pd2_head_dim = 64, pd2_ff_hidden = 512;
    size_t text_conv_layers = 4, text_conv_hidden = 512, text_conv_kernel = 7;
    size_t phoneme_vocab = 64;
    size_t speaker_dim = 16;
    double mask_ratio = 0.6;
    // fixed output scales so zero-init heads reach Hz / log2 magnitudes quickly
    double f0_output_scale = 100.0;
    double energy_output_scale = 8.0;
    // ablation switches (Table-1-style rows)
    bool disable_aol = false;
    bool global_adaln = false;
    bool shared_pd2_trunk = false;
    bool drop_f0 = false, drop_energy = false, drop_duration = false;
    bool drop_context_text = false, drop_mel10 = false;
    uint64_t init_seed = 1;
    PreprocessConfig preprocess;

    size_t pd2_dim() const { return pd2_heads * pd2_head_dim; }
    size_t enc_ff() const { return enc_ff_hidden ? enc_ff_hidden : 2 * latent_dim; }

    void check() const {
        if (latent_dim % enc_heads)
            throw Error("config: latent_dim must be divisible by enc_heads");
        if (combined_dim % 2 || pd2_dim() % 2)
            throw Error("config: rotary needs even dims");
        if (drop_f0 && drop_energy && drop_mel10)
            throw Error("config: drop flags remove all acoustic features");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"feat_embed_dim", c.feat_embed_dim},
         {"combined_dim", c.combined_dim},
         {"conv_layers", c.conv_layers},
         {"conv_hidden", c.conv_hidden},
         {"conv_kernel", c.conv_kernel},
         {"enc_layers", c.enc_layers},
         {"enc_heads", c.enc_heads},
         {"latent_count", c.latent_count},
         {"latent_dim", c.latent_dim},
         {"enc_ff_hidden", c.enc_ff_hidden},
         {"pd2_layers", c.pd2_layers},
         {"pd2_heads", c.pd2_heads},
         {"pd2_head_dim", c.pd2_head_dim},
         {"pd2_ff_hidden", c.pd2_ff_hidden},
         {"text_conv_layers", c.text_conv_layers},
         {"text_conv_hidden", c.text_conv_hidden},
         {"text_conv_kernel", c.text_conv_kernel},
         {"phoneme_vocab", c.phoneme_vocab},
         {"speaker_dim", c.speaker_dim},
         {"mask_ratio", c.mask_ratio},
         {"f0_output_scale", c.f0_output_scale},
         {"energy_output_scale", c.energy_output_scale},
         {"disable_aol", c.disable_aol},
         {"global_adaln", c.global_adaln},
         {"shared_pd2_trunk", c.shared_pd2_trunk},
         {"drop_f0", c.drop_f0},
         {"drop_energy", c.drop_energy},
         {"drop_duration", c.drop_duration},
         {"drop_context_text", c.drop_context_text},
         {"drop_mel10", c.drop_mel10},
         {"init_seed", c.init_seed},
         {"savgol_window", c.preprocess.savgol_window},
         {"savgol_order", c.preprocess.savgol_order},
         {"energy_floor", c.preprocess.energy_floor}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
#define PM_GET(f) c.f = j.value(#f, d.f)
    PM_GET(feat_embed_dim); PM_GET(combined_dim); PM_GET(conv_layers);
    PM_GET(conv_hidden); PM_GET(conv_kernel); PM_GET(enc_layers);
    PM_GET(enc_heads); PM_GET(latent_count); PM_GET(latent_dim);
    PM_GET(enc_ff_hidden); PM_GET(pd2_layers); PM_GET(pd2_heads);
    PM_GET(pd2_head_dim); PM_GET(pd2_ff_hidden); PM_GET(text_conv_layers);
    PM_GET(text_conv_hidden); PM_GET(text_conv_kernel); PM_GET(phoneme_vocab);
    PM_GET(speaker_dim); PM_GET(mask_ratio); PM_GET(f0_output_scale);
    PM_GET(energy_output_scale); PM_GET(disable_aol); PM_GET(global_adaln);
    PM_GET(shared_pd2_trunk); PM_GET(drop_f0); PM_GET(drop_energy);
    PM_GET(drop_duration); PM_GET(drop_context_text); PM_GET(drop_mel10);
    PM_GET(init_seed);
#undef PM_GET
    c.preprocess.savgol_window = j.value("savgol_window", d.preprocess.savgol_window);
    c.preprocess.savgol_order = j.value("savgol_order", d.preprocess.savgol_order);
    c.preprocess.energy_floor = j.value("energy_floor", d.preprocess.energy_floor);
}

// Desk-scale preset: paper topology, laptop dimensions.
// Desk preset. The latent array (16x256) and the 6 encoder layers are the
// reference desk scale; the surrounding widths are kept narrow because the
// desk corpora are small (a couple hundred utterances) and wider frame/text
// paths memorize speakers instead of generalizing.
inline ModelConfig desk_config() {
    ModelConfig c;
    c.feat_embed_dim = 16;
    c.combined_dim = 64;
    c.conv_layers = 2;
    c.conv_hidden = 64;
    c.conv_kernel = 7;
    c.enc_layers = 6;
    c.enc_heads = 4;
    c.latent_count = 16;
    c.latent_dim = 256;
    c.enc_ff_hidden = 128;
    c.pd2_layers = 2;
    c.pd2_heads = 4;
    c.pd2_head_dim = 16;
    c.pd2_ff_hidden = 64;
    c.text_conv_layers = 2;
    c.text_conv_hidden = 64;
    c.text_conv_kernel = 7;
    c.phoneme_vocab = 64;
    c.shared_pd2_trunk = true;
    return c;
}

// Tiny preset for finite-difference checks (T=12, L=4, dims 16).
inline ModelConfig tiny_config() {
    ModelConfig c;
    c.feat_embed_dim = 8;
    c.combined_dim = 16;
    c.conv_layers = 2;
    c.conv_hidden = 16;
    c.conv_kernel = 3;
    c.enc_layers = 2;
    c.enc_heads = 2;
    c.latent_count = 4;
    c.latent_dim = 16;
    c.enc_ff_hidden = 32;
    c.pd2_layers = 2;
    c.pd2_heads = 2;
    c.pd2_head_dim = 8;
    c.pd2_ff_hidden = 32;
    c.text_conv_layers = 2;
    c.text_conv_hidden = 16;
    c.text_conv_kernel = 3;
    c.phoneme_vocab = 8;
    c.speaker_dim = 4;
    return c;
}

template <class S>
struct Param {
    std::string name;
    Tensor<S> tensor;
    std::vector<S> m, v; // Adam moments
};

template <class S>
class ParamStore {
public:
    Tensor<S> add(const std::string& name, Shape shape, std::vector<S> init) {
        for (auto& p : params_)
            if (p.name == name) throw Error("duplicate parameter name: " + name);
        auto t = Tensor<S>::from_data(std::move(shape), std::move(init), true);
        params_.push_back({name, t, {}, {}});
        return t;
    }
    std::vector<Param<S>>& params() { return params_; }
    Param<S>& find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return p;
        throw Error("no parameter named " + name);
    }
    const std::vector<Param<S>>& params() const { return params_; }
    size_t count() const {
        size_t n = 0;
        for (auto& p : params_) n += p.tensor.size();
        return n;
    }
    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    std::vector<Param<S>> params_;
};

template <class S>
struct Predictions {
    Tensor<S> f0_hz;      // {T,1}
    Tensor<S> energy_log; // {T,1}
    Tensor<S> mel10;      // {T,10}
    Tensor<S> vuv_logit;  // {T,1}
};

template <class S>
struct Modulation {
    Tensor<S> shift1, scale1, gate1, shift2, scale2, gate2; // each {T,C}
};

// Per-frame model-facing features derived from a record.
struct FrameFeatures {
    std::vector<double> f0_hz;
    std::vector<double> energy_log; // preprocessed (zeroed, floored, log2, smoothed)
    std::vector<double> mel10;      // T x 10
    std::vector<uint8_t> vuv;
    std::vector<uint32_t> frame_phonemes; // length-regulated ids
    std::vector<uint32_t> durations;      // per-phoneme frame counts
    std::vector<double> log_dur;          // per-frame log1p(duration)
    std::vector<float> speaker_vec;
    size_t frames = 0;
};

inline FrameFeatures make_features(const UtteranceRecord& r,
                                   const PreprocessConfig& pp) {
    FrameFeatures f;
    f.frames = r.frames();
    f.f0_hz.assign(r.f0_hz.begin(), r.f0_hz.end());
    f.energy_log = preprocess_energy(r.energy_raw, r.vuv, pp);
    f.mel10.assign(r.mel10.begin(), r.mel10.end());
    f.vuv = r.vuv;
    f.frame_phonemes = length_regulate(r.phoneme_ids, r.durations_frames);
    f.durations = r.durations_frames;
    f.log_dur.resize(f.frames);
    size_t pos = 0;
    for (uint32_t d : r.durations_frames)
        for (uint32_t k = 0; k < d; ++k) f.log_dur[pos++] = std::log1p(double(d));
    f.speaker_vec = r.speaker_vec;
    return f;
}

template <class S>
class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.check();
        Rng rng(mix_seed(cfg_.init_seed, 0x1417));
        build(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<S>& store() { return store_; }
    const ParamStore<S>& store() const { return store_; }

    // ---- embedding ----

    // Combined per-frame embeddings: each feature through affine->ReLU->LN,
    // concatenated, projected to combined_dim; masked frames replaced by the
    // learned mask embedding; rotary; ConvNeXt-V2 stack.
    Tensor<S> embed_inputs(const FrameFeatures& f, const FrameMask& mask,
                           bool zero_text) const {
        size_t t = f.frames;
        if (mask.flags.size() != t)
            throw Error("embed_inputs: mask length != frame count");
        std::vector<Tensor<S>> parts;
        parts.push_back(feat_f0_.apply(column(f.f0_hz, 0.01), cfg_.drop_f0));
        parts.push_back(feat_energy_.apply(column(f.energy_log, 0.1), cfg_.drop_energy));
        parts.push_back(feat_vuv_.apply(vuv_column(f.vuv), false));
        parts.push_back(feat_mel_.apply(mel_matrix(f), cfg_.drop_mel10));
        parts.push_back(feat_dur_.apply(column(f.log_dur, 1.0), cfg_.drop_duration));
        parts.push_back(feat_spk_.apply(speaker_matrix(f), false));
        parts.push_back(text_feature(f, zero_text || cfg_.drop_context_text));
        auto combined = linear(concat_cols(parts), combine_w_, combine_b_);

        // whole-vector replacement at masked frames (the model cannot peek)
        auto masked_idx = mask_indices(mask.flags, true);
        if (!masked_idx.empty()) {
            auto keep_idx = mask_indices(mask.flags, false);
            Tensor<S> placed = keep_idx.empty()
                                   ? Tensor<S>::zeros({t, cfg_.combined_dim})
                                   : scatter_rows(gather_rows(combined, keep_idx),
                                                  keep_idx, t);
            auto mrows = gather_rows(mask_embed_,
                                     std::vector<size_t>(masked_idx.size(), 0));
            combined = add(placed, scatter_rows(mrows, masked_idx, t));
        }
        auto x = rotary(combined);
        for (auto& blk : input_conv_) x = blk.apply(x);
        return x;
    }

    // ---- Perceiver encoder ----

    Tensor<S> encode(const Tensor<S>& frame_emb) const {
        if (frame_emb.dim(0) < 1) throw Error("encode: empty input");
        auto lat = enc_cross_.apply(latents_, frame_emb, frame_emb, cfg_.enc_heads,
                                    /*rotary_q=*/false);
        lat = add(latents_, lat);
        for (auto& layer : enc_layers_) lat = layer.apply(lat);
        return lat;
    }

    // ---- PD1 (unconditional decoder) ----

    Predictions<S> decode_pd1(const Tensor<S>& frame_emb_no_text,
                              const Tensor<S>& latent) const {
        auto p = pd1_cross_.apply(frame_emb_no_text, latent, latent,
                                  cfg_.enc_heads, /*rotary_q=*/true);
        return heads_apply(pd1_heads_, p);
    }

    // ---- modified adaLN-zero modulation ----

    Modulation<S> modulate(const Tensor<S>& latent, const Tensor<S>& frame_emb) const {
        size_t t = frame_emb.dim(0);
        if (cfg_.global_adaln) {
            // unmodified adaLN-zero: one six-tuple from mean-pooled latent,
            // broadcast over all frames
            auto pooled = scale(sum_cols(latent), S(1) / S(cfg_.latent_count)); // {1,D}
            Modulation<S> m;
            std::vector<size_t> rep(t, 0);
            Tensor<S>* outs[6] = {&m.shift1, &m.scale1, &m.gate1,
                                  &m.shift2, &m.scale2, &m.gate2};
            for (int i = 0; i < 6; ++i)
                *outs[i] = gather_rows(linear(pooled, mod_heads_w_[i], mod_heads_b_[i]), rep);
            return m;
        }
        auto h = mod_cross_.apply(frame_emb, latent, latent, cfg_.pd2_heads,
                                  /*rotary_q=*/true);
        Modulation<S> m;
        m.shift1 = linear(h, mod_heads_w_[0], mod_heads_b_[0]);
        m.scale1 = linear(h, mod_heads_w_[1], mod_heads_b_[1]);
        m.gate1 = linear(h, mod_heads_w_[2], mod_heads_b_[2]);
        m.shift2 = linear(h, mod_heads_w_[3], mod_heads_b_[3]);
        m.scale2 = linear(h, mod_heads_w_[4], mod_heads_b_[4]);
        m.gate2 = linear(h, mod_heads_w_[5], mod_heads_b_[5]);
        return m;
    }

    // ---- PD2 (text-conditional decoder) ----

    // Text-side frame embeddings: phoneme + duration + speaker channels,
    // rotary, then the text ConvNeXt stack. Length-regulated to target frames.
    Tensor<S> embed_text(const FrameFeatures& f) const {
        std::vector<Tensor<S>> parts;
        parts.push_back(pd2_text_feat_.apply(phoneme_embed(f), false));
        parts.push_back(pd2_dur_feat_.apply(column(f.log_dur, 1.0), cfg_.drop_duration));
        parts.push_back(pd2_spk_feat_.apply(speaker_matrix(f), false));
        auto x = rotary(linear(concat_cols(parts), pd2_text_w_, pd2_text_b_));
        for (auto& blk : text_conv_) x = blk.apply(x);
        return x;
    }

    Predictions<S> decode_pd2(const Tensor<S>& text_frame_emb, const Tensor<S>& latent,
                              const Modulation<S>& mod) const {
        size_t t = text_frame_emb.dim(0);
        if (mod.shift1.dim(0) != t)
            throw Error("decode_pd2: text frames (" + std::to_string(t) +
                        ") != modulation frames (" + std::to_string(mod.shift1.dim(0)) + ")");
        auto h0 = pd2_cross_.apply(text_frame_emb, latent, latent, cfg_.pd2_heads,
                                   /*rotary_q=*/true);
        h0 = add(h0, text_frame_emb); // residual around the latent cross-attention
        Predictions<S> out;
        Tensor<S>* fields[4] = {&out.f0_hz, &out.energy_log, &out.mel10, &out.vuv_logit};
        if (cfg_.shared_pd2_trunk) {
            Tensor<S> h = h0;
            for (auto& layer : pd2_trunks_[0]) h = layer.apply(h, mod);
            for (size_t head = 0; head < 4; ++head)
                *fields[head] = linear(h, pd2_heads_.w[head], pd2_heads_.b[head]);
        } else {
            for (size_t head = 0; head < 4; ++head) {
                Tensor<S> h = h0;
                for (auto& layer : pd2_trunks_[head]) h = layer.apply(h, mod);
                *fields[head] = linear(h, pd2_heads_.w[head], pd2_heads_.b[head]);
            }
        }
        out.f0_hz = scale(out.f0_hz, S(cfg_.f0_output_scale));
        out.energy_log = scale(out.energy_log, S(cfg_.energy_output_scale));
        return out;
    }

    // ---- loss ----

    struct LossBreakdown {
        Tensor<S> total;
        double pd1_f0 = 0, pd1_energy = 0, pd1_mel = 0, pd1_vuv = 0;
        double pd2_f0 = 0, pd2_energy = 0, pd2_mel = 0, pd2_vuv = 0;
        double pd1_sum() const { return pd1_f0 + pd1_energy + pd1_mel + pd1_vuv; }
        double pd2_sum() const { return pd2_f0 + pd2_energy + pd2_mel + pd2_vuv; }
    };

    LossBreakdown loss(const Predictions<S>* pred_pd1, const Predictions<S>& pred_pd2,
                       const FrameFeatures& f, const FrameMask& mask) const {
        auto masked = mask_indices(mask.flags, true);
        if (masked.empty()) throw Error("loss: empty mask, no training signal");
        std::vector<size_t> masked_voiced;
        for (size_t i : masked)
            if (f.vuv[i]) masked_voiced.push_back(i);

        auto gt_f0 = column(f.f0_hz, 1.0);
        auto gt_energy = column(f.energy_log, 1.0);
        auto gt_mel = mel_matrix(f);
        auto gt_vuv = vuv_column(f.vuv);

        LossBreakdown out;
        Tensor<S> total = Tensor<S>::scalar(S(0));
        auto add_decoder = [&](const Predictions<S>& p, double* comps) {
            // L1 on F0 over gt-voiced masked frames
            Tensor<S> lf0 = masked_voiced.empty()
                                ? Tensor<S>::scalar(S(0))
                                : mean_all(abs_(sub(gather_rows(p.f0_hz, masked_voiced),
                                                    gather_rows(gt_f0, masked_voiced))));
            auto lerg = mean_all(square(sub(gather_rows(p.energy_log, masked),
                                            gather_rows(gt_energy, masked))));
            auto lmel = mean_all(square(sub(gather_rows(p.mel10, masked),
                                            gather_rows(gt_mel, masked))));
            // stable BCE with logits: softplus(z) - z*y
            auto z = gather_rows(p.vuv_logit, masked);
            auto y = gather_rows(gt_vuv, masked);
            auto lvuv = mean_all(sub(softplus(z), mul(z, y)));
            comps[0] = double(lf0.item());
            comps[1] = double(lerg.item());
            comps[2] = double(lmel.item());
            comps[3] = double(lvuv.item());
            total = add(total, add(add(lf0, lerg), add(lmel, lvuv)));
        };
        double c2[4];
        add_decoder(pred_pd2, c2);
        out.pd2_f0 = c2[0]; out.pd2_energy = c2[1]; out.pd2_mel = c2[2]; out.pd2_vuv = c2[3];
        if (pred_pd1 && !cfg_.disable_aol) {
            double c1[4];
            add_decoder(*pred_pd1, c1);
            out.pd1_f0 = c1[0]; out.pd1_energy = c1[1]; out.pd1_mel = c1[2]; out.pd1_vuv = c1[3];
        }
        out.total = total;
        return out;
    }

    // Full training-style forward for one utterance.
    LossBreakdown forward_loss(const FrameFeatures& f, const FrameMask& mask) const {
        auto emb = embed_inputs(f, mask, /*zero_text=*/false);
        auto latent = encode(emb);
        Predictions<S> p1;
        bool use_aol = !cfg_.disable_aol;
        if (use_aol) {
            auto emb_no_text = embed_inputs(f, mask, /*zero_text=*/true);
            p1 = decode_pd1(emb_no_text, latent);
        }
        auto mod = modulate(latent, emb);
        auto p2 = decode_pd2(embed_text(f), latent, mod);
        return loss(use_aol ? &p1 : nullptr, p2, f, mask);
    }

    // Continuation inference: first half unmasked prompt, rest predicted.
    Predictions<S> infer_continuation(const FrameFeatures& f, size_t split_frame) const {
        auto mask = continuation_mask(f.frames, split_frame);
        auto emb = embed_inputs(f, mask, /*zero_text=*/false);
        auto latent = encode(emb);
        auto mod = modulate(latent, emb);
        return decode_pd2(embed_text(f), latent, mod);
    }

    // latent from an arbitrary (features, mask) pair; exposed for prompt-swap probes
    Tensor<S> encode_features(const FrameFeatures& f, const FrameMask& mask) const {
        return encode(embed_inputs(f, mask, false));
    }

    // One PD2 conditional trunk applied to h; exposed so the identity-at-init
    // contract (zero gates -> exact pass-through) can be asserted directly.
    Tensor<S> apply_pd2_trunk(const Tensor<S>& h, const Modulation<S>& mod,
                              size_t trunk_index = 0) const {
        Tensor<S> x = h;
        for (auto& layer : pd2_trunks_.at(trunk_index)) x = layer.apply(x, mod);
        return x;
    }

private:
    // ---- building blocks ----

    struct Linear {
        Tensor<S> w, b;
        Tensor<S> apply(const Tensor<S>& x) const { return linear(x, w, b); }
    };

    struct FeatureStack { // affine -> ReLU -> LayerNorm(affine)
        Linear lin;
        Tensor<S> gamma, beta;
        bool built = false;
        Tensor<S> apply(const Tensor<S>& x, bool dropped) const {
            if (dropped)
                return Tensor<S>::zeros({x.dim(0), gamma.size()});
            return add_rowvec(mul_rowvec(layernorm_rows(relu(lin.apply(x))), gamma), beta);
        }
    };

    struct ConvNeXtBlock { // dwconv -> LN -> pw1 -> GELU -> GRN -> pw2 -> residual
        Tensor<S> dw_w, dw_b, ln_g, ln_b, grn_g, grn_b;
        Linear pw1, pw2;
        Tensor<S> apply(const Tensor<S>& x) const {
            auto h = dwconv1d(x, dw_w, dw_b);
            h = add_rowvec(mul_rowvec(layernorm_rows(h), ln_g), ln_b);
            h = gelu(pw1.apply(h));
            h = grn(h, grn_g, grn_b);
            return add(x, pw2.apply(h));
        }
    };

    struct CrossAttention {
        Linear wq, wk, wv, wo;
        Tensor<S> apply(const Tensor<S>& q_in, const Tensor<S>& k_in,
                        const Tensor<S>& v_in, size_t heads, bool rotary_q) const {
            auto q = wq.apply(q_in);
            if (rotary_q) q = rotary(q);
            return wo.apply(attention(q, wk.apply(k_in), wv.apply(v_in), heads));
        }
    };

    struct TransformerLayer { // pre-LN self-attention + feed-forward
        Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;
        Linear wq, wk, wv, wo, ff1, ff2;
        size_t heads = 1;
        Tensor<S> apply(const Tensor<S>& x) const {
            auto h = add_rowvec(mul_rowvec(layernorm_rows(x), ln1_g), ln1_b);
            auto a = wo.apply(attention(wq.apply(h), wk.apply(h), wv.apply(h), heads));
            auto y = add(x, a);
            auto h2 = add_rowvec(mul_rowvec(layernorm_rows(y), ln2_g), ln2_b);
            return add(y, ff2.apply(gelu(ff1.apply(h2))));
        }
    };

    struct ConditionalTransformerLayer { // modified adaLN-zero block
        Linear wq, wk, wv, wo, ff1, ff2;
        size_t heads = 1;
        Tensor<S> apply(const Tensor<S>& x, const Modulation<S>& m) const {
            auto h = add(mul(layernorm_rows(x), add_const(m.scale1, S(1))), m.shift1);
            auto q = rotary(wq.apply(h));
            auto k = rotary(wk.apply(h));
            auto a = wo.apply(attention(q, k, wv.apply(h), heads));
            auto y = add(x, mul(m.gate1, a));
            auto h2 = add(mul(layernorm_rows(y), add_const(m.scale2, S(1))), m.shift2);
            return add(y, mul(m.gate2, ff2.apply(gelu(ff1.apply(h2)))));
        }
    };

    struct OutputHeads {
        Tensor<S> w[4], b[4]; // f0, energy, mel10, vuv
    };

    // ---- parameter construction ----

    std::vector<S> normal_init(Rng& rng, size_t n, double stddev) {
        std::vector<S> v(n);
        for (auto& x : v) x = S(rng.normal(0.0, stddev));
        return v;
    }

    Linear make_linear(Rng& rng, const std::string& name, size_t in, size_t out,
                       bool zero = false) {
        Linear l;
        l.w = store_.add(name + ".w", {in, out},
                         zero ? std::vector<S>(in * out, S(0))
                              : normal_init(rng, in * out, 1.0 / std::sqrt(double(in))));
        l.b = store_.add(name + ".b", {out}, std::vector<S>(out, S(0)));
        return l;
    }

    FeatureStack make_feature_stack(Rng& rng, const std::string& name, size_t in) {
        FeatureStack s;
        s.lin = make_linear(rng, name + ".proj", in, cfg_.feat_embed_dim);
        s.gamma = store_.add(name + ".ln.g", {cfg_.feat_embed_dim},
                             std::vector<S>(cfg_.feat_embed_dim, S(1)));
        s.beta = store_.add(name + ".ln.b", {cfg_.feat_embed_dim},
                            std::vector<S>(cfg_.feat_embed_dim, S(0)));
        s.built = true;
        return s;
    }

    ConvNeXtBlock make_conv_block(Rng& rng, const std::string& name, size_t dim,
                                  size_t hidden, size_t kernel) {
        ConvNeXtBlock b;
        b.dw_w = store_.add(name + ".dw.w", {dim, kernel},
                            normal_init(rng, dim * kernel, 1.0 / std::sqrt(double(kernel))));
        b.dw_b = store_.add(name + ".dw.b", {dim}, std::vector<S>(dim, S(0)));
        b.ln_g = store_.add(name + ".ln.g", {dim}, std::vector<S>(dim, S(1)));
        b.ln_b = store_.add(name + ".ln.b", {dim}, std::vector<S>(dim, S(0)));
        b.pw1 = make_linear(rng, name + ".pw1", dim, hidden);
        b.pw2 = make_linear(rng, name + ".pw2", hidden, dim);
        b.grn_g = store_.add(name + ".grn.g", {hidden}, std::vector<S>(hidden, S(0)));
        b.grn_b = store_.add(name + ".grn.b", {hidden}, std::vector<S>(hidden, S(0)));
        return b;
    }

    CrossAttention make_cross(Rng& rng, const std::string& name, size_t q_in,
                              size_t kv_in, size_t dim, size_t out) {
        CrossAttention c;
        c.wq = make_linear(rng, name + ".q", q_in, dim);
        c.wk = make_linear(rng, name + ".k", kv_in, dim);
        c.wv = make_linear(rng, name + ".v", kv_in, dim);
        c.wo = make_linear(rng, name + ".o", dim, out);
        return c;
    }

    TransformerLayer make_layer(Rng& rng, const std::string& name, size_t dim,
                                size_t heads, size_t ff) {
        TransformerLayer l;
        l.heads = heads;
        l.ln1_g = store_.add(name + ".ln1.g", {dim}, std::vector<S>(dim, S(1)));
        l.ln1_b = store_.add(name + ".ln1.b", {dim}, std::vector<S>(dim, S(0)));
        l.ln2_g = store_.add(name + ".ln2.g", {dim}, std::vector<S>(dim, S(1)));
        l.ln2_b = store_.add(name + ".ln2.b", {dim}, std::vector<S>(dim, S(0)));
        l.wq = make_linear(rng, name + ".q", dim, dim);
        l.wk = make_linear(rng, name + ".k", dim, dim);
        l.wv = make_linear(rng, name + ".v", dim, dim);
        l.wo = make_linear(rng, name + ".o", dim, dim);
        l.ff1 = make_linear(rng, name + ".ff1", dim, ff);
        l.ff2 = make_linear(rng, name + ".ff2", ff, dim);
        return l;
    }

    ConditionalTransformerLayer make_cond_layer(Rng& rng, const std::string& name,
                                                size_t dim, size_t heads, size_t ff) {
        ConditionalTransformerLayer l;
        l.heads = heads;
        l.wq = make_linear(rng, name + ".q", dim, dim);
        l.wk = make_linear(rng, name + ".k", dim, dim);
        l.wv = make_linear(rng, name + ".v", dim, dim);
        l.wo = make_linear(rng, name + ".o", dim, dim);
        l.ff1 = make_linear(rng, name + ".ff1", dim, ff);
        l.ff2 = make_linear(rng, name + ".ff2", ff, dim);
        return l;
    }

    void build(Rng& rng) {
        size_t d = cfg_.feat_embed_dim;
        phoneme_table_ = store_.add("embed.phoneme_table",
                                    {cfg_.phoneme_vocab, d},
                                    normal_init(rng, cfg_.phoneme_vocab * d, 0.5));
        feat_f0_ = make_feature_stack(rng, "embed.f0", 1);
        feat_energy_ = make_feature_stack(rng, "embed.energy", 1);
        feat_vuv_ = make_feature_stack(rng, "embed.vuv", 1);
        feat_mel_ = make_feature_stack(rng, "embed.mel10", 10);
        feat_dur_ = make_feature_stack(rng, "embed.dur", 1);
        feat_spk_ = make_feature_stack(rng, "embed.spk", cfg_.speaker_dim);
        feat_text_ = make_feature_stack(rng, "embed.text", d);
        auto comb = make_linear(rng, "embed.combine", 7 * d, cfg_.combined_dim);
        combine_w_ = comb.w;
        combine_b_ = comb.b;
        mask_embed_ = store_.add("embed.mask", {size_t(1), cfg_.combined_dim},
                                 normal_init(rng, cfg_.combined_dim, 0.02));
        for (size_t i = 0; i < cfg_.conv_layers; ++i)
            input_conv_.push_back(make_conv_block(rng, "input_conv." + std::to_string(i),
                                                  cfg_.combined_dim, cfg_.conv_hidden,
                                                  cfg_.conv_kernel));
        latents_ = store_.add("encoder.latents", {cfg_.latent_count, cfg_.latent_dim},
                              normal_init(rng, cfg_.latent_count * cfg_.latent_dim, 0.02));
        enc_cross_ = make_cross(rng, "encoder.cross", cfg_.latent_dim,
                                cfg_.combined_dim, cfg_.latent_dim, cfg_.latent_dim);
        for (size_t i = 0; i < cfg_.enc_layers; ++i)
            enc_layers_.push_back(make_layer(rng, "encoder.self." + std::to_string(i),
                                             cfg_.latent_dim, cfg_.enc_heads, cfg_.enc_ff()));
        pd1_cross_ = make_cross(rng, "pd1.cross", cfg_.combined_dim, cfg_.latent_dim,
                                cfg_.latent_dim, cfg_.latent_dim);
        pd1_heads_.w[0] = store_.add("pd1.head.f0.w", {cfg_.latent_dim, size_t(1)},
                                     std::vector<S>(cfg_.latent_dim, S(0)));
        pd1_heads_.b[0] = store_.add("pd1.head.f0.b", {size_t(1)}, {S(0)});
        pd1_heads_.w[1] = store_.add("pd1.head.energy.w", {cfg_.latent_dim, size_t(1)},
                                     std::vector<S>(cfg_.latent_dim, S(0)));
        pd1_heads_.b[1] = store_.add("pd1.head.energy.b", {size_t(1)}, {S(0)});
        pd1_heads_.w[2] = store_.add("pd1.head.mel10.w", {cfg_.latent_dim, size_t(10)},
                                     std::vector<S>(cfg_.latent_dim * 10, S(0)));
        pd1_heads_.b[2] = store_.add("pd1.head.mel10.b", {size_t(10)},
                                     std::vector<S>(10, S(0)));
        pd1_heads_.w[3] = store_.add("pd1.head.vuv.w", {cfg_.latent_dim, size_t(1)},
                                     std::vector<S>(cfg_.latent_dim, S(0)));
        pd1_heads_.b[3] = store_.add("pd1.head.vuv.b", {size_t(1)}, {S(0)});

        size_t pdim = cfg_.pd2_dim();
        mod_cross_ = make_cross(rng, "mod.cross", cfg_.combined_dim, cfg_.latent_dim,
                                pdim, pdim);
        static const char* roles[6] = {"shift1", "scale1", "gate1",
                                       "shift2", "scale2", "gate2"};
        size_t mod_in = cfg_.global_adaln ? cfg_.latent_dim : pdim;
        for (int i = 0; i < 6; ++i) {
            mod_heads_w_[i] = store_.add(std::string("mod.head.") + roles[i] + ".w",
                                         {mod_in, pdim}, std::vector<S>(mod_in * pdim, S(0)));
            mod_heads_b_[i] = store_.add(std::string("mod.head.") + roles[i] + ".b",
                                         {pdim}, std::vector<S>(pdim, S(0)));
        }

        pd2_text_feat_ = make_feature_stack(rng, "pd2.text.phoneme", d);
        pd2_dur_feat_ = make_feature_stack(rng, "pd2.text.dur", 1);
        pd2_spk_feat_ = make_feature_stack(rng, "pd2.text.spk", cfg_.speaker_dim);
        auto tp = make_linear(rng, "pd2.text.combine", 3 * d, pdim);
        pd2_text_w_ = tp.w;
        pd2_text_b_ = tp.b;
        for (size_t i = 0; i < cfg_.text_conv_layers; ++i)
            text_conv_.push_back(make_conv_block(rng, "pd2.text_conv." + std::to_string(i),
                                                 pdim, cfg_.text_conv_hidden,
                                                 cfg_.text_conv_kernel));
        pd2_cross_ = make_cross(rng, "pd2.cross", pdim, cfg_.latent_dim, pdim, pdim);
        size_t trunks = cfg_.shared_pd2_trunk ? 1 : 4;
        static const char* heads_n[4] = {"f0", "energy", "mel10", "vuv"};
        pd2_trunks_.resize(trunks);
        for (size_t s = 0; s < trunks; ++s)
            for (size_t i = 0; i < cfg_.pd2_layers; ++i)
                pd2_trunks_[s].push_back(make_cond_layer(
                    rng,
                    "pd2.trunk." + std::string(cfg_.shared_pd2_trunk ? "shared" : heads_n[s]) +
                        "." + std::to_string(i),
                    pdim, cfg_.pd2_heads, cfg_.pd2_ff_hidden));
        size_t outdims[4] = {1, 1, 10, 1};
        for (int i = 0; i < 4; ++i) {
            pd2_heads_.w[i] = store_.add(std::string("pd2.head.") + heads_n[i] + ".w",
                                         {pdim, outdims[i]},
                                         std::vector<S>(pdim * outdims[i], S(0)));
            pd2_heads_.b[i] = store_.add(std::string("pd2.head.") + heads_n[i] + ".b",
                                         {outdims[i]}, std::vector<S>(outdims[i], S(0)));
        }
    }

    // ---- input tensor assembly (constants, no grad) ----

    Tensor<S> column(const std::vector<double>& v, double input_scale) const {
        std::vector<S> d(v.size());
        for (size_t i = 0; i < v.size(); ++i) d[i] = S(v[i] * input_scale);
        return Tensor<S>::from_data({v.size(), 1}, std::move(d));
    }

    Tensor<S> vuv_column(const std::vector<uint8_t>& v) const {
        std::vector<S> d(v.size());
        for (size_t i = 0; i < v.size(); ++i) d[i] = S(v[i]);
        return Tensor<S>::from_data({v.size(), 1}, std::move(d));
    }

    Tensor<S> mel_matrix(const FrameFeatures& f) const {
        std::vector<S> d(f.mel10.size());
        for (size_t i = 0; i < d.size(); ++i) d[i] = S(f.mel10[i]);
        return Tensor<S>::from_data({f.frames, size_t(10)}, std::move(d));
    }

    Tensor<S> speaker_matrix(const FrameFeatures& f) const {
        size_t sd = cfg_.speaker_dim;
        if (f.speaker_vec.size() != sd)
            throw Error("speaker vector dim " + std::to_string(f.speaker_vec.size()) +
                        " != model speaker_dim " + std::to_string(sd));
        std::vector<S> d(f.frames * sd);
        for (size_t t = 0; t < f.frames; ++t)
            for (size_t k = 0; k < sd; ++k) d[t * sd + k] = S(f.speaker_vec[k]);
        return Tensor<S>::from_data({f.frames, sd}, std::move(d));
    }

    Tensor<S> phoneme_embed(const FrameFeatures& f) const {
        std::vector<size_t> idx(f.frames);
        for (size_t i = 0; i < f.frames; ++i) {
            if (f.frame_phonemes[i] >= cfg_.phoneme_vocab)
                throw Error("phoneme id " + std::to_string(f.frame_phonemes[i]) +
                            " >= vocab " + std::to_string(cfg_.phoneme_vocab));
            idx[i] = f.frame_phonemes[i];
        }
        return gather_rows(phoneme_table_, idx);
    }

    Tensor<S> text_feature(const FrameFeatures& f, bool zeroed) const {
        if (zeroed)
            return Tensor<S>::zeros({f.frames, cfg_.feat_embed_dim});
        return feat_text_.apply(phoneme_embed(f), false);
    }

    Predictions<S> heads_apply(const OutputHeads& h, const Tensor<S>& x) const {
        Predictions<S> p;
        p.f0_hz = scale(linear(x, h.w[0], h.b[0]), S(cfg_.f0_output_scale));
        p.energy_log = scale(linear(x, h.w[1], h.b[1]), S(cfg_.energy_output_scale));
        p.mel10 = linear(x, h.w[2], h.b[2]);
        p.vuv_logit = linear(x, h.w[3], h.b[3]);
        return p;
    }

    ModelConfig cfg_;
    ParamStore<S> store_;

    Tensor<S> phoneme_table_, combine_w_, combine_b_, mask_embed_, latents_;
    FeatureStack feat_f0_, feat_energy_, feat_vuv_, feat_mel_, feat_dur_, feat_spk_,
        feat_text_;
    std::vector<ConvNeXtBlock> input_conv_, text_conv_;
    CrossAttention enc_cross_, pd1_cross_, mod_cross_, pd2_cross_;
    std::vector<TransformerLayer> enc_layers_;
    OutputHeads pd1_heads_, pd2_heads_;
    Tensor<S> mod_heads_w_[6], mod_heads_b_[6];
    FeatureStack pd2_text_feat_, pd2_dur_feat_, pd2_spk_feat_;
    Tensor<S> pd2_text_w_, pd2_text_b_;
    std::vector<std::vector<ConditionalTransformerLayer>> pd2_trunks_;
};

} // namespace promode
