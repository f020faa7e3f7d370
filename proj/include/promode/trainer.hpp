#pragma once

// Optimization loop: Adam with bias correction, global-norm gradient
// clipping, deterministic seeded batching and masking (one derived RNG
// stream per iteration, so resume is bit-identical), JSONL metric log,
// checkpointing, optional dev-loss early stopping.

#include <filesystem>
#include <iostream>

#include "promode/checkpoint.hpp"

namespace promode {

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    size_t batch_size = 8;
    size_t iterations = 5000;
    uint64_t seed = 1;
    size_t checkpoint_every = 1000;
    size_t dev_eval_every = 500;
    size_t dev_eval_max = 16;
    double grad_clip_norm = 1.0;
    double weight_decay = 0.0;     // decoupled (AdamW); matrices only
    size_t warmup_iters = 0;       // linear warmup, off by default
    bool early_stop = false;       // on dev loss
    size_t early_stop_patience = 5;

    void check() const {
        if (lr <= 0 || batch_size == 0 || iterations == 0)
            throw Error("train config: rates and counts must be positive");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps},
         {"batch_size", c.batch_size}, {"iterations", c.iterations},
         {"seed", c.seed}, {"checkpoint_every", c.checkpoint_every},
         {"dev_eval_every", c.dev_eval_every}, {"dev_eval_max", c.dev_eval_max},
         {"grad_clip_norm", c.grad_clip_norm}, {"weight_decay", c.weight_decay},
         {"warmup_iters", c.warmup_iters},
         {"early_stop", c.early_stop},
         {"early_stop_patience", c.early_stop_patience}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
#define PM_GET(f) c.f = j.value(#f, d.f)
    PM_GET(lr); PM_GET(beta1); PM_GET(beta2); PM_GET(eps); PM_GET(batch_size);
    PM_GET(iterations); PM_GET(seed); PM_GET(checkpoint_every);
    PM_GET(dev_eval_every); PM_GET(dev_eval_max); PM_GET(grad_clip_norm);
    PM_GET(weight_decay); PM_GET(warmup_iters); PM_GET(early_stop);
    PM_GET(early_stop_patience);
#undef PM_GET
}

// Global-norm gradient clip. Returns the pre-clip norm.
template <class S>
double clip_grad_norm(ParamStore<S>& store, double max_norm) {
    double sq = 0.0;
    for (auto& p : store.params())
        for (S g : p.tensor.grad()) sq += double(g) * double(g);
    double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        S f = S(max_norm / norm);
        for (auto& p : store.params())
            for (S& g : p.tensor.grad()) g *= f;
    }
    return norm;
}

// Standard bias-corrected Adam update, t >= 1. With weight_decay > 0 this is
// AdamW: the decay is decoupled from the moments and applied only to matrix
// parameters (row count > 1), leaving biases and norm gains untouched.
template <class S>
void adam_step(ParamStore<S>& store, const TrainConfig& cfg, double lr, uint64_t t) {
    if (t < 1) throw Error("adam_step: t must be >= 1");
    double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    for (auto& p : store.params()) {
        auto& grads = p.tensor.grad();
        auto& data = p.tensor.data();
        if (cfg.weight_decay > 0 && p.tensor.dim(0) > 1) {
            S shrink = S(1.0 - lr * cfg.weight_decay);
            for (S& d : data) d *= shrink;
        }
        if (p.m.size() != data.size()) p.m.assign(data.size(), S(0));
        if (p.v.size() != data.size()) p.v.assign(data.size(), S(0));
        for (size_t i = 0; i < data.size(); ++i) {
            double g = double(grads[i]);
            if (!std::isfinite(g))
                throw Error("adam_step: non-finite gradient in parameter " + p.name);
            double m = cfg.beta1 * double(p.m[i]) + (1.0 - cfg.beta1) * g;
            double v = cfg.beta2 * double(p.v[i]) + (1.0 - cfg.beta2) * g * g;
            p.m[i] = S(m);
            p.v[i] = S(v);
            data[i] -= S(lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps));
        }
    }
}

struct IterationLog {
    uint64_t iteration = 0;
    double lr = 0, total = 0;
    double pd1 = 0, pd2 = 0;
    double pd1_f0 = 0, pd1_energy = 0, pd1_mel = 0, pd1_vuv = 0;
    double pd2_f0 = 0, pd2_energy = 0, pd2_mel = 0, pd2_vuv = 0;
    double grad_norm = 0;
    double dev_loss = -1; // <0 when not evaluated this iteration
};

struct TrainResult {
    std::vector<double> loss_curve;
    std::string final_checkpoint;
    bool aborted_nan = false;
    uint64_t iterations_run = 0;
};

template <class S>
class Trainer {
public:
    Trainer(Model<S>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
        cfg_.check();
    }

    // Records are held in memory as preprocessed features.
    void set_data(std::vector<FrameFeatures> train, std::vector<FrameFeatures> dev) {
        train_ = std::move(train);
        dev_ = std::move(dev);
        if (train_.empty()) throw Error("trainer: empty train split");
    }

    // out_dir: checkpoints + train_log.jsonl. start_iter > 0 resumes.
    TrainResult run(const std::string& out_dir, uint64_t start_iter = 0,
                    std::ostream* console = nullptr) {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        std::ofstream log(fs::path(out_dir) / "train_log.jsonl", std::ios::app);
        TrainResult res;
        double best_dev = std::numeric_limits<double>::infinity();
        size_t evals_since_best = 0;
        std::string last_ckpt;

        for (uint64_t it = start_iter + 1; it <= cfg_.iterations; ++it) {
            IterationLog il = step(it);
            if (!std::isfinite(il.total)) {
                res.aborted_nan = true;
                if (console)
                    *console << "non-finite loss at iteration " << it
                             << ", keeping last checkpoint " << last_ckpt << "\n";
                break;
            }
            res.loss_curve.push_back(il.total);
            res.iterations_run = it;

            bool do_dev = !dev_.empty() && cfg_.dev_eval_every &&
                          (it % cfg_.dev_eval_every == 0 || it == cfg_.iterations);
            if (do_dev) {
                il.dev_loss = dev_loss();
                if (il.dev_loss < best_dev) {
                    best_dev = il.dev_loss;
                    evals_since_best = 0;
                } else {
                    ++evals_since_best;
                }
            }
            write_log(log, il);
            if (console && (it % 100 == 0 || it == 1))
                *console << "iter " << it << " loss " << il.total
                         << " (pd1 " << il.pd1 << " pd2 " << il.pd2 << ")\n";

            if (cfg_.checkpoint_every && it % cfg_.checkpoint_every == 0) {
                last_ckpt = save(out_dir, it);
            }
            if (cfg_.early_stop && do_dev && evals_since_best >= cfg_.early_stop_patience) {
                if (console) *console << "early stop at iteration " << it << "\n";
                break;
            }
        }
        res.final_checkpoint = save(out_dir, res.iterations_run, "final.ckpt");
        return res;
    }

    // One optimization step; exposed for fine-grained tests.
    IterationLog step(uint64_t it) {
        Rng batch_rng(mix_seed(cfg_.seed, 0xba7c, it));
        model_.store().zero_grad();
        IterationLog il;
        il.iteration = it;
        il.lr = lr_at(it);
        Tensor<S> total = Tensor<S>::scalar(S(0));
        for (size_t slot = 0; slot < cfg_.batch_size; ++slot) {
            size_t idx = size_t(batch_rng.uniform_int(train_.size()));
            const auto& f = train_[idx];
            auto mask = sample_mask_for(f, mix_seed(cfg_.seed, it, slot));
            auto lb = model_.forward_loss(f, mask);
            total = add(total, lb.total);
            il.pd1_f0 += lb.pd1_f0; il.pd1_energy += lb.pd1_energy;
            il.pd1_mel += lb.pd1_mel; il.pd1_vuv += lb.pd1_vuv;
            il.pd2_f0 += lb.pd2_f0; il.pd2_energy += lb.pd2_energy;
            il.pd2_mel += lb.pd2_mel; il.pd2_vuv += lb.pd2_vuv;
        }
        total = scale(total, S(1.0 / double(cfg_.batch_size)));
        il.total = double(total.item());
        for (double* c : {&il.pd1_f0, &il.pd1_energy, &il.pd1_mel, &il.pd1_vuv,
                          &il.pd2_f0, &il.pd2_energy, &il.pd2_mel, &il.pd2_vuv})
            *c /= double(cfg_.batch_size);
        il.pd1 = il.pd1_f0 + il.pd1_energy + il.pd1_mel + il.pd1_vuv;
        il.pd2 = il.pd2_f0 + il.pd2_energy + il.pd2_mel + il.pd2_vuv;
        if (!std::isfinite(il.total)) return il;
        total.backward();
        il.grad_norm = clip_grad_norm(model_.store(), cfg_.grad_clip_norm);
        adam_step(model_.store(), cfg_, il.lr, it);
        return il;
    }

    double dev_loss() {
        KahanSum sum;
        size_t n = std::min(dev_.size(), cfg_.dev_eval_max);
        for (size_t i = 0; i < n; ++i) {
            auto mask = sample_mask_for(dev_[i], mix_seed(cfg_.seed, 0xdeef, i));
            sum.add(double(model_.forward_loss(dev_[i], mask).total.item()));
        }
        return sum.value() / double(n);
    }

    std::string save(const std::string& out_dir, uint64_t it,
                     std::string filename = "") {
        namespace fs = std::filesystem;
        if (filename.empty()) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "ckpt_%07llu.ckpt",
                          (unsigned long long)it);
            filename = buf;
        }
        std::string path = (fs::path(out_dir) / filename).string();
        TrainerState ts{it, cfg_.seed, true};
        save_checkpoint(model_, path, &ts);
        return path;
    }

private:
    FrameMask sample_mask_for(const FrameFeatures& f, uint64_t seed) {
        return sample_mask(f.durations, model_.config().mask_ratio, seed);
    }

    double lr_at(uint64_t it) const {
        if (cfg_.warmup_iters && it <= cfg_.warmup_iters)
            return cfg_.lr * double(it) / double(cfg_.warmup_iters);
        return cfg_.lr; // constant, no schedule
    }

    static void write_log(std::ofstream& os, const IterationLog& il) {
        nlohmann::json j = {{"iteration", il.iteration}, {"lr", il.lr},
                            {"total", il.total}, {"pd1", il.pd1}, {"pd2", il.pd2},
                            {"pd1_f0", il.pd1_f0}, {"pd1_energy", il.pd1_energy},
                            {"pd1_mel", il.pd1_mel}, {"pd1_vuv", il.pd1_vuv},
                            {"pd2_f0", il.pd2_f0}, {"pd2_energy", il.pd2_energy},
                            {"pd2_mel", il.pd2_mel}, {"pd2_vuv", il.pd2_vuv},
                            {"grad_norm", il.grad_norm}};
        if (il.dev_loss >= 0) j["dev_loss"] = il.dev_loss;
        os << j.dump() << "\n";
        os.flush();
    }

    Model<S>& model_;
    TrainConfig cfg_;
    std::vector<FrameFeatures> train_, dev_;
};

} // namespace promode
