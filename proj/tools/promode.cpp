// promode: corpus generation, validation, training, evaluation, continuation
// inference, and gradient self-checks for the prosody model.
//
// Exit codes: 0 success, 1 usage error, 2 validation failure, 3 runtime failure.

#include <CLI11.hpp>

#include <promode/promode.hpp>

extern "C" void openblas_set_num_threads(int);

namespace {

using namespace promode;

std::string default_data_dir() {
    const char* env = std::getenv("PROMODE_DATA_DIR");
    return env ? std::string(env) : std::string("data");
}

nlohmann::json load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config file " + path);
    nlohmann::json j;
    is >> j;
    return j;
}

struct SynthArgs {
    std::string out = default_data_dir();
    std::string config;
    uint64_t seed = 0;
    bool has_seed = false;
    size_t train_size = 0, dev_size = 0, test_size = 0;
    bool force = false;
};

int cmd_synth(const SynthArgs& a) {
    GenConfig cfg;
    if (!a.config.empty()) cfg = load_json(a.config).get<GenConfig>();
    if (a.has_seed) cfg.seed = a.seed;
    if (a.train_size) cfg.train_size = a.train_size;
    if (a.dev_size) cfg.dev_size = a.dev_size;
    if (a.test_size) cfg.test_size = a.test_size;
    Manifest m = build_corpus(cfg, a.out, a.force);
    size_t total = 0;
    for (auto& [name, recs] : m.splits) total += recs.size();
    std::cout << "wrote " << total << " records to " << a.out
              << " (seed " << cfg.seed << ")\n";
    return 0;
}

struct ValidateArgs {
    std::string manifest = default_data_dir() + "/manifest.json";
};

int cmd_validate(const ValidateArgs& a) {
    Manifest m = read_manifest(a.manifest);
    size_t violations = 0, records = 0;
    for (auto& [split, recs] : m.splits) {
        for (auto& rel : recs) {
            ++records;
            auto r = read_record(resolve_record_path(a.manifest, rel));
            for (auto& v : validate(r)) {
                std::cout << r.id << ": " << v << "\n";
                ++violations;
            }
        }
    }
    std::cout << records << " records, " << violations << " violations\n";
    return violations ? 2 : 0;
}

struct TrainArgs {
    std::string data = default_data_dir() + "/manifest.json";
    std::string out = "runs/train";
    std::string config;       // {"model": {...}, "train": {...}}
    std::string preset = "desk"; // desk | tiny | paper
    std::string ablate;
    std::string resume;
    uint64_t seed = 0;
    bool has_seed = false;
    size_t iterations = 0;
    double lr = 0;
    double weight_decay = -1;
    size_t batch_size = 0;
    int threads = 1;
};

ModelConfig preset_config(const std::string& name) {
    if (name == "desk") return desk_config();
    if (name == "tiny") return tiny_config();
    if (name == "paper") return ModelConfig{};
    throw Error("unknown model preset: " + name + " (expected desk|tiny|paper)");
}

int cmd_train(const TrainArgs& a) {
    openblas_set_num_threads(a.threads);
    ModelConfig mc = preset_config(a.preset);
    TrainConfig tc;
    if (!a.config.empty()) {
        auto j = load_json(a.config);
        if (j.contains("model")) mc = j["model"].get<ModelConfig>();
        if (j.contains("train")) tc = j["train"].get<TrainConfig>();
    }
    apply_ablation(mc, a.ablate);
    if (a.has_seed) {
        tc.seed = a.seed;
        mc.init_seed = a.seed;
    }
    if (a.iterations) tc.iterations = a.iterations;
    if (a.lr > 0) tc.lr = a.lr;
    if (a.weight_decay >= 0) tc.weight_decay = a.weight_decay;
    if (a.batch_size) tc.batch_size = a.batch_size;

    uint64_t start_iter = 0;
    std::optional<Model<float>> model;
    if (a.resume.empty()) {
        model.emplace(mc);
    } else {
        TrainerState ts;
        model.emplace(load_checkpoint<float>(a.resume, &ts));
        if (ts.present) start_iter = ts.iteration;
        mc = model->config();
    }

    Manifest m = read_manifest(a.data);
    auto train = load_split_features(a.data, m, "train", mc.preprocess);
    std::vector<FrameFeatures> dev;
    if (m.splits.count("dev"))
        dev = load_split_features(a.data, m, "dev", mc.preprocess);

    Trainer<float> trainer(*model, tc);
    trainer.set_data(std::move(train), std::move(dev));
    auto res = trainer.run(a.out, start_iter, &std::cout);

    std::filesystem::create_directories(a.out);
    {
        nlohmann::json j = {{"model", mc}, {"train", tc}};
        std::ofstream os(std::filesystem::path(a.out) / "config.json");
        os << j.dump(2) << "\n";
    }
    if (res.aborted_nan) {
        std::cout << "training aborted on non-finite loss after "
                  << res.iterations_run << " iterations\n";
        return 3;
    }
    std::cout << "trained " << res.iterations_run << " iterations, final loss "
              << (res.loss_curve.empty() ? 0.0 : res.loss_curve.back())
              << ", checkpoint " << res.final_checkpoint << "\n";
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string data = default_data_dir() + "/manifest.json";
    std::string split = "test";
    std::string out = "report.json";
    std::string plots; // directory, optional
    size_t max_utts = 0;
    bool copy_gt = false;
    int threads = 1;
};

int cmd_eval(const EvalArgs& a) {
    openblas_set_num_threads(a.threads);
    if (a.checkpoint.empty() && !a.copy_gt)
        throw Error("eval: --checkpoint is required unless --copy-gt is set");
    Manifest m = read_manifest(a.data);
    auto recs = load_split_records(a.data, m, a.split, a.max_utts);

    PreprocessConfig pp;
    std::optional<Model<float>> model;
    EvalOptions<float> opt;
    opt.copy_gt = a.copy_gt;
    if (!a.checkpoint.empty()) {
        model.emplace(load_checkpoint<float>(a.checkpoint));
        pp = model->config().preprocess;
        opt.model = &*model;
    }
    std::vector<ContinuationEval> details;
    MetricReport rep = evaluate_continuation(recs, opt, pp, &details);
    rep.config_echo = {{"checkpoint", a.checkpoint},
                       {"split", a.split},
                       {"copy_gt", a.copy_gt}};

    nlohmann::json j = rep;
    std::ofstream os(a.out);
    if (!os) throw Error("eval: cannot open " + a.out);
    os << j.dump(2) << "\n";
    if (!a.plots.empty()) {
        std::filesystem::create_directories(a.plots);
        for (const auto& ce : details)
            write_contour_svg(ce, (std::filesystem::path(a.plots) /
                                   (ce.id + ".svg")).string());
    }
    std::cout << "evaluated " << rep.utterance_count << " utterances ("
              << rep.skipped << " skipped)\n"
              << "F0: RPA " << rep.f0.rpa << " RCA " << rep.f0.rca << " MAE "
              << rep.f0.mae_frame << " RMSE " << rep.f0.rmse << "\n"
              << "Energy: MAE_log " << rep.energy.mae_log << " MAE "
              << rep.energy.mae_frame << " RMSE " << rep.energy.rmse << "\n"
              << "report written to " << a.out << "\n";
    return 0;
}

struct InferArgs {
    std::string record;
    std::string checkpoint;
    std::string out = "continuation.rec";
    double split = 0.5;
    int threads = 1;
};

int cmd_infer(const InferArgs& a) {
    openblas_set_num_threads(a.threads);
    if (a.split <= 0.0 || a.split >= 1.0)
        throw Error("infer: --split must be in (0, 1)");
    auto model = load_checkpoint<float>(a.checkpoint);
    auto rec = read_record(a.record);
    auto f = make_features(rec, model.config().preprocess);
    if (rec.phonemes() < 2) throw Error("infer: need at least two phonemes");

    // phoneme boundary nearest split * T (boundaries exclude 0 and T)
    double target = a.split * double(f.frames);
    size_t best = 0, acc = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i + 1 < rec.durations_frames.size(); ++i) {
        acc += rec.durations_frames[i];
        double d = std::abs(double(acc) - target);
        if (d < best_d) {
            best_d = d;
            best = acc;
        }
    }
    size_t split_frame = best, tail = f.frames - split_frame;
    auto pred = model.infer_continuation(f, split_frame);

    UtteranceRecord out;
    out.id = rec.id + "_cont";
    out.frame_hop_ms = rec.frame_hop_ms;
    out.speaker_vec = rec.speaker_vec;
    size_t pos = 0;
    for (size_t i = 0; i < rec.durations_frames.size(); ++i) {
        if (pos >= split_frame) {
            out.phoneme_ids.push_back(rec.phoneme_ids[i]);
            out.durations_frames.push_back(rec.durations_frames[i]);
        }
        pos += rec.durations_frames[i];
    }
    out.f0_hz.resize(tail);
    out.energy_raw.resize(tail);
    out.mel10.resize(tail * 10);
    out.vuv.resize(tail);
    const auto& pf0 = pred.f0_hz.data();
    const auto& pe = pred.energy_log.data();
    const auto& pm = pred.mel10.data();
    const auto& pv = pred.vuv_logit.data();
    for (size_t i = 0; i < tail; ++i) {
        size_t t = split_frame + i;
        out.vuv[i] = pv[t] > 0 ? 1 : 0;
        out.f0_hz[i] = out.vuv[i] ? std::max(0.0f, float(pf0[t])) : 0.0f;
        out.energy_raw[i] = std::exp2(float(pe[t]));
        for (size_t k = 0; k < 10; ++k) out.mel10[i * 10 + k] = float(pm[t * 10 + k]);
    }
    write_record(out, a.out);
    std::cout << "continuation of " << tail << " frames (split at frame "
              << split_frame << " of " << f.frames << ") written to " << a.out
              << "\n";
    return 0;
}

struct GradcheckArgs {
    uint64_t seed = 1;
    size_t samples = 2;
    double tol = 1e-4;
    int threads = 1;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    openblas_set_num_threads(a.threads);
    auto res = model_grad_check(a.seed, a.samples);
    std::cout << "full-model gradient check: max relative error "
              << res.max_rel_error << " (tolerance " << a.tol << ")\n";
    if (!res.ok(a.tol)) {
        std::cout << "FAIL: worst parameter tensor " << res.worst_input
                  << " coordinate " << res.worst_coord << "\n";
        return 2;
    }
    std::cout << "PASS\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"prosody model toolkit: synthetic corpora, training, "
                 "continuation evaluation"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth-corpus",
                                     "Generate a synthetic prosody corpus");
    synth->add_option("--out", sa.out, "Output directory (default: $PROMODE_DATA_DIR or ./data)");
    synth->add_option("--config", sa.config, "Generator config file (JSON); flags override");
    auto* sseed = synth->add_option("--seed", sa.seed, "Corpus seed");
    synth->add_option("--train-size", sa.train_size, "Train split utterance count");
    synth->add_option("--dev-size", sa.dev_size, "Dev split utterance count");
    synth->add_option("--test-size", sa.test_size, "Test split utterance count");
    synth->add_flag("--force", sa.force, "Overwrite an existing corpus");

    ValidateArgs va;
    auto* val = app.add_subcommand("validate", "Validate every record in a corpus");
    val->add_option("--manifest", va.manifest, "Manifest path");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train the prosody model");
    train->add_option("--data", ta.data, "Corpus manifest path");
    train->add_option("--out", ta.out, "Run directory for checkpoints and logs");
    train->add_option("--config", ta.config,
                      "Config file (JSON with \"model\" and \"train\"); flags override");
    train->add_option("--preset", ta.preset, "Model preset: desk|tiny|paper");
    train->add_option("--ablate", ta.ablate,
                      "Ablation preset: aol|dur|mel10|context-text|f0|energy|modadaln");
    train->add_option("--resume", ta.resume, "Checkpoint to resume from");
    auto* tseed = train->add_option("--seed", ta.seed, "Training and init seed");
    train->add_option("--iterations", ta.iterations, "Iteration count");
    train->add_option("--lr", ta.lr, "Learning rate");
    train->add_option("--weight-decay", ta.weight_decay,
                      "Decoupled weight decay on matrix parameters (0 = off)");
    train->add_option("--batch-size", ta.batch_size, "Batch size");
    train->add_option("--threads", ta.threads, "Worker thread cap");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Continuation evaluation on a split");
    eval->add_option("--checkpoint", ea.checkpoint, "Model checkpoint");
    eval->add_option("--data", ea.data, "Corpus manifest path");
    eval->add_option("--split", ea.split, "Split name (train|dev|test)");
    eval->add_option("--out", ea.out, "Report output path (JSON)");
    eval->add_option("--plots", ea.plots, "Directory for per-utterance F0 contour SVGs");
    eval->add_option("--max-utts", ea.max_utts, "Limit evaluated utterances (0 = all)");
    eval->add_flag("--copy-gt", ea.copy_gt,
                   "Test hook: predictions copy ground truth (pipeline identity)");
    eval->add_option("--threads", ea.threads, "Worker thread cap");

    InferArgs ia;
    auto* infer = app.add_subcommand("infer", "Prosody continuation for one record");
    infer->add_option("--record", ia.record, "Input record path")->required();
    infer->add_option("--checkpoint", ia.checkpoint, "Model checkpoint")->required();
    infer->add_option("--split", ia.split,
                      "Prompt fraction in (0,1); cut at the nearest phoneme boundary");
    infer->add_option("--out", ia.out, "Output record path for the predicted tail");
    infer->add_option("--threads", ia.threads, "Worker thread cap");

    GradcheckArgs ga;
    auto* gc = app.add_subcommand("gradcheck",
                                  "Finite-difference check of the full tiny model");
    gc->add_option("--seed", ga.seed, "Seed for init, data, and coordinate sampling");
    gc->add_option("--samples", ga.samples, "Coordinates checked per parameter tensor");
    gc->add_option("--tol", ga.tol, "Maximum allowed relative error");
    gc->add_option("--threads", ga.threads, "Worker thread cap");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1; // usage errors -> 1, --help -> 0
    }

    try {
        sa.has_seed = sseed->count() > 0;
        ta.has_seed = tseed->count() > 0;
        if (synth->parsed()) return cmd_synth(sa);
        if (val->parsed()) return cmd_validate(va);
        if (train->parsed()) return cmd_train(ta);
        if (eval->parsed()) return cmd_eval(ea);
        if (infer->parsed()) return cmd_infer(ia);
        if (gc->parsed()) return cmd_gradcheck(ga);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
