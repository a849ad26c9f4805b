#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "tnseg/config.hpp"
#include "tnseg/data.hpp"
#include "tnseg/gradcheck.hpp"
#include "tnseg/metrics.hpp"
#include "tnseg/trainer.hpp"

namespace tnseg {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

void refuse_existing(const fs::path& p, bool force) {
    if (fs::exists(p) && !force) throw UsageError("'" + p.string() + "' exists; pass --force to overwrite");
}

// Maps a [0,1] tensor onto 8-bit levels.
Tensor to_levels(const Tensor& t) {
    Tensor out = t;
    for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0) * 255.0;
    return out;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

// --------------------------------------------------------------------------------------------- synth

struct SynthArgs {
    std::string config;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
    SynthConfig cfg = a.config.empty() ? SynthConfig{} : parse_synth_config(read_text_file(a.config));
    if (a.seed) cfg.seed = *a.seed;
    cfg.validate();
    const fs::path root(a.out_dir);
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!a.force) throw UsageError("'" + root.string() + "' is not empty; pass --force to overwrite");
        fs::remove_all(root);
    }
    fs::create_directories(root);
    const SynthDataset ds = synth_domain_pair(cfg);
    write_dataset(root, ds);
    std::ofstream record(root / "synth_config.txt");
    for (const auto& [k, v] : synth_config_entries(cfg)) record << k << " = " << v << '\n';
    if (!record) throw std::runtime_error("cannot write '" + (root / "synth_config.txt").string() + "'");
    out << "wrote " << ds.source.size() << " source, " << ds.target_train.size() << " target train and "
        << ds.target_test.size() << " target test images to " << root.string() << '\n';
    return kExitOk;
}

// --------------------------------------------------------------------------------------------- train

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    bool force = false;
    bool quiet = false;
    std::optional<std::size_t> iters;
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda_d, lambda_ent;
    std::optional<std::string> norm, distance, prob;
    std::optional<std::size_t> batch_src, batch_tgt;
    std::vector<std::string> set;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    TrainConfig cfg;
    if (!a.config.empty()) cfg = parse_train_config(read_text_file(a.config));
    if (a.iters) cfg.iters = *a.iters;
    if (a.seed) cfg.seed = *a.seed;
    if (a.lambda_d) cfg.lambda_d = *a.lambda_d;
    if (a.lambda_ent) cfg.lambda_ent = *a.lambda_ent;
    if (a.norm) cfg.norm = parse_norm_kind(*a.norm);
    if (a.distance) cfg.distance = parse_distance_kind(*a.distance);
    if (a.prob) cfg.prob = parse_prob_kind(*a.prob);
    if (a.batch_src) cfg.batch_src = *a.batch_src;
    if (a.batch_tgt) cfg.batch_tgt = *a.batch_tgt;
    for (const auto& kv : a.set) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        set_train_option(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    TrainOptions opt;
    opt.force = a.force;
    opt.progress = a.quiet ? nullptr : &out;
    const auto t0 = std::chrono::steady_clock::now();
    train(cfg, a.data, a.out, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << "trained " << cfg.iters << " iterations in " << fmt(secs) << " s; checkpoint "
        << (fs::path(a.out) / "final").string() << '\n';
    return kExitOk;
}

// --------------------------------------------------------------------------------------------- eval

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string domain = "target";
    std::string split = "test";
    std::string out;
    std::string dump_entropy;
    std::size_t stride = 10;
    bool force = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    const Domain domain = parse_domain(a.domain);
    if (!a.out.empty()) refuse_existing(a.out, a.force);
    if (!a.dump_entropy.empty()) refuse_existing(a.dump_entropy, a.force);
    const DatasetPaths paths{a.data};
    std::vector<FundusImage> images;
    if (domain == Domain::source) {
        images = load_preprocessed(paths.source_manifest());
        for (const auto& img : images) {
            if (!img.label) throw UsageError("source image '" + img.id + "' has no label to evaluate against");
        }
    } else {
        if (a.split != "train" && a.split != "test") throw UsageError("--split must be train or test");
        images = load_preprocessed(paths.target_manifest(a.split));
        try {
            attach_eval_labels(images, paths, a.split);
        } catch (const std::runtime_error& e) {
            throw UsageError(std::string("missing labels for evaluation: ") + e.what());
        }
    }
    Segmenter seg = load_segmenter(a.checkpoint);
    const std::size_t patch = train_config_from_entries([&] {
                                  auto e = read_checkpoint_config(a.checkpoint);
                                  e.erase("iteration");
                                  return e;
                              }()).patch;
    const auto evals = evaluate_images(seg, images, domain, a.stride, patch);

    std::vector<std::pair<std::string, MetricsReport>> rows;
    double entropy = 0.0;
    for (const auto& e : evals) {
        rows.emplace_back(e.id, e.report);
        entropy += e.mean_entropy / static_cast<double>(evals.size());
    }
    if (a.out.empty()) {
        const fs::path tmp = fs::temp_directory_path() / ("tnseg_eval_" + std::to_string(::getpid()) + ".csv");
        write_metrics_csv(tmp, rows);
        out << read_text_file(tmp.string());
        fs::remove(tmp);
    } else {
        write_metrics_csv(a.out, rows);
    }
    if (!a.dump_entropy.empty()) {
        fs::create_directories(a.dump_entropy);
        for (std::size_t i = 0; i < evals.size(); ++i) {
            const Tensor& p = evals[i].prob;
            Tensor ent(p.shape());
            for (std::size_t k = 0; k < p.size(); ++k) {
                const double q = std::clamp(p[k], 0.0, 1.0);
                double h = 0.0;
                if (q > 0.0) h -= q * std::log(q);
                if (q < 1.0) h -= (1.0 - q) * std::log(1.0 - q);
                ent[k] = images[i].fov_mask[k] > 0.0 ? h / std::log(2.0) : 0.0;
            }
            write_pgm(fs::path(a.dump_entropy) / (evals[i].id + "_entropy.pgm"), to_levels(ent));
            write_pgm(fs::path(a.dump_entropy) / (evals[i].id + "_prob.pgm"), to_levels(p));
        }
    }
    std::vector<MetricsReport> reports;
    for (const auto& r : rows) reports.push_back(r.second);
    const MetricsReport m = mean_report(reports);
    // Keep stdout parseable as CSV when the table goes there.
    std::ostream& summary = a.out.empty() ? err : out;
    summary << "mean over " << rows.size() << " images: auc " << fmt(m.auc) << " aupr " << fmt(m.aupr) << " f1 "
        << fmt(m.f1) << " se " << fmt(m.se) << " sp " << fmt(m.sp) << " acc " << fmt(m.acc) << " entropy "
        << fmt(entropy) << '\n';
    return kExitOk;
}

// --------------------------------------------------------------------------------------------- predict

struct PredictArgs {
    std::string checkpoint;
    std::string image;
    std::string mask;
    std::string domain = "target";
    std::string out;
    std::size_t stride = 10;
    bool force = false;
};

int cmd_predict(const PredictArgs& a, std::ostream& out) {
    const fs::path stem(a.out);
    for (const char* ext : {".bin", ".json", ".pgm"}) refuse_existing(fs::path(stem.string() + ext), a.force);
    FundusImage img;
    img.id = fs::path(a.image).stem().string();
    img.domain = parse_domain(a.domain);
    img.pixels = read_pgm(a.image);
    if (a.mask.empty()) {
        img.fov_mask = Tensor(img.pixels.shape(), 1.0);
    } else {
        img.fov_mask = read_pgm(a.mask);
        for (double& v : img.fov_mask.data()) v = v >= 128.0 ? 1.0 : 0.0;
        if (img.fov_mask.shape() != img.pixels.shape()) throw UsageError("mask and image extents differ");
    }
    img = preprocess(img);
    Segmenter seg = load_segmenter(a.checkpoint);
    const Tensor prob = tiled_inference(img.pixels, patch_model(seg, img.domain), a.stride);
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    save_tensor(stem, prob);
    write_pgm(fs::path(stem.string() + ".pgm"), to_levels(prob));
    out << "wrote " << stem.string() << ".{bin,json,pgm}\n";
    return kExitOk;
}

// --------------------------------------------------------------------------------------------- gradcheck

struct GradcheckArgs {
    std::string scale = "tiny";
    std::string fault = "none";
    std::uint64_t seed = 0;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
    if (a.scale != "tiny") throw UsageError("--scale supports only 'tiny'");
    testing::Fault fault = testing::Fault::none;
    if (a.fault == "flip-leaky-relu-grad") {
        fault = testing::Fault::flip_leaky_relu_grad;
    } else if (a.fault != "none") {
        throw UsageError("unknown --inject-fault '" + a.fault + "'");
    }
    struct Restore {
        ~Restore() { testing::inject_fault(testing::Fault::none); }
    } restore;
    testing::inject_fault(fault);
    const auto t0 = std::chrono::steady_clock::now();
    const auto cases = run_gradcheck_suite(a.seed);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::map<std::string, double> worst;
    bool ok = true;
    for (const auto& c : cases) {
        char line[160];
        std::snprintf(line, sizeof line, "%-12s %-40s %.3e %s\n", c.component.c_str(), c.name.c_str(), c.max_rel_err,
                      c.passed() ? "ok" : "FAIL");
        out << line;
        worst[c.component] = std::max(worst[c.component], c.max_rel_err);
        ok = ok && c.passed();
    }
    for (const auto& [component, err] : worst) {
        char line[96];
        std::snprintf(line, sizeof line, "max relative error %-12s %.3e\n", component.c_str(), err);
        out << line;
    }
    out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " in " << fmt(secs) << " s\n";
    return ok ? kExitOk : kExitFailure;
}

// --------------------------------------------------------------------------------------------- inspect-channels

struct InspectArgs {
    std::string checkpoint;
    std::string layer;
    std::string out;
    std::string probe;
    std::string probe_mask;
    std::string maps_dir;
    std::string domain = "target";
    bool force = false;
};

int cmd_inspect(const InspectArgs& a, std::ostream& out, std::ostream& err) {
    if (!a.out.empty()) refuse_existing(a.out, a.force);
    Segmenter seg = load_segmenter(a.checkpoint);
    TnState* tn = seg.tn_layer(a.layer);
    if (!tn) {
        std::string names;
        for (const auto& n : seg.norm_layer_names()) names += " " + n;
        throw UsageError("layer '" + a.layer + "' has no transfer-normalization state; layers:" + names);
    }
    const std::size_t M = tn->channels();
    std::vector<std::size_t> order(M);
    std::iota(order.begin(), order.end(), 0);
    const Tensor& eta = tn->last_eta.value;
    const Tensor& d = tn->last_d.value;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return eta[i] > eta[j]; });

    std::ostringstream csv;
    csv << "channel,d,eta\n";
    for (std::size_t c : order) csv << c << ',' << format_real(d[c]) << ',' << format_real(eta[c]) << '\n';
    if (a.out.empty()) {
        out << csv.str();
    } else {
        std::ofstream f(a.out);
        f << csv.str();
        if (!f) throw std::runtime_error("cannot write '" + a.out + "'");
    }
    const double total = std::accumulate(eta.data().begin(), eta.data().end(), 0.0);
    (a.out.empty() ? err : out) << "sum of eta " << format_real(total) << " over " << M << " channels\n";

    if (!a.probe.empty()) {
        if (a.maps_dir.empty()) throw UsageError("--probe needs --maps-dir");
        refuse_existing(a.maps_dir, a.force);
        FundusImage img;
        img.id = fs::path(a.probe).stem().string();
        img.domain = parse_domain(a.domain);
        img.pixels = read_pgm(a.probe);
        img.fov_mask = a.probe_mask.empty() ? Tensor(img.pixels.shape(), 1.0) : read_pgm(a.probe_mask);
        for (double& v : img.fov_mask.data()) v = v > 0.0 ? 1.0 : 0.0;
        img = preprocess(img);
        std::optional<Tensor> captured;
        seg.set_observer([&](const std::string& layer, const DomainPair& o) {
            if (layer != a.layer) return;
            const auto& v = img.domain == Domain::source ? o.src : o.tgt;
            if (v) captured = v->value();
        });
        Tape tape;
        Tensor x = img.pixels.reshaped(Shape{1, 1, img.height(), img.width()});
        for (double& v : x.data()) v *= kInputScale;
        if (img.domain == Domain::source) {
            seg.forward(tape, x, std::nullopt, Mode::eval);
        } else {
            seg.forward(tape, std::nullopt, x, Mode::eval);
        }
        if (!captured) throw std::logic_error("layer '" + a.layer + "' produced no activation");
        fs::create_directories(a.maps_dir);
        const std::size_t h = captured->dim(2), w = captured->dim(3);
        for (std::size_t c = 0; c < M; ++c) {
            Tensor map(Shape{h, w});
            std::copy_n(captured->ptr() + c * h * w, h * w, map.ptr());
            const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
            const double low = *lo, range = *hi - *lo;
            for (double& v : map.data()) v = range > 0.0 ? 255.0 * (v - low) / range : 0.0;
            char name[64];
            std::snprintf(name, sizeof name, "channel_%03zu.pgm", c);
            write_pgm(fs::path(a.maps_dir) / name, map);
        }
        out << "wrote " << M << " activation maps to " << a.maps_dir << '\n';
    }
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Retinal vessel segmentation with transfer normalization and entropy-based adversarial adaptation",
                 "tnseg"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Write a synthetic source/target dataset");
    s->add_option("--config", synth.config, "key = value synthesis config")->check(CLI::ExistingFile);
    s->add_option("--out-dir", synth.out_dir, "Output dataset directory")->required();
    s->add_option("--seed", synth.seed, "Random seed (overrides the config)");
    s->add_flag("--force", synth.force, "Overwrite a non-empty output directory");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a segmenter");
    t->add_option("--config", tr.config, "key = value training config")->check(CLI::ExistingFile);
    t->add_option("--data", tr.data, "Dataset directory written by synth")->required()->check(CLI::ExistingDirectory);
    t->add_option("--out", tr.out, "Run directory (checkpoints and train_log.csv)")->required();
    t->add_option("--iters", tr.iters);
    t->add_option("--seed", tr.seed);
    t->add_option("--lambda-d", tr.lambda_d, "Adversarial weight; 0 disables the discriminator");
    t->add_option("--lambda-ent", tr.lambda_ent, "Entropy-minimization weight");
    t->add_option("--norm", tr.norm, "bn or tn");
    t->add_option("--distance", tr.distance, "mean, wasserstein or normalized_mean");
    t->add_option("--prob", tr.prob, "softmax, gaussian or student_t");
    t->add_option("--batch-src", tr.batch_src);
    t->add_option("--batch-tgt", tr.batch_tgt);
    t->add_option("--set", tr.set, "Extra config assignment key=value (repeatable)");
    t->add_flag("--force", tr.force, "Replace an existing run directory");
    t->add_flag("--quiet", tr.quiet, "No progress lines");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Tiled inference and metrics on a labelled split");
    e->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingDirectory);
    e->add_option("--data", ev.data)->required()->check(CLI::ExistingDirectory);
    e->add_option("--domain", ev.domain, "target or source")->capture_default_str();
    e->add_option("--split", ev.split, "Target split: test or train")->capture_default_str();
    e->add_option("--out", ev.out, "Metrics CSV (default: stdout)");
    e->add_option("--stride", ev.stride)->capture_default_str()->check(CLI::PositiveNumber);
    e->add_option("--dump-entropy", ev.dump_entropy, "Directory for entropy and probability maps (PGM)");
    e->add_flag("--force", ev.force);

    PredictArgs pr;
    auto* p = app.add_subcommand("predict", "Vessel probability map of one image");
    p->add_option("--checkpoint", pr.checkpoint)->required()->check(CLI::ExistingDirectory);
    p->add_option("--image", pr.image)->required()->check(CLI::ExistingFile);
    p->add_option("--mask", pr.mask)->check(CLI::ExistingFile);
    p->add_option("--domain", pr.domain)->capture_default_str();
    p->add_option("--out", pr.out, "Output stem for .bin/.json/.pgm")->required();
    p->add_option("--stride", pr.stride)->capture_default_str()->check(CLI::PositiveNumber);
    p->add_flag("--force", pr.force);

    GradcheckArgs gc;
    auto* g = app.add_subcommand("gradcheck", "Central-difference gradient checks of every layer");
    g->add_option("--scale", gc.scale)->capture_default_str();
    g->add_option("--inject-fault", gc.fault, "none or flip-leaky-relu-grad")->capture_default_str();
    g->add_option("--seed", gc.seed)->capture_default_str();

    InspectArgs in;
    auto* i = app.add_subcommand("inspect-channels", "Per-channel distance and weight of a TN layer");
    i->add_option("--checkpoint", in.checkpoint)->required()->check(CLI::ExistingDirectory);
    i->add_option("--layer", in.layer, "e.g. seg.enc0.norm1")->required();
    i->add_option("--out", in.out, "CSV path (default: stdout)");
    i->add_option("--probe", in.probe, "Image whose activations are written per channel")->check(CLI::ExistingFile);
    i->add_option("--probe-mask", in.probe_mask)->check(CLI::ExistingFile);
    i->add_option("--maps-dir", in.maps_dir);
    i->add_option("--domain", in.domain)->capture_default_str();
    i->add_flag("--force", in.force);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (s->parsed()) return cmd_synth(synth, out);
        if (t->parsed()) return cmd_train(tr, out);
        if (e->parsed()) return cmd_eval(ev, out, err);
        if (p->parsed()) return cmd_predict(pr, out);
        if (g->parsed()) return cmd_gradcheck(gc, out);
        if (i->parsed()) return cmd_inspect(in, out, err);
    } catch (const NumericError& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitFailure;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace tnseg
