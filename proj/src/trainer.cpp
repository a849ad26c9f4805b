#include "tnseg/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "tnseg/config.hpp"
#include "tnseg/random.hpp"

namespace tnseg {

namespace fs = std::filesystem;

namespace {

// Stream identifiers for derive_seed.
constexpr std::uint64_t kSegInit = 1, kDiscInit = 2, kSourcePool = 3, kTargetPool = 4, kAugment = 5, kShuffle = 6;

bool parse_flag(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw std::invalid_argument("config key '" + key + "': '" + value + "' is not a boolean (0/1)");
}

std::vector<std::vector<double>> snapshot(const std::vector<Parameter*>& params) {
    std::vector<std::vector<double>> out;
    for (const Parameter* p : params) out.emplace_back(p->value.data().begin(), p->value.data().end());
    return out;
}

void require_unchanged(const std::vector<Parameter*>& params, const std::vector<std::vector<double>>& before,
                       const char* during) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto d = params[i]->value.data();
        if (!std::equal(d.begin(), d.end(), before[i].begin(), before[i].end())) {
            throw std::logic_error(std::string("parameter '") + params[i]->name + "' changed during the " + during);
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
    auto require = [](bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(std::string("train config: ") + msg);
    };
    require(iters >= 1, "iters must be at least 1");
    require(batch_src >= 1, "batch_src must be at least 1");
    require(lr_seg > 0.0 && lr_disc > 0.0, "learning rates must be positive");
    require(weight_decay >= 0.0, "weight_decay must be non-negative");
    require(lambda_d >= 0.0 && lambda_ent >= 0.0, "loss weights must be non-negative");
    require(poly_power > 0.0, "poly_power must be positive");
    require(depth >= 1 && base_channels >= 1, "depth and base_channels must be at least 1");
    require(patch >= 16 && patch % (std::size_t{1} << depth) == 0, "patch must be >= 16 and divisible by 2^depth");
    require(patches_per_image >= 1, "patches_per_image must be at least 1");
    require(norm_momentum > 0.0 && norm_momentum <= 1.0, "norm_momentum must lie in (0,1]");
    const bool needs_target = norm == NormKind::tn || lambda_d > 0.0 || lambda_ent > 0.0;
    require(!needs_target || batch_tgt >= 1, "batch_tgt must be at least 1 when the target domain is used");
}

SegmenterConfig TrainConfig::segmenter_config() const {
    SegmenterConfig s;
    s.depth = depth;
    s.base_channels = base_channels;
    s.norm = norm;
    s.distance = distance;
    s.prob = prob;
    s.norm_momentum = norm_momentum;
    return s;
}

void set_train_option(TrainConfig& c, const std::string& key, const std::string& v) {
    if (key == "iters") c.iters = parse_count(key, v);
    else if (key == "batch_src") c.batch_src = parse_count(key, v);
    else if (key == "batch_tgt") c.batch_tgt = parse_count(key, v);
    else if (key == "lr_seg") c.lr_seg = parse_real(key, v);
    else if (key == "lr_disc") c.lr_disc = parse_real(key, v);
    else if (key == "weight_decay") c.weight_decay = parse_real(key, v);
    else if (key == "lambda_d") c.lambda_d = parse_real(key, v);
    else if (key == "lambda_ent") c.lambda_ent = parse_real(key, v);
    else if (key == "poly_power") c.poly_power = parse_real(key, v);
    else if (key == "seed") c.seed = parse_u64(key, v);
    else if (key == "norm") c.norm = parse_norm_kind(v);
    else if (key == "distance") c.distance = parse_distance_kind(v);
    else if (key == "prob") c.prob = parse_prob_kind(v);
    else if (key == "checkpoint_interval") c.checkpoint_interval = parse_count(key, v);
    else if (key == "depth") c.depth = parse_count(key, v);
    else if (key == "base_channels") c.base_channels = parse_count(key, v);
    else if (key == "patch") c.patch = parse_count(key, v);
    else if (key == "patches_per_image") c.patches_per_image = parse_count(key, v);
    else if (key == "augment") c.augment = parse_flag(key, v);
    else if (key == "norm_momentum") c.norm_momentum = parse_real(key, v);
    else if (key == "check_isolation") c.check_isolation = parse_flag(key, v);
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig cfg;
    for (const auto& [k, v] : parse_key_values(text)) set_train_option(cfg, k, v);
    cfg.validate();
    return cfg;
}

std::map<std::string, std::string> train_config_entries(const TrainConfig& c) {
    auto r = [](double v) { return format_real(v); };
    auto n = [](std::uint64_t v) { return std::to_string(v); };
    return {{"iters", n(c.iters)},
            {"batch_src", n(c.batch_src)},
            {"batch_tgt", n(c.batch_tgt)},
            {"lr_seg", r(c.lr_seg)},
            {"lr_disc", r(c.lr_disc)},
            {"weight_decay", r(c.weight_decay)},
            {"lambda_d", r(c.lambda_d)},
            {"lambda_ent", r(c.lambda_ent)},
            {"poly_power", r(c.poly_power)},
            {"seed", n(c.seed)},
            {"norm", to_string(c.norm)},
            {"distance", to_string(c.distance)},
            {"prob", to_string(c.prob)},
            {"checkpoint_interval", n(c.checkpoint_interval)},
            {"depth", n(c.depth)},
            {"base_channels", n(c.base_channels)},
            {"patch", n(c.patch)},
            {"patches_per_image", n(c.patches_per_image)},
            {"augment", c.augment ? "1" : "0"},
            {"norm_momentum", r(c.norm_momentum)},
            {"check_isolation", c.check_isolation ? "1" : "0"}};
}

TrainConfig train_config_from_entries(const std::map<std::string, std::string>& entries) {
    TrainConfig cfg;
    for (const auto& [k, v] : entries) set_train_option(cfg, k, v);
    cfg.validate();
    return cfg;
}

double poly_lr(double base_lr, std::size_t iter, std::size_t max_iter, double power) {
    if (max_iter == 0 || iter > max_iter) {
        throw std::invalid_argument("poly_lr: need 0 <= iter <= max_iter and max_iter >= 1, got iter " +
                                    std::to_string(iter) + ", max_iter " + std::to_string(max_iter));
    }
    return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

// ---------------------------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Parameter*> params, double weight_decay, double beta1, double beta2, double eps)
    : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Parameter* p : params) {
        if (!p->trainable()) continue;
        slots_.push_back({p, Tensor::zeros_like(p->value), Tensor::zeros_like(p->value)});
    }
}

void Adam::zero_grad() {
    for (auto& s : slots_) s.p->zero_grad();
}

void Adam::step(double lr) {
    for (const auto& s : slots_) {
        if (s.p->grad.empty()) continue;
        if (s.p->grad.shape() != s.p->value.shape()) {
            throw ShapeError("adam: gradient of '" + s.p->name + "' has shape " + shape_str(s.p->grad.shape()));
        }
        if (!s.p->grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + s.p->name + "'");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& s : slots_) {
        Parameter& p = *s.p;
        if (p.grad.empty()) continue;
        const double decay = p.role == ParamRole::weight ? weight_decay_ : 0.0;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i] + decay * p.value[i];
            s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
            s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
            p.value[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
        }
        p.zero_grad();
    }
}

// ---------------------------------------------------------------------------------------------
// Log

void write_train_log_header(std::ostream& out) { out << "iter,L_sup,L_adv,L_d,L_ent,lr_seg,lr_disc\n"; }

void write_train_log_row(std::ostream& out, const TrainLogRow& row) {
    auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
    out << row.iter << ',' << format_real(row.l_sup) << ',' << opt(row.l_adv) << ',' << opt(row.l_d) << ','
        << opt(row.l_ent) << ',' << format_real(row.lr_seg) << ',' << format_real(row.lr_disc) << '\n';
}

// ---------------------------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig cfg, std::vector<FundusImage> source, std::vector<FundusImage> target)
    : cfg_((cfg.validate(), cfg)),
      source_(std::move(source)),
      target_(std::move(target)),
      seg_(cfg_.segmenter_config(), derive_seed(cfg_.seed, {kSegInit})),
      disc_(DiscriminatorConfig{}, derive_seed(cfg_.seed, {kDiscInit})),
      adam_seg_(seg_.parameters(), cfg_.weight_decay),
      adam_disc_(disc_.parameters(), 0.0) {
    if (source_.empty()) throw std::invalid_argument("trainer: no source images");
    for (const auto& img : source_) {
        if (!img.label) throw std::invalid_argument("trainer: source image '" + img.id + "' has no label");
    }
    if (uses_target() && target_.empty()) throw std::invalid_argument("trainer: no target training images");
    for (const auto& img : target_) {
        if (img.label) throw std::invalid_argument("trainer: target image '" + img.id + "' carries a label");
    }
    src_pool_.images = &source_;
    src_pool_.stream = kSourcePool;
    tgt_pool_.images = &target_;
    tgt_pool_.stream = kTargetPool;
}

bool Trainer::uses_target() const {
    return cfg_.norm == NormKind::tn || cfg_.lambda_d > 0.0 || cfg_.lambda_ent > 0.0;
}

const Trainer::PatchRef& Trainer::pool_entry(Pool& pool, std::size_t index) {
    const std::size_t per_epoch = pool.images->size() * cfg_.patches_per_image;
    const std::size_t epoch = index / per_epoch;
    if (epoch != pool.epoch) {
        pool.refs.clear();
        for (std::size_t i = 0; i < pool.images->size(); ++i) {
            const FundusImage& img = (*pool.images)[i];
            for (auto [r, c] : sample_patch_origins(img.height(), img.width(), cfg_.patches_per_image, cfg_.patch,
                                                    derive_seed(cfg_.seed, {pool.stream, epoch, i}))) {
                pool.refs.push_back({i, r, c});
            }
        }
        Rng rng(derive_seed(cfg_.seed, {pool.stream, epoch, kShuffle}));
        for (std::size_t i = pool.refs.size(); i > 1; --i) std::swap(pool.refs[i - 1], pool.refs[rng.index(i)]);
        pool.epoch = epoch;
    }
    return pool.refs[index % per_epoch];
}

void Trainer::fill(Pool& pool, std::size_t first, std::size_t count, std::size_t iter, Tensor& pixels, Tensor* labels,
                   Tensor& masks) {
    const std::size_t P = cfg_.patch, plane = P * P;
    pixels = Tensor(Shape{count, 1, P, P});
    masks = Tensor(Shape{count, P, P});
    if (labels) *labels = Tensor(Shape{count, P, P});
    Tensor px(Shape{P, P}), lb(Shape{P, P}), mk(Shape{P, P});
    for (std::size_t k = 0; k < count; ++k) {
        const PatchRef ref = pool_entry(pool, first + k);
        const FundusImage& img = (*pool.images)[ref.image];
        const std::size_t W = img.width();
        for (std::size_t y = 0; y < P; ++y)
            for (std::size_t x = 0; x < P; ++x) {
                const std::size_t src = (ref.row + y) * W + ref.col + x;
                px[y * P + x] = img.pixels[src] * kInputScale;
                mk[y * P + x] = img.fov_mask[src];
                if (labels) lb[y * P + x] = (*img.label)[src];
            }
        if (cfg_.augment) {
            const Dihedral op = random_dihedral(derive_seed(cfg_.seed, {kAugment, pool.stream, iter, k}));
            px = apply_dihedral(px, op);
            mk = apply_dihedral(mk, op);
            if (labels) lb = apply_dihedral(lb, op);
        }
        std::copy_n(px.ptr(), plane, pixels.ptr() + k * plane);
        std::copy_n(mk.ptr(), plane, masks.ptr() + k * plane);
        if (labels) std::copy_n(lb.ptr(), plane, labels->ptr() + k * plane);
    }
}

DomainBatch Trainer::batch(std::size_t iter) {
    DomainBatch b;
    fill(src_pool_, iter * cfg_.batch_src, cfg_.batch_src, iter, b.src, &b.src_label, b.src_mask);
    if (uses_target()) {
        Tensor px, mk;
        fill(tgt_pool_, iter * cfg_.batch_tgt, cfg_.batch_tgt, iter, px, nullptr, mk);
        b.tgt = std::move(px);
        b.tgt_mask = std::move(mk);
    }
    return b;
}

TrainLogRow Trainer::step() { return step(batch(iter_)); }

TrainLogRow Trainer::step(const DomainBatch& batch) {
    if (iter_ >= cfg_.iters) throw std::logic_error("trainer: all " + std::to_string(cfg_.iters) + " iterations done");
    TrainLogRow row;
    row.iter = iter_;
    row.lr_seg = poly_lr(cfg_.lr_seg, iter_, cfg_.iters, cfg_.poly_power);
    row.lr_disc = poly_lr(cfg_.lr_disc, iter_, cfg_.iters, cfg_.poly_power);
    if (uses_target() && !batch.tgt) throw std::invalid_argument("trainer: batch lacks the target sub-batch");

    Tensor entropy_src, entropy_tgt;
    {
        Tape tape;
        std::optional<Tensor> tgt = uses_target() ? batch.tgt : std::nullopt;
        DomainPair p = seg_.forward(tape, batch.src, tgt, Mode::train);
        const Var l_sup = supervised_ce(*p.src, batch.src_label, batch.src_mask);
        row.l_sup = l_sup.value().item();
        std::optional<Var> l_adv, l_ent;
        if (p.tgt) {
            const Var i_t = entropy_map(*p.tgt);
            const Var ent = minent_loss(i_t, *batch.tgt_mask);
            row.l_ent = ent.value().item();
            if (cfg_.lambda_ent > 0.0) l_ent = ent;
            if (uses_discriminator()) {
                l_adv = adversarial_loss(disc_.forward(i_t, /*frozen=*/true));
                row.l_adv = l_adv->value().item();
                entropy_tgt = i_t.value();
                entropy_src = entropy_map(ops::detach(*p.src)).value();
            }
        }
        const Var total = segmenter_objective(l_sup, l_adv, l_ent, LossWeights{cfg_.lambda_d, cfg_.lambda_ent});
        tape.backward(total);
    }
    {
        const auto disc_params = disc_.parameters();
        const auto before = cfg_.check_isolation ? snapshot(disc_params) : std::vector<std::vector<double>>{};
        adam_seg_.step(row.lr_seg);
        if (cfg_.check_isolation) require_unchanged(disc_params, before, "segmenter update");
    }
    if (uses_discriminator()) row.l_d = discriminator_step(entropy_src, entropy_tgt, row.lr_disc);
    ++iter_;
    return row;
}

double Trainer::discriminator_step(const Tensor& entropy_src, const Tensor& entropy_tgt, double lr) {
    const auto seg_params = seg_.parameters();
    const auto before = cfg_.check_isolation ? snapshot(seg_params) : std::vector<std::vector<double>>{};
    Tape tape;
    const Var ds = disc_.forward(tape.constant(entropy_src));
    const Var dt = disc_.forward(tape.constant(entropy_tgt));
    const Var loss = discriminator_loss(ds, dt);
    tape.backward(loss);
    adam_disc_.step(lr);
    if (cfg_.check_isolation) require_unchanged(seg_params, before, "discriminator update");
    return loss.value().item();
}

std::vector<Parameter*> Trainer::checkpoint_parameters() {
    std::vector<Parameter*> out = seg_.parameters();
    for (Parameter* p : disc_.parameters()) out.push_back(p);
    return out;
}

std::map<std::string, std::string> Trainer::checkpoint_config() const {
    auto entries = train_config_entries(cfg_);
    entries["iteration"] = std::to_string(iter_);
    return entries;
}

// ---------------------------------------------------------------------------------------------
// Driver

std::vector<FundusImage> load_preprocessed(const fs::path& manifest) {
    std::vector<FundusImage> images = load_split(manifest);
    for (auto& img : images) img = preprocess(img);
    return images;
}

namespace {

void check_manifest(const fs::path& path, Domain domain, bool labelled) {
    const auto entries = read_manifest(path);
    if (entries.empty()) throw std::runtime_error("manifest '" + path.string() + "' lists no images");
    for (const auto& e : entries) {
        if (e.domain != domain) {
            throw std::runtime_error("manifest '" + path.string() + "': entry '" + e.path + "' has domain " +
                                     to_string(e.domain) + ", expected " + to_string(domain));
        }
        if (e.has_label != labelled) {
            throw std::runtime_error("manifest '" + path.string() + "': entry '" + e.path +
                                     (labelled ? "' lacks a label" : "' is labelled; target training data must not be"));
        }
    }
}

}  // namespace

void train(const TrainConfig& cfg, const fs::path& data, const fs::path& out, const TrainOptions& opt) {
    cfg.validate();
    const DatasetPaths paths{data};
    check_manifest(paths.source_manifest(), Domain::source, true);
    check_manifest(paths.target_manifest("train"), Domain::target, false);
    if (fs::exists(out)) {
        if (!opt.force) throw std::runtime_error("output '" + out.string() + "' exists; pass --force to overwrite");
        fs::remove_all(out);
    }
    fs::create_directories(out);

    Trainer trainer(cfg, load_preprocessed(paths.source_manifest()),
                    load_preprocessed(paths.target_manifest("train")));
    std::ofstream log(out / "train_log.csv");
    if (!log) throw std::runtime_error("cannot write '" + (out / "train_log.csv").string() + "'");
    write_train_log_header(log);
    for (std::size_t k = 1; k <= cfg.iters; ++k) {
        const TrainLogRow row = trainer.step();
        write_train_log_row(log, row);
        if (opt.progress && (k % opt.progress_interval == 0 || k == cfg.iters)) {
            char buf[160];
            auto part = [](const char* name, const std::optional<double>& v) {
                char b[40] = "";
                if (v) std::snprintf(b, sizeof b, "  %s %.4f", name, *v);
                return std::string(b);
            };
            std::snprintf(buf, sizeof buf, "iter %zu/%zu  L_sup %.4f%s%s%s\n", k, cfg.iters, row.l_sup,
                          part("L_adv", row.l_adv).c_str(), part("L_d", row.l_d).c_str(),
                          part("L_ent", row.l_ent).c_str());
            *opt.progress << buf << std::flush;
        }
        if (cfg.checkpoint_interval > 0 && k % cfg.checkpoint_interval == 0 && k < cfg.iters) {
            char name[32];
            std::snprintf(name, sizeof name, "ckpt_%06zu", k);
            save_checkpoint(out / name, trainer.checkpoint_parameters(), trainer.checkpoint_config());
        }
    }
    save_checkpoint(out / "final", trainer.checkpoint_parameters(), trainer.checkpoint_config());
    if (!log) throw std::runtime_error("failed writing the training log");
}

Segmenter load_segmenter(const fs::path& checkpoint) {
    auto entries = read_checkpoint_config(checkpoint);
    entries.erase("iteration");
    const TrainConfig cfg = train_config_from_entries(entries);
    Segmenter seg(cfg.segmenter_config(), 0);
    load_checkpoint_tensors(checkpoint, seg.parameters());
    return seg;
}

PatchModel patch_model(Segmenter& seg, Domain domain) {
    return [&seg, domain](const Tensor& patches) {
        Tensor x = patches;
        for (double& v : x.data()) v *= kInputScale;
        Tape tape;
        DomainPair p = domain == Domain::source ? seg.forward(tape, std::move(x), std::nullopt, Mode::eval)
                                                : seg.forward(tape, std::nullopt, std::move(x), Mode::eval);
        const Var probs = domain == Domain::source ? *p.src : *p.tgt;
        return ops::slice(probs, 1, 1, 2).value();
    };
}

double mean_map_entropy(const Tensor& prob, const Tensor& mask) {
    if (prob.shape() != mask.shape() || prob.rank() != 2) {
        throw ShapeError("mean_map_entropy: prob " + shape_str(prob.shape()) + " and mask " + shape_str(mask.shape()));
    }
    const std::size_t H = prob.dim(0), W = prob.dim(1), plane = H * W;
    Tensor two(Shape{1, 2, H, W});
    for (std::size_t i = 0; i < plane; ++i) {
        two[i] = 1.0 - prob[i];
        two[plane + i] = prob[i];
    }
    Tape tape;
    return minent_loss(entropy_map(tape.constant(std::move(two))), mask.reshaped(Shape{1, H, W})).value().item();
}

std::vector<ImageEvaluation> evaluate_images(Segmenter& seg, const std::vector<FundusImage>& images, Domain domain,
                                             std::size_t stride, std::size_t patch) {
    const PatchModel model = patch_model(seg, domain);
    std::vector<ImageEvaluation> out;
    for (const auto& img : images) {
        if (!img.label) throw std::invalid_argument("evaluate: image '" + img.id + "' has no label");
        ImageEvaluation e;
        e.id = img.id;
        e.prob = tiled_inference(img.pixels, model, stride, patch);
        e.report = evaluate_map(e.prob, *img.label, img.fov_mask);
        e.mean_entropy = mean_map_entropy(e.prob, img.fov_mask);
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace tnseg
