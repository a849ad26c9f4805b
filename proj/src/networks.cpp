#include "tnseg/networks.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tnseg {

std::string to_string(NormKind k) { return k == NormKind::bn ? "bn" : "tn"; }

NormKind parse_norm_kind(const std::string& s) {
    if (s == "bn") return NormKind::bn;
    if (s == "tn") return NormKind::tn;
    throw std::invalid_argument("unknown norm kind '" + s + "'");
}

Var ConvLayer::operator()(Var x) {
    Tape& tape = *x.tape;
    // Parameters are bound as leaves on every call; the tape copies their current values.
    return ops::conv2d(x, tape.parameter(weight), tape.parameter(bias), stride, pad);
}

Var ConvLayer::frozen(Var x) const {
    Tape& tape = *x.tape;
    return ops::conv2d(x, tape.constant(weight.value), tape.constant(bias.value), stride, pad);
}

void ConvLayer::collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

ConvLayer make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                    std::size_t pad, Rng& rng) {
    ConvLayer layer;
    layer.weight = Parameter{name + ".weight", Tensor(Shape{cout, cin, k, k}), Tensor(), ParamRole::weight};
    layer.bias = Parameter{name + ".bias", Tensor(Shape{cout}), Tensor(), ParamRole::bias};
    const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
    for (double& w : layer.weight.value.data()) w = rng.uniform(-bound, bound);
    layer.stride = stride;
    layer.pad = pad;
    return layer;
}

Segmenter::Segmenter(const SegmenterConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.depth == 0 || cfg.base_channels == 0) throw std::invalid_argument("segmenter depth and width must be positive");
    Rng rng(derive_seed(seed, {0x5e6}));
    const std::size_t base = cfg.base_channels;
    std::size_t cin = cfg.in_channels;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::size_t c = base << l;
        encoder_.push_back(make_block("seg.enc" + std::to_string(l), cin, c, rng));
        cin = c;
    }
    bottleneck_ = make_block("seg.mid", cin, base << cfg.depth, rng);
    decoder_.resize(cfg.depth);
    for (std::size_t l = cfg.depth; l-- > 0;) {
        const std::size_t c = base << l;
        decoder_[l] = make_block("seg.dec" + std::to_string(l), (c << 1) + c, c, rng);
    }
    head_ = make_conv("seg.head", base, cfg.out_channels, 1, 1, 0, rng);
}

Segmenter::Block Segmenter::make_block(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng) {
    auto norm = [&](const std::string& n) -> Norm {
        if (cfg_.norm == NormKind::bn) return BnState::create(n, cout, cfg_.norm_momentum, cfg_.norm_eps);
        return TnState::create(n, cout, cfg_.distance, cfg_.prob, cfg_.norm_momentum, cfg_.norm_eps);
    };
    Block b;
    b.name = name;
    b.conv1 = make_conv(name + ".conv1", cin, cout, 3, 1, 1, rng);
    b.norm1 = norm(name + ".norm1");
    b.conv2 = make_conv(name + ".conv2", cout, cout, 3, 1, 1, rng);
    b.norm2 = norm(name + ".norm2");
    return b;
}

namespace {

template <class F>
DomainPair map_pair(const DomainPair& x, F f) {
    DomainPair out;
    if (x.src) out.src = f(*x.src);
    if (x.tgt) out.tgt = f(*x.tgt);
    return out;
}

}  // namespace

DomainPair Segmenter::apply_norm(Norm& n, DomainPair x, Mode mode) {
    if (auto* tn = std::get_if<TnState>(&n)) {
        TnOutput o = tn_forward(x.src, x.tgt, *tn, mode);
        return DomainPair{o.src, o.tgt};
    }
    auto& bn = std::get<BnState>(n);
    return map_pair(x, [&](Var v) { return bn_forward(v, bn, mode); });
}

DomainPair Segmenter::run_block(Block& b, DomainPair x, Mode mode) {
    x = map_pair(x, [&](Var v) { return b.conv1(v); });
    x = apply_norm(b.norm1, x, mode);
    if (observer_) observer_(b.name + ".norm1", x);
    x = map_pair(x, [](Var v) { return ops::relu(v); });
    x = map_pair(x, [&](Var v) { return b.conv2(v); });
    x = apply_norm(b.norm2, x, mode);
    if (observer_) observer_(b.name + ".norm2", x);
    return map_pair(x, [](Var v) { return ops::relu(v); });
}

DomainPair Segmenter::forward(Tape& tape, std::optional<Tensor> x_src, std::optional<Tensor> x_tgt, Mode mode) {
    std::optional<Var> s, t;
    if (x_src) s = tape.constant(std::move(*x_src));
    if (x_tgt) t = tape.constant(std::move(*x_tgt));
    return forward(s, t, mode);
}

DomainPair Segmenter::forward(std::optional<Var> x_src, std::optional<Var> x_tgt, Mode mode) {
    if (!x_src && !x_tgt) throw std::invalid_argument("segmenter_forward: no input domain given");
    if (cfg_.norm == NormKind::tn && mode == Mode::train && !(x_src && x_tgt)) {
        throw std::invalid_argument("segmenter_forward: tn train mode needs both domains");
    }
    const std::size_t factor = std::size_t{1} << cfg_.depth;
    for (const auto& v : {x_src, x_tgt}) {
        if (!v) continue;
        const Shape& s = v->shape();
        if (s.size() != 4 || s[1] != cfg_.in_channels) {
            throw ShapeError("segmenter input must be [N," + std::to_string(cfg_.in_channels) + ",H,W], got " + shape_str(s));
        }
        if (s[2] % factor != 0) throw ShapeError("segmenter axis 2 (height " + std::to_string(s[2]) + ") not divisible by " + std::to_string(factor));
        if (s[3] % factor != 0) throw ShapeError("segmenter axis 3 (width " + std::to_string(s[3]) + ") not divisible by " + std::to_string(factor));
    }

    // BN shares statistics across domains, so both domains travel as one batch.
    const bool joint = cfg_.norm == NormKind::bn && x_src && x_tgt;
    std::size_t n_src = 0;
    DomainPair x;
    if (joint) {
        n_src = x_src->shape()[0];
        const Var parts[] = {*x_src, *x_tgt};
        x.src = ops::concat(parts, 0);
    } else {
        x.src = x_src;
        x.tgt = x_tgt;
    }

    std::vector<DomainPair> skips;
    for (Block& b : encoder_) {
        x = run_block(b, x, mode);
        skips.push_back(x);
        x = map_pair(x, [](Var v) { return ops::maxpool2d(v, 2); });
    }
    x = run_block(bottleneck_, x, mode);
    for (std::size_t l = cfg_.depth; l-- > 0;) {
        x = map_pair(x, [](Var v) { return ops::upsample_nearest(v, 2); });
        DomainPair merged;
        if (x.src) {
            const Var parts[] = {*x.src, *skips[l].src};
            merged.src = ops::concat(parts, 1);
        }
        if (x.tgt) {
            const Var parts[] = {*x.tgt, *skips[l].tgt};
            merged.tgt = ops::concat(parts, 1);
        }
        x = run_block(decoder_[l], merged, mode);
    }
    x = map_pair(x, [&](Var v) { return ops::softmax_channels(head_(v)); });

    if (joint) {
        const std::size_t total = x.src->shape()[0];
        Var all = *x.src;
        return DomainPair{ops::slice(all, 0, 0, n_src), ops::slice(all, 0, n_src, total)};
    }
    return x;
}

std::vector<Parameter*> Segmenter::parameters() {
    std::vector<Parameter*> out;
    auto collect_norm = [&](Norm& n) { std::visit([&](auto& s) { s.collect(out); }, n); };
    auto collect_block = [&](Block& b) {
        b.conv1.collect(out);
        collect_norm(b.norm1);
        b.conv2.collect(out);
        collect_norm(b.norm2);
    };
    for (Block& b : encoder_) collect_block(b);
    collect_block(bottleneck_);
    for (std::size_t l = cfg_.depth; l-- > 0;) collect_block(decoder_[l]);
    head_.collect(out);
    return out;
}

std::vector<std::string> Segmenter::norm_layer_names() const {
    std::vector<std::string> names;
    auto add = [&](const Block& b) {
        names.push_back(b.name + ".norm1");
        names.push_back(b.name + ".norm2");
    };
    for (const Block& b : encoder_) add(b);
    add(bottleneck_);
    for (std::size_t l = cfg_.depth; l-- > 0;) add(decoder_[l]);
    return names;
}

TnState* Segmenter::tn_layer(const std::string& name) {
    auto pick = [&](Block& b) -> TnState* {
        if (name == b.name + ".norm1") return std::get_if<TnState>(&b.norm1);
        if (name == b.name + ".norm2") return std::get_if<TnState>(&b.norm2);
        return nullptr;
    };
    for (Block& b : encoder_) {
        if (auto* s = pick(b)) return s;
    }
    if (auto* s = pick(bottleneck_)) return s;
    for (Block& b : decoder_) {
        if (auto* s = pick(b)) return s;
    }
    return nullptr;
}

void Segmenter::freeze_eta(bool frozen) {
    for (const auto& name : norm_layer_names()) {
        if (TnState* s = tn_layer(name)) s->eta_frozen = frozen;
    }
}

Discriminator::Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.widths.empty() || cfg.widths.back() != 1) throw std::invalid_argument("discriminator must end in 1 channel");
    Rng rng(derive_seed(seed, {0xd15c}));
    std::size_t cin = 1;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
        layers_.push_back(
            make_conv("disc.conv" + std::to_string(i), cin, cfg.widths[i], cfg.kernel, cfg.stride, cfg.pad, rng));
        cin = cfg.widths[i];
    }
}

Var Discriminator::forward(Var entropy_map, bool frozen) {
    const Shape& s = entropy_map.shape();
    if (s.size() != 4 || s[1] != 1) throw ShapeError("discriminator expects [N,1,H,W], got " + shape_str(s));
    const std::size_t minimum = std::size_t{1} << layers_.size();
    if (s[2] < minimum) throw ShapeError("discriminator axis 2: height " + std::to_string(s[2]) + " < " + std::to_string(minimum));
    if (s[3] < minimum) throw ShapeError("discriminator axis 3: width " + std::to_string(s[3]) + " < " + std::to_string(minimum));
    Var x = entropy_map;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = frozen ? layers_[i].frozen(x) : layers_[i](x);
        x = i + 1 < layers_.size() ? ops::leaky_relu(x, cfg_.slope) : ops::sigmoid(x);
    }
    return x;
}

std::vector<Parameter*> Discriminator::parameters() {
    std::vector<Parameter*> out;
    for (ConvLayer& l : layers_) l.collect(out);
    return out;
}

void save_checkpoint(const std::filesystem::path& dir, const std::vector<Parameter*>& params,
                     const std::map<std::string, std::string>& config) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
    manifest << "[config]\n";
    for (const auto& [k, v] : config) manifest << k << " = " << v << '\n';
    manifest << "[tensors]\n";
    for (const Parameter* p : params) {
        manifest << p->name << ' ' << shape_str(p->value.shape()) << '\n';
        save_tensor(dir / p->name, p->value);
    }
    if (!manifest) throw std::runtime_error("short write to " + (dir / "manifest.txt").string());
}

void load_checkpoint_tensors(const std::filesystem::path& dir, const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
        Tensor t = load_tensor(dir / p->name);
        if (t.shape() != p->value.shape()) {
            throw std::runtime_error("checkpoint tensor " + p->name + " has shape " + shape_str(t.shape()) +
                                     ", model expects " + shape_str(p->value.shape()));
        }
        p->value = std::move(t);
    }
}

std::map<std::string, std::string> read_checkpoint_config(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.txt");
    if (!in) throw std::runtime_error("no checkpoint manifest in " + dir.string());
    std::map<std::string, std::string> cfg;
    std::string line;
    bool in_config = false;
    while (std::getline(in, line)) {
        if (line == "[config]") {
            in_config = true;
            continue;
        }
        if (line == "[tensors]") break;
        if (!in_config) continue;
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        cfg[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return cfg;
}

}  // namespace tnseg
