#include <cmath>
#include <optional>

#include "tnseg/gradcheck.hpp"
#include "tnseg/losses.hpp"
#include "tnseg/networks.hpp"
#include "tnseg/norm.hpp"
#include "tnseg/random.hpp"

namespace tnseg {

namespace {

using InputFn = std::function<Var(Tape&, std::span<const Var>)>;

Tensor normal(const Shape& s, Rng& rng, double scale = 1.0) {
    Tensor t(s);
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

// Values bounded away from zero so kinks (abs, relu) are not straddled by the finite difference.
Tensor away_from_zero(const Shape& s, Rng& rng) {
    Tensor t(s);
    for (double& v : t.data()) {
        const double n = rng.normal();
        v = (n < 0 ? -1.0 : 1.0) * (0.1 + std::abs(n));
    }
    return t;
}

Tensor positive(const Shape& s, Rng& rng) {
    Tensor t(s);
    for (double& v : t.data()) v = 0.5 + rng.uniform();
    return t;
}

Tensor binary(const Shape& s, Rng& rng) {
    Tensor t(s);
    for (double& v : t.data()) v = rng.coin() ? 1.0 : 0.0;
    return t;
}

// Scalar with a generic gradient: sum(y * R) for a fixed random R.
Var project(Var y, std::uint64_t seed) {
    Rng rng(seed);
    return ops::sum_all(ops::mul(y, y.tape->constant(normal(y.shape(), rng))));
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(std::uint64_t seed) {
    std::vector<GradcheckCase> out;
    Rng rng(derive_seed(seed, {0x6763}));
    const std::uint64_t pseed = derive_seed(seed, {0x7072});
    const Shape x4{2, 3, 4, 4};

    auto tensor_case = [&](const std::string& component, const std::string& name, const InputFn& f,
                           std::vector<Tensor> inputs) {
        out.push_back({component, name, grad_check(f, std::move(inputs))});
    };
    auto param_case = [&](const std::string& component, const std::string& name, const std::function<Var(Tape&)>& f,
                          std::vector<Parameter*> params) {
        std::vector<Parameter*> trainable;
        for (Parameter* p : params)
            if (p->trainable()) trainable.push_back(p);
        out.push_back({component, name, grad_check(f, trainable)});
    };

    // tensor-core
    tensor_case("tensor-core", "add/sub/mul/div",
                [&](Tape&, std::span<const Var> v) {
                    return project(ops::div(ops::mul(ops::add(v[0], v[1]), ops::sub(v[0], v[1])), v[2]), pseed);
                },
                {normal(x4, rng), normal(x4, rng), positive(x4, rng)});
    tensor_case("tensor-core", "scalar add/mul, neg",
                [&](Tape&, std::span<const Var> v) {
                    return project(ops::neg(ops::mul(ops::add(v[0], 0.3), -1.7)), pseed);
                },
                {normal(x4, rng)});
    tensor_case("tensor-core", "scalar broadcast",
                [&](Tape&, std::span<const Var> v) { return project(ops::mul(ops::add(v[0], v[1]), v[1]), pseed); },
                {normal(x4, rng), normal(Shape{1}, rng)});
    tensor_case("tensor-core", "exp/log",
                [&](Tape&, std::span<const Var> v) { return project(ops::add(ops::exp(v[0]), ops::log(v[1])), pseed); },
                {normal(x4, rng, 0.5), positive(x4, rng)});
    tensor_case("tensor-core", "abs/relu",
                [&](Tape&, std::span<const Var> v) { return project(ops::add(ops::abs(v[0]), ops::relu(v[1])), pseed); },
                {away_from_zero(x4, rng), away_from_zero(x4, rng)});
    tensor_case("tensor-core", "leaky_relu",
                [&](Tape&, std::span<const Var> v) { return project(ops::leaky_relu(v[0], 0.2), pseed); },
                {away_from_zero(x4, rng)});
    tensor_case("tensor-core", "sigmoid",
                [&](Tape&, std::span<const Var> v) { return project(ops::sigmoid(v[0]), pseed); },
                {normal(x4, rng, 2.0)});
    tensor_case("tensor-core", "sum/mean/var over axes",
                [&](Tape&, std::span<const Var> v) {
                    return ops::add(ops::add(project(ops::sum(v[0], {2}), pseed), project(ops::mean(v[0], {1}), pseed + 1)),
                                    ops::add(project(ops::var(v[0], {0, 2, 3}), pseed + 2), ops::mean_all(v[0])));
                },
                {normal(x4, rng)});
    tensor_case("tensor-core", "conv2d 3x3 s1 p1",
                [&](Tape&, std::span<const Var> v) { return project(ops::conv2d(v[0], v[1], v[2], 1, 1), pseed); },
                {normal(Shape{2, 3, 6, 6}, rng), normal(Shape{4, 3, 3, 3}, rng, 0.5), normal(Shape{4}, rng)});
    tensor_case("tensor-core", "conv2d 4x4 s2 p1",
                [&](Tape&, std::span<const Var> v) { return project(ops::conv2d(v[0], v[1], v[2], 2, 1), pseed); },
                {normal(Shape{2, 2, 8, 8}, rng), normal(Shape{3, 2, 4, 4}, rng, 0.5), normal(Shape{3}, rng)});
    tensor_case("tensor-core", "conv2d 1x1",
                [&](Tape&, std::span<const Var> v) { return project(ops::conv2d(v[0], v[1], v[2], 1, 0), pseed); },
                {normal(x4, rng), normal(Shape{2, 3, 1, 1}, rng), normal(Shape{2}, rng)});
    tensor_case("tensor-core", "maxpool/avgpool/upsample",
                [&](Tape&, std::span<const Var> v) {
                    return ops::add(project(ops::maxpool2d(v[0], 2), pseed),
                                    project(ops::upsample_nearest(ops::avgpool2d(v[0], 2), 2), pseed + 1));
                },
                {normal(x4, rng)});
    tensor_case("tensor-core", "concat/slice",
                [&](Tape&, std::span<const Var> v) {
                    const Var parts[] = {v[0], v[1]};
                    return project(ops::slice(ops::concat(parts, 1), 1, 1, 5), pseed);
                },
                {normal(x4, rng), normal(Shape{2, 2, 4, 4}, rng)});
    tensor_case("tensor-core", "softmax_channels",
                [&](Tape&, std::span<const Var> v) { return project(ops::softmax_channels(v[0]), pseed); },
                {normal(x4, rng, 2.0)});
    tensor_case("tensor-core", "channel_affine/channel_linear",
                [&](Tape&, std::span<const Var> v) {
                    const std::vector<double> scale{1.5, -0.5, 2.0}, shift{0.1, 0.2, -0.3};
                    return project(ops::channel_linear(ops::channel_affine(v[0], v[1], v[2]), scale, shift), pseed);
                },
                {normal(x4, rng), normal(Shape{3}, rng), normal(Shape{3}, rng)});
    tensor_case("tensor-core", "batch_normalize",
                [&](Tape&, std::span<const Var> v) { return project(ops::batch_normalize(v[0], 1e-5), pseed); },
                {normal(x4, rng, 2.0)});

    // losses
    tensor_case("losses", "entropy_map through softmax",
                [&](Tape&, std::span<const Var> v) { return project(entropy_map(ops::softmax_channels(v[0])), pseed); },
                {normal(Shape{2, 2, 4, 4}, rng, 2.0)});
    {
        const Tensor labels = binary(Shape{2, 4, 4}, rng), mask = binary(Shape{2, 4, 4}, rng);
        tensor_case("losses", "supervised_ce",
                    [&](Tape&, std::span<const Var> v) {
                        return supervised_ce(ops::softmax_channels(v[0]), labels, mask);
                    },
                    {normal(Shape{2, 2, 4, 4}, rng)});
        tensor_case("losses", "minent_loss",
                    [&](Tape&, std::span<const Var> v) {
                        return minent_loss(entropy_map(ops::softmax_channels(v[0])), mask);
                    },
                    {normal(Shape{2, 2, 4, 4}, rng)});
    }
    tensor_case("losses", "discriminator_loss/adversarial_loss",
                [&](Tape&, std::span<const Var> v) {
                    const Var s = ops::sigmoid(v[0]), t = ops::sigmoid(v[1]);
                    return ops::add(discriminator_loss(s, t), adversarial_loss(t));
                },
                {normal(Shape{2, 1, 2, 2}, rng), normal(Shape{2, 1, 2, 2}, rng)});

    // norm-layers
    {
        BnState bn = BnState::create("bn", 3);
        bn.gamma.value = normal(Shape{3}, rng);
        bn.beta.value = normal(Shape{3}, rng);
        Parameter x{"x", normal(x4, rng, 2.0), Tensor(), ParamRole::weight};
        param_case("norm-layers", "bn train",
                   [&](Tape& t) { return project(bn_forward(t.parameter(x), bn, Mode::train), pseed); },
                   {&x, &bn.gamma, &bn.beta});
        bn.running_mean.value = normal(Shape{3}, rng);
        bn.running_var.value = positive(Shape{3}, rng);
        param_case("norm-layers", "bn eval",
                   [&](Tape& t) { return project(bn_forward(t.parameter(x), bn, Mode::eval), pseed); },
                   {&x, &bn.gamma, &bn.beta});
    }
    {
        TnState tn = TnState::create("tn", 3);
        for (BnState* s : {&tn.src, &tn.tgt}) {
            s->gamma.value = normal(Shape{3}, rng);
            s->beta.value = normal(Shape{3}, rng);
        }
        Parameter xs{"xs", normal(x4, rng, 2.0), Tensor(), ParamRole::weight};
        Parameter xt{"xt", normal(x4, rng, 1.5), Tensor(), ParamRole::weight};
        for (std::size_t i = 0; i < xt.value.size(); ++i) xt.value[i] += 0.5 * static_cast<double>(i % 3);
        auto f = [&](Mode mode) {
            return [&, mode](Tape& t) {
                TnOutput o = tn_forward(t.parameter(xs), t.parameter(xt), tn, mode);
                return ops::add(project(*o.src, pseed), project(*o.tgt, pseed + 1));
            };
        };
        {
            // Set the channel weights from one pass, then hold them.
            Tape t;
            tn_forward(t.constant(xs.value), t.constant(xt.value), tn, Mode::train);
        }
        tn.eta_frozen = true;
        param_case("norm-layers", "tn train (eta fixed)", f(Mode::train),
                   {&xs, &xt, &tn.src.gamma, &tn.src.beta, &tn.tgt.gamma, &tn.tgt.beta});
        tn.eta_frozen = false;
        param_case("norm-layers", "tn eval", f(Mode::eval),
                   {&xs, &xt, &tn.src.gamma, &tn.src.beta, &tn.tgt.gamma, &tn.tgt.beta});
    }

    // networks
    for (NormKind kind : {NormKind::bn, NormKind::tn}) {
        SegmenterConfig cfg;
        cfg.depth = 1;
        cfg.base_channels = 2;
        cfg.norm = kind;
        Segmenter seg(cfg, derive_seed(seed, {0x736567}));
        const Tensor xs = normal(Shape{2, 1, 8, 8}, rng), xt = normal(Shape{2, 1, 8, 8}, rng, 1.5);
        const Tensor labels = binary(Shape{2, 8, 8}, rng), mask(Shape{2, 8, 8}, 1.0);
        auto f = [&](Tape& t) {
            DomainPair p = seg.forward(t, xs, xt, Mode::train);
            return ops::add(supervised_ce(*p.src, labels, mask), minent_loss(entropy_map(*p.tgt), mask));
        };
        if (kind == NormKind::tn) {
            Tape t;
            seg.forward(t, xs, xt, Mode::train);
            seg.freeze_eta(true);
        }
        param_case("networks", kind == NormKind::tn ? "segmenter tn (eta fixed)" : "segmenter bn", f,
                   seg.parameters());
    }
    {
        DiscriminatorConfig cfg;
        cfg.widths = {4, 8, 8, 1};
        Discriminator disc(cfg, derive_seed(seed, {0x646973}));
        const Tensor xs = positive(Shape{2, 1, 16, 16}, rng), xt = positive(Shape{2, 1, 16, 16}, rng);
        param_case("networks", "discriminator",
                   [&](Tape& t) {
                       return discriminator_loss(disc.forward(t.constant(xs)), disc.forward(t.constant(xt)));
                   },
                   disc.parameters());
    }
    return out;
}

}  // namespace tnseg
