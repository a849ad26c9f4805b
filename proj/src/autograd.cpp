#include "tnseg/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cfloat>
#include <cmath>
#include <numeric>
#include <string>

#include "tnseg/kernels.hpp"

namespace tnseg {

namespace {

std::atomic<bool> g_checked{true};
std::atomic<testing::Fault> g_fault{testing::Fault::none};

constexpr std::size_t kParallelThreshold = 1 << 15;

void accumulate(Tensor& dst, const Tensor& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    double* d = dst.ptr();
    const double* s = src.ptr();
    const std::size_t n = dst.size();
#pragma omp parallel for simd if (n > kParallelThreshold)
    for (std::size_t i = 0; i < n; ++i) d[i] += s[i];
}

Tape& same_tape(Var a, Var b) {
    if (a.tape != b.tape || a.tape == nullptr) throw std::logic_error("operands live on different tapes");
    return *a.tape;
}

}  // namespace

void set_checked_math(bool on) { g_checked.store(on); }
bool checked_math() { return g_checked.load(); }

namespace testing {
void inject_fault(Fault f) { g_fault.store(f); }
Fault active_fault() { return g_fault.load(); }
}  // namespace testing

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false, nullptr, nullptr});
    return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
    Node node{std::move(value), {}, {}, true, nullptr, std::make_unique<Tensor>()};
    node.sink = node.owned_sink.get();
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p) {
    nodes_.push_back(Node{p.value, {}, {}, p.trainable(), p.trainable() ? &p.grad : nullptr, nullptr});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) {
        if (p.tape != this) throw std::logic_error("parent recorded on a different tape");
        needs = needs || nodes_[p.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, needs, nullptr, nullptr});
    return Var{this, nodes_.size() - 1};
}

Tensor Tape::grad(Var v) const {
    const Node& node = nodes_[v.id];
    const Tensor& g = node.sink ? *node.sink : node.grad;
    return g.empty() ? Tensor::zeros_like(node.value) : g;
}

Tensor& Tape::grad_acc(std::size_t id) {
    Node& node = nodes_[id];
    if (node.grad.empty()) node.grad = Tensor::zeros_like(node.value);
    return node.grad;
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw std::logic_error("loss recorded on a different tape");
    if (value(loss).size() != 1) {
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(value(loss).shape()));
    }
    for (Node& node : nodes_) node.grad = Tensor();
    if (!nodes_[loss.id].requires_grad) return;
    grad_acc(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& node = nodes_[id];
        if (node.grad.empty()) continue;
        if (node.backward) node.backward(*this, id);
        if (node.sink) accumulate(*node.sink, node.grad);
    }
}

namespace ops {

namespace {

template <class F>
Tensor map_unary(const Tensor& x, F f) {
    Tensor out(x.shape());
    const double* xp = x.ptr();
    double* op = out.ptr();
    const std::size_t n = x.size();
#pragma omp parallel for simd if (n > kParallelThreshold)
    for (std::size_t i = 0; i < n; ++i) op[i] = f(xp[i]);
    return out;
}

// Backward for y = f(x): dx += g * df(x, y).
template <class DF>
Var unary(Var x, Tensor value, DF df) {
    Tape& t = *x.tape;
    const Var parents[] = {x};
    return t.record(std::move(value), parents, [x, df](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_of(self);
        const Tensor& xv = tape.value(x.id);
        const Tensor& yv = tape.value(self);
        Tensor& dx = tape.grad_acc(x.id);
        const std::size_t n = g.size();
#pragma omp parallel for simd if (n > kParallelThreshold)
        for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * df(xv[i], yv[i]);
    });
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* name) {
    if (a.shape() == b.shape()) return a.shape();
    if (b.size() == 1) return a.shape();
    if (a.size() == 1) return b.shape();
    throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " are neither identical nor tensor-vs-scalar");
}

// Elementwise binary op with scalar broadcasting. da/db return the local partials.
template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* name, F f, DA da, DB db) {
    Tape& t = same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(broadcast_shape(av, bv, name));
    const bool sa = av.size() == 1, sb = bv.size() == 1;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[sa ? 0 : i], bv[sb ? 0 : i]);
    const Var parents[] = {a, b};
    return t.record(std::move(out), parents, [a, b, sa, sb, da, db](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_of(self);
        const Tensor& av = tape.value(a.id);
        const Tensor& bv = tape.value(b.id);
        if (tape.requires_grad(a)) {
            Tensor& ga = tape.grad_acc(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga[sa ? 0 : i] += g[i] * da(av[sa ? 0 : i], bv[sb ? 0 : i]);
        }
        if (tape.requires_grad(b)) {
            Tensor& gb = tape.grad_acc(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) gb[sb ? 0 : i] += g[i] * db(av[sa ? 0 : i], bv[sb ? 0 : i]);
        }
    });
}

struct Reduction {
    Shape out_shape;
    std::vector<std::size_t> out_index;  // per input element
    std::size_t group = 1;               // inputs per output
};

Reduction plan_reduction(const Shape& shape, std::vector<std::size_t> axes) {
    if (axes.empty()) throw ShapeError("reduction over an empty axis set");
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    std::vector<bool> reduced(shape.size(), false);
    for (auto ax : axes) {
        if (ax >= shape.size()) {
            throw ShapeError("reduction axis " + std::to_string(ax) + " out of range for shape " + shape_str(shape));
        }
        reduced[ax] = true;
    }
    Reduction r;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (reduced[d]) {
            r.group *= shape[d];
        } else {
            r.out_shape.push_back(shape[d]);
        }
    }
    if (r.out_shape.empty()) r.out_shape.push_back(1);

    // Strides of the kept axes inside the output.
    std::vector<std::size_t> out_stride(shape.size(), 0);
    std::size_t s = 1;
    for (std::size_t d = shape.size(); d-- > 0;) {
        if (!reduced[d]) {
            out_stride[d] = s;
            s *= shape[d];
        }
    }
    const std::size_t n = shape_numel(shape);
    r.out_index.resize(n);
    std::vector<std::size_t> idx(shape.size(), 0);
    std::size_t o = 0;
    for (std::size_t i = 0; i < n; ++i) {
        r.out_index[i] = o;
        for (std::size_t d = shape.size(); d-- > 0;) {
            ++idx[d];
            o += out_stride[d];
            if (idx[d] < shape[d]) break;
            o -= out_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    return r;
}

void require_rank4(const Tensor& x, const char* name) {
    if (x.rank() != 4) throw ShapeError(std::string(name) + " expects [N,C,H,W], got " + shape_str(x.shape()));
}

void require_channel_vector(const Tensor& v, std::size_t channels, const char* name) {
    if (v.rank() != 1 || v.dim(0) != channels) {
        throw ShapeError(std::string(name) + ": channel axis 1 has " + std::to_string(channels) +
                         " channels but coefficient shape is " + shape_str(v.shape()));
    }
}

double clamp_prob(double p, double floor) { return std::clamp(p, floor, 1.0 - floor); }

}  // namespace

Var detach(Var x) { return x.tape->constant(x.value()); }

Var add(Var a, Var b) {
    return binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Var div(Var a, Var b) {
    if (checked_math()) {
        for (double v : b.value().data()) {
            if (v == 0.0) throw DomainError("div: division by zero");
        }
    }
    return binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Var add(Var a, double s) {
    return unary(a, map_unary(a.value(), [s](double x) { return x + s; }), [](double, double) { return 1.0; });
}

Var mul(Var a, double s) {
    return unary(a, map_unary(a.value(), [s](double x) { return x * s; }), [s](double, double) { return s; });
}

Var neg(Var a) { return mul(a, -1.0); }

Var exp(Var x) {
    return unary(x, map_unary(x.value(), [](double v) { return std::exp(v); }), [](double, double y) { return y; });
}

Var log(Var x) {
    if (checked_math()) {
        for (double v : x.value().data()) {
            if (!(v > 0.0)) throw DomainError("log: argument " + std::to_string(v) + " is not positive");
        }
    }
    return unary(x, map_unary(x.value(), [](double v) { return std::log(v); }),
                 [](double xv, double) { return 1.0 / xv; });
}

Var abs(Var x) {
    return unary(x, map_unary(x.value(), [](double v) { return std::abs(v); }),
                 [](double xv, double) { return xv > 0.0 ? 1.0 : (xv < 0.0 ? -1.0 : 0.0); });
}

Var relu(Var x) {
    return unary(x, map_unary(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }),
                 [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(Var x, double slope) {
    const double sign = testing::active_fault() == testing::Fault::flip_leaky_relu_grad ? -1.0 : 1.0;
    return unary(x, map_unary(x.value(), [slope](double v) { return v > 0.0 ? v : slope * v; }),
                 [slope, sign](double xv, double) { return sign * (xv > 0.0 ? 1.0 : slope); });
}

Var sigmoid(Var x) {
    return unary(x, map_unary(x.value(), [](double v) {
                     // Branch keeps exp() from overflowing for large |v|.
                     if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
                     const double e = std::exp(v);
                     return e / (1.0 + e);
                 }),
                 [](double, double y) { return y * (1.0 - y); });
}

Var sum(Var x, std::vector<std::size_t> axes) {
    Reduction plan = plan_reduction(x.shape(), std::move(axes));
    Tensor out(plan.out_shape);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < xv.size(); ++i) out[plan.out_index[i]] += xv[i];
    const Var parents[] = {x};
    return x.tape->record(std::move(out), parents, [x, plan = std::move(plan)](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_of(self);
        Tensor& dx = tape.grad_acc(x.id);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[plan.out_index[i]];
    });
}

Var mean(Var x, std::vector<std::size_t> axes) {
    Reduction plan = plan_reduction(x.shape(), axes);
    return mul(sum(x, std::move(axes)), 1.0 / static_cast<double>(plan.group));
}

Var var(Var x, std::vector<std::size_t> axes) {
    Reduction plan = plan_reduction(x.shape(), std::move(axes));
    const Tensor& xv = x.value();
    const double count = static_cast<double>(plan.group);
    std::vector<double> mu(shape_numel(plan.out_shape), 0.0);
    for (std::size_t i = 0; i < xv.size(); ++i) mu[plan.out_index[i]] += xv[i];
    for (double& m : mu) m /= count;
    Tensor out(plan.out_shape);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double d = xv[i] - mu[plan.out_index[i]];
        out[plan.out_index[i]] += d * d;
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= count;
    const Var parents[] = {x};
    return x.tape->record(std::move(out), parents,
                          [x, plan = std::move(plan), mu = std::move(mu), count](Tape& tape, std::size_t self) {
                              const Tensor& g = tape.grad_of(self);
                              const Tensor& xv = tape.value(x.id);
                              Tensor& dx = tape.grad_acc(x.id);
                              for (std::size_t i = 0; i < dx.size(); ++i) {
                                  const std::size_t o = plan.out_index[i];
                                  dx[i] += g[o] * 2.0 * (xv[i] - mu[o]) / count;
                              }
                          });
}

Var sum_all(Var x) {
    std::vector<std::size_t> axes(x.value().rank());
    std::iota(axes.begin(), axes.end(), 0);
    return sum(x, std::move(axes));
}

Var mean_all(Var x) { return mul(sum_all(x), 1.0 / static_cast<double>(x.value().size())); }

Var conv2d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad) {
    Tape& t = same_tape(input, kernel);
    same_tape(input, bias);
    Tensor out = kernels::conv2d_forward(input.value(), kernel.value(), bias.value(), stride, pad);
    const Var parents[] = {input, kernel, bias};
    return t.record(std::move(out), parents, [input, kernel, bias, stride, pad](Tape& tape, std::size_t self) {
        kernels::ConvGrads g = kernels::conv2d_backward(tape.value(input.id), tape.value(kernel.id),
                                                        tape.grad_of(self), stride, pad, tape.requires_grad(input));
        if (tape.requires_grad(input)) accumulate(tape.grad_acc(input.id), g.input);
        if (tape.requires_grad(kernel)) accumulate(tape.grad_acc(kernel.id), g.kernel);
        if (tape.requires_grad(bias)) accumulate(tape.grad_acc(bias.id), g.bias);
    });
}

Var maxpool2d(Var x, std::size_t k) {
    kernels::PoolResult r = kernels::maxpool2d_forward(x.value(), k);
    const Var parents[] = {x};
    return x.tape->record(std::move(r.out), parents, [x, argmax = std::move(r.argmax)](Tape& tape, std::size_t self) {
        accumulate(tape.grad_acc(x.id), kernels::maxpool2d_backward(tape.value(x.id).shape(), argmax, tape.grad_of(self)));
    });
}

Var avgpool2d(Var x, std::size_t k) {
    Tensor out = kernels::avgpool2d_forward(x.value(), k);
    const Var parents[] = {x};
    return x.tape->record(std::move(out), parents, [x, k](Tape& tape, std::size_t self) {
        accumulate(tape.grad_acc(x.id), kernels::avgpool2d_backward(tape.value(x.id).shape(), tape.grad_of(self), k));
    });
}

Var upsample_nearest(Var x, std::size_t k) {
    Tensor out = kernels::upsample_nearest_forward(x.value(), k);
    const Var parents[] = {x};
    return x.tape->record(std::move(out), parents, [x, k](Tape& tape, std::size_t self) {
        accumulate(tape.grad_acc(x.id),
                   kernels::upsample_nearest_backward(tape.value(x.id).shape(), tape.grad_of(self), k));
    });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    Tape& t = *parts[0].tape;
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat axis " + std::to_string(axis) + " out of range");
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const Var& p : parts) {
        same_tape(parts[0], p);
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(first));
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != first[d]) {
                throw ShapeError("concat: axis " + std::to_string(d) + " differs (" + std::to_string(s[d]) + " vs " +
                                 std::to_string(first[d]) + ")");
            }
        }
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

    Tensor out(out_shape);
    const std::size_t out_chunk = out_shape[axis] * inner;
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const Var& p : parts) {
        offsets.push_back(offset);
        const std::size_t chunk = p.shape()[axis] * inner;
        const Tensor& pv = p.value();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pv.ptr() + o * chunk, chunk, out.ptr() + o * out_chunk + offset);
        }
        offset += chunk;
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return t.record(std::move(out), parts,
                    [ps, offsets, outer, inner, axis, out_chunk](Tape& tape, std::size_t self) {
                        const Tensor& g = tape.grad_of(self);
                        for (std::size_t k = 0; k < ps.size(); ++k) {
                            if (!tape.requires_grad(ps[k])) continue;
                            Tensor& dp = tape.grad_acc(ps[k].id);
                            const std::size_t chunk = tape.value(ps[k].id).shape()[axis] * inner;
                            for (std::size_t o = 0; o < outer; ++o) {
                                const double* src = g.ptr() + o * out_chunk + offsets[k];
                                double* dst = dp.ptr() + o * chunk;
                                for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                            }
                        }
                    });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = x.shape();
    if (axis >= s.size()) throw ShapeError("slice axis " + std::to_string(axis) + " out of range");
    if (begin >= end || end > s[axis]) {
        throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                         std::to_string(axis) + " of extent " + std::to_string(s[axis]));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    Tensor out(out_shape);
    const std::size_t in_chunk = s[axis] * inner, out_chunk = (end - begin) * inner, off = begin * inner;
    const Tensor& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv.ptr() + o * in_chunk + off, out_chunk, out.ptr() + o * out_chunk);
    const Var parents[] = {x};
    return x.tape->record(std::move(out), parents, [x, outer, in_chunk, out_chunk, off](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_of(self);
        Tensor& dx = tape.grad_acc(x.id);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < out_chunk; ++i) dx[o * in_chunk + off + i] += g[o * out_chunk + i];
        }
    });
}

Var softmax_channels(Var logits) {
    const Tensor& x = logits.value();
    require_rank4(x, "softmax_channels");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (C < 2) throw ShapeError("softmax_channels needs at least 2 channels on axis 1");
    Tensor out(x.shape());
#pragma omp parallel for schedule(static) if (N * HW > kParallelThreshold)
    for (std::size_t p = 0; p < N * HW; ++p) {
        const std::size_t n = p / HW, i = p % HW;
        const std::size_t base = n * C * HW + i;
        double mx = x[base];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[base + c * HW]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double e = std::exp(x[base + c * HW] - mx);
            out[base + c * HW] = e;
            z += e;
        }
        for (std::size_t c = 0; c < C; ++c) out[base + c * HW] /= z;
    }
    const Var parents[] = {logits};
    return logits.tape->record(std::move(out), parents, [logits, N, C, HW](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_of(self);
        const Tensor& y = tape.value(self);
        Tensor& dx = tape.grad_acc(logits.id);
#pragma omp parallel for schedule(static) if (N * HW > kParallelThreshold)
        for (std::size_t p = 0; p < N * HW; ++p) {
            const std::size_t base = (p / HW) * C * HW + p % HW;
            double dot = 0.0;
            for (std::size_t c = 0; c < C; ++c) dot += g[base + c * HW] * y[base + c * HW];
            for (std::size_t c = 0; c < C; ++c) dx[base + c * HW] += y[base + c * HW] * (g[base + c * HW] - dot);
        }
    });
}

Var channel_affine(Var x, Var gamma, Var beta) {
    Tape& t = same_tape(x, gamma);
    same_tape(x, beta);
    const Tensor& xv = x.value();
    require_rank4(xv, "channel_affine");
    const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    require_channel_vector(gamma.value(), C, "channel_affine gamma");
    require_channel_vector(beta.value(), C, "channel_affine beta");
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    Tensor out(xv.shape());
#pragma omp parallel for schedule(static) if (N * C * HW > kParallelThreshold)
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const std::size_t c = nc % C;
        for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] = gv[c] * xv[nc * HW + i] + bv[c];
    }
    const Var parents[] = {x, gamma, beta};
    return t.record(std::move(out), parents, [x, gamma, beta, N, C, HW](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_of(self);
        const Tensor& xv = tape.value(x.id);
        const Tensor& gv = tape.value(gamma.id);
        if (tape.requires_grad(x)) {
            Tensor& dx = tape.grad_acc(x.id);
#pragma omp parallel for schedule(static) if (N * C * HW > kParallelThreshold)
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                const double s = gv[nc % C];
                for (std::size_t i = 0; i < HW; ++i) dx[nc * HW + i] += s * g[nc * HW + i];
            }
        }
        std::vector<double> dg(C, 0.0), db(C, 0.0);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            double sg = 0.0, sb = 0.0;
            for (std::size_t i = 0; i < HW; ++i) {
                sg += g[nc * HW + i] * xv[nc * HW + i];
                sb += g[nc * HW + i];
            }
            dg[nc % C] += sg;
            db[nc % C] += sb;
        }
        if (tape.requires_grad(gamma)) {
            Tensor& d = tape.grad_acc(gamma.id);
            for (std::size_t c = 0; c < C; ++c) d[c] += dg[c];
        }
        if (tape.requires_grad(beta)) {
            Tensor& d = tape.grad_acc(beta.id);
            for (std::size_t c = 0; c < C; ++c) d[c] += db[c];
        }
    });
}

Var channel_linear(Var x, std::span<const double> scale, std::span<const double> shift) {
    const Tensor& xv = x.value();
    require_rank4(xv, "channel_linear");
    const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    if (scale.size() != C || shift.size() != C) {
        throw ShapeError("channel_linear: channel axis 1 has " + std::to_string(C) + " channels, coefficients have " +
                         std::to_string(scale.size()) + "/" + std::to_string(shift.size()));
    }
    std::vector<double> sc(scale.begin(), scale.end());
    Tensor out(xv.shape());
#pragma omp parallel for schedule(static) if (N * C * HW > kParallelThreshold)
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const std::size_t c = nc % C;
        for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] = sc[c] * xv[nc * HW + i] + shift[c];
    }
    const Var parents[] = {x};
    return x.tape->record(std::move(out), parents, [x, sc = std::move(sc), N, C, HW](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_of(self);
        Tensor& dx = tape.grad_acc(x.id);
#pragma omp parallel for schedule(static) if (N * C * HW > kParallelThreshold)
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            const double s = sc[nc % C];
            for (std::size_t i = 0; i < HW; ++i) dx[nc * HW + i] += s * g[nc * HW + i];
        }
    });
}

Var batch_normalize(Var x, double eps, BatchStats* stats) {
    const Tensor& xv = x.value();
    require_rank4(xv, "batch_normalize");
    const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    if (N * HW < 2) throw ShapeError("batch_normalize needs at least 2 values per channel (N*H*W >= 2)");
    kernels::ChannelMoments m = kernels::channel_moments(xv);
    std::vector<double> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(m.var[c] + eps);
    Tensor out(xv.shape());
#pragma omp parallel for schedule(static) if (N * C * HW > kParallelThreshold)
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const std::size_t c = nc % C;
        for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] = (xv[nc * HW + i] - m.mean[c]) * inv_std[c];
    }
    if (stats) *stats = BatchStats{m.mean, m.var};
    const Var parents[] = {x};
    return x.tape->record(std::move(out), parents, [x, inv_std = std::move(inv_std), N, C, HW](Tape& tape, std::size_t self) {
        // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
        const Tensor& g = tape.grad_of(self);
        const Tensor& xhat = tape.value(self);
        Tensor& dx = tape.grad_acc(x.id);
        const double count = static_cast<double>(N * HW);
#pragma omp parallel for schedule(static) if (C > 1)
        for (std::size_t c = 0; c < C; ++c) {
            double sg = 0.0, sgx = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    sg += g[base + i];
                    sgx += g[base + i] * xhat[base + i];
                }
            }
            const double mg = sg / count, mgx = sgx / count;
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    dx[base + i] += inv_std[c] * (g[base + i] - mg - xhat[base + i] * mgx);
                }
            }
        }
    });
}

Var entropy_map(Var probs) {
    const Tensor& p = probs.value();
    require_rank4(p, "entropy_map");
    const std::size_t N = p.dim(0), C = p.dim(1), HW = p.dim(2) * p.dim(3);
    if (C < 2) throw ShapeError("entropy_map needs at least 2 classes on axis 1");
    const double norm = 1.0 / std::log(static_cast<double>(C));
    Tensor out(Shape{N, 1, p.dim(2), p.dim(3)});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
            double h = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const double v = p[(n * C + c) * HW + i];
                if (v > 0.0) h -= v * std::log(v);
            }
            out[n * HW + i] = h * norm;
        }
    }
    const Var parents[] = {probs};
    return probs.tape->record(std::move(out), parents, [probs, N, C, HW, norm](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_of(self);
        const Tensor& p = tape.value(probs.id);
        Tensor& dp = tape.grad_acc(probs.id);
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t i = 0; i < HW; ++i) {
                    const std::size_t k = (n * C + c) * HW + i;
                    dp[k] -= g[n * HW + i] * norm * (std::log(std::max(p[k], DBL_MIN)) + 1.0);
                }
            }
        }
    });
}

Var masked_mean(Var x, const Tensor& mask) {
    const Tensor& xv = x.value();
    if (mask.shape() != xv.shape()) {
        throw ShapeError("masked_mean: mask shape " + shape_str(mask.shape()) + " vs " + shape_str(xv.shape()));
    }
    double count = 0.0, s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        if (mask[i] != 0.0) {
            count += 1.0;
            s += xv[i];
        }
    }
    if (count == 0.0) throw std::invalid_argument("masked_mean: mask selects no pixels");
    const Var parents[] = {x};
    return x.tape->record(Tensor::scalar(s / count), parents, [x, mask, count](Tape& tape, std::size_t self) {
        const double g = tape.grad_of(self)[0] / count;
        Tensor& dx = tape.grad_acc(x.id);
        for (std::size_t i = 0; i < dx.size(); ++i) {
            if (mask[i] != 0.0) dx[i] += g;
        }
    });
}

Var masked_nll(Var probs, const Tensor& labels, const Tensor& mask, double floor) {
    const Tensor& p = probs.value();
    require_rank4(p, "masked_nll");
    const std::size_t N = p.dim(0), C = p.dim(1), HW = p.dim(2) * p.dim(3);
    const Shape pix{N, p.dim(2), p.dim(3)};
    if (labels.shape() != pix) throw ShapeError("masked_nll: labels shape " + shape_str(labels.shape()) + ", expected " + shape_str(pix));
    if (mask.shape() != pix) throw ShapeError("masked_nll: mask shape " + shape_str(mask.shape()) + ", expected " + shape_str(pix));
    std::vector<std::size_t> picked;  // flat index into probs per masked pixel
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
            if (mask[n * HW + i] == 0.0) continue;
            const auto cls = static_cast<std::size_t>(labels[n * HW + i]);
            if (cls >= C) throw std::invalid_argument("masked_nll: label " + std::to_string(cls) + " out of range");
            const std::size_t k = (n * C + cls) * HW + i;
            picked.push_back(k);
            s -= std::log(std::max(p[k], floor));
        }
    }
    if (picked.empty()) throw std::invalid_argument("masked_nll: mask selects no pixels");
    const double count = static_cast<double>(picked.size());
    const Var parents[] = {probs};
    return probs.tape->record(Tensor::scalar(s / count), parents,
                              [probs, picked = std::move(picked), count, floor](Tape& tape, std::size_t self) {
                                  const double g = tape.grad_of(self)[0] / count;
                                  const Tensor& p = tape.value(probs.id);
                                  Tensor& dp = tape.grad_acc(probs.id);
                                  for (std::size_t k : picked) {
                                      if (p[k] > floor) dp[k] -= g / p[k];
                                  }
                              });
}

Var mean_neg_log(Var s, double floor) {
    const Tensor& sv = s.value();
    double acc = 0.0;
    for (double v : sv.data()) acc -= std::log(clamp_prob(v, floor));
    const double n = static_cast<double>(sv.size());
    const Var parents[] = {s};
    return s.tape->record(Tensor::scalar(acc / n), parents, [s, n, floor](Tape& tape, std::size_t self) {
        const double g = tape.grad_of(self)[0] / n;
        const Tensor& sv = tape.value(s.id);
        Tensor& ds = tape.grad_acc(s.id);
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (sv[i] > floor && sv[i] < 1.0 - floor) ds[i] -= g / sv[i];
        }
    });
}

Var mean_neg_log1m(Var s, double floor) {
    const Tensor& sv = s.value();
    double acc = 0.0;
    for (double v : sv.data()) acc -= std::log(1.0 - clamp_prob(v, floor));
    const double n = static_cast<double>(sv.size());
    const Var parents[] = {s};
    return s.tape->record(Tensor::scalar(acc / n), parents, [s, n, floor](Tape& tape, std::size_t self) {
        const double g = tape.grad_of(self)[0] / n;
        const Tensor& sv = tape.value(s.id);
        Tensor& ds = tape.grad_acc(s.id);
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (sv[i] > floor && sv[i] < 1.0 - floor) ds[i] += g / (1.0 - sv[i]);
        }
    });
}

}  // namespace ops

}  // namespace tnseg
