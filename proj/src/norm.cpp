#include "tnseg/norm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tnseg {

namespace {

Parameter make_param(std::string name, std::size_t channels, double fill, ParamRole role) {
    return Parameter{std::move(name), Tensor(Shape{channels}, fill), Tensor(), role};
}

void update_running(BnState& s, const ops::BatchStats& batch) {
    const double m = s.momentum;
    for (std::size_t c = 0; c < s.channels(); ++c) {
        s.running_mean.value[c] = (1.0 - m) * s.running_mean.value[c] + m * batch.mean[c];
        s.running_var.value[c] = (1.0 - m) * s.running_var.value[c] + m * batch.var[c];
    }
}

ChannelStats running_stats(const BnState& s) {
    const auto& rm = s.running_mean.value;
    const auto& rv = s.running_var.value;
    return ChannelStats{{rm.data().begin(), rm.data().end()}, {rv.data().begin(), rv.data().end()}};
}

Var normalize_with_running(Var x, const BnState& s) {
    const std::size_t C = s.channels();
    std::vector<double> scale(C), shift(C);
    for (std::size_t c = 0; c < C; ++c) {
        scale[c] = 1.0 / std::sqrt(s.running_var.value[c] + s.eps);
        shift[c] = -s.running_mean.value[c] * scale[c];
    }
    return ops::channel_linear(x, scale, shift);
}

void check_channels(Var x, const BnState& s, const char* who) {
    if (x.value().rank() != 4) throw ShapeError(std::string(who) + " expects [N,M,H,W], got " + shape_str(x.shape()));
    if (x.value().dim(1) != s.channels()) {
        throw ShapeError(std::string(who) + ": channel axis 1 has " + std::to_string(x.value().dim(1)) +
                         " channels, layer has " + std::to_string(s.channels()));
    }
}

// Normalize + affine for one domain route.
Var route(Var x, BnState& s, Mode mode, ops::BatchStats* stats) {
    Tape& tape = *x.tape;
    Var xhat = mode == Mode::train ? ops::batch_normalize(x, s.eps, stats) : normalize_with_running(x, s);
    return ops::channel_affine(xhat, tape.parameter(s.gamma), tape.parameter(s.beta));
}

}  // namespace

BnState BnState::create(const std::string& prefix, std::size_t channels, double momentum, double eps) {
    if (!(momentum > 0.0 && momentum <= 1.0)) throw std::invalid_argument("momentum must be in (0,1]");
    if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
    return BnState{make_param(prefix + ".gamma", channels, 1.0, ParamRole::norm_affine),
                   make_param(prefix + ".beta", channels, 0.0, ParamRole::norm_affine),
                   make_param(prefix + ".running_mean", channels, 0.0, ParamRole::buffer),
                   make_param(prefix + ".running_var", channels, 1.0, ParamRole::buffer),
                   momentum,
                   eps};
}

void BnState::collect(std::vector<Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
    out.push_back(&running_mean);
    out.push_back(&running_var);
}

Var bn_forward(Var x, BnState& state, Mode mode) {
    check_channels(x, state, "bn_forward");
    if (mode == Mode::eval) return route(x, state, mode, nullptr);
    ops::BatchStats stats;
    Var out = route(x, state, mode, &stats);
    update_running(state, stats);
    return out;
}

std::string to_string(DistanceKind k) {
    switch (k) {
        case DistanceKind::mean: return "mean";
        case DistanceKind::wasserstein: return "wasserstein";
        case DistanceKind::normalized_mean: return "normalized_mean";
    }
    return "?";
}

std::string to_string(ProbKind k) {
    switch (k) {
        case ProbKind::softmax: return "softmax";
        case ProbKind::gaussian: return "gaussian";
        case ProbKind::student_t: return "student_t";
    }
    return "?";
}

DistanceKind parse_distance_kind(const std::string& s) {
    if (s == "mean") return DistanceKind::mean;
    if (s == "wasserstein") return DistanceKind::wasserstein;
    if (s == "normalized_mean") return DistanceKind::normalized_mean;
    throw std::invalid_argument("unknown distance kind '" + s + "'");
}

ProbKind parse_prob_kind(const std::string& s) {
    if (s == "softmax") return ProbKind::softmax;
    if (s == "gaussian") return ProbKind::gaussian;
    if (s == "student_t") return ProbKind::student_t;
    throw std::invalid_argument("unknown probability kind '" + s + "'");
}

std::vector<double> channel_distance(const ChannelStats& src, const ChannelStats& tgt, DistanceKind kind, double eps) {
    const std::size_t M = src.mean.size();
    if (src.var.size() != M || tgt.mean.size() != M || tgt.var.size() != M) {
        throw ShapeError("channel_distance: statistics of different channel counts");
    }
    std::vector<double> d(M);
    for (std::size_t m = 0; m < M; ++m) {
        const double es = src.mean[m], et = tgt.mean[m], vs = src.var[m], vt = tgt.var[m];
        switch (kind) {
            case DistanceKind::normalized_mean:
                d[m] = std::abs(es / std::sqrt(vs + eps) - et / std::sqrt(vt + eps));
                break;
            case DistanceKind::mean:
                d[m] = std::abs(es - et);
                break;
            case DistanceKind::wasserstein:
                // Printed as Vs^2 + Vt^2 - 2 Vs Vt; the factored form cannot round below zero.
                d[m] = (es - et) * (es - et) + (vs - vt) * (vs - vt);
                break;
        }
    }
    return d;
}

std::vector<double> channel_probability(std::span<const double> d, ProbKind kind) {
    const std::size_t M = d.size();
    if (M == 0) throw ShapeError("channel_probability on zero channels");
    const double dmin = *std::min_element(d.begin(), d.end());
    std::vector<double> k(M);
    for (std::size_t m = 0; m < M; ++m) {
        switch (kind) {
            case ProbKind::student_t:
                k[m] = 1.0 / (1.0 + d[m]);
                break;
            case ProbKind::gaussian:
                // Shifting by the smallest distance cancels in the normalization and avoids underflow.
                k[m] = std::exp(-(d[m] * d[m] - dmin * dmin));
                break;
            case ProbKind::softmax:
                k[m] = std::exp(-(d[m] - dmin));
                break;
        }
    }
    const double total = std::accumulate(k.begin(), k.end(), 0.0);
    std::vector<double> eta(M);
    for (std::size_t m = 0; m < M; ++m) eta[m] = static_cast<double>(M) * k[m] / total;
    return eta;
}

TnState TnState::create(const std::string& prefix, std::size_t channels, DistanceKind distance, ProbKind prob,
                        double momentum, double eps) {
    return TnState{BnState::create(prefix + ".src", channels, momentum, eps),
                   BnState::create(prefix + ".tgt", channels, momentum, eps),
                   distance,
                   prob,
                   make_param(prefix + ".last_eta", channels, 1.0, ParamRole::buffer),
                   make_param(prefix + ".last_d", channels, 0.0, ParamRole::buffer),
                   false};
}

void TnState::collect(std::vector<Parameter*>& out) {
    src.collect(out);
    tgt.collect(out);
    out.push_back(&last_eta);
    out.push_back(&last_d);
}

TnOutput tn_forward(std::optional<Var> x_src, std::optional<Var> x_tgt, TnState& state, Mode mode) {
    if (!x_src && !x_tgt) throw std::invalid_argument("tn_forward: both domains absent");
    if (mode == Mode::train && (!x_src || !x_tgt)) {
        throw std::invalid_argument("tn_forward: train mode needs both source and target sub-batches");
    }
    if (x_src) check_channels(*x_src, state.src, "tn_forward (source)");
    if (x_tgt) check_channels(*x_tgt, state.tgt, "tn_forward (target)");
    const std::size_t M = state.channels();

    TnOutput out;
    std::vector<double> eta;
    if (mode == Mode::train) {
        ops::BatchStats bs, bt;
        Var os = route(*x_src, state.src, mode, &bs);
        Var ot = route(*x_tgt, state.tgt, mode, &bt);
        if (state.eta_frozen) {
            eta.assign(state.last_eta.value.data().begin(), state.last_eta.value.data().end());
        } else {
            const std::vector<double> d = channel_distance(ChannelStats{bs.mean, bs.var}, ChannelStats{bt.mean, bt.var},
                                                           state.distance, state.src.eps);
            eta = channel_probability(d, state.prob);
            std::copy(d.begin(), d.end(), state.last_d.value.data().begin());
            std::copy(eta.begin(), eta.end(), state.last_eta.value.data().begin());
        }
        update_running(state.src, bs);
        update_running(state.tgt, bt);
        out.src = os;
        out.tgt = ot;
    } else {
        if (state.eta_frozen) {
            eta.assign(state.last_eta.value.data().begin(), state.last_eta.value.data().end());
        } else {
            const std::vector<double> d =
                channel_distance(running_stats(state.src), running_stats(state.tgt), state.distance, state.src.eps);
            eta = channel_probability(d, state.prob);
        }
        if (x_src) out.src = route(*x_src, state.src, mode, nullptr);
        if (x_tgt) out.tgt = route(*x_tgt, state.tgt, mode, nullptr);
    }

    const double total = std::accumulate(eta.begin(), eta.end(), 0.0);
    if (std::abs(total - static_cast<double>(M)) > 1e-9) {
        throw std::logic_error("channel weights sum to " + std::to_string(total) + ", expected " + std::to_string(M));
    }
    std::vector<double> scale(M), zero(M, 0.0);
    for (std::size_t m = 0; m < M; ++m) scale[m] = 1.0 + eta[m];
    if (out.src) out.src = ops::channel_linear(*out.src, scale, zero);
    if (out.tgt) out.tgt = ops::channel_linear(*out.tgt, scale, zero);
    return out;
}

}  // namespace tnseg
