#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tnseg/autograd.hpp"

namespace tnseg {

enum class Mode { train, eval };

/// Affine parameters and running statistics of one normalization route.
struct BnState {
    Parameter gamma;
    Parameter beta;
    Parameter running_mean;
    Parameter running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    /// gamma = 1, beta = 0, running mean 0, running var 1. Tensor names are `<prefix>.gamma` etc.
    static BnState create(const std::string& prefix, std::size_t channels, double momentum = 0.1, double eps = 1e-5);

    std::size_t channels() const { return gamma.value.size(); }
    void collect(std::vector<Parameter*>& out);
};

/// Batch normalization over (N,H,W) per channel. Train mode updates the running statistics as
/// running <- (1 - momentum) * running + momentum * batch (biased variance).
Var bn_forward(Var x, BnState& state, Mode mode);

enum class DistanceKind { mean, wasserstein, normalized_mean };
enum class ProbKind { softmax, gaussian, student_t };

std::string to_string(DistanceKind k);
std::string to_string(ProbKind k);
DistanceKind parse_distance_kind(const std::string& s);
ProbKind parse_prob_kind(const std::string& s);

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> var;
};

/// Per-channel distance between source and target statistics.
///   normalized_mean: |E_s / sqrt(V_s + eps) - E_t / sqrt(V_t + eps)|
///   mean:            |E_s - E_t|
///   wasserstein:     (E_s - E_t)^2 + (V_s^2 + V_t^2 - 2 V_s V_t)
std::vector<double> channel_distance(const ChannelStats& src, const ChannelStats& tgt, DistanceKind kind, double eps);

/// Converts distances to channel weights that sum to M. Kernels: student_t 1/(1+d),
/// gaussian exp(-d^2), softmax exp(-d).
std::vector<double> channel_probability(std::span<const double> d, ProbKind kind);

/// Transfer normalization: separate statistics and affine per domain, channels reweighted by
/// (1 + eta) where eta comes from the cross-domain distance of the statistics.
struct TnState {
    BnState src;
    BnState tgt;
    DistanceKind distance = DistanceKind::normalized_mean;
    ProbKind prob = ProbKind::student_t;
    Parameter last_eta;
    Parameter last_d;
    /// Use last_eta instead of recomputing it (gradient checks hold eta fixed this way).
    bool eta_frozen = false;

    static TnState create(const std::string& prefix, std::size_t channels,
                          DistanceKind distance = DistanceKind::normalized_mean, ProbKind prob = ProbKind::student_t,
                          double momentum = 0.1, double eps = 1e-5);

    std::size_t channels() const { return src.channels(); }
    void collect(std::vector<Parameter*>& out);
};

struct TnOutput {
    std::optional<Var> src;
    std::optional<Var> tgt;
};

/// Train mode needs both domains and computes eta from the batch statistics; eval mode normalizes
/// each present domain with its own running statistics and derives eta from the running statistics.
/// Eta is a constant of the forward pass: no gradient flows through it.
TnOutput tn_forward(std::optional<Var> x_src, std::optional<Var> x_tgt, TnState& state, Mode mode);

}  // namespace tnseg
