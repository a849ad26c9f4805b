#pragma once

#include <optional>

#include "tnseg/autograd.hpp"

namespace tnseg {

/// Probabilities are clamped to [kProbFloor, 1 - kProbFloor] before every log.
inline constexpr double kProbFloor = 1e-7;

struct LossWeights {
    double lambda_d = 1e-3;
    double lambda_ent = 0.0;

    void validate() const;
};

/// Per-pixel entropy of [N,C,H,W] probabilities normalized by log C, giving [N,1,H,W] in [0,1].
Var entropy_map(Var probs);

/// -mean(log D(I_s)) - mean(log(1 - D(I_t))); D is the probability of "source".
Var discriminator_loss(Var score_src, Var score_tgt);

/// Mean over masked pixels of -log P[label]. labels and mask are [N,H,W].
Var supervised_ce(Var probs, const Tensor& labels, const Tensor& mask);

/// -mean(log D(I_t)) on live target entropy maps.
Var adversarial_loss(Var score_tgt);

/// Mean entropy over masked pixels. mask is [N,H,W] or [N,1,H,W].
Var minent_loss(Var entropy, const Tensor& mask);

/// L_sup + lambda_d * L_adv + lambda_ent * L_ent; absent terms count as zero.
Var segmenter_objective(Var l_sup, std::optional<Var> l_adv, std::optional<Var> l_ent, const LossWeights& w);

}  // namespace tnseg
