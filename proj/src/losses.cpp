#include "tnseg/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace tnseg {

void LossWeights::validate() const {
    if (!(lambda_d >= 0.0) || !(lambda_ent >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
}

Var entropy_map(Var probs) { return ops::entropy_map(probs); }

Var discriminator_loss(Var score_src, Var score_tgt) {
    return ops::add(ops::mean_neg_log(score_src, kProbFloor), ops::mean_neg_log1m(score_tgt, kProbFloor));
}

Var supervised_ce(Var probs, const Tensor& labels, const Tensor& mask) {
    return ops::masked_nll(probs, labels, mask, kProbFloor);
}

Var adversarial_loss(Var score_tgt) { return ops::mean_neg_log(score_tgt, kProbFloor); }

Var minent_loss(Var entropy, const Tensor& mask) {
    return ops::masked_mean(entropy, mask.reshaped(entropy.shape()));
}

Var segmenter_objective(Var l_sup, std::optional<Var> l_adv, std::optional<Var> l_ent, const LossWeights& w) {
    w.validate();
    Var total = l_sup;
    if (l_adv && w.lambda_d != 0.0) total = ops::add(total, ops::mul(*l_adv, w.lambda_d));
    if (l_ent && w.lambda_ent != 0.0) total = ops::add(total, ops::mul(*l_ent, w.lambda_ent));
    return total;
}

}  // namespace tnseg
