#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tnseg/tensor.hpp"

namespace tnseg {

enum class ParamRole { weight, bias, norm_affine, buffer };

/// A named network tensor. Buffers (running statistics, channel weights) never receive gradients.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    ParamRole role = ParamRole::weight;

    bool trainable() const { return role != ParamRole::buffer; }
    void zero_grad() { grad = Tensor(); }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// Single-writer record of forward operations. One training step builds and consumes one tape.
class Tape {
   public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// Leaf whose gradient is owned by the tape and read back with grad().
    Var variable(Tensor value);
    /// Leaf that accumulates its gradient into `p.grad` on backward().
    Var parameter(Parameter& p);

    Var record(Tensor value, std::span<const Var> parents, Backward fn);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient of the last backward() w.r.t. `v`; zeros if `v` was not reached.
    Tensor grad(Var v) const;

    /// Gradient flowing into node `id` during backward().
    const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
    /// Accumulation target for node `id`, allocated on first use.
    Tensor& grad_acc(std::size_t id);

    /// Reverse sweep from a scalar loss. Parameter and variable leaves accumulate across calls.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

   private:
    struct Node {
        Tensor value;
        Tensor grad;
        Backward backward;
        bool requires_grad = false;
        Tensor* sink = nullptr;
        std::unique_ptr<Tensor> owned_sink;
    };
    std::vector<Node> nodes_;
};

/// Checked math: log of non-positive values and division by zero throw DomainError.
void set_checked_math(bool on);
bool checked_math();

class CheckedMathScope {
   public:
    explicit CheckedMathScope(bool on) : previous_(checked_math()) { set_checked_math(on); }
    ~CheckedMathScope() { set_checked_math(previous_); }
    CheckedMathScope(const CheckedMathScope&) = delete;
    CheckedMathScope& operator=(const CheckedMathScope&) = delete;

   private:
    bool previous_;
};

namespace testing {
/// Deliberate backward-rule faults for verifying that the gradient checker catches them.
enum class Fault { none, flip_leaky_relu_grad };
void inject_fault(Fault f);
Fault active_fault();
}  // namespace testing

namespace ops {

Var detach(Var x);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add(Var a, double s);
Var mul(Var a, double s);
Var neg(Var a);

Var exp(Var x);
Var log(Var x);
Var abs(Var x);
Var relu(Var x);
Var leaky_relu(Var x, double slope);
Var sigmoid(Var x);

/// Reductions drop the reduced axes; reducing every axis yields shape [1].
Var sum(Var x, std::vector<std::size_t> axes);
Var mean(Var x, std::vector<std::size_t> axes);
/// Biased (population) variance.
Var var(Var x, std::vector<std::size_t> axes);
Var sum_all(Var x);
Var mean_all(Var x);

Var conv2d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad);
Var maxpool2d(Var x, std::size_t k = 2);
Var avgpool2d(Var x, std::size_t k = 2);
Var upsample_nearest(Var x, std::size_t k = 2);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);

/// Softmax over axis 1 of [N,C,H,W], max-subtracted.
Var softmax_channels(Var logits);

/// y[n,c,h,w] = gamma[c] * x[n,c,h,w] + beta[c]
Var channel_affine(Var x, Var gamma, Var beta);
/// y[n,c,h,w] = scale[c] * x[n,c,h,w] + shift[c] with constant coefficients.
Var channel_linear(Var x, std::span<const double> scale, std::span<const double> shift);

struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;
};
/// (x - E[x]) / sqrt(Var[x] + eps) per channel over (N,H,W); writes the batch statistics to `stats`.
Var batch_normalize(Var x, double eps, BatchStats* stats = nullptr);

/// Normalized Shannon entropy over axis 1: [N,C,H,W] -> [N,1,H,W], with 0 log 0 = 0.
Var entropy_map(Var probs);

/// Mean of x over positions where mask != 0. `mask` has x's shape.
Var masked_mean(Var x, const Tensor& mask);
/// Mean over masked pixels of -log(max(P[n, y, h, w], floor)). labels/mask are [N,H,W].
Var masked_nll(Var probs, const Tensor& labels, const Tensor& mask, double floor);
/// -mean(log(clamp(s))) and -mean(log(1 - clamp(s))) with clamp to [floor, 1 - floor].
Var mean_neg_log(Var s, double floor);
Var mean_neg_log1m(Var s, double floor);

}  // namespace ops

}  // namespace tnseg
