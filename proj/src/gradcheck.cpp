#include "tnseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tnseg {

namespace {

double evaluate(const std::function<Var(Tape&)>& f) {
    Tape tape;
    return f(tape).value().item();
}

}  // namespace

double grad_check(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params, double h) {
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        Var loss = f(tape);
        tape.backward(loss);
    }
    double worst = 0.0;
    for (Parameter* p : params) {
        const Tensor analytic = p->grad.empty() ? Tensor::zeros_like(p->value) : p->grad;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + h;
            const double up = evaluate(f);
            p->value[i] = orig - h;
            const double down = evaluate(f);
            p->value[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[i];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

double grad_check(const std::function<Var(Tape&, std::span<const Var>)>& f, std::vector<Tensor> inputs, double h) {
    std::vector<Parameter> params(inputs.size());
    std::vector<Parameter*> ptrs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        params[i].name = "input" + std::to_string(i);
        params[i].value = std::move(inputs[i]);
        ptrs.push_back(&params[i]);
    }
    auto wrapped = [&](Tape& tape) {
        std::vector<Var> leaves;
        for (Parameter& p : params) leaves.push_back(tape.parameter(p));
        return f(tape, leaves);
    };
    return grad_check(wrapped, ptrs, h);
}

}  // namespace tnseg
