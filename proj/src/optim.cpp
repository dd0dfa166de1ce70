#include "aulab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace aulab {

void sgd_step(std::vector<Tensor>& params, double lr) {
    if (lr == 0.0) return;
    for (Tensor& p : params) {
        if (!p.requires_grad()) throw std::invalid_argument("sgd_step: parameter has no grad slot");
        for (size_t i = 0; i < p.size(); ++i) p.data()[i] -= lr * p.grad()[i];
    }
}

AdamState AdamState::init_for(const std::vector<Tensor>& params) {
    AdamState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor& p : params) {
        s.m.emplace_back(p.size(), 0.0);
        s.v.emplace_back(p.size(), 0.0);
    }
    return s;
}

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw std::invalid_argument("adam_step: state does not match parameter list");
    ++state.step;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k];
        if (!p.requires_grad()) throw std::invalid_argument("adam_step: parameter has no grad slot");
        if (state.m[k].size() != p.size())
            throw std::invalid_argument("adam_step: state shape mismatch");
        if (lr == 0.0) {
            // Moments still advance so a zero-lr step is a pure bookkeeping
            // step, but parameters stay bit-identical.
            for (size_t i = 0; i < p.size(); ++i) {
                double g = p.grad()[i];
                state.m[k][i] = beta1 * state.m[k][i] + (1.0 - beta1) * g;
                state.v[k][i] = beta2 * state.v[k][i] + (1.0 - beta2) * g * g;
            }
            continue;
        }
        for (size_t i = 0; i < p.size(); ++i) {
            double g = p.grad()[i];
            state.m[k][i] = beta1 * state.m[k][i] + (1.0 - beta1) * g;
            state.v[k][i] = beta2 * state.v[k][i] + (1.0 - beta2) * g * g;
            double mhat = state.m[k][i] / bc1;
            double vhat = state.v[k][i] / bc2;
            p.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

}  // namespace aulab
