#pragma once

#include <vector>

#include "aulab/tensor.hpp"

namespace aulab {

// Plain SGD: p -= lr * p.grad for every parameter.
void sgd_step(std::vector<Tensor>& params, double lr);

// Adam moment buffers, one pair per parameter, in parameter order.
// The step counter and both moment vectors are serialized with checkpoints
// so an interrupted training run resumes exactly.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step = 0;

    static AdamState init_for(const std::vector<Tensor>& params);
};

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

}  // namespace aulab
