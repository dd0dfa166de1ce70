#pragma once

// Randomized finite-difference sweep across every autodiff primitive.
// Shared by the unit tests and the acceptance suite.

#include <string>
#include <vector>

#include "aulab/rng.hpp"
#include "aulab/tensor.hpp"
#include "fd_check.hpp"

namespace aulab::testing {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scl = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.data()) v = rng.normal() * scl;
    return t;
}

struct FdCaseResult {
    std::string op;
    double rel_error;
};

// Runs n_cases randomized checks, cycling through the primitive list with
// random small shapes (at most 64 elements per tensor).
inline std::vector<FdCaseResult> run_random_fd_cases(int n_cases, uint64_t seed) {
    std::vector<FdCaseResult> results;
    Rng shapes(seed);
    for (int case_idx = 0; case_idx < n_cases; ++case_idx) {
        int m = 1 + static_cast<int>(shapes.uniform_int(6));
        int k = 2 + static_cast<int>(shapes.uniform_int(5));
        int n = 1 + static_cast<int>(shapes.uniform_int(6));
        uint64_t data_seed = shapes.next_u64();
        uint64_t mask_seed = shapes.next_u64();
        Rng data(data_seed);

        auto sum_of = [](Tape* tape, const Tensor& t) { return sum(tape, t); };
        int which = case_idx % 16;
        switch (which) {
            case 0: {  // matmul
                std::vector<Tensor> in{random_tensor({m, k}, data), random_tensor({k, n}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    return sum_of(tp, matmul(tp, v[0], v[1]));
                });
                results.push_back({"matmul", e});
                break;
            }
            case 1: {  // matmul_nt
                std::vector<Tensor> in{random_tensor({m, k}, data), random_tensor({n, k}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    return sum_of(tp, matmul_nt(tp, v[0], v[1]));
                });
                results.push_back({"matmul_nt", e});
                break;
            }
            case 2: {  // softmax_rows, weighted so every row entry matters
                std::vector<Tensor> in{random_tensor({m, k}, data)};
                Tensor w = random_tensor({m, k}, data);
                w.set_requires_grad(false);
                double e = max_rel_error(in, [&, w](Tape* tp, std::vector<Tensor>& v) {
                    return sum_of(tp, mul(tp, softmax_rows(tp, v[0]), w));
                });
                results.push_back({"softmax_rows", e});
                break;
            }
            case 3: {  // layer_norm
                std::vector<Tensor> in{random_tensor({m, k}, data), random_tensor({k}, data),
                                       random_tensor({k}, data)};
                Tensor w = random_tensor({m, k}, data);
                w.set_requires_grad(false);
                double e = max_rel_error(in, [&, w](Tape* tp, std::vector<Tensor>& v) {
                    return sum_of(tp, mul(tp, layer_norm(tp, v[0], v[1], v[2]), w));
                });
                results.push_back({"layer_norm", e});
                break;
            }
            case 4: {  // cross_entropy_logits
                Rng tr(mask_seed);
                std::vector<int> targets(m);
                for (int& t : targets) t = static_cast<int>(tr.uniform_int(k));
                std::vector<Tensor> in{random_tensor({m, k}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    return cross_entropy_logits(tp, v[0], targets);
                });
                results.push_back({"cross_entropy", e});
                break;
            }
            case 5: {  // masked_cross_entropy
                Rng tr(mask_seed);
                std::vector<int> targets(m);
                std::vector<uint8_t> mask(m);
                for (int& t : targets) t = static_cast<int>(tr.uniform_int(k));
                for (auto& b : mask) b = tr.bernoulli(0.5) ? 1 : 0;
                mask[0] = 1;
                std::vector<Tensor> in{random_tensor({m, k}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    return masked_cross_entropy(tp, v[0], targets, mask);
                });
                results.push_back({"masked_cross_entropy", e});
                break;
            }
            case 6: {  // relu (inputs nudged away from the kink)
                std::vector<Tensor> in{random_tensor({m, k}, data)};
                for (double& v : in[0].data())
                    if (std::fabs(v) < 1e-3) v += 0.1;
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    return sum_of(tp, relu(tp, v[0]));
                });
                results.push_back({"relu", e});
                break;
            }
            case 7: {  // softplus + sigmoid chain
                std::vector<Tensor> in{random_tensor({m, k}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    return sum_of(tp, softplus(tp, sigmoid(tp, v[0])));
                });
                results.push_back({"softplus_sigmoid", e});
                break;
            }
            case 8: {  // add / sub / mul / scale / add_const mix
                std::vector<Tensor> in{random_tensor({m, k}, data), random_tensor({m, k}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    Tensor a = add(tp, v[0], v[1]);
                    Tensor b = mul(tp, sub(tp, v[0], v[1]), v[1]);
                    return sum_of(tp, add(tp, scale(tp, a, 0.5), add_const(tp, b, 1.25)));
                });
                results.push_back({"elementwise_mix", e});
                break;
            }
            case 9: {  // add_rowwise
                std::vector<Tensor> in{random_tensor({m, k}, data), random_tensor({k}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    return sum_of(tp, add_rowwise(tp, v[0], v[1]));
                });
                results.push_back({"add_rowwise", e});
                break;
            }
            case 10: {  // slice_cols + concat_cols
                int kk = std::max(2, k);
                std::vector<Tensor> in{random_tensor({m, kk}, data)};
                double e = max_rel_error(in, [&, kk](Tape* tp, std::vector<Tensor>& v) {
                    Tensor left = slice_cols(tp, v[0], 0, kk / 2);
                    Tensor right = slice_cols(tp, v[0], kk / 2, kk);
                    Tensor joined = concat_cols(tp, {right, left});
                    return sum_squares(tp, joined);
                });
                results.push_back({"slice_concat_cols", e});
                break;
            }
            case 11: {  // slice_rows
                int mm = std::max(2, m);
                std::vector<Tensor> in{random_tensor({mm, k}, data)};
                double e = max_rel_error(in, [&, mm](Tape* tp, std::vector<Tensor>& v) {
                    return sum_squares(tp, slice_rows(tp, v[0], mm / 2, mm));
                });
                results.push_back({"slice_rows", e});
                break;
            }
            case 12: {  // embedding
                Rng ir(mask_seed);
                std::vector<int> ids(m);
                for (int& id : ids) id = static_cast<int>(ir.uniform_int(k));
                std::vector<Tensor> in{random_tensor({k, n}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    return sum_squares(tp, embedding(tp, v[0], ids));
                });
                results.push_back({"embedding", e});
                break;
            }
            case 13: {  // causal_mask + softmax attention core
                int s = std::max(2, m);
                std::vector<Tensor> in{random_tensor({s, k}, data), random_tensor({s, k}, data),
                                       random_tensor({s, k}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    Tensor scores = scale(tp, matmul_nt(tp, v[0], v[1]), 0.5);
                    Tensor probs = softmax_rows(tp, causal_mask(tp, scores));
                    return sum_squares(tp, matmul(tp, probs, v[2]));
                });
                results.push_back({"attention_core", e});
                break;
            }
            case 14: {  // dropout with a fixed mask (rng reseeded per probe)
                std::vector<Tensor> in{random_tensor({m, k}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    Rng mask_rng(mask_seed);
                    return sum_squares(tp, dropout(tp, v[0], 0.4, mask_rng));
                });
                results.push_back({"dropout", e});
                break;
            }
            default: {  // bce_with_logits on a linear score
                Rng yr(mask_seed);
                std::vector<double> y(static_cast<size_t>(m));
                for (double& t : y) t = yr.bernoulli(0.5) ? 1.0 : 0.0;
                std::vector<Tensor> in{random_tensor({m, k}, data), random_tensor({k, 1}, data)};
                double e = max_rel_error(in, [&](Tape* tp, std::vector<Tensor>& v) {
                    return bce_with_logits(tp, matmul(tp, v[0], v[1]), y);
                });
                results.push_back({"bce_with_logits", e});
                break;
            }
        }
    }
    return results;
}

}  // namespace aulab::testing
