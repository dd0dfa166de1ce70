#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "aulab/rng.hpp"

namespace aulab {

// Dense row-major tensor of doubles with an optional gradient buffer.
// Shapes are explicit; the only broadcasting anywhere is the row-wise bias
// add provided as its own op.
struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // same length as data iff requires_grad
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    size_t size() const { return impl_->data.size(); }
    int rows() const { return impl_->shape.at(0); }
    int cols() const { return impl_->shape.at(1); }
    bool is_scalar() const { return impl_->data.size() == 1; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& grad() { return impl_->grad; }
    const std::vector<double>& grad() const { return impl_->grad; }
    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag);

    double item() const;            // scalar tensors only
    double at(int r, int c) const { return impl_->data[static_cast<size_t>(r) * cols() + c]; }
    void zero_grad();

    // Deep copy of values (grad buffer reset to zeros when requires_grad).
    Tensor clone() const;

    bool all_finite() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Compute graph recorded define-by-run. Nodes are appended in execution
// order, which is a topological order by construction; backward() walks the
// tape once in reverse.
class Tape {
public:
    struct Node {
        std::string op;
        std::function<void()> backward;
    };

    void record(std::string op, std::function<void()> backward) {
        nodes_.push_back(Node{std::move(op), std::move(backward)});
    }
    size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

    // Seeds d(loss)/d(loss)=1 and accumulates gradients into every
    // requires_grad tensor reachable from the tape. Throws if loss is not a
    // scalar produced with gradient tracking.
    void backward(const Tensor& loss);

private:
    std::vector<Node> nodes_;
};

// --- primitive ops -------------------------------------------------------
//
// Every op takes the tape first; passing nullptr runs forward-only (no node
// recorded, outputs carry requires_grad=false). All ops validate shapes and
// throw std::invalid_argument on mismatch.

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(Tape* tape, const Tensor& x, double c);
Tensor add_const(Tape* tape, const Tensor& x, double c);

// y[m x n] = x[m x n] + bias[n] broadcast over rows.
Tensor add_rowwise(Tape* tape, const Tensor& x, const Tensor& bias);

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
// a[m x k] * transpose(b[n x k]) -> [m x n]
Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b);

Tensor slice_cols(Tape* tape, const Tensor& x, int c0, int c1);
Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts);
Tensor slice_rows(Tape* tape, const Tensor& x, int r0, int r1);

// rows of table indexed by ids -> [ids.size() x d]
Tensor embedding(Tape* tape, const Tensor& table, const std::vector<int>& ids);

Tensor relu(Tape* tape, const Tensor& x);
Tensor softplus(Tape* tape, const Tensor& x);
Tensor sigmoid(Tape* tape, const Tensor& x);

// Row-stabilized softmax; rows sum to 1 within 1e-12 for finite input.
Tensor softmax_rows(Tape* tape, const Tensor& x);

// Replaces entries above the diagonal with a large negative constant so
// softmax_rows yields an exactly causal attention pattern.
Tensor causal_mask(Tape* tape, const Tensor& scores);

// Per-vector normalization over the last dimension d, then affine.
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Inverted dropout: zero with probability rate, scale survivors by
// 1/(1-rate). rate==0 is the identity (no node, no rng draw). rate==1 zeroes
// everything. The mask is drawn from rng elementwise in row-major order.
Tensor dropout(Tape* tape, const Tensor& x, double rate, Rng& rng);

enum class Reduction { Mean, Sum };

// Mean (or sum) negative log-probability of targets under softmax(logits).
Tensor cross_entropy_logits(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                            Reduction reduction = Reduction::Mean);

// Same, restricted to rows where mask[row] != 0. Throws if mask selects
// nothing.
Tensor masked_cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask,
                            Reduction reduction = Reduction::Mean);

// mean over i of softplus(z_i) - y_i * z_i  (binary cross-entropy on logits)
Tensor bce_with_logits(Tape* tape, const Tensor& z, const std::vector<double>& y);

Tensor sum(Tape* tape, const Tensor& x);
Tensor mean(Tape* tape, const Tensor& x);
Tensor sum_squares(Tape* tape, const Tensor& x);

}  // namespace aulab
