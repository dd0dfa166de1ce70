#include "aulab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace aulab {

namespace {

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape");
        n *= static_cast<size_t>(d);
    }
    return n;
}

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Output of an op: requires_grad iff we are recording and any input needs it.
Tensor make_output(Tape* tape, std::vector<int> shape, bool any_input_grad) {
    return Tensor::zeros(std::move(shape), tape != nullptr && any_input_grad);
}

bool tracked(Tape* tape, const Tensor& t) { return tape != nullptr && t.requires_grad(); }

}  // namespace

// --- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    size_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(n, 0.0);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(n, 0.0);
    return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw std::invalid_argument("data length does not match shape");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

void Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    if (flag) {
        impl_->grad.assign(impl_->data.size(), 0.0);
    } else {
        impl_->grad.clear();
    }
}

double Tensor::item() const {
    if (impl_->data.size() != 1) throw std::invalid_argument("item() on non-scalar tensor");
    return impl_->data[0];
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    return from(impl_->shape, impl_->data, impl_->requires_grad);
}

bool Tensor::all_finite() const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

// --- Tape -----------------------------------------------------------------

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || !loss.is_scalar())
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    if (!loss.requires_grad())
        throw std::invalid_argument("backward: loss does not track gradients");
    loss.impl()->grad.assign(1, 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

// --- elementwise ----------------------------------------------------------

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shape mismatch");
    bool track = tracked(tape, a) || tracked(tape, b);
    Tensor out = make_output(tape, a.shape(), track);
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record("add", [ai, bi, oi] {
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                if (ai->requires_grad) ai->grad[i] += oi->grad[i];
                if (bi->requires_grad) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch");
    bool track = tracked(tape, a) || tracked(tape, b);
    Tensor out = make_output(tape, a.shape(), track);
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record("sub", [ai, bi, oi] {
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                if (ai->requires_grad) ai->grad[i] += oi->grad[i];
                if (bi->requires_grad) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch");
    bool track = tracked(tape, a) || tracked(tape, b);
    Tensor out = make_output(tape, a.shape(), track);
    for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record("mul", [ai, bi, oi] {
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                if (ai->requires_grad) ai->grad[i] += oi->grad[i] * bi->data[i];
                if (bi->requires_grad) bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& x, double c) {
    bool track = tracked(tape, x);
    Tensor out = make_output(tape, x.shape(), track);
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * c;
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("scale", [xi, oi, c] {
            for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * c;
        });
    }
    return out;
}

Tensor add_const(Tape* tape, const Tensor& x, double c) {
    bool track = tracked(tape, x);
    Tensor out = make_output(tape, x.shape(), track);
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] + c;
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("add_const", [xi, oi] {
            for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

Tensor add_rowwise(Tape* tape, const Tensor& x, const Tensor& bias) {
    require(x.shape().size() == 2, "add_rowwise: x must be 2-d");
    require(bias.shape().size() == 1 && bias.shape()[0] == x.cols(),
            "add_rowwise: bias length must equal x columns");
    bool track = tracked(tape, x) || tracked(tape, bias);
    Tensor out = make_output(tape, x.shape(), track);
    int m = x.rows(), n = x.cols();
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c)
            out.data()[static_cast<size_t>(r) * n + c] =
                x.data()[static_cast<size_t>(r) * n + c] + bias.data()[c];
    if (track) {
        auto xi = x.impl(), bi = bias.impl(), oi = out.impl();
        tape->record("add_rowwise", [xi, bi, oi, m, n] {
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c) {
                    double g = oi->grad[static_cast<size_t>(r) * n + c];
                    if (xi->requires_grad) xi->grad[static_cast<size_t>(r) * n + c] += g;
                    if (bi->requires_grad) bi->grad[c] += g;
                }
        });
    }
    return out;
}

// --- matrix products ------------------------------------------------------

namespace {

// c[m x n] += a[m x k] * b[k x n], ikj order for contiguous inner loops.
void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x n] += a[m x k] * transpose(b[n x k])
void gemm_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c[k x n] += transpose(a[m x k]) * b[m x n]
void gemm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        const double* brow = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: inputs must be 2-d");
    require(a.cols() == b.rows(), "matmul: inner dimensions do not match");
    int m = a.rows(), k = a.cols(), n = b.cols();
    bool track = tracked(tape, a) || tracked(tape, b);
    Tensor out = make_output(tape, {m, n}, track);
    gemm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record("matmul", [ai, bi, oi, m, k, n] {
            // dA += dC * B^T ; dB += A^T * dC
            if (ai->requires_grad)
                gemm_nt_acc(oi->grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
            if (bi->requires_grad)
                gemm_tn_acc(ai->data.data(), oi->grad.data(), bi->grad.data(), m, k, n);
        });
    }
    return out;
}

Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2, "matmul_nt: inputs must be 2-d");
    require(a.cols() == b.cols(), "matmul_nt: inner dimensions do not match");
    int m = a.rows(), k = a.cols(), n = b.rows();
    bool track = tracked(tape, a) || tracked(tape, b);
    Tensor out = make_output(tape, {m, n}, track);
    gemm_nt_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record("matmul_nt", [ai, bi, oi, m, k, n] {
            // C = A B^T:  dA += dC * B ; dB += dC^T * A
            if (ai->requires_grad)
                gemm_acc(oi->grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
            if (bi->requires_grad)
                gemm_tn_acc(oi->grad.data(), ai->data.data(), bi->grad.data(), m, n, k);
        });
    }
    return out;
}

// --- slicing --------------------------------------------------------------

Tensor slice_cols(Tape* tape, const Tensor& x, int c0, int c1) {
    require(x.shape().size() == 2, "slice_cols: input must be 2-d");
    require(0 <= c0 && c0 < c1 && c1 <= x.cols(), "slice_cols: bad column range");
    int m = x.rows(), n = x.cols(), w = c1 - c0;
    bool track = tracked(tape, x);
    Tensor out = make_output(tape, {m, w}, track);
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < w; ++c)
            out.data()[static_cast<size_t>(r) * w + c] = x.data()[static_cast<size_t>(r) * n + c0 + c];
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("slice_cols", [xi, oi, m, n, w, c0] {
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < w; ++c)
                    xi->grad[static_cast<size_t>(r) * n + c0 + c] +=
                        oi->grad[static_cast<size_t>(r) * w + c];
        });
    }
    return out;
}

Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no parts");
    int m = parts[0].rows(), total = 0;
    bool track = false;
    for (const Tensor& p : parts) {
        require(p.shape().size() == 2 && p.rows() == m, "concat_cols: row mismatch");
        total += p.cols();
        track = track || tracked(tape, p);
    }
    Tensor out = make_output(tape, {m, total}, track);
    int off = 0;
    for (const Tensor& p : parts) {
        int w = p.cols();
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < w; ++c)
                out.data()[static_cast<size_t>(r) * total + off + c] =
                    p.data()[static_cast<size_t>(r) * w + c];
        off += w;
    }
    if (track) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const Tensor& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        tape->record("concat_cols", [impls, oi, m, total] {
            int off2 = 0;
            for (auto& pi : impls) {
                int w = pi->shape[1];
                if (pi->requires_grad)
                    for (int r = 0; r < m; ++r)
                        for (int c = 0; c < w; ++c)
                            pi->grad[static_cast<size_t>(r) * w + c] +=
                                oi->grad[static_cast<size_t>(r) * total + off2 + c];
                off2 += w;
            }
        });
    }
    return out;
}

Tensor slice_rows(Tape* tape, const Tensor& x, int r0, int r1) {
    require(x.shape().size() == 2, "slice_rows: input must be 2-d");
    require(0 <= r0 && r0 < r1 && r1 <= x.rows(), "slice_rows: bad row range");
    int n = x.cols(), h = r1 - r0;
    bool track = tracked(tape, x);
    Tensor out = make_output(tape, {h, n}, track);
    std::copy(x.data().begin() + static_cast<size_t>(r0) * n,
              x.data().begin() + static_cast<size_t>(r1) * n, out.data().begin());
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("slice_rows", [xi, oi, r0, n, h] {
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < n; ++c)
                    xi->grad[static_cast<size_t>(r0 + r) * n + c] +=
                        oi->grad[static_cast<size_t>(r) * n + c];
        });
    }
    return out;
}

Tensor embedding(Tape* tape, const Tensor& table, const std::vector<int>& ids) {
    require(table.shape().size() == 2, "embedding: table must be 2-d");
    int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v) throw std::out_of_range("embedding: id out of vocabulary");
    bool track = tracked(tape, table);
    Tensor out = make_output(tape, {static_cast<int>(ids.size()), d}, track);
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy(table.data().begin() + static_cast<size_t>(ids[r]) * d,
                  table.data().begin() + static_cast<size_t>(ids[r] + 1) * d,
                  out.data().begin() + r * d);
    if (track) {
        auto ti = table.impl(), oi = out.impl();
        tape->record("embedding", [ti, oi, ids, d] {
            for (size_t r = 0; r < ids.size(); ++r)
                for (int c = 0; c < d; ++c)
                    ti->grad[static_cast<size_t>(ids[r]) * d + c] += oi->grad[r * d + c];
        });
    }
    return out;
}

// --- nonlinearities -------------------------------------------------------

Tensor relu(Tape* tape, const Tensor& x) {
    bool track = tracked(tape, x);
    Tensor out = make_output(tape, x.shape(), track);
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("relu", [xi, oi] {
            for (size_t i = 0; i < oi->grad.size(); ++i)
                if (xi->data[i] > 0.0) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

namespace {
double softplus_val(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
double sigmoid_val(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }
}  // namespace

Tensor softplus(Tape* tape, const Tensor& x) {
    bool track = tracked(tape, x);
    Tensor out = make_output(tape, x.shape(), track);
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = softplus_val(x.data()[i]);
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("softplus", [xi, oi] {
            for (size_t i = 0; i < oi->grad.size(); ++i)
                xi->grad[i] += oi->grad[i] * sigmoid_val(xi->data[i]);
        });
    }
    return out;
}

Tensor sigmoid(Tape* tape, const Tensor& x) {
    bool track = tracked(tape, x);
    Tensor out = make_output(tape, x.shape(), track);
    for (size_t i = 0; i < x.size(); ++i) out.data()[i] = sigmoid_val(x.data()[i]);
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("sigmoid", [xi, oi] {
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                double s = oi->data[i];
                xi->grad[i] += oi->grad[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

Tensor softmax_rows(Tape* tape, const Tensor& x) {
    require(x.shape().size() == 2, "softmax_rows: input must be 2-d");
    int m = x.rows(), n = x.cols();
    bool track = tracked(tape, x);
    Tensor out = make_output(tape, x.shape(), track);
    for (int r = 0; r < m; ++r) {
        const double* xr = x.data().data() + static_cast<size_t>(r) * n;
        double* yr = out.data().data() + static_cast<size_t>(r) * n;
        double mx = xr[0];
        for (int c = 1; c < n; ++c) mx = std::max(mx, xr[c]);
        double z = 0.0;
        for (int c = 0; c < n; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            z += yr[c];
        }
        for (int c = 0; c < n; ++c) yr[c] /= z;
    }
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("softmax_rows", [xi, oi, m, n] {
            for (int r = 0; r < m; ++r) {
                const double* p = oi->data.data() + static_cast<size_t>(r) * n;
                const double* gy = oi->grad.data() + static_cast<size_t>(r) * n;
                double* gx = xi->grad.data() + static_cast<size_t>(r) * n;
                double dot = 0.0;
                for (int c = 0; c < n; ++c) dot += gy[c] * p[c];
                for (int c = 0; c < n; ++c) gx[c] += p[c] * (gy[c] - dot);
            }
        });
    }
    return out;
}

Tensor causal_mask(Tape* tape, const Tensor& scores) {
    require(scores.shape().size() == 2 && scores.rows() == scores.cols(),
            "causal_mask: scores must be square");
    int n = scores.rows();
    bool track = tracked(tape, scores);
    Tensor out = make_output(tape, scores.shape(), track);
    constexpr double kNegInf = -1e30;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            out.data()[static_cast<size_t>(i) * n + j] =
                j <= i ? scores.data()[static_cast<size_t>(i) * n + j] : kNegInf;
    if (track) {
        auto si = scores.impl(), oi = out.impl();
        tape->record("causal_mask", [si, oi, n] {
            for (int i = 0; i < n; ++i)
                for (int j = 0; j <= i; ++j)
                    si->grad[static_cast<size_t>(i) * n + j] +=
                        oi->grad[static_cast<size_t>(i) * n + j];
        });
    }
    return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require(!x.shape().empty(), "layer_norm: empty shape");
    int d = x.shape().back();
    require(d >= 2, "layer_norm: last dimension must be >= 2");
    require(gain.shape().size() == 1 && gain.shape()[0] == d, "layer_norm: gain length mismatch");
    require(bias.shape().size() == 1 && bias.shape()[0] == d, "layer_norm: bias length mismatch");
    size_t rows = x.size() / static_cast<size_t>(d);
    bool track = tracked(tape, x) || tracked(tape, gain) || tracked(tape, bias);
    Tensor out = make_output(tape, x.shape(), track);
    // Cache per-row mean and inverse stddev for backward.
    auto mu = std::make_shared<std::vector<double>>(rows);
    auto istd = std::make_shared<std::vector<double>>(rows);
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double* yr = out.data().data() + r * d;
        double m = 0.0;
        for (int c = 0; c < d; ++c) m += xr[c];
        m /= d;
        double v = 0.0;
        for (int c = 0; c < d; ++c) v += (xr[c] - m) * (xr[c] - m);
        v /= d;
        double is = 1.0 / std::sqrt(v + eps);
        (*mu)[r] = m;
        (*istd)[r] = is;
        for (int c = 0; c < d; ++c) yr[c] = (xr[c] - m) * is * gain.data()[c] + bias.data()[c];
    }
    if (track) {
        auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
        tape->record("layer_norm", [xi, gi, bi, oi, mu, istd, rows, d] {
            for (size_t r = 0; r < rows; ++r) {
                const double* xr = xi->data.data() + r * d;
                const double* gy = oi->grad.data() + r * d;
                double m = (*mu)[r], is = (*istd)[r];
                // dxhat, plus reductions needed for dx.
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int c = 0; c < d; ++c) {
                    double xhat = (xr[c] - m) * is;
                    double dxhat = gy[c] * gi->data[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gi->requires_grad) gi->grad[c] += gy[c] * xhat;
                    if (bi->requires_grad) bi->grad[c] += gy[c];
                }
                if (xi->requires_grad) {
                    double* gx = xi->grad.data() + r * d;
                    for (int c = 0; c < d; ++c) {
                        double xhat = (xr[c] - m) * is;
                        double dxhat = gy[c] * gi->data[c];
                        gx[c] += is * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                    }
                }
            }
        });
    }
    return out;
}

Tensor dropout(Tape* tape, const Tensor& x, double rate, Rng& rng) {
    require(rate >= 0.0 && rate <= 1.0, "dropout: rate must be in [0,1]");
    if (rate == 0.0) return x;
    bool track = tracked(tape, x);
    Tensor out = make_output(tape, x.shape(), track);
    double keep_scale = rate < 1.0 ? 1.0 / (1.0 - rate) : 0.0;
    auto mask = std::make_shared<std::vector<double>>(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        (*mask)[i] = rng.bernoulli(rate) ? 0.0 : keep_scale;
        out.data()[i] = x.data()[i] * (*mask)[i];
    }
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("dropout", [xi, oi, mask] {
            for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * (*mask)[i];
        });
    }
    return out;
}

// --- losses and reductions ------------------------------------------------

namespace {

Tensor ce_impl(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
               const std::vector<uint8_t>* mask, Reduction reduction, const char* name) {
    require(logits.shape().size() == 2, "cross_entropy: logits must be 2-d");
    int m = logits.rows(), v = logits.cols();
    require(static_cast<int>(targets.size()) == m, "cross_entropy: target count mismatch");
    if (mask) require(static_cast<int>(mask->size()) == m, "cross_entropy: mask length mismatch");
    size_t counted = 0;
    for (int r = 0; r < m; ++r) {
        if (mask && !(*mask)[r]) continue;
        if (targets[r] < 0 || targets[r] >= v)
            throw std::out_of_range("cross_entropy: target index out of range");
        ++counted;
    }
    require(counted > 0, "cross_entropy: no rows selected");
    double inv = reduction == Reduction::Mean ? 1.0 / static_cast<double>(counted) : 1.0;

    bool track = tracked(tape, logits);
    // Softmax probabilities cached row-by-row for backward.
    auto probs = std::make_shared<std::vector<double>>();
    if (track) probs->assign(logits.data().size(), 0.0);
    double loss = 0.0;
    std::vector<double> rowbuf(v);
    for (int r = 0; r < m; ++r) {
        if (mask && !(*mask)[r]) continue;
        const double* lr = logits.data().data() + static_cast<size_t>(r) * v;
        double mx = lr[0];
        for (int c = 1; c < v; ++c) mx = std::max(mx, lr[c]);
        double z = 0.0;
        for (int c = 0; c < v; ++c) {
            rowbuf[c] = std::exp(lr[c] - mx);
            z += rowbuf[c];
        }
        loss += (std::log(z) - (lr[targets[r]] - mx)) * inv;
        if (track)
            for (int c = 0; c < v; ++c) (*probs)[static_cast<size_t>(r) * v + c] = rowbuf[c] / z;
    }
    Tensor out = make_output(tape, {1}, track);
    out.data()[0] = loss;
    if (track) {
        auto li = logits.impl(), oi = out.impl();
        std::vector<uint8_t> mask_copy = mask ? *mask : std::vector<uint8_t>();
        tape->record(name, [li, oi, probs, targets, mask_copy, m, v, inv] {
            double g = oi->grad[0] * inv;
            for (int r = 0; r < m; ++r) {
                if (!mask_copy.empty() && !mask_copy[r]) continue;
                double* gl = li->grad.data() + static_cast<size_t>(r) * v;
                const double* p = probs->data() + static_cast<size_t>(r) * v;
                for (int c = 0; c < v; ++c) gl[c] += g * (p[c] - (c == targets[r] ? 1.0 : 0.0));
            }
        });
    }
    return out;
}

}  // namespace

Tensor cross_entropy_logits(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                            Reduction reduction) {
    return ce_impl(tape, logits, targets, nullptr, reduction, "cross_entropy");
}

Tensor masked_cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask, Reduction reduction) {
    return ce_impl(tape, logits, targets, &mask, reduction, "masked_cross_entropy");
}

Tensor bce_with_logits(Tape* tape, const Tensor& z, const std::vector<double>& y) {
    require(z.size() == y.size(), "bce_with_logits: length mismatch");
    require(!y.empty(), "bce_with_logits: empty input");
    bool track = tracked(tape, z);
    double inv = 1.0 / static_cast<double>(y.size());
    double loss = 0.0;
    for (size_t i = 0; i < y.size(); ++i) loss += (softplus_val(z.data()[i]) - y[i] * z.data()[i]) * inv;
    Tensor out = make_output(tape, {1}, track);
    out.data()[0] = loss;
    if (track) {
        auto zi = z.impl(), oi = out.impl();
        tape->record("bce_with_logits", [zi, oi, y, inv] {
            double g = oi->grad[0] * inv;
            for (size_t i = 0; i < y.size(); ++i)
                zi->grad[i] += g * (sigmoid_val(zi->data[i]) - y[i]);
        });
    }
    return out;
}

Tensor sum(Tape* tape, const Tensor& x) {
    bool track = tracked(tape, x);
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = make_output(tape, {1}, track);
    out.data()[0] = s;
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("sum", [xi, oi] {
            for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[0];
        });
    }
    return out;
}

Tensor mean(Tape* tape, const Tensor& x) {
    require(x.size() > 0, "mean: empty tensor");
    return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum_squares(Tape* tape, const Tensor& x) {
    bool track = tracked(tape, x);
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    Tensor out = make_output(tape, {1}, track);
    out.data()[0] = s;
    if (track) {
        auto xi = x.impl(), oi = out.impl();
        tape->record("sum_squares", [xi, oi] {
            for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[0] * 2.0 * xi->data[i];
        });
    }
    return out;
}

}  // namespace aulab
