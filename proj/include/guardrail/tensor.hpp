#pragma once

// Dense float32 tensors with reverse-mode automatic differentiation on an
// explicit tape. Everything is row-major and single-threaded; the tape replays
// recorded operations in exact reverse execution order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "guardrail/common.hpp"

namespace guardrail {

using Shape = std::vector<int>;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated lazily during backward
    bool requires_grad = false;
};

using NodePtr = std::shared_ptr<TensorNode>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false)
        : node_(std::make_shared<detail::TensorNode>()) {
        node_->shape = std::move(shape);
        node_->value.assign(detail::shape_numel(node_->shape), fill);
        node_->requires_grad = requires_grad;
    }

    static Tensor from_values(Shape shape, std::vector<float> values, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        if (detail::shape_numel(shape) != values.size())
            throw std::invalid_argument("from_values: " + shape_str(shape) + " does not hold " +
                                        std::to_string(values.size()) + " values");
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(float v) { return from_values({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }

    // 2-D helpers
    int rows() const { return node_->shape.at(0); }
    int cols() const { return node_->shape.at(1); }

    std::vector<float>& data() { return node_->value; }
    const std::vector<float>& data() const { return node_->value; }

    float item() const {
        if (numel() != 1) throw std::logic_error("item(): tensor " + shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<float>& grad() {
        ensure_grad();
        return node_->grad;
    }
    const std::vector<float>& grad() const {
        if (node_->grad.empty()) throw std::logic_error("grad(): no gradient stored");
        return node_->grad;
    }
    void ensure_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0f);
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0f); }
    void drop_grad() { node_->grad.clear(); }

    detail::NodePtr node() const { return node_; }

private:
    detail::NodePtr node_;
};

// Ordered record of executed differentiable operations. backward() traverses
// in exact reverse execution order; running it twice without reset() throws.
class Tape {
public:
    void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

    void backward(const Tensor& loss) {
        if (consumed_) throw std::logic_error("Tape::backward called twice without reset");
        if (loss.numel() != 1)
            throw std::logic_error("Tape::backward: loss must be scalar, got " + shape_str(loss.shape()));
        consumed_ = true;
        auto node = loss.node();
        node->grad.assign(1, 1.0f);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    }

    void reset() {
        entries_.clear();
        consumed_ = false;
    }

    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

private:
    std::vector<std::function<void()>> entries_;
    bool consumed_ = false;
};

namespace detail {
inline Tape*& tape_slot() {
    thread_local Tape* t = nullptr;
    return t;
}
}  // namespace detail

inline Tape* active_tape() { return detail::tape_slot(); }

// RAII activation of a tape on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& t) : prev_(detail::tape_slot()) { detail::tape_slot() = &t; }
    ~TapeScope() { detail::tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// Suspends recording (used for teacher passes inside a training step).
class NoTapeScope {
public:
    NoTapeScope() : prev_(detail::tape_slot()) { detail::tape_slot() = nullptr; }
    ~NoTapeScope() { detail::tape_slot() = prev_; }
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    Tape* prev_;
};

namespace detail {

inline bool tracked(const Tensor& t) { return t.requires_grad(); }

inline void mark_output(Tensor& out, bool any_input_tracked) {
    if (any_input_tracked && tape_slot() != nullptr) out.set_requires_grad(true);
}

inline bool recording(bool any_input_tracked) { return any_input_tracked && tape_slot() != nullptr; }

// Gradient of `out` if any flowed there, else nullptr (dead branch).
inline const std::vector<float>* out_grad(const NodePtr& out) {
    return out->grad.empty() ? nullptr : &out->grad;
}

inline void ensure_grad(const NodePtr& n) {
    if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0f);
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    bool track = detail::tracked(a) || detail::tracked(b);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on, n] {
            auto* g = detail::out_grad(on);
            if (!g) return;
            if (an->requires_grad) {
                detail::ensure_grad(an);
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += (*g)[i];
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += (*g)[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    bool track = detail::tracked(a) || detail::tracked(b);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on, n] {
            auto* g = detail::out_grad(on);
            if (!g) return;
            if (an->requires_grad) {
                detail::ensure_grad(an);
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += (*g)[i];
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] -= (*g)[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    bool track = detail::tracked(a) || detail::tracked(b);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on, n] {
            auto* g = detail::out_grad(on);
            if (!g) return;
            if (an->requires_grad) {
                detail::ensure_grad(an);
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += (*g)[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += (*g)[i] * an->value[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, float c) {
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    bool track = detail::tracked(a);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node();
        auto on = out.node();
        active_tape()->record([an, on, c, n] {
            auto* g = detail::out_grad(on);
            if (!g || !an->requires_grad) return;
            detail::ensure_grad(an);
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += (*g)[i] * c;
        });
    }
    return out;
}

// n x d plus a broadcast row vector of length d
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "add_rowvec");
    if (b.ndim() != 1 || b.dim(0) != a.cols())
        throw std::invalid_argument("add_rowvec: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const int r = a.rows(), c = a.cols();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<std::size_t>(i) * c + j] = a.data()[static_cast<std::size_t>(i) * c + j] + b.data()[static_cast<std::size_t>(j)];
    bool track = detail::tracked(a) || detail::tracked(b);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on, r, c] {
            auto* g = detail::out_grad(on);
            if (!g) return;
            if (an->requires_grad) {
                detail::ensure_grad(an);
                for (std::size_t i = 0; i < static_cast<std::size_t>(r) * c; ++i) an->grad[i] += (*g)[i];
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) bn->grad[static_cast<std::size_t>(j)] += (*g)[static_cast<std::size_t>(i) * c + j];
            }
        });
    }
    return out;
}

// ---- matrix products ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int p = a.rows(), q = a.cols(), r = b.cols();
    Tensor out({p, r});
    const float* A = a.data().data();
    const float* B = b.data().data();
    float* C = out.data().data();
    for (int i = 0; i < p; ++i) {
        float* Ci = C + static_cast<std::size_t>(i) * r;
        for (int k = 0; k < q; ++k) {
            const float aik = A[static_cast<std::size_t>(i) * q + k];
            const float* Bk = B + static_cast<std::size_t>(k) * r;
            for (int j = 0; j < r; ++j) Ci[j] += aik * Bk[j];
        }
    }
    bool track = detail::tracked(a) || detail::tracked(b);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on, p, q, r] {
            auto* gp = detail::out_grad(on);
            if (!gp) return;
            const float* G = gp->data();
            if (an->requires_grad) {
                detail::ensure_grad(an);
                // dA = G * B^T
                for (int i = 0; i < p; ++i)
                    for (int k = 0; k < q; ++k) {
                        float acc = 0.0f;
                        const float* Gi = G + static_cast<std::size_t>(i) * r;
                        const float* Bk = bn->value.data() + static_cast<std::size_t>(k) * r;
                        for (int j = 0; j < r; ++j) acc += Gi[j] * Bk[j];
                        an->grad[static_cast<std::size_t>(i) * q + k] += acc;
                    }
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                // dB = A^T * G
                for (int i = 0; i < p; ++i) {
                    const float* Ai = an->value.data() + static_cast<std::size_t>(i) * q;
                    const float* Gi = G + static_cast<std::size_t>(i) * r;
                    for (int k = 0; k < q; ++k) {
                        float* Bg = bn->grad.data() + static_cast<std::size_t>(k) * r;
                        const float aik = Ai[k];
                        for (int j = 0; j < r; ++j) Bg[j] += aik * Gi[j];
                    }
                }
            }
        });
    }
    return out;
}

// a (n x k) times b^T (k x m) where b is m x k
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul_nt");
    detail::require_2d(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int n = a.rows(), k = a.cols(), m = b.rows();
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) {
        const float* Ai = a.data().data() + static_cast<std::size_t>(i) * k;
        float* Oi = out.data().data() + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const float* Bj = b.data().data() + static_cast<std::size_t>(j) * k;
            float acc = 0.0f;
            for (int t = 0; t < k; ++t) acc += Ai[t] * Bj[t];
            Oi[j] = acc;
        }
    }
    bool track = detail::tracked(a) || detail::tracked(b);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        active_tape()->record([an, bn, on, n, k, m] {
            auto* gp = detail::out_grad(on);
            if (!gp) return;
            const float* G = gp->data();
            if (an->requires_grad) {
                detail::ensure_grad(an);
                // dA = G * B
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) {
                        const float gij = G[static_cast<std::size_t>(i) * m + j];
                        const float* Bj = bn->value.data() + static_cast<std::size_t>(j) * k;
                        float* Agi = an->grad.data() + static_cast<std::size_t>(i) * k;
                        for (int t = 0; t < k; ++t) Agi[t] += gij * Bj[t];
                    }
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                // dB = G^T * A
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) {
                        const float gij = G[static_cast<std::size_t>(i) * m + j];
                        const float* Ai = an->value.data() + static_cast<std::size_t>(i) * k;
                        float* Bgj = bn->grad.data() + static_cast<std::size_t>(j) * k;
                        for (int t = 0; t < k; ++t) Bgj[t] += gij * Ai[t];
                    }
            }
        });
    }
    return out;
}

// ---- activations and normalization ----

namespace detail {
constexpr float kGeluK = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluC = 0.044715f;
}  // namespace detail

// tanh approximation
inline Tensor gelu(const Tensor& a) {
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const float x = a.data()[i];
        const float u = detail::kGeluK * (x + detail::kGeluC * x * x * x);
        out.data()[i] = 0.5f * x * (1.0f + std::tanh(u));
    }
    bool track = detail::tracked(a);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node();
        auto on = out.node();
        active_tape()->record([an, on, n] {
            auto* g = detail::out_grad(on);
            if (!g || !an->requires_grad) return;
            detail::ensure_grad(an);
            for (std::size_t i = 0; i < n; ++i) {
                const float x = an->value[i];
                const float u = detail::kGeluK * (x + detail::kGeluC * x * x * x);
                const float t = std::tanh(u);
                const float du = detail::kGeluK * (1.0f + 3.0f * detail::kGeluC * x * x);
                const float dy = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
                an->grad[i] += (*g)[i] * dy;
            }
        });
    }
    return out;
}

// Row-wise layer normalization over the last dimension of an n x d tensor.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    detail::require_2d(x, "layer_norm");
    const int r = x.rows(), d = x.cols();
    if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 || beta.dim(0) != d)
        throw std::invalid_argument("layer_norm: parameter shape mismatch, state " + shape_str(x.shape()) +
                                    " gamma " + shape_str(gamma.shape()) + " beta " + shape_str(beta.shape()));
    Tensor out(x.shape());
    std::vector<float> xhat(static_cast<std::size_t>(r) * d);
    std::vector<float> inv_std(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const float* xi = x.data().data() + static_cast<std::size_t>(i) * d;
        float mean = 0.0f;
        for (int j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (int j = 0; j < d; ++j) {
            const float c = xi[j] - mean;
            var += c * c;
        }
        var /= static_cast<float>(d);
        const float is = 1.0f / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < d; ++j) {
            const float h = (xi[j] - mean) * is;
            xhat[static_cast<std::size_t>(i) * d + j] = h;
            out.data()[static_cast<std::size_t>(i) * d + j] = gamma.data()[static_cast<std::size_t>(j)] * h + beta.data()[static_cast<std::size_t>(j)];
        }
    }
    bool track = detail::tracked(x) || detail::tracked(gamma) || detail::tracked(beta);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        auto xh = std::make_shared<std::vector<float>>(std::move(xhat));
        auto is = std::make_shared<std::vector<float>>(std::move(inv_std));
        active_tape()->record([xn, gn, bn, on, xh, is, r, d] {
            auto* gp = detail::out_grad(on);
            if (!gp) return;
            const float* G = gp->data();
            if (gn->requires_grad) {
                detail::ensure_grad(gn);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < d; ++j)
                        gn->grad[static_cast<std::size_t>(j)] += G[static_cast<std::size_t>(i) * d + j] * (*xh)[static_cast<std::size_t>(i) * d + j];
            }
            if (bn->requires_grad) {
                detail::ensure_grad(bn);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < d; ++j) bn->grad[static_cast<std::size_t>(j)] += G[static_cast<std::size_t>(i) * d + j];
            }
            if (xn->requires_grad) {
                detail::ensure_grad(xn);
                for (int i = 0; i < r; ++i) {
                    const float* Gi = G + static_cast<std::size_t>(i) * d;
                    const float* Hi = xh->data() + static_cast<std::size_t>(i) * d;
                    float mean_g = 0.0f, mean_gh = 0.0f;
                    for (int j = 0; j < d; ++j) {
                        const float gj = Gi[j] * gn->value[static_cast<std::size_t>(j)];
                        mean_g += gj;
                        mean_gh += gj * Hi[j];
                    }
                    mean_g /= static_cast<float>(d);
                    mean_gh /= static_cast<float>(d);
                    const float s = (*is)[static_cast<std::size_t>(i)];
                    for (int j = 0; j < d; ++j) {
                        const float gj = Gi[j] * gn->value[static_cast<std::size_t>(j)];
                        xn->grad[static_cast<std::size_t>(i) * d + j] += s * (gj - mean_g - Hi[j] * mean_gh);
                    }
                }
            }
        });
    }
    return out;
}

// ---- lookups, slices, reductions ----

inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    detail::require_2d(table, "embedding_lookup");
    const int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside table " + shape_str(table.shape()));
    const int n = static_cast<int>(ids.size());
    Tensor out({n, d});
    for (int i = 0; i < n; ++i)
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d, d,
                    out.data().data() + static_cast<std::size_t>(i) * d);
    bool track = detail::tracked(table);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto tn = table.node();
        auto on = out.node();
        auto idv = ids;
        active_tape()->record([tn, on, idv, d] {
            auto* g = detail::out_grad(on);
            if (!g || !tn->requires_grad) return;
            detail::ensure_grad(tn);
            for (std::size_t i = 0; i < idv.size(); ++i)
                for (int j = 0; j < d; ++j)
                    tn->grad[static_cast<std::size_t>(idv[i]) * d + j] += (*g)[i * static_cast<std::size_t>(d) + j];
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
    detail::require_2d(x, "slice_rows");
    if (r0 < 0 || r1 > x.rows() || r0 >= r1)
        throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                    ") invalid for " + shape_str(x.shape()));
    const int d = x.cols(), n = r1 - r0;
    Tensor out({n, d});
    std::copy_n(x.data().data() + static_cast<std::size_t>(r0) * d, static_cast<std::size_t>(n) * d, out.data().data());
    bool track = detail::tracked(x);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto xn = x.node();
        auto on = out.node();
        active_tape()->record([xn, on, r0, n, d] {
            auto* g = detail::out_grad(on);
            if (!g || !xn->requires_grad) return;
            detail::ensure_grad(xn);
            for (std::size_t i = 0; i < static_cast<std::size_t>(n) * d; ++i)
                xn->grad[static_cast<std::size_t>(r0) * d + i] += (*g)[i];
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
    detail::require_2d(x, "slice_cols");
    if (c0 < 0 || c1 > x.cols() || c0 >= c1)
        throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                    ") invalid for " + shape_str(x.shape()));
    const int r = x.rows(), w = c1 - c0, d = x.cols();
    Tensor out({r, w});
    for (int i = 0; i < r; ++i)
        std::copy_n(x.data().data() + static_cast<std::size_t>(i) * d + c0, w,
                    out.data().data() + static_cast<std::size_t>(i) * w);
    bool track = detail::tracked(x);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto xn = x.node();
        auto on = out.node();
        active_tape()->record([xn, on, c0, r, w, d] {
            auto* g = detail::out_grad(on);
            if (!g || !xn->requires_grad) return;
            detail::ensure_grad(xn);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j)
                    xn->grad[static_cast<std::size_t>(i) * d + c0 + j] += (*g)[static_cast<std::size_t>(i) * w + j];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int r = parts.front().rows();
    int w = 0;
    bool track = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.rows() != r)
            throw std::invalid_argument("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
        w += p.cols();
        track = track || detail::tracked(p);
    }
    Tensor out({r, w});
    int off = 0;
    for (const auto& p : parts) {
        const int c = p.cols();
        for (int i = 0; i < r; ++i)
            std::copy_n(p.data().data() + static_cast<std::size_t>(i) * c, c,
                        out.data().data() + static_cast<std::size_t>(i) * w + off);
        off += c;
    }
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        std::vector<detail::NodePtr> nodes;
        nodes.reserve(parts.size());
        for (const auto& p : parts) nodes.push_back(p.node());
        auto on = out.node();
        active_tape()->record([nodes, on, r, w] {
            auto* g = detail::out_grad(on);
            if (!g) return;
            int off = 0;
            for (const auto& pn : nodes) {
                const int c = pn->shape[1];
                if (pn->requires_grad) {
                    detail::ensure_grad(pn);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j)
                            pn->grad[static_cast<std::size_t>(i) * c + j] += (*g)[static_cast<std::size_t>(i) * w + off + j];
                }
                off += c;
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    Tensor out({1});
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    out.data()[0] = static_cast<float>(acc);
    bool track = detail::tracked(a);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node();
        auto on = out.node();
        active_tape()->record([an, on] {
            auto* g = detail::out_grad(on);
            if (!g || !an->requires_grad) return;
            detail::ensure_grad(an);
            for (auto& gv : an->grad) gv += (*g)[0];
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
    Tensor out({1});
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    out.data()[0] = static_cast<float>(acc / static_cast<double>(a.numel()));
    bool track = detail::tracked(a);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto an = a.node();
        auto on = out.node();
        const float inv = 1.0f / static_cast<float>(a.numel());
        active_tape()->record([an, on, inv] {
            auto* g = detail::out_grad(on);
            if (!g || !an->requires_grad) return;
            detail::ensure_grad(an);
            for (auto& gv : an->grad) gv += (*g)[0] * inv;
        });
    }
    return out;
}

// Column means of an n x d tensor, returned as 1 x d.
inline Tensor mean_over_rows(const Tensor& x) {
    detail::require_2d(x, "mean_over_rows");
    const int r = x.rows(), d = x.cols();
    if (r == 0) throw std::invalid_argument("mean_over_rows: no rows");
    Tensor out({1, d});
    for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = 0; i < r; ++i) acc += x.data()[static_cast<std::size_t>(i) * d + j];
        out.data()[static_cast<std::size_t>(j)] = static_cast<float>(acc / r);
    }
    bool track = detail::tracked(x);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto xn = x.node();
        auto on = out.node();
        const float inv = 1.0f / static_cast<float>(r);
        active_tape()->record([xn, on, r, d, inv] {
            auto* g = detail::out_grad(on);
            if (!g || !xn->requires_grad) return;
            detail::ensure_grad(xn);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < d; ++j) xn->grad[static_cast<std::size_t>(i) * d + j] += (*g)[static_cast<std::size_t>(j)] * inv;
        });
    }
    return out;
}

// ---- softmax family ----

// Row-wise softmax where row t normalizes over columns 0..t only; the rest is
// exactly zero. Avoids -inf masking entirely.
inline Tensor causal_masked_softmax(const Tensor& scores) {
    detail::require_2d(scores, "causal_masked_softmax");
    if (scores.rows() != scores.cols())
        throw std::invalid_argument("causal_masked_softmax: expected square scores, got " + shape_str(scores.shape()));
    const int n = scores.rows();
    Tensor out(scores.shape());
    for (int t = 0; t < n; ++t) {
        const float* row = scores.data().data() + static_cast<std::size_t>(t) * n;
        float* orow = out.data().data() + static_cast<std::size_t>(t) * n;
        float mx = row[0];
        for (int j = 1; j <= t; ++j) mx = std::max(mx, row[j]);
        float denom = 0.0f;
        for (int j = 0; j <= t; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        const float inv = 1.0f / denom;
        for (int j = 0; j <= t; ++j) orow[j] *= inv;
    }
    bool track = detail::tracked(scores);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto sn = scores.node();
        auto on = out.node();
        active_tape()->record([sn, on, n] {
            auto* g = detail::out_grad(on);
            if (!g || !sn->requires_grad) return;
            detail::ensure_grad(sn);
            for (int t = 0; t < n; ++t) {
                const float* p = on->value.data() + static_cast<std::size_t>(t) * n;
                const float* gr = g->data() + static_cast<std::size_t>(t) * n;
                float dot = 0.0f;
                for (int j = 0; j <= t; ++j) dot += p[j] * gr[j];
                for (int j = 0; j <= t; ++j)
                    sn->grad[static_cast<std::size_t>(t) * n + j] += p[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

// Mean negative log-softmax of the target class per row.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    detail::require_2d(logits, "softmax_cross_entropy");
    const int n = logits.rows(), v = logits.cols();
    if (static_cast<int>(targets.size()) != n)
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                    std::to_string(n) + " rows");
    for (int t : targets)
        if (t < 0 || t >= v)
            throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(v) + ")");
    Tensor out({1});
    std::vector<float> probs(static_cast<std::size_t>(n) * v);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const float* row = logits.data().data() + static_cast<std::size_t>(i) * v;
        float mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
        const double lse = std::log(denom) + mx;
        loss += lse - row[targets[static_cast<std::size_t>(i)]];
        for (int j = 0; j < v; ++j)
            probs[static_cast<std::size_t>(i) * v + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - lse));
    }
    out.data()[0] = static_cast<float>(loss / n);
    bool track = detail::tracked(logits);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto ln = logits.node();
        auto on = out.node();
        auto pr = std::make_shared<std::vector<float>>(std::move(probs));
        auto tg = targets;
        active_tape()->record([ln, on, pr, tg, n, v] {
            auto* g = detail::out_grad(on);
            if (!g || !ln->requires_grad) return;
            detail::ensure_grad(ln);
            const float s = (*g)[0] / static_cast<float>(n);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < v; ++j)
                    ln->grad[static_cast<std::size_t>(i) * v + j] += s * (*pr)[static_cast<std::size_t>(i) * v + j];
                ln->grad[static_cast<std::size_t>(i) * v + tg[static_cast<std::size_t>(i)]] -= s;
            }
        });
    }
    return out;
}

// Cross-entropy against a fixed target distribution (soft labels); `probs` is
// consumed as constants.
inline Tensor softmax_cross_entropy_soft(const Tensor& logits, const Tensor& target_probs) {
    detail::require_2d(logits, "softmax_cross_entropy_soft");
    if (logits.shape() != target_probs.shape())
        throw std::invalid_argument("softmax_cross_entropy_soft: shape mismatch " + shape_str(logits.shape()) + " vs " +
                                    shape_str(target_probs.shape()));
    const int n = logits.rows(), v = logits.cols();
    Tensor out({1});
    std::vector<float> probs(static_cast<std::size_t>(n) * v);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const float* row = logits.data().data() + static_cast<std::size_t>(i) * v;
        const float* q = target_probs.data().data() + static_cast<std::size_t>(i) * v;
        float mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
        const double lse = std::log(denom) + mx;
        for (int j = 0; j < v; ++j) {
            probs[static_cast<std::size_t>(i) * v + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - lse));
            loss += static_cast<double>(q[j]) * (lse - row[j]);
        }
    }
    out.data()[0] = static_cast<float>(loss / n);
    bool track = detail::tracked(logits);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto ln = logits.node(), qn = target_probs.node();
        auto on = out.node();
        auto pr = std::make_shared<std::vector<float>>(std::move(probs));
        active_tape()->record([ln, qn, on, pr, n, v] {
            auto* g = detail::out_grad(on);
            if (!g || !ln->requires_grad) return;
            detail::ensure_grad(ln);
            const float s = (*g)[0] / static_cast<float>(n);
            for (int i = 0; i < n; ++i) {
                float qsum = 0.0f;
                for (int j = 0; j < v; ++j) qsum += qn->value[static_cast<std::size_t>(i) * v + j];
                for (int j = 0; j < v; ++j)
                    ln->grad[static_cast<std::size_t>(i) * v + j] +=
                        s * (qsum * (*pr)[static_cast<std::size_t>(i) * v + j] - qn->value[static_cast<std::size_t>(i) * v + j]);
            }
        });
    }
    return out;
}

// ---- gradient reversal ----

// Identity forward; backward multiplies the upstream gradient by -eta exactly.
inline Tensor grad_reverse(const Tensor& x, float eta) {
    if (!(eta > 0.0f)) throw std::invalid_argument("grad_reverse: eta must be positive, got " + std::to_string(eta));
    Tensor out = Tensor::from_values(x.shape(), x.data());
    bool track = detail::tracked(x);
    detail::mark_output(out, track);
    if (detail::recording(track)) {
        auto xn = x.node();
        auto on = out.node();
        active_tape()->record([xn, on, eta] {
            auto* g = detail::out_grad(on);
            if (!g || !xn->requires_grad) return;
            detail::ensure_grad(xn);
            for (std::size_t i = 0; i < g->size(); ++i) xn->grad[i] += -eta * (*g)[i];
        });
    }
    return out;
}

}  // namespace guardrail
