#pragma once

// Dense f64 tensors with reverse-mode autodiff over the op set the rest of
// the stack needs. Values are immutable once created; gradient buffers are
// the only mutable state. A Graph and the tensors recorded on it belong to
// a single thread; distinct graphs may run concurrently.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qadapt/rng.hpp"

namespace qadapt {

struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct state_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// degenerate inputs: empty batches, all-masked sequences, constant correlations
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw numeric_error(std::string("non-finite value in ") + what);
        }
    }
}

inline std::string dims_str(const std::vector<std::size_t>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

// C[p x q] (+)= A[p x k] * B[k x q]
inline void mm_nn(const double* a, const double* b, double* c,
                  std::size_t p, std::size_t k, std::size_t q, bool accumulate) {
    if (!accumulate) std::fill(c, c + p * q, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        double* crow = c + i * q;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = a[i * k + kk];
            const double* brow = b + kk * q;
            for (std::size_t j = 0; j < q; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C[p x q] (+)= A[p x k] * B[q x k]^T
inline void mm_nt(const double* a, const double* b, double* c,
                  std::size_t p, std::size_t k, std::size_t q, bool accumulate) {
    for (std::size_t i = 0; i < p; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < q; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            if (accumulate) {
                c[i * q + j] += acc;
            } else {
                c[i * q + j] = acc;
            }
        }
    }
}

// C[p x q] (+)= A[k x p]^T * B[k x q]
inline void mm_tn(const double* a, const double* b, double* c,
                  std::size_t p, std::size_t k, std::size_t q, bool accumulate) {
    if (!accumulate) std::fill(c, c + p * q, 0.0);
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double* arow = a + kk * p;
        const double* brow = b + kk * q;
        for (std::size_t i = 0; i < p; ++i) {
            const double aki = arow[i];
            double* crow = c + i * q;
            for (std::size_t j = 0; j < q; ++j) crow[j] += aki * brow[j];
        }
    }
}

}  // namespace detail

class Tensor {
  public:
    struct Impl {
        std::vector<std::size_t> dims;
        std::vector<double> data;
        bool requires_grad = false;
        std::vector<double> grad;  // empty until first touched by backward
    };

    Tensor() = default;

    static Tensor from_data(std::vector<std::size_t> dims, std::vector<double> data,
                            bool requires_grad = false) {
        std::size_t n = 1;
        for (std::size_t d : dims) {
            if (d == 0) throw shape_error("tensor dimension must be positive");
            n *= d;
        }
        if (n != data.size()) {
            throw shape_error("tensor data length " + std::to_string(data.size()) +
                              " does not match dims " + detail::dims_str(dims));
        }
        detail::check_finite(data, "tensor construction");
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->dims = std::move(dims);
        t.impl_->data = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor zeros(std::vector<std::size_t> dims, bool requires_grad = false) {
        std::size_t n = 1;
        for (std::size_t d : dims) n *= d;
        return from_data(std::move(dims), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(std::vector<std::size_t> dims, double value, bool requires_grad = false) {
        std::size_t n = 1;
        for (std::size_t d : dims) n *= d;
        return from_data(std::move(dims), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }

    const std::vector<std::size_t>& dims() const { return impl_->dims; }
    std::size_t size() const { return impl_->data.size(); }

    std::size_t rows() const {
        if (impl_->dims.size() != 2) throw shape_error("rows(): tensor is not 2-d");
        return impl_->dims[0];
    }
    std::size_t cols() const {
        if (impl_->dims.size() != 2) throw shape_error("cols(): tensor is not 2-d");
        return impl_->dims[1];
    }

    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& mutable_data() { return impl_->data; }

    double at(std::size_t i, std::size_t j) const { return impl_->data[i * cols() + j]; }

    double value() const {
        if (size() != 1) throw shape_error("value(): tensor is not scalar");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() {
        ensure_grad();
        return impl_->grad;
    }
    const std::vector<double>& grad_const() const { return impl_->grad; }

    void ensure_grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    }
    void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }
    void drop_grad() { impl_->grad.clear(); }

    std::shared_ptr<Impl> impl() const { return impl_; }

  private:
    std::shared_ptr<Impl> impl_;
};

// Append-only tape of recorded operations. Nodes are recorded in execution
// order, so reverse iteration is a valid topological order for backward.
class Graph {
  public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    std::size_t node_count() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and walks the tape once, in reverse.
    void backward(Tensor& loss) {
        if (!recording_) throw state_error("backward() on a non-recording graph");
        if (backward_run_) throw state_error("backward() already run on this graph; re-forward first");
        if (loss.size() != 1) throw shape_error("backward() root must be scalar");
        backward_run_ = true;
        loss.ensure_grad();
        loss.grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

  private:
    std::vector<std::function<void()>> nodes_;
    bool recording_ = true;
    bool backward_run_ = false;
};

namespace detail {

inline bool track(const Graph& g, std::initializer_list<const Tensor*> inputs) {
    if (!g.recording()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

// C = A * B, dA = dC * B^T, dB = A^T * dC
inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw shape_error("matmul: inner dimensions disagree, " + detail::dims_str(a.dims()) +
                          " vs " + detail::dims_str(b.dims()));
    }
    const std::size_t p = a.rows(), k = a.cols(), q = b.cols();
    Tensor out = Tensor::zeros({p, q});
    detail::mm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), p, k, q, false);
    detail::check_finite(out.data(), "matmul");
    if (detail::track(g, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        g.record([ai, bi, oi, p, k, q] {
            const double* dc = oi->grad.data();
            if (ai->requires_grad) {
                if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
                detail::mm_nt(dc, bi->data.data(), ai->grad.data(), p, q, k, true);
            }
            if (bi->requires_grad) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                detail::mm_tn(ai->data.data(), dc, bi->grad.data(), k, p, q, true);
            }
        });
    }
    return out;
}

// y = x * W^T (+ bias per row); x:[r x in], W:[out x in], bias:[out]
inline Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr) {
    if (x.cols() != weight.cols()) {
        throw shape_error("linear: input width " + std::to_string(x.cols()) +
                          " does not match weight in-width " + std::to_string(weight.cols()));
    }
    const std::size_t r = x.rows(), in = x.cols(), out_w = weight.rows();
    if (bias && bias->size() != out_w) throw shape_error("linear: bias length mismatch");
    Tensor out = Tensor::zeros({r, out_w});
    detail::mm_nt(x.data().data(), weight.data().data(), out.mutable_data().data(), r, in, out_w, false);
    if (bias) {
        double* o = out.mutable_data().data();
        const double* b = bias->data().data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < out_w; ++j) o[i * out_w + j] += b[j];
    }
    detail::check_finite(out.data(), "linear");
    const Tensor bias_t = bias ? *bias : Tensor();
    if (detail::track(g, bias ? std::initializer_list<const Tensor*>{&x, &weight, bias}
                              : std::initializer_list<const Tensor*>{&x, &weight})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = weight.impl(), oi = out.impl();
        auto bi = bias_t.defined() ? bias_t.impl() : nullptr;
        g.record([xi, wi, bi, oi, r, in, out_w] {
            const double* dy = oi->grad.data();
            if (xi->requires_grad) {
                if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
                detail::mm_nn(dy, wi->data.data(), xi->grad.data(), r, out_w, in, true);
            }
            if (wi->requires_grad) {
                if (wi->grad.empty()) wi->grad.assign(wi->data.size(), 0.0);
                detail::mm_tn(dy, xi->data.data(), wi->grad.data(), out_w, r, in, true);
            }
            if (bi && bi->requires_grad) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < out_w; ++j) bi->grad[j] += dy[i * out_w + j];
            }
        });
    }
    return out;
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.dims() != b.dims()) {
        throw shape_error("add: shape mismatch " + detail::dims_str(a.dims()) + " vs " +
                          detail::dims_str(b.dims()));
    }
    Tensor out = Tensor::zeros(a.dims());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] + b.data()[i];
    detail::check_finite(out.data(), "add");
    if (detail::track(g, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        g.record([ai, bi, oi, n] {
            for (auto* t : {ai.get(), bi.get()}) {
                if (!t->requires_grad) continue;
                if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
                for (std::size_t i = 0; i < n; ++i) t->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.dims() != b.dims()) {
        throw shape_error("mul: shape mismatch " + detail::dims_str(a.dims()) + " vs " +
                          detail::dims_str(b.dims()));
    }
    Tensor out = Tensor::zeros(a.dims());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] * b.data()[i];
    detail::check_finite(out.data(), "mul");
    if (detail::track(g, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        g.record([ai, bi, oi, n] {
            if (ai->requires_grad) {
                if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
                for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

inline Tensor scale(Graph& g, const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.dims());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = c * a.data()[i];
    detail::check_finite(out.data(), "scale");
    if (detail::track(g, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        g.record([ai, oi, c, n] {
            if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
            for (std::size_t i = 0; i < n; ++i) ai->grad[i] += c * oi->grad[i];
        });
    }
    return out;
}

inline Tensor concat_rows(Graph& g, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw shape_error("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    bool any_grad = false;
    for (const Tensor& t : parts) {
        if (t.cols() != c) throw shape_error("concat_rows: column widths disagree");
        total += t.rows();
        any_grad = any_grad || t.requires_grad();
    }
    Tensor out = Tensor::zeros({total, c});
    std::size_t row = 0;
    for (const Tensor& t : parts) {
        std::copy(t.data().begin(), t.data().end(), out.mutable_data().begin() + row * c);
        row += t.rows();
    }
    if (g.recording() && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<Tensor::Impl>> impls;
        impls.reserve(parts.size());
        for (const Tensor& t : parts) impls.push_back(t.impl());
        auto oi = out.impl();
        g.record([impls, oi, c] {
            std::size_t r0 = 0;
            for (auto& pi : impls) {
                const std::size_t nr = pi->data.size() / c;
                if (pi->requires_grad) {
                    if (pi->grad.empty()) pi->grad.assign(pi->data.size(), 0.0);
                    for (std::size_t i = 0; i < nr * c; ++i) pi->grad[i] += oi->grad[r0 * c + i];
                }
                r0 += nr;
            }
        });
    }
    return out;
}

inline Tensor concat_cols(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) throw shape_error("concat_cols: row counts disagree");
    const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor out = Tensor::zeros({r, ca + cb});
    for (std::size_t i = 0; i < r; ++i) {
        std::copy(a.data().begin() + i * ca, a.data().begin() + (i + 1) * ca,
                  out.mutable_data().begin() + i * (ca + cb));
        std::copy(b.data().begin() + i * cb, b.data().begin() + (i + 1) * cb,
                  out.mutable_data().begin() + i * (ca + cb) + ca);
    }
    if (detail::track(g, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        g.record([ai, bi, oi, r, ca, cb] {
            if (ai->requires_grad) {
                if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < ca; ++j)
                        ai->grad[i * ca + j] += oi->grad[i * (ca + cb) + j];
            }
            if (bi->requires_grad) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < cb; ++j)
                        bi->grad[i * cb + j] += oi->grad[i * (ca + cb) + ca + j];
            }
        });
    }
    return out;
}

inline Tensor slice_rows(Graph& g, const Tensor& x, std::size_t begin, std::size_t end) {
    if (begin >= end || end > x.rows()) throw shape_error("slice_rows: range out of bounds");
    const std::size_t c = x.cols(), nr = end - begin;
    Tensor out = Tensor::zeros({nr, c});
    std::copy(x.data().begin() + begin * c, x.data().begin() + end * c, out.mutable_data().begin());
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g.record([xi, oi, begin, nr, c] {
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            for (std::size_t i = 0; i < nr * c; ++i) xi->grad[begin * c + i] += oi->grad[i];
        });
    }
    return out;
}

// Row-wise softmax, max-shifted. d(out)/d(x): out .* (dy - rowsum(dy .* out))
inline Tensor softmax_rows(Graph& g, const Tensor& x) {
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        const double* xin = x.data().data() + i * c;
        double* o = out.mutable_data().data() + i * c;
        double mx = xin[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xin[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            o[j] = std::exp(xin[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < c; ++j) o[j] /= sum;
    }
    detail::check_finite(out.data(), "softmax_rows");
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g.record([xi, oi, r, c] {
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            for (std::size_t i = 0; i < r; ++i) {
                const double* p = oi->data.data() + i * c;
                const double* dy = oi->grad.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += p[j] * dy[j];
                double* dx = xi->grad.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) dx[j] += p[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

// Row-wise layer norm with affine parameters gamma/beta of width cols.
inline Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    const std::size_t r = x.rows(), c = x.cols();
    if (gamma.size() != c || beta.size() != c) throw shape_error("layer_norm: affine width mismatch");
    Tensor out = Tensor::zeros({r, c});
    std::vector<double> xhat(r * c), inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* xin = x.data().data() + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += xin[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xin[j] - mean) * (xin[j] - mean);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        double* o = out.mutable_data().data() + i * c;
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (xin[j] - mean) * is;
            o[j] = xhat[i * c + j] * gamma.data()[j] + beta.data()[j];
        }
    }
    detail::check_finite(out.data(), "layer_norm");
    if (detail::track(g, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        g.record([xi, gi, bi, oi, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
            for (std::size_t i = 0; i < r; ++i) {
                const double* dy = oi->grad.data() + i * c;
                const double* xh = xhat.data() + i * c;
                if (gi->requires_grad) {
                    if (gi->grad.empty()) gi->grad.assign(gi->data.size(), 0.0);
                    for (std::size_t j = 0; j < c; ++j) gi->grad[j] += dy[j] * xh[j];
                }
                if (bi->requires_grad) {
                    if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                    for (std::size_t j = 0; j < c; ++j) bi->grad[j] += dy[j];
                }
                if (xi->requires_grad) {
                    if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
                    // dxhat = dy * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = dy[j] * gi->data[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    double* dx = xi->grad.data() + i * c;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = dy[j] * gi->data[j];
                        dx[j] += (dxh - m1 - xh[j] * m2) * inv_std[i];
                    }
                }
            }
        });
    }
    return out;
}

namespace detail {

constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

inline double gelu_fwd(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluK * x * x * x)));
}
inline double gelu_bwd(double x) {
    const double u = kGeluC * (x + kGeluK * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluK * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace detail

// tanh-approximation GELU
inline Tensor gelu(Graph& g, const Tensor& x) {
    Tensor out = Tensor::zeros(x.dims());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = detail::gelu_fwd(x.data()[i]);
    detail::check_finite(out.data(), "gelu");
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g.record([xi, oi, n] {
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            for (std::size_t i = 0; i < n; ++i)
                xi->grad[i] += oi->grad[i] * detail::gelu_bwd(xi->data[i]);
        });
    }
    return out;
}

inline Tensor sigmoid(Graph& g, const Tensor& x) {
    Tensor out = Tensor::zeros(x.dims());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
    detail::check_finite(out.data(), "sigmoid");
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g.record([xi, oi, n] {
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double s = oi->data[i];
                xi->grad[i] += oi->grad[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

// Gather rows of an embedding table; backward scatter-adds.
inline Tensor embed_rows(Graph& g, const Tensor& table, const std::vector<int>& ids) {
    const std::size_t v = table.rows(), c = table.cols();
    if (ids.empty()) throw shape_error("embed_rows: empty id list");
    Tensor out = Tensor::zeros({ids.size(), c});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
            throw shape_error("embed_rows: id " + std::to_string(ids[i]) + " out of range");
        std::copy(table.data().begin() + ids[i] * c, table.data().begin() + (ids[i] + 1) * c,
                  out.mutable_data().begin() + i * c);
    }
    if (detail::track(g, {&table})) {
        out.set_requires_grad(true);
        auto ti = table.impl(), oi = out.impl();
        g.record([ti, oi, ids, c] {
            if (ti->grad.empty()) ti->grad.assign(ti->data.size(), 0.0);
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < c; ++j)
                    ti->grad[ids[i] * c + j] += oi->grad[i * c + j];
        });
    }
    return out;
}

// Scaled dot-product attention over already-projected q/k/v of equal width.
// causal restricts row i of the score matrix to keys 0..i (exact zeros beyond,
// enforced by loop bounds rather than masking arithmetic).
inline Tensor multihead_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v,
                                  std::size_t heads, bool causal) {
    const std::size_t a = q.rows(), b = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != b)
        throw shape_error("attention: q/k/v widths disagree");
    if (d % heads != 0) throw shape_error("attention: width not divisible by head count");
    if (causal && a != b) throw shape_error("attention: causal mode requires square attention");
    const std::size_t hd = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor out = Tensor::zeros({a, d});
    // probs[h][i*b + j]; causal rows store zeros beyond the diagonal
    std::vector<std::vector<double>> probs(heads, std::vector<double>(a * b, 0.0));
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        std::vector<double>& p = probs[h];
        for (std::size_t i = 0; i < a; ++i) {
            const std::size_t jmax = causal ? i + 1 : b;
            const double* qrow = q.data().data() + i * d + off;
            double mx = -1e300;
            for (std::size_t j = 0; j < jmax; ++j) {
                const double* krow = k.data().data() + j * d + off;
                double s = 0.0;
                for (std::size_t t = 0; t < hd; ++t) s += qrow[t] * krow[t];
                s *= sc;
                p[i * b + j] = s;
                mx = std::max(mx, s);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j < jmax; ++j) {
                p[i * b + j] = std::exp(p[i * b + j] - mx);
                sum += p[i * b + j];
            }
            double* orow = out.mutable_data().data() + i * d + off;
            for (std::size_t j = 0; j < jmax; ++j) {
                p[i * b + j] /= sum;
                const double* vrow = v.data().data() + j * d + off;
                const double pij = p[i * b + j];
                for (std::size_t t = 0; t < hd; ++t) orow[t] += pij * vrow[t];
            }
        }
    }
    detail::check_finite(out.data(), "attention");
    if (detail::track(g, {&q, &k, &v})) {
        out.set_requires_grad(true);
        auto qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl();
        g.record([qi, ki, vi, oi, probs = std::move(probs), a, b, d, hd, heads, sc, causal] {
            const bool nq = qi->requires_grad, nk = ki->requires_grad, nv = vi->requires_grad;
            if (nq && qi->grad.empty()) qi->grad.assign(qi->data.size(), 0.0);
            if (nk && ki->grad.empty()) ki->grad.assign(ki->data.size(), 0.0);
            if (nv && vi->grad.empty()) vi->grad.assign(vi->data.size(), 0.0);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * hd;
                const std::vector<double>& p = probs[h];
                for (std::size_t i = 0; i < a; ++i) {
                    const std::size_t jmax = causal ? i + 1 : b;
                    const double* dout = oi->grad.data() + i * d + off;
                    // dp[j] = dout . v_j ; ds = p .* (dp - sum_j p_j dp_j)
                    double dot = 0.0;
                    std::vector<double> dp(jmax);
                    for (std::size_t j = 0; j < jmax; ++j) {
                        const double* vrow = vi->data.data() + j * d + off;
                        double acc = 0.0;
                        for (std::size_t t = 0; t < hd; ++t) acc += dout[t] * vrow[t];
                        dp[j] = acc;
                        dot += p[i * b + j] * acc;
                        if (nv) {
                            double* dvrow = vi->grad.data() + j * d + off;
                            const double pij = p[i * b + j];
                            for (std::size_t t = 0; t < hd; ++t) dvrow[t] += pij * dout[t];
                        }
                    }
                    if (nq || nk) {
                        const double* qrow = qi->data.data() + i * d + off;
                        for (std::size_t j = 0; j < jmax; ++j) {
                            const double ds = p[i * b + j] * (dp[j] - dot) * sc;
                            const double* krow = ki->data.data() + j * d + off;
                            if (nq) {
                                double* dqrow = qi->grad.data() + i * d + off;
                                for (std::size_t t = 0; t < hd; ++t) dqrow[t] += ds * krow[t];
                            }
                            if (nk) {
                                double* dkrow = ki->grad.data() + j * d + off;
                                for (std::size_t t = 0; t < hd; ++t) dkrow[t] += ds * qrow[t];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Mean of -log softmax(logits)[target] over masked-in rows. Gradient at a
// masked-in row is (softmax - onehot)/count; masked-out rows get exact zero.
inline Tensor cross_entropy_next_token(Graph& g, const Tensor& logits, const std::vector<int>& targets,
                                       const std::vector<bool>& mask) {
    const std::size_t r = logits.rows(), v = logits.cols();
    if (targets.size() != r || mask.size() != r)
        throw shape_error("cross_entropy: targets/mask length must equal logit rows");
    std::size_t count = 0;
    for (std::size_t i = 0; i < r; ++i) {
        if (!mask[i]) continue;
        ++count;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
            throw shape_error("cross_entropy: target id out of vocabulary");
    }
    if (count == 0) throw data_error("cross_entropy: all positions masked out (degenerate batch)");

    std::vector<double> probs(r * v, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (!mask[i]) continue;
        const double* row = logits.data().data() + i * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(row[j] - mx);
            sum += probs[i * v + j];
        }
        for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= sum;
        total += -std::log(probs[i * v + targets[i]]);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(count));
    detail::check_finite(out.data(), "cross_entropy");
    if (detail::track(g, {&logits})) {
        out.set_requires_grad(true);
        auto li = logits.impl(), oi = out.impl();
        g.record([li, oi, probs = std::move(probs), targets, mask, r, v, count] {
            if (li->grad.empty()) li->grad.assign(li->data.size(), 0.0);
            const double d0 = oi->grad[0] / static_cast<double>(count);
            for (std::size_t i = 0; i < r; ++i) {
                if (!mask[i]) continue;
                double* dl = li->grad.data() + i * v;
                const double* p = probs.data() + i * v;
                for (std::size_t j = 0; j < v; ++j) dl[j] += d0 * p[j];
                dl[targets[i]] -= d0;
            }
        });
    }
    return out;
}

// out = (1 - sigma) .* a + sigma .* b, elementwise
inline Tensor gated_mix(Graph& g, const Tensor& sigma, const Tensor& a, const Tensor& b) {
    if (sigma.dims() != a.dims() || a.dims() != b.dims())
        throw shape_error("gated_mix: shape mismatch");
    Tensor out = Tensor::zeros(a.dims());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double s = sigma.data()[i];
        out.mutable_data()[i] = (1.0 - s) * a.data()[i] + s * b.data()[i];
    }
    detail::check_finite(out.data(), "gated_mix");
    if (detail::track(g, {&sigma, &a, &b})) {
        out.set_requires_grad(true);
        auto si = sigma.impl(), ai = a.impl(), bi = b.impl(), oi = out.impl();
        g.record([si, ai, bi, oi, n] {
            if (si->requires_grad) {
                if (si->grad.empty()) si->grad.assign(si->data.size(), 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    si->grad[i] += oi->grad[i] * (bi->data[i] - ai->data[i]);
            }
            if (ai->requires_grad) {
                if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
                for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * (1.0 - si->data[i]);
            }
            if (bi->requires_grad) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * si->data[i];
            }
        });
    }
    return out;
}

inline Tensor sum_all(Graph& g, const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    detail::check_finite(out.data(), "sum_all");
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g.record([xi, oi] {
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            for (double& gi : xi->grad) gi += oi->grad[0];
        });
    }
    return out;
}

// sum_i w_i * x_i / sum_i w_i over scalar tensors; weights are constants
inline Tensor weighted_mean_scalars(Graph& g, const std::vector<Tensor>& xs,
                                    const std::vector<double>& weights) {
    if (xs.empty() || xs.size() != weights.size())
        throw data_error("weighted_mean_scalars: empty or mismatched inputs");
    double wsum = 0.0, acc = 0.0;
    bool any_grad = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        acc += weights[i] * xs[i].value();
        wsum += weights[i];
        any_grad = any_grad || xs[i].requires_grad();
    }
    if (wsum <= 0.0) throw data_error("weighted_mean_scalars: non-positive total weight");
    Tensor out = Tensor::scalar(acc / wsum);
    detail::check_finite(out.data(), "weighted_mean_scalars");
    if (g.recording() && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<Tensor::Impl>> impls;
        for (const Tensor& t : xs) impls.push_back(t.impl());
        auto oi = out.impl();
        g.record([impls, oi, weights, wsum] {
            for (std::size_t i = 0; i < impls.size(); ++i) {
                if (!impls[i]->requires_grad) continue;
                if (impls[i]->grad.empty()) impls[i]->grad.assign(1, 0.0);
                impls[i]->grad[0] += oi->grad[0] * weights[i] / wsum;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

// Named parameter tree with per-entry group labels. Groups drive freeze
// plans (requires_grad flips) and checkpoint/report bucketing.
class ParameterStore {
  public:
    struct Entry {
        std::string name;
        Tensor tensor;
        std::string group;
    };

    void add(const std::string& name, Tensor tensor, const std::string& group) {
        if (index_.count(name)) throw config_error("parameter name already registered: " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(tensor), group});
    }

    void erase(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw config_error("parameter not found: " + name);
        entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(it->second));
        index_.clear();
        for (std::size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].name] = i;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw config_error("parameter not found: " + name);
        return entries_[it->second].tensor;
    }

    const std::vector<Entry>& entries() const { return entries_; }

    std::set<std::string> groups() const {
        std::set<std::string> out;
        for (const Entry& e : entries_) out.insert(e.group);
        return out;
    }

    bool has_group(const std::string& group) const {
        for (const Entry& e : entries_)
            if (e.group == group) return true;
        return false;
    }

    // Exactly the named groups become trainable; everything else is frozen.
    void set_trainable(const std::set<std::string>& trainable_groups) {
        for (Entry& e : entries_) e.tensor.set_requires_grad(trainable_groups.count(e.group) != 0);
    }

    void zero_grad_trainable() {
        for (Entry& e : entries_)
            if (e.tensor.requires_grad()) e.tensor.zero_grad();
    }

    void drop_all_grads() {
        for (Entry& e : entries_) e.tensor.drop_grad();
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const Entry& e : entries_)
            if (e.tensor.requires_grad()) n += e.tensor.size();
        return n;
    }

  private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t coords_checked = 0;
};

// Central-difference probe of sampled coordinates of every trainable
// parameter against the analytic gradient of `f` (a deterministic scalar
// forward pass). Relative error denominator: max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult grad_check(const std::function<Tensor(Graph&)>& f, ParameterStore& params,
                                  double eps, std::size_t probes_per_tensor = 4) {
    if (eps < 1e-7 || eps > 1e-3) throw config_error("grad_check: eps must lie in [1e-7, 1e-3]");

    params.zero_grad_trainable();
    Graph g;
    Tensor loss = f(g);
    g.backward(loss);

    auto eval = [&](const std::string& pname) {
        Graph ng(false);
        Tensor l = f(ng);
        if (!std::isfinite(l.value()))
            throw numeric_error("grad_check: non-finite loss while probing " + pname);
        return l.value();
    };

    GradCheckResult result;
    for (const ParameterStore::Entry& e : params.entries()) {
        if (!e.tensor.requires_grad()) continue;
        Tensor t = e.tensor;
        const std::size_t n = t.size();
        const std::vector<double>& analytic = t.grad_const();
        // Probe the largest-magnitude analytic coordinates: they are the
        // best conditioned for finite differences, and a wrong backward or
        // a dead gradient path still fails loudly on them.
        std::vector<std::size_t> coords(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        if (n > probes_per_tensor) {
            std::stable_sort(coords.begin(), coords.end(), [&](std::size_t a, std::size_t b) {
                const double ga = analytic.empty() ? 0.0 : std::fabs(analytic[a]);
                const double gb = analytic.empty() ? 0.0 : std::fabs(analytic[b]);
                return ga > gb;
            });
            coords.resize(probes_per_tensor);
        }
        for (std::size_t c : coords) {
            double& x = t.mutable_data()[c];
            const double saved = x;
            x = saved + eps;
            const double fp = eval(e.name);
            x = saved - eps;
            const double fm = eval(e.name);
            x = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic.empty() ? 0.0 : analytic[c];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            ++result.coords_checked;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = e.name;
            }
        }
    }
    return result;
}

}  // namespace qadapt
