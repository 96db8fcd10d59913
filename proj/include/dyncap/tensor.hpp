#pragma once

// Dense row-major tensors with reverse-mode autodiff on an eagerly built
// tape. Values are computed immediately; every op that touches a tracked
// tensor records a backward closure that works on raw buffers (never on the
// tape, so the graph cannot grow during backward()). Scalar type is a
// construction-time choice: float for the training path, double for the
// finite-difference gradient checks.

#define EIGEN_DONT_PARALLELIZE 1
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dyncap/errors.hpp"
#include "dyncap/rng.hpp"

namespace dyncap {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 0);
    std::int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = acc;
        acc *= s[static_cast<std::size_t>(i)];
    }
    return st;
}

// Trailing-dimension broadcast rule (numpy style): shapes are right-aligned,
// and each pair of dims must match or one of them must be 1. Missing leading
// dims count as 1.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const int da = i < r - ra ? 1 : a[i - (r - ra)];
        const int db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` right-aligned against an out shape of rank r, with stride 0
// on broadcast dims.
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, std::size_t r) {
    const auto own = row_major_strides(in);
    std::vector<std::int64_t> st(r, 0);
    const std::size_t off = r - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        st[off + i] = in[i] == 1 ? 0 : own[i];
    }
    return st;
}

template <class T>
class TensorT {
public:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;  // sized on first use
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backprop;  // null on leaves

        void ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        }
    };

    TensorT() = default;

    static TensorT from_data(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        TensorT t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        return t;
    }

    static TensorT full(const Shape& shape, T v) {
        return from_data(shape, std::vector<T>(static_cast<std::size_t>(shape_numel(shape)), v));
    }
    static TensorT zeros(const Shape& shape) { return full(shape, T(0)); }
    static TensorT ones(const Shape& shape) { return full(shape, T(1)); }
    static TensorT scalar(T v) { return from_data({}, {v}); }

    static TensorT uniform(const Shape& shape, RngState& rng, T lo, T hi) {
        std::vector<T> d(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& x : d) x = lo + static_cast<T>(rng.next_uniform()) * (hi - lo);
        return from_data(shape, std::move(d));
    }

    static TensorT gaussian(const Shape& shape, RngState& rng, T mean = T(0), T stddev = T(1)) {
        std::vector<T> d(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& x : d) x = mean + stddev * static_cast<T>(rng.next_gaussian());
        return from_data(shape, std::move(d));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(n_->value.size()); }
    int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }

    const std::vector<T>& data() const { return n_->value; }
    // Leaves only (optimizer updates, test setup); interior nodes are
    // immutable once built.
    std::vector<T>& mutable_data() { return n_->value; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->value[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    TensorT& set_requires_grad(bool b) {
        n_->requires_grad = b;
        if (b) n_->ensure_grad();
        return *this;
    }

    const std::vector<T>& grad() const { return n_->grad; }
    void zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), T(0)); }

    bool is_leaf() const { return !n_->backprop; }

    TensorT detach() const {
        TensorT t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = n_->shape;
        t.n_->value = n_->value;
        return t;
    }

    // Reverse-mode sweep from a scalar loss. Grads of interior nodes are
    // reset each call; leaf grads accumulate until zero_grad().
    void backward() const {
        if (numel() != 1) {
            throw ShapeError("backward() needs a scalar loss, got " + shape_str(shape()));
        }
        if (!n_->requires_grad) return;

        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* p = node->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        for (Node* node : order) {
            node->ensure_grad();
            if (node->backprop) std::fill(node->grad.begin(), node->grad.end(), T(0));
        }
        n_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backprop) (*it)->backprop(**it);
        }
    }

    std::shared_ptr<Node> node() const { return n_; }

    static TensorT make_op(Shape shape, std::vector<T> value,
                           std::vector<std::shared_ptr<Node>> parents,
                           std::function<void(Node&)> backprop) {
        TensorT t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(value);
        bool track = false;
        for (const auto& p : parents) track = track || p->requires_grad;
        if (track) {
            t.n_->requires_grad = true;
            t.n_->parents = std::move(parents);
            t.n_->backprop = std::move(backprop);
            for (auto& p : t.n_->parents) p->ensure_grad();
        }
        return t;
    }

private:
    std::shared_ptr<Node> n_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using MapCM = Eigen::Map<const MatRM<T>>;

// C[m,n] (+)= A[m,k] * B[k,n] on raw row-major buffers.
template <class T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate,
          bool trans_a = false, bool trans_b = false) {
    MapM<T> C(c, m, n);
    if (!trans_a && !trans_b) {
        MapCM<T> A(a, m, k), B(b, k, n);
        if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
    } else if (trans_a && !trans_b) {
        MapCM<T> A(a, k, m), B(b, k, n);
        if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
    } else if (!trans_a && trans_b) {
        MapCM<T> A(a, m, k), B(b, n, k);
        if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
    } else {
        MapCM<T> A(a, k, m), B(b, n, k);
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
}

// Odometer over an output shape that tracks flat offsets into two
// broadcast inputs.
struct BroadcastIter {
    Shape shape;
    std::vector<std::int64_t> sa, sb;
    std::vector<int> idx;
    std::int64_t off_a = 0, off_b = 0;

    BroadcastIter(const Shape& out, const Shape& a, const Shape& b)
        : shape(out), sa(broadcast_strides(a, out.size())), sb(broadcast_strides(b, out.size())),
          idx(out.size(), 0) {}

    void advance() {
        for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
            const auto u = static_cast<std::size_t>(i);
            ++idx[u];
            off_a += sa[u];
            off_b += sb[u];
            if (idx[u] < shape[u]) return;
            off_a -= sa[u] * shape[u];
            off_b -= sb[u] * shape[u];
            idx[u] = 0;
        }
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

enum class EwiseKind { Add, Mul };

template <class T>
TensorT<T> ewise(const TensorT<T>& a, const TensorT<T>& b, EwiseKind kind) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    const std::int64_t n = shape_numel(out_shape);
    std::vector<T> out(static_cast<std::size_t>(n));

    const auto& av = a.data();
    const auto& bv = b.data();
    if (a.shape() == b.shape()) {
        if (kind == EwiseKind::Add) {
            for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
        } else {
            for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
        }
    } else {
        detail::BroadcastIter it(out_shape, a.shape(), b.shape());
        for (std::int64_t i = 0; i < n; ++i, it.advance()) {
            out[i] = kind == EwiseKind::Add ? av[it.off_a] + bv[it.off_b]
                                            : av[it.off_a] * bv[it.off_b];
        }
    }

    auto an = a.node();
    auto bn = b.node();
    const Shape as = a.shape(), bs = b.shape();
    return TensorT<T>::make_op(
        out_shape, std::move(out), {an, bn}, [an, bn, as, bs, kind](auto& self) {
            const std::int64_t n = static_cast<std::int64_t>(self.value.size());
            const bool same = as == bs;
            if (kind == EwiseKind::Add) {
                if (same) {
                    if (an->requires_grad)
                        for (std::int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[i];
                    if (bn->requires_grad)
                        for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += self.grad[i];
                } else {
                    detail::BroadcastIter it(self.shape, as, bs);
                    for (std::int64_t i = 0; i < n; ++i, it.advance()) {
                        if (an->requires_grad) an->grad[it.off_a] += self.grad[i];
                        if (bn->requires_grad) bn->grad[it.off_b] += self.grad[i];
                    }
                }
            } else {
                if (same) {
                    for (std::int64_t i = 0; i < n; ++i) {
                        if (an->requires_grad) an->grad[i] += self.grad[i] * bn->value[i];
                        if (bn->requires_grad) bn->grad[i] += self.grad[i] * an->value[i];
                    }
                } else {
                    detail::BroadcastIter it(self.shape, as, bs);
                    for (std::int64_t i = 0; i < n; ++i, it.advance()) {
                        if (an->requires_grad) an->grad[it.off_a] += self.grad[i] * bn->value[it.off_b];
                        if (bn->requires_grad) bn->grad[it.off_b] += self.grad[i] * an->value[it.off_a];
                    }
                }
            }
        });
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) { return ewise(a, b, EwiseKind::Add); }
template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) { return ewise(a, b, EwiseKind::Mul); }

template <class T>
TensorT<T> scale(const TensorT<T>& x, T c) {
    std::vector<T> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
    auto xn = x.node();
    return TensorT<T>::make_op(x.shape(), std::move(out), {xn}, [xn, c](auto& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += c * self.grad[i];
    });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) { return add(a, scale(b, T(-1))); }

enum class UnaryKind { Relu, Sigmoid };

template <class T>
TensorT<T> unary(const TensorT<T>& x, UnaryKind kind) {
    std::vector<T> out(x.data().size());
    if (kind == UnaryKind::Relu) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) {
            const T v = x.data()[i];
            // Evaluate on the non-overflowing side of exp.
            out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                               : std::exp(v) / (T(1) + std::exp(v));
        }
    }
    auto xn = x.node();
    if (kind == UnaryKind::Relu) {
        return TensorT<T>::make_op(x.shape(), std::move(out), {xn}, [xn](auto& self) {
            // relu'(0) defined as 0.
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (xn->value[i] > T(0)) xn->grad[i] += self.grad[i];
            }
        });
    }
    std::vector<T> y = out;
    return TensorT<T>::make_op(x.shape(), std::move(out), {xn}, [xn, y = std::move(y)](auto& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            xn->grad[i] += self.grad[i] * y[i] * (T(1) - y[i]);
        }
    });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) { return unary(x, UnaryKind::Relu); }
template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) { return unary(x, UnaryKind::Sigmoid); }

// ---------------------------------------------------------------------------
// Matmul: a[..,m,k] x b[..,k,n] with numpy-style broadcast over batch dims.

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul needs rank >= 2, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const int kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != kb) {
        throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    const Shape batch = broadcast_shapes(batch_a, batch_b);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    const std::int64_t nbatch = shape_numel(batch);
    std::vector<T> out(static_cast<std::size_t>(nbatch) * m * n);

    detail::BroadcastIter it(batch, batch_a, batch_b);
    std::vector<std::int64_t> offs_a(static_cast<std::size_t>(nbatch));
    std::vector<std::int64_t> offs_b(static_cast<std::size_t>(nbatch));
    for (std::int64_t i = 0; i < nbatch; ++i, it.advance()) {
        offs_a[i] = it.off_a * m * k;
        offs_b[i] = it.off_b * k * n;
        detail::gemm(a.data().data() + offs_a[i], b.data().data() + offs_b[i],
                     out.data() + i * m * n, m, k, n, false);
    }

    auto an = a.node();
    auto bn = b.node();
    return TensorT<T>::make_op(
        std::move(out_shape), std::move(out), {an, bn},
        [an, bn, offs_a = std::move(offs_a), offs_b = std::move(offs_b), m, k, n](auto& self) {
            const std::int64_t nbatch = static_cast<std::int64_t>(offs_a.size());
            for (std::int64_t i = 0; i < nbatch; ++i) {
                const T* g = self.grad.data() + i * m * n;
                if (an->requires_grad) {
                    // dA += dC * B^T  (accumulation also realizes broadcast-sum)
                    detail::gemm(g, bn->value.data() + offs_b[i], an->grad.data() + offs_a[i],
                                 m, n, k, true, false, true);
                }
                if (bn->requires_grad) {
                    // dB += A^T * dC
                    detail::gemm(an->value.data() + offs_a[i], g, bn->grad.data() + offs_b[i],
                                 k, m, n, true, true, false);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Softmax family along an axis.

namespace detail {
struct AxisSplit {
    std::int64_t outer, len, inner;
};

inline AxisSplit axis_split(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    AxisSplit sp{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) sp.inner *= s[i];
    if (sp.len == 0) throw ShapeError("softmax over empty axis in " + shape_str(s));
    return sp;
}
}  // namespace detail

template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
    const auto sp = detail::axis_split(x.shape(), axis);
    std::vector<T> out(x.data().size());
    const auto& xv = x.data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            const std::int64_t base = o * sp.len * sp.inner + i;
            T mx = xv[base];
            for (std::int64_t j = 1; j < sp.len; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
            T sum = T(0);
            for (std::int64_t j = 0; j < sp.len; ++j) {
                const T e = std::exp(xv[base + j * sp.inner] - mx);
                out[base + j * sp.inner] = e;
                sum += e;
            }
            for (std::int64_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= sum;
        }
    }
    auto xn = x.node();
    std::vector<T> y = out;
    return TensorT<T>::make_op(x.shape(), std::move(out), {xn},
                               [xn, y = std::move(y), sp](auto& self) {
                                   for (std::int64_t o = 0; o < sp.outer; ++o) {
                                       for (std::int64_t i = 0; i < sp.inner; ++i) {
                                           const std::int64_t base = o * sp.len * sp.inner + i;
                                           T dot = T(0);
                                           for (std::int64_t j = 0; j < sp.len; ++j) {
                                               const std::int64_t u = base + j * sp.inner;
                                               dot += self.grad[u] * y[u];
                                           }
                                           for (std::int64_t j = 0; j < sp.len; ++j) {
                                               const std::int64_t u = base + j * sp.inner;
                                               xn->grad[u] += y[u] * (self.grad[u] - dot);
                                           }
                                       }
                                   }
                               });
}

template <class T>
TensorT<T> log_softmax(const TensorT<T>& x, int axis) {
    const auto sp = detail::axis_split(x.shape(), axis);
    std::vector<T> out(x.data().size());
    const auto& xv = x.data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            const std::int64_t base = o * sp.len * sp.inner + i;
            T mx = xv[base];
            for (std::int64_t j = 1; j < sp.len; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
            T sum = T(0);
            for (std::int64_t j = 0; j < sp.len; ++j) sum += std::exp(xv[base + j * sp.inner] - mx);
            const T lse = mx + std::log(sum);
            for (std::int64_t j = 0; j < sp.len; ++j) {
                out[base + j * sp.inner] = xv[base + j * sp.inner] - lse;
            }
        }
    }
    auto xn = x.node();
    std::vector<T> y = out;
    return TensorT<T>::make_op(x.shape(), std::move(out), {xn},
                               [xn, y = std::move(y), sp](auto& self) {
                                   for (std::int64_t o = 0; o < sp.outer; ++o) {
                                       for (std::int64_t i = 0; i < sp.inner; ++i) {
                                           const std::int64_t base = o * sp.len * sp.inner + i;
                                           T gsum = T(0);
                                           for (std::int64_t j = 0; j < sp.len; ++j) {
                                               gsum += self.grad[base + j * sp.inner];
                                           }
                                           for (std::int64_t j = 0; j < sp.len; ++j) {
                                               const std::int64_t u = base + j * sp.inner;
                                               xn->grad[u] += self.grad[u] - std::exp(y[u]) * gsum;
                                           }
                                       }
                                   }
                               });
}

// ---------------------------------------------------------------------------
// conv2d: x[B,H,W,Cin] * w[kh,kw,Cin,Cout] -> [B,H,W,Cout], stride 1,
// same zero padding, cross-correlation convention (no kernel flip).

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw ShapeError("conv2d expects x[B,H,W,Cin], w[kh,kw,Cin,Cout]; got " +
                         shape_str(x.shape()) + ", " + shape_str(w.shape()));
    }
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
    const int kh = w.dim(0), kw = w.dim(1), Cout = w.dim(3);
    if ((kh != 1 && kh != 3) || (kw != 1 && kw != 3)) {
        throw ShapeError("conv2d supports 1x1 and 3x3 kernels, got " + shape_str(w.shape()));
    }
    if (w.dim(2) != Cin) {
        throw ShapeError("conv2d channel mismatch: x " + shape_str(x.shape()) + " vs w " +
                         shape_str(w.shape()));
    }
    const int ph = kh / 2, pw = kw / 2;
    const std::int64_t rows = static_cast<std::int64_t>(B) * H * W;
    const std::int64_t cols = static_cast<std::int64_t>(kh) * kw * Cin;

    std::vector<T> im2col(static_cast<std::size_t>(rows * cols), T(0));
    const auto& xv = x.data();
    std::int64_t row = 0;
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j, ++row) {
                T* dst = im2col.data() + row * cols;
                for (int di = 0; di < kh; ++di) {
                    const int si = i + di - ph;
                    if (si < 0 || si >= H) continue;
                    for (int dj = 0; dj < kw; ++dj) {
                        const int sj = j + dj - pw;
                        if (sj < 0 || sj >= W) continue;
                        const T* src = xv.data() + ((static_cast<std::int64_t>(b) * H + si) * W + sj) * Cin;
                        std::copy(src, src + Cin, dst + (di * kw + dj) * Cin);
                    }
                }
            }
        }
    }

    std::vector<T> out(static_cast<std::size_t>(rows) * Cout);
    detail::gemm(im2col.data(), w.data().data(), out.data(), static_cast<int>(rows),
                 static_cast<int>(cols), Cout, false);

    auto xn = x.node();
    auto wn = w.node();
    return TensorT<T>::make_op(
        {B, H, W, Cout}, std::move(out), {xn, wn},
        [xn, wn, im2col = std::move(im2col), B, H, W, Cin, Cout, kh, kw, ph, pw](auto& self) {
            const std::int64_t rows = static_cast<std::int64_t>(B) * H * W;
            const std::int64_t cols = static_cast<std::int64_t>(kh) * kw * Cin;
            if (wn->requires_grad) {
                // dW += M^T * dOut
                detail::gemm(im2col.data(), self.grad.data(), wn->grad.data(),
                             static_cast<int>(cols), static_cast<int>(rows), Cout, true, true, false);
            }
            if (xn->requires_grad) {
                // dM = dOut * W^T, then scatter back (col2im).
                std::vector<T> dcol(static_cast<std::size_t>(rows * cols));
                detail::gemm(self.grad.data(), wn->value.data(), dcol.data(),
                             static_cast<int>(rows), Cout, static_cast<int>(cols), false, false, true);
                std::int64_t row = 0;
                for (int b = 0; b < B; ++b) {
                    for (int i = 0; i < H; ++i) {
                        for (int j = 0; j < W; ++j, ++row) {
                            const T* src = dcol.data() + row * cols;
                            for (int di = 0; di < kh; ++di) {
                                const int si = i + di - ph;
                                if (si < 0 || si >= H) continue;
                                for (int dj = 0; dj < kw; ++dj) {
                                    const int sj = j + dj - pw;
                                    if (sj < 0 || sj >= W) continue;
                                    T* dst = xn->grad.data() +
                                             ((static_cast<std::int64_t>(b) * H + si) * W + sj) * Cin;
                                    const T* s = src + (di * kw + dj) * Cin;
                                    for (int c = 0; c < Cin; ++c) dst[c] += s[c];
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Batch normalization over (B,H,W) per channel, NHWC layout.

template <class T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      std::vector<T>& running_mean, std::vector<T>& running_var,
                      T momentum, T eps, bool training) {
    if (x.rank() != 4) throw ShapeError("batch_norm expects [B,H,W,C], got " + shape_str(x.shape()));
    const int C = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C || static_cast<int>(running_mean.size()) != C ||
        static_cast<int>(running_var.size()) != C) {
        throw ShapeError("batch_norm channel width mismatch for C=" + std::to_string(C));
    }
    const std::int64_t M = x.numel() / C;  // B*H*W
    if (training && M == 1) {
        throw NumericError("batch_norm train mode needs B*H*W > 1 (degenerate variance)");
    }

    const auto& xv = x.data();
    std::vector<T> mean(C), var(C);
    if (training) {
        std::fill(mean.begin(), mean.end(), T(0));
        std::fill(var.begin(), var.end(), T(0));
        for (std::int64_t r = 0; r < M; ++r) {
            const T* p = xv.data() + r * C;
            for (int c = 0; c < C; ++c) mean[c] += p[c];
        }
        for (int c = 0; c < C; ++c) mean[c] /= static_cast<T>(M);
        for (std::int64_t r = 0; r < M; ++r) {
            const T* p = xv.data() + r * C;
            for (int c = 0; c < C; ++c) {
                const T d = p[c] - mean[c];
                var[c] += d * d;
            }
        }
        for (int c = 0; c < C; ++c) var[c] /= static_cast<T>(M);
        // Running stats follow the usual convention: unbiased variance.
        for (int c = 0; c < C; ++c) {
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean[c];
            running_var[c] = (T(1) - momentum) * running_var[c] +
                             momentum * var[c] * static_cast<T>(M) / static_cast<T>(M - 1);
        }
    } else {
        mean.assign(running_mean.begin(), running_mean.end());
        var.assign(running_var.begin(), running_var.end());
    }

    std::vector<T> inv_std(C);
    for (int c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

    std::vector<T> xhat(xv.size()), out(xv.size());
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (std::int64_t r = 0; r < M; ++r) {
        const T* p = xv.data() + r * C;
        T* h = xhat.data() + r * C;
        T* o = out.data() + r * C;
        for (int c = 0; c < C; ++c) {
            h[c] = (p[c] - mean[c]) * inv_std[c];
            o[c] = gv[c] * h[c] + bv[c];
        }
    }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn2 = beta.node();
    return TensorT<T>::make_op(
        x.shape(), std::move(out), {xn, gn, bn2},
        [xn, gn, bn2, xhat = std::move(xhat), inv_std = std::move(inv_std), C, M,
         training](auto& self) {
            std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
            for (std::int64_t r = 0; r < M; ++r) {
                const T* g = self.grad.data() + r * C;
                const T* h = xhat.data() + r * C;
                for (int c = 0; c < C; ++c) {
                    sum_g[c] += g[c];
                    sum_gx[c] += g[c] * h[c];
                }
            }
            if (gn->requires_grad) for (int c = 0; c < C; ++c) gn->grad[c] += sum_gx[c];
            if (bn2->requires_grad) for (int c = 0; c < C; ++c) bn2->grad[c] += sum_g[c];
            if (xn->requires_grad) {
                const auto& gv = gn->value;
                if (training) {
                    // Batch stats are functions of x, so they carry gradient.
                    for (std::int64_t r = 0; r < M; ++r) {
                        const T* g = self.grad.data() + r * C;
                        const T* h = xhat.data() + r * C;
                        T* gx = xn->grad.data() + r * C;
                        for (int c = 0; c < C; ++c) {
                            gx[c] += gv[c] * inv_std[c] *
                                     (g[c] - sum_g[c] / static_cast<T>(M) -
                                      h[c] * sum_gx[c] / static_cast<T>(M));
                        }
                    }
                } else {
                    for (std::int64_t r = 0; r < M; ++r) {
                        const T* g = self.grad.data() + r * C;
                        T* gx = xn->grad.data() + r * C;
                        for (int c = 0; c < C; ++c) gx[c] += gv[c] * inv_std[c] * g[c];
                    }
                }
            }
        });
}

// Layer norm over the last axis.
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps) {
    const int D = x.dim(x.rank() - 1);
    if (gamma.numel() != D || beta.numel() != D) {
        throw ShapeError("layer_norm width mismatch for D=" + std::to_string(D));
    }
    const std::int64_t rows = x.numel() / D;
    const auto& xv = x.data();
    std::vector<T> xhat(xv.size()), out(xv.size()), inv_std(static_cast<std::size_t>(rows));
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* p = xv.data() + r * D;
        T mean = T(0);
        for (int c = 0; c < D; ++c) mean += p[c];
        mean /= static_cast<T>(D);
        T var = T(0);
        for (int c = 0; c < D; ++c) {
            const T d = p[c] - mean;
            var += d * d;
        }
        var /= static_cast<T>(D);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        T* h = xhat.data() + r * D;
        T* o = out.data() + r * D;
        for (int c = 0; c < D; ++c) {
            h[c] = (p[c] - mean) * is;
            o[c] = gv[c] * h[c] + bv[c];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return TensorT<T>::make_op(
        x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), D](auto& self) {
            const std::int64_t rows = static_cast<std::int64_t>(inv_std.size());
            const auto& gv = gn->value;
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* g = self.grad.data() + r * D;
                const T* h = xhat.data() + r * D;
                T sum_gh = T(0), sum_ghh = T(0);
                for (int c = 0; c < D; ++c) {
                    const T gh = g[c] * gv[c];
                    sum_gh += gh;
                    sum_ghh += gh * h[c];
                    if (gn->requires_grad) gn->grad[c] += g[c] * h[c];
                    if (bn->requires_grad) bn->grad[c] += g[c];
                }
                if (xn->requires_grad) {
                    T* gx = xn->grad.data() + r * D;
                    const T is = inv_std[static_cast<std::size_t>(r)];
                    for (int c = 0; c < D; ++c) {
                        const T gh = g[c] * gv[c];
                        gx[c] += is * (gh - sum_gh / static_cast<T>(D) -
                                       h[c] * sum_ghh / static_cast<T>(D));
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Pooling over the spatial grid or the channel axis of [B,H,W,C].

enum class PoolDomain { Spatial, Channel };

template <class T>
TensorT<T> global_pool(const TensorT<T>& x, PoolDomain domain) {
    if (x.rank() != 4) throw ShapeError("global_pool expects [B,H,W,C], got " + shape_str(x.shape()));
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const auto& xv = x.data();
    auto xn = x.node();
    if (domain == PoolDomain::Spatial) {
        std::vector<T> out(static_cast<std::size_t>(B) * C, T(0));
        for (int b = 0; b < B; ++b) {
            for (std::int64_t r = 0; r < static_cast<std::int64_t>(H) * W; ++r) {
                const T* p = xv.data() + (b * static_cast<std::int64_t>(H) * W + r) * C;
                for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(b) * C + c] += p[c];
            }
        }
        const T inv = T(1) / static_cast<T>(H * W);
        for (auto& v : out) v *= inv;
        return TensorT<T>::make_op({B, C}, std::move(out), {xn}, [xn, B, H, W, C, inv](auto& self) {
            for (int b = 0; b < B; ++b) {
                for (std::int64_t r = 0; r < static_cast<std::int64_t>(H) * W; ++r) {
                    T* gx = xn->grad.data() + (b * static_cast<std::int64_t>(H) * W + r) * C;
                    const T* g = self.grad.data() + static_cast<std::size_t>(b) * C;
                    for (int c = 0; c < C; ++c) gx[c] += g[c] * inv;
                }
            }
        });
    }
    std::vector<T> out(static_cast<std::size_t>(B) * H * W, T(0));
    const std::int64_t rows = static_cast<std::int64_t>(B) * H * W;
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* p = xv.data() + r * C;
        T s = T(0);
        for (int c = 0; c < C; ++c) s += p[c];
        out[static_cast<std::size_t>(r)] = s / static_cast<T>(C);
    }
    return TensorT<T>::make_op({B, H, W}, std::move(out), {xn}, [xn, rows, C](auto& self) {
        const T inv = T(1) / static_cast<T>(C);
        for (std::int64_t r = 0; r < rows; ++r) {
            T* gx = xn->grad.data() + r * C;
            const T g = self.grad[static_cast<std::size_t>(r)] * inv;
            for (int c = 0; c < C; ++c) gx[c] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// Shape surgery.

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    }
    auto xn = x.node();
    std::vector<T> out = x.data();
    return TensorT<T>::make_op(std::move(new_shape), std::move(out), {xn}, [xn](auto& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    });
}

template <class T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& axes) {
    const int r = x.rank();
    if (static_cast<int>(axes.size()) != r) {
        throw ShapeError("permute axes rank mismatch for " + shape_str(x.shape()));
    }
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = x.dim(axes[static_cast<std::size_t>(i)]);
    const auto in_strides = row_major_strides(x.shape());
    std::vector<std::int64_t> strides(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

    const std::int64_t n = x.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    std::vector<int> idx(static_cast<std::size_t>(r), 0);
    std::int64_t src = 0;
    const auto& xv = x.data();
    for (std::int64_t i = 0; i < n; ++i) {
        out[static_cast<std::size_t>(i)] = xv[static_cast<std::size_t>(src)];
        for (int d = r - 1; d >= 0; --d) {
            const auto u = static_cast<std::size_t>(d);
            ++idx[u];
            src += strides[u];
            if (idx[u] < out_shape[u]) break;
            src -= strides[u] * out_shape[u];
            idx[u] = 0;
        }
    }
    auto xn = x.node();
    return TensorT<T>::make_op(std::move(out_shape), std::move(out), {xn},
                               [xn, strides, r](auto& self) {
                                   std::vector<int> idx(static_cast<std::size_t>(r), 0);
                                   std::int64_t src = 0;
                                   const std::int64_t n = static_cast<std::int64_t>(self.grad.size());
                                   for (std::int64_t i = 0; i < n; ++i) {
                                       xn->grad[static_cast<std::size_t>(src)] += self.grad[static_cast<std::size_t>(i)];
                                       for (int d = r - 1; d >= 0; --d) {
                                           const auto u = static_cast<std::size_t>(d);
                                           ++idx[u];
                                           src += strides[u];
                                           if (idx[u] < self.shape[u]) break;
                                           src -= strides[u] * self.shape[u];
                                           idx[u] = 0;
                                       }
                                   }
                               });
}

template <class T>
TensorT<T> transpose_last2(const TensorT<T>& x) {
    std::vector<int> axes(static_cast<std::size_t>(x.rank()));
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(x, axes);
}

template <class T>
TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len) {
    const auto sp = detail::axis_split(x.shape(), axis);
    if (start < 0 || len <= 0 || start + len > sp.len) {
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range on axis " + std::to_string(axis) + " of " +
                         shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::vector<T> out(static_cast<std::size_t>(sp.outer * len * sp.inner));
    const auto& xv = x.data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        const T* src = xv.data() + (o * sp.len + start) * sp.inner;
        T* dst = out.data() + o * len * sp.inner;
        std::copy(src, src + static_cast<std::int64_t>(len) * sp.inner, dst);
    }
    auto xn = x.node();
    return TensorT<T>::make_op(std::move(out_shape), std::move(out), {xn},
                               [xn, sp, start, len](auto& self) {
                                   for (std::int64_t o = 0; o < sp.outer; ++o) {
                                       T* dst = xn->grad.data() + (o * sp.len + start) * sp.inner;
                                       const T* g = self.grad.data() + o * len * sp.inner;
                                       for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * sp.inner; ++i) {
                                           dst[i] += g[i];
                                       }
                                   }
                               });
}

template <class T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat of zero tensors");
    const auto& first = xs.front().shape();
    int total = 0;
    for (const auto& x : xs) {
        if (x.rank() != static_cast<int>(first.size())) {
            throw ShapeError("concat rank mismatch: " + shape_str(first) + " vs " +
                             shape_str(x.shape()));
        }
        for (int d = 0; d < x.rank(); ++d) {
            if (d != axis && x.dim(d) != first[static_cast<std::size_t>(d)]) {
                throw ShapeError("concat non-axis dim mismatch: " + shape_str(first) + " vs " +
                                 shape_str(x.shape()));
            }
        }
        total += x.dim(axis);
    }
    Shape out_shape = first;
    out_shape[static_cast<std::size_t>(axis)] = total;
    const auto osp = detail::axis_split(out_shape, axis);

    std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<std::shared_ptr<typename TensorT<T>::Node>> parents;
    std::vector<int> lens;
    int pos = 0;
    for (const auto& x : xs) {
        const int len = x.dim(axis);
        const auto& xv = x.data();
        for (std::int64_t o = 0; o < osp.outer; ++o) {
            const T* src = xv.data() + o * len * osp.inner;
            T* dst = out.data() + (o * osp.len + pos) * osp.inner;
            std::copy(src, src + static_cast<std::int64_t>(len) * osp.inner, dst);
        }
        parents.push_back(x.node());
        lens.push_back(len);
        pos += len;
    }
    auto parents_copy = parents;
    return TensorT<T>::make_op(std::move(out_shape), std::move(out), std::move(parents),
                               [parents = std::move(parents_copy), lens, osp](auto& self) {
                                   int pos = 0;
                                   for (std::size_t k = 0; k < parents.size(); ++k) {
                                       const int len = lens[k];
                                       if (parents[k]->requires_grad) {
                                           for (std::int64_t o = 0; o < osp.outer; ++o) {
                                               const T* g = self.grad.data() + (o * osp.len + pos) * osp.inner;
                                               T* dst = parents[k]->grad.data() + o * len * osp.inner;
                                               for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * osp.inner; ++i) {
                                                   dst[i] += g[i];
                                               }
                                           }
                                       }
                                       pos += len;
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Lookup / reduction ops.

// table[V,D] indexed by ids -> [ids_shape..., D].
template <class T>
TensorT<T> embed(const TensorT<T>& table, const std::vector<int>& ids, const Shape& ids_shape) {
    if (table.rank() != 2) throw ShapeError("embed table must be [V,D]");
    if (shape_numel(ids_shape) != static_cast<std::int64_t>(ids.size())) {
        throw ShapeError("embed ids shape mismatch");
    }
    const int V = table.dim(0), D = table.dim(1);
    std::vector<T> out(ids.size() * static_cast<std::size_t>(D));
    const auto& tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || id >= V) throw ShapeError("embed id " + std::to_string(id) + " out of range");
        std::copy(tv.data() + static_cast<std::int64_t>(id) * D,
                  tv.data() + static_cast<std::int64_t>(id + 1) * D,
                  out.data() + static_cast<std::int64_t>(i) * D);
    }
    Shape out_shape = ids_shape;
    out_shape.push_back(D);
    auto tn = table.node();
    return TensorT<T>::make_op(std::move(out_shape), std::move(out), {tn}, [tn, ids, D](auto& self) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            T* dst = tn->grad.data() + static_cast<std::int64_t>(ids[i]) * D;
            const T* g = self.grad.data() + static_cast<std::int64_t>(i) * D;
            for (int d = 0; d < D; ++d) dst[d] += g[d];
        }
    });
}

// x[..., K] picked at ids[...] -> [...].
template <class T>
TensorT<T> gather_last(const TensorT<T>& x, const std::vector<int>& ids) {
    const int K = x.dim(x.rank() - 1);
    const std::int64_t rows = x.numel() / K;
    if (rows != static_cast<std::int64_t>(ids.size())) {
        throw ShapeError("gather_last ids count mismatch for " + shape_str(x.shape()));
    }
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    std::vector<T> out(static_cast<std::size_t>(rows));
    const auto& xv = x.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const int id = ids[static_cast<std::size_t>(r)];
        if (id < 0 || id >= K) throw ShapeError("gather_last id out of range");
        out[static_cast<std::size_t>(r)] = xv[r * K + id];
    }
    auto xn = x.node();
    return TensorT<T>::make_op(std::move(out_shape), std::move(out), {xn}, [xn, ids, K](auto& self) {
        for (std::size_t r = 0; r < ids.size(); ++r) {
            xn->grad[static_cast<std::int64_t>(r) * K + ids[r]] += self.grad[r];
        }
    });
}

template <class T>
TensorT<T> sum(const TensorT<T>& x) {
    T s = T(0);
    for (T v : x.data()) s += v;
    auto xn = x.node();
    return TensorT<T>::make_op({}, {s}, {xn}, [xn](auto& self) {
        const T g = self.grad[0];
        for (auto& gv : xn->grad) gv += g;
    });
}

template <class T>
TensorT<T> mean(const TensorT<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Forward emits `hard`, backward passes the gradient straight through to
// `soft` (straight-through estimator).
template <class T>
TensorT<T> straight_through(const TensorT<T>& soft, std::vector<T> hard) {
    if (static_cast<std::int64_t>(hard.size()) != soft.numel()) {
        throw ShapeError("straight_through value size mismatch");
    }
    auto sn = soft.node();
    return TensorT<T>::make_op(soft.shape(), std::move(hard), {sn}, [sn](auto& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) sn->grad[i] += self.grad[i];
    });
}

// Row-wise argmax over the last axis (plain values, not tracked).
template <class T>
std::vector<int> argmax_last(const TensorT<T>& x) {
    const int K = x.dim(x.rank() - 1);
    const std::int64_t rows = x.numel() / K;
    std::vector<int> out(static_cast<std::size_t>(rows));
    const auto& xv = x.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        int best = 0;
        for (int k = 1; k < K; ++k) {
            if (xv[r * K + k] > xv[r * K + best]) best = k;
        }
        out[static_cast<std::size_t>(r)] = best;
    }
    return out;
}

}  // namespace dyncap
