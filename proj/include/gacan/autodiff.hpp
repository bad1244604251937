#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Tape records every primitive applied during one forward pass. Each node
// keeps its forward value and a closure that maps the node's output gradient
// onto gradients of its inputs. Creation order is a valid topological order,
// so backward() is a single reverse sweep.

#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gacan/error.hpp"
#include "gacan/parameters.hpp"
#include "gacan/tensor.hpp"

namespace gacan::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t axis) const { return value().dim(axis); }
    std::size_t rank() const { return value().rank(); }
    std::size_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Receives the output gradient and one accumulator per input; accumulators
/// of inputs that need no gradient are null.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }

    /// Leaf that receives a gradient but is not bound to a parameter store.
    Var variable(Tensor value) { return push(std::move(value), {}, nullptr, true); }

    /// Leaf bound to store[name]; repeated lookups return the same node.
    Var parameter(ParameterStore& store, const std::string& name) {
        if (store_ && store_ != &store) throw ContractError("tape already bound to another parameter store");
        store_ = &store;
        if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var(this, it->second);
        Var v = push(store.value(name), {}, nullptr, true);
        param_ids_.emplace(name, v.id());
        return v;
    }

    /// Appends a computed node. The node requires a gradient iff any input does.
    Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
        bool needs = false;
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const auto& in : inputs) {
            if (in.tape_ != this) throw ContractError("operands recorded on different tapes");
            ids.push_back(in.id_);
            needs = needs || nodes_[in.id_].requires_grad;
        }
        if (!value.all_finite()) throw NumericError("non-finite value produced on tape");
        return push(std::move(value), std::move(ids), needs ? std::move(backward) : nullptr, needs);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

    /// Gradient of the last backward() target with respect to v (zeros if unreached).
    Tensor grad(Var v) const {
        const auto& n = nodes_.at(v.id());
        return n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. If a parameter store is bound, its
    /// gradient slots are overwritten: reached parameters get d loss / d p,
    /// the rest get zero.
    void backward(Var loss) {
        if (loss.tape_ != this) throw ContractError("loss recorded on a different tape");
        if (loss.value().size() != 1) {
            throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
        }
        for (auto& n : nodes_) n.grad = Tensor();
        ensure_grad(loss.id_).fill(1.0);

        std::vector<Tensor*> grads;
        for (std::size_t id = loss.id_ + 1; id-- > 0;) {
            auto& node = nodes_[id];
            if (!node.backward || node.grad.empty()) continue;
            grads.assign(node.inputs.size(), nullptr);
            for (std::size_t j = 0; j < node.inputs.size(); ++j) {
                if (nodes_[node.inputs[j]].requires_grad) grads[j] = &ensure_grad(node.inputs[j]);
            }
            node.backward(node.grad, grads);
        }

        if (store_) {
            store_->zero_grad();
            for (const auto& [name, id] : param_ids_) {
                if (!nodes_[id].grad.empty()) store_->grad(name) = nodes_[id].grad;
            }
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Tensor(), std::move(inputs), std::move(fn), requires_grad});
        return Var(this, nodes_.size() - 1);
    }

    Tensor& ensure_grad(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
        return n.grad;
    }

    std::deque<Node> nodes_; // stable references across push_back
    std::map<std::string, std::size_t> param_ids_;
    ParameterStore* store_ = nullptr;
};

inline const Tensor& Var::value() const {
    if (!tape_) throw ContractError("use of an empty Var");
    return tape_->value(id_);
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
    if (!a.valid() || a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
    return *a.tape();
}

/// C[m,n] (+)= A[m,k] * B[k,n]
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            if (aip == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

/// dA[m,k] += G[m,n] * B[k,n]^T
inline void gemm_nt(const double* g, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* gi = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
            da[i * k + p] += s;
        }
    }
}

/// dB[k,n] += A[m,k]^T * G[m,n]
inline void gemm_tn(const double* a, const double* g, double* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* gi = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            if (aip == 0.0) continue;
            double* dbp = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbp[j] += aip * gi[j];
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
    const Tensor& xv = x.value();
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
    Tape& tape = *x.tape();
    Tensor xin = xv;
    Tensor yout = y;
    return tape.record(std::move(y), {x},
                       [xin = std::move(xin), yout = std::move(yout), df](const Tensor& g, std::span<Tensor* const> gi) {
                           if (!gi[0]) return;
                           for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * df(xin[i], yout[i]);
                       });
}

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and structure
// ---------------------------------------------------------------------------

/// Matrix product of rank-2 operands, or batched product of rank-3 operands
/// with equal leading dimension.
inline Var matmul(const Var& a, const Var& b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const bool batched = av.rank() == 3 && bv.rank() == 3;
    const bool plain = av.rank() == 2 && bv.rank() == 2;
    if (!(batched || plain) || (batched && av.dim(0) != bv.dim(0)) ||
        av.shape()[av.rank() - 1] != bv.shape()[bv.rank() - 2]) {
        throw DimensionError("matmul shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    }
    const std::size_t batch = batched ? av.dim(0) : 1;
    const std::size_t m = av.shape()[av.rank() - 2];
    const std::size_t k = av.shape()[av.rank() - 1];
    const std::size_t n = bv.shape()[bv.rank() - 1];
    Tensor c(batched ? Shape{batch, m, n} : Shape{m, n});
    for (std::size_t q = 0; q < batch; ++q) {
        detail::gemm(av.raw().data() + q * m * k, bv.raw().data() + q * k * n, c.raw().data() + q * m * n, m, k, n);
    }
    return tape.record(std::move(c), {a, b},
                       [av, bv, batch, m, k, n](const Tensor& g, std::span<Tensor* const> gi) {
                           for (std::size_t q = 0; q < batch; ++q) {
                               const double* gq = g.raw().data() + q * m * n;
                               if (gi[0]) detail::gemm_nt(gq, bv.raw().data() + q * k * n, gi[0]->raw().data() + q * m * k, m, k, n);
                               if (gi[1]) detail::gemm_tn(av.raw().data() + q * m * k, gq, gi[1]->raw().data() + q * k * n, m, k, n);
                           }
                       });
}

inline Var reshape(const Var& x, Shape shape) {
    Tensor y = x.value().reshaped(std::move(shape));
    return x.tape()->record(std::move(y), {x}, [](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
    });
}

/// Axis permutation: output axis i is input axis perm[i].
inline Var permute(const Var& x, std::vector<std::size_t> perm) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rank();
    if (perm.size() != r) throw DimensionError("permute: permutation length does not match rank");
    std::vector<bool> seen(r, false);
    for (auto p : perm) {
        if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = xv.dim(perm[i]);

    // Pad to rank 4 so one loop nest covers every case.
    std::array<std::size_t, 4> in_dims{1, 1, 1, 1}, in_strides{0, 0, 0, 0};
    for (std::size_t i = 0; i < r; ++i) in_dims[i] = xv.dim(i);
    std::size_t stride = 1;
    for (std::size_t i = r; i-- > 0;) {
        in_strides[i] = stride;
        stride *= in_dims[i];
    }
    std::array<std::size_t, 4> od{1, 1, 1, 1}, os{0, 0, 0, 0};
    for (std::size_t i = 0; i < r; ++i) {
        od[i] = out_shape[i];
        os[i] = in_strides[perm[i]];
    }
    std::vector<std::size_t> map;
    map.reserve(xv.size());
    for (std::size_t a = 0; a < od[0]; ++a)
        for (std::size_t b = 0; b < od[1]; ++b)
            for (std::size_t c = 0; c < od[2]; ++c)
                for (std::size_t d = 0; d < od[3]; ++d) map.push_back(a * os[0] + b * os[1] + c * os[2] + d * os[3]);

    Tensor y(out_shape);
    for (std::size_t i = 0; i < map.size(); ++i) y[i] = xv[map[i]];
    return x.tape()->record(std::move(y), {x}, [map = std::move(map)](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < map.size(); ++i) (*gi[0])[map[i]] += g[i];
    });
}

inline Var transpose(const Var& x) {
    if (x.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(x.shape()));
    return permute(x, {1, 0});
}

/// Concatenation along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    Tape& tape = *parts.front().tape();
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw DimensionError("concat axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    std::vector<std::size_t> lens;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
        if (!ok) throw DimensionError("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(s));
        lens.push_back(s[axis]);
        out_shape[axis] += s[axis];
    }
    const auto sp = detail::split_at(out_shape, axis);
    Tensor y(out_shape);
    std::size_t offset = 0;
    for (std::size_t q = 0; q < parts.size(); ++q) {
        const Tensor& pv = parts[q].value();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const double* src = pv.raw().data() + o * lens[q] * sp.inner;
            double* dst = y.raw().data() + (o * sp.len + offset) * sp.inner;
            std::copy(src, src + lens[q] * sp.inner, dst);
        }
        offset += lens[q];
    }
    return tape.record(std::move(y), parts, [lens, sp](const Tensor& g, std::span<Tensor* const> gi) {
        std::size_t off = 0;
        for (std::size_t q = 0; q < lens.size(); ++q) {
            if (gi[q]) {
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    const double* src = g.raw().data() + (o * sp.len + off) * sp.inner;
                    double* dst = gi[q]->raw().data() + o * lens[q] * sp.inner;
                    for (std::size_t i = 0; i < lens[q] * sp.inner; ++i) dst[i] += src[i];
                }
            }
            off += lens[q];
        }
    });
}

/// Half-open range [begin, end) along `axis`.
inline Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = x.shape();
    if (axis >= s.size() || begin >= end || end > s[axis]) {
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                             std::to_string(axis) + " of " + shape_str(s));
    }
    const auto sp = detail::split_at(s, axis);
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    const std::size_t len = end - begin;
    Tensor y(out_shape);
    const Tensor& xv = x.value();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* src = xv.raw().data() + (o * sp.len + begin) * sp.inner;
        std::copy(src, src + len * sp.inner, y.raw().data() + o * len * sp.inner);
    }
    return x.tape()->record(std::move(y), {x}, [sp, begin, len](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const double* src = g.raw().data() + o * len * sp.inner;
            double* dst = gi[0]->raw().data() + (o * sp.len + begin) * sp.inner;
            for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
    });
}

/// Splits along `axis` into pieces of the given lengths (inverse of concat).
inline std::vector<Var> split(const Var& x, std::size_t axis, const std::vector<std::size_t>& lengths) {
    std::vector<Var> out;
    std::size_t at = 0;
    for (auto len : lengths) {
        out.push_back(slice(x, axis, at, at + len));
        at += len;
    }
    if (at != x.dim(axis)) throw DimensionError("split lengths do not cover axis");
    return out;
}

/// Selects rows along axis 0: out[i, ...] = x[index[i], ...].
inline Var gather_rows(const Var& x, std::vector<std::size_t> index) {
    const Tensor& xv = x.value();
    if (xv.rank() == 0 || index.empty()) throw DimensionError("gather_rows needs rank >= 1 and indices");
    const std::size_t row = xv.size() / xv.dim(0);
    Shape out_shape = xv.shape();
    out_shape[0] = index.size();
    Tensor y(out_shape);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= xv.dim(0)) throw DimensionError("gather_rows index out of range");
        std::copy_n(xv.raw().data() + index[i] * row, row, y.raw().data() + i * row);
    }
    return x.tape()->record(std::move(y), {x}, [index = std::move(index), row](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < index.size(); ++i) {
            const double* src = g.raw().data() + i * row;
            double* dst = gi[0]->raw().data() + index[i] * row;
            for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    Tape& tape = detail::same_tape(a, b);
    if (a.shape() != b.shape()) throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return tape.record(std::move(y), {a, b}, [](const Tensor& g, std::span<Tensor* const> gi) {
        for (auto* d : gi) {
            if (!d) continue;
            for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    Tape& tape = detail::same_tape(a, b);
    if (a.shape() != b.shape()) throw DimensionError("sub shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    return tape.record(std::move(y), {a, b}, [](const Tensor& g, std::span<Tensor* const> gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
        if (gi[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
    });
}

/// Elementwise (Hadamard) product.
inline Var mul(const Var& a, const Var& b) {
    Tape& tape = detail::same_tape(a, b);
    if (a.shape() != b.shape()) throw DimensionError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
    return tape.record(std::move(y), {a, b}, [av, bv](const Tensor& g, std::span<Tensor* const> gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * bv[i];
        if (gi[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * av[i];
    });
}

inline Var scale(const Var& x, double c) {
    return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& x, double c) {
    return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

/// x + b with b broadcast along the last axis of x.
inline Var add_bias(const Var& x, const Var& b) {
    Tape& tape = detail::same_tape(x, b);
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (xv.rank() == 0 || bv.rank() != 1 || bv.dim(0) != xv.shape().back()) {
        throw DimensionError("add_bias shape mismatch: " + shape_str(xv.shape()) + " + " + shape_str(bv.shape()));
    }
    const std::size_t c = bv.dim(0);
    Tensor y = xv;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % c];
    return tape.record(std::move(y), {x, b}, [c](const Tensor& g, std::span<Tensor* const> gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
        if (gi[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i % c] += g[i];
    });
}

inline Var square(const Var& x) {
    return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// Square root; the derivative at exactly 0 is taken as 0.
inline Var sqrt(const Var& x) {
    for (double v : x.value().values()) {
        if (v < 0.0) throw NumericError("sqrt of negative value");
    }
    return detail::unary(
        x, [](double v) { return std::sqrt(v); }, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return x.tape()->record(Tensor::scalar(s), {x}, [](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (auto& v : gi[0]->raw()) v += g[0];
    });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Mean over one axis; that axis is removed from the shape.
inline Var mean_axis(const Var& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size()) throw DimensionError("mean_axis out of range for " + shape_str(s));
    const auto sp = detail::split_at(s, axis);
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out_shape.push_back(s[i]);
    Tensor y(out_shape);
    const Tensor& xv = x.value();
    const double inv = 1.0 / static_cast<double>(sp.len);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) y[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i] * inv;
    return x.tape()->record(std::move(y), {x}, [sp, inv](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t l = 0; l < sp.len; ++l)
                for (std::size_t i = 0; i < sp.inner; ++i) (*gi[0])[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i] * inv;
    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// max(x, 0); the subgradient at 0 is 0.
inline Var relu(const Var& x) {
    return detail::unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// max(x, slope * x) for slope in (0, 1).
inline Var leaky_relu(const Var& x, double slope) {
    if (!(slope > 0.0 && slope < 1.0)) throw ValidationError("leaky_relu slope must lie in (0,1)");
    return detail::unary(
        x, [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Var sigmoid(const Var& x) {
    return detail::unary(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

namespace detail {

inline Var softmax_impl(const Var& x, std::size_t axis, const Tensor* mask) {
    const Tensor& xv = x.value();
    if (axis >= xv.rank()) throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " + shape_str(xv.shape()));
    if (mask && mask->shape() != xv.shape()) throw DimensionError("softmax mask shape mismatch");
    const auto sp = split_at(xv.shape(), axis);
    Tensor y(xv.shape());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
            auto on = [&](std::size_t l) { return !mask || (*mask)[at(l)] != 0.0; };
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < sp.len; ++l)
                if (on(l)) mx = std::max(mx, xv[at(l)]);
            if (!std::isfinite(mx)) throw ValidationError("softmax slice has no unmasked entries");
            double z = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) {
                const double e = on(l) ? std::exp(xv[at(l)] - mx) : 0.0;
                y[at(l)] = e;
                z += e;
            }
            for (std::size_t l = 0; l < sp.len; ++l) y[at(l)] /= z;
        }
    }
    Tensor yout = y;
    return x.tape()->record(std::move(y), {x}, [yout = std::move(yout), sp](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
                auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
                double dot = 0.0;
                for (std::size_t l = 0; l < sp.len; ++l) dot += g[at(l)] * yout[at(l)];
                for (std::size_t l = 0; l < sp.len; ++l) (*gi[0])[at(l)] += yout[at(l)] * (g[at(l)] - dot);
            }
        }
    });
}

} // namespace detail

/// Normalized exponentials along `axis` (max-subtracted for stability).
inline Var softmax(const Var& x, std::size_t axis) { return detail::softmax_impl(x, axis, nullptr); }

/// Softmax restricted to entries where mask != 0; masked entries come out 0.
inline Var masked_softmax(const Var& x, const Tensor& mask, std::size_t axis) {
    return detail::softmax_impl(x, axis, &mask);
}

/// Normalizes each slice along the last axis to zero mean and unit variance,
/// then applies gain and bias. Constant slices collapse to the bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    Tape& tape = detail::same_tape(x, gain);
    detail::same_tape(x, bias);
    if (!(eps > 0.0)) throw ValidationError("layer_norm eps must be positive");
    const Tensor& xv = x.value();
    if (xv.rank() == 0) throw DimensionError("layer_norm on a scalar");
    const std::size_t c = xv.shape().back();
    if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
        throw DimensionError("layer_norm gain/bias must have shape (" + std::to_string(c) + ")");
    }
    const std::size_t rows = xv.size() / c;
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(rows);
    Tensor y(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.raw().data() + r * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(c);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (xr[j] - mu) * inv_std[r];
            xhat[r * c + j] = h;
            y[r * c + j] = gv[j] * h + bv[j];
        }
    }
    return tape.record(std::move(y), {x, gain, bias},
                       [xhat = std::move(xhat), inv_std = std::move(inv_std), gv, c, rows](const Tensor& g, std::span<Tensor* const> gi) {
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* gr = g.raw().data() + r * c;
                               const double* hr = xhat.raw().data() + r * c;
                               if (gi[1])
                                   for (std::size_t j = 0; j < c; ++j) (*gi[1])[j] += gr[j] * hr[j];
                               if (gi[2])
                                   for (std::size_t j = 0; j < c; ++j) (*gi[2])[j] += gr[j];
                               if (gi[0]) {
                                   double m1 = 0.0, m2 = 0.0;
                                   for (std::size_t j = 0; j < c; ++j) {
                                       const double dh = gr[j] * gv[j];
                                       m1 += dh;
                                       m2 += dh * hr[j];
                                   }
                                   m1 /= static_cast<double>(c);
                                   m2 /= static_cast<double>(c);
                                   double* dx = gi[0]->raw().data() + r * c;
                                   for (std::size_t j = 0; j < c; ++j) dx[j] += inv_std[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                               }
                           }
                       });
}

/// leaky_relu(x * W + b) applied over the last axis of x (any leading shape).
inline Var fully_connected(const Var& x, const Var& weights, const Var& bias, double slope) {
    const Shape& xs = x.shape();
    if (xs.empty() || weights.rank() != 2 || weights.dim(0) != xs.back()) {
        throw DimensionError("fully_connected shape mismatch: " + shape_str(xs) + " x " + shape_str(weights.shape()));
    }
    const std::size_t cin = xs.back();
    const std::size_t cout = weights.dim(1);
    const std::size_t rows = x.value().size() / cin;
    Var flat = xs.size() == 2 ? x : reshape(x, {rows, cin});
    Var z = add_bias(matmul(flat, weights), bias);
    Var y = leaky_relu(z, slope);
    if (xs.size() == 2) return y;
    Shape out = xs;
    out.back() = cout;
    return reshape(y, out);
}

} // namespace gacan::ad
