#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sdc/tensor.hpp"

namespace sdc {

// Reverse-mode tape. Nodes are created in evaluation order; backward walks
// the tape in reverse. A graph is built per forward pass (define-by-run).
template <typename T>
class Graph;

template <typename T>
struct Value {
    Graph<T>* g = nullptr;
    int id = -1;

    const Tensor<T>& tensor() const { return g->node_value(id); }
    const Shape& shape() const { return g->node_value(id).shape; }
};

template <typename T>
class Graph {
  public:
    using BackFn = std::function<void(Graph&, int)>;

    Value<T> input(Tensor<T> t) { return make(std::move(t), {}, nullptr); }

    // Binds a named parameter. Binding the same key twice returns the same
    // node, so reuse of a weight shares one leaf and accumulates gradient.
    Value<T> param(const std::string& key, const Tensor<T>& t) {
        auto it = bound_.find(key);
        if (it != bound_.end()) {
            if (nodes_[it->second].value.shape != t.shape)
                throw DataError("parameter " + key + " rebound with different shape");
            return {this, it->second};
        }
        Value<T> v = make(t, {}, nullptr);
        bound_[key] = v.id;
        bind_order_.push_back(key);
        return v;
    }

    int bind_count(const std::string& key) const { return bound_.count(key) ? 1 : 0; }
    const std::vector<std::string>& bound_keys() const { return bind_order_; }

    Value<T> make(Tensor<T> value, std::vector<int> parents, BackFn back) {
        if (check_finite && !value.all_finite()) throw StageError("non-finite values produced in graph op");
        nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(parents), std::move(back)});
        return {this, static_cast<int>(nodes_.size() - 1)};
    }

    const Tensor<T>& node_value(int id) const { return nodes_[id].value; }
    Tensor<T>& node_grad(int id) { return nodes_[id].grad; }

    void backward(Value<T> loss) {
        if (loss.g != this) throw DataError("loss belongs to a different graph");
        if (nodes_[loss.id].value.size() != 1) throw DataError("backward requires a scalar loss");
        for (auto& n : nodes_) n.grad = Tensor<T>::zeros(n.value.shape);
        nodes_[loss.id].grad[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            if (nodes_[i].back) nodes_[i].back(*this, i);
        }
        has_grads_ = true;
    }

    // Gradient for a bound parameter; zeros if the parameter was never bound
    // or is unreachable from the loss.
    Tensor<T> grad_for(const std::string& key, const Shape& shape) const {
        auto it = bound_.find(key);
        if (it == bound_.end() || !has_grads_) return Tensor<T>::zeros(shape);
        return nodes_[it->second].grad;
    }

    ParamSet<T> grads_for(const ParamSet<T>& params, const std::string& prefix = "") const {
        ParamSet<T> out;
        for (size_t i = 0; i < params.size(); ++i)
            out.add(params.names()[i], grad_for(prefix + params.names()[i], params.tensor(i).shape));
        return out;
    }

    size_t node_count() const { return nodes_.size(); }

    bool check_finite = false;

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<int> parents;
        BackFn back;
    };
    std::vector<Node> nodes_;
    std::map<std::string, int> bound_;
    std::vector<std::string> bind_order_;
    bool has_grads_ = false;
};

namespace detail {

struct AxisLanes {
    int64_t outer, len, inner;
};

inline AxisLanes lanes(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw DataError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    AxisLanes l{1, s[axis], 1};
    for (int i = 0; i < axis; ++i) l.outer *= s[i];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) l.inner *= s[i];
    return l;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw DataError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Value<T> add(Value<T> a, Value<T> b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.tensor();
    const Tensor<T>& bt = b.tensor();
    for (int64_t i = 0; i < out.size(); ++i) out[i] += bt[i];
    int pa = a.id, pb = b.id;
    return a.g->make(std::move(out), {pa, pb}, [pa, pb](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        Tensor<T>&ga = g.node_grad(pa), &gb = g.node_grad(pb);
        for (int64_t i = 0; i < dy.size(); ++i) {
            ga[i] += dy[i];
            gb[i] += dy[i];
        }
    });
}

template <typename T>
Value<T> sub(Value<T> a, Value<T> b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out = a.tensor();
    const Tensor<T>& bt = b.tensor();
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= bt[i];
    int pa = a.id, pb = b.id;
    return a.g->make(std::move(out), {pa, pb}, [pa, pb](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        Tensor<T>&ga = g.node_grad(pa), &gb = g.node_grad(pb);
        for (int64_t i = 0; i < dy.size(); ++i) {
            ga[i] += dy[i];
            gb[i] -= dy[i];
        }
    });
}

template <typename T>
Value<T> mul(Value<T> a, Value<T> b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out = a.tensor();
    const Tensor<T>& bt = b.tensor();
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= bt[i];
    int pa = a.id, pb = b.id;
    return a.g->make(std::move(out), {pa, pb}, [pa, pb](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        const Tensor<T>&av = g.node_value(pa), &bv = g.node_value(pb);
        Tensor<T>&ga = g.node_grad(pa), &gb = g.node_grad(pb);
        for (int64_t i = 0; i < dy.size(); ++i) {
            ga[i] += dy[i] * bv[i];
            gb[i] += dy[i] * av[i];
        }
    });
}

template <typename T>
Value<T> div(Value<T> a, Value<T> b) {
    detail::require_same_shape(a.shape(), b.shape(), "div");
    Tensor<T> out = a.tensor();
    const Tensor<T>& bt = b.tensor();
    for (int64_t i = 0; i < out.size(); ++i) out[i] /= bt[i];
    int pa = a.id, pb = b.id;
    return a.g->make(std::move(out), {pa, pb}, [pa, pb](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        const Tensor<T>&av = g.node_value(pa), &bv = g.node_value(pb);
        Tensor<T>&ga = g.node_grad(pa), &gb = g.node_grad(pb);
        for (int64_t i = 0; i < dy.size(); ++i) {
            ga[i] += dy[i] / bv[i];
            gb[i] -= dy[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

template <typename T>
Value<T> scale(Value<T> a, T c) {
    Tensor<T> out = a.tensor();
    for (auto& v : out.data) v *= c;
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa, c](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        Tensor<T>& ga = g.node_grad(pa);
        for (int64_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * c;
    });
}

template <typename T>
Value<T> add_const(Value<T> a, T c) {
    Tensor<T> out = a.tensor();
    for (auto& v : out.data) v += c;
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        Tensor<T>& ga = g.node_grad(pa);
        for (int64_t i = 0; i < dy.size(); ++i) ga[i] += dy[i];
    });
}

template <typename T>
Value<T> neg(Value<T> a) {
    return scale(a, T(-1));
}

template <typename T>
Value<T> abs_op(Value<T> a) {
    Tensor<T> out = a.tensor();
    for (auto& v : out.data) v = std::abs(v);
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        const Tensor<T>& x = g.node_value(pa);
        Tensor<T>& ga = g.node_grad(pa);
        for (int64_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * (x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0)));
    });
}

template <typename T>
Value<T> tanh_op(Value<T> a) {
    Tensor<T> out = a.tensor();
    for (auto& v : out.data) v = std::tanh(v);
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa](Graph<T>& g, int self) {
        const Tensor<T>&dy = g.node_grad(self), &y = g.node_value(self);
        Tensor<T>& ga = g.node_grad(pa);
        for (int64_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * (T(1) - y[i] * y[i]);
    });
}

template <typename T>
Value<T> leaky_relu(Value<T> a, T slope) {
    Tensor<T> out = a.tensor();
    for (auto& v : out.data) v = v > T(0) ? v : slope * v;
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa, slope](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        const Tensor<T>& x = g.node_value(pa);
        Tensor<T>& ga = g.node_grad(pa);
        for (int64_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * (x[i] > T(0) ? T(1) : slope);
    });
}

template <typename T>
Value<T> log_op(Value<T> a) {
    Tensor<T> out = a.tensor();
    for (auto& v : out.data) v = std::log(v);
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        const Tensor<T>& x = g.node_value(pa);
        Tensor<T>& ga = g.node_grad(pa);
        for (int64_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] / x[i];
    });
}

// ---- shape ops ----

template <typename T>
Value<T> reshape(Value<T> a, Shape s) {
    check_shape_valid(s);
    if (shape_size(s) != a.tensor().size())
        throw DataError("reshape: size mismatch " + shape_str(a.shape()) + " -> " + shape_str(s));
    Tensor<T> out(std::move(s), a.tensor().data);
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        Tensor<T>& ga = g.node_grad(pa);
        for (int64_t i = 0; i < dy.size(); ++i) ga[i] += dy[i];
    });
}

namespace detail {

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<int>& perm) {
    int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw DataError("permute: perm rank mismatch");
    std::vector<bool> seen(r, false);
    Shape os(r);
    for (int i = 0; i < r; ++i) {
        if (perm[i] < 0 || perm[i] >= r || seen[perm[i]]) throw DataError("permute: invalid permutation");
        seen[perm[i]] = true;
        os[i] = x.shape[perm[i]];
    }
    std::vector<int64_t> istr(r, 1), ostr(r, 1);
    for (int i = r - 2; i >= 0; --i) istr[i] = istr[i + 1] * x.shape[i + 1];
    for (int i = r - 2; i >= 0; --i) ostr[i] = ostr[i + 1] * os[i + 1];
    Tensor<T> out = Tensor<T>::zeros(os);
    std::vector<int> idx(r, 0);
    for (int64_t o = 0; o < out.size(); ++o) {
        int64_t rem = o, src = 0;
        for (int i = 0; i < r; ++i) {
            int64_t c = rem / ostr[i];
            rem %= ostr[i];
            src += c * istr[perm[i]];
        }
        out[o] = x[src];
    }
    return out;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
    return inv;
}

}  // namespace detail

template <typename T>
Value<T> permute(Value<T> a, std::vector<int> perm) {
    Tensor<T> out = detail::permute_tensor(a.tensor(), perm);
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa, perm](Graph<T>& g, int self) {
        Tensor<T> back = detail::permute_tensor(g.node_grad(self), detail::inverse_perm(perm));
        Tensor<T>& ga = g.node_grad(pa);
        for (int64_t i = 0; i < back.size(); ++i) ga[i] += back[i];
    });
}

template <typename T>
Value<T> slice(Value<T> a, int axis, int start, int len) {
    const Shape& s = a.shape();
    auto l = detail::lanes(s, axis);
    if (start < 0 || len <= 0 || start + len > l.len)
        throw DataError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of axis extent " + std::to_string(l.len));
    Shape os = s;
    os[axis] = len;
    Tensor<T> out = Tensor<T>::zeros(os);
    const Tensor<T>& x = a.tensor();
    for (int64_t o = 0; o < l.outer; ++o)
        for (int i = 0; i < len; ++i)
            std::copy_n(&x[(o * l.len + start + i) * l.inner], l.inner, &out[(o * len + i) * l.inner]);
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa, axis, start, len](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        Tensor<T>& ga = g.node_grad(pa);
        auto l = detail::lanes(ga.shape, axis);
        for (int64_t o = 0; o < l.outer; ++o)
            for (int i = 0; i < len; ++i)
                for (int64_t j = 0; j < l.inner; ++j)
                    ga[(o * l.len + start + i) * l.inner + j] += dy[(o * len + i) * l.inner + j];
    });
}

template <typename T>
Value<T> concat(Value<T> a, Value<T> b, int axis) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size()) throw DataError("concat: rank mismatch");
    for (size_t i = 0; i < sa.size(); ++i)
        if (static_cast<int>(i) != axis && sa[i] != sb[i])
            throw DataError("concat: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    auto la = detail::lanes(sa, axis);
    auto lb = detail::lanes(sb, axis);
    Shape os = sa;
    os[axis] = sa[axis] + sb[axis];
    Tensor<T> out = Tensor<T>::zeros(os);
    const Tensor<T>&xa = a.tensor(), &xb = b.tensor();
    int64_t olen = os[axis];
    for (int64_t o = 0; o < la.outer; ++o) {
        for (int i = 0; i < la.len; ++i)
            std::copy_n(&xa[(o * la.len + i) * la.inner], la.inner, &out[(o * olen + i) * la.inner]);
        for (int i = 0; i < lb.len; ++i)
            std::copy_n(&xb[(o * lb.len + i) * lb.inner], lb.inner, &out[(o * olen + la.len + i) * lb.inner]);
    }
    int pa = a.id, pb = b.id;
    int alen = sa[axis];
    return a.g->make(std::move(out), {pa, pb}, [pa, pb, axis, alen](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        Tensor<T>&ga = g.node_grad(pa), &gb = g.node_grad(pb);
        auto la = detail::lanes(ga.shape, axis);
        auto lb = detail::lanes(gb.shape, axis);
        int64_t olen = la.len + lb.len;
        for (int64_t o = 0; o < la.outer; ++o) {
            for (int i = 0; i < la.len; ++i)
                for (int64_t j = 0; j < la.inner; ++j)
                    ga[(o * la.len + i) * la.inner + j] += dy[(o * olen + i) * la.inner + j];
            for (int i = 0; i < lb.len; ++i)
                for (int64_t j = 0; j < lb.inner; ++j)
                    gb[(o * lb.len + i) * lb.inner + j] += dy[(o * olen + alen + i) * lb.inner + j];
        }
    });
}

// (B,C,H,W) -> (B,N,C*p*p): non-overlapping p x p blocks, grid row-major,
// block features ordered (c, iy, ix).
template <typename T>
Value<T> patchify(Value<T> a, int p) {
    const Shape& s = a.shape();
    if (s.size() != 4) throw DataError("patchify: expected rank-4 input, got " + shape_str(s));
    int B = s[0], C = s[1], H = s[2], W = s[3];
    if (p <= 0 || H % p != 0 || W % p != 0)
        throw DataError("patchify: patch size " + std::to_string(p) + " does not divide " + shape_str(s));
    int gh = H / p, gw = W / p, N = gh * gw, F = C * p * p;
    Tensor<T> out = Tensor<T>::zeros({B, N, F});
    const Tensor<T>& x = a.tensor();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xi = 0; xi < W; ++xi) {
                    int n = (y / p) * gw + (xi / p);
                    int f = (c * p + y % p) * p + xi % p;
                    out[(static_cast<int64_t>(b) * N + n) * F + f] = x[((static_cast<int64_t>(b) * C + c) * H + y) * W + xi];
                }
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa, p](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        Tensor<T>& ga = g.node_grad(pa);
        int B = ga.shape[0], C = ga.shape[1], H = ga.shape[2], W = ga.shape[3];
        int gw = W / p, N = (H / p) * gw, F = C * p * p;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xi = 0; xi < W; ++xi) {
                        int n = (y / p) * gw + (xi / p);
                        int f = (c * p + y % p) * p + xi % p;
                        ga[((static_cast<int64_t>(b) * C + c) * H + y) * W + xi] += dy[(static_cast<int64_t>(b) * N + n) * F + f];
                    }
    });
}

// ---- reductions ----

template <typename T>
Value<T> sum(Value<T> a) {
    T acc = T(0);
    for (T v : a.tensor().data) acc += v;
    int pa = a.id;
    return a.g->make(Tensor<T>::scalar(acc), {pa}, [pa](Graph<T>& g, int self) {
        T dy = g.node_grad(self)[0];
        Tensor<T>& ga = g.node_grad(pa);
        for (auto& v : ga.data) v += dy;
    });
}

template <typename T>
Value<T> mean(Value<T> a) {
    int64_t n = a.tensor().size();
    T acc = T(0);
    for (T v : a.tensor().data) acc += v;
    acc /= static_cast<T>(n);
    int pa = a.id;
    return a.g->make(Tensor<T>::scalar(acc), {pa}, [pa, n](Graph<T>& g, int self) {
        T dy = g.node_grad(self)[0] / static_cast<T>(n);
        Tensor<T>& ga = g.node_grad(pa);
        for (auto& v : ga.data) v += dy;
    });
}

template <typename T>
Value<T> sum_axis(Value<T> a, int axis) {
    const Shape& s = a.shape();
    auto l = detail::lanes(s, axis);
    Shape os;
    for (int i = 0; i < static_cast<int>(s.size()); ++i)
        if (i != axis) os.push_back(s[i]);
    if (os.empty()) os = {1};
    Tensor<T> out = Tensor<T>::zeros(os);
    const Tensor<T>& x = a.tensor();
    for (int64_t o = 0; o < l.outer; ++o)
        for (int i = 0; i < l.len; ++i)
            for (int64_t j = 0; j < l.inner; ++j) out[o * l.inner + j] += x[(o * l.len + i) * l.inner + j];
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa, axis](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        Tensor<T>& ga = g.node_grad(pa);
        auto l = detail::lanes(ga.shape, axis);
        for (int64_t o = 0; o < l.outer; ++o)
            for (int i = 0; i < l.len; ++i)
                for (int64_t j = 0; j < l.inner; ++j) ga[(o * l.len + i) * l.inner + j] += dy[o * l.inner + j];
    });
}

// ---- softmax / layer norm ----

template <typename T>
Value<T> softmax(Value<T> a, int axis) {
    const Shape& s = a.shape();
    auto l = detail::lanes(s, axis);
    if (l.len == 0) throw DataError("softmax over empty axis");
    Tensor<T> out = a.tensor();
    for (int64_t o = 0; o < l.outer; ++o)
        for (int64_t j = 0; j < l.inner; ++j) {
            T mx = out[(o * l.len) * l.inner + j];
            for (int i = 1; i < l.len; ++i) mx = std::max(mx, out[(o * l.len + i) * l.inner + j]);
            T z = T(0);
            for (int i = 0; i < l.len; ++i) {
                T e = std::exp(out[(o * l.len + i) * l.inner + j] - mx);
                out[(o * l.len + i) * l.inner + j] = e;
                z += e;
            }
            for (int i = 0; i < l.len; ++i) out[(o * l.len + i) * l.inner + j] /= z;
        }
    int pa = a.id;
    return a.g->make(std::move(out), {pa}, [pa, axis](Graph<T>& g, int self) {
        const Tensor<T>&dy = g.node_grad(self), &y = g.node_value(self);
        Tensor<T>& ga = g.node_grad(pa);
        auto l = detail::lanes(y.shape, axis);
        for (int64_t o = 0; o < l.outer; ++o)
            for (int64_t j = 0; j < l.inner; ++j) {
                T dot = T(0);
                for (int i = 0; i < l.len; ++i) {
                    int64_t k = (o * l.len + i) * l.inner + j;
                    dot += dy[k] * y[k];
                }
                for (int i = 0; i < l.len; ++i) {
                    int64_t k = (o * l.len + i) * l.inner + j;
                    ga[k] += y[k] * (dy[k] - dot);
                }
            }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes over the last axis, then applies the learnable affine.
template <typename T>
Value<T> layer_norm(Value<T> x, Value<T> gamma, Value<T> beta) {
    const Shape& s = x.shape();
    int n = s.back();
    if (gamma.shape() != Shape{n} || beta.shape() != Shape{n})
        throw DataError("layer_norm: affine shape must be (" + std::to_string(n) + ")");
    int64_t rows = x.tensor().size() / n;
    Tensor<T> out = x.tensor();
    const Tensor<T>&gm = gamma.tensor(), &bt = beta.tensor();
    for (int64_t r = 0; r < rows; ++r) {
        T* row = &out[r * n];
        T mu = T(0);
        for (int i = 0; i < n; ++i) mu += row[i];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<T>(n);
        T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        for (int i = 0; i < n; ++i) row[i] = gm[i] * ((row[i] - mu) * inv) + bt[i];
    }
    int px = x.id, pg = gamma.id, pb = beta.id;
    return x.g->make(std::move(out), {px, pg, pb}, [px, pg, pb, n](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        const Tensor<T>& xv = g.node_value(px);
        const Tensor<T>& gm = g.node_value(pg);
        Tensor<T>&gx = g.node_grad(px), &gg = g.node_grad(pg), &gb = g.node_grad(pb);
        int64_t rows = xv.size() / n;
        std::vector<T> xhat(n);
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = &xv[r * n];
            const T* dr = &dy[r * n];
            T mu = T(0);
            for (int i = 0; i < n; ++i) mu += row[i];
            mu /= static_cast<T>(n);
            T var = T(0);
            for (int i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
            var /= static_cast<T>(n);
            T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
            T sum1 = T(0), sum2 = T(0);
            for (int i = 0; i < n; ++i) {
                xhat[i] = (row[i] - mu) * inv;
                T dxh = dr[i] * gm[i];
                sum1 += dxh;
                sum2 += dxh * xhat[i];
                gg[i] += dr[i] * xhat[i];
                gb[i] += dr[i];
            }
            for (int i = 0; i < n; ++i) {
                T dxh = dr[i] * gm[i];
                gx[r * n + i] += inv * (dxh - sum1 / static_cast<T>(n) - xhat[i] * sum2 / static_cast<T>(n));
            }
        }
    });
}

// ---- matrix products ----

template <typename T>
Value<T> matmul(Value<T> a, Value<T> b) {
    const Shape&sa = a.shape(), &sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw DataError("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    int m = sa[0], k = sa[1], n = sb[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    matmul_acc(a.tensor().ptr(), b.tensor().ptr(), out.ptr(), m, k, n);
    int pa = a.id, pb = b.id;
    return a.g->make(std::move(out), {pa, pb}, [pa, pb, m, k, n](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        matmul_abt_acc(dy.ptr(), g.node_value(pb).ptr(), g.node_grad(pa).ptr(), m, n, k);
        matmul_atb_acc(g.node_value(pa).ptr(), dy.ptr(), g.node_grad(pb).ptr(), k, m, n);
    });
}

// (B,m,k) @ (B,k,n) -> (B,m,n)
template <typename T>
Value<T> bmm(Value<T> a, Value<T> b) {
    const Shape&sa = a.shape(), &sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
        throw DataError("bmm: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    int B = sa[0], m = sa[1], k = sa[2], n = sb[2];
    Tensor<T> out = Tensor<T>::zeros({B, m, n});
    for (int i = 0; i < B; ++i)
        matmul_acc(a.tensor().ptr() + static_cast<int64_t>(i) * m * k, b.tensor().ptr() + static_cast<int64_t>(i) * k * n,
                   out.ptr() + static_cast<int64_t>(i) * m * n, m, k, n);
    int pa = a.id, pb = b.id;
    return a.g->make(std::move(out), {pa, pb}, [pa, pb, B, m, k, n](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        for (int i = 0; i < B; ++i) {
            const T* dyb = dy.ptr() + static_cast<int64_t>(i) * m * n;
            matmul_abt_acc(dyb, g.node_value(pb).ptr() + static_cast<int64_t>(i) * k * n, g.node_grad(pa).ptr() + static_cast<int64_t>(i) * m * k, m, n, k);
            matmul_atb_acc(g.node_value(pa).ptr() + static_cast<int64_t>(i) * m * k, dyb, g.node_grad(pb).ptr() + static_cast<int64_t>(i) * k * n, k, m, n);
        }
    });
}

// (B,m,k) @ (B,n,k)^T -> (B,m,n)
template <typename T>
Value<T> bmm_nt(Value<T> a, Value<T> b) {
    const Shape&sa = a.shape(), &sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
        throw DataError("bmm_nt: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    int B = sa[0], m = sa[1], k = sa[2], n = sb[1];
    Tensor<T> out = Tensor<T>::zeros({B, m, n});
    for (int i = 0; i < B; ++i)
        matmul_abt_acc(a.tensor().ptr() + static_cast<int64_t>(i) * m * k, b.tensor().ptr() + static_cast<int64_t>(i) * n * k,
                       out.ptr() + static_cast<int64_t>(i) * m * n, m, k, n);
    int pa = a.id, pb = b.id;
    return a.g->make(std::move(out), {pa, pb}, [pa, pb, B, m, k, n](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        for (int i = 0; i < B; ++i) {
            const T* dyb = dy.ptr() + static_cast<int64_t>(i) * m * n;
            // dA = dY @ B ; dB = dY^T @ A
            matmul_acc(dyb, g.node_value(pb).ptr() + static_cast<int64_t>(i) * n * k, g.node_grad(pa).ptr() + static_cast<int64_t>(i) * m * k, m, n, k);
            matmul_atb_acc(dyb, g.node_value(pa).ptr() + static_cast<int64_t>(i) * m * k, g.node_grad(pb).ptr() + static_cast<int64_t>(i) * n * k, n, m, k);
        }
    });
}

// x (n,in) @ W (out,in)^T + b -> (n,out)
template <typename T>
Value<T> linear(Value<T> x, Value<T> w, Value<T> b) {
    const Shape&sx = x.shape(), &sw = w.shape(), &sb = b.shape();
    if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1])
        throw DataError("linear: incompatible shapes " + shape_str(sx) + " x " + shape_str(sw));
    int n = sx[0], in = sx[1], out_dim = sw[0];
    if (sb != Shape{out_dim}) throw DataError("linear: bias shape mismatch");
    Tensor<T> out = Tensor<T>::zeros({n, out_dim});
    matmul_abt_acc(x.tensor().ptr(), w.tensor().ptr(), out.ptr(), n, in, out_dim);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < out_dim; ++j) out[static_cast<int64_t>(i) * out_dim + j] += b.tensor()[j];
    int px = x.id, pw = w.id, pb = b.id;
    return x.g->make(std::move(out), {px, pw, pb}, [px, pw, pb, n, in, out_dim](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        matmul_acc(dy.ptr(), g.node_value(pw).ptr(), g.node_grad(px).ptr(), n, out_dim, in);
        matmul_atb_acc(dy.ptr(), g.node_value(px).ptr(), g.node_grad(pw).ptr(), out_dim, n, in);
        Tensor<T>& gb = g.node_grad(pb);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out_dim; ++j) gb[j] += dy[static_cast<int64_t>(i) * out_dim + j];
    });
}

// ---- convolutions ----

namespace detail {

inline int conv_out(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int s, int p, T* cols, int oh, int ow) {
    int64_t L = static_cast<int64_t>(oh) * ow;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                int64_t r = (static_cast<int64_t>(c) * kh + ky) * kw + kx;
                T* dst = cols + r * L;
                for (int y = 0; y < oh; ++y) {
                    int iy = y * s - p + ky;
                    for (int xreq = 0; xreq < ow; ++xreq) {
                        int ix = xreq * s - p + kx;
                        dst[static_cast<int64_t>(y) * ow + xreq] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x[(static_cast<int64_t>(c) * H + iy) * W + ix] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_acc(const T* cols, int C, int H, int W, int kh, int kw, int s, int p, T* x, int oh, int ow) {
    int64_t L = static_cast<int64_t>(oh) * ow;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                int64_t r = (static_cast<int64_t>(c) * kh + ky) * kw + kx;
                const T* src = cols + r * L;
                for (int y = 0; y < oh; ++y) {
                    int iy = y * s - p + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int xreq = 0; xreq < ow; ++xreq) {
                        int ix = xreq * s - p + kx;
                        if (ix < 0 || ix >= W) continue;
                        x[(static_cast<int64_t>(c) * H + iy) * W + ix] += src[static_cast<int64_t>(y) * ow + xreq];
                    }
                }
            }
}

}  // namespace detail

// x (B,C,H,W), w (F,C,kh,kw), b (F)
template <typename T>
Value<T> conv2d(Value<T> x, Value<T> w, Value<T> b, int stride, int pad) {
    const Shape&sx = x.shape(), &sw = w.shape();
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1])
        throw DataError("conv2d: incompatible shapes " + shape_str(sx) + " x " + shape_str(sw));
    int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
    int F = sw[0], kh = sw[2], kw = sw[3];
    if (b.shape() != Shape{F}) throw DataError("conv2d: bias shape mismatch");
    int oh = detail::conv_out(H, kh, stride, pad), ow = detail::conv_out(W, kw, stride, pad);
    if (oh <= 0 || ow <= 0) throw DataError("conv2d: empty output for input " + shape_str(sx));
    int ckk = C * kh * kw;
    int64_t L = static_cast<int64_t>(oh) * ow;
    Tensor<T> out = Tensor<T>::zeros({B, F, oh, ow});
    std::vector<T> cols(static_cast<size_t>(ckk) * L);
    for (int bi = 0; bi < B; ++bi) {
        detail::im2col(x.tensor().ptr() + static_cast<int64_t>(bi) * C * H * W, C, H, W, kh, kw, stride, pad, cols.data(), oh, ow);
        T* ob = out.ptr() + static_cast<int64_t>(bi) * F * L;
        matmul_acc(w.tensor().ptr(), cols.data(), ob, F, ckk, static_cast<int>(L));
        for (int f = 0; f < F; ++f)
            for (int64_t i = 0; i < L; ++i) ob[f * L + i] += b.tensor()[f];
    }
    int px = x.id, pw = w.id, pb = b.id;
    return x.g->make(std::move(out), {px, pw, pb}, [px, pw, pb, B, C, H, W, F, kh, kw, stride, pad, oh, ow](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        int ckk = C * kh * kw;
        int64_t L = static_cast<int64_t>(oh) * ow;
        std::vector<T> cols(static_cast<size_t>(ckk) * L);
        std::vector<T> dcols(static_cast<size_t>(ckk) * L);
        for (int bi = 0; bi < B; ++bi) {
            const T* xb = g.node_value(px).ptr() + static_cast<int64_t>(bi) * C * H * W;
            const T* dyb = dy.ptr() + static_cast<int64_t>(bi) * F * L;
            detail::im2col(xb, C, H, W, kh, kw, stride, pad, cols.data(), oh, ow);
            matmul_abt_acc(dyb, cols.data(), g.node_grad(pw).ptr(), F, static_cast<int>(L), ckk);
            std::fill(dcols.begin(), dcols.end(), T(0));
            matmul_atb_acc(g.node_value(pw).ptr(), dyb, dcols.data(), ckk, F, static_cast<int>(L));
            detail::col2im_acc(dcols.data(), C, H, W, kh, kw, stride, pad, g.node_grad(px).ptr() + static_cast<int64_t>(bi) * C * H * W, oh, ow);
            Tensor<T>& gb = g.node_grad(pb);
            for (int f = 0; f < F; ++f)
                for (int64_t i = 0; i < L; ++i) gb[f] += dyb[f * L + i];
        }
    });
}

// x (B,C,H,W), w (C,F,kh,kw), b (F)
template <typename T>
Value<T> conv_transpose2d(Value<T> x, Value<T> w, Value<T> b, int stride, int pad, int out_pad) {
    const Shape&sx = x.shape(), &sw = w.shape();
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[0])
        throw DataError("conv_transpose2d: incompatible shapes " + shape_str(sx) + " x " + shape_str(sw));
    int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
    int F = sw[1], kh = sw[2], kw = sw[3];
    if (b.shape() != Shape{F}) throw DataError("conv_transpose2d: bias shape mismatch");
    int oh = (H - 1) * stride - 2 * pad + kh + out_pad;
    int ow = (W - 1) * stride - 2 * pad + kw + out_pad;
    if (oh <= 0 || ow <= 0) throw DataError("conv_transpose2d: empty output");
    int fkk = F * kh * kw;
    int64_t L = static_cast<int64_t>(H) * W;
    Tensor<T> out = Tensor<T>::zeros({B, F, oh, ow});
    std::vector<T> cols(static_cast<size_t>(fkk) * L);
    for (int bi = 0; bi < B; ++bi) {
        std::fill(cols.begin(), cols.end(), T(0));
        matmul_atb_acc(w.tensor().ptr(), x.tensor().ptr() + static_cast<int64_t>(bi) * C * L, cols.data(), fkk, C, static_cast<int>(L));
        T* ob = out.ptr() + static_cast<int64_t>(bi) * F * oh * ow;
        detail::col2im_acc(cols.data(), F, oh, ow, kh, kw, stride, pad, ob, H, W);
        for (int f = 0; f < F; ++f)
            for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) ob[f * static_cast<int64_t>(oh) * ow + i] += b.tensor()[f];
    }
    int px = x.id, pw = w.id, pb = b.id;
    return x.g->make(std::move(out), {px, pw, pb}, [px, pw, pb, B, C, H, W, F, kh, kw, stride, pad, oh, ow](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.node_grad(self);
        int fkk = F * kh * kw;
        int64_t L = static_cast<int64_t>(H) * W;
        std::vector<T> cols(static_cast<size_t>(fkk) * L);
        for (int bi = 0; bi < B; ++bi) {
            const T* dyb = dy.ptr() + static_cast<int64_t>(bi) * F * oh * ow;
            detail::im2col(dyb, F, oh, ow, kh, kw, stride, pad, cols.data(), H, W);
            // dx = W @ im2col(dy); dW += x @ im2col(dy)^T
            matmul_acc(g.node_value(pw).ptr(), cols.data(), g.node_grad(px).ptr() + static_cast<int64_t>(bi) * C * L, C, fkk, static_cast<int>(L));
            matmul_abt_acc(g.node_value(px).ptr() + static_cast<int64_t>(bi) * C * L, cols.data(), g.node_grad(pw).ptr(), C, static_cast<int>(L), fkk);
            Tensor<T>& gb = g.node_grad(pb);
            for (int f = 0; f < F; ++f)
                for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) gb[f] += dyb[f * static_cast<int64_t>(oh) * ow + i];
        }
    });
}

}  // namespace sdc
