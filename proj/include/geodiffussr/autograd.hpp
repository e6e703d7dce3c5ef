#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "geodiffussr/tensor.hpp"

namespace gdr {

// Reverse-mode tape. Nodes own their parents, so holding the loss Var keeps
// the whole graph alive; dropping it frees every cached activation.
template <typename S>
struct TapeNode {
    Tensor<S> value;
    Tensor<S> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TapeNode>> parents;
    std::function<void(TapeNode&)> backward;  // reads this->grad, accumulates into parents

    Tensor<S>& grad_ref() {
        if (grad.empty()) grad = Tensor<S>::zeros(value.shape());
        return grad;
    }
};

template <typename S>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<TapeNode<S>> n) : n_(std::move(n)) {}

    static Var leaf(Tensor<S> value, bool requires_grad = false) {
        auto n = std::make_shared<TapeNode<S>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }
    static Var constant(Tensor<S> value) { return leaf(std::move(value), false); }

    bool defined() const { return n_ != nullptr; }
    const Tensor<S>& value() const { return n_->value; }
    Tensor<S>& value() { return n_->value; }
    const Tensor<S>& grad() const { return n_->grad; }
    Tensor<S>& grad_ref() { return n_->grad_ref(); }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() { n_->grad = Tensor<S>(); }
    bool requires_grad() const { return n_->requires_grad; }
    TapeNode<S>* node() const { return n_.get(); }
    const std::shared_ptr<TapeNode<S>>& ptr() const { return n_; }

    // Backpropagate from a scalar root.
    void backward() const {
        check(n_->value.size() == 1, "backward() requires a scalar root");
        // post-order DFS, then walk in reverse topological order
        std::vector<TapeNode<S>*> order;
        std::unordered_set<TapeNode<S>*> seen;
        std::vector<std::pair<TapeNode<S>*, size_t>> stack;
        stack.push_back({n_.get(), 0});
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                TapeNode<S>* p = node->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->grad_ref().fill(S(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TapeNode<S>* node = *it;
            if (node->backward && !node->grad.empty()) node->backward(*node);
        }
    }

private:
    std::shared_ptr<TapeNode<S>> n_;
};

namespace detail {

inline bool& no_grad_flag() {
    thread_local bool flag = false;
    return flag;
}

}  // namespace detail

// Scoped inference mode: ops built inside the guard record no parents and no
// backward closures, so intermediate activations free eagerly.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::no_grad_flag()) { detail::no_grad_flag() = true; }
    ~NoGradGuard() { detail::no_grad_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
};

namespace detail {

template <typename S>
Var<S> make_op(Tensor<S> value, std::vector<Var<S>> inputs,
               std::function<void(TapeNode<S>&)> backward) {
    auto n = std::make_shared<TapeNode<S>>();
    n->value = std::move(value);
    if (no_grad_flag()) return Var<S>(std::move(n));
    for (auto& v : inputs) {
        n->parents.push_back(v.ptr());
        if (v.node()->requires_grad) n->requires_grad = true;
    }
    // constant subgraphs never get a backward pass
    if (n->requires_grad) n->backward = std::move(backward);
    return Var<S>(std::move(n));
}

template <typename S>
void accum(TapeNode<S>& parent, const Tensor<S>& delta) {
    if (!parent.requires_grad) return;
    if (parent.grad.empty()) {
        parent.grad = delta;  // first contribution: copy instead of zero-fill + add
        return;
    }
    parent.grad.vec() += delta.vec();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor<S> y = a.value();
    y.vec() += b.value().vec();
    return detail::make_op<S>(std::move(y), {a, b}, [](TapeNode<S>& self) {
        detail::accum(*self.parents[0], self.grad);
        detail::accum(*self.parents[1], self.grad);
    });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor<S> y = a.value();
    y.vec() -= b.value().vec();
    return detail::make_op<S>(std::move(y), {a, b}, [](TapeNode<S>& self) {
        detail::accum(*self.parents[0], self.grad);
        auto& p = *self.parents[1];
        if (p.requires_grad) p.grad_ref().vec() -= self.grad.vec();
    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor<S> y = a.value();
    y.vec().array() *= b.value().vec().array();
    return detail::make_op<S>(std::move(y), {a, b}, [](TapeNode<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad)
            pa.grad_ref().vec().array() += self.grad.vec().array() * pb.value.vec().array();
        if (pb.requires_grad)
            pb.grad_ref().vec().array() += self.grad.vec().array() * pa.value.vec().array();
    });
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
    Tensor<S> y = a.value();
    y.vec() *= c;
    return detail::make_op<S>(std::move(y), {a}, [c](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (p.requires_grad) p.grad_ref().vec() += c * self.grad.vec();
    });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
    const auto& x = a.value();
    Tensor<S> sig(x.shape());
    sig.vec().array() = S(1) / (S(1) + (-x.vec().array()).exp());
    Tensor<S> y(x.shape());
    y.vec().array() = x.vec().array() * sig.vec().array();
    return detail::make_op<S>(std::move(y), {a}, [sig](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto s = sig.vec().array();
        p.grad_ref().vec().array() +=
            self.grad.vec().array() * (s * (S(1) + p.value.vec().array() * (S(1) - s)));
    });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
    Tensor<S> y = a.value();
    y.vec().array() = y.vec().array().max(S(0));
    return detail::make_op<S>(std::move(y), {a}, [](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.grad_ref().vec().array() +=
            self.grad.vec().array() * (p.value.vec().array() > S(0)).template cast<S>();
    });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
    Tensor<S> y(a.value().shape());
    y.vec().array() = S(1) / (S(1) + (-a.value().vec().array()).exp());
    return detail::make_op<S>(std::move(y), {a}, [](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto yv = self.value.vec().array();
        p.grad_ref().vec().array() += self.grad.vec().array() * yv * (S(1) - yv);
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
    Tensor<S> y = a.value().reshaped(shape);
    return detail::make_op<S>(std::move(y), {a}, [](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (p.requires_grad) p.grad_ref().vec() += self.grad.vec();
    });
}

template <typename S>
Var<S> concat_lastdim(const Var<S>& a, const Var<S>& b) {
    const auto& sa = a.value().shape();
    const auto& sb = b.value().shape();
    check(sa.size() == sb.size() && sa.size() >= 1, "concat_lastdim: rank mismatch");
    for (size_t i = 0; i + 1 < sa.size(); ++i)
        check(sa[i] == sb[i], "concat_lastdim: leading dims mismatch");
    int ca = sa.back(), cb = sb.back();
    int64_t rows = a.value().size() / ca;
    Shape out_shape = sa;
    out_shape.back() = ca + cb;
    Tensor<S> y(out_shape);
    {
        auto ya = y.mat(rows, ca + cb);
        ya.leftCols(ca) = a.value().mat(rows, ca);
        ya.rightCols(cb) = b.value().mat(rows, cb);
    }
    return detail::make_op<S>(std::move(y), {a, b}, [rows, ca, cb](TapeNode<S>& self) {
        auto g = self.grad.mat(rows, ca + cb);
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.grad_ref().mat(rows, ca) += g.leftCols(ca);
        if (pb.requires_grad) pb.grad_ref().mat(rows, cb) += g.rightCols(cb);
    });
}

template <typename S>
Var<S> slice_lastdim(const Var<S>& a, int start, int len) {
    const auto& sa = a.value().shape();
    int c = sa.back();
    check(start >= 0 && len > 0 && start + len <= c, "slice_lastdim: out of range");
    int64_t rows = a.value().size() / c;
    Shape out_shape = sa;
    out_shape.back() = len;
    Tensor<S> y(out_shape);
    y.mat(rows, len) = a.value().mat(rows, c).middleCols(start, len);
    return detail::make_op<S>(std::move(y), {a}, [rows, c, start, len](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.grad_ref().mat(rows, c).middleCols(start, len) += self.grad.mat(rows, len);
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// y = x * w + b over the flattened leading dims of x; x: (..., Cin), w: (Cin, Cout)
template <typename S>
Var<S> affine(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    int cin = w.value().dim(0), cout = w.value().dim(1);
    check(x.value().shape().back() == cin, "affine: input channel mismatch");
    check(b.value().size() == cout, "affine: bias size mismatch");
    int64_t rows = x.value().size() / cin;
    Shape out_shape = x.value().shape();
    out_shape.back() = cout;
    Tensor<S> y(out_shape);
    {
        auto ym = y.mat(rows, cout);
        ym.noalias() = x.value().mat(rows, cin) * w.value().mat(cin, cout);
        ym.rowwise() += b.value().mat(1, cout).row(0);
    }
    return detail::make_op<S>(std::move(y), {x, w, b}, [rows, cin, cout](TapeNode<S>& self) {
        auto g = self.grad.mat(rows, cout);
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad)
            px.grad_ref().mat(rows, cin).noalias() += g * pw.value.mat(cin, cout).transpose();
        if (pw.requires_grad)
            pw.grad_ref().mat(cin, cout).noalias() += px.value.mat(rows, cin).transpose() * g;
        if (pb.requires_grad) pb.grad_ref().mat(1, cout) += g.colwise().sum();
    });
}

// batched matmul: a (B,m,k) x b (B,k,n) -> (B,m,n); transpose_b treats b as (B,n,k)
template <typename S>
Var<S> bmm(const Var<S>& a, const Var<S>& b, bool transpose_b = false) {
    const auto& sa = a.value().shape();
    const auto& sb = b.value().shape();
    check(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0], "bmm: expects (B,m,k),(B,k,n)");
    int B = sa[0], m = sa[1], k = sa[2];
    int n = transpose_b ? sb[1] : sb[2];
    check((transpose_b ? sb[2] : sb[1]) == k, "bmm: inner dim mismatch");
    Tensor<S> y({B, m, n});
    for (int i = 0; i < B; ++i) {
        ConstMatMap<S> am(a.value().data() + int64_t(i) * m * k, m, k);
        auto ym = MatMap<S>(y.data() + int64_t(i) * m * n, m, n);
        if (transpose_b) {
            ConstMatMap<S> bm(b.value().data() + int64_t(i) * n * k, n, k);
            ym.noalias() = am * bm.transpose();
        } else {
            ConstMatMap<S> bm(b.value().data() + int64_t(i) * k * n, k, n);
            ym.noalias() = am * bm;
        }
    }
    return detail::make_op<S>(std::move(y), {a, b}, [B, m, k, n, transpose_b](TapeNode<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (int i = 0; i < B; ++i) {
            ConstMatMap<S> g(self.grad.data() + int64_t(i) * m * n, m, n);
            ConstMatMap<S> am(pa.value.data() + int64_t(i) * m * k, m, k);
            if (transpose_b) {
                ConstMatMap<S> bm(pb.value.data() + int64_t(i) * n * k, n, k);
                if (pa.requires_grad) {
                    MatMap<S> ga(pa.grad_ref().data() + int64_t(i) * m * k, m, k);
                    ga.noalias() += g * bm;
                }
                if (pb.requires_grad) {
                    MatMap<S> gb(pb.grad_ref().data() + int64_t(i) * n * k, n, k);
                    gb.noalias() += g.transpose() * am;
                }
            } else {
                ConstMatMap<S> bm(pb.value.data() + int64_t(i) * k * n, k, n);
                if (pa.requires_grad) {
                    MatMap<S> ga(pa.grad_ref().data() + int64_t(i) * m * k, m, k);
                    ga.noalias() += g * bm.transpose();
                }
                if (pb.requires_grad) {
                    MatMap<S> gb(pb.grad_ref().data() + int64_t(i) * k * n, k, n);
                    gb.noalias() += am.transpose() * g;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// convolution (NHWC, square kernel, same padding)
// ---------------------------------------------------------------------------

namespace detail {

// Patch rows are (ky, kx, C)-major; pixels along kx are contiguous in NHWC,
// so the inner kx span copies as one block wherever it stays in bounds.
template <typename S>
void im2col(const Tensor<S>& x, int ksize, int stride, int pad, Tensor<S>& cols, int oh, int ow) {
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const int patch = ksize * ksize * C;
    S* out = cols.data();
    for (int n = 0; n < N; ++n) {
        const S* xn = x.data() + int64_t(n) * H * W * C;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                S* row = out + ((int64_t(n) * oh + oy) * ow + ox) * patch;
                const int ix0 = ox * stride - pad;
                const int kx_lo = std::max(0, -ix0);
                const int kx_hi = std::min(ksize, W - ix0);
                for (int ky = 0; ky < ksize; ++ky) {
                    int iy = oy * stride - pad + ky;
                    S* dst = row + ky * ksize * C;
                    if (iy < 0 || iy >= H || kx_lo >= kx_hi) {
                        std::fill(dst, dst + ksize * C, S(0));
                        continue;
                    }
                    if (kx_lo > 0) std::fill(dst, dst + kx_lo * C, S(0));
                    std::memcpy(dst + kx_lo * C, xn + (int64_t(iy) * W + ix0 + kx_lo) * C,
                                sizeof(S) * size_t((kx_hi - kx_lo) * C));
                    if (kx_hi < ksize) std::fill(dst + kx_hi * C, dst + ksize * C, S(0));
                }
            }
        }
    }
}

template <typename S>
void col2im(const Tensor<S>& dcols, int ksize, int stride, int pad, Tensor<S>& dx, int oh,
            int ow) {
    const int N = dx.dim(0), H = dx.dim(1), W = dx.dim(2), C = dx.dim(3);
    const int patch = ksize * ksize * C;
    const S* in = dcols.data();
    for (int n = 0; n < N; ++n) {
        S* xn = dx.data() + int64_t(n) * H * W * C;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const S* row = in + ((int64_t(n) * oh + oy) * ow + ox) * patch;
                const int ix0 = ox * stride - pad;
                const int kx_lo = std::max(0, -ix0);
                const int kx_hi = std::min(ksize, W - ix0);
                if (kx_lo >= kx_hi) continue;
                const int span = (kx_hi - kx_lo) * C;
                for (int ky = 0; ky < ksize; ++ky) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    S* dst = xn + (int64_t(iy) * W + ix0 + kx_lo) * C;
                    const S* src = row + (ky * ksize + kx_lo) * C;
                    VecMap<S>(dst, span) += ConstVecMap<S>(src, span);
                }
            }
        }
    }
}

}  // namespace detail

// x: (N,H,W,Cin), w: (k,k,Cin,Cout), b: (Cout); pad = k/2
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride = 1) {
    const auto& xs = x.value().shape();
    const auto& ws = w.value().shape();
    check(xs.size() == 4 && ws.size() == 4, "conv2d: expects NHWC input and (k,k,Cin,Cout) kernel");
    check(ws[0] == ws[1], "conv2d: non-square kernel");
    check(xs[3] == ws[2], "conv2d: input channel mismatch");
    const int N = xs[0], H = xs[1], W = xs[2];
    const int k = ws[0], cin = ws[2], cout = ws[3];
    const int pad = k / 2;
    const int oh = (H + 2 * pad - k) / stride + 1;
    const int ow = (W + 2 * pad - k) / stride + 1;
    const int patch = k * k * cin;
    const int64_t rows = int64_t(N) * oh * ow;

    auto cols = std::make_shared<Tensor<S>>(Shape{int(rows), patch});
    detail::im2col(x.value(), k, stride, pad, *cols, oh, ow);

    Tensor<S> y({N, oh, ow, cout});
    {
        auto ym = y.mat(rows, cout);
        ym.noalias() = cols->mat(rows, patch) * w.value().mat(patch, cout);
        ym.rowwise() += b.value().mat(1, cout).row(0);
    }
    return detail::make_op<S>(
        std::move(y), {x, w, b},
        [cols, k, stride, pad, oh, ow, rows, patch, cout](TapeNode<S>& self) {
            auto g = self.grad.mat(rows, cout);
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            if (pw.requires_grad)
                pw.grad_ref().mat(patch, cout).noalias() +=
                    cols->mat(rows, patch).transpose() * g;
            if (pb.requires_grad) pb.grad_ref().mat(1, cout) += g.colwise().sum();
            if (px.requires_grad) {
                Tensor<S> dcols({int(rows), patch});
                dcols.mat(rows, patch).noalias() = g * pw.value.mat(patch, cout).transpose();
                detail::col2im(dcols, k, stride, pad, px.grad_ref(), oh, ow);
            }
        });
}

// ---------------------------------------------------------------------------
// normalization / softmax / reductions
// ---------------------------------------------------------------------------

// x: (N,H,W,C) grouped over channels; gamma/beta: (C)
template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups,
                  S eps = S(1e-5)) {
    const auto& xs = x.value().shape();
    check(xs.size() == 4, "group_norm: expects NHWC");
    const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
    check(C % groups == 0, "group_norm: channels not divisible by groups");
    const int cg = C / groups;
    const int64_t hw = int64_t(H) * W;
    const S m = S(hw * cg);  // elements per (sample, group)

    auto xhat = std::make_shared<Tensor<S>>(Shape{N, H, W, C});
    auto invstd = std::make_shared<Tensor<S>>(Shape{N, groups});

    for (int n = 0; n < N; ++n) {
        ConstMatMap<S> xm(x.value().data() + n * hw * C, hw, C);
        MatMap<S> hm(xhat->data() + n * hw * C, hw, C);
        for (int g = 0; g < groups; ++g) {
            auto block = xm.middleCols(g * cg, cg);
            S mean = block.sum() / m;
            S var = (block.array() - mean).square().sum() / m;
            S r = S(1) / std::sqrt(var + eps);
            (*invstd)[int64_t(n) * groups + g] = r;
            hm.middleCols(g * cg, cg) = (block.array() - mean) * r;
        }
    }
    const int64_t rows = int64_t(N) * hw;
    Tensor<S> y({N, H, W, C});
    y.mat(rows, C) =
        (xhat->mat(rows, C).array().rowwise() * gamma.value().mat(1, C).row(0).array())
            .rowwise() +
        beta.value().mat(1, C).row(0).array();
    return detail::make_op<S>(
        std::move(y), {x, gamma, beta},
        [xhat, invstd, N, C, groups, cg, hw, m](TapeNode<S>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const int64_t rows = int64_t(N) * hw;
            auto g_all = self.grad.mat(rows, C);
            auto h_all = xhat->mat(rows, C);
            if (pg.requires_grad)
                pg.grad_ref().mat(1, C) += (g_all.array() * h_all.array()).colwise().sum().matrix();
            if (pb.requires_grad) pb.grad_ref().mat(1, C) += g_all.colwise().sum();
            if (!px.requires_grad) return;
            auto gamma_row = pg.value.mat(1, C).row(0);
            for (int n = 0; n < N; ++n) {
                ConstMatMap<S> gn(self.grad.data() + n * hw * C, hw, C);
                ConstMatMap<S> hn(xhat->data() + n * hw * C, hw, C);
                MatMap<S> dxn(px.grad_ref().data() + n * hw * C, hw, C);
                for (int g = 0; g < groups; ++g) {
                    auto gb = gn.middleCols(g * cg, cg);
                    auto hb = hn.middleCols(g * cg, cg);
                    auto gamma_b = gamma_row.segment(g * cg, cg);
                    // dh = g * gamma (broadcast over rows)
                    auto dh = gb.array().rowwise() * gamma_b.array();
                    S sum_dh = dh.sum();
                    S sum_dh_h = (dh * hb.array()).sum();
                    S r = (*invstd)[int64_t(n) * groups + g];
                    dxn.middleCols(g * cg, cg).array() +=
                        r * (dh - sum_dh / m - hb.array() * (sum_dh_h / m));
                }
            }
        });
}

// softmax over the last dim
template <typename S>
Var<S> softmax_lastdim(const Var<S>& x) {
    const auto& xs = x.value().shape();
    int L = xs.back();
    int64_t rows = x.value().size() / L;
    Tensor<S> y(xs);
    {
        auto xm = x.value().mat(rows, L);
        auto ym = y.mat(rows, L);
        for (int64_t r = 0; r < rows; ++r) {
            S mx = xm.row(r).maxCoeff();
            ym.row(r) = (xm.row(r).array() - mx).exp();
            ym.row(r) /= ym.row(r).sum();
        }
    }
    return detail::make_op<S>(std::move(y), {x}, [rows, L](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto g = self.grad.mat(rows, L);
        auto ym = self.value.mat(rows, L);
        auto dx = p.grad_ref().mat(rows, L);
        for (int64_t r = 0; r < rows; ++r) {
            S dot = g.row(r).dot(ym.row(r));
            dx.row(r).array() += ym.row(r).array() * (g.row(r).array() - dot);
        }
    });
}

template <typename S>
Var<S> mean_all(const Var<S>& x) {
    Tensor<S> y({1});
    y[0] = x.value().vec().sum() / S(x.value().size());
    return detail::make_op<S>(std::move(y), {x}, [](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        S c = self.grad[0] / S(p.value.size());
        p.grad_ref().vec().array() += c;
    });
}

// mean((x - target)^2) against a constant target
template <typename S>
Var<S> mse_to(const Var<S>& x, Tensor<S> target) {
    require_same_shape(x.value(), target, "mse_to");
    Tensor<S> y({1});
    y[0] = (x.value().vec() - target.vec()).squaredNorm() / S(x.value().size());
    return detail::make_op<S>(std::move(y), {x}, [target](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        S c = S(2) * self.grad[0] / S(p.value.size());
        p.grad_ref().vec() += c * (p.value.vec() - target.vec());
    });
}

// ---------------------------------------------------------------------------
// spatial / channel broadcast ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> upsample_nearest2x(const Var<S>& x) {
    const auto& xs = x.value().shape();
    check(xs.size() == 4, "upsample_nearest2x: expects NHWC");
    const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
    Tensor<S> y({N, 2 * H, 2 * W, C});
    const S* xp = x.value().data();
    S* yp = y.data();
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < 2 * H; ++i)
            for (int j = 0; j < 2 * W; ++j)
                std::memcpy(yp + ((int64_t(n) * 2 * H + i) * 2 * W + j) * C,
                            xp + ((int64_t(n) * H + i / 2) * W + j / 2) * C, sizeof(S) * size_t(C));
    return detail::make_op<S>(std::move(y), {x}, [N, H, W, C](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor<S>& dx = p.grad_ref();
        const S* gp = self.grad.data();
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j) {
                    const S* src = gp + ((int64_t(n) * 2 * H + i) * 2 * W + j) * C;
                    S* dst = dx.data() + ((int64_t(n) * H + i / 2) * W + j / 2) * C;
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
    });
}

// (N,H,W,C) -> (N,C)
template <typename S>
Var<S> global_avg_pool(const Var<S>& x) {
    const auto& xs = x.value().shape();
    check(xs.size() == 4, "global_avg_pool: expects NHWC");
    const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
    const int64_t hw = int64_t(H) * W;
    Tensor<S> y({N, C});
    for (int n = 0; n < N; ++n) {
        ConstMatMap<S> xm(x.value().data() + n * hw * C, hw, C);
        y.mat(N, C).row(n) = xm.colwise().sum() / S(hw);
    }
    return detail::make_op<S>(std::move(y), {x}, [N, C, hw](TapeNode<S>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto g = self.grad.mat(N, C);
        for (int n = 0; n < N; ++n) {
            MatMap<S> dx(p.grad_ref().data() + n * hw * C, hw, C);
            dx.rowwise() += g.row(n) / S(hw);
        }
    });
}

// y[n,h,w,c] = x[n,h,w,c] * s[n,c]
template <typename S>
Var<S> mul_channels(const Var<S>& x, const Var<S>& s) {
    const auto& xs = x.value().shape();
    check(xs.size() == 4, "mul_channels: expects NHWC");
    const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
    check(s.value().shape() == Shape({N, C}), "mul_channels: scale must be (N,C)");
    const int64_t hw = int64_t(H) * W;
    Tensor<S> y(xs);
    for (int n = 0; n < N; ++n) {
        ConstMatMap<S> xm(x.value().data() + n * hw * C, hw, C);
        MatMap<S> ym(y.data() + n * hw * C, hw, C);
        ym = xm.array().rowwise() * s.value().mat(N, C).row(n).array();
    }
    return detail::make_op<S>(std::move(y), {x, s}, [N, C, hw](TapeNode<S>& self) {
        auto& px = *self.parents[0];
        auto& ps = *self.parents[1];
        for (int n = 0; n < N; ++n) {
            ConstMatMap<S> g(self.grad.data() + n * hw * C, hw, C);
            if (px.requires_grad) {
                MatMap<S> dx(px.grad_ref().data() + n * hw * C, hw, C);
                dx.array() += g.array().rowwise() * ps.value.mat(N, C).row(n).array();
            }
            if (ps.requires_grad) {
                ConstMatMap<S> xm(px.value.data() + n * hw * C, hw, C);
                ps.grad_ref().mat(N, C).row(n) += (g.array() * xm.array()).colwise().sum().matrix();
            }
        }
    });
}

// y[n,h,w,c] = x[n,h,w,c] + s[n,c]
template <typename S>
Var<S> add_channels(const Var<S>& x, const Var<S>& s) {
    const auto& xs = x.value().shape();
    check(xs.size() == 4, "add_channels: expects NHWC");
    const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
    check(s.value().shape() == Shape({N, C}), "add_channels: bias must be (N,C)");
    const int64_t hw = int64_t(H) * W;
    Tensor<S> y(xs);
    for (int n = 0; n < N; ++n) {
        ConstMatMap<S> xm(x.value().data() + n * hw * C, hw, C);
        MatMap<S> ym(y.data() + n * hw * C, hw, C);
        ym = xm.rowwise() + s.value().mat(N, C).row(n);
    }
    return detail::make_op<S>(std::move(y), {x, s}, [N, C, hw](TapeNode<S>& self) {
        auto& px = *self.parents[0];
        auto& ps = *self.parents[1];
        for (int n = 0; n < N; ++n) {
            ConstMatMap<S> g(self.grad.data() + n * hw * C, hw, C);
            if (px.requires_grad) {
                MatMap<S> dx(px.grad_ref().data() + n * hw * C, hw, C);
                dx += g;
            }
            if (ps.requires_grad) ps.grad_ref().mat(N, C).row(n) += g.colwise().sum();
        }
    });
}

}  // namespace gdr
