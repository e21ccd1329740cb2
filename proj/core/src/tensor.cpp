#include "mtgc/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace mtgc {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); i++) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

std::shared_ptr<TensorImpl> make_impl(const Shape& s) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = s;
    impl->data.assign(size_t(shape_numel(s)), 0.0f);
    return impl;
}

void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Wires up the autograd edge for a freshly computed output. The backward
// closure is recorded only when some input is graph-connected.
Tensor make_op(const Shape& out_shape, std::vector<Tensor> inputs,
               std::function<void(TensorImpl&)> backward) {
    auto impl = make_impl(out_shape);
    bool track = false;
    for (const auto& in : inputs) track = track || in.needs_graph();
    if (track) {
        impl->needs_graph = true;
        for (auto& in : inputs) impl->parents.push_back(in.impl());
        impl->backward_fn = std::move(backward);
    }
    return Tensor(impl);
}

void accumulate(TensorImpl& dst, const float* g, int64_t n) {
    if (!dst.needs_graph) return;
    dst.ensure_grad();
    float* d = dst.grad.data();
    for (int64_t i = 0; i < n; i++) d[i] += g[i];
}

}  // namespace

Tensor Tensor::zeros(const Shape& s) { return Tensor(make_impl(s)); }

Tensor Tensor::full(const Shape& s, float v) {
    auto impl = make_impl(s);
    std::fill(impl->data.begin(), impl->data.end(), v);
    return Tensor(impl);
}

Tensor Tensor::from_vec(const Shape& s, std::vector<float> v) {
    check(int64_t(v.size()) == shape_numel(s), "from_vec: size mismatch");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = s;
    impl->data = std::move(v);
    return Tensor(impl);
}

Tensor Tensor::randn(const Shape& s, Rng& rng, float stddev, float mean) {
    auto impl = make_impl(s);
    for (auto& x : impl->data) x = mean + stddev * float(rng.normal());
    return Tensor(impl);
}

Tensor Tensor::rand_uniform(const Shape& s, Rng& rng, float lo, float hi) {
    auto impl = make_impl(s);
    for (auto& x : impl->data) x = float(rng.uniform(lo, hi));
    return Tensor(impl);
}

void Tensor::backward() {
    check(numel() == 1, "backward: root must be scalar");
    // topological order over the graph-connected subgraph
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.push_back({impl_.get(), 0});
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* p = node->parents[next].get();
            next++;
            if (p->needs_graph && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    impl_->ensure_grad();
    impl_->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(impl);
}

Tensor Tensor::clone() const { return detach(); }

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "add: shape mismatch");
    Tensor out = make_op(a.shape(), {a, b}, [a = a.impl(), b = b.impl()](TensorImpl& self) {
        accumulate(*a, self.grad.data(), self.numel());
        accumulate(*b, self.grad.data(), self.numel());
    });
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; i++) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor out = make_op(a.shape(), {a, b}, [a = a.impl(), b = b.impl()](TensorImpl& self) {
        accumulate(*a, self.grad.data(), self.numel());
        if (b->needs_graph) {
            b->ensure_grad();
            for (int64_t i = 0; i < self.numel(); i++) b->grad[i] -= self.grad[i];
        }
    });
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; i++) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mul: shape mismatch");
    Tensor out = make_op(a.shape(), {a, b}, [a = a.impl(), b = b.impl()](TensorImpl& self) {
        if (a->needs_graph) {
            a->ensure_grad();
            for (int64_t i = 0; i < self.numel(); i++) a->grad[i] += self.grad[i] * b->data[i];
        }
        if (b->needs_graph) {
            b->ensure_grad();
            for (int64_t i = 0; i < self.numel(); i++) b->grad[i] += self.grad[i] * a->data[i];
        }
    });
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; i++) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out = make_op(a.shape(), {a}, [a = a.impl(), s](TensorImpl& self) {
        if (a->needs_graph) {
            a->ensure_grad();
            for (int64_t i = 0; i < self.numel(); i++) a->grad[i] += s * self.grad[i];
        }
    });
    for (int64_t i = 0; i < a.numel(); i++) out.data()[i] = s * a.data()[i];
    return out;
}

Tensor add_scalar(const Tensor& a, float s) {
    Tensor out = make_op(a.shape(), {a}, [a = a.impl()](TensorImpl& self) {
        accumulate(*a, self.grad.data(), self.numel());
    });
    for (int64_t i = 0; i < a.numel(); i++) out.data()[i] = a.data()[i] + s;
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = make_op(x.shape(), {x}, [x = x.impl()](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        for (int64_t i = 0; i < self.numel(); i++)
            if (x->data[i] > 0.0f) x->grad[i] += self.grad[i];
    });
    for (int64_t i = 0; i < x.numel(); i++) out.data()[i] = std::max(0.0f, x.data()[i]);
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = make_op(x.shape(), {x}, [x = x.impl()](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        for (int64_t i = 0; i < self.numel(); i++) {
            const float y = self.data[i];
            x->grad[i] += self.grad[i] * y * (1.0f - y);
        }
    });
    for (int64_t i = 0; i < x.numel(); i++) out.data()[i] = 1.0f / (1.0f + std::exp(-x.data()[i]));
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = make_op(x.shape(), {x}, [x = x.impl()](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        for (int64_t i = 0; i < self.numel(); i++) {
            const float v = x->data[i];
            const float s = 1.0f / (1.0f + std::exp(-v));
            x->grad[i] += self.grad[i] * (s + v * s * (1.0f - s));
        }
    });
    for (int64_t i = 0; i < x.numel(); i++) {
        const float v = x.data()[i];
        out.data()[i] = v / (1.0f + std::exp(-v));
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    constexpr float kInvSqrt2 = 0.70710678118654752440f;
    constexpr float kInvSqrt2Pi = 0.39894228040143267794f;
    Tensor out = make_op(x.shape(), {x}, [x = x.impl()](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        for (int64_t i = 0; i < self.numel(); i++) {
            const float v = x->data[i];
            const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
            x->grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
    for (int64_t i = 0; i < x.numel(); i++) {
        const float v = x.data()[i];
        out.data()[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
    }
    return out;
}

Tensor square(const Tensor& x) { return mul(x, x); }

// ---------------------------------------------------------------- broadcast

Tensor add_rowwise(const Tensor& x, const Tensor& b) {
    check(x.ndim() == 2 && b.ndim() == 1 && x.dim(1) == b.dim(0), "add_rowwise: shapes");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out = make_op(x.shape(), {x, b}, [x = x.impl(), b = b.impl(), m, n](TensorImpl& self) {
        accumulate(*x, self.grad.data(), self.numel());
        if (b->needs_graph) {
            b->ensure_grad();
            for (int i = 0; i < m; i++)
                for (int j = 0; j < n; j++) b->grad[j] += self.grad[size_t(i) * n + j];
        }
    });
    for (int i = 0; i < m; i++)
        for (int j = 0; j < n; j++)
            out.data()[size_t(i) * n + j] = x.data()[size_t(i) * n + j] + b.data()[j];
    return out;
}

Tensor add_chanwise(const Tensor& x, const Tensor& b) {
    check(x.ndim() == 4 && b.ndim() == 1 && x.dim(1) == b.dim(0), "add_chanwise: shapes");
    const int B = x.dim(0), C = x.dim(1);
    const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
    Tensor out = make_op(x.shape(), {x, b}, [x = x.impl(), b = b.impl(), B, C, hw](TensorImpl& self) {
        accumulate(*x, self.grad.data(), self.numel());
        if (b->needs_graph) {
            b->ensure_grad();
            for (int bi = 0; bi < B; bi++)
                for (int c = 0; c < C; c++) {
                    const float* g = self.grad.data() + (int64_t(bi) * C + c) * hw;
                    float acc = 0.0f;
                    for (int64_t i = 0; i < hw; i++) acc += g[i];
                    b->grad[c] += acc;
                }
        }
    });
    for (int bi = 0; bi < B; bi++)
        for (int c = 0; c < C; c++) {
            const float* src = x.data() + (int64_t(bi) * C + c) * hw;
            float* dst = out.data() + (int64_t(bi) * C + c) * hw;
            const float bias = b.data()[c];
            for (int64_t i = 0; i < hw; i++) dst[i] = src[i] + bias;
        }
    return out;
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), "matmul: shapes");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_op({m, n}, {a, b}, [a = a.impl(), b = b.impl(), m, k, n](TensorImpl& self) {
        EMap g(self.grad.data(), m, n);
        if (a->needs_graph) {
            a->ensure_grad();
            EMap ga(a->grad.data(), m, k);
            ECMap bm(b->data.data(), k, n);
            ga.noalias() += g * bm.transpose();
        }
        if (b->needs_graph) {
            b->ensure_grad();
            EMap gb(b->grad.data(), k, n);
            ECMap am(a->data.data(), m, k);
            gb.noalias() += am.transpose() * g;
        }
    });
    ECMap am(a.data(), m, k);
    ECMap bm(b.data(), k, n);
    EMap om(out.data(), m, n);
    om.noalias() = am * bm;
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1), "matmul_nt: shapes");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = make_op({m, n}, {a, b}, [a = a.impl(), b = b.impl(), m, k, n](TensorImpl& self) {
        EMap g(self.grad.data(), m, n);
        if (a->needs_graph) {
            a->ensure_grad();
            EMap ga(a->grad.data(), m, k);
            ECMap bm(b->data.data(), n, k);
            ga.noalias() += g * bm;
        }
        if (b->needs_graph) {
            b->ensure_grad();
            EMap gb(b->grad.data(), n, k);
            ECMap am(a->data.data(), m, k);
            gb.noalias() += g.transpose() * am;
        }
    });
    ECMap am(a.data(), m, k);
    ECMap bm(b.data(), n, k);
    EMap om(out.data(), m, n);
    om.noalias() = am * bm.transpose();
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowwise(matmul(x, w), b);
}

// ---------------------------------------------------------------- softmax / norms

Tensor softmax_rows(const Tensor& x) {
    check(x.ndim() == 2, "softmax_rows: want 2-D");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out = make_op(x.shape(), {x}, [x = x.impl(), m, n](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        for (int i = 0; i < m; i++) {
            const float* y = self.data.data() + size_t(i) * n;
            const float* gy = self.grad.data() + size_t(i) * n;
            float dot = 0.0f;
            for (int j = 0; j < n; j++) dot += gy[j] * y[j];
            float* gx = x->grad.data() + size_t(i) * n;
            for (int j = 0; j < n; j++) gx[j] += y[j] * (gy[j] - dot);
        }
    });
    for (int i = 0; i < m; i++) {
        const float* xi = x.data() + size_t(i) * n;
        float* yi = out.data() + size_t(i) * n;
        float mx = xi[0];
        for (int j = 1; j < n; j++) mx = std::max(mx, xi[j]);
        float sum = 0.0f;
        for (int j = 0; j < n; j++) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        const float inv = 1.0f / sum;
        for (int j = 0; j < n; j++) yi[j] *= inv;
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    check(x.ndim() == 2 && gamma.ndim() == 1 && beta.ndim() == 1, "layer_norm: shapes");
    check(x.dim(1) == gamma.dim(0) && x.dim(1) == beta.dim(0), "layer_norm: widths");
    const int m = x.dim(0), n = x.dim(1);
    // cache inv-std and normalized values for backward
    auto inv_std = std::make_shared<std::vector<float>>(size_t(m));
    auto xhat = std::make_shared<std::vector<float>>(size_t(m) * n);

    Tensor out = make_op(
        x.shape(), {x, gamma, beta},
        [x = x.impl(), gamma = gamma.impl(), beta = beta.impl(), inv_std, xhat, m, n](TensorImpl& self) {
            for (int i = 0; i < m; i++) {
                const float* gy = self.grad.data() + size_t(i) * n;
                const float* xh = xhat->data() + size_t(i) * n;
                if (gamma->needs_graph) {
                    gamma->ensure_grad();
                    for (int j = 0; j < n; j++) gamma->grad[j] += gy[j] * xh[j];
                }
                if (beta->needs_graph) {
                    beta->ensure_grad();
                    for (int j = 0; j < n; j++) beta->grad[j] += gy[j];
                }
                if (x->needs_graph) {
                    x->ensure_grad();
                    float mean_dxhat = 0.0f, mean_dxhat_xhat = 0.0f;
                    for (int j = 0; j < n; j++) {
                        const float dxh = gy[j] * gamma->data[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= float(n);
                    mean_dxhat_xhat /= float(n);
                    float* gx = x->grad.data() + size_t(i) * n;
                    const float is = (*inv_std)[size_t(i)];
                    for (int j = 0; j < n; j++) {
                        const float dxh = gy[j] * gamma->data[j];
                        gx[j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    for (int i = 0; i < m; i++) {
        const float* xi = x.data() + size_t(i) * n;
        float mean = 0.0f;
        for (int j = 0; j < n; j++) mean += xi[j];
        mean /= float(n);
        float var = 0.0f;
        for (int j = 0; j < n; j++) {
            const float d = xi[j] - mean;
            var += d * d;
        }
        var /= float(n);
        const float is = 1.0f / std::sqrt(var + eps);
        (*inv_std)[size_t(i)] = is;
        float* yi = out.data() + size_t(i) * n;
        float* xh = xhat->data() + size_t(i) * n;
        for (int j = 0; j < n; j++) {
            xh[j] = (xi[j] - mean) * is;
            yi[j] = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    return out;
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps) {
    check(x.ndim() == 4, "group_norm: want NCHW");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(C % groups == 0, "group_norm: C % groups");
    check(gamma.dim(0) == C && beta.dim(0) == C, "group_norm: affine widths");
    const int cg = C / groups;
    const int64_t gsz = int64_t(cg) * H * W;
    const int64_t hw = int64_t(H) * W;

    auto inv_std = std::make_shared<std::vector<float>>(size_t(B) * groups);
    auto xhat = std::make_shared<std::vector<float>>(x.vec().size());

    Tensor out = make_op(
        x.shape(), {x, gamma, beta},
        [x = x.impl(), gamma = gamma.impl(), beta = beta.impl(), inv_std, xhat, B, C, groups, cg, gsz,
         hw](TensorImpl& self) {
            for (int b = 0; b < B; b++) {
                for (int g = 0; g < groups; g++) {
                    const int64_t base = (int64_t(b) * C + int64_t(g) * cg) * hw;
                    const float* gy = self.grad.data() + base;
                    const float* xh = xhat->data() + base;
                    if (gamma->needs_graph || beta->needs_graph) {
                        if (gamma->needs_graph) gamma->ensure_grad();
                        if (beta->needs_graph) beta->ensure_grad();
                        for (int ci = 0; ci < cg; ci++) {
                            const int c = g * cg + ci;
                            float dg = 0.0f, db = 0.0f;
                            for (int64_t i = 0; i < hw; i++) {
                                const float gv = gy[ci * hw + i];
                                dg += gv * xh[ci * hw + i];
                                db += gv;
                            }
                            if (gamma->needs_graph) gamma->grad[c] += dg;
                            if (beta->needs_graph) beta->grad[c] += db;
                        }
                    }
                    if (x->needs_graph) {
                        x->ensure_grad();
                        float mean_dxh = 0.0f, mean_dxh_xh = 0.0f;
                        for (int ci = 0; ci < cg; ci++) {
                            const float gm = gamma->data[size_t(g) * cg + ci];
                            for (int64_t i = 0; i < hw; i++) {
                                const float dxh = gy[ci * hw + i] * gm;
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh[ci * hw + i];
                            }
                        }
                        mean_dxh /= float(gsz);
                        mean_dxh_xh /= float(gsz);
                        const float is = (*inv_std)[size_t(b) * groups + g];
                        float* gx = x->grad.data() + base;
                        for (int ci = 0; ci < cg; ci++) {
                            const float gm = gamma->data[size_t(g) * cg + ci];
                            for (int64_t i = 0; i < hw; i++) {
                                const float dxh = gy[ci * hw + i] * gm;
                                gx[ci * hw + i] += is * (dxh - mean_dxh - xh[ci * hw + i] * mean_dxh_xh);
                            }
                        }
                    }
                }
            }
        });
    for (int b = 0; b < B; b++) {
        for (int g = 0; g < groups; g++) {
            const int64_t base = (int64_t(b) * C + int64_t(g) * cg) * hw;
            const float* xi = x.data() + base;
            float mean = 0.0f;
            for (int64_t i = 0; i < gsz; i++) mean += xi[i];
            mean /= float(gsz);
            float var = 0.0f;
            for (int64_t i = 0; i < gsz; i++) {
                const float d = xi[i] - mean;
                var += d * d;
            }
            var /= float(gsz);
            const float is = 1.0f / std::sqrt(var + eps);
            (*inv_std)[size_t(b) * groups + g] = is;
            float* yo = out.data() + base;
            float* xh = xhat->data() + base;
            for (int ci = 0; ci < cg; ci++) {
                const float gm = gamma.data()[size_t(g) * cg + ci];
                const float bt = beta.data()[size_t(g) * cg + ci];
                for (int64_t i = 0; i < hw; i++) {
                    const float v = (xi[ci * hw + i] - mean) * is;
                    xh[ci * hw + i] = v;
                    yo[ci * hw + i] = v * gm + bt;
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------- conv / spatial

namespace {

// im2col for row-major NCHW, one batch item: output [C*kh*kw, oh*ow]
void im2col(const float* x, int C, int H, int W, int k, int stride, int pad, int oh, int ow,
            float* col) {
    for (int c = 0; c < C; c++) {
        for (int ki = 0; ki < k; ki++) {
            for (int kj = 0; kj < k; kj++) {
                float* dst = col + ((size_t(c) * k + ki) * k + kj) * (size_t(oh) * ow);
                for (int i = 0; i < oh; i++) {
                    const int yi = i * stride + ki - pad;
                    for (int j = 0; j < ow; j++) {
                        const int xj = j * stride + kj - pad;
                        dst[size_t(i) * ow + j] =
                            (yi >= 0 && yi < H && xj >= 0 && xj < W)
                                ? x[(size_t(c) * H + yi) * W + xj]
                                : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_add(const float* col, int C, int H, int W, int k, int stride, int pad, int oh, int ow,
                float* x) {
    for (int c = 0; c < C; c++) {
        for (int ki = 0; ki < k; ki++) {
            for (int kj = 0; kj < k; kj++) {
                const float* src = col + ((size_t(c) * k + ki) * k + kj) * (size_t(oh) * ow);
                for (int i = 0; i < oh; i++) {
                    const int yi = i * stride + ki - pad;
                    if (yi < 0 || yi >= H) continue;
                    for (int j = 0; j < ow; j++) {
                        const int xj = j * stride + kj - pad;
                        if (xj < 0 || xj >= W) continue;
                        x[(size_t(c) * H + yi) * W + xj] += src[size_t(i) * ow + j];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check(x.ndim() == 4 && w.ndim() == 4, "conv2d: shapes");
    check(x.dim(1) == w.dim(1), "conv2d: channel mismatch");
    check(w.dim(2) == w.dim(3), "conv2d: square kernels only");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), k = w.dim(2);
    check(b.ndim() == 1 && b.dim(0) == O, "conv2d: bias width");
    const int oh = (H + 2 * pad - k) / stride + 1;
    const int ow = (W + 2 * pad - k) / stride + 1;
    check(oh > 0 && ow > 0, "conv2d: empty output");

    const int ck2 = C * k * k;
    const int64_t ohw = int64_t(oh) * ow;

    Tensor out = make_op(
        {B, O, oh, ow}, {x, w, b},
        [x = x.impl(), w = w.impl(), b = b.impl(), B, C, H, W, O, k, stride, pad, oh, ow, ck2,
         ohw](TensorImpl& self) {
            std::vector<float> col(size_t(ck2) * ohw);
            ECMap wm(w->data.data(), O, ck2);
            if (w->needs_graph) w->ensure_grad();
            if (x->needs_graph) x->ensure_grad();
            if (b->needs_graph) b->ensure_grad();
            std::vector<float> dcol(size_t(ck2) * ohw);
            for (int bi = 0; bi < B; bi++) {
                const float* xb = x->data.data() + size_t(bi) * C * H * W;
                EMap g(self.grad.data() + size_t(bi) * O * ohw, O, int(ohw));
                if (b->needs_graph) {
                    for (int o = 0; o < O; o++) b->grad[o] += g.row(o).sum();
                }
                if (w->needs_graph) {
                    im2col(xb, C, H, W, k, stride, pad, oh, ow, col.data());
                    EMap gw(w->grad.data(), O, ck2);
                    ECMap cm(col.data(), ck2, int(ohw));
                    gw.noalias() += g * cm.transpose();
                }
                if (x->needs_graph) {
                    EMap dc(dcol.data(), ck2, int(ohw));
                    dc.noalias() = wm.transpose() * g;
                    col2im_add(dcol.data(), C, H, W, k, stride, pad, oh, ow,
                               x->grad.data() + size_t(bi) * C * H * W);
                }
            }
        });

    std::vector<float> col(size_t(ck2) * ohw);
    ECMap wm(w.data(), O, ck2);
    for (int bi = 0; bi < B; bi++) {
        im2col(x.data() + size_t(bi) * C * H * W, C, H, W, k, stride, pad, oh, ow, col.data());
        ECMap cm(col.data(), ck2, int(ohw));
        EMap om(out.data() + size_t(bi) * O * ohw, O, int(ohw));
        om.noalias() = wm * cm;
        for (int o = 0; o < O; o++) om.row(o).array() += b.data()[o];
    }
    return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
    check(x.ndim() == 4, "upsample: want NCHW");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out = make_op({B, C, 2 * H, 2 * W}, {x}, [x = x.impl(), B, C, H, W](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        const int H2 = 2 * H, W2 = 2 * W;
        for (int64_t bc = 0; bc < int64_t(B) * C; bc++) {
            const float* g = self.grad.data() + bc * H2 * W2;
            float* gx = x->grad.data() + bc * H * W;
            for (int i = 0; i < H; i++)
                for (int j = 0; j < W; j++)
                    gx[size_t(i) * W + j] += g[size_t(2 * i) * W2 + 2 * j] +
                                             g[size_t(2 * i) * W2 + 2 * j + 1] +
                                             g[size_t(2 * i + 1) * W2 + 2 * j] +
                                             g[size_t(2 * i + 1) * W2 + 2 * j + 1];
        }
    });
    const int W2 = 2 * W;
    for (int64_t bc = 0; bc < int64_t(B) * C; bc++) {
        const float* src = x.data() + bc * H * W;
        float* dst = out.data() + bc * 4 * H * W;
        for (int i = 0; i < H; i++)
            for (int j = 0; j < W; j++) {
                const float v = src[size_t(i) * W + j];
                dst[size_t(2 * i) * W2 + 2 * j] = v;
                dst[size_t(2 * i) * W2 + 2 * j + 1] = v;
                dst[size_t(2 * i + 1) * W2 + 2 * j] = v;
                dst[size_t(2 * i + 1) * W2 + 2 * j + 1] = v;
            }
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 4 && b.ndim() == 4, "concat_channels: want NCHW");
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: dims");
    const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const int64_t hw = int64_t(H) * W;
    Tensor out = make_op(
        {B, Ca + Cb, H, W}, {a, b}, [a = a.impl(), b = b.impl(), B, Ca, Cb, hw](TensorImpl& self) {
            for (int bi = 0; bi < B; bi++) {
                const float* g = self.grad.data() + size_t(bi) * (Ca + Cb) * hw;
                if (a->needs_graph) {
                    a->ensure_grad();
                    float* ga = a->grad.data() + size_t(bi) * Ca * hw;
                    for (int64_t i = 0; i < Ca * hw; i++) ga[i] += g[i];
                }
                if (b->needs_graph) {
                    b->ensure_grad();
                    float* gb = b->grad.data() + size_t(bi) * Cb * hw;
                    for (int64_t i = 0; i < Cb * hw; i++) gb[i] += g[Ca * hw + i];
                }
            }
        });
    for (int bi = 0; bi < B; bi++) {
        float* dst = out.data() + size_t(bi) * (Ca + Cb) * hw;
        std::copy_n(a.data() + size_t(bi) * Ca * hw, Ca * hw, dst);
        std::copy_n(b.data() + size_t(bi) * Cb * hw, Cb * hw, dst + Ca * hw);
    }
    return out;
}

Tensor nchw_to_rows(const Tensor& x) {
    check(x.ndim() == 4, "nchw_to_rows: want NCHW");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t hw = int64_t(H) * W;
    Tensor out = make_op({int(B * hw), C}, {x}, [x = x.impl(), B, C, hw](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        for (int bi = 0; bi < B; bi++)
            for (int c = 0; c < C; c++) {
                float* gx = x->grad.data() + (size_t(bi) * C + c) * hw;
                const float* g = self.grad.data() + size_t(bi) * hw * C + c;
                for (int64_t i = 0; i < hw; i++) gx[i] += g[size_t(i) * C];
            }
    });
    for (int bi = 0; bi < B; bi++)
        for (int c = 0; c < C; c++) {
            const float* src = x.data() + (size_t(bi) * C + c) * hw;
            float* dst = out.data() + size_t(bi) * hw * C + c;
            for (int64_t i = 0; i < hw; i++) dst[size_t(i) * C] = src[i];
        }
    return out;
}

Tensor rows_to_nchw(const Tensor& x, int b, int c, int h, int w) {
    check(x.ndim() == 2 && x.dim(0) == b * h * w && x.dim(1) == c, "rows_to_nchw: shapes");
    const int64_t hw = int64_t(h) * w;
    Tensor out = make_op({b, c, h, w}, {x}, [x = x.impl(), b, c, hw](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        for (int bi = 0; bi < b; bi++)
            for (int ci = 0; ci < c; ci++) {
                const float* g = self.grad.data() + (size_t(bi) * c + ci) * hw;
                float* gx = x->grad.data() + size_t(bi) * hw * c + ci;
                for (int64_t i = 0; i < hw; i++) gx[size_t(i) * c] += g[i];
            }
    });
    for (int bi = 0; bi < b; bi++)
        for (int ci = 0; ci < c; ci++) {
            float* dst = out.data() + (size_t(bi) * c + ci) * hw;
            const float* src = x.data() + size_t(bi) * hw * c + ci;
            for (int64_t i = 0; i < hw; i++) dst[i] = src[size_t(i) * c];
        }
    return out;
}

// ---------------------------------------------------------------- structural

Tensor reshape(const Tensor& x, const Shape& s) {
    check(shape_numel(s) == x.numel(), "reshape: numel mismatch");
    Tensor out = make_op(s, {x}, [x = x.impl()](TensorImpl& self) {
        accumulate(*x, self.grad.data(), self.numel());
    });
    std::copy(x.vec().begin(), x.vec().end(), out.vec().begin());
    return out;
}

Tensor slice_rows(const Tensor& x, int start, int len) {
    check(x.ndim() == 2 && start >= 0 && start + len <= x.dim(0), "slice_rows: range");
    const int n = x.dim(1);
    Tensor out = make_op({len, n}, {x}, [x = x.impl(), start, n](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        float* gx = x->grad.data() + size_t(start) * n;
        for (int64_t i = 0; i < self.numel(); i++) gx[i] += self.grad[i];
    });
    std::copy_n(x.data() + size_t(start) * n, size_t(len) * n, out.data());
    return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
    check(x.ndim() == 2 && start >= 0 && start + len <= x.dim(1), "slice_cols: range");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out = make_op({m, len}, {x}, [x = x.impl(), start, len, m, n](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        for (int i = 0; i < m; i++)
            for (int j = 0; j < len; j++)
                x->grad[size_t(i) * n + start + j] += self.grad[size_t(i) * len + j];
    });
    for (int i = 0; i < m; i++)
        std::copy_n(x.data() + size_t(i) * n + start, len, out.data() + size_t(i) * len);
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_rows: empty");
    const int n = parts[0].dim(1);
    int m = 0;
    for (const auto& p : parts) {
        check(p.ndim() == 2 && p.dim(1) == n, "concat_rows: widths");
        m += p.dim(0);
    }
    std::vector<Tensor> inputs = parts;
    Tensor out = make_op({m, n}, inputs, [parts, n](TensorImpl& self) {
        size_t off = 0;
        for (const auto& p : parts) {
            const size_t cnt = size_t(p.numel());
            if (p.impl()->needs_graph) {
                p.impl()->ensure_grad();
                for (size_t i = 0; i < cnt; i++) p.impl()->grad[i] += self.grad[off + i];
            }
            off += cnt;
        }
    });
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.vec().begin(), p.vec().end(), out.vec().begin() + off);
        off += size_t(p.numel());
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_cols: empty");
    const int m = parts[0].dim(0);
    int n = 0;
    for (const auto& p : parts) {
        check(p.ndim() == 2 && p.dim(0) == m, "concat_cols: heights");
        n += p.dim(1);
    }
    Tensor out = make_op({m, n}, parts, [parts, m, n](TensorImpl& self) {
        int off = 0;
        for (const auto& p : parts) {
            const int w = p.dim(1);
            if (p.impl()->needs_graph) {
                p.impl()->ensure_grad();
                for (int i = 0; i < m; i++)
                    for (int j = 0; j < w; j++)
                        p.impl()->grad[size_t(i) * w + j] += self.grad[size_t(i) * n + off + j];
            }
            off += w;
        }
    });
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int i = 0; i < m; i++)
            std::copy_n(p.data() + size_t(i) * w, w, out.data() + size_t(i) * n + off);
        off += w;
    }
    return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    check(table.ndim() == 2, "embedding_rows: table 2-D");
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids) check(id >= 0 && id < v, "embedding_rows: id range");
    Tensor out = make_op({int(ids.size()), d}, {table}, [table = table.impl(), ids, d](TensorImpl& self) {
        if (!table->needs_graph) return;
        table->ensure_grad();
        for (size_t i = 0; i < ids.size(); i++) {
            float* gt = table->grad.data() + size_t(ids[i]) * d;
            const float* g = self.grad.data() + i * d;
            for (int j = 0; j < d; j++) gt[j] += g[j];
        }
    });
    for (size_t i = 0; i < ids.size(); i++)
        std::copy_n(table.data() + size_t(ids[i]) * d, d, out.data() + i * d);
    return out;
}

Tensor replace_rows(const Tensor& base, const Tensor& repl, const std::vector<int>& positions) {
    check(base.ndim() == 2 && repl.ndim() == 2 && base.dim(1) == repl.dim(1), "replace_rows: shapes");
    check(int(positions.size()) == repl.dim(0), "replace_rows: position count");
    const int m = base.dim(0), n = base.dim(1);
    for (int p : positions) check(p >= 0 && p < m, "replace_rows: position range");
    Tensor out = make_op(
        base.shape(), {base, repl},
        [base = base.impl(), repl = repl.impl(), positions, m, n](TensorImpl& self) {
            if (base->needs_graph) {
                base->ensure_grad();
                std::vector<char> replaced(size_t(m), 0);
                for (int p : positions) replaced[size_t(p)] = 1;
                for (int i = 0; i < m; i++) {
                    if (replaced[size_t(i)]) continue;
                    for (int j = 0; j < n; j++)
                        base->grad[size_t(i) * n + j] += self.grad[size_t(i) * n + j];
                }
            }
            if (repl->needs_graph) {
                repl->ensure_grad();
                for (size_t r = 0; r < positions.size(); r++) {
                    const int p = positions[r];
                    for (int j = 0; j < n; j++)
                        repl->grad[r * n + j] += self.grad[size_t(p) * n + j];
                }
            }
        });
    std::copy(base.vec().begin(), base.vec().end(), out.vec().begin());
    for (size_t r = 0; r < positions.size(); r++)
        std::copy_n(repl.data() + r * n, n, out.data() + size_t(positions[r]) * n);
    return out;
}

// ---------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& x) {
    Tensor out = make_op({1}, {x}, [x = x.impl()](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        const float g = self.grad[0];
        for (auto& gi : x->grad) gi += g;
    });
    float acc = 0.0f;
    for (float v : x.vec()) acc += v;
    out.data()[0] = acc;
    return out;
}

Tensor mean_all(const Tensor& x) {
    const float inv = 1.0f / float(x.numel());
    Tensor out = make_op({1}, {x}, [x = x.impl(), inv](TensorImpl& self) {
        if (!x->needs_graph) return;
        x->ensure_grad();
        const float g = self.grad[0] * inv;
        for (auto& gi : x->grad) gi += g;
    });
    float acc = 0.0f;
    for (float v : x.vec()) acc += v;
    out.data()[0] = acc * inv;
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mse: shape mismatch");
    const float inv = 1.0f / float(a.numel());
    Tensor out = make_op({1}, {a, b}, [a = a.impl(), b = b.impl(), inv](TensorImpl& self) {
        const float g = self.grad[0] * 2.0f * inv;
        if (a->needs_graph) {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); i++) a->grad[i] += g * (a->data[i] - b->data[i]);
        }
        if (b->needs_graph) {
            b->ensure_grad();
            for (int64_t i = 0; i < b->numel(); i++) b->grad[i] -= g * (a->data[i] - b->data[i]);
        }
    });
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); i++) {
        const double d = double(a.data()[i]) - double(b.data()[i]);
        acc += d * d;
    }
    out.data()[0] = float(acc * inv);
    return out;
}

// ---------------------------------------------------------------- rate model

Tensor logistic_rate_bits(const Tensor& y, const Tensor& mu, const Tensor& log_scale) {
    check(y.ndim() == 4, "logistic_rate_bits: want NCHW");
    const int B = y.dim(0), C = y.dim(1);
    const int64_t hw = int64_t(y.dim(2)) * y.dim(3);
    check(mu.dim(0) == C && log_scale.dim(0) == C, "logistic_rate_bits: param widths");
    constexpr float kInvLn2 = 1.4426950408889634074f;
    constexpr float kPFloor = 1e-9f;  // additive smoothing keeps log finite

    Tensor out = make_op(
        y.shape(), {y, mu, log_scale},
        [y = y.impl(), mu = mu.impl(), ls = log_scale.impl(), B, C, hw](TensorImpl& self) {
            if (y->needs_graph) y->ensure_grad();
            if (mu->needs_graph) mu->ensure_grad();
            if (ls->needs_graph) ls->ensure_grad();
            for (int bi = 0; bi < B; bi++)
                for (int c = 0; c < C; c++) {
                    const float m = mu->data[c];
                    const float s = std::exp(ls->data[c]);
                    const float inv_s = 1.0f / s;
                    const int64_t base = (int64_t(bi) * C + c) * hw;
                    float gmu = 0.0f, gls = 0.0f;
                    for (int64_t i = 0; i < hw; i++) {
                        const float v = y->data[base + i];
                        const float a = (v + 0.5f - m) * inv_s;
                        const float b = (v - 0.5f - m) * inv_s;
                        const float sa = 1.0f / (1.0f + std::exp(-a));
                        const float sb = 1.0f / (1.0f + std::exp(-b));
                        const float p = sa - sb + kPFloor;
                        const float dpda = sa * (1.0f - sa);
                        const float dpdb = sb * (1.0f - sb);
                        // d(-log2 p)/dp = -1/(p ln2)
                        const float dout_dp = -kInvLn2 / p;
                        const float g = self.grad[base + i] * dout_dp;
                        if (y->needs_graph) y->grad[base + i] += g * (dpda - dpdb) * inv_s;
                        gmu += g * -(dpda - dpdb) * inv_s;
                        gls += g * -(a * dpda - b * dpdb);
                    }
                    if (mu->needs_graph) mu->grad[c] += gmu;
                    if (ls->needs_graph) ls->grad[c] += gls;
                }
        });
    for (int bi = 0; bi < B; bi++)
        for (int c = 0; c < C; c++) {
            const float m = mu.data()[c];
            const float s = std::exp(log_scale.data()[c]);
            const float inv_s = 1.0f / s;
            const int64_t base = (int64_t(bi) * C + c) * hw;
            for (int64_t i = 0; i < hw; i++) {
                const float v = y.data()[base + i];
                const float a = (v + 0.5f - m) * inv_s;
                const float b = (v - 0.5f - m) * inv_s;
                const float sa = 1.0f / (1.0f + std::exp(-a));
                const float sb = 1.0f / (1.0f + std::exp(-b));
                const float p = sa - sb + kPFloor;
                out.data()[base + i] = -std::log2(p);
            }
        }
    return out;
}

bool all_finite(const Tensor& x) {
    for (float v : x.vec())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace mtgc
