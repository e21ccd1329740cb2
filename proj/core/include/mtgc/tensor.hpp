#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mtgc/rng.hpp"

namespace mtgc {

// Dense float32 tensor with reverse-mode autodiff.
//
// Tensors are shared handles to a TensorImpl node. Every op that sees at
// least one graph-connected input records a backward closure on its output;
// ops over plain constants record nothing, so frozen-weight inference builds
// no graph at all. Gradients accumulate into leaf tensors whose
// requires_grad flag is set.

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool needs_graph = false;  // this node or an ancestor requires grad
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    int64_t numel() const { return int64_t(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& s);
    static Tensor full(const Shape& s, float v);
    static Tensor from_vec(const Shape& s, std::vector<float> v);
    static Tensor randn(const Shape& s, Rng& rng, float stddev = 1.0f, float mean = 0.0f);
    static Tensor rand_uniform(const Shape& s, Rng& rng, float lo, float hi);
    static Tensor scalar(float v) { return from_vec({1}, {v}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return int(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[size_t(i)]; }
    int64_t numel() const { return impl_->numel(); }

    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }
    std::vector<float>& vec() { return impl_->data; }
    const std::vector<float>& vec() const { return impl_->data; }
    float item() const { return impl_->data.at(0); }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        impl_->needs_graph = b || !impl_->parents.empty();
        return *this;
    }
    bool needs_graph() const { return impl_ && impl_->needs_graph; }

    const std::vector<float>& grad() const { return impl_->grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() { impl_->grad.clear(); }

    // Reverse-mode sweep from a scalar output.
    void backward();

    // Same values, cut from the graph.
    Tensor detach() const;
    Tensor clone() const;

    std::shared_ptr<TensorImpl>& impl() { return impl_; }
    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---- elementwise / scalar ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);

// ---- broadcast adds ----
Tensor add_rowwise(const Tensor& x, const Tensor& b);   // [M,N] + [N]
Tensor add_chanwise(const Tensor& x, const Tensor& b);  // [B,C,H,W] + [C]

// ---- matmul family (2-D, row-major) ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [M,K]x[K,N]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [M,K]x[N,K]^T -> [M,N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x*w + b

// ---- normalization / attention ----
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

// ---- convolution / spatial ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor nchw_to_rows(const Tensor& x);  // [B,C,H,W] -> [B*H*W, C]
Tensor rows_to_nchw(const Tensor& x, int b, int c, int h, int w);

// ---- structural ----
Tensor reshape(const Tensor& x, const Shape& s);
Tensor slice_rows(const Tensor& x, int start, int len);
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor replace_rows(const Tensor& base, const Tensor& repl, const std::vector<int>& positions);

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Bits to code each element of y under a per-channel discretized logistic
// with trainable mean and log-scale: -log2(CDF(y+1/2) - CDF(y-1/2)).
// y is [B,C,H,W]; mu and log_scale are [C]. Fused op with exact gradients.
Tensor logistic_rate_bits(const Tensor& y, const Tensor& mu, const Tensor& log_scale);

bool all_finite(const Tensor& x);

}  // namespace mtgc
