#include "mtgc/nn.hpp"

#include <cmath>
#include <cstring>

#include "mtgc/bytes.hpp"

namespace mtgc {

void set_trainable(NamedParams& params, bool trainable) {
    for (auto& p : params) p.t.set_requires_grad(trainable);
}

void zero_grads(NamedParams& params) {
    for (auto& p : params) p.t.zero_grad();
}

std::vector<Tensor> tensors_of(const NamedParams& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.t);
    return out;
}

uint32_t params_checksum(const NamedParams& params) {
    ByteWriter w;
    for (const auto& p : params)
        w.raw(p.t.data(), size_t(p.t.numel()) * sizeof(float));
    return crc32_ieee(w.data());
}

// ---------------------------------------------------------------- layers

Linear::Linear(int in, int out, Rng& rng) {
    w = Tensor::randn({in, out}, rng, 1.0f / std::sqrt(float(in)));
    b = Tensor::zeros({out});
}

Linear Linear::zero_init(int in, int out) {
    Linear l;
    l.w = Tensor::zeros({in, out});
    l.b = Tensor::zeros({out});
    return l;
}

void Linear::collect(const std::string& prefix, NamedParams& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

Conv2d::Conv2d(int in_c, int out_c, int k, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
    w = Tensor::randn({out_c, in_c, k, k}, rng, 1.0f / std::sqrt(float(in_c * k * k)));
    b = Tensor::zeros({out_c});
}

Conv2d Conv2d::zero_init(int in_c, int out_c, int k, int stride_, int pad_) {
    Conv2d c;
    c.stride = stride_;
    c.pad = pad_;
    c.w = Tensor::zeros({out_c, in_c, k, k});
    c.b = Tensor::zeros({out_c});
    return c;
}

void Conv2d::collect(const std::string& prefix, NamedParams& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

LayerNorm::LayerNorm(int dim) {
    gamma = Tensor::full({dim}, 1.0f);
    beta = Tensor::zeros({dim});
}

void LayerNorm::collect(const std::string& prefix, NamedParams& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

GroupNorm::GroupNorm(int channels, int groups_) : groups(groups_) {
    gamma = Tensor::full({channels}, 1.0f);
    beta = Tensor::zeros({channels});
}

void GroupNorm::collect(const std::string& prefix, NamedParams& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

MultiHeadAttention::MultiHeadAttention(int dim, int ctx_dim, int heads_, Rng& rng) : heads(heads_) {
    wq = Linear(dim, dim, rng);
    wk = Linear(ctx_dim, dim, rng);
    wv = Linear(ctx_dim, dim, rng);
    wo = Linear(dim, dim, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& x, const Tensor& ctx, const Tensor& key_mask) const {
    const int dim = x.dim(1);
    const int dh = dim / heads;
    last_attention.clear();
    Tensor q = wq.forward(x);
    Tensor k = wk.forward(ctx);
    Tensor v = wv.forward(ctx);
    const float inv_sqrt_dk = 1.0f / std::sqrt(float(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(size_t(heads));
    for (int h = 0; h < heads; h++) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_dk);
        if (key_mask.defined()) scores = add_rowwise(scores, key_mask);
        Tensor attn = softmax_rows(scores);
        if (record_attention) last_attention.push_back(attn.detach());
        head_outs.push_back(matmul(attn, vh));
    }
    Tensor merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return wo.forward(merged);
}

void MultiHeadAttention::collect(const std::string& prefix, NamedParams& out) {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
}

FeedForward::FeedForward(int dim, int hidden, Rng& rng) {
    fc1 = Linear(dim, hidden, rng);
    fc2 = Linear(hidden, dim, rng);
}

void FeedForward::collect(const std::string& prefix, NamedParams& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

TransformerBlock::TransformerBlock(int dim, int heads, int ff_hidden, Rng& rng) {
    ln1 = LayerNorm(dim);
    ln2 = LayerNorm(dim);
    attn = MultiHeadAttention(dim, dim, heads, rng);
    ff = FeedForward(dim, ff_hidden, rng);
}

Tensor TransformerBlock::forward(const Tensor& x, const Tensor& key_mask) const {
    Tensor h = ln1.forward(x);
    Tensor y = add(x, attn.forward(h, h, key_mask));
    return add(y, ff.forward(ln2.forward(y)));
}

void TransformerBlock::collect(const std::string& prefix, NamedParams& out) {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    ff.collect(prefix + ".ff", out);
}

// ---------------------------------------------------------------- embeddings

Tensor sinusoidal_position_encoding(int len, int dim) {
    Tensor pe = Tensor::zeros({len, dim});
    for (int pos = 0; pos < len; pos++) {
        for (int i = 0; i < dim; i += 2) {
            const double freq = std::pow(10000.0, -double(i) / double(dim));
            pe.data()[size_t(pos) * dim + i] = float(std::sin(pos * freq));
            if (i + 1 < dim) pe.data()[size_t(pos) * dim + i + 1] = float(std::cos(pos * freq));
        }
    }
    return pe;
}

Tensor timestep_embedding(int t, int dim) {
    Tensor e = Tensor::zeros({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; i++) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        e.data()[i] = float(std::cos(t * freq));
        e.data()[half + i] = float(std::sin(t * freq));
    }
    return e;
}

// ---------------------------------------------------------------- optimizer

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); i++) {
        m_[i].assign(size_t(params_[i].numel()), 0.0f);
        v_[i].assign(size_t(params_[i].numel()), 0.0f);
    }
}

void Adam::step() {
    t_++;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t i = 0; i < params_.size(); i++) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;  // no contribution this step
        const float* g = p.grad().data();
        float* x = p.data();
        float* m = m_[i].data();
        float* v = v_[i].data();
        const int64_t n = p.numel();
        for (int64_t j = 0; j < n; j++) {
            m[j] = float(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j]);
            v[j] = float(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * double(g[j]) * g[j]);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            x[j] -= float(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
        p.zero_grad();
    }
}

}  // namespace mtgc
