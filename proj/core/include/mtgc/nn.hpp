#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtgc/rng.hpp"
#include "mtgc/tensor.hpp"

namespace mtgc {

struct NamedParam {
    std::string name;
    Tensor t;
};
using NamedParams = std::vector<NamedParam>;

void set_trainable(NamedParams& params, bool trainable);
void zero_grads(NamedParams& params);
std::vector<Tensor> tensors_of(const NamedParams& params);

// CRC32 over the raw little-endian float bytes of all parameters, in
// declaration order. Used by the freeze-invariance checks.
uint32_t params_checksum(const NamedParams& params);

// ---------------------------------------------------------------- layers

struct Linear {
    Tensor w, b;  // w: [in, out]

    Linear() = default;
    Linear(int in, int out, Rng& rng);
    static Linear zero_init(int in, int out);

    Tensor forward(const Tensor& x) const { return linear(x, w, b); }
    void collect(const std::string& prefix, NamedParams& out);
};

struct Conv2d {
    Tensor w, b;  // w: [out_c, in_c, k, k]
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(int in_c, int out_c, int k, int stride, int pad, Rng& rng);
    static Conv2d zero_init(int in_c, int out_c, int k, int stride, int pad);

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
    void collect(const std::string& prefix, NamedParams& out);
};

struct LayerNorm {
    Tensor gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(int dim);

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
    void collect(const std::string& prefix, NamedParams& out);
};

struct GroupNorm {
    int groups = 8;
    Tensor gamma, beta;

    GroupNorm() = default;
    GroupNorm(int channels, int groups);

    Tensor forward(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }
    void collect(const std::string& prefix, NamedParams& out);
};

// Scaled-dot-product attention over one sequence. Queries come from x
// [T, D]; keys/values from ctx [S, D_ctx] (pass x itself for
// self-attention). key_mask, when defined, is a [S] additive row of
// 0 / -1e9 that removes masked keys from every query's softmax.
struct MultiHeadAttention {
    int heads = 1;
    Linear wq, wk, wv, wo;
    bool record_attention = false;           // test hook
    mutable std::vector<Tensor> last_attention;  // one [T,S] matrix per head

    MultiHeadAttention() = default;
    MultiHeadAttention(int dim, int ctx_dim, int heads, Rng& rng);

    Tensor forward(const Tensor& x, const Tensor& ctx, const Tensor& key_mask = Tensor()) const;
    void collect(const std::string& prefix, NamedParams& out);
};

struct FeedForward {
    Linear fc1, fc2;

    FeedForward() = default;
    FeedForward(int dim, int hidden, Rng& rng);

    Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
    void collect(const std::string& prefix, NamedParams& out);
};

// Pre-norm transformer encoder block: x += attn(ln(x)); x += ff(ln(x)).
struct TransformerBlock {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    FeedForward ff;

    TransformerBlock() = default;
    TransformerBlock(int dim, int heads, int ff_hidden, Rng& rng);

    Tensor forward(const Tensor& x, const Tensor& key_mask = Tensor()) const;
    void collect(const std::string& prefix, NamedParams& out);
};

// ---------------------------------------------------------------- embeddings

// Fixed sinusoidal table [len, dim]: sin on even columns, cos on odd.
Tensor sinusoidal_position_encoding(int len, int dim);

// Classic timestep embedding row [1, dim] for integer t.
Tensor timestep_embedding(int t, int dim);

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(std::vector<Tensor> params, AdamConfig cfg);

    // Applies one update from the accumulated grads, then clears them.
    void step();
    void set_lr(double lr) { cfg_.lr = lr; }
    const AdamConfig& config() const { return cfg_; }
    int64_t step_count() const { return t_; }

    // Exposed for checkpointing (aligned with the param list order).
    std::vector<std::vector<float>>& moment1() { return m_; }
    std::vector<std::vector<float>>& moment2() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_, v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace mtgc
