#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtgc/nn.hpp"
#include "mtgc/rng.hpp"
#include "mtgc/tensor.hpp"
#include "testutil.hpp"

using namespace mtgc;
using mtgc::test::grad_check;

namespace {
Tensor rand_param(const Shape& s, Rng& rng, float stddev = 1.0f) {
    Tensor t = Tensor::randn(s, rng, stddev);
    t.set_requires_grad(true);
    return t;
}
}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    Rng rng(1);
    Tensor a = rand_param({4, 5}, rng);
    Tensor b = Tensor::randn({4, 5}, rng);

    SUBCASE("add/mul/scale chain") {
        auto loss = [&] { return sum_all(mul(add(scale(a, 1.7f), b), a)); };
        a.zero_grad();
        CHECK(grad_check(a, loss) < 1e-2);
    }
    SUBCASE("silu") {
        auto loss = [&] { return sum_all(silu(a)); };
        a.zero_grad();
        CHECK(grad_check(a, loss) < 1e-2);
    }
    SUBCASE("gelu") {
        auto loss = [&] { return sum_all(gelu(a)); };
        a.zero_grad();
        CHECK(grad_check(a, loss) < 1e-2);
    }
    SUBCASE("sigmoid") {
        auto loss = [&] { return sum_all(sigmoid(a)); };
        a.zero_grad();
        CHECK(grad_check(a, loss) < 1e-2);
    }
    SUBCASE("mse") {
        auto loss = [&] { return mse(a, b); };
        a.zero_grad();
        CHECK(grad_check(a, loss) < 1e-2);
    }
}

TEST_CASE("matmul family gradients") {
    Rng rng(2);
    Tensor a = rand_param({3, 4}, rng);
    Tensor b = rand_param({4, 6}, rng);
    Tensor c = rand_param({5, 4}, rng);

    SUBCASE("matmul wrt lhs and rhs") {
        auto loss = [&] { return sum_all(square(matmul(a, b))); };
        a.zero_grad();
        CHECK(grad_check(a, loss) < 1e-2);
        b.zero_grad();
        CHECK(grad_check(b, loss) < 1e-2);
    }
    SUBCASE("matmul_nt") {
        auto loss = [&] { return sum_all(square(matmul_nt(a, c))); };
        a.zero_grad();
        CHECK(grad_check(a, loss) < 1e-2);
        c.zero_grad();
        CHECK(grad_check(c, loss) < 1e-2);
    }
    SUBCASE("linear bias") {
        Tensor w = rand_param({4, 2}, rng);
        Tensor bias = rand_param({2}, rng);
        auto loss = [&] { return sum_all(square(linear(a, w, bias))); };
        bias.zero_grad();
        CHECK(grad_check(bias, loss) < 1e-2);
    }
}

TEST_CASE("softmax rows sum to one and grads check") {
    Rng rng(3);
    Tensor x = rand_param({6, 9}, rng, 2.0f);
    Tensor y = softmax_rows(x);
    for (int i = 0; i < 6; i++) {
        double s = 0;
        for (int j = 0; j < 9; j++) s += y.data()[i * 9 + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
    auto loss = [&] { return sum_all(mul(softmax_rows(x), x)); };
    x.zero_grad();
    CHECK(grad_check(x, loss) < 1e-2);
}

TEST_CASE("normalization gradients") {
    Rng rng(4);
    SUBCASE("layer_norm") {
        Tensor x = rand_param({5, 8}, rng);
        Tensor g = rand_param({8}, rng, 0.5f);
        Tensor b = rand_param({8}, rng, 0.5f);
        Tensor probe = Tensor::randn({5, 8}, rng);
        auto loss = [&] { return sum_all(mul(layer_norm(x, g, b), probe)); };
        for (Tensor* t : {&x, &g, &b}) {
            t->zero_grad();
            CHECK(grad_check(*t, loss) < 1e-2);
        }
    }
    SUBCASE("group_norm") {
        Tensor x = rand_param({2, 8, 3, 3}, rng);
        Tensor g = rand_param({8}, rng, 0.5f);
        Tensor b = rand_param({8}, rng, 0.5f);
        Tensor probe = Tensor::randn({2, 8, 3, 3}, rng);
        auto loss = [&] { return sum_all(mul(group_norm(x, 4, g, b), probe)); };
        for (Tensor* t : {&x, &g, &b}) {
            t->zero_grad();
            CHECK(grad_check(*t, loss) < 1e-2);
        }
    }
}

TEST_CASE("conv2d matches finite differences") {
    Rng rng(5);
    Tensor x = rand_param({2, 3, 6, 6}, rng);
    Tensor w = rand_param({4, 3, 3, 3}, rng);
    Tensor b = rand_param({4}, rng);
    Tensor probe = Tensor::randn({2, 4, 3, 3}, rng);
    auto loss = [&] { return sum_all(mul(conv2d(x, w, b, 2, 1), probe)); };
    for (Tensor* t : {&x, &w, &b}) {
        t->zero_grad();
        CHECK(grad_check(*t, loss) < 1e-2);
    }
}

TEST_CASE("upsample / concat / reshape / slices") {
    Rng rng(6);
    Tensor x = rand_param({1, 2, 3, 3}, rng);
    Tensor y = rand_param({1, 3, 3, 3}, rng);
    Tensor probe = Tensor::randn({1, 2, 6, 6}, rng);

    auto up_loss = [&] { return sum_all(mul(upsample_nearest2x(x), probe)); };
    x.zero_grad();
    CHECK(grad_check(x, up_loss) < 1e-2);

    auto cat_loss = [&] { return sum_all(square(concat_channels(x, y))); };
    y.zero_grad();
    CHECK(grad_check(y, cat_loss) < 1e-2);

    Tensor m = rand_param({6, 4}, rng);
    auto slice_loss = [&] {
        return sum_all(square(concat_rows({slice_rows(m, 1, 2), slice_rows(m, 3, 3)})));
    };
    m.zero_grad();
    CHECK(grad_check(m, slice_loss) < 1e-2);

    auto col_loss = [&] { return sum_all(square(slice_cols(m, 1, 2))); };
    m.zero_grad();
    CHECK(grad_check(m, col_loss) < 1e-2);

    auto rows_loss = [&] { return sum_all(square(nchw_to_rows(x))); };
    x.zero_grad();
    CHECK(grad_check(x, rows_loss) < 1e-2);

    auto back_loss = [&] { return sum_all(square(rows_to_nchw(nchw_to_rows(x), 1, 2, 3, 3))); };
    x.zero_grad();
    CHECK(grad_check(x, back_loss) < 1e-2);
}

TEST_CASE("replace_rows routes gradients and preserves rows") {
    Rng rng(7);
    Tensor base = rand_param({5, 3}, rng);
    Tensor repl = rand_param({2, 3}, rng);
    std::vector<int> pos{1, 3};
    Tensor out = replace_rows(base, repl, pos);
    for (int j = 0; j < 3; j++) {
        CHECK(out.data()[1 * 3 + j] == repl.data()[0 * 3 + j]);
        CHECK(out.data()[3 * 3 + j] == repl.data()[1 * 3 + j]);
        CHECK(out.data()[0 * 3 + j] == base.data()[0 * 3 + j]);
    }
    auto loss = [&] { return sum_all(square(replace_rows(base, repl, pos))); };
    base.zero_grad();
    CHECK(grad_check(base, loss) < 1e-2);
    repl.zero_grad();
    CHECK(grad_check(repl, loss) < 1e-2);
    // grad must not reach replaced base rows
    base.zero_grad();
    sum_all(square(replace_rows(base, repl, pos))).backward();
    for (int j = 0; j < 3; j++) {
        CHECK(base.grad()[1 * 3 + j] == 0.0f);
        CHECK(base.grad()[3 * 3 + j] == 0.0f);
    }
}

TEST_CASE("embedding rows gather/scatter") {
    Rng rng(8);
    Tensor table = rand_param({10, 4}, rng);
    std::vector<int> ids{2, 7, 2};
    auto loss = [&] { return sum_all(square(embedding_rows(table, ids))); };
    table.zero_grad();
    CHECK(grad_check(table, loss) < 1e-2);
}

TEST_CASE("logistic rate bits: value and gradients") {
    Rng rng(9);
    Tensor y = rand_param({1, 2, 3, 3}, rng, 1.0f);
    Tensor mu = rand_param({2}, rng, 0.5f);
    Tensor ls = rand_param({2}, rng, 0.1f);

    // value oracle: direct formula at one site
    Tensor bits = logistic_rate_bits(y, mu, ls);
    {
        const float v = y.data()[0];
        const double s = std::exp(double(mu.numel() ? ls.data()[0] : 0.0f));
        auto sigm = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
        const double p =
            sigm((v + 0.5 - mu.data()[0]) / s) - sigm((v - 0.5 - mu.data()[0]) / s) + 1e-9;
        CHECK(bits.data()[0] == doctest::Approx(-std::log2(p)).epsilon(1e-4));
    }

    auto loss = [&] { return sum_all(logistic_rate_bits(y, mu, ls)); };
    for (Tensor* t : {&y, &mu, &ls}) {
        t->zero_grad();
        CHECK(grad_check(*t, loss) < 1e-2);
    }
}

TEST_CASE("frozen weights receive no gradient but pass it through") {
    Rng rng(10);
    Tensor x = rand_param({2, 4}, rng);
    Tensor w = Tensor::randn({4, 4}, rng);  // frozen: requires_grad stays false
    Tensor loss = sum_all(square(matmul(x, w)));
    loss.backward();
    CHECK(x.has_grad());
    CHECK(!w.has_grad());
    CHECK(mtgc::test::max_abs(x.grad()) > 0.0);
}

TEST_CASE("no graph is built for constant-only computation") {
    Rng rng(11);
    Tensor a = Tensor::randn({8, 8}, rng);
    Tensor b = Tensor::randn({8, 8}, rng);
    Tensor c = matmul(a, b);
    CHECK(!c.needs_graph());
    CHECK(c.impl()->parents.empty());
}

TEST_CASE("transformer block: attention rows sum to 1, grads flow") {
    Rng rng(12);
    TransformerBlock blk(16, 4, 32, rng);
    NamedParams ps;
    blk.collect("blk", ps);
    set_trainable(ps, true);
    blk.attn.record_attention = true;

    Tensor x = Tensor::randn({5, 16}, rng);
    Tensor y = blk.forward(x);
    CHECK(y.shape() == Shape{5, 16});
    REQUIRE(blk.attn.last_attention.size() == 4);
    for (const auto& a : blk.attn.last_attention) {
        for (int i = 0; i < a.dim(0); i++) {
            double s = 0;
            for (int j = 0; j < a.dim(1); j++) s += a.data()[i * a.dim(1) + j];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
    sum_all(square(y)).backward();
    for (auto& p : ps) CHECK(p.t.has_grad());
}

TEST_CASE("adam determinism") {
    auto run = [] {
        Rng rng(42);
        Tensor w = Tensor::randn({4, 4}, rng);
        w.set_requires_grad(true);
        Tensor target = Tensor::randn({4, 4}, rng);
        Adam opt({w}, {.lr = 1e-2});
        for (int i = 0; i < 50; i++) {
            Tensor loss = mse(w, target);
            loss.backward();
            opt.step();
        }
        return w.vec();
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);
}

TEST_CASE("rng reproducibility and normal moments") {
    Rng r1(7), r2(7);
    for (int i = 0; i < 100; i++) CHECK(r1.next_u64() == r2.next_u64());
    Rng r(123);
    double mean = 0, var = 0;
    const int n = 200000;
    std::vector<double> xs(n);
    for (auto& x : xs) x = r.normal();
    for (double x : xs) mean += x;
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}
