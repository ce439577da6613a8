#include <catch2/catch_amalgamated.hpp>

#include "mgpt2/nn.hpp"
#include "mgpt2/tensor.hpp"
#include "testutil.hpp"

using namespace mgpt2;
using nn::Tensor;
using D = Tensor<double>;

TEST_CASE("matmul matches hand computation") {
    // [[1,2,3],[4,5,6]] x [[1,0],[0,1],[1,1]]
    D a = D::from({2, 3}, {1, 2, 3, 4, 5, 6});
    D b = D::from({3, 2}, {1, 0, 0, 1, 1, 1});
    D c = nn::matmul(a, b);
    REQUIRE(c.shape() == nn::Shape{2, 2});
    CHECK(c.values() == std::vector<double>{4, 5, 10, 11});
}

TEST_CASE("matmul rejects mismatched inner dims") {
    D a = D::from({2, 3}, {1, 2, 3, 4, 5, 6});
    D b = D::from({2, 2}, {1, 0, 0, 1});
    CHECK_THROWS_AS(nn::matmul(a, b), ContractError);
}

TEST_CASE("stop gradient blocks flow, straight-through passes identity") {
    D x = D::from({3}, {1.0, -2.0, 0.5}, true);
    D q = D::from({3}, {0.9, -1.5, 0.0});

    SECTION("stop_gradient alone contributes nothing") {
        D y = nn::sum(nn::stop_gradient(x));
        nn::backward(y);
        CHECK(x.grad().empty());
    }

    SECTION("y = x + sg(q - x) has identity Jacobian") {
        D st = nn::add(x, nn::stop_gradient(nn::sub(q, x)));
        CHECK(st.values() == q.values());  // forward takes the quantized value
        nn::backward(nn::sum(st));
        REQUIRE(x.grad().size() == 3);
        for (double g : x.grad()) CHECK(g == 1.0);
    }
}

TEST_CASE("linear loss gradient equals input") {
    D w = D::from({4}, {0.1, 0.2, 0.3, 0.4}, true);
    D x = D::from({4}, {2.0, -1.0, 0.5, 3.0});
    nn::backward(nn::sum(nn::mul(w, x)));
    REQUIRE(w.grad().size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(w.grad()[i] == Catch::Approx(x.values()[i]));
}

TEST_CASE("two-layer perceptron gradients match finite differences") {
    Rng rng(17);
    nn::Linear<double> fc1(6, 8, rng, "fc1");
    nn::Linear<double> fc2(8, 3, rng, "fc2");
    D x = nn::gaussian_init<double>({5, 6}, 0.0, 1.0, rng);
    D target = nn::gaussian_init<double>({5, 3}, 0.0, 1.0, rng);

    auto loss_fn = [&] { return nn::mse(fc2.forward(nn::gelu(fc1.forward(x))), target); };
    std::vector<nn::Parameter<double>*> params;
    for (auto* p : fc1.parameters()) params.push_back(p);
    for (auto* p : fc2.parameters()) params.push_back(p);
    CHECK(testutil::max_grad_rel_error(loss_fn, params) < 1e-4);
}

TEST_CASE("primitive gradients match finite differences", "[gradcheck]") {
    Rng rng(99);

    SECTION("conv1d") {
        nn::Conv1d<double> conv(3, 5, 4, 2, 1, rng, "conv");
        D x = nn::gaussian_init<double>({2, 8, 3}, 0.0, 1.0, rng);
        x.set_requires_grad(true);
        D target = nn::gaussian_init<double>({2, 4, 5}, 0.0, 1.0, rng);
        auto loss_fn = [&] { return nn::mse(conv.forward(x), target); };
        auto params = conv.parameters();
        nn::Parameter<double> px(x, "x");
        params.push_back(&px);
        CHECK(testutil::max_grad_rel_error(loss_fn, params) < 1e-4);
    }

    SECTION("conv1d_transpose") {
        nn::ConvTranspose1d<double> deconv(5, 3, 4, 2, 1, rng, "deconv");
        D x = nn::gaussian_init<double>({2, 4, 5}, 0.0, 1.0, rng);
        x.set_requires_grad(true);
        D target = nn::gaussian_init<double>({2, 8, 3}, 0.0, 1.0, rng);
        auto loss_fn = [&] { return nn::mse(deconv.forward(x), target); };
        auto params = deconv.parameters();
        nn::Parameter<double> px(x, "x");
        params.push_back(&px);
        CHECK(testutil::max_grad_rel_error(loss_fn, params) < 1e-4);
    }

    SECTION("layer_norm") {
        nn::LayerNorm<double> ln(6, "ln");
        D x = nn::gaussian_init<double>({4, 6}, 0.0, 2.0, rng);
        x.set_requires_grad(true);
        D target = nn::gaussian_init<double>({4, 6}, 0.0, 1.0, rng);
        auto loss_fn = [&] { return nn::mse(ln.forward(x), target); };
        auto params = ln.parameters();
        nn::Parameter<double> px(x, "x");
        params.push_back(&px);
        CHECK(testutil::max_grad_rel_error(loss_fn, params) < 1e-4);
    }

    SECTION("softmax + smooth_l1 + time_diff + l2_normalize") {
        D x = nn::gaussian_init<double>({3, 4, 5}, 0.0, 1.0, rng);
        x.set_requires_grad(true);
        D target = nn::gaussian_init<double>({3, 3, 5}, 0.0, 1.0, rng);
        auto loss_fn = [&] {
            D soft = nn::softmax(x);
            D normed = nn::l2_normalize_rows(soft);
            return nn::smooth_l1(nn::time_diff(normed), target, 0.75);
        };
        nn::Parameter<double> px(x, "x");
        CHECK(testutil::max_grad_rel_error(loss_fn, {&px}) < 1e-4);
    }

    SECTION("cross_entropy") {
        D logits = nn::gaussian_init<double>({6, 9}, 0.0, 1.5, rng);
        logits.set_requires_grad(true);
        std::vector<int> targets{1, 3, 0, 8, 4, 2};
        std::vector<double> weights{1, 1, 0, 1, 0, 1};
        auto loss_fn = [&] { return nn::cross_entropy(logits, targets, weights); };
        nn::Parameter<double> pl(logits, "logits");
        CHECK(testutil::max_grad_rel_error(loss_fn, {&pl}) < 1e-4);
    }

    SECTION("embedding + permute + concat + slice") {
        nn::EmbeddingTable<double> emb(10, 4, rng, "emb");
        std::vector<int> ids{1, 7, 3, 3, 0, 9};
        D target = nn::gaussian_init<double>({2, 3, 4}, 0.0, 1.0, rng);
        auto loss_fn = [&] {
            D e = emb.forward(ids, {2, 3});              // [2,3,4]
            D p = nn::permute(e, {1, 0, 2});             // [3,2,4]
            D c = nn::concat_last(p, p);                 // [3,2,8]
            D s = nn::slice_last(c, 2, 4);               // [3,2,4]
            return nn::mse(nn::permute(s, {1, 0, 2}), target);
        };
        CHECK(testutil::max_grad_rel_error(loss_fn, emb.parameters()) < 1e-4);
    }
}

TEST_CASE("causal attention with one token returns its value projection") {
    Rng rng(5);
    nn::CausalSelfAttention<double> attn(8, 1, rng, "attn");
    D x = nn::gaussian_init<double>({1, 1, 8}, 0.0, 1.0, rng);
    D y = attn.forward(x);

    // With T=1 the softmax over a single score is 1, so the context vector is
    // exactly the value projection of the sole token.
    D qkv = attn.qkv_proj().forward(x);
    D v = nn::slice_last(qkv, 16, 8);
    D expected = attn.out_proj().forward(v);
    REQUIRE(y.numel() == expected.numel());
    for (std::int64_t i = 0; i < y.numel(); ++i)
        CHECK(y.values()[i] == Catch::Approx(expected.values()[i]).margin(1e-12));
}

TEST_CASE("attention block gradients match finite differences") {
    Rng rng(23);
    nn::CausalSelfAttention<double> attn(8, 2, rng, "attn");
    D x = nn::gaussian_init<double>({2, 5, 8}, 0.0, 1.0, rng);
    D target = nn::gaussian_init<double>({2, 5, 8}, 0.0, 1.0, rng);
    auto loss_fn = [&] { return nn::mse(attn.forward(x), target); };
    CHECK(testutil::max_grad_rel_error(loss_fn, attn.parameters(), 1e-5, 24) < 1e-4);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    D x = nn::gaussian_init<double>({7, 11}, 0.0, 3.0, rng);
    D y = nn::softmax(x);
    for (int r = 0; r < 7; ++r) {
        double s = 0;
        for (int j = 0; j < 11; ++j) s += y.values()[r * 11 + j];
        CHECK(s == Catch::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("backward on a non-scalar is a contract error") {
    D x = D::from({2}, {1.0, 2.0}, true);
    D y = nn::scale(x, 2.0);
    CHECK_THROWS_AS(nn::backward(y), ContractError);
}

TEST_CASE("no-grad mode records no graph") {
    D x = D::from({2}, {1.0, 2.0}, true);
    nn::NoGradGuard guard;
    D y = nn::scale(x, 2.0);
    CHECK_FALSE(y.requires_grad());
}
