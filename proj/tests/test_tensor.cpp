#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "fd_check.hpp"
#include "guardrail/tensor.hpp"

using namespace guardrail;

TEST_CASE("finite differences agree with tape gradients", "[tensor][fd]") {
    for (std::uint64_t seed : {1u, 7u, 42u}) {
        for (const auto& r : fdcheck::run_battery(seed)) {
            INFO("op " << r.op << " seed " << seed);
            CHECK(r.max_rel_err <= 1e-3);
        }
    }
}

TEST_CASE("small matmuls by hand", "[tensor]") {
    auto a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    auto eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    auto p = matmul(a, eye);
    REQUIRE(p.data() == a.data());

    auto row = Tensor::from_values({1, 2}, {1, 2});
    auto col = Tensor::from_values({2, 1}, {3, 4});
    auto s = matmul(row, col);
    REQUIRE(s.shape() == Shape{1, 1});
    REQUIRE(s.item() == 11.0f);
}

TEST_CASE("matmul rejects incompatible shapes", "[tensor][errors]") {
    Tensor a({2, 3});
    Tensor b({2, 3});
    try {
        matmul(a, b);
        FAIL("expected invalid_argument");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("vs") != std::string::npos);
    }
    REQUIRE_THROWS_AS(add(Tensor({2, 2}), Tensor({3, 2})), std::invalid_argument);
    REQUIRE_THROWS_AS(add_rowvec(Tensor({2, 2}), Tensor({3})), std::invalid_argument);
    REQUIRE_THROWS_AS(layer_norm(Tensor({2, 4}), Tensor({3}, 1.0f), Tensor({4})), std::invalid_argument);
}

TEST_CASE("cross entropy on uniform logits is log of class count", "[tensor]") {
    Tensor logits({3, 4}, 0.25f);
    auto loss = softmax_cross_entropy(logits, {0, 3, 1});
    REQUIRE_THAT(loss.item(), Catch::Matchers::WithinAbs(std::log(4.0), 1e-6));

    REQUIRE_THROWS_AS(softmax_cross_entropy(logits, {0, 4, 1}), std::out_of_range);
    REQUIRE_THROWS_AS(softmax_cross_entropy(logits, {0, 1}), std::invalid_argument);
}

TEST_CASE("soft cross entropy matches hard targets on one-hot rows", "[tensor]") {
    Rng rng(11);
    auto logits = fdcheck::rand_tensor(rng, {3, 5}, 1.0f, false);
    std::vector<int> targets = {2, 0, 4};
    Tensor onehot({3, 5});
    for (int i = 0; i < 3; ++i) onehot.data()[static_cast<std::size_t>(i) * 5 + targets[static_cast<std::size_t>(i)]] = 1.0f;
    auto hard = softmax_cross_entropy(logits, targets);
    auto soft = softmax_cross_entropy_soft(logits, onehot);
    REQUIRE_THAT(soft.item(), Catch::Matchers::WithinAbs(hard.item(), 1e-6));
}

TEST_CASE("gradient reversal forward is bitwise identity", "[tensor][grl]") {
    Rng rng(3);
    auto x = fdcheck::rand_tensor(rng, {4, 8});
    for (float eta : {0.1f, 0.5f, 1.0f, 2.0f}) {
        auto y = grad_reverse(x, eta);
        REQUIRE(y.numel() == x.numel());
        REQUIRE(std::memcmp(y.data().data(), x.data().data(), x.numel() * sizeof(float)) == 0);
    }
    REQUIRE_THROWS_AS(grad_reverse(x, 0.0f), std::invalid_argument);
    REQUIRE_THROWS_AS(grad_reverse(x, -1.0f), std::invalid_argument);
}

TEST_CASE("gradient reversal backward is exactly minus eta times upstream", "[tensor][grl]") {
    Rng rng(5);
    for (float eta : {0.1f, 0.5f, 1.0f, 2.0f}) {
        auto x = fdcheck::rand_tensor(rng, {3, 4});
        auto w = fdcheck::rand_tensor(rng, {3, 4}, 1.0f, false);
        Tape tape;
        {
            TapeScope scope(tape);
            auto loss = sum(mul(grad_reverse(x, eta), w));
            tape.backward(loss);
        }
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const float expect = -eta * w.data()[i];
            REQUIRE(x.grad()[i] == expect);
        }
    }
}

TEST_CASE("gradient reversal negates the finite difference of its forward", "[tensor][grl][fd]") {
    for (float eta : {0.1f, 0.5f, 1.0f, 2.0f})
        for (std::uint64_t seed : {2u, 9u}) CHECK(fdcheck::grl_rel_error(seed, eta) <= 1e-3);
}

TEST_CASE("tape replays in reverse and accumulates fan-out", "[tensor][tape]") {
    auto a = Tensor::from_values({2}, {2, 5}, true);
    auto b = Tensor::from_values({2}, {3, -1}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        auto z = add(mul(a, b), a);  // z = a*b + a
        auto loss = sum(z);
        tape.backward(loss);
    }
    // dz/da = b + 1, dz/db = a
    REQUIRE(a.grad()[0] == 4.0f);
    REQUIRE(a.grad()[1] == 0.0f);
    REQUIRE(b.grad()[0] == 2.0f);
    REQUIRE(b.grad()[1] == 5.0f);
}

TEST_CASE("backward twice without reset is an error", "[tensor][tape]") {
    auto a = Tensor::from_values({2}, {1, 2}, true);
    Tape tape;
    Tensor loss;
    {
        TapeScope scope(tape);
        loss = sum(a);
        tape.backward(loss);
    }
    REQUIRE_THROWS_AS(tape.backward(loss), std::logic_error);
    tape.reset();
    {
        TapeScope scope(tape);
        auto loss2 = sum(a);
        tape.backward(loss2);  // fine after reset
    }
    REQUIRE(a.grad()[0] == 2.0f);  // two backwards accumulated
}

TEST_CASE("backward rejects non-scalar losses", "[tensor][tape]") {
    auto a = Tensor::from_values({2}, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    auto y = scale(a, 2.0f);
    REQUIRE_THROWS_AS(tape.backward(y), std::logic_error);
}

TEST_CASE("nothing is recorded without an active tape", "[tensor][tape]") {
    auto a = Tensor::from_values({2}, {1, 2}, true);
    auto y = scale(a, 3.0f);
    REQUIRE_FALSE(y.requires_grad());

    Tape tape;
    {
        TapeScope scope(tape);
        NoTapeScope mute;
        auto z = scale(a, 3.0f);
        REQUIRE_FALSE(z.requires_grad());
    }
    REQUIRE(tape.size() == 0);
}

TEST_CASE("branches outside the loss get no gradient", "[tensor][tape]") {
    auto a = Tensor::from_values({2}, {1, 2}, true);
    auto b = Tensor::from_values({2}, {3, 4}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        auto unused = mul(a, b);
        auto loss = sum(a);
        tape.backward(loss);
    }
    REQUIRE(a.grad()[0] == 1.0f);
    REQUIRE_FALSE(b.has_grad());
}

TEST_CASE("causal softmax rows are masked distributions", "[tensor]") {
    Rng rng(13);
    auto s = fdcheck::rand_tensor(rng, {4, 4}, 1.0f, false);
    auto p = causal_masked_softmax(s);
    for (int t = 0; t < 4; ++t) {
        float rowsum = 0.0f;
        for (int j = 0; j < 4; ++j) {
            const float v = p.data()[static_cast<std::size_t>(t) * 4 + j];
            if (j > t) REQUIRE(v == 0.0f);
            REQUIRE(v >= 0.0f);
            rowsum += v;
        }
        REQUIRE_THAT(rowsum, Catch::Matchers::WithinAbs(1.0f, 1e-6f));
    }
    REQUIRE_THROWS_AS(causal_masked_softmax(Tensor({3, 4})), std::invalid_argument);
}

TEST_CASE("layer norm standardizes each row", "[tensor]") {
    Rng rng(17);
    auto x = fdcheck::rand_tensor(rng, {3, 16}, 2.5f, false);
    Tensor gamma({16}, 1.0f);
    Tensor beta({16}, 0.0f);
    auto y = layer_norm(x, gamma, beta);
    for (int i = 0; i < 3; ++i) {
        double m = 0.0, v = 0.0;
        for (int j = 0; j < 16; ++j) m += y.data()[static_cast<std::size_t>(i) * 16 + j];
        m /= 16.0;
        for (int j = 0; j < 16; ++j) {
            const double c = y.data()[static_cast<std::size_t>(i) * 16 + j] - m;
            v += c * c;
        }
        v /= 16.0;
        REQUIRE_THAT(m, Catch::Matchers::WithinAbs(0.0, 1e-5));
        REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.0, 1e-3));
    }
}

TEST_CASE("embedding lookup copies rows and checks range", "[tensor]") {
    auto table = Tensor::from_values({3, 2}, {0, 1, 10, 11, 20, 21});
    auto e = embedding_lookup(table, {2, 0, 2});
    REQUIRE(e.shape() == Shape{3, 2});
    REQUIRE(e.data() == std::vector<float>{20, 21, 0, 1, 20, 21});
    REQUIRE_THROWS_AS(embedding_lookup(table, {3}), std::out_of_range);
    REQUIRE_THROWS_AS(embedding_lookup(table, {-1}), std::out_of_range);
}

TEST_CASE("slices and concat round trip", "[tensor]") {
    Rng rng(23);
    auto x = fdcheck::rand_tensor(rng, {4, 6}, 1.0f, false);
    auto left = slice_cols(x, 0, 2);
    auto right = slice_cols(x, 2, 6);
    auto back = concat_cols({left, right});
    REQUIRE(back.data() == x.data());
    REQUIRE_THROWS_AS(slice_rows(x, 2, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(slice_cols(x, 4, 8), std::invalid_argument);
}

TEST_CASE("reductions match hand sums", "[tensor]") {
    auto a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    REQUIRE(sum(a).item() == 21.0f);
    REQUIRE_THAT(mean(a).item(), Catch::Matchers::WithinAbs(3.5f, 1e-6f));
    auto m = mean_over_rows(a);
    REQUIRE(m.shape() == Shape{1, 3});
    REQUIRE_THAT(m.data()[0], Catch::Matchers::WithinAbs(2.5f, 1e-6f));
    REQUIRE_THAT(m.data()[2], Catch::Matchers::WithinAbs(4.5f, 1e-6f));

    Tape tape;
    {
        TapeScope scope(tape);
        auto loss = mean(mul(a, a));
        tape.backward(loss);
    }
    for (std::size_t i = 0; i < 6; ++i)
        REQUIRE_THAT(a.grad()[i], Catch::Matchers::WithinAbs(2.0f * a.data()[i] / 6.0f, 1e-6f));
}
