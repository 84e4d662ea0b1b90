#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "guardrail/model.hpp"

using namespace guardrail;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 32;
    cfg.n_layers = 4;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.max_seq_len = 16;
    cfg.seed = 7;
    return cfg;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("config validation", "[model]") {
    ModelConfig cfg = small_config();
    cfg.n_heads = 3;
    REQUIRE_THROWS_AS(TinyLm(cfg), config_error);
    cfg = small_config();
    cfg.n_layers = 3;
    REQUIRE_THROWS_AS(TinyLm(cfg), config_error);
    cfg = small_config();
    cfg.d_model = 0;
    REQUIRE_THROWS_AS(TinyLm(cfg), config_error);
}

TEST_CASE("trace carries one state per layer boundary", "[model]") {
    TinyLm lm(small_config());
    std::vector<int> toks = {1, 5, 9, 2};
    auto [logits, trace] = lm.forward_with_trace(toks);
    REQUIRE(trace.depth() == 4);
    REQUIRE(trace.states.size() == 5);
    for (const auto& s : trace.states) {
        REQUIRE(s.rows() == 4);
        REQUIRE(s.cols() == 32);
    }
    REQUIRE(logits.rows() == 4);
    REQUIRE(logits.cols() == 32);
    REQUIRE(trace.tokens == toks);
    REQUIRE_THROWS_AS(trace.state(5), std::out_of_range);
}

TEST_CASE("input validation", "[model]") {
    TinyLm lm(small_config());
    REQUIRE_THROWS_AS(lm.forward({}), data_error);
    REQUIRE_THROWS_AS(lm.forward(std::vector<int>(17, 1)), data_error);
    REQUIRE_THROWS_AS(lm.forward({1, 99}), std::out_of_range);
}

TEST_CASE("identity hooks do not disturb the pass", "[model][hooks]") {
    TinyLm lm(small_config());
    std::vector<int> toks = {3, 1, 4, 1, 5};
    auto plain = lm.forward_with_trace(toks);
    std::vector<LayerRewriteHook> hooks;
    for (int l = 0; l <= 4; ++l)
        hooks.push_back({l, [](const HookContext& c) { return c.state; }});
    auto hooked = lm.forward_with_trace(toks, hooks);
    REQUIRE(same_bits(plain.first, hooked.first));
    for (int l = 0; l <= 4; ++l) REQUIRE(same_bits(plain.second.state(l), hooked.second.state(l)));
}

TEST_CASE("zeroing a middle layer changes the logits", "[model][hooks]") {
    TinyLm lm(small_config());
    std::vector<int> toks = {3, 1, 4, 1, 5};
    auto plain = lm.forward(toks);
    std::vector<LayerRewriteHook> hooks = {{2, [](const HookContext& c) { return Tensor(c.state.shape()); }}};
    auto [hooked_logits, trace] = lm.forward_with_trace(toks, hooks);
    REQUIRE_FALSE(same_bits(plain, hooked_logits));
    for (float v : trace.state(2).data()) REQUIRE(v == 0.0f);
}

TEST_CASE("hooks rewrite downstream only", "[model][hooks]") {
    TinyLm lm(small_config());
    std::vector<int> toks = {7, 7, 2, 9};
    auto plain = lm.forward_with_trace(toks);
    std::vector<LayerRewriteHook> hooks = {{2, [](const HookContext& c) { return scale(c.state, 1.5f); }}};
    auto hooked = lm.forward_with_trace(toks, hooks);
    for (int l = 0; l <= 1; ++l) REQUIRE(same_bits(plain.second.state(l), hooked.second.state(l)));
    for (int l = 2; l <= 4; ++l) REQUIRE_FALSE(same_bits(plain.second.state(l), hooked.second.state(l)));
}

TEST_CASE("hook sees the previous layer's post-hook state", "[model][hooks]") {
    TinyLm lm(small_config());
    std::vector<int> toks = {1, 2, 3};
    Tensor seen_prev;
    std::vector<LayerRewriteHook> hooks = {
        {1, [](const HookContext& c) { return scale(c.state, 2.0f); }},
        {2,
         [&seen_prev](const HookContext& c) {
             seen_prev = c.prev;
             return c.state;
         }},
    };
    auto hooked = lm.forward_with_trace(toks, hooks);
    REQUIRE(seen_prev.defined());
    REQUIRE(same_bits(seen_prev, hooked.second.state(1)));
}

TEST_CASE("hook contract violations are rejected", "[model][hooks]") {
    TinyLm lm(small_config());
    std::vector<int> toks = {1, 2};
    REQUIRE_THROWS_AS(lm.forward_with_trace(toks, {{9, [](const HookContext& c) { return c.state; }}}), config_error);
    REQUIRE_THROWS_AS(lm.forward_with_trace(toks, {{1, nullptr}}), config_error);
    std::vector<LayerRewriteHook> bad_shape = {{1, [](const HookContext& c) { return slice_rows(c.state, 0, 1); }}};
    REQUIRE_THROWS_AS(lm.forward_with_trace(toks, bad_shape), config_error);
}

TEST_CASE("resuming from any traced state reproduces the logits", "[model]") {
    TinyLm lm(small_config());
    std::vector<int> toks = {3, 1, 4, 1, 5, 9};
    auto [logits, trace] = lm.forward_with_trace(toks);
    for (int l = 0; l <= 4; ++l) {
        auto redone = lm.forward_from_layer(trace.state(l), l);
        REQUIRE(redone.shape() == logits.shape());
        for (std::size_t i = 0; i < logits.numel(); ++i)
            REQUIRE_THAT(redone.data()[i], Catch::Matchers::WithinAbs(logits.data()[i], 1e-5));
    }
}

TEST_CASE("position t ignores later tokens", "[model]") {
    TinyLm lm(small_config());
    std::vector<int> full = {3, 1, 4, 1, 5, 9, 2, 6};
    auto full_logits = lm.forward(full);
    for (int t : {0, 3, 6}) {
        std::vector<int> prefix(full.begin(), full.begin() + t + 1);
        auto pre_logits = lm.forward(prefix);
        for (int j = 0; j < 32; ++j)
            REQUIRE_THAT(pre_logits.data()[static_cast<std::size_t>(t) * 32 + j],
                         Catch::Matchers::WithinAbs(full_logits.data()[static_cast<std::size_t>(t) * 32 + j], 1e-6));
    }
}

TEST_CASE("greedy generation is deterministic and bounded", "[model][generate]") {
    TinyLm lm(small_config());
    std::vector<int> prompt = {4, 2, 7};
    REQUIRE(lm.generate(prompt, 0) == prompt);
    auto a = lm.generate(prompt, 5);
    auto b = lm.generate(prompt, 5);
    REQUIRE(a == b);
    REQUIRE(a.size() == 8);
    for (std::size_t i = 0; i < prompt.size(); ++i) REQUIRE(a[i] == prompt[i]);
    // cap at the context window
    auto capped = lm.generate(prompt, 100);
    REQUIRE(capped.size() == 16);
}

TEST_CASE("sampled generation follows the seed", "[model][generate]") {
    TinyLm lm(small_config());
    std::vector<int> prompt = {4, 2, 7};
    REQUIRE_THROWS_AS(lm.generate(prompt, 3, {}, 1.0f, nullptr), config_error);
    REQUIRE_THROWS_AS(lm.generate(prompt, 3, {}, -1.0f), config_error);
    Rng r1(99), r2(99), r3(100);
    auto a = lm.generate(prompt, 6, {}, 1.0f, &r1);
    auto b = lm.generate(prompt, 6, {}, 1.0f, &r2);
    REQUIRE(a == b);
    auto c = lm.generate(prompt, 6, {}, 1.3f, &r3);
    REQUIRE(c.size() == a.size());
}

TEST_CASE("steering hooks change generation", "[model][generate][hooks]") {
    TinyLm lm(small_config());
    std::vector<int> prompt = {4, 2, 7, 1};
    auto plain = lm.generate(prompt, 6);
    Rng dir_rng(5);
    Tensor delta({1, 32});
    for (auto& v : delta.data()) v = dir_rng.normal() * 3.0f;
    std::vector<LayerRewriteHook> hooks = {{3, [&delta](const HookContext& c) {
                                                auto rep = Tensor(c.state.shape());
                                                for (int i = 0; i < c.state.rows(); ++i)
                                                    for (int j = 0; j < 32; ++j)
                                                        rep.data()[static_cast<std::size_t>(i) * 32 + j] =
                                                            delta.data()[static_cast<std::size_t>(j)];
                                                return add(c.state, rep);
                                            }}};
    auto steered = lm.generate(prompt, 6, hooks);
    REQUIRE(plain != steered);
}

TEST_CASE("training memorizes a repeating stream", "[model][train]") {
    ModelConfig cfg = small_config();
    cfg.seed = 11;
    TinyLm lm(cfg);
    std::vector<std::vector<int>> corpus(8, std::vector<int>{1, 2, 1, 2, 1, 2, 1, 2});
    auto log = train_lm(lm, corpus, 60, 3e-3f, 8);
    REQUIRE(log.epoch_loss.size() == 60);
    REQUIRE(log.epoch_loss.back() < 0.1f);
    REQUIRE(log.epoch_loss.back() < 0.8f * log.epoch_loss.front());
    // the trained model actually continues the pattern
    auto cont = lm.generate({1, 2, 1}, 3);
    REQUIRE(cont == std::vector<int>{1, 2, 1, 2, 1, 2});
}

TEST_CASE("zero learning rate leaves the loss unchanged", "[model][train]") {
    TinyLm lm(small_config());
    std::vector<std::vector<int>> corpus(4, std::vector<int>{1, 2, 3, 4});
    auto log = train_lm(lm, corpus, 3, 0.0f, 4);
    REQUIRE(log.epoch_loss[0] == log.epoch_loss[1]);
    REQUIRE(log.epoch_loss[1] == log.epoch_loss[2]);
}

TEST_CASE("training input validation", "[model][train]") {
    TinyLm lm(small_config());
    REQUIRE_THROWS_AS(train_lm(lm, {}, 1, 1e-3f), data_error);
    REQUIRE_THROWS_AS(train_lm(lm, {{5}}, 1, 1e-3f), data_error);
}

TEST_CASE("same seed builds the same model", "[model]") {
    ModelConfig cfg = small_config();
    TinyLm a(cfg), b(cfg);
    auto pa = a.named_parameters(), pb = b.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].first == pb[i].first);
        REQUIRE(same_bits(pa[i].second, pb[i].second));
    }
}
