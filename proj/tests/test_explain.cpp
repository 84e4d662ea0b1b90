#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "guardrail/corpus.hpp"
#include "guardrail/explain.hpp"
#include "guardrail/model.hpp"
#include "guardrail/steering.hpp"

using namespace guardrail;

namespace {

ModelConfig explain_model_config() {
    ModelConfig cfg;
    cfg.vocab_size = kVocabSize;
    cfg.d_model = 32;
    cfg.n_layers = 4;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.max_seq_len = 16;
    cfg.seed = 7;
    return cfg;
}

SteeringRepresentation rand_rep(const std::vector<int>& layers, int d, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> values(layers.size() * static_cast<std::size_t>(d));
    for (auto& v : values) v = rng.normal();
    SteeringRepresentation rep;
    rep.delta = Tensor::from_values({static_cast<int>(layers.size()), d}, std::move(values));
    rep.layers = layers;
    rep.n_samples = 1;
    rep.method = "actadd";
    rep.debiased = false;
    return rep;
}

// Trace with hand-picked states for layers 0..depth, every layer one n x d
// matrix.
ActivationTrace hand_trace(const std::vector<std::vector<float>>& per_layer, int n, int d) {
    ActivationTrace trace;
    for (const auto& values : per_layer) trace.states.push_back(Tensor::from_values({n, d}, values));
    trace.tokens.assign(static_cast<std::size_t>(n), 0);
    return trace;
}

}  // namespace

TEST_CASE("token similarity follows the two-layer hand oracle", "[explain]") {
    const int d = 6;
    Rng rng(31);
    std::vector<float> s1(2 * d), s2(2 * d);
    for (auto& v : s1) v = rng.normal();
    for (auto& v : s2) v = rng.normal();
    auto trace = hand_trace({std::vector<float>(2 * d, 0.0f), s1, s2}, 2, d);
    auto rep = rand_rep({1, 2}, d, 32);

    for (int pos = 0; pos < 2; ++pos) {
        double expect = 0.0;
        for (int j = 0; j < d; ++j) {
            double dbar = 0.5 * (rep.delta.data()[j] + rep.delta.data()[d + j]);
            double rbar = 0.5 * (s1[static_cast<std::size_t>(pos) * d + j] + s2[static_cast<std::size_t>(pos) * d + j]);
            expect += dbar * rbar;
        }
        REQUIRE_THAT(token_similarity(rep, trace, pos), Catch::Matchers::WithinAbs(expect, 1e-6));
    }
}

TEST_CASE("token similarity closed forms", "[explain]") {
    const int d = 4;
    std::vector<float> delta = {1.0f, 2.0f, -1.0f, 0.5f};
    std::vector<float> ortho = {2.0f, 0.0f, 2.0f, 0.0f};
    double check = 0.0;
    for (int j = 0; j < d; ++j) check += static_cast<double>(delta[j]) * ortho[j];
    REQUIRE(check == 0.0);

    SteeringRepresentation rep;
    std::vector<float> rows = delta;
    rows.insert(rows.end(), delta.begin(), delta.end());
    rep.delta = Tensor::from_values({2, d}, rows);
    rep.layers = {1, 2};
    rep.n_samples = 1;
    rep.method = "actadd";

    auto ortho_trace = hand_trace({std::vector<float>(d, 0.0f), ortho, ortho}, 1, d);
    REQUIRE(token_similarity(rep, ortho_trace, 0) == 0.0f);
    REQUIRE(token_cosine(rep, ortho_trace, 0) == 0.0f);

    auto same_trace = hand_trace({std::vector<float>(d, 0.0f), delta, delta}, 1, d);
    double nrm2 = 0.0;
    for (float v : delta) nrm2 += static_cast<double>(v) * v;
    REQUIRE_THAT(token_similarity(rep, same_trace, 0), Catch::Matchers::WithinRel(nrm2, 1e-6));
    REQUIRE_THAT(token_cosine(rep, same_trace, 0), Catch::Matchers::WithinAbs(1.0, 1e-6));

    auto zero_trace = hand_trace({std::vector<float>(d, 0.0f), std::vector<float>(d, 0.0f),
                                  std::vector<float>(d, 0.0f)},
                                 1, d);
    REQUIRE(token_cosine(rep, zero_trace, 0) == 0.0f);

    auto shallow = hand_trace({std::vector<float>(d, 0.0f), delta}, 1, d);
    REQUIRE_THROWS_AS(token_similarity(rep, shallow, 0), config_error);
    REQUIRE_THROWS_AS(token_similarity(rep, same_trace, 5), std::out_of_range);
}

TEST_CASE("similarity is linear in the representation", "[explain]") {
    TinyLm model(explain_model_config());
    auto rep = rand_rep({2, 3}, 32, 44);
    std::vector<int> seq = {5, 9, 40, 41, 42};
    NoTapeScope guard;
    auto trace = model.forward_with_trace(seq).second;

    auto scaled = rand_rep({2, 3}, 32, 44);
    for (auto& v : scaled.delta.data()) v *= 2.5f;
    for (int pos = 0; pos < 5; ++pos) {
        float base = token_similarity(rep, trace, pos);
        float big = token_similarity(scaled, trace, pos);
        REQUIRE_THAT(big, Catch::Matchers::WithinRel(2.5f * base, 1e-6f) || Catch::Matchers::WithinAbs(0.0, 1e-9));
    }
}

TEST_CASE("alignment is the arithmetic mean", "[explain]") {
    REQUIRE(alignment({1.0f, -1.0f}) == 0.0f);
    REQUIRE(alignment({0.5f}) == 0.5f);
    REQUIRE(alignment(std::vector<float>(7, 0.3f)) == 0.3f);
    REQUIRE_THROWS_AS(alignment({}), std::invalid_argument);

    Rng rng(71);
    std::vector<float> xs(13), ys(29);
    for (auto& v : xs) v = rng.normal();
    for (auto& v : ys) v = rng.normal();
    std::vector<float> both = xs;
    both.insert(both.end(), ys.begin(), ys.end());
    double expect = (13.0 * alignment(xs) + 29.0 * alignment(ys)) / 42.0;
    REQUIRE_THAT(alignment(both), Catch::Matchers::WithinAbs(expect, 1e-6));
}

TEST_CASE("rank lowest matches the sort oracle", "[explain]") {
    REQUIRE(rank_lowest({3.0f, 1.0f, 2.0f}, 1) == std::vector<int>{1});
    REQUIRE(rank_lowest({1.0f, 1.0f, 2.0f}, 2) == std::vector<int>{0, 1});
    REQUIRE_THROWS_AS(rank_lowest({1.0f}, 0), config_error);
    REQUIRE_THROWS_AS(rank_lowest({1.0f}, 2), config_error);

    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 5 + rng.uniform_int(200);
        std::vector<float> scores(static_cast<std::size_t>(n));
        for (auto& v : scores) v = std::floor(rng.normal() * 4.0f) / 4.0f;
        int k = 1 + rng.uniform_int(n);

        std::vector<std::pair<float, int>> oracle;
        for (int i = 0; i < n; ++i) oracle.emplace_back(scores[static_cast<std::size_t>(i)], i);
        std::sort(oracle.begin(), oracle.end());
        auto got = rank_lowest(scores, k);
        REQUIRE(got.size() == static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) REQUIRE(got[static_cast<std::size_t>(i)] == oracle[static_cast<std::size_t>(i)].second);
    }
}

TEST_CASE("explanations cover the generated tokens", "[explain]") {
    TinyLm model(explain_model_config());
    Vocab vocab{ConfoundSpec{}};
    auto rep = rand_rep({2, 3}, 32, 55);

    std::vector<int> prompt = {5, 9, 40};
    auto seq = model.generate(prompt, 5);
    REQUIRE(seq.size() == 8);

    auto rpt = build_explanation(model, vocab, rep, seq, 3, 2);
    REQUIRE(rpt.tokens.size() == 5);
    REQUIRE(rpt.similarity.size() == 5);
    REQUIRE(rpt.cosine.size() == 5);
    REQUIRE(rpt.context.size() == 3);
    REQUIRE_FALSE(rpt.includes_prompt);
    REQUIRE(rpt.overall_alignment == alignment(rpt.similarity));
    REQUIRE(rpt.lowest.size() == 2);
    for (std::size_t i = 0; i < 5; ++i) REQUIRE(rpt.tokens[i] == vocab.word(seq[3 + i]));
    rpt.validate();

    NoTapeScope guard;
    auto trace = model.forward_with_trace(seq).second;
    for (int i = 0; i < 5; ++i) REQUIRE(rpt.similarity[static_cast<std::size_t>(i)] == token_similarity(rep, trace, 3 + i));

    auto full = build_explanation(model, vocab, rep, seq, 3, 2, {}, true);
    REQUIRE(full.tokens.size() == 8);
    REQUIRE(full.context.empty());
    REQUIRE(full.includes_prompt);
    for (int i = 0; i < 5; ++i)
        REQUIRE(full.similarity[static_cast<std::size_t>(3 + i)] == rpt.similarity[static_cast<std::size_t>(i)]);

    REQUIRE_THROWS_AS(build_explanation(model, vocab, rep, seq, static_cast<int>(seq.size()), 2), data_error);
    REQUIRE_THROWS_AS(build_explanation(model, vocab, rep, seq, 0, 2), data_error);
    REQUIRE_THROWS_AS(build_explanation(model, vocab, rep, seq, 3, 0), config_error);

    auto big_k = build_explanation(model, vocab, rep, seq, 3, 99);
    REQUIRE(big_k.lowest.size() == 5);
}

TEST_CASE("steered explanations score the steered states", "[explain]") {
    TinyLm model(explain_model_config());
    Vocab vocab{ConfoundSpec{}};
    auto rep = rand_rep({2, 3}, 32, 61);
    ControlConfig cfg;
    cfg.beta = 2.0f;
    auto hooks = make_steering_hooks(rep, cfg, model.config());

    std::vector<int> prompt = {5, 9, 40};
    auto seq = model.generate(prompt, 4, hooks);
    auto steered = build_explanation(model, vocab, rep, seq, 3, 1, hooks);
    auto raw = build_explanation(model, vocab, rep, seq, 3, 1);
    bool differs = false;
    for (std::size_t i = 0; i < steered.similarity.size(); ++i)
        if (steered.similarity[i] != raw.similarity[i]) differs = true;
    REQUIRE(differs);
}

TEST_CASE("report json round-trips losslessly", "[explain]") {
    TinyLm model(explain_model_config());
    Vocab vocab{ConfoundSpec{}};
    auto rep = rand_rep({1, 4}, 32, 77);
    auto seq = model.generate({6, 10, 41}, 4);
    auto rpt = build_explanation(model, vocab, rep, seq, 3, 2);

    auto text = render_report(rpt, ReportFormat::json);
    auto back = ExplanationReport::from_json(nlohmann::json::parse(text));
    REQUIRE(back.tokens == rpt.tokens);
    REQUIRE(back.context == rpt.context);
    REQUIRE(back.lowest == rpt.lowest);
    REQUIRE(back.includes_prompt == rpt.includes_prompt);
    REQUIRE(std::memcmp(back.similarity.data(), rpt.similarity.data(), rpt.similarity.size() * sizeof(float)) == 0);
    REQUIRE(std::memcmp(back.cosine.data(), rpt.cosine.data(), rpt.cosine.size() * sizeof(float)) == 0);
    REQUIRE(back.overall_alignment == rpt.overall_alignment);

    auto j = rpt.to_json();
    j["alignment"] = rpt.overall_alignment + 1.0f;
    REQUIRE_THROWS_AS(ExplanationReport::from_json(j), config_error);
    j = rpt.to_json();
    j.erase("tokens");
    REQUIRE_THROWS_AS(ExplanationReport::from_json(j), data_error);
}

TEST_CASE("renders shade every token", "[explain]") {
    ExplanationReport rpt;
    rpt.tokens = {"alpha", "beta", "gamma"};
    rpt.similarity = {1.0f, -1.0f, 3.0f};
    rpt.cosine = {0.1f, -0.1f, 0.3f};
    rpt.overall_alignment = alignment(rpt.similarity);
    rpt.lowest = {1};
    rpt.context = {"intro"};

    auto ansi = render_report(rpt, ReportFormat::ansi);
    std::size_t marks = 0, from = 0;
    while ((from = ansi.find("\x1b[30;48;2;", from)) != std::string::npos) {
        ++marks;
        ++from;
    }
    REQUIRE(marks == 3);
    REQUIRE(ansi.find("intro") != std::string::npos);
    REQUIRE(ansi.find("alignment: 1.000000") != std::string::npos);
    REQUIRE(ansi.find("lowest: 1:beta") != std::string::npos);

    auto html = render_report(rpt, ReportFormat::html);
    REQUIRE(html.rfind("<!DOCTYPE html>", 0) == 0);
    REQUIRE(html.find("</html>") != std::string::npos);
    marks = 0;
    from = 0;
    while ((from = html.find("<mark ", from)) != std::string::npos) {
        ++marks;
        ++from;
    }
    REQUIRE(marks == 3);

    ExplanationReport flat = rpt;
    flat.similarity = {2.0f, 2.0f, 2.0f};
    flat.overall_alignment = alignment(flat.similarity);
    flat.lowest = {0};
    auto uniform = render_report(flat, ReportFormat::html);
    REQUIRE(uniform.find("rgba(32,160,64,0.500)") != std::string::npos);
    std::size_t first = uniform.find("rgba(");
    std::size_t second = uniform.find("rgba(", first + 1);
    std::size_t third = uniform.find("rgba(", second + 1);
    REQUIRE(uniform.substr(first, 24) == uniform.substr(second, 24));
    REQUIRE(uniform.substr(second, 24) == uniform.substr(third, 24));
}

TEST_CASE("report validation rejects tampering", "[explain]") {
    ExplanationReport rpt;
    rpt.tokens = {"a", "b"};
    rpt.similarity = {0.5f, 1.5f};
    rpt.cosine = {0.5f, 0.9f};
    rpt.overall_alignment = alignment(rpt.similarity);
    rpt.lowest = {0, 1};
    rpt.validate();

    auto bad = rpt;
    bad.overall_alignment = 0.0f;
    REQUIRE_THROWS_AS(bad.validate(), config_error);
    bad = rpt;
    bad.lowest = {0, 0};
    REQUIRE_THROWS_AS(bad.validate(), config_error);
    bad = rpt;
    bad.lowest = {5};
    REQUIRE_THROWS_AS(bad.validate(), config_error);
    bad = rpt;
    bad.tokens = {"a"};
    REQUIRE_THROWS_AS(bad.validate(), config_error);
    bad = rpt;
    bad.similarity.clear();
    bad.cosine.clear();
    bad.tokens.clear();
    REQUIRE_THROWS_AS(bad.validate(), config_error);
}
