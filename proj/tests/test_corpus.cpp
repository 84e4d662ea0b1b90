#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "guardrail/corpus.hpp"

using namespace guardrail;

TEST_CASE("partition validation", "[corpus]") {
    ConfoundSpec spec;
    spec.n_topics = 0;
    REQUIRE_THROWS_AS(Vocab(spec), config_error);
    spec = {};
    spec.n_pos_words = 200;
    spec.n_neg_words = 80;
    REQUIRE_THROWS_AS(Vocab(spec), config_error);
    spec = {};
    spec.bias_strength = 1.2f;
    REQUIRE_THROWS_AS(Vocab(spec), config_error);
    spec = {};
    spec.cont_len = 0;
    REQUIRE_THROWS_AS(Vocab(spec), config_error);
}

TEST_CASE("vocabulary is a bijection over 256 ids", "[corpus]") {
    Vocab v{ConfoundSpec{}};
    std::set<std::string> words;
    for (int id = 0; id < v.size(); ++id) {
        const std::string w = v.word(id);
        REQUIRE(words.insert(w).second);
        REQUIRE(v.id(w) == id);
    }
    REQUIRE(words.size() == 256);
    REQUIRE_THROWS_AS(v.id("notaword"), data_error);
    REQUIRE_THROWS_AS(v.word(256), data_error);
}

TEST_CASE("tokenize and detokenize invert each other", "[corpus]") {
    Vocab v{ConfoundSpec{}};
    REQUIRE(v.tokenize({}).empty());
    REQUIRE(v.detokenize({}).empty());
    std::vector<std::string> words = {"good", "talk", "about", "topic3", "plus7", "fill0"};
    REQUIRE(v.detokenize(v.tokenize(words)) == words);
    auto recs = gen_pretrain_corpus(ConfoundSpec{}, 20, 3);
    for (const auto& r : recs) {
        auto seq = full_sequence(r);
        REQUIRE(v.tokenize(v.detokenize(seq)) == seq);
    }
}

TEST_CASE("word classes stay disjoint", "[corpus]") {
    Vocab v{ConfoundSpec{}};
    for (int id = 0; id < v.size(); ++id) {
        int classes = 0;
        classes += v.is_topic(id) ? 1 : 0;
        classes += v.is_positive_attr(id) ? 1 : 0;
        classes += v.is_negative_attr(id) ? 1 : 0;
        classes += v.is_filler(id) ? 1 : 0;
        REQUIRE(classes <= 1);
        if (id >= 5) REQUIRE(classes == 1);
    }
}

TEST_CASE("confound strength shows up in per-topic direction fractions", "[corpus]") {
    for (float rho : {0.9f, 0.5f}) {
        ConfoundSpec spec;
        spec.bias_strength = rho;
        auto recs = gen_pretrain_corpus(spec, 10000, 42);
        std::map<int, std::pair<int, int>> per_topic;  // topic -> (positive, total)
        for (const auto& r : recs) {
            REQUIRE(r.prompt.prefix.empty());
            REQUIRE(r.prompt.direction == 0);
            auto& [pos, total] = per_topic[r.topic];
            if (r.label == 1) ++pos;
            ++total;
        }
        REQUIRE(per_topic.size() == 8);
        for (const auto& [topic, counts] : per_topic) {
            const float frac = static_cast<float>(counts.first) / static_cast<float>(counts.second);
            const float expect = topic_direction(topic) > 0 ? rho : 1.0f - rho;
            INFO("rho " << rho << " topic " << topic << " fraction " << frac);
            REQUIRE_THAT(frac, Catch::Matchers::WithinAbs(expect, 0.02));
        }
    }
}

TEST_CASE("a single record is well formed", "[corpus]") {
    auto recs = gen_pretrain_corpus(ConfoundSpec{}, 1, 5);
    REQUIRE(recs.size() == 1);
    const auto& r = recs[0];
    REQUIRE(r.prompt.body.size() == 4);
    REQUIRE(r.continuation.size() == 4);
    REQUIRE((r.label == 1 || r.label == -1));
    Vocab v{ConfoundSpec{}};
    REQUIRE(v.is_topic(r.prompt.body[0]));
    REQUIRE(v.topic_of(r.prompt.body[0]) == r.topic);
}

TEST_CASE("steering pairs share bodies and differ only in prefix direction", "[corpus]") {
    auto pairs = gen_steering_pairs(ConfoundSpec{}, 100, 9);
    std::set<int> topics;
    for (const auto& p : pairs) {
        REQUIRE(p.pos.body == p.neg.body);
        REQUIRE(p.pos.prefix.size() == 3);
        REQUIRE(p.pos.prefix.size() == p.neg.prefix.size());
        REQUIRE(p.pos.prefix[0] == Vocab::steer_pos);
        REQUIRE(p.neg.prefix[0] == Vocab::steer_neg);
        REQUIRE(std::vector<int>(p.pos.prefix.begin() + 1, p.pos.prefix.end()) ==
                std::vector<int>(p.neg.prefix.begin() + 1, p.neg.prefix.end()));
        REQUIRE(p.pos.direction == 1);
        REQUIRE(p.neg.direction == -1);
        topics.insert(p.topic);
    }
    // 100 draws over 8 topics cover the whole set, confounded topics included
    REQUIRE(topics.size() == 8);
}

TEST_CASE("direction classes are drawn uniformly given the topic", "[corpus]") {
    ConfoundSpec spec;
    spec.bias_strength = 1.0f;
    auto recs = gen_pretrain_corpus(spec, 40000, 17);
    Vocab v(spec);
    std::map<int, int> counts;
    int total = 0;
    for (const auto& r : recs) {
        if (r.topic != 0) continue;
        REQUIRE(r.label == 1);  // rho = 1 pins the direction
        for (int id : r.continuation)
            if (v.is_positive_attr(id)) {
                ++counts[id];
                ++total;
            }
    }
    REQUIRE(total > 5000);
    const double expect = static_cast<double>(total) / 24.0;
    for (const auto& [id, c] : counts) {
        REQUIRE(c > 0.6 * expect);
        REQUIRE(c < 1.4 * expect);
    }
    REQUIRE(counts.size() == 24);
}

TEST_CASE("generation is a pure function of spec and seed", "[corpus]") {
    ConfoundSpec spec;
    auto a = gen_pretrain_corpus(spec, 50, 123);
    auto b = gen_pretrain_corpus(spec, 50, 123);
    auto c = gen_pretrain_corpus(spec, 50, 124);
    REQUIRE(a.size() == b.size());
    bool all_equal = true, any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        all_equal = all_equal && full_sequence(a[i]) == full_sequence(b[i]) && a[i].label == b[i].label;
        any_diff = any_diff || full_sequence(a[i]) != full_sequence(c[i]);
    }
    REQUIRE(all_equal);
    REQUIRE(any_diff);
}

TEST_CASE("records survive the jsonl round trip", "[corpus]") {
    const std::string path = "corpus_roundtrip_tmp.jsonl";
    auto recs = gen_pretrain_corpus(ConfoundSpec{}, 25, 7);
    write_records_jsonl(path, recs);
    auto back = read_records_jsonl(path);
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        REQUIRE(back[i].prompt.prefix == recs[i].prompt.prefix);
        REQUIRE(back[i].prompt.body == recs[i].prompt.body);
        REQUIRE(back[i].prompt.direction == recs[i].prompt.direction);
        REQUIRE(back[i].continuation == recs[i].continuation);
        REQUIRE(back[i].label == recs[i].label);
        REQUIRE(back[i].topic == recs[i].topic);
    }
    std::remove(path.c_str());
}

TEST_CASE("pairs survive the jsonl round trip", "[corpus]") {
    const std::string path = "pairs_roundtrip_tmp.jsonl";
    auto pairs = gen_steering_pairs(ConfoundSpec{}, 12, 31);
    write_pairs_jsonl(path, pairs);
    auto back = read_pairs_jsonl(path);
    REQUIRE(back.size() == pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        REQUIRE(back[i].pos.tokens() == pairs[i].pos.tokens());
        REQUIRE(back[i].neg.tokens() == pairs[i].neg.tokens());
        REQUIRE(back[i].topic == pairs[i].topic);
    }
    std::remove(path.c_str());
}

TEST_CASE("malformed jsonl is rejected", "[corpus]") {
    const std::string path = "corpus_bad_tmp.jsonl";
    {
        std::ofstream out(path);
        out << "{not json\n";
    }
    REQUIRE_THROWS_AS(read_records_jsonl(path), data_error);
    {
        std::ofstream out(path);
        out << R"({"prefix":[],"prefix_dir":"0","body":[5],"continuation":[],"label":7,"topic":0})" << "\n";
    }
    REQUIRE_THROWS_AS(read_records_jsonl(path), data_error);
    {
        std::ofstream out(path);
        out << R"({"prefix":[],"prefix_dir":"0","body":[5],"continuation":[]})" << "\n";
    }
    REQUIRE_THROWS_AS(read_records_jsonl(path), data_error);
    {
        // a "pair" whose bodies disagree
        std::ofstream out(path);
        out << R"({"prefix":[1,3,4],"prefix_dir":"+","body":[5],"continuation":[],"label":1,"topic":0})" << "\n";
        out << R"({"prefix":[2,3,4],"prefix_dir":"-","body":[6],"continuation":[],"label":-1,"topic":0})" << "\n";
    }
    REQUIRE_THROWS_AS(read_pairs_jsonl(path), data_error);
    std::remove(path.c_str());
    REQUIRE_THROWS_AS(read_records_jsonl("no_such_file.jsonl"), data_error);
}
