#pragma once

// Synthetic word-level corpus with a controllable confound between topics and
// direction-bearing continuation words. The confound strength rho is the
// probability that a topic's continuation carries its associated direction;
// rho = 0.5 plants no association at all.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "guardrail/common.hpp"

namespace guardrail {

constexpr int kVocabSize = 256;

struct ConfoundSpec {
    int n_topics = 8;
    int n_pos_words = 24;
    int n_neg_words = 24;
    float bias_strength = 0.9f;  // rho
    int body_len = 4;
    int cont_len = 4;

    void validate() const {
        if (n_topics < 1 || n_pos_words < 1 || n_neg_words < 1)
            throw config_error("corpus spec: every word class needs at least one word");
        if (5 + n_topics + n_pos_words + n_neg_words >= kVocabSize)
            throw config_error("corpus spec: partition leaves no filler words in a vocabulary of " +
                               std::to_string(kVocabSize));
        if (bias_strength < 0.0f || bias_strength > 1.0f)
            throw config_error("corpus spec: bias strength must lie in [0,1]");
        if (body_len < 1 || cont_len < 1) throw config_error("corpus spec: segment lengths must be positive");
    }
};

// Fixed id layout over the 256-symbol vocabulary:
//   0 pad | 1 good | 2 bad | 3 talk | 4 about | topics | positive | negative | filler
class Vocab {
public:
    explicit Vocab(const ConfoundSpec& spec) : spec_(spec) {
        spec_.validate();
        topic0_ = 5;
        pos0_ = topic0_ + spec_.n_topics;
        neg0_ = pos0_ + spec_.n_pos_words;
        fill0_ = neg0_ + spec_.n_neg_words;
    }

    static constexpr int pad = 0;
    static constexpr int steer_pos = 1;  // "good"
    static constexpr int steer_neg = 2;  // "bad"
    static constexpr int talk = 3;
    static constexpr int about = 4;

    int size() const { return kVocabSize; }
    int n_fillers() const { return kVocabSize - fill0_; }

    int topic_word(int t) const { return checked(topic0_ + t, topic0_, pos0_, "topic"); }
    int pos_word(int i) const { return checked(pos0_ + i, pos0_, neg0_, "positive word"); }
    int neg_word(int i) const { return checked(neg0_ + i, neg0_, fill0_, "negative word"); }
    int filler_word(int i) const { return checked(fill0_ + i, fill0_, kVocabSize, "filler"); }

    bool is_topic(int id) const { return id >= topic0_ && id < pos0_; }
    bool is_positive_attr(int id) const { return id >= pos0_ && id < neg0_; }
    bool is_negative_attr(int id) const { return id >= neg0_ && id < fill0_; }
    bool is_filler(int id) const { return id >= fill0_ && id < kVocabSize; }

    int topic_of(int id) const {
        if (!is_topic(id)) throw data_error("id " + std::to_string(id) + " is not a topic word");
        return id - topic0_;
    }

    std::string word(int id) const {
        if (id == pad) return "<pad>";
        if (id == steer_pos) return "good";
        if (id == steer_neg) return "bad";
        if (id == talk) return "talk";
        if (id == about) return "about";
        if (is_topic(id)) return "topic" + std::to_string(id - topic0_);
        if (is_positive_attr(id)) return "plus" + std::to_string(id - pos0_);
        if (is_negative_attr(id)) return "minus" + std::to_string(id - neg0_);
        if (is_filler(id)) return "fill" + std::to_string(id - fill0_);
        throw data_error("token id " + std::to_string(id) + " outside vocabulary");
    }

    int id(const std::string& w) const {
        for (int i = 0; i < kVocabSize; ++i)
            if (word(i) == w) return i;
        throw data_error("word '" + w + "' not in vocabulary");
    }

    std::vector<int> tokenize(const std::vector<std::string>& words) const {
        std::vector<int> out;
        out.reserve(words.size());
        for (const auto& w : words) out.push_back(id(w));
        return out;
    }

    std::vector<std::string> detokenize(const std::vector<int>& ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (int i : ids) out.push_back(word(i));
        return out;
    }

    const ConfoundSpec& spec() const { return spec_; }

private:
    int checked(int id, int lo, int hi, const char* what) const {
        if (id < lo || id >= hi) throw data_error(std::string(what) + " index out of partition range");
        return id;
    }

    ConfoundSpec spec_;
    int topic0_, pos0_, neg0_, fill0_;
};

struct SegmentedPrompt {
    std::vector<int> prefix;  // steering prefix S, may be empty
    std::vector<int> body;    // semantic body C
    int direction = 0;        // +1 positive prefix, -1 negative, 0 none

    std::vector<int> tokens() const {
        std::vector<int> out = prefix;
        out.insert(out.end(), body.begin(), body.end());
        return out;
    }
};

struct CorpusRecord {
    SegmentedPrompt prompt;
    std::vector<int> continuation;
    int label = 0;  // direction of the continuation, +1 or -1
    int topic = 0;
};

struct SteeringPair {
    SegmentedPrompt pos;
    SegmentedPrompt neg;
    int topic = 0;
};

struct NeutralPrompt {
    std::vector<int> body;
    int topic = 0;
};

// Direction a topic's continuations lean toward under confounding.
inline int topic_direction(int topic) { return topic % 2 == 0 ? 1 : -1; }

namespace detail {

inline std::vector<int> draw_body(const Vocab& v, int topic, Rng& rng) {
    const auto& spec = v.spec();
    std::vector<int> body;
    body.reserve(static_cast<std::size_t>(spec.body_len));
    body.push_back(v.topic_word(topic));
    for (int i = 1; i < spec.body_len; ++i) {
        if (rng.bernoulli(0.3f))
            body.push_back(v.topic_word(topic));
        else
            body.push_back(v.filler_word(rng.uniform_int(v.n_fillers())));
    }
    return body;
}

inline std::vector<int> draw_continuation(const Vocab& v, int direction, Rng& rng) {
    const auto& spec = v.spec();
    std::vector<int> cont;
    cont.reserve(static_cast<std::size_t>(spec.cont_len));
    for (int i = 0; i < spec.cont_len; ++i) {
        const float u = rng.uniform();
        if (u < 0.55f) {
            cont.push_back(direction > 0 ? v.pos_word(rng.uniform_int(spec.n_pos_words))
                                         : v.neg_word(rng.uniform_int(spec.n_neg_words)));
        } else if (u < 0.70f) {
            cont.push_back(direction > 0 ? Vocab::steer_pos : Vocab::steer_neg);
        } else {
            cont.push_back(v.filler_word(rng.uniform_int(v.n_fillers())));
        }
    }
    return cont;
}

}  // namespace detail

inline std::vector<CorpusRecord> gen_pretrain_corpus(const ConfoundSpec& spec, int n_records, std::uint64_t seed) {
    if (n_records <= 0) throw config_error("gen_pretrain_corpus: need a positive record count");
    Vocab v(spec);
    Rng rng(seed);
    std::vector<CorpusRecord> out;
    out.reserve(static_cast<std::size_t>(n_records));
    for (int i = 0; i < n_records; ++i) {
        CorpusRecord rec;
        rec.topic = rng.uniform_int(spec.n_topics);
        rec.prompt.body = detail::draw_body(v, rec.topic, rng);
        rec.prompt.direction = 0;
        const int assoc = topic_direction(rec.topic);
        rec.label = rng.bernoulli(spec.bias_strength) ? assoc : -assoc;
        rec.continuation = detail::draw_continuation(v, rec.label, rng);
        out.push_back(std::move(rec));
    }
    return out;
}

inline std::vector<SteeringPair> gen_steering_pairs(const ConfoundSpec& spec, int n_pairs, std::uint64_t seed) {
    if (n_pairs <= 0) throw config_error("gen_steering_pairs: need a positive pair count");
    Vocab v(spec);
    Rng rng(seed);
    std::vector<SteeringPair> out;
    out.reserve(static_cast<std::size_t>(n_pairs));
    for (int i = 0; i < n_pairs; ++i) {
        SteeringPair pair;
        pair.topic = rng.uniform_int(spec.n_topics);
        const auto body = detail::draw_body(v, pair.topic, rng);
        pair.pos = {{Vocab::steer_pos, Vocab::talk, Vocab::about}, body, 1};
        pair.neg = {{Vocab::steer_neg, Vocab::talk, Vocab::about}, body, -1};
        out.push_back(std::move(pair));
    }
    return out;
}

inline std::vector<NeutralPrompt> gen_neutral_prompts(const ConfoundSpec& spec, int n, std::uint64_t seed) {
    if (n <= 0) throw config_error("gen_neutral_prompts: need a positive prompt count");
    Vocab v(spec);
    Rng rng(seed);
    std::vector<NeutralPrompt> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        NeutralPrompt p;
        p.topic = rng.uniform_int(spec.n_topics);
        p.body = detail::draw_body(v, p.topic, rng);
        out.push_back(std::move(p));
    }
    return out;
}

// Token stream a pretraining record contributes: body then continuation,
// never a steering prefix.
inline std::vector<int> full_sequence(const CorpusRecord& rec) {
    std::vector<int> out = rec.prompt.tokens();
    out.insert(out.end(), rec.continuation.begin(), rec.continuation.end());
    return out;
}

// ---- JSONL record schema ----

inline nlohmann::json record_to_json(const CorpusRecord& rec) {
    nlohmann::json j;
    j["prefix"] = rec.prompt.prefix;
    j["prefix_dir"] = rec.prompt.direction > 0 ? "+" : (rec.prompt.direction < 0 ? "-" : "0");
    j["body"] = rec.prompt.body;
    j["continuation"] = rec.continuation;
    j["label"] = rec.label;
    j["topic"] = rec.topic;
    return j;
}

inline CorpusRecord record_from_json(const nlohmann::json& j) {
    CorpusRecord rec;
    try {
        rec.prompt.prefix = j.at("prefix").get<std::vector<int>>();
        const std::string dir = j.at("prefix_dir").get<std::string>();
        if (dir == "+")
            rec.prompt.direction = 1;
        else if (dir == "-")
            rec.prompt.direction = -1;
        else if (dir == "0")
            rec.prompt.direction = 0;
        else
            throw data_error("record: prefix_dir '" + dir + "' not one of +, -, 0");
        rec.prompt.body = j.at("body").get<std::vector<int>>();
        rec.continuation = j.at("continuation").get<std::vector<int>>();
        rec.label = j.at("label").get<int>();
        rec.topic = j.at("topic").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("record: malformed json (") + e.what() + ")");
    }
    if (rec.label != 1 && rec.label != -1) throw data_error("record: label must be 1 or -1");
    if (rec.prompt.body.empty()) throw data_error("record: empty body");
    return rec;
}

inline void write_records_jsonl(const std::string& path, const std::vector<CorpusRecord>& records) {
    std::ofstream out(path);
    if (!out) throw data_error("cannot open '" + path + "' for writing");
    for (const auto& rec : records) out << record_to_json(rec).dump() << "\n";
}

inline std::vector<CorpusRecord> read_records_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open '" + path + "'");
    std::vector<CorpusRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw data_error(path + ":" + std::to_string(lineno) + ": invalid json");
        out.push_back(record_from_json(j));
    }
    return out;
}

// Pairs are stored as consecutive +/- records sharing a body.
inline void write_pairs_jsonl(const std::string& path, const std::vector<SteeringPair>& pairs) {
    std::vector<CorpusRecord> flat;
    flat.reserve(pairs.size() * 2);
    for (const auto& p : pairs) {
        flat.push_back({p.pos, {}, 1, p.topic});
        flat.push_back({p.neg, {}, -1, p.topic});
    }
    write_records_jsonl(path, flat);
}

inline std::vector<SteeringPair> read_pairs_jsonl(const std::string& path) {
    const auto flat = read_records_jsonl(path);
    if (flat.size() % 2 != 0) throw data_error(path + ": odd record count, expected +/- pairs");
    std::vector<SteeringPair> out;
    out.reserve(flat.size() / 2);
    for (std::size_t i = 0; i < flat.size(); i += 2) {
        const auto& a = flat[i];
        const auto& b = flat[i + 1];
        if (a.prompt.direction != 1 || b.prompt.direction != -1)
            throw data_error(path + ": pair " + std::to_string(i / 2) + " is not a +/- sequence");
        if (a.prompt.body != b.prompt.body)
            throw data_error(path + ": pair " + std::to_string(i / 2) + " has mismatched bodies");
        if (a.prompt.prefix.size() != b.prompt.prefix.size())
            throw data_error(path + ": pair " + std::to_string(i / 2) + " has mismatched prefix lengths");
        out.push_back({a.prompt, b.prompt, a.topic});
    }
    return out;
}

}  // namespace guardrail
