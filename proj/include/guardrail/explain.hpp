#pragma once

// Token-level alignment explanation. For every generated token the layer
// averaged state is compared against the layer-averaged steering vectors by
// raw dot product; the per-token scores, their overall mean, and the worst
// aligned positions make up a report that can be rendered as shaded ANSI,
// a self-contained HTML page, or lossless JSON.

#include <guardrail/common.hpp>
#include <guardrail/corpus.hpp>
#include <guardrail/model.hpp>
#include <guardrail/steering.hpp>
#include <guardrail/tensor.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace guardrail {

namespace detail {

struct SimilarityParts {
    double dot = 0.0;
    double rep_norm = 0.0;
    double state_norm = 0.0;
};

// Layer-averages the steering rows and the token's states, then takes their
// dot product. Shared by the raw and cosine scores so both agree on the
// averaging.
inline SimilarityParts similarity_parts(const SteeringRepresentation& rep, const ActivationTrace& trace,
                                        int position) {
    rep.validate();
    if (trace.depth() < rep.layers.back())
        throw config_error("trace depth " + std::to_string(trace.depth()) + " does not cover steering layer " +
                           std::to_string(rep.layers.back()));
    int d = rep.dim();
    int k = rep.depth();
    const Tensor& first = trace.state(rep.layers.front());
    if (first.cols() != d)
        throw config_error("trace state dim " + std::to_string(first.cols()) + " does not match steering dim " +
                           std::to_string(d));
    if (position < 0 || position >= first.rows())
        throw std::out_of_range("token position " + std::to_string(position) + " outside trace of " +
                                std::to_string(first.rows()) + " tokens");

    std::vector<double> rep_mean(static_cast<std::size_t>(d), 0.0);
    std::vector<double> state_mean(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < k; ++i) {
        const float* row = rep.delta.data().data() + static_cast<std::size_t>(i) * d;
        const float* st = trace.state(rep.layers[i]).data().data() + static_cast<std::size_t>(position) * d;
        for (int j = 0; j < d; ++j) {
            rep_mean[j] += static_cast<double>(row[j]) / k;
            state_mean[j] += static_cast<double>(st[j]) / k;
        }
    }
    SimilarityParts parts;
    for (int j = 0; j < d; ++j) {
        parts.dot += rep_mean[j] * state_mean[j];
        parts.rep_norm += rep_mean[j] * rep_mean[j];
        parts.state_norm += state_mean[j] * state_mean[j];
    }
    parts.rep_norm = std::sqrt(parts.rep_norm);
    parts.state_norm = std::sqrt(parts.state_norm);
    return parts;
}

}  // namespace detail

// Raw dot product between the layer-averaged steering vector and the layer
// averaged state of one token.
inline float token_similarity(const SteeringRepresentation& rep, const ActivationTrace& trace, int position) {
    return static_cast<float>(detail::similarity_parts(rep, trace, position).dot);
}

// Same comparison normalized to [-1, 1]; zero when either side has no length.
inline float token_cosine(const SteeringRepresentation& rep, const ActivationTrace& trace, int position) {
    auto parts = detail::similarity_parts(rep, trace, position);
    if (parts.rep_norm == 0.0 || parts.state_norm == 0.0) return 0.0f;
    return static_cast<float>(parts.dot / (parts.rep_norm * parts.state_norm));
}

// Arithmetic mean of the per-token scores.
inline float alignment(const std::vector<float>& similarities) {
    if (similarities.empty()) throw std::invalid_argument("alignment of an empty similarity list");
    double sum = 0.0;
    for (float v : similarities) sum += v;
    return static_cast<float>(sum / static_cast<double>(similarities.size()));
}

// Indices of the k smallest scores, ordered ascending by score with earlier
// positions winning ties.
inline std::vector<int> rank_lowest(const std::vector<float>& similarities, int k) {
    int n = static_cast<int>(similarities.size());
    if (k < 1 || k > n)
        throw config_error("rank count " + std::to_string(k) + " outside 1.." + std::to_string(n));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (similarities[static_cast<std::size_t>(a)] != similarities[static_cast<std::size_t>(b)])
            return similarities[static_cast<std::size_t>(a)] < similarities[static_cast<std::size_t>(b)];
        return a < b;
    });
    order.resize(static_cast<std::size_t>(k));
    return order;
}

struct ExplanationReport {
    std::vector<std::string> tokens;  // one word per scored position
    std::vector<float> similarity;    // raw dot-product scores
    std::vector<float> cosine;        // normalized alternative, same positions
    float overall_alignment = 0.0f;
    std::vector<int> lowest;            // worst-aligned positions, ascending by score
    std::vector<std::string> context;   // unscored prompt words, for display only
    bool includes_prompt = false;

    void validate() const {
        if (similarity.empty()) throw config_error("explanation report scores nothing");
        if (tokens.size() != similarity.size() || cosine.size() != similarity.size())
            throw config_error("explanation report columns disagree in length");
        if (overall_alignment != alignment(similarity))
            throw config_error("explanation report alignment is not the mean of its scores");
        std::vector<bool> seen(similarity.size(), false);
        for (int idx : lowest) {
            if (idx < 0 || idx >= static_cast<int>(similarity.size()))
                throw config_error("explanation report ranks position " + std::to_string(idx) + " outside the scores");
            if (seen[static_cast<std::size_t>(idx)])
                throw config_error("explanation report ranks position " + std::to_string(idx) + " twice");
            seen[static_cast<std::size_t>(idx)] = true;
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["tokens"] = tokens;
        j["similarity"] = similarity;
        j["cosine"] = cosine;
        j["alignment"] = overall_alignment;
        j["lowest"] = lowest;
        j["context"] = context;
        j["includes_prompt"] = includes_prompt;
        return j;
    }

    static ExplanationReport from_json(const nlohmann::json& j) {
        ExplanationReport r;
        try {
            r.tokens = j.at("tokens").get<std::vector<std::string>>();
            r.similarity = j.at("similarity").get<std::vector<float>>();
            r.cosine = j.at("cosine").get<std::vector<float>>();
            r.overall_alignment = j.at("alignment").get<float>();
            r.lowest = j.at("lowest").get<std::vector<int>>();
            r.context = j.at("context").get<std::vector<std::string>>();
            r.includes_prompt = j.at("includes_prompt").get<bool>();
        } catch (const nlohmann::json::exception& e) {
            throw data_error(std::string("malformed explanation report: ") + e.what());
        }
        r.validate();
        return r;
    }
};

// Scores a finished sequence. The sequence is the prompt plus its generated
// continuation; the same hooks that steered the generation should be passed so
// the scored states are the ones the model actually produced. Only generated
// positions are scored unless include_prompt is set.
inline ExplanationReport build_explanation(const TinyLm& model, const Vocab& vocab,
                                           const SteeringRepresentation& rep, const std::vector<int>& sequence,
                                           int n_prompt, int k, const std::vector<LayerRewriteHook>& hooks = {},
                                           bool include_prompt = false) {
    if (n_prompt < 1 || n_prompt >= static_cast<int>(sequence.size()))
        throw data_error("explanation needs a prompt and at least one generated token, got " +
                         std::to_string(n_prompt) + " of " + std::to_string(sequence.size()));
    NoTapeScope guard;
    auto trace = model.forward_with_trace(sequence, hooks).second;

    ExplanationReport rpt;
    rpt.includes_prompt = include_prompt;
    int start = include_prompt ? 0 : n_prompt;
    for (int i = start; i < static_cast<int>(sequence.size()); ++i) {
        rpt.tokens.push_back(vocab.word(sequence[static_cast<std::size_t>(i)]));
        rpt.similarity.push_back(token_similarity(rep, trace, i));
        rpt.cosine.push_back(token_cosine(rep, trace, i));
    }
    for (int i = 0; i < start; ++i) rpt.context.push_back(vocab.word(sequence[static_cast<std::size_t>(i)]));
    rpt.overall_alignment = alignment(rpt.similarity);
    if (k < 1) throw config_error("rank count " + std::to_string(k) + " must be positive");
    rpt.lowest = rank_lowest(rpt.similarity, std::min(k, static_cast<int>(rpt.similarity.size())));
    rpt.validate();
    return rpt;
}

enum class ReportFormat { ansi, html, json };

inline ReportFormat format_from_name(const std::string& s) {
    if (s == "ansi") return ReportFormat::ansi;
    if (s == "html") return ReportFormat::html;
    if (s == "json") return ReportFormat::json;
    throw config_error("unknown report format '" + s + "', expected ansi|html|json");
}

namespace detail {

// Min-max normalizes the scores for display; a flat list shades uniformly at
// the midpoint.
inline std::vector<float> shade_levels(const std::vector<float>& scores) {
    float lo = *std::min_element(scores.begin(), scores.end());
    float hi = *std::max_element(scores.begin(), scores.end());
    std::vector<float> t(scores.size(), 0.5f);
    if (hi > lo)
        for (std::size_t i = 0; i < scores.size(); ++i) t[i] = (scores[i] - lo) / (hi - lo);
    return t;
}

inline std::string format_score(float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", static_cast<double>(v));
    return buf;
}

}  // namespace detail

inline std::string render_report(const ExplanationReport& rpt, ReportFormat fmt) {
    rpt.validate();
    if (fmt == ReportFormat::json) return rpt.to_json().dump(2) + "\n";

    auto levels = detail::shade_levels(rpt.similarity);
    std::string out;
    if (fmt == ReportFormat::ansi) {
        for (const auto& w : rpt.context) out += w + " ";
        for (std::size_t i = 0; i < rpt.tokens.size(); ++i) {
            float t = levels[i];
            int r = static_cast<int>(248.0f - 216.0f * t);
            int g = static_cast<int>(248.0f - 88.0f * t);
            int b = static_cast<int>(248.0f - 184.0f * t);
            out += "\x1b[30;48;2;" + std::to_string(r) + ";" + std::to_string(g) + ";" + std::to_string(b) + "m" +
                   rpt.tokens[i] + "\x1b[0m";
            if (i + 1 < rpt.tokens.size()) out += " ";
        }
        out += "\nalignment: " + detail::format_score(rpt.overall_alignment) + "\nlowest:";
        for (int idx : rpt.lowest)
            out += " " + std::to_string(idx) + ":" + rpt.tokens[static_cast<std::size_t>(idx)];
        out += "\n";
        return out;
    }

    out += "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>alignment report</title>\n</head>\n";
    out += "<body>\n<p>";
    for (const auto& w : rpt.context) out += w + " ";
    for (std::size_t i = 0; i < rpt.tokens.size(); ++i) {
        char alpha[16];
        std::snprintf(alpha, sizeof(alpha), "%.3f", static_cast<double>(levels[i]));
        out += "<mark style=\"background: rgba(32,160,64," + std::string(alpha) + ");\">" + rpt.tokens[i] +
               "</mark>";
        if (i + 1 < rpt.tokens.size()) out += " ";
    }
    out += "</p>\n<p>alignment: " + detail::format_score(rpt.overall_alignment) + "</p>\n<p>lowest:";
    for (int idx : rpt.lowest) out += " " + std::to_string(idx) + ":" + rpt.tokens[static_cast<std::size_t>(idx)];
    out += "</p>\n</body>\n</html>\n";
    return out;
}

}  // namespace guardrail
