#pragma once

// Linear probes over residual-stream states. Used for intervened-layer
// selection (rank layers by held-out probing accuracy) and for the bias audit
// that classifies neutral prompts with a probe trained on steered ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "guardrail/common.hpp"
#include "guardrail/corpus.hpp"
#include "guardrail/model.hpp"

namespace guardrail {

// Plain-float mean over rows [r0, r1) of a traced state.
inline std::vector<float> pooled_mean(const Tensor& state, int r0, int r1) {
    if (r0 < 0 || r1 > state.rows() || r0 >= r1)
        throw data_error("pooled_mean: row range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") invalid for " + shape_str(state.shape()));
    const int d = state.cols();
    std::vector<float> out(static_cast<std::size_t>(d), 0.0f);
    for (int i = r0; i < r1; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += state.data()[static_cast<std::size_t>(i) * d + j];
    const float inv = 1.0f / static_cast<float>(r1 - r0);
    for (auto& v : out) v *= inv;
    return out;
}

struct LinearProbe {
    std::vector<float> w;  // c x d row-major
    std::vector<float> b;  // c
    int n_classes = 0;
    int dim = 0;
    int layer = -1;  // layer whose states it was trained on, -1 if unbound

    std::vector<float> logits(const std::vector<float>& x) const {
        if (static_cast<int>(x.size()) != dim)
            throw config_error("probe: input dimension " + std::to_string(x.size()) + " does not match trained " +
                               std::to_string(dim));
        std::vector<float> out(b);
        for (int c = 0; c < n_classes; ++c)
            for (int j = 0; j < dim; ++j)
                out[static_cast<std::size_t>(c)] += w[static_cast<std::size_t>(c) * dim + j] * x[static_cast<std::size_t>(j)];
        return out;
    }

    int predict(const std::vector<float>& x) const {
        const auto z = logits(x);
        return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    }
};

// Multinomial logistic regression by full-batch gradient descent. Convex and
// zero-initialized, so the result is a pure function of the data.
inline LinearProbe fit_probe(const std::vector<std::vector<float>>& reps, const std::vector<int>& labels,
                             int epochs = 200, float lr = 0.1f) {
    if (reps.empty() || reps.size() != labels.size())
        throw data_error("fit_probe: " + std::to_string(reps.size()) + " representations for " +
                         std::to_string(labels.size()) + " labels");
    const int d = static_cast<int>(reps.front().size());
    int c = 0;
    for (int y : labels) {
        if (y < 0) throw data_error("fit_probe: negative class label");
        c = std::max(c, y + 1);
    }
    std::vector<int> present(static_cast<std::size_t>(c), 0);
    for (int y : labels) present[static_cast<std::size_t>(y)] = 1;
    if (std::accumulate(present.begin(), present.end(), 0) < 2)
        throw data_error("fit_probe: all labels belong to a single class");
    for (const auto& r : reps)
        if (static_cast<int>(r.size()) != d) throw data_error("fit_probe: inconsistent representation dimensions");

    LinearProbe probe;
    probe.n_classes = c;
    probe.dim = d;
    probe.w.assign(static_cast<std::size_t>(c) * d, 0.0f);
    probe.b.assign(static_cast<std::size_t>(c), 0.0f);
    const int n = static_cast<int>(reps.size());
    std::vector<float> p(static_cast<std::size_t>(c));
    std::vector<float> gw(static_cast<std::size_t>(c) * d);
    std::vector<float> gb(static_cast<std::size_t>(c));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0f);
        std::fill(gb.begin(), gb.end(), 0.0f);
        for (int i = 0; i < n; ++i) {
            const auto z = probe.logits(reps[static_cast<std::size_t>(i)]);
            const float mx = *std::max_element(z.begin(), z.end());
            float denom = 0.0f;
            for (int k = 0; k < c; ++k) {
                p[static_cast<std::size_t>(k)] = std::exp(z[static_cast<std::size_t>(k)] - mx);
                denom += p[static_cast<std::size_t>(k)];
            }
            for (int k = 0; k < c; ++k) {
                const float err = p[static_cast<std::size_t>(k)] / denom -
                                  (labels[static_cast<std::size_t>(i)] == k ? 1.0f : 0.0f);
                gb[static_cast<std::size_t>(k)] += err;
                const auto& x = reps[static_cast<std::size_t>(i)];
                for (int j = 0; j < d; ++j) gw[static_cast<std::size_t>(k) * d + j] += err * x[static_cast<std::size_t>(j)];
            }
        }
        const float step = lr / static_cast<float>(n);
        for (std::size_t j = 0; j < probe.w.size(); ++j) probe.w[j] -= step * gw[j];
        for (std::size_t j = 0; j < probe.b.size(); ++j) probe.b[j] -= step * gb[j];
    }
    return probe;
}

inline float probe_accuracy(const LinearProbe& probe, const std::vector<std::vector<float>>& reps,
                            const std::vector<int>& labels) {
    if (reps.empty()) throw data_error("probe_accuracy: no data");
    int hits = 0;
    for (std::size_t i = 0; i < reps.size(); ++i)
        if (probe.predict(reps[i]) == labels[i]) ++hits;
    return static_cast<float>(hits) / static_cast<float>(reps.size());
}

struct FitReport {
    LinearProbe probe;
    float train_accuracy = 0.0f;
    float val_accuracy = 0.0f;
};

// 80/20 seeded split, probe fit on the 80.
inline FitReport fit_probe_split(const std::vector<std::vector<float>>& reps, const std::vector<int>& labels,
                                 int epochs = 200, float lr = 0.1f, std::uint64_t seed = 0) {
    if (reps.size() != labels.size() || reps.size() < 5)
        throw data_error("fit_probe_split: need at least 5 labeled representations");
    std::vector<std::size_t> order(reps.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    const std::size_t n_train = (reps.size() * 8) / 10;
    std::vector<std::vector<float>> train_x, val_x;
    std::vector<int> train_y, val_y;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i < n_train) {
            train_x.push_back(reps[order[i]]);
            train_y.push_back(labels[order[i]]);
        } else {
            val_x.push_back(reps[order[i]]);
            val_y.push_back(labels[order[i]]);
        }
    }
    FitReport out;
    out.probe = fit_probe(train_x, train_y, epochs, lr);
    out.train_accuracy = probe_accuracy(out.probe, train_x, train_y);
    out.val_accuracy = probe_accuracy(out.probe, val_x, val_y);
    return out;
}

struct ProbeReport {
    std::vector<float> accuracy;  // indexed by layer, 0..D

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["layer_accuracy"] = accuracy;
        return j;
    }
};

struct LayerSelection {
    std::vector<int> layers;  // sorted ascending, distinct

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["layers"] = layers;
        j["k"] = layers.size();
        return j;
    }
};

enum class ProbeInputs {
    steered,  // prompts from steering pairs, labeled by prefix direction
    neutral,  // bare bodies, labeled by the topic's associated direction
};

// Whole-prompt mean-pooled features for every layer of every prompt.
// Returns per-layer datasets plus the shared label vector.
inline std::pair<std::vector<std::vector<std::vector<float>>>, std::vector<int>>
layer_features(const TinyLm& model, const std::vector<SegmentedPrompt>& prompts) {
    const int depth = model.config().n_layers;
    std::vector<std::vector<std::vector<float>>> feats(static_cast<std::size_t>(depth) + 1);
    std::vector<int> labels;
    for (const auto& p : prompts) {
        if (p.direction == 0) throw data_error("layer_features: prompt carries no direction label");
        NoTapeScope mute;
        auto trace = model.forward_with_trace(p.tokens()).second;
        const int n = static_cast<int>(p.tokens().size());
        for (int l = 0; l <= depth; ++l)
            feats[static_cast<std::size_t>(l)].push_back(pooled_mean(trace.state(l), 0, n));
        labels.push_back(p.direction > 0 ? 1 : 0);
    }
    return {std::move(feats), std::move(labels)};
}

inline ProbeReport rank_layers(const TinyLm& model, const std::vector<SegmentedPrompt>& prompts,
                               int epochs = 200, float lr = 0.1f, std::uint64_t seed = 0) {
    auto [feats, labels] = layer_features(model, prompts);
    ProbeReport report;
    for (std::size_t l = 0; l < feats.size(); ++l)
        report.accuracy.push_back(fit_probe_split(feats[l], labels, epochs, lr, seed).val_accuracy);
    return report;
}

inline LayerSelection select_top_k(const ProbeReport& report, int k) {
    const int n = static_cast<int>(report.accuracy.size());
    if (k < 1 || k > n)
        throw config_error("select_top_k: K=" + std::to_string(k) + " outside 1.." + std::to_string(n));
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    // highest accuracy first; exact ties go to the deeper layer
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (report.accuracy[static_cast<std::size_t>(a)] != report.accuracy[static_cast<std::size_t>(b)])
            return report.accuracy[static_cast<std::size_t>(a)] > report.accuracy[static_cast<std::size_t>(b)];
        return a > b;
    });
    LayerSelection sel;
    sel.layers.assign(idx.begin(), idx.begin() + k);
    std::sort(sel.layers.begin(), sel.layers.end());
    return sel;
}

// Fallback that skips probing entirely: a centered band of K block layers.
inline LayerSelection select_middle(int depth, int k) {
    if (k < 1 || k > depth)
        throw config_error("select_middle: K=" + std::to_string(k) + " outside 1.." + std::to_string(depth));
    const int start = (depth - k) / 2 + 1;
    LayerSelection sel;
    for (int l = start; l < start + k; ++l) sel.layers.push_back(l);
    return sel;
}

struct BiasAuditReport {
    float frac_positive = 0.0f;
    float frac_negative = 0.0f;
    float toward_planted = 0.0f;  // fraction classified toward the topic's confounded direction
    std::map<int, std::pair<float, float>> per_topic;  // topic -> (frac_pos, frac_neg)

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["frac_positive"] = frac_positive;
        j["frac_negative"] = frac_negative;
        j["toward_planted"] = toward_planted;
        nlohmann::json topics = nlohmann::json::object();
        for (const auto& [t, fr] : per_topic) {
            topics[std::to_string(t)] = {{"frac_positive", fr.first}, {"frac_negative", fr.second}};
        }
        j["per_topic"] = topics;
        return j;
    }
};

// Classifies each neutral prompt's pooled body representation with a probe
// trained elsewhere (on steered pairs). Shows how strongly bare topics already
// lean toward a direction.
inline BiasAuditReport audit_semantic_bias(const TinyLm& model, const std::vector<NeutralPrompt>& prompts,
                                           const LinearProbe& probe) {
    if (prompts.empty()) throw data_error("audit: no prompts");
    if (probe.dim != model.config().d_model)
        throw config_error("audit: probe dimension " + std::to_string(probe.dim) + " does not match model width " +
                           std::to_string(model.config().d_model));
    const int layer = probe.layer >= 0 ? probe.layer : model.config().n_layers;
    std::map<int, std::pair<int, int>> topic_counts;  // topic -> (positive, total)
    int positive = 0;
    int planted = 0;
    for (const auto& p : prompts) {
        NoTapeScope mute;
        auto trace = model.forward_with_trace(p.body).second;
        const auto rep = pooled_mean(trace.state(layer), 0, static_cast<int>(p.body.size()));
        const int cls = probe.predict(rep);
        auto& [pos, total] = topic_counts[p.topic];
        if (cls == 1) {
            ++pos;
            ++positive;
        }
        if ((cls == 1 ? 1 : -1) == topic_direction(p.topic)) ++planted;
        ++total;
    }
    BiasAuditReport report;
    report.frac_positive = static_cast<float>(positive) / static_cast<float>(prompts.size());
    report.toward_planted = static_cast<float>(planted) / static_cast<float>(prompts.size());
    report.frac_negative = 1.0f - report.frac_positive;
    for (const auto& [t, counts] : topic_counts) {
        const float fp = static_cast<float>(counts.first) / static_cast<float>(counts.second);
        report.per_topic[t] = {fp, 1.0f - fp};
    }
    return report;
}

// Probe for the audit: trained on body-only pooled states of steered prompts
// so it transfers to prompts that have no prefix at all.
inline LinearProbe fit_audit_probe(const TinyLm& model, const std::vector<SteeringPair>& pairs, int layer,
                                   int epochs = 200, float lr = 0.1f) {
    if (pairs.empty()) throw data_error("fit_audit_probe: no pairs");
    std::vector<std::vector<float>> reps;
    std::vector<int> labels;
    for (const auto& pr : pairs) {
        for (const auto* p : {&pr.pos, &pr.neg}) {
            NoTapeScope mute;
            auto trace = model.forward_with_trace(p->tokens()).second;
            const int n = static_cast<int>(p->tokens().size());
            const int body_start = static_cast<int>(p->prefix.size());
            reps.push_back(pooled_mean(trace.state(layer), body_start, n));
            labels.push_back(p->direction > 0 ? 1 : 0);
        }
    }
    LinearProbe probe = fit_probe(reps, labels, epochs, lr);
    probe.layer = layer;
    return probe;
}

}  // namespace guardrail
