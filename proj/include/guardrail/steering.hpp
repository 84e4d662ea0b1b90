#pragma once

// Steering-representation extraction and inference-time output control.
//
// A steering representation holds one d-vector per intervened layer: the mean
// difference between positive-prefixed and negative-prefixed activations at
// that layer, averaged over token positions and prompt pairs. The primary
// extractor runs with the trained debias blocks hooked in; two baselines
// (activation addition from a single raw pair, and mean centring against a
// training set) run on the raw model for comparison. At inference the vectors
// are injected through layer rewrite hooks, applied row by row to every token
// state with one of three operators.

#include <guardrail/common.hpp>
#include <guardrail/corpus.hpp>
#include <guardrail/debias.hpp>
#include <guardrail/model.hpp>
#include <guardrail/tensor.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace guardrail {

enum class SteerOp { projection, addition, product };

inline std::string op_name(SteerOp op) {
    switch (op) {
        case SteerOp::projection: return "projection";
        case SteerOp::addition: return "addition";
        case SteerOp::product: return "product";
    }
    throw config_error("unknown steering operator");
}

inline SteerOp op_from_name(const std::string& s) {
    if (s == "projection") return SteerOp::projection;
    if (s == "addition") return SteerOp::addition;
    if (s == "product") return SteerOp::product;
    throw config_error("unknown steering operator '" + s + "', expected projection|addition|product");
}

// One steering vector per intervened layer; row k steers layers[k].
struct SteeringRepresentation {
    Tensor delta;             // K x d
    std::vector<int> layers;  // ascending 1-based layer ids, one per row
    int n_samples = 0;        // prompt pairs (or target prompts) behind the mean
    bool debiased = false;
    std::string method;       // debias | actadd | mean_centring

    int depth() const { return static_cast<int>(layers.size()); }
    int dim() const { return delta.defined() ? delta.cols() : 0; }

    std::vector<float> row(int k) const {
        if (k < 0 || k >= depth()) throw config_error("representation row " + std::to_string(k) + " out of range");
        const float* base = delta.data().data() + static_cast<std::size_t>(k) * dim();
        return std::vector<float>(base, base + dim());
    }

    // Row index for a layer id, or -1 if the layer has no steering vector.
    int row_of(int layer) const {
        for (int k = 0; k < depth(); ++k)
            if (layers[k] == layer) return k;
        return -1;
    }

    void validate() const {
        if (!delta.defined() || delta.ndim() != 2)
            throw config_error("steering representation has no K x d matrix");
        if (delta.rows() != depth())
            throw config_error("steering representation has " + std::to_string(delta.rows()) + " rows for " +
                               std::to_string(depth()) + " layers");
        if (depth() == 0) throw config_error("steering representation covers no layers");
        for (int k = 0; k < depth(); ++k) {
            if (layers[k] < 1) throw config_error("steering representation layer ids must be positive");
            if (k > 0 && layers[k] <= layers[k - 1])
                throw config_error("steering representation layers must be strictly ascending");
        }
        if (method != "debias" && method != "actadd" && method != "mean_centring")
            throw config_error("steering representation method '" + method + "' is not a known extractor");
        if (debiased != (method == "debias"))
            throw config_error("steering representation debiased flag does not match method '" + method + "'");
        if (n_samples < 1) throw config_error("steering representation needs n_samples >= 1");
        for (float v : delta.data())
            if (!std::isfinite(v)) throw numeric_error("steering representation contains a non-finite entry");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["layers"] = layers;
        j["k"] = depth();
        j["d"] = dim();
        j["n_samples"] = n_samples;
        j["method"] = method;
        j["debiased"] = debiased;
        return j;
    }
};

namespace detail {

// Checks a layer list is usable against a model and returns it sorted.
inline std::vector<int> checked_layers(std::vector<int> layers, const ModelConfig& cfg) {
    if (layers.empty()) throw config_error("extraction needs at least one intervened layer");
    std::sort(layers.begin(), layers.end());
    if (std::adjacent_find(layers.begin(), layers.end()) != layers.end())
        throw config_error("extraction layer list contains a duplicate");
    if (layers.front() < 1 || layers.back() > cfg.n_layers)
        throw config_error("extraction layer outside 1.." + std::to_string(cfg.n_layers));
    return layers;
}

// Adds the token-averaged state difference of one pair into acc (K*d doubles,
// row-major over the sorted layer list). Forward passes run untaped; hooks may
// be empty for raw-model baselines.
inline void accumulate_pair_diff(const TinyLm& model, const std::vector<LayerRewriteHook>& hooks,
                                 const SteeringPair& pair, const std::vector<int>& layers, bool semantic_only,
                                 std::vector<double>& acc) {
    auto pos_tokens = pair.pos.tokens();
    auto neg_tokens = pair.neg.tokens();
    if (pos_tokens.size() != neg_tokens.size())
        throw data_error("steering pair prompts have " + std::to_string(pos_tokens.size()) + " vs " +
                         std::to_string(neg_tokens.size()) + " tokens, corpus is corrupt");
    if (pair.pos.prefix.size() != pair.neg.prefix.size())
        throw data_error("steering pair prefixes differ in length, corpus is corrupt");
    int n = static_cast<int>(pos_tokens.size());
    int row0 = semantic_only ? static_cast<int>(pair.pos.prefix.size()) : 0;
    if (row0 >= n) throw data_error("steering pair has no semantic tokens to average over");

    NoTapeScope guard;
    auto pos_trace = model.forward_with_trace(pos_tokens, hooks).second;
    auto neg_trace = model.forward_with_trace(neg_tokens, hooks).second;
    int d = model.config().d_model;
    double inv = 1.0 / (n - row0);
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const std::vector<float>& p = pos_trace.state(layers[k]).data();
        const std::vector<float>& q = neg_trace.state(layers[k]).data();
        double* out = acc.data() + k * static_cast<std::size_t>(d);
        for (int i = row0; i < n; ++i) {
            const float* pr = p.data() + static_cast<std::size_t>(i) * d;
            const float* qr = q.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) out[j] += inv * (static_cast<double>(pr[j]) - static_cast<double>(qr[j]));
        }
    }
}

inline SteeringRepresentation finish_representation(std::vector<double> acc, double scale,
                                                    const std::vector<int>& layers, int d, int n_samples,
                                                    const std::string& method) {
    std::vector<float> values(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) values[i] = static_cast<float>(acc[i] * scale);
    SteeringRepresentation rep;
    rep.delta = Tensor::from_values({static_cast<int>(layers.size()), d}, std::move(values));
    rep.layers = layers;
    rep.n_samples = n_samples;
    rep.method = method;
    rep.debiased = method == "debias";
    rep.validate();
    return rep;
}

}  // namespace detail

// Debiased extraction: every pair runs through the model with the trained
// debias blocks hooked in, the per-token state difference is averaged within
// each pair, and the pair means are averaged again. By default all prompt
// positions contribute; semantic_only drops the steering prefix rows.
inline SteeringRepresentation extract_steering(const TinyLm& model, const std::vector<DebiasLoraBlock>& blocks,
                                               const std::vector<SteeringPair>& pairs, bool semantic_only = false) {
    if (pairs.empty()) throw data_error("steering extraction needs at least one prompt pair");
    if (blocks.empty()) throw config_error("steering extraction needs at least one debias block");
    std::vector<int> layers;
    layers.reserve(blocks.size());
    for (const auto& b : blocks) layers.push_back(b.layer);
    layers = detail::checked_layers(std::move(layers), model.config());
    auto hooks = make_debias_hooks(blocks);

    int d = model.config().d_model;
    std::vector<double> acc(layers.size() * static_cast<std::size_t>(d), 0.0);
    for (const auto& pair : pairs) detail::accumulate_pair_diff(model, hooks, pair, layers, semantic_only, acc);
    return detail::finish_representation(std::move(acc), 1.0 / pairs.size(), layers, d,
                                         static_cast<int>(pairs.size()), "debias");
}

// Raw activation-difference baseline: a single pair on the unmodified model.
inline SteeringRepresentation baseline_actadd(const TinyLm& model, const SteeringPair& pair,
                                              const std::vector<int>& layers, bool semantic_only = false) {
    auto sorted = detail::checked_layers(layers, model.config());
    int d = model.config().d_model;
    std::vector<double> acc(sorted.size() * static_cast<std::size_t>(d), 0.0);
    detail::accumulate_pair_diff(model, {}, pair, sorted, semantic_only, acc);
    return detail::finish_representation(std::move(acc), 1.0, sorted, d, 1, "actadd");
}

// Mean-centring baseline: per-layer mean of the target prompts' pooled states
// minus the same mean over the training prompts, both on the raw model.
inline SteeringRepresentation baseline_mean_centring(const TinyLm& model,
                                                     const std::vector<std::vector<int>>& target,
                                                     const std::vector<std::vector<int>>& training,
                                                     const std::vector<int>& layers) {
    if (target.empty()) throw data_error("mean centring needs a non-empty target set");
    if (training.empty()) throw data_error("mean centring needs a non-empty training set");
    auto sorted = detail::checked_layers(layers, model.config());
    int d = model.config().d_model;

    auto set_mean = [&](const std::vector<std::vector<int>>& seqs) {
        std::vector<double> mean(sorted.size() * static_cast<std::size_t>(d), 0.0);
        NoTapeScope guard;
        for (const auto& seq : seqs) {
            auto trace = model.forward_with_trace(seq).second;
            int n = static_cast<int>(seq.size());
            double inv = 1.0 / (static_cast<double>(n) * seqs.size());
            for (std::size_t k = 0; k < sorted.size(); ++k) {
                const std::vector<float>& s = trace.state(sorted[k]).data();
                double* out = mean.data() + k * static_cast<std::size_t>(d);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) out[j] += inv * s[static_cast<std::size_t>(i) * d + j];
            }
        }
        return mean;
    };

    auto acc = set_mean(target);
    auto base = set_mean(training);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] -= base[i];
    return detail::finish_representation(std::move(acc), 1.0, sorted, d, static_cast<int>(target.size()),
                                         "mean_centring");
}

// How a representation is injected at inference.
struct ControlConfig {
    float beta = 2.0f;
    SteerOp op = SteerOp::projection;
    std::vector<int> layers;  // target layers; empty means every representation layer
};

// Applies one operator to a single d-vector state row. Projection and addition
// keep the input and add a steering term; product replaces the row outright.
// out may alias r.
inline void apply_control_row(const float* r, const float* delta, int d, SteerOp op, float beta, float* out) {
    switch (op) {
        case SteerOp::projection: {
            double dot = 0.0, nrm2 = 0.0;
            for (int j = 0; j < d; ++j) {
                dot += static_cast<double>(r[j]) * delta[j];
                nrm2 += static_cast<double>(delta[j]) * delta[j];
            }
            if (nrm2 == 0.0) throw numeric_error("projection control: steering vector is zero");
            float coef = beta * static_cast<float>(dot / nrm2);
            for (int j = 0; j < d; ++j) out[j] = r[j] + coef * delta[j];
            return;
        }
        case SteerOp::addition:
            for (int j = 0; j < d; ++j) out[j] = r[j] + beta * delta[j];
            return;
        case SteerOp::product: {
            double nrm2 = 0.0;
            for (int j = 0; j < d; ++j) nrm2 += static_cast<double>(delta[j]) * delta[j];
            if (nrm2 == 0.0) throw numeric_error("product control: steering vector is zero");
            for (int j = 0; j < d; ++j) out[j] = beta * r[j] * delta[j];
            return;
        }
    }
    throw config_error("unknown steering operator");
}

inline std::vector<float> apply_control(const std::vector<float>& r, const std::vector<float>& delta, SteerOp op,
                                        float beta) {
    if (r.empty()) throw std::invalid_argument("apply_control: empty state vector");
    if (r.size() != delta.size())
        throw std::invalid_argument("apply_control: state has " + std::to_string(r.size()) +
                                    " entries, steering vector " + std::to_string(delta.size()));
    std::vector<float> out(r.size());
    apply_control_row(r.data(), delta.data(), static_cast<int>(r.size()), op, beta, out.data());
    return out;
}

namespace detail {

// Resolves which layers a config steers and checks them against the
// representation and the model.
inline std::vector<int> control_targets(const SteeringRepresentation& rep, const ControlConfig& cfg,
                                        const ModelConfig& mcfg) {
    rep.validate();
    if (rep.dim() != mcfg.d_model)
        throw config_error("steering representation dim " + std::to_string(rep.dim()) + " does not match model d " +
                           std::to_string(mcfg.d_model));
    if (rep.layers.back() > mcfg.n_layers)
        throw config_error("steering representation layer " + std::to_string(rep.layers.back()) +
                           " beyond model depth " + std::to_string(mcfg.n_layers));
    std::vector<int> targets = cfg.layers.empty() ? rep.layers : cfg.layers;
    std::sort(targets.begin(), targets.end());
    targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
    for (int t : targets)
        if (rep.row_of(t) < 0)
            throw config_error("control target layer " + std::to_string(t) + " has no steering vector");
    return targets;
}

}  // namespace detail

// One rewrite hook per target layer, applying the layer's steering vector to
// every token row of the state.
inline std::vector<LayerRewriteHook> make_steering_hooks(const SteeringRepresentation& rep, const ControlConfig& cfg,
                                                         const ModelConfig& mcfg) {
    auto targets = detail::control_targets(rep, cfg, mcfg);
    std::vector<LayerRewriteHook> hooks;
    hooks.reserve(targets.size());
    for (int layer : targets) {
        std::vector<float> row = rep.row(rep.row_of(layer));
        hooks.push_back({layer, [row = std::move(row), beta = cfg.beta, op = cfg.op](const HookContext& c) {
                             int n = c.state.rows();
                             int d = c.state.cols();
                             std::vector<float> out(c.state.data());
                             for (int i = 0; i < n; ++i) {
                                 float* r = out.data() + static_cast<std::size_t>(i) * d;
                                 apply_control_row(r, row.data(), d, op, beta, r);
                             }
                             return Tensor::from_values({n, d}, std::move(out));
                         }});
    }
    return hooks;
}

// Several representations steering at once: their per-layer projection or
// addition terms are summed, each weighted by its own beta. The product
// operator replaces the state instead of contributing a term, so it cannot
// join a combined hook.
inline std::vector<LayerRewriteHook> make_combined_steering_hooks(const std::vector<SteeringRepresentation>& reps,
                                                                  const std::vector<ControlConfig>& cfgs,
                                                                  const ModelConfig& mcfg) {
    if (reps.empty()) throw config_error("combined steering needs at least one representation");
    if (reps.size() != cfgs.size())
        throw config_error("combined steering got " + std::to_string(reps.size()) + " representations and " +
                           std::to_string(cfgs.size()) + " configs");

    struct Term {
        std::vector<float> row;
        float beta;
        SteerOp op;
    };
    std::map<int, std::vector<Term>> by_layer;
    for (std::size_t i = 0; i < reps.size(); ++i) {
        if (cfgs[i].op == SteerOp::product)
            throw config_error("product control replaces the state and cannot be combined");
        for (int layer : detail::control_targets(reps[i], cfgs[i], mcfg))
            by_layer[layer].push_back({reps[i].row(reps[i].row_of(layer)), cfgs[i].beta, cfgs[i].op});
    }

    std::vector<LayerRewriteHook> hooks;
    hooks.reserve(by_layer.size());
    for (auto& [layer, terms] : by_layer) {
        hooks.push_back({layer, [terms = std::move(terms)](const HookContext& c) {
                             int n = c.state.rows();
                             int d = c.state.cols();
                             std::vector<float> out(c.state.data());
                             std::vector<float> one(static_cast<std::size_t>(d));
                             for (int i = 0; i < n; ++i) {
                                 const float* r = c.state.data().data() + static_cast<std::size_t>(i) * d;
                                 float* o = out.data() + static_cast<std::size_t>(i) * d;
                                 for (const Term& t : terms) {
                                     apply_control_row(r, t.row.data(), d, t.op, t.beta, one.data());
                                     for (int j = 0; j < d; ++j) o[j] += one[j] - r[j];
                                 }
                             }
                             return Tensor::from_values({n, d}, std::move(out));
                         }});
    }
    return hooks;
}

}  // namespace guardrail
