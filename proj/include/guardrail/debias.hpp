#pragma once

// Low-rank debias blocks trained adversarially against a domain probe behind
// a gradient-reversal layer, while a reconstruction loss pins the rewritten
// model to the frozen teacher's outputs.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "guardrail/common.hpp"
#include "guardrail/corpus.hpp"
#include "guardrail/model.hpp"
#include "guardrail/optim.hpp"
#include "guardrail/probing.hpp"
#include "guardrail/tensor.hpp"

namespace guardrail {

enum class DebiasMode { residual, replace };

inline std::string mode_name(DebiasMode m) { return m == DebiasMode::residual ? "residual" : "replace"; }

inline DebiasMode mode_from_name(const std::string& s) {
    if (s == "residual") return DebiasMode::residual;
    if (s == "replace") return DebiasMode::replace;
    throw config_error("unknown debias mode '" + s + "', expected residual or replace");
}

// Rank-m rewrite of one layer boundary. Consumes the previous layer's state:
// replace mode emits B*A*r^{l-1}, residual mode adds that term onto r^l.
// B starts at zero so residual training begins exactly at the identity.
struct DebiasLoraBlock {
    int layer = 0;
    Tensor A;  // m x d
    Tensor B;  // d x m
    DebiasMode mode = DebiasMode::residual;

    static DebiasLoraBlock make(int layer, int d, int m, DebiasMode mode, Rng& rng) {
        if (layer < 1) throw config_error("debias block: layer " + std::to_string(layer) + " has no previous state");
        if (m < 1 || m > d)
            throw config_error("debias block: rank " + std::to_string(m) + " outside 1.." + std::to_string(d));
        DebiasLoraBlock b;
        b.layer = layer;
        b.mode = mode;
        b.A = Tensor({m, d}, 0.0f, true);
        const float spread = 1.0f / std::sqrt(static_cast<float>(d));
        for (auto& v : b.A.data()) v = rng.normal() * spread;
        b.B = Tensor({d, m}, 0.0f, true);
        return b;
    }

    int rank() const { return A.rows(); }

    // prev is r^{l-1}, cur is r^l; both n x d.
    Tensor forward(const Tensor& prev, const Tensor& cur) const {
        if (prev.ndim() != 2 || prev.cols() != A.cols())
            throw config_error("debias block at layer " + std::to_string(layer) + ": state " +
                               shape_str(prev.shape()) + " does not match A " + shape_str(A.shape()));
        auto low = matmul_nt(prev, A);       // n x m
        auto delta = matmul_nt(low, B);      // n x d
        if (mode == DebiasMode::replace) return delta;
        if (cur.shape() != delta.shape())
            throw config_error("debias block at layer " + std::to_string(layer) + ": r^l " + shape_str(cur.shape()) +
                               " does not match rewrite " + shape_str(delta.shape()));
        return add(cur, delta);
    }
};

inline Tensor debias_forward(const DebiasLoraBlock& block, const Tensor& prev, const Tensor& cur) {
    return block.forward(prev, cur);
}

inline std::vector<LayerRewriteHook> make_debias_hooks(const std::vector<DebiasLoraBlock>& blocks) {
    std::vector<LayerRewriteHook> hooks;
    hooks.reserve(blocks.size());
    for (const auto& b : blocks)
        hooks.push_back({b.layer, [b](const HookContext& c) { return b.forward(c.prev, c.state); }});
    return hooks;
}

// Two-class MLP adversary over a pooled state.
struct DomainProbe {
    Tensor w1;  // d x h
    Tensor b1;  // h
    Tensor w2;  // h x 2
    Tensor b2;  // 2

    static DomainProbe make(int d, int h, Rng& rng) {
        if (d < 1 || h < 1) throw config_error("domain probe: dimensions must be positive");
        DomainProbe p;
        auto init = [&](Shape shape, float spread) {
            Tensor t(std::move(shape), 0.0f, true);
            for (auto& v : t.data()) v = rng.normal() * spread;
            return t;
        };
        p.w1 = init({d, h}, 1.0f / std::sqrt(static_cast<float>(d)));
        p.b1 = Tensor({h}, 0.0f, true);
        p.w2 = init({h, 2}, 1.0f / std::sqrt(static_cast<float>(h)));
        p.b2 = Tensor({2}, 0.0f, true);
        return p;
    }

    int input_dim() const { return w1.rows(); }

    Tensor forward(const Tensor& x) const {
        return add_rowvec(matmul(gelu(add_rowvec(matmul(x, w1), b1)), w2), b2);
    }

    std::vector<Tensor> params() const { return {w1, b1, w2, b2}; }
};

// Mean-pools the last L_c token states (the semantic segment), reverses
// gradients, and scores the probe's 2-class cross-entropy against the
// steering direction. `reverse=false` drops the GRL for sign checks.
inline Tensor domain_loss(const DomainProbe& probe, const Tensor& state, int L_c, int y_direction, float eta,
                          bool reverse = true) {
    if (L_c < 1) throw config_error("domain_loss: semantic segment length must be >= 1");
    if (y_direction != 1 && y_direction != -1) throw config_error("domain_loss: direction must be +1 or -1");
    const int n = state.rows();
    if (L_c > n)
        throw data_error("domain_loss: segment length " + std::to_string(L_c) + " exceeds sequence length " +
                         std::to_string(n));
    auto pooled = mean_over_rows(slice_rows(state, n - L_c, n));
    auto fed = reverse ? grad_reverse(pooled, eta) : pooled;
    return softmax_cross_entropy(probe.forward(fed), {y_direction > 0 ? 1 : 0});
}

// What the frozen model says the continuation should be.
struct ReconstructionTarget {
    std::vector<int> prompt;
    std::vector<int> output;  // teacher's greedy continuation
    Tensor soft;              // per-output-position teacher distribution, output.size() x V
    bool use_soft = false;

    std::vector<int> tokens() const {
        std::vector<int> t = prompt;
        t.insert(t.end(), output.begin(), output.end());
        return t;
    }
};

inline ReconstructionTarget make_reconstruction_target(const TinyLm& model, const std::vector<int>& prompt,
                                                       int max_new, bool soft = false) {
    if (max_new < 1) throw config_error("reconstruction target: need at least one output token");
    NoTapeScope mute;
    ReconstructionTarget t;
    t.prompt = prompt;
    const auto full = model.generate(prompt, max_new);
    t.output.assign(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), full.end());
    if (soft) {
        t.use_soft = true;
        const auto logits = model.forward(full);
        const int v = logits.cols();
        const int n_p = static_cast<int>(prompt.size());
        const int m = static_cast<int>(t.output.size());
        t.soft = Tensor({m, v});
        for (int i = 0; i < m; ++i) {
            const float* row = logits.data().data() + static_cast<std::size_t>(n_p - 1 + i) * v;
            float mx = row[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
            for (int j = 0; j < v; ++j)
                t.soft.data()[static_cast<std::size_t>(i) * v + j] =
                    static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / denom);
        }
    }
    return t;
}

// Cross-entropy of the student's next-token predictions against the teacher's
// continuation, evaluated at exactly the positions that predict it.
inline Tensor reconstruction_loss(const Tensor& student_logits, const ReconstructionTarget& target) {
    const int n_p = static_cast<int>(target.prompt.size());
    const int m = static_cast<int>(target.output.size());
    if (student_logits.rows() != n_p + m)
        throw std::invalid_argument("reconstruction: student logits have " + std::to_string(student_logits.rows()) +
                                    " rows for " + std::to_string(n_p + m) + " teacher tokens");
    auto predicting = slice_rows(student_logits, n_p - 1, n_p - 1 + m);
    if (target.use_soft) return softmax_cross_entropy_soft(predicting, target.soft);
    return softmax_cross_entropy(predicting, target.output);
}

inline Tensor total_loss(const Tensor& pre, const Tensor& debias, float alpha) {
    if (alpha < 0.0f) throw config_error("total_loss: alpha must be >= 0");
    return add(pre, scale(debias, alpha));
}

struct DebiasTrainConfig {
    float alpha = 0.1f;
    float eta = 1.0f;
    float lr = 1e-3f;
    int epochs = 30;
    int batch_size = 32;
    int rank = 16;
    int probe_hidden = 32;
    DebiasMode mode = DebiasMode::residual;
    bool soft_targets = false;
    int teacher_max_new = 4;
    std::uint64_t seed = 0;

    void validate() const {
        if (alpha < 0.0f) throw config_error("debias config: alpha must be >= 0");
        if (!(eta > 0.0f)) throw config_error("debias config: eta must be > 0");
        if (epochs < 1 || batch_size < 1 || rank < 1 || probe_hidden < 1 || teacher_max_new < 1)
            throw config_error("debias config: counts must be positive");
        if (!(lr > 0.0f)) throw config_error("debias config: lr must be > 0");
    }
};

inline std::vector<DebiasLoraBlock> make_debias_blocks(const LayerSelection& layers, int d,
                                                       const DebiasTrainConfig& cfg) {
    Rng rng(cfg.seed ^ 0xb10c5ULL);
    std::vector<DebiasLoraBlock> blocks;
    for (int l : layers.layers) blocks.push_back(DebiasLoraBlock::make(l, d, cfg.rank, cfg.mode, rng));
    return blocks;
}

struct DebiasEpochStat {
    float l_pre = 0.0f;
    float l_debias = 0.0f;
    float ext_probe_acc = 0.0f;
};

struct DebiasLog {
    std::vector<DebiasEpochStat> epochs;  // entry 0 is the pre-update state
    float recon_floor = 0.0f;             // teacher self-CE on its own greedy tokens
};

namespace detail {

struct DebiasExample {
    std::vector<int> prompt;
    int body_len = 0;
    int direction = 0;
    ReconstructionTarget target;
};

// One hooked pass per example; returns mean L_pre, mean L_debias, and the
// held-out accuracy of a fresh linear probe on the pooled semantic states
// (the worst layer counts).
inline DebiasEpochStat evaluate_debias(const TinyLm& model, const std::vector<DebiasLoraBlock>& blocks,
                                       const DomainProbe& probe, const std::vector<DebiasExample>& examples,
                                       float eta, std::uint64_t seed) {
    const auto hooks = make_debias_hooks(blocks);
    double pre_sum = 0.0, deb_sum = 0.0;
    std::vector<std::vector<std::vector<float>>> layer_reps(blocks.size());
    std::vector<int> labels;
    for (const auto& ex : examples) {
        NoTapeScope mute;
        auto [logits, trace] = model.forward_with_trace(ex.target.tokens(), hooks);
        pre_sum += reconstruction_loss(logits, ex.target).item();
        double deb = 0.0;
        const int n_prompt = static_cast<int>(ex.prompt.size());
        for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
            const Tensor& st = trace.state(blocks[bi].layer);
            // pool over the semantic segment of the prompt only
            auto prompt_rows = slice_rows(st, 0, n_prompt);
            deb += domain_loss(probe, prompt_rows, ex.body_len, ex.direction, eta).item();
            layer_reps[bi].push_back(pooled_mean(st, n_prompt - ex.body_len, n_prompt));
        }
        deb_sum += deb / static_cast<double>(blocks.size());
        labels.push_back(ex.direction > 0 ? 1 : 0);
    }
    DebiasEpochStat stat;
    stat.l_pre = static_cast<float>(pre_sum / static_cast<double>(examples.size()));
    stat.l_debias = static_cast<float>(deb_sum / static_cast<double>(examples.size()));
    float worst = 0.0f;
    for (const auto& reps : layer_reps)
        worst = std::max(worst, fit_probe_split(reps, labels, 200, 0.1f, seed).val_accuracy);
    stat.ext_probe_acc = worst;
    return stat;
}

}  // namespace detail

// Joint adversarial training of the blocks and the domain probe against the
// frozen model. The log's first entry describes the untouched starting point.
inline DebiasLog train_debias(TinyLm& model, std::vector<DebiasLoraBlock>& blocks, DomainProbe& probe,
                              const std::vector<SteeringPair>& pairs, const DebiasTrainConfig& cfg) {
    cfg.validate();
    if (pairs.empty()) throw data_error("train_debias: empty pair corpus");
    if (blocks.empty()) throw config_error("train_debias: no debias blocks");
    {
        std::vector<int> seen;
        for (const auto& b : blocks) {
            if (b.layer < 1 || b.layer > model.config().n_layers)
                throw config_error("train_debias: block layer " + std::to_string(b.layer) + " outside 1.." +
                                   std::to_string(model.config().n_layers));
            seen.push_back(b.layer);
        }
        std::sort(seen.begin(), seen.end());
        if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
            throw config_error("train_debias: duplicate block layers");
    }
    if (probe.input_dim() != model.config().d_model)
        throw config_error("train_debias: probe input " + std::to_string(probe.input_dim()) +
                           " does not match model width " + std::to_string(model.config().d_model));

    model.set_trainable(false);

    std::vector<detail::DebiasExample> examples;
    examples.reserve(pairs.size() * 2);
    for (const auto& pr : pairs) {
        for (const auto* p : {&pr.pos, &pr.neg}) {
            detail::DebiasExample ex;
            ex.prompt = p->tokens();
            ex.body_len = static_cast<int>(p->body.size());
            ex.direction = p->direction;
            ex.target = make_reconstruction_target(model, ex.prompt, cfg.teacher_max_new, cfg.soft_targets);
            examples.push_back(std::move(ex));
        }
    }

    DebiasLog log;
    {
        // identity-student floor: the frozen model scored on its own outputs
        double floor = 0.0;
        for (const auto& ex : examples) {
            NoTapeScope mute;
            floor += reconstruction_loss(model.forward(ex.target.tokens()), ex.target).item();
        }
        log.recon_floor = static_cast<float>(floor / static_cast<double>(examples.size()));
    }

    std::vector<Tensor> trainable;
    for (auto& b : blocks) {
        trainable.push_back(b.A);
        trainable.push_back(b.B);
    }
    for (auto& t : probe.params()) trainable.push_back(t);
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    Adam opt(trainable, acfg);

    log.epochs.push_back(detail::evaluate_debias(model, blocks, probe, examples, cfg.eta, cfg.seed));

    Rng shuffle_rng(cfg.seed ^ 0x5f1eULL);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    const auto hooks = make_debias_hooks(blocks);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Tape tape;
            TapeScope scope(tape);
            Tensor pre_sum, deb_sum;
            for (std::size_t i = start; i < stop; ++i) {
                const auto& ex = examples[order[i]];
                auto [logits, trace] = model.forward_with_trace(ex.target.tokens(), hooks);
                auto pre = reconstruction_loss(logits, ex.target);
                pre_sum = pre_sum.defined() ? add(pre_sum, pre) : pre;
                Tensor deb;
                const int n_prompt = static_cast<int>(ex.prompt.size());
                for (const auto& b : blocks) {
                    auto prompt_rows = slice_rows(trace.state(b.layer), 0, n_prompt);
                    auto dl = domain_loss(probe, prompt_rows, ex.body_len, ex.direction, cfg.eta);
                    deb = deb.defined() ? add(deb, dl) : dl;
                }
                deb = scale(deb, 1.0f / static_cast<float>(blocks.size()));
                deb_sum = deb_sum.defined() ? add(deb_sum, deb) : deb;
            }
            const float inv = 1.0f / static_cast<float>(stop - start);
            auto loss = total_loss(scale(pre_sum, inv), scale(deb_sum, inv), cfg.alpha);
            if (!std::isfinite(loss.item())) throw numeric_error("train_debias: non-finite loss");
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
        }
        log.epochs.push_back(detail::evaluate_debias(model, blocks, probe, examples, cfg.eta, cfg.seed));
    }
    return log;
}

// Fraction of teacher continuation tokens the hooked model reproduces under
// greedy decoding.
inline float teacher_agreement(const TinyLm& model, const std::vector<DebiasLoraBlock>& blocks,
                               const std::vector<ReconstructionTarget>& targets) {
    if (targets.empty()) throw data_error("teacher_agreement: no targets");
    const auto hooks = make_debias_hooks(blocks);
    int hits = 0, total = 0;
    for (const auto& t : targets) {
        const auto out = model.generate(t.prompt, static_cast<int>(t.output.size()), hooks);
        for (std::size_t i = 0; i < t.output.size(); ++i) {
            if (out.size() > t.prompt.size() + i && out[t.prompt.size() + i] == t.output[i]) ++hits;
            ++total;
        }
    }
    return static_cast<float>(hits) / static_cast<float>(total);
}

}  // namespace guardrail
