#pragma once

// Desk-scale decoder-only transformer with residual-stream taps. Every layer
// boundary can be rewritten through hooks, and a forward pass records the
// post-hook states r^0..r^D that downstream layers actually consumed.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "guardrail/common.hpp"
#include "guardrail/optim.hpp"
#include "guardrail/tensor.hpp"

namespace guardrail {

struct ModelConfig {
    int vocab_size = 256;
    int d_model = 64;
    int n_layers = 8;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 128;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0)
            throw config_error("model config: all dimensions must be positive");
        if (d_model % n_heads != 0)
            throw config_error("model config: d_model " + std::to_string(d_model) + " not divisible by " +
                               std::to_string(n_heads) + " heads");
        if (n_layers < 4)
            throw config_error("model config: need at least 4 layers for a meaningful layer range, got " +
                               std::to_string(n_layers));
    }
};

// Residual states r^0..r^D from one forward pass. r^0 is the embedding plus
// position output; r^l for l >= 1 is the state after block l's second residual
// add, after any hooks at that layer.
struct ActivationTrace {
    std::vector<Tensor> states;
    std::vector<int> tokens;

    const Tensor& state(int layer) const {
        if (layer < 0 || layer >= static_cast<int>(states.size()))
            throw std::out_of_range("trace layer " + std::to_string(layer) + " outside 0.." +
                                    std::to_string(states.size() - 1));
        return states[static_cast<std::size_t>(layer)];
    }
    int depth() const { return static_cast<int>(states.size()) - 1; }
};

// Passed to a rewrite function. `state` is r^layer as produced so far (prior
// hooks at the same layer included); `prev` is the post-hook r^{layer-1},
// which layer-1 debias blocks consume. At layer 0 `prev` is undefined.
struct HookContext {
    int layer;
    const Tensor& state;
    const Tensor& prev;
};

struct LayerRewriteHook {
    int layer = 0;
    std::function<Tensor(const HookContext&)> fn;
};

class TinyLm {
public:
    explicit TinyLm(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        const int d = cfg_.d_model;
        auto init = [&](Shape shape, float spread) {
            Tensor t(std::move(shape), 0.0f, true);
            for (auto& v : t.data()) v = rng.normal() * spread;
            return t;
        };
        const float w_spread = 1.0f / std::sqrt(static_cast<float>(d));
        tok_emb_ = init({cfg_.vocab_size, d}, 0.05f);
        pos_emb_ = init({cfg_.max_seq_len, d}, 0.05f);
        blocks_.resize(static_cast<std::size_t>(cfg_.n_layers));
        for (auto& b : blocks_) {
            b.ln1_g = Tensor({d}, 1.0f, true);
            b.ln1_b = Tensor({d}, 0.0f, true);
            b.wq = init({d, d}, w_spread);
            b.wk = init({d, d}, w_spread);
            b.wv = init({d, d}, w_spread);
            b.wo = init({d, d}, w_spread);
            b.ln2_g = Tensor({d}, 1.0f, true);
            b.ln2_b = Tensor({d}, 0.0f, true);
            b.w1 = init({d, cfg_.d_ff}, w_spread);
            b.b1 = Tensor({cfg_.d_ff}, 0.0f, true);
            b.w2 = init({cfg_.d_ff, d}, 1.0f / std::sqrt(static_cast<float>(cfg_.d_ff)));
            b.b2 = Tensor({d}, 0.0f, true);
        }
        lnf_g_ = Tensor({d}, 1.0f, true);
        lnf_b_ = Tensor({d}, 0.0f, true);
    }

    const ModelConfig& config() const { return cfg_; }

    // Stable name -> tensor listing; the checkpoint layout and optimizer both
    // iterate this order.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("tok_emb", tok_emb_);
        out.emplace_back("pos_emb", pos_emb_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& b = blocks_[i];
            const std::string p = "block" + std::to_string(i) + ".";
            out.emplace_back(p + "ln1.g", b.ln1_g);
            out.emplace_back(p + "ln1.b", b.ln1_b);
            out.emplace_back(p + "wq", b.wq);
            out.emplace_back(p + "wk", b.wk);
            out.emplace_back(p + "wv", b.wv);
            out.emplace_back(p + "wo", b.wo);
            out.emplace_back(p + "ln2.g", b.ln2_g);
            out.emplace_back(p + "ln2.b", b.ln2_b);
            out.emplace_back(p + "ffn.w1", b.w1);
            out.emplace_back(p + "ffn.b1", b.b1);
            out.emplace_back(p + "ffn.w2", b.w2);
            out.emplace_back(p + "ffn.b2", b.b2);
        }
        out.emplace_back("lnf.g", lnf_g_);
        out.emplace_back("lnf.b", lnf_b_);
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, t] : named_parameters()) {
            Tensor mut = t;
            mut.set_requires_grad(trainable);
        }
    }

    // One transformer block on an n x d state; `layer` is 1-based.
    Tensor block_forward(int layer, const Tensor& h) const {
        if (layer < 1 || layer > cfg_.n_layers)
            throw std::out_of_range("block_forward: layer " + std::to_string(layer) + " outside 1.." +
                                    std::to_string(cfg_.n_layers));
        const Block& b = blocks_[static_cast<std::size_t>(layer - 1)];
        const int hd = cfg_.d_model / cfg_.n_heads;
        const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));

        auto a_in = layer_norm(h, b.ln1_g, b.ln1_b);
        auto q = matmul(a_in, b.wq);
        auto k = matmul(a_in, b.wk);
        auto v = matmul(a_in, b.wv);
        std::vector<Tensor> heads;
        heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
        for (int i = 0; i < cfg_.n_heads; ++i) {
            auto qi = slice_cols(q, i * hd, (i + 1) * hd);
            auto ki = slice_cols(k, i * hd, (i + 1) * hd);
            auto vi = slice_cols(v, i * hd, (i + 1) * hd);
            auto att = causal_masked_softmax(scale(matmul_nt(qi, ki), att_scale));
            heads.push_back(matmul(att, vi));
        }
        auto h1 = add(h, matmul(concat_cols(heads), b.wo));

        auto f_in = layer_norm(h1, b.ln2_g, b.ln2_b);
        auto f = add_rowvec(matmul(gelu(add_rowvec(matmul(f_in, b.w1), b.b1)), b.w2), b.b2);
        return add(h1, f);
    }

    std::pair<Tensor, ActivationTrace> forward_with_trace(const std::vector<int>& tokens,
                                                          const std::vector<LayerRewriteHook>& hooks = {}) const {
        if (tokens.empty()) throw data_error("forward: empty token sequence");
        if (static_cast<int>(tokens.size()) > cfg_.max_seq_len)
            throw data_error("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max " +
                             std::to_string(cfg_.max_seq_len));
        for (const auto& hk : hooks) {
            if (hk.layer < 0 || hk.layer > cfg_.n_layers)
                throw config_error("hook layer " + std::to_string(hk.layer) + " outside 0.." +
                                   std::to_string(cfg_.n_layers));
            if (!hk.fn) throw config_error("hook at layer " + std::to_string(hk.layer) + " has no rewrite function");
        }
        const int n = static_cast<int>(tokens.size());

        ActivationTrace trace;
        trace.tokens = tokens;
        trace.states.reserve(static_cast<std::size_t>(cfg_.n_layers) + 1);

        auto r = add(embedding_lookup(tok_emb_, tokens), slice_rows(pos_emb_, 0, n));
        Tensor prev;  // undefined at layer 0
        r = apply_hooks(hooks, 0, r, prev);
        trace.states.push_back(r);
        for (int l = 1; l <= cfg_.n_layers; ++l) {
            prev = trace.states.back();
            auto h = block_forward(l, prev);
            h = apply_hooks(hooks, l, h, prev);
            trace.states.push_back(h);
        }
        auto logits = matmul_nt(layer_norm(trace.states.back(), lnf_g_, lnf_b_), tok_emb_);
        return {logits, std::move(trace)};
    }

    Tensor forward(const std::vector<int>& tokens) const { return forward_with_trace(tokens).first; }

    // Resumes the pass from a recorded r^layer: applies blocks layer+1..D and
    // the output head. With layer == D only the head runs.
    Tensor forward_from_layer(const Tensor& state, int layer) const {
        if (layer < 0 || layer > cfg_.n_layers)
            throw std::out_of_range("forward_from_layer: layer " + std::to_string(layer) + " outside 0.." +
                                    std::to_string(cfg_.n_layers));
        Tensor h = state;
        for (int l = layer + 1; l <= cfg_.n_layers; ++l) h = block_forward(l, h);
        return matmul_nt(layer_norm(h, lnf_g_, lnf_b_), tok_emb_);
    }

    std::vector<int> generate(std::vector<int> prompt, int max_new, const std::vector<LayerRewriteHook>& hooks = {},
                              float temperature = 0.0f, Rng* rng = nullptr) const {
        if (temperature < 0.0f) throw config_error("generate: temperature must be >= 0");
        if (temperature > 0.0f && rng == nullptr) throw config_error("generate: sampling needs a seeded rng");
        for (int step = 0; step < max_new; ++step) {
            if (static_cast<int>(prompt.size()) >= cfg_.max_seq_len) break;
            NoTapeScope mute;
            auto logits = forward_with_trace(prompt, hooks).first;
            const int v = cfg_.vocab_size;
            const float* row = logits.data().data() + static_cast<std::size_t>(logits.rows() - 1) * v;
            int next = 0;
            if (temperature == 0.0f) {
                for (int j = 1; j < v; ++j)
                    if (row[j] > row[next]) next = j;
            } else {
                float mx = row[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                std::vector<double> p(static_cast<std::size_t>(v));
                double denom = 0.0;
                for (int j = 0; j < v; ++j) {
                    p[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(row[j] - mx) / temperature);
                    denom += p[static_cast<std::size_t>(j)];
                }
                double u = static_cast<double>(rng->uniform()) * denom;
                double acc = 0.0;
                next = v - 1;
                for (int j = 0; j < v; ++j) {
                    acc += p[static_cast<std::size_t>(j)];
                    if (u < acc) {
                        next = j;
                        break;
                    }
                }
            }
            prompt.push_back(next);
        }
        return prompt;
    }

private:
    struct Block {
        Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    static Tensor apply_hooks(const std::vector<LayerRewriteHook>& hooks, int layer, Tensor state, const Tensor& prev) {
        for (const auto& hk : hooks) {
            if (hk.layer != layer) continue;
            Tensor next = hk.fn(HookContext{layer, state, prev});
            if (next.shape() != state.shape())
                throw config_error("hook at layer " + std::to_string(layer) + " changed shape " +
                                   shape_str(state.shape()) + " to " + shape_str(next.shape()));
            state = std::move(next);
        }
        return state;
    }

    ModelConfig cfg_;
    Tensor tok_emb_, pos_emb_;
    std::vector<Block> blocks_;
    Tensor lnf_g_, lnf_b_;
};

struct TrainLog {
    std::vector<float> epoch_loss;
};

// Next-token training over full sequences. Each Adam step averages the
// per-sequence cross-entropies of one shuffled batch.
inline TrainLog train_lm(TinyLm& model, const std::vector<std::vector<int>>& sequences, int epochs, float lr,
                         int batch_size = 16) {
    if (sequences.empty()) throw data_error("train_lm: empty corpus");
    for (const auto& s : sequences)
        if (s.size() < 2) throw data_error("train_lm: sequence shorter than 2 tokens");
    AdamConfig acfg;
    acfg.lr = lr;
    Adam opt(model.parameters(), acfg);
    Rng shuffle_rng(model.config().seed ^ 0x5eedf00dULL);
    std::vector<std::size_t> order(sequences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainLog log;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
            Tape tape;
            Tensor batch_loss;
            {
                TapeScope scope(tape);
                for (std::size_t i = start; i < stop; ++i) {
                    const auto& seq = sequences[order[i]];
                    std::vector<int> input(seq.begin(), seq.end() - 1);
                    std::vector<int> target(seq.begin() + 1, seq.end());
                    auto loss = softmax_cross_entropy(model.forward(input), target);
                    batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
                }
                batch_loss = scale(batch_loss, 1.0f / static_cast<float>(stop - start));
                opt.zero_grad();
                tape.backward(batch_loss);
            }
            if (!std::isfinite(batch_loss.item())) throw numeric_error("train_lm: non-finite loss");
            if (lr != 0.0f) opt.step();
            epoch_sum += static_cast<double>(batch_loss.item()) * static_cast<double>(stop - start);
            seen += stop - start;
        }
        log.epoch_loss.push_back(static_cast<float>(epoch_sum / static_cast<double>(seen)));
    }
    return log;
}

}  // namespace guardrail
