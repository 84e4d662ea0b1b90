#pragma once

// End-to-end orchestration. One JSON config describes every stage; the
// pipeline runs pretrain, bias audit, layer selection, debias training,
// representation extraction, and evaluation in order, writing each stage's
// artifact into the output directory. Stages are cached: a stage reruns only
// when its config section, the global seed, or an upstream artifact changed,
// keyed by a content hash that ignores config whitespace. The same config and
// seed always reproduce byte-identical artifacts.

#include <guardrail/checkpoint.hpp>
#include <guardrail/common.hpp>
#include <guardrail/corpus.hpp>
#include <guardrail/debias.hpp>
#include <guardrail/explain.hpp>
#include <guardrail/model.hpp>
#include <guardrail/probing.hpp>
#include <guardrail/steering.hpp>
#include <guardrail/tensor.hpp>

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace guardrail {

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw config_error("config section '" + section + "' must be an object");
    for (const auto& [key, unused] : j.items()) {
        bool known = false;
        for (const char* k : keys)
            if (key == k) known = true;
        if (!known) throw config_error("config section '" + section + "': unknown key '" + key + "'");
    }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& field) {
    if (j.contains(key)) {
        try {
            field = j.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw config_error(std::string("config key '") + key + "' has the wrong type");
        }
    }
}

}  // namespace detail

struct PretrainConfig {
    int n_records = 2000;
    int epochs = 8;
    float lr = 2e-3f;
    int batch_size = 16;
};

struct AuditStageConfig {
    int n_prompts = 200;
    int n_pairs = 64;  // steered pairs that train the audit probe
};

struct SelectStageConfig {
    int n_pairs = 64;
    int top_k = 0;  // 0 picks ceil(depth / 4)
    bool middle = false;
};

struct DebiasStageConfig {
    DebiasTrainConfig train;
    int n_pairs = 64;
};

struct ExtractStageConfig {
    int n_pairs = 32;
    bool semantic_only = false;
};

struct EvalStageConfig {
    int n_prompts = 100;
    float beta = 2.0f;
    std::string op = "projection";
    std::vector<float> betas = {-2.0f, -1.0f, 0.0f, 1.0f, 2.0f};
    std::string topics = "positive";  // positive | negative | all
    int classifier_records = 400;
    int max_new = 4;
    int agreement_prompts = 32;
};

struct PipelineConfig {
    std::uint64_t seed = 42;
    ModelConfig model;
    ConfoundSpec corpus;
    PretrainConfig pretrain;
    AuditStageConfig audit;
    SelectStageConfig select;
    DebiasStageConfig debias;
    ExtractStageConfig extract;
    EvalStageConfig eval;

    int resolved_top_k() const { return select.top_k > 0 ? select.top_k : (model.n_layers + 3) / 4; }

    void validate() const {
        model.validate();
        corpus.validate();
        if (pretrain.n_records < 1 || pretrain.epochs < 1 || pretrain.batch_size < 1)
            throw config_error("pretrain config: counts must be positive");
        if (audit.n_prompts < 1 || audit.n_pairs < 1) throw config_error("audit config: counts must be positive");
        if (select.n_pairs < 3) throw config_error("select config: need at least 3 pairs to split");
        if (select.top_k < 0 || select.top_k > model.n_layers)
            throw config_error("select config: top_k outside 0.." + std::to_string(model.n_layers));
        if (debias.n_pairs < 1) throw config_error("debias config: n_pairs must be positive");
        if (extract.n_pairs < 1) throw config_error("extract config: n_pairs must be positive");
        if (eval.n_prompts < 1 || eval.classifier_records < 10 || eval.max_new < 1 || eval.agreement_prompts < 1)
            throw config_error("eval config: counts must be positive");
        if (eval.betas.empty()) throw config_error("eval config: betas list is empty");
        if (eval.topics != "positive" && eval.topics != "negative" && eval.topics != "all")
            throw config_error("eval config: topics must be positive|negative|all");
        op_from_name(eval.op);
        DebiasTrainConfig probe_check = debias.train;
        probe_check.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["model"] = {{"vocab_size", model.vocab_size}, {"d_model", model.d_model},   {"n_layers", model.n_layers},
                      {"n_heads", model.n_heads},       {"d_ff", model.d_ff},         {"max_seq_len", model.max_seq_len}};
        j["corpus"] = {{"n_topics", corpus.n_topics},       {"n_pos_words", corpus.n_pos_words},
                       {"n_neg_words", corpus.n_neg_words}, {"bias_strength", corpus.bias_strength},
                       {"body_len", corpus.body_len},       {"cont_len", corpus.cont_len}};
        j["pretrain"] = {{"n_records", pretrain.n_records},
                         {"epochs", pretrain.epochs},
                         {"lr", pretrain.lr},
                         {"batch_size", pretrain.batch_size}};
        j["audit"] = {{"n_prompts", audit.n_prompts}, {"n_pairs", audit.n_pairs}};
        j["select"] = {{"n_pairs", select.n_pairs}, {"top_k", select.top_k}, {"middle", select.middle}};
        j["debias"] = {{"alpha", debias.train.alpha},
                       {"eta", debias.train.eta},
                       {"lr", debias.train.lr},
                       {"epochs", debias.train.epochs},
                       {"batch_size", debias.train.batch_size},
                       {"rank", debias.train.rank},
                       {"probe_hidden", debias.train.probe_hidden},
                       {"mode", mode_name(debias.train.mode)},
                       {"soft_targets", debias.train.soft_targets},
                       {"teacher_max_new", debias.train.teacher_max_new},
                       {"n_pairs", debias.n_pairs}};
        j["extract"] = {{"n_pairs", extract.n_pairs}, {"semantic_only", extract.semantic_only}};
        j["eval"] = {{"n_prompts", eval.n_prompts},
                     {"beta", eval.beta},
                     {"operator", eval.op},
                     {"betas", eval.betas},
                     {"topics", eval.topics},
                     {"classifier_records", eval.classifier_records},
                     {"max_new", eval.max_new},
                     {"agreement_prompts", eval.agreement_prompts}};
        return j;
    }

    static PipelineConfig from_json(const nlohmann::json& j) {
        detail::check_keys(j, "top level",
                           {"seed", "model", "corpus", "pretrain", "audit", "select", "debias", "extract", "eval"});
        PipelineConfig cfg;
        detail::maybe(j, "seed", cfg.seed);
        if (j.contains("model")) {
            const auto& m = j.at("model");
            detail::check_keys(m, "model", {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"});
            detail::maybe(m, "vocab_size", cfg.model.vocab_size);
            detail::maybe(m, "d_model", cfg.model.d_model);
            detail::maybe(m, "n_layers", cfg.model.n_layers);
            detail::maybe(m, "n_heads", cfg.model.n_heads);
            detail::maybe(m, "d_ff", cfg.model.d_ff);
            detail::maybe(m, "max_seq_len", cfg.model.max_seq_len);
        }
        if (j.contains("corpus")) {
            const auto& c = j.at("corpus");
            detail::check_keys(c, "corpus",
                               {"n_topics", "n_pos_words", "n_neg_words", "bias_strength", "body_len", "cont_len"});
            detail::maybe(c, "n_topics", cfg.corpus.n_topics);
            detail::maybe(c, "n_pos_words", cfg.corpus.n_pos_words);
            detail::maybe(c, "n_neg_words", cfg.corpus.n_neg_words);
            detail::maybe(c, "bias_strength", cfg.corpus.bias_strength);
            detail::maybe(c, "body_len", cfg.corpus.body_len);
            detail::maybe(c, "cont_len", cfg.corpus.cont_len);
        }
        if (j.contains("pretrain")) {
            const auto& p = j.at("pretrain");
            detail::check_keys(p, "pretrain", {"n_records", "epochs", "lr", "batch_size"});
            detail::maybe(p, "n_records", cfg.pretrain.n_records);
            detail::maybe(p, "epochs", cfg.pretrain.epochs);
            detail::maybe(p, "lr", cfg.pretrain.lr);
            detail::maybe(p, "batch_size", cfg.pretrain.batch_size);
        }
        if (j.contains("audit")) {
            const auto& a = j.at("audit");
            detail::check_keys(a, "audit", {"n_prompts", "n_pairs"});
            detail::maybe(a, "n_prompts", cfg.audit.n_prompts);
            detail::maybe(a, "n_pairs", cfg.audit.n_pairs);
        }
        if (j.contains("select")) {
            const auto& s = j.at("select");
            detail::check_keys(s, "select", {"n_pairs", "top_k", "middle"});
            detail::maybe(s, "n_pairs", cfg.select.n_pairs);
            detail::maybe(s, "top_k", cfg.select.top_k);
            detail::maybe(s, "middle", cfg.select.middle);
        }
        if (j.contains("debias")) {
            const auto& d = j.at("debias");
            detail::check_keys(d, "debias",
                               {"alpha", "eta", "lr", "epochs", "batch_size", "rank", "probe_hidden", "mode",
                                "soft_targets", "teacher_max_new", "n_pairs"});
            detail::maybe(d, "alpha", cfg.debias.train.alpha);
            detail::maybe(d, "eta", cfg.debias.train.eta);
            detail::maybe(d, "lr", cfg.debias.train.lr);
            detail::maybe(d, "epochs", cfg.debias.train.epochs);
            detail::maybe(d, "batch_size", cfg.debias.train.batch_size);
            detail::maybe(d, "rank", cfg.debias.train.rank);
            detail::maybe(d, "probe_hidden", cfg.debias.train.probe_hidden);
            if (d.contains("mode")) cfg.debias.train.mode = mode_from_name(d.at("mode").get<std::string>());
            detail::maybe(d, "soft_targets", cfg.debias.train.soft_targets);
            detail::maybe(d, "teacher_max_new", cfg.debias.train.teacher_max_new);
            detail::maybe(d, "n_pairs", cfg.debias.n_pairs);
        }
        if (j.contains("extract")) {
            const auto& e = j.at("extract");
            detail::check_keys(e, "extract", {"n_pairs", "semantic_only"});
            detail::maybe(e, "n_pairs", cfg.extract.n_pairs);
            detail::maybe(e, "semantic_only", cfg.extract.semantic_only);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            detail::check_keys(e, "eval",
                               {"n_prompts", "beta", "operator", "betas", "topics", "classifier_records", "max_new",
                                "agreement_prompts"});
            detail::maybe(e, "n_prompts", cfg.eval.n_prompts);
            detail::maybe(e, "beta", cfg.eval.beta);
            detail::maybe(e, "operator", cfg.eval.op);
            detail::maybe(e, "betas", cfg.eval.betas);
            detail::maybe(e, "topics", cfg.eval.topics);
            detail::maybe(e, "classifier_records", cfg.eval.classifier_records);
            detail::maybe(e, "max_new", cfg.eval.max_new);
            detail::maybe(e, "agreement_prompts", cfg.eval.agreement_prompts);
        }
        cfg.validate();
        return cfg;
    }
};

inline PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("config " + path + ": cannot open");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw config_error("config " + path + ": " + e.what());
    }
    return PipelineConfig::from_json(j);
}

namespace detail {

inline bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open " + path + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw data_error("write failed for " + path);
}

inline std::string file_hash(const std::string& path) {
    auto bytes = read_text(path);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

inline std::string format_float(float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

}  // namespace detail

// Evaluation classifier: a logistic probe over final-layer mean-pooled states
// of labeled continuations, the desk-scale stand-in for an external judge.
struct AttributeClassifier {
    LinearProbe probe;
};

inline AttributeClassifier train_attribute_classifier(const TinyLm& model, const ConfoundSpec& spec, int n_records,
                                                      std::uint64_t seed) {
    auto records = gen_pretrain_corpus(spec, n_records, seed);
    std::vector<std::vector<float>> reps;
    std::vector<int> labels;
    NoTapeScope mute;
    for (const auto& rec : records) {
        auto seq = full_sequence(rec);
        int n_prompt = static_cast<int>(rec.prompt.tokens().size());
        auto trace = model.forward_with_trace(seq).second;
        reps.push_back(pooled_mean(trace.state(model.config().n_layers), n_prompt, static_cast<int>(seq.size())));
        labels.push_back(rec.label > 0 ? 1 : 0);
    }
    AttributeClassifier cls;
    cls.probe = fit_probe(reps, labels);
    cls.probe.layer = model.config().n_layers;
    return cls;
}

struct BetaPoint {
    float beta = 0.0f;
    float rate = 0.0f;
};

struct EvalResult {
    float attribute_rate = 0.0f;
    std::optional<float> teacher_agreement;
    std::vector<BetaPoint> curve;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["attribute_rate"] = attribute_rate;
        if (teacher_agreement)
            j["teacher_agreement"] = *teacher_agreement;
        else
            j["teacher_agreement"] = nullptr;
        auto pts = nlohmann::json::array();
        for (const auto& p : curve) pts.push_back({{"beta", p.beta}, {"rate", p.rate}});
        j["curve"] = pts;
        return j;
    }
};

// Generates greedily from every prompt under the given hooks, then classifies
// each continuation on the raw model. Classifying raw states keeps the
// measurement about the produced tokens rather than the injected offsets.
inline EvalResult eval_attribute_rate(const TinyLm& model, const std::vector<LayerRewriteHook>& hooks,
                                      const std::vector<std::vector<int>>& prompts,
                                      const AttributeClassifier& classifier, int max_new) {
    if (prompts.empty()) throw data_error("eval: empty prompt set");
    if (max_new < 1) throw config_error("eval: need at least one generated token");
    int positive = 0;
    for (const auto& p : prompts) {
        auto seq = model.generate(p, max_new, hooks);
        if (seq.size() == p.size()) throw data_error("eval: prompt leaves no room to generate");
        NoTapeScope mute;
        auto trace = model.forward_with_trace(seq).second;
        auto rep = pooled_mean(trace.state(model.config().n_layers), static_cast<int>(p.size()),
                               static_cast<int>(seq.size()));
        if (classifier.probe.predict(rep) == 1) ++positive;
    }
    EvalResult result;
    result.attribute_rate = static_cast<float>(positive) / static_cast<float>(prompts.size());
    return result;
}

// Pooled per-prompt states at one layer with their labels, as CSV.
inline void dump_representations(const TinyLm& model, const std::vector<std::vector<int>>& prompts,
                                 const std::vector<int>& labels, int layer, const std::string& path) {
    if (prompts.size() != labels.size())
        throw data_error("dump: " + std::to_string(prompts.size()) + " prompts but " + std::to_string(labels.size()) +
                         " labels");
    if (layer < 0 || layer > model.config().n_layers)
        throw config_error("dump: layer " + std::to_string(layer) + " outside 0.." +
                           std::to_string(model.config().n_layers));
    std::string text = "label";
    for (int j = 0; j < model.config().d_model; ++j) text += ",x" + std::to_string(j);
    text += "\n";
    NoTapeScope mute;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        auto trace = model.forward_with_trace(prompts[i]).second;
        auto rep = pooled_mean(trace.state(layer), 0, static_cast<int>(prompts[i].size()));
        text += std::to_string(labels[i]);
        for (float v : rep) text += "," + detail::format_float(v);
        text += "\n";
    }
    detail::write_text(path, text);
}

struct StageOutcome {
    std::string name;
    bool cached = false;
    std::string artifact;
};

class Pipeline {
public:
    Pipeline(PipelineConfig cfg, std::string out_dir) : cfg_(std::move(cfg)), dir_(std::move(out_dir)) {
        cfg_.validate();
        if (dir_.empty()) throw config_error("pipeline needs an output directory");
        std::filesystem::create_directories(dir_);
    }

    const PipelineConfig& config() const { return cfg_; }
    const std::vector<StageOutcome>& outcomes() const { return log_; }

    std::string model_path() const { return path("model.bin"); }
    std::string audit_path() const { return path("audit.json"); }
    std::string layers_path() const { return path("layers.json"); }
    std::string debias_path() const { return path("debias.bin"); }
    std::string rep_path() const { return path("rep.bin"); }
    std::string actadd_path() const { return path("actadd.bin"); }
    std::string eval_path() const { return path("eval.json"); }

    std::string pretrain() {
        nlohmann::json inputs = base_inputs("pretrain");
        inputs["config"] = {{"model", cfg_.to_json()["model"]},
                            {"corpus", cfg_.to_json()["corpus"]},
                            {"pretrain", cfg_.to_json()["pretrain"]}};
        return stage("pretrain", {model_path(), path("pretrain_log.json")}, inputs, [&] {
            ModelConfig mc = cfg_.model;
            mc.seed = cfg_.seed;
            auto records = gen_pretrain_corpus(cfg_.corpus, cfg_.pretrain.n_records, stage_seed("corpus.pretrain"));
            std::vector<std::vector<int>> seqs;
            seqs.reserve(records.size());
            for (const auto& rec : records) seqs.push_back(full_sequence(rec));
            TinyLm model(mc);
            auto log = train_lm(model, seqs, cfg_.pretrain.epochs, cfg_.pretrain.lr, cfg_.pretrain.batch_size);
            save_model_checkpoint(model_path(), model);
            nlohmann::json jl;
            jl["epoch_loss"] = log.epoch_loss;
            detail::write_text(path("pretrain_log.json"), jl.dump(2) + "\n");
        });
    }

    std::string audit_bias() {
        require(model_path(), "pretrain");
        nlohmann::json inputs = base_inputs("audit-bias");
        inputs["config"] = {{"audit", cfg_.to_json()["audit"]}, {"corpus", cfg_.to_json()["corpus"]}};
        inputs["deps"] = {{"model", detail::file_hash(model_path())}};
        return stage("audit-bias", {audit_path()}, inputs, [&] {
            auto model = load_model_checkpoint(model_path());
            auto pairs = gen_steering_pairs(cfg_.corpus, cfg_.audit.n_pairs, stage_seed("corpus.audit_pairs"));
            auto probe = fit_audit_probe(model, pairs, model.config().n_layers);
            auto prompts = gen_neutral_prompts(cfg_.corpus, cfg_.audit.n_prompts, stage_seed("corpus.audit_prompts"));
            auto report = audit_semantic_bias(model, prompts, probe);
            detail::write_text(audit_path(), report.to_json().dump(2) + "\n");
        });
    }

    std::string select_layers() {
        require(model_path(), "pretrain");
        nlohmann::json inputs = base_inputs("select-layers");
        inputs["config"] = {{"select", cfg_.to_json()["select"]}, {"corpus", cfg_.to_json()["corpus"]}};
        inputs["deps"] = {{"model", detail::file_hash(model_path())}};
        return stage("select-layers", {layers_path()}, inputs, [&] {
            auto model = load_model_checkpoint(model_path());
            auto pairs = gen_steering_pairs(cfg_.corpus, cfg_.select.n_pairs, stage_seed("corpus.select"));
            std::vector<SegmentedPrompt> prompts;
            prompts.reserve(pairs.size() * 2);
            for (const auto& pr : pairs) {
                prompts.push_back(pr.pos);
                prompts.push_back(pr.neg);
            }
            auto report = rank_layers(model, prompts, 200, 0.1f, stage_seed("probe.select"));
            LayerSelection sel = cfg_.select.middle ? select_middle(model.config().n_layers, cfg_.resolved_top_k())
                                                    : select_top_k(report, cfg_.resolved_top_k());
            nlohmann::json j;
            j["selection"] = sel.to_json();
            j["layer_accuracy"] = report.accuracy;
            detail::write_text(layers_path(), j.dump(2) + "\n");
        });
    }

    std::string train_debias_blocks() {
        require(model_path(), "pretrain");
        require(layers_path(), "select-layers");
        nlohmann::json inputs = base_inputs("train-debias");
        inputs["config"] = {{"debias", cfg_.to_json()["debias"]}, {"corpus", cfg_.to_json()["corpus"]}};
        inputs["deps"] = {{"model", detail::file_hash(model_path())},
                          {"layers", detail::file_hash(layers_path())}};
        return stage("train-debias", {debias_path(), path("debias_log.json")}, inputs, [&] {
            auto model = load_model_checkpoint(model_path());
            LayerSelection sel = load_selection();
            auto pairs = gen_steering_pairs(cfg_.corpus, cfg_.debias.n_pairs, stage_seed("corpus.debias"));
            DebiasTrainConfig tc = cfg_.debias.train;
            tc.seed = stage_seed("debias.train");
            auto blocks = make_debias_blocks(sel, model.config().d_model, tc);
            Rng prng(stage_seed("debias.probe"));
            auto probe = DomainProbe::make(model.config().d_model, tc.probe_hidden, prng);
            auto dlog = train_debias(model, blocks, probe, pairs, tc);
            save_debias_checkpoint(debias_path(), blocks, probe, model_fingerprint(model));
            nlohmann::json j;
            j["recon_floor"] = dlog.recon_floor;
            auto rows = nlohmann::json::array();
            for (const auto& e : dlog.epochs)
                rows.push_back({{"l_pre", e.l_pre}, {"l_debias", e.l_debias}, {"ext_probe_acc", e.ext_probe_acc}});
            j["epochs"] = rows;
            detail::write_text(path("debias_log.json"), j.dump(2) + "\n");
        });
    }

    std::string extract_representation() {
        require(model_path(), "pretrain");
        require(debias_path(), "train-debias");
        nlohmann::json inputs = base_inputs("extract");
        inputs["config"] = {{"extract", cfg_.to_json()["extract"]}, {"corpus", cfg_.to_json()["corpus"]}};
        inputs["deps"] = {{"model", detail::file_hash(model_path())},
                          {"debias", detail::file_hash(debias_path())}};
        return stage("extract", {rep_path(), actadd_path()}, inputs, [&] {
            auto model = load_model_checkpoint(model_path());
            auto art = load_debias_checkpoint(debias_path());
            std::string hash = model_fingerprint(model);
            if (art.model_hash != hash)
                throw data_error("debias artifacts were trained on a different model (hash " + art.model_hash +
                                 " vs " + hash + ")");
            auto pairs = gen_steering_pairs(cfg_.corpus, cfg_.extract.n_pairs, stage_seed("corpus.extract"));
            auto rep = extract_steering(model, art.blocks, pairs, cfg_.extract.semantic_only);
            save_representation(rep_path(), rep, hash);
            std::vector<int> layers;
            for (const auto& b : art.blocks) layers.push_back(b.layer);
            auto base = baseline_actadd(model, pairs.front(), layers, cfg_.extract.semantic_only);
            save_representation(actadd_path(), base, hash);
        });
    }

    std::string evaluate() {
        require(model_path(), "pretrain");
        require(debias_path(), "train-debias");
        require(rep_path(), "extract");
        require(actadd_path(), "extract");
        nlohmann::json inputs = base_inputs("eval");
        inputs["config"] = {{"eval", cfg_.to_json()["eval"]}, {"corpus", cfg_.to_json()["corpus"]}};
        inputs["deps"] = {{"model", detail::file_hash(model_path())},
                          {"debias", detail::file_hash(debias_path())},
                          {"rep", detail::file_hash(rep_path())},
                          {"actadd", detail::file_hash(actadd_path())}};
        return stage("eval", {eval_path()}, inputs, [&] {
            auto model = load_model_checkpoint(model_path());
            std::string rep_hash;
            auto rep = load_representation(rep_path(), &rep_hash);
            auto base = load_representation(actadd_path());
            auto art = load_debias_checkpoint(debias_path());
            std::string hash = model_fingerprint(model);
            if (rep_hash != hash)
                throw data_error("steering representation was extracted from a different model (hash " + rep_hash +
                                 " vs " + hash + ")");

            auto classifier = train_attribute_classifier(model, cfg_.corpus, cfg_.eval.classifier_records,
                                                         stage_seed("corpus.classifier"));
            auto prompts = eval_prompts();
            SteerOp op = op_from_name(cfg_.eval.op);

            auto rate_for = [&](const SteeringRepresentation& r, float beta, SteerOp o) {
                ControlConfig cc;
                cc.beta = beta;
                cc.op = o;
                auto hooks = make_steering_hooks(r, cc, model.config());
                return eval_attribute_rate(model, hooks, prompts, classifier, cfg_.eval.max_new).attribute_rate;
            };

            EvalResult result;
            result.attribute_rate = rate_for(rep, cfg_.eval.beta, op);
            for (float b : cfg_.eval.betas) result.curve.push_back({b, rate_for(rep, b, op)});

            auto agree_pairs =
                gen_steering_pairs(cfg_.corpus, cfg_.eval.agreement_prompts, stage_seed("corpus.agreement"));
            std::vector<ReconstructionTarget> targets;
            for (const auto& pr : agree_pairs)
                targets.push_back(make_reconstruction_target(model, pr.pos.tokens(), cfg_.eval.max_new));
            result.teacher_agreement = teacher_agreement(model, art.blocks, targets);

            nlohmann::json j = result.to_json();
            j["unsteered_rate"] =
                eval_attribute_rate(model, {}, prompts, classifier, cfg_.eval.max_new).attribute_rate;
            j["operators"] = {{"projection", rate_for(rep, cfg_.eval.beta, SteerOp::projection)},
                              {"addition", rate_for(rep, cfg_.eval.beta, SteerOp::addition)},
                              {"product", rate_for(rep, cfg_.eval.beta, SteerOp::product)}};
            j["baseline_actadd_rate"] = rate_for(base, cfg_.eval.beta, op);
            j["beta"] = cfg_.eval.beta;
            j["operator"] = cfg_.eval.op;
            j["n_prompts"] = prompts.size();
            detail::write_text(eval_path(), j.dump(2) + "\n");
        });
    }

    std::vector<StageOutcome> run_all() {
        pretrain();
        audit_bias();
        select_layers();
        train_debias_blocks();
        extract_representation();
        evaluate();
        return log_;
    }

    // Bodies used by the CLI outside the cached stages.
    LayerSelection load_selection() const {
        auto j = parse_artifact(layers_path());
        LayerSelection sel;
        try {
            sel.layers = j.at("selection").at("layers").get<std::vector<int>>();
        } catch (const nlohmann::json::exception& e) {
            throw data_error("artifact " + layers_path() + ": " + e.what());
        }
        return sel;
    }

    std::vector<std::vector<int>> eval_prompts() const {
        int want = cfg_.eval.n_prompts;
        std::vector<std::vector<int>> out;
        std::uint64_t salt = 0;
        while (static_cast<int>(out.size()) < want) {
            auto batch =
                gen_neutral_prompts(cfg_.corpus, want * 2, stage_seed("corpus.eval_prompts") + salt);
            for (const auto& p : batch) {
                if (static_cast<int>(out.size()) >= want) break;
                if (cfg_.eval.topics == "positive" && topic_direction(p.topic) != 1) continue;
                if (cfg_.eval.topics == "negative" && topic_direction(p.topic) != -1) continue;
                out.push_back(p.body);
            }
            ++salt;
        }
        return out;
    }

private:
    PipelineConfig cfg_;
    std::string dir_;
    std::vector<StageOutcome> log_;

    std::string path(const char* name) const { return dir_ + "/" + name; }

    std::uint64_t stage_seed(const char* purpose) const { return cfg_.seed ^ fnv1a64(purpose); }

    nlohmann::json base_inputs(const char* name) const {
        nlohmann::json j;
        j["stage"] = name;
        j["seed"] = cfg_.seed;
        return j;
    }

    void require(const std::string& artifact, const char* producer) const {
        if (!detail::file_exists(artifact))
            throw data_error("missing artifact " + artifact + ", run the " + std::string(producer) + " stage first");
    }

    nlohmann::json parse_artifact(const std::string& p) const {
        try {
            return nlohmann::json::parse(detail::read_text(p));
        } catch (const nlohmann::json::exception& e) {
            throw data_error("artifact " + p + ": " + e.what());
        }
    }

    template <class Fn>
    std::string stage(const char* name, const std::vector<std::string>& outputs, const nlohmann::json& inputs,
                      Fn&& body) {
        const std::string primary = outputs.front();
        const std::string stamp_path = primary + ".stamp";
        const std::string hash = hex64(fnv1a64(inputs.dump()));
        bool fresh = detail::file_exists(stamp_path);
        if (fresh) fresh = detail::read_text(stamp_path) == hash + "\n";
        for (const auto& o : outputs) fresh = fresh && detail::file_exists(o);
        if (fresh) {
            log_.push_back({name, true, primary});
            return primary;
        }
        try {
            body();
        } catch (const config_error& e) {
            throw config_error(std::string(name) + ": " + e.what());
        } catch (const data_error& e) {
            throw data_error(std::string(name) + ": " + e.what());
        } catch (const numeric_error& e) {
            throw numeric_error(std::string(name) + ": " + e.what());
        }
        for (const auto& o : outputs)
            if (!detail::file_exists(o))
                throw data_error(std::string(name) + " did not produce its artifact " + o);
        detail::write_text(stamp_path, hash + "\n");
        log_.push_back({name, false, primary});
        return primary;
    }
};

}  // namespace guardrail
