#pragma once

// Binary artifact container. A checkpoint file is an 8-byte magic, a little
// endian u64 manifest length, the JSON manifest, and a blob of raw float32
// tensor data. The manifest carries a free-form meta section plus a content
// table whose entries tile the blob exactly, in order, with no gaps. Loading
// and re-saving a file reproduces it byte for byte.

#include <guardrail/common.hpp>
#include <guardrail/debias.hpp>
#include <guardrail/model.hpp>
#include <guardrail/probing.hpp>
#include <guardrail/steering.hpp>
#include <guardrail/tensor.hpp>

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace guardrail {

inline constexpr char kCheckpointMagic[9] = "GRDCKPT1";

class Checkpoint {
public:
    nlohmann::json meta;

    void add(const std::string& name, const Tensor& t) {
        if (name.empty()) throw config_error("checkpoint section needs a name");
        for (const auto& [existing, unused] : tensors_)
            if (existing == name) throw config_error("checkpoint already has a section '" + name + "'");
        if (!t.defined()) throw config_error("checkpoint section '" + name + "' holds no tensor");
        tensors_.emplace_back(name, t);
    }

    bool has(const std::string& name) const {
        for (const auto& [existing, unused] : tensors_)
            if (existing == name) return true;
        return false;
    }

    const Tensor& tensor(const std::string& name) const {
        for (const auto& [existing, t] : tensors_)
            if (existing == name) return t;
        throw data_error("checkpoint has no section '" + name + "'");
    }

    const std::vector<std::pair<std::string, Tensor>>& sections() const { return tensors_; }

    void save(const std::string& path) const {
        nlohmann::json manifest;
        manifest["meta"] = meta;
        auto table = nlohmann::json::array();
        std::uint64_t offset = 0;
        for (const auto& [name, t] : tensors_) {
            std::uint64_t len = t.data().size() * sizeof(float);
            table.push_back({{"len", len}, {"name", name}, {"off", offset}, {"shape", t.shape()}});
            offset += len;
        }
        manifest["tensors"] = table;
        std::string text = manifest.dump();

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw data_error("checkpoint " + path + ": cannot open for writing");
        out.write(kCheckpointMagic, 8);
        std::uint64_t mlen = text.size();
        char lenbuf[8];
        for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((mlen >> (8 * i)) & 0xff);
        out.write(lenbuf, 8);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, t] : tensors_)
            out.write(reinterpret_cast<const char*>(t.data().data()),
                      static_cast<std::streamsize>(t.data().size() * sizeof(float)));
        if (!out) throw data_error("checkpoint " + path + ": write failed");
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw data_error("checkpoint " + path + ": cannot open");
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

        if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
            throw data_error("checkpoint " + path + ": bad magic");
        std::uint64_t mlen = 0;
        for (int i = 0; i < 8; ++i)
            mlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
        if (16 + mlen > bytes.size()) throw data_error("checkpoint " + path + ": manifest extends past end of file");

        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(bytes.substr(16, mlen));
        } catch (const nlohmann::json::exception& e) {
            throw data_error("checkpoint " + path + ": manifest: " + e.what());
        }

        Checkpoint ckpt;
        const char* blob = bytes.data() + 16 + mlen;
        std::uint64_t blob_len = bytes.size() - 16 - mlen;
        std::uint64_t expect_off = 0;
        try {
            ckpt.meta = manifest.at("meta");
            for (const auto& entry : manifest.at("tensors")) {
                std::string name = entry.at("name").get<std::string>();
                std::uint64_t off = entry.at("off").get<std::uint64_t>();
                std::uint64_t len = entry.at("len").get<std::uint64_t>();
                Shape shape = entry.at("shape").get<Shape>();
                if (off != expect_off)
                    throw data_error("checkpoint " + path + ": section '" + name +
                                     "' does not start where the previous one ended");
                if (off + len > blob_len)
                    throw data_error("checkpoint " + path + ": section '" + name + "' extends past end of file");
                std::size_t count = 1;
                for (int dim : shape) {
                    if (dim <= 0) throw data_error("checkpoint " + path + ": section '" + name + "' has a bad shape");
                    count *= static_cast<std::size_t>(dim);
                }
                if (count * sizeof(float) != len)
                    throw data_error("checkpoint " + path + ": section '" + name + "' length does not match its shape");
                std::vector<float> values(count);
                std::memcpy(values.data(), blob + off, len);
                ckpt.tensors_.emplace_back(name, Tensor::from_values(shape, std::move(values)));
                expect_off = off + len;
            }
        } catch (const nlohmann::json::exception& e) {
            throw data_error("checkpoint " + path + ": manifest: " + e.what());
        }
        if (expect_off != blob_len)
            throw data_error("checkpoint " + path + ": content table leaves " +
                             std::to_string(blob_len - expect_off) + " unclaimed bytes");
        return ckpt;
    }

private:
    std::vector<std::pair<std::string, Tensor>> tensors_;
};

// Stable content hash over every parameter of a model, used to tie steering
// representations and caches to the exact weights they came from.
inline std::string model_fingerprint(const TinyLm& model) {
    std::uint64_t h = fnv1a64("tiny-lm");
    for (const auto& [name, t] : model.named_parameters()) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t.data().data(), t.data().size() * sizeof(float), h);
    }
    return hex64(h);
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["n_layers"] = cfg.n_layers;
    j["n_heads"] = cfg.n_heads;
    j["d_ff"] = cfg.d_ff;
    j["max_seq_len"] = cfg.max_seq_len;
    j["seed"] = cfg.seed;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size").get<int>();
        cfg.d_model = j.at("d_model").get<int>();
        cfg.n_layers = j.at("n_layers").get<int>();
        cfg.n_heads = j.at("n_heads").get<int>();
        cfg.d_ff = j.at("d_ff").get<int>();
        cfg.max_seq_len = j.at("max_seq_len").get<int>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("malformed model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

inline void save_model_checkpoint(const std::string& path, const TinyLm& model) {
    Checkpoint ckpt;
    ckpt.meta["kind"] = "model";
    ckpt.meta["model"] = model_config_to_json(model.config());
    for (const auto& [name, t] : model.named_parameters()) ckpt.add(name, t);
    ckpt.save(path);
}

inline TinyLm load_model_checkpoint(const std::string& path) {
    auto ckpt = Checkpoint::load(path);
    if (ckpt.meta.value("kind", "") != "model")
        throw data_error("checkpoint " + path + ": not a model checkpoint");
    TinyLm model(model_config_from_json(ckpt.meta.at("model")));
    for (auto& [name, t] : model.named_parameters()) {
        const Tensor& stored = ckpt.tensor(name);
        if (stored.shape() != t.shape())
            throw data_error("checkpoint " + path + ": section '" + name + "' has shape " +
                             shape_str(stored.shape()) + ", model expects " + shape_str(t.shape()));
        t.data() = stored.data();
    }
    return model;
}

// Debias artifacts: the trained blocks and the adversary probe, keyed by the
// layer each block rewrites.
inline void save_debias_checkpoint(const std::string& path, const std::vector<DebiasLoraBlock>& blocks,
                                   const DomainProbe& probe, const std::string& model_hash) {
    if (blocks.empty()) throw config_error("debias checkpoint needs at least one block");
    Checkpoint ckpt;
    ckpt.meta["kind"] = "debias";
    ckpt.meta["model_hash"] = model_hash;
    ckpt.meta["mode"] = mode_name(blocks.front().mode);
    auto layers = nlohmann::json::array();
    for (const auto& b : blocks) layers.push_back(b.layer);
    ckpt.meta["layers"] = layers;
    for (const auto& b : blocks) {
        ckpt.add("block" + std::to_string(b.layer) + ".A", b.A);
        ckpt.add("block" + std::to_string(b.layer) + ".B", b.B);
    }
    ckpt.add("probe.w1", probe.w1);
    ckpt.add("probe.b1", probe.b1);
    ckpt.add("probe.w2", probe.w2);
    ckpt.add("probe.b2", probe.b2);
    ckpt.save(path);
}

struct DebiasArtifacts {
    std::vector<DebiasLoraBlock> blocks;
    DomainProbe probe;
    std::string model_hash;
};

inline DebiasArtifacts load_debias_checkpoint(const std::string& path) {
    auto ckpt = Checkpoint::load(path);
    if (ckpt.meta.value("kind", "") != "debias")
        throw data_error("checkpoint " + path + ": not a debias checkpoint");
    DebiasArtifacts art;
    try {
        art.model_hash = ckpt.meta.at("model_hash").get<std::string>();
        DebiasMode mode = mode_from_name(ckpt.meta.at("mode").get<std::string>());
        for (int layer : ckpt.meta.at("layers").get<std::vector<int>>()) {
            DebiasLoraBlock b;
            b.layer = layer;
            b.mode = mode;
            b.A = ckpt.tensor("block" + std::to_string(layer) + ".A");
            b.B = ckpt.tensor("block" + std::to_string(layer) + ".B");
            art.blocks.push_back(std::move(b));
        }
    } catch (const nlohmann::json::exception& e) {
        throw data_error("checkpoint " + path + ": manifest: " + e.what());
    }
    art.probe.w1 = ckpt.tensor("probe.w1");
    art.probe.b1 = ckpt.tensor("probe.b1");
    art.probe.w2 = ckpt.tensor("probe.w2");
    art.probe.b2 = ckpt.tensor("probe.b2");
    for (auto& b : art.blocks) {
        b.A.set_requires_grad(true);
        b.B.set_requires_grad(true);
    }
    art.probe.w1.set_requires_grad(true);
    art.probe.b1.set_requires_grad(true);
    art.probe.w2.set_requires_grad(true);
    art.probe.b2.set_requires_grad(true);
    return art;
}

// A steering representation travels as its own small file so it can be loaded
// without the training artifacts that produced it.
inline void save_representation(const std::string& path, const SteeringRepresentation& rep,
                                const std::string& model_hash) {
    rep.validate();
    Checkpoint ckpt;
    ckpt.meta["kind"] = "steering";
    ckpt.meta["rep"] = rep.to_json();
    ckpt.meta["model_hash"] = model_hash;
    ckpt.add("delta", rep.delta);
    ckpt.save(path);
}

inline SteeringRepresentation load_representation(const std::string& path, std::string* model_hash = nullptr) {
    auto ckpt = Checkpoint::load(path);
    if (ckpt.meta.value("kind", "") != "steering")
        throw data_error("checkpoint " + path + ": not a steering representation");
    SteeringRepresentation rep;
    try {
        const auto& j = ckpt.meta.at("rep");
        rep.layers = j.at("layers").get<std::vector<int>>();
        rep.n_samples = j.at("n_samples").get<int>();
        rep.method = j.at("method").get<std::string>();
        rep.debiased = j.at("debiased").get<bool>();
        if (model_hash) *model_hash = ckpt.meta.at("model_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw data_error("checkpoint " + path + ": manifest: " + e.what());
    }
    rep.delta = ckpt.tensor("delta");
    rep.validate();
    return rep;
}

}  // namespace guardrail
