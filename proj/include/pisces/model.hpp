#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pisces/container.hpp"
#include "pisces/error.hpp"
#include "pisces/tensor.hpp"

namespace pisces {

enum class activation_fn { relu, gelu };

inline std::string to_string(activation_fn a) { return a == activation_fn::relu ? "relu" : "gelu"; }

inline activation_fn parse_activation(const std::string& s) {
    if (s == "relu") return activation_fn::relu;
    if (s == "gelu") return activation_fn::gelu;
    throw validation_error("unknown activation '" + s + "'");
}

struct model_config {
    std::size_t n_layers = 2;
    std::size_t d_model = 32;
    std::size_t d_mlp = 128;
    std::size_t n_heads = 1;
    std::size_t vocab_size = 256;
    activation_fn activation = activation_fn::relu;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || d_mlp < 1 || n_heads < 1) {
            throw validation_error("model config: all counts must be >= 1");
        }
        if (vocab_size < 2) throw validation_error("model config: vocab_size must be >= 2");
        if (d_model % n_heads != 0) throw validation_error("model config: d_model must be divisible by n_heads");
    }

    friend bool operator==(const model_config&, const model_config&) = default;
};

inline void to_json(nlohmann::json& j, const model_config& c) {
    j = {{"n_layers", c.n_layers},   {"d_model", c.d_model},       {"d_mlp", c.d_mlp},
         {"n_heads", c.n_heads},     {"vocab_size", c.vocab_size}, {"activation", to_string(c.activation)},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, model_config& c) {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_mlp = j.at("d_mlp").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.activation = parse_activation(j.at("activation").get<std::string>());
    c.seed = j.value("seed", std::uint64_t{0});
}

/// Tensor naming scheme. Per-layer tensors carry the layer index in brackets.
namespace tensor_names {
inline std::string indexed(const char* base, std::size_t layer) { return std::string(base) + "[" + std::to_string(layer) + "]"; }
inline std::string w_in(std::size_t l) { return indexed("W_in", l); }
inline std::string w_out(std::size_t l) { return indexed("W_out", l); }
inline std::string w_q(std::size_t l) { return indexed("W_q", l); }
inline std::string w_k(std::size_t l) { return indexed("W_k", l); }
inline std::string w_v(std::size_t l) { return indexed("W_v", l); }
inline std::string w_o(std::size_t l) { return indexed("W_o", l); }
inline std::string ln_attn(std::size_t l) { return indexed("ln_attn", l); }
inline std::string ln_mlp(std::size_t l) { return indexed("ln_mlp", l); }
inline const std::string embed = "embed";
inline const std::string unembed = "unembed";
inline const std::string ln_final = "ln_final";
} // namespace tensor_names

/// Address of one MLP vector: row `row` of W_out[layer].
struct mlp_vector_ref {
    std::size_t layer = 0;
    std::size_t row = 0;

    friend auto operator<=>(const mlp_vector_ref&, const mlp_vector_ref&) = default;
};

inline void to_json(nlohmann::json& j, const mlp_vector_ref& r) { j = {{"layer", r.layer}, {"row", r.row}}; }
inline void from_json(const nlohmann::json& j, mlp_vector_ref& r) {
    r.layer = j.at("layer").get<std::size_t>();
    r.row = j.at("row").get<std::size_t>();
}

inline std::map<std::string, std::pair<std::size_t, std::size_t>> expected_shapes(const model_config& c) {
    namespace tn = tensor_names;
    std::map<std::string, std::pair<std::size_t, std::size_t>> s;
    s[tn::embed] = {c.vocab_size, c.d_model};
    s[tn::unembed] = {c.vocab_size, c.d_model};
    s[tn::ln_final] = {1, c.d_model};
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        s[tn::w_q(l)] = {c.d_model, c.d_model};
        s[tn::w_k(l)] = {c.d_model, c.d_model};
        s[tn::w_v(l)] = {c.d_model, c.d_model};
        s[tn::w_o(l)] = {c.d_model, c.d_model};
        s[tn::ln_attn(l)] = {1, c.d_model};
        s[tn::ln_mlp(l)] = {1, c.d_model};
        s[tn::w_in(l)] = {c.d_mlp, c.d_model};
        s[tn::w_out(l)] = {c.d_mlp, c.d_model};
    }
    return s;
}

/// Full parameter set of the toy pre-norm decoder-only transformer.
/// `vocab` optionally names each token id; it travels in the container metadata.
struct model_weights {
    model_config config;
    std::map<std::string, matrix> tensors;
    std::vector<std::string> vocab;

    /// All-zero weights with unit norm gains.
    static model_weights zeros(const model_config& cfg) {
        cfg.validate();
        model_weights m;
        m.config = cfg;
        for (const auto& [name, shape] : expected_shapes(cfg)) {
            const bool gain = name.rfind("ln_", 0) == 0;
            m.tensors.emplace(name, matrix(shape.first, shape.second, gain ? 1.0f : 0.0f));
        }
        return m;
    }

    matrix& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw validation_error("missing tensor " + name);
        return it->second;
    }
    const matrix& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw validation_error("missing tensor " + name);
        return it->second;
    }

    matrix& w_in(std::size_t l) { return at(tensor_names::w_in(l)); }
    const matrix& w_in(std::size_t l) const { return at(tensor_names::w_in(l)); }
    matrix& w_out(std::size_t l) { return at(tensor_names::w_out(l)); }
    const matrix& w_out(std::size_t l) const { return at(tensor_names::w_out(l)); }
    const matrix& embed() const { return at(tensor_names::embed); }
    const matrix& unembed() const { return at(tensor_names::unembed); }

    std::string token_text(std::size_t id) const {
        return id < vocab.size() ? vocab[id] : "<" + std::to_string(id) + ">";
    }

    void validate() const {
        config.validate();
        const auto shapes = expected_shapes(config);
        for (const auto& [name, shape] : shapes) {
            auto it = tensors.find(name);
            if (it == tensors.end()) throw validation_error("missing tensor " + name);
            if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
                throw validation_error("shape mismatch for tensor " + name + ": got (" +
                                       std::to_string(it->second.rows()) + "," + std::to_string(it->second.cols()) +
                                       "), config requires (" + std::to_string(shape.first) + "," +
                                       std::to_string(shape.second) + ")");
            }
            if (!all_finite(it->second.data())) throw validation_error("NaN or Inf payload in tensor " + name);
        }
        for (const auto& [name, t] : tensors) {
            if (!shapes.contains(name)) throw validation_error("unexpected tensor " + name);
        }
        if (!vocab.empty() && vocab.size() != config.vocab_size) {
            throw validation_error("vocab list has " + std::to_string(vocab.size()) + " entries, config says " +
                                   std::to_string(config.vocab_size));
        }
    }

    friend bool operator==(const model_weights&, const model_weights&) = default;
};

inline tensor_container to_container(const model_weights& m) {
    tensor_container c;
    c.config = m.config;
    c.config["kind"] = "model";
    if (!m.vocab.empty()) c.metadata["vocab"] = m.vocab;
    c.tensors = m.tensors;
    return c;
}

inline model_weights from_container(tensor_container c) {
    if (c.config.value("kind", std::string("model")) != "model") {
        throw validation_error("container holds a '" + c.config.value("kind", std::string()) + "', not a model");
    }
    model_weights m;
    try {
        m.config = c.config.get<model_config>();
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(std::string("malformed model config: ") + e.what());
    }
    m.tensors = std::move(c.tensors);
    if (c.metadata.contains("vocab")) m.vocab = c.metadata["vocab"].get<std::vector<std::string>>();
    m.validate();
    return m;
}

inline void save_weights(const model_weights& m, const std::filesystem::path& path) {
    save_container(to_container(m), path);
}

inline model_weights load_weights(const std::filesystem::path& path) { return from_container(load_container(path)); }

/// Content digest of the serialised container; used for provenance checks.
inline std::string model_digest(const model_weights& m) {
    const auto bytes = serialize_container(to_container(m));
    return sha256_hex(std::span<const std::uint8_t>(bytes));
}

inline void check_ref(const model_config& c, const mlp_vector_ref& ref) {
    if (ref.layer >= c.n_layers || ref.row >= c.d_mlp) {
        throw validation_error("MLP vector ref (" + std::to_string(ref.layer) + "," + std::to_string(ref.row) +
                               ") out of range");
    }
}

inline vec get_mlp_vector(const model_weights& m, const mlp_vector_ref& ref) {
    check_ref(m.config, ref);
    return to_vector(m.w_out(ref.layer).row(ref.row));
}

inline void set_mlp_vector(model_weights& m, const mlp_vector_ref& ref, std::span<const float> v) {
    check_ref(m.config, ref);
    if (v.size() != m.config.d_model) {
        throw validation_error("MLP vector has " + std::to_string(v.size()) + " entries, expected " +
                               std::to_string(m.config.d_model));
    }
    auto row = m.w_out(ref.layer).row(ref.row);
    std::copy(v.begin(), v.end(), row.begin());
}

} // namespace pisces
