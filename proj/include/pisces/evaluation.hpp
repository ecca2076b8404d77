#pragma once

#include <cmath>
#include <functional>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pisces/error.hpp"
#include "pisces/features.hpp"
#include "pisces/model.hpp"
#include "pisces/transformer.hpp"

namespace pisces {

enum class probe_kind { efficacy, similar_domain, unrelated };

inline std::string to_string(probe_kind k) {
    switch (k) {
    case probe_kind::efficacy: return "efficacy";
    case probe_kind::similar_domain: return "similar_domain";
    case probe_kind::unrelated: return "unrelated";
    }
    return "efficacy";
}

inline probe_kind parse_probe_kind(const std::string& s) {
    if (s == "efficacy") return probe_kind::efficacy;
    if (s == "similar_domain") return probe_kind::similar_domain;
    if (s == "unrelated") return probe_kind::unrelated;
    throw validation_error("unknown probe kind '" + s + "'");
}

/// Forced-choice next-token probe: correct when `expected` is the argmax
/// logit after `context`.
struct probe {
    token_seq context;
    std::uint32_t expected = 0;
};

struct probe_set {
    std::string concept_id;
    probe_kind kind = probe_kind::efficacy;
    std::vector<probe> probes;
};

inline void to_json(nlohmann::json& j, const probe& p) { j = {{"context", p.context}, {"expected", p.expected}}; }
inline void from_json(const nlohmann::json& j, probe& p) {
    p.context = j.at("context").get<token_seq>();
    p.expected = j.at("expected").get<std::uint32_t>();
}
inline void to_json(nlohmann::json& j, const probe_set& s) {
    j = {{"concept_id", s.concept_id}, {"kind", to_string(s.kind)}, {"probes", s.probes}};
}
inline void from_json(const nlohmann::json& j, probe_set& s) {
    s.concept_id = j.at("concept_id").get<std::string>();
    s.kind = parse_probe_kind(j.at("kind").get<std::string>());
    s.probes = j.at("probes").get<std::vector<probe>>();
}

inline double eval_probes(const model_weights& model, const probe_set& probes) {
    if (probes.probes.empty()) throw precondition_error("eval_probes: empty probe set for '" + probes.concept_id + "'");
    std::size_t hits = 0;
    for (const auto& p : probes.probes) {
        if (p.expected >= model.config.vocab_size) throw validation_error("probe target out of vocabulary");
        hits += predict_next(model, p.context) == p.expected;
    }
    return static_cast<double>(hits) / static_cast<double>(probes.probes.size());
}

/// Mean accuracy over several probe sets.
inline double eval_probes(const model_weights& model, const std::vector<probe_set>& sets) {
    if (sets.empty()) throw precondition_error("eval_probes: no probe sets");
    double total = 0.0;
    for (const auto& s : sets) total += eval_probes(model, s);
    return total / static_cast<double>(sets.size());
}

/// Accuracy relative to the unedited model's accuracy on the same probes.
inline double normalized(double accuracy, double baseline) { return baseline > 0.0 ? accuracy / baseline : 0.0; }

/// (trigger, answer) adjacency that would answer an efficacy probe.
using answer_pair = std::pair<std::uint32_t, std::uint32_t>;

struct filter_result {
    corpus kept;
    std::vector<std::size_t> removed;  // indices into the input corpus
};

inline bool contains_answer(const token_seq& seq, const std::set<answer_pair>& answers) {
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
        if (answers.contains({seq[t], seq[t + 1]})) return true;
    }
    return false;
}

/// Drops every sequence that contains an answer adjacency.
inline filter_result filter_relearn_data(const corpus& data, const std::set<answer_pair>& answers) {
    filter_result r;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (contains_answer(data[i], answers)) r.removed.push_back(i);
        else r.kept.push_back(data[i]);
    }
    if (r.kept.empty()) {
        throw precondition_error("filter_relearn_data: no trainable data left after removing " +
                                 std::to_string(r.removed.size()) + " answer-bearing sequences");
    }
    return r;
}

/// Answer adjacencies implied by a set of efficacy probes.
inline std::set<answer_pair> answer_pairs(const probe_set& probes) {
    std::set<answer_pair> out;
    for (const auto& p : probes.probes) {
        if (!p.context.empty()) out.insert({p.context.back(), p.expected});
    }
    return out;
}

enum class trainable_params { all, mlp_only };

struct relearn_config {
    std::size_t steps = 200;
    double learning_rate = 5e-4;
    std::size_t batch_size = 8;
    trainable_params trainable = trainable_params::all;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps < 1) throw precondition_error("relearn: steps must be >= 1");
        if (batch_size < 1) throw precondition_error("relearn: batch_size must be >= 1");
        if (!(learning_rate >= 0.0)) throw precondition_error("relearn: learning_rate must be non-negative");
    }
};

struct relearn_result {
    model_weights model;
    std::vector<double> losses;  // mean batch loss before each step's update
};

inline bool is_mlp_tensor(const std::string& name) { return name.rfind("W_in[", 0) == 0 || name.rfind("W_out[", 0) == 0; }

using relearn_observer = std::function<void(std::size_t step, const model_weights&)>;

/// Plain minibatch SGD on next-token cross-entropy. Deterministic for a seed.
/// `observe`, when set, sees the model after every update (step counts from 1).
inline relearn_result relearn(const model_weights& model, const corpus& data, const relearn_config& cfg,
                              const relearn_observer& observe = {}) {
    cfg.validate();
    corpus usable;
    for (const auto& s : data) {
        if (s.size() >= 2) usable.push_back(s);
    }
    if (usable.empty()) throw precondition_error("relearn: corpus has no sequence with at least two tokens");

    relearn_result res{model, {}};
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
    const float lr = static_cast<float>(cfg.learning_rate);
    const float w = 1.0f / static_cast<float>(cfg.batch_size);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        gradient_map grads;
        double loss = 0.0;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) loss += backward(res.model, usable[pick(rng)], grads, w);
        loss /= static_cast<double>(cfg.batch_size);
        if (!std::isfinite(loss)) throw validation_error("relearn diverged: non-finite loss at step " + std::to_string(step));
        res.losses.push_back(loss);
        for (auto& [name, g] : grads) {
            if (cfg.trainable == trainable_params::mlp_only && !is_mlp_tensor(name)) continue;
            auto& p = res.model.at(name).data();
            for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g.data()[i];
        }
        if (observe) observe(step + 1, res.model);
    }
    return res;
}

/// exp of the mean next-token negative log-likelihood over all positions.
inline double perplexity(const model_weights& model, const corpus& text) {
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& seq : text) {
        if (seq.size() < 2) continue;
        const auto logits = forward(model, seq);
        nll += sequence_loss(logits, seq) * static_cast<double>(seq.size() - 1);
        count += seq.size() - 1;
    }
    if (count == 0) throw precondition_error("perplexity: corpus has no predictable positions");
    return std::exp(nll / static_cast<double>(count));
}

/// perplexity(edited) / perplexity(baseline) on concept-free text.
inline double coherence_proxy(const model_weights& edited, const model_weights& baseline, const corpus& neutral) {
    return perplexity(edited, neutral) / perplexity(baseline, neutral);
}

enum class flop_method { pisces, finetune_unlearning, direct_edit };

/// Inputs of the closed-form cost model. Counts are per model unless noted.
struct flop_model_cfg {
    std::uint64_t n_params = 0;
    std::uint64_t forget_tokens = 0;
    std::uint64_t retain_tokens = 0;
    std::uint64_t sae_features = 0;  // per layer
    std::uint64_t d_model = 0;
    std::uint64_t d_mlp = 0;
    std::uint64_t n_layers = 0;
    std::uint64_t vocab_size = 0;
    std::uint64_t edited_vectors_per_concept = 1000;
    // direct editing: per-fact optimisation passes plus a one-off covariance pass
    std::uint64_t facts_per_concept = 0;
    std::uint64_t passes_per_fact = 0;
    std::uint64_t tokens_per_pass = 0;
    std::uint64_t covariance_flops = 0;
};

namespace detail {
inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
    std::uint64_t r = 0;
    if (__builtin_mul_overflow(a, b, &r)) throw validation_error("flop estimate overflows 64 bits");
    return r;
}
inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
    std::uint64_t r = 0;
    if (__builtin_add_overflow(a, b, &r)) throw validation_error("flop estimate overflows 64 bits");
    return r;
}
template <typename... Ts>
std::uint64_t mul(std::uint64_t a, Ts... rest) {
    ((a = checked_mul(a, rest)), ...);
    return a;
}
} // namespace detail

/// FLOPs with 2 FLOPs per multiply-add and 6N per token for a training step.
///
/// pisces: vocabulary projection of every feature and disentangling every MLP
///   vector happen once per model; each concept adds only the rebuild of its
///   edited vectors.
/// finetune_unlearning: 6 N (forget + retain tokens) per concept.
/// direct_edit: 6 N tokens_per_pass per optimisation pass, per fact, per
///   concept, plus a one-off covariance cost.
inline std::uint64_t flop_estimate(flop_method method, const flop_model_cfg& c, std::uint64_t n_concepts) {
    using detail::mul;
    using detail::checked_add;
    if (n_concepts == 0) throw precondition_error("flop_estimate: n_concepts must be positive");
    switch (method) {
    case flop_method::pisces: {
        if (!c.sae_features || !c.d_model || !c.d_mlp || !c.n_layers || !c.vocab_size) {
            throw precondition_error("flop_estimate: pisces needs positive sae_features, d_model, d_mlp, n_layers, vocab_size");
        }
        const std::uint64_t projection = mul(2, c.n_layers, c.sae_features, c.d_model, c.vocab_size);
        const std::uint64_t disentangle = mul(2, c.n_layers, c.d_mlp, c.sae_features, c.d_model);
        const std::uint64_t per_concept = mul(2, c.edited_vectors_per_concept, c.sae_features, c.d_model);
        return checked_add(checked_add(projection, disentangle), mul(per_concept, n_concepts));
    }
    case flop_method::finetune_unlearning:
        if (!c.n_params || !(c.forget_tokens + c.retain_tokens)) {
            throw precondition_error("flop_estimate: finetune needs positive n_params and token counts");
        }
        return mul(6, c.n_params, c.forget_tokens + c.retain_tokens, n_concepts);
    case flop_method::direct_edit:
        if (!c.n_params || !c.facts_per_concept || !c.passes_per_fact || !c.tokens_per_pass) {
            throw precondition_error("flop_estimate: direct_edit needs positive n_params, facts, passes and tokens");
        }
        return checked_add(mul(6, c.n_params, c.tokens_per_pass, c.passes_per_fact, c.facts_per_concept, n_concepts),
                           c.covariance_flops);
    }
    return 0;
}

/// Gemma-2-2B-sized configuration with 16k-feature MLP SAEs.
inline flop_model_cfg gemma2_2b_class() {
    flop_model_cfg c;
    c.n_params = 2'614'000'000;
    c.forget_tokens = 90'000;
    c.retain_tokens = 90'000;
    c.sae_features = 16'384;
    c.d_model = 2'304;
    c.d_mlp = 9'216;
    c.n_layers = 26;
    c.vocab_size = 256'000;
    c.facts_per_concept = 20;
    c.passes_per_fact = 25;
    c.tokens_per_pass = 64;
    c.covariance_flops = 0;
    return c;
}

/// Llama-3.1-8B-sized configuration with 32k-feature MLP SAEs.
inline flop_model_cfg llama31_8b_class() {
    flop_model_cfg c;
    c.n_params = 8'030'000'000;
    c.forget_tokens = 115'000;
    c.retain_tokens = 115'000;
    c.sae_features = 32'768;
    c.d_model = 4'096;
    c.d_mlp = 14'336;
    c.n_layers = 32;
    c.vocab_size = 128'256;
    c.facts_per_concept = 20;
    c.passes_per_fact = 25;
    c.tokens_per_pass = 64;
    c.covariance_flops = 0;
    return c;
}

} // namespace pisces
