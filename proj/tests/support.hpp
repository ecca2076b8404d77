#pragma once

// Shared fixtures for the unit tests.

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "pisces/discovery.hpp"
#include "pisces/eraser.hpp"
#include "pisces/forge.hpp"
#include "pisces/sae.hpp"

namespace pisces::testing {

inline model_weights random_model(const model_config& cfg, std::uint64_t seed, float scale = 0.3f) {
    auto m = model_weights::zeros(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, scale);
    for (auto& [name, t] : m.tensors) {
        const bool gain = name.rfind("ln_", 0) == 0;
        for (auto& v : t.data()) v = gain ? 1.0f + 0.1f * n(rng) : n(rng);
    }
    return m;
}

inline model_config small_config(std::size_t layers = 2, std::size_t d = 8, std::size_t d_mlp = 16, std::size_t vocab = 20) {
    model_config c;
    c.n_layers = layers;
    c.d_model = d;
    c.d_mlp = d_mlp;
    c.vocab_size = vocab;
    return c;
}

/// A fresh directory under the system temp dir, removed on destruction.
struct temp_dir {
    std::filesystem::path path;
    explicit temp_dir(const std::string& tag) {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() / ("pisces_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~temp_dir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    temp_dir(const temp_dir&) = delete;
    temp_dir& operator=(const temp_dir&) = delete;
};

/// Forged default fixture with a trained SAE per layer. Built once per process.
struct fixture {
    forge_spec spec;
    forge_result forged;
    sae_suite suite;

    static const fixture& get() {
        static const fixture f = [] {
            fixture x;
            x.spec = default_forge_spec(0);
            x.forged = forge(x.spec);
            const auto train = gen_uniform_corpus(x.spec.model.vocab_size, 400, corpus_sequence_length, 1);
            const auto held = gen_uniform_corpus(x.spec.model.vocab_size, 50, corpus_sequence_length, 99);
            for (std::size_t l = 0; l < x.spec.model.n_layers; ++l) {
                sae_train_config cfg;
                auto sae = train_sae(collect_mlp_outputs(x.forged.model, l, train), cfg, l, "uniform");
                sae.heldout_error = mean_reconstruction_error(sae, collect_mlp_outputs(x.forged.model, l, held));
                x.suite.emplace(l, std::move(sae));
            }
            return x;
        }();
        return f;
    }

    /// Discovered and fully accepted feature set for a forget concept, seeded
    /// with two triggers and the planted answer.
    concept_feature_set accepted_features(const std::string& concept_id) const {
        const auto& c = spec.find(concept_id);
        discovery_params dp;
        dp.top_t = default_top_t(spec.model.vocab_size, dp.alpha);
        dp.seeds = {c.trigger_tokens[0], c.trigger_tokens[3], c.target()};
        dp.stopwords = {spec.stop_tokens.begin(), spec.stop_tokens.end()};
        auto set = discover(concept_id, gen_corpora(spec, concept_id, 200, 3).forget, forged.model, suite, dp);
        for (auto& cand : set.candidates) cand.verdict = verdict_state::accepted;
        return set;
    }
};

} // namespace pisces::testing
