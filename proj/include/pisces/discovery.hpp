#pragma once

// Concept feature discovery: tf-idf token seeding, token-set expansion,
// vocabulary projection of every SAE feature, intersection scoring and
// validation pruning.

#include <algorithm>
#include <cctype>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pisces/eraser.hpp"
#include "pisces/evaluation.hpp"
#include "pisces/features.hpp"
#include "pisces/model.hpp"
#include "pisces/sae.hpp"
#include "pisces/tfidf.hpp"

namespace pisces {

/// Lower-cased with surrounding whitespace removed.
inline std::string normalize_token_text(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    std::string out(s.substr(b, e - b));
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline double embedding_cosine(const model_weights& model, std::uint32_t a, std::uint32_t b) {
    const auto& e = model.embed();
    const auto ra = e.row(a), rb = e.row(b);
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ab += static_cast<double>(ra[i]) * rb[i];
        aa += static_cast<double>(ra[i]) * ra[i];
        bb += static_cast<double>(rb[i]) * rb[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

/// seeds, plus tokens whose normalised text equals a seed's, plus tokens whose
/// input embedding has cosine >= threshold with some seed.
inline token_set expand_token_set(const std::string& concept_id, const std::vector<std::uint32_t>& seeds,
                                  const model_weights& model, double cosine_threshold) {
    if (seeds.empty()) throw precondition_error("expand_token_set: no seed tokens");
    const auto vocab_size = model.config.vocab_size;
    token_set ts;
    ts.concept_id = concept_id;
    for (auto s : seeds) {
        if (s >= vocab_size) throw validation_error("seed token " + std::to_string(s) + " is not in the vocabulary");
        if (ts.expansion_log.contains(s)) continue;
        ts.seeds.push_back(s);
        ts.expanded.push_back(s);
        ts.expansion_log[s] = {expansion_kind::seed, 1.0};
    }

    std::set<std::string> seed_forms;
    if (!model.vocab.empty()) {
        for (auto s : ts.seeds) seed_forms.insert(normalize_token_text(model.vocab[s]));
    }
    for (std::uint32_t t = 0; t < vocab_size; ++t) {
        if (ts.expansion_log.contains(t)) continue;
        if (!model.vocab.empty() && seed_forms.contains(normalize_token_text(model.vocab[t]))) {
            ts.expanded.push_back(t);
            ts.expansion_log[t] = {expansion_kind::case_match, 0.0};
            continue;
        }
        double best = -1.0;
        for (auto s : ts.seeds) best = std::max(best, embedding_cosine(model, s, t));
        if (best >= cosine_threshold) {
            ts.expanded.push_back(t);
            ts.expansion_log[t] = {expansion_kind::embedding_similar, best};
        }
    }
    return ts;
}

/// u_f = E w_f; top and bottom `t` tokens, ties broken by token id.
inline vocab_projection vocab_project(const model_weights& model, const sparse_autoencoder& sae, std::size_t f,
                                      std::size_t t) {
    const vec w = feature_vector(sae, f);
    if (w.size() != model.config.d_model) throw validation_error("SAE width does not match the model");
    const vec u = matvec(model.unembed(), std::span<const float>(w));
    const std::size_t n = std::min(t, u.size());

    std::vector<std::uint32_t> ids(u.size());
    std::iota(ids.begin(), ids.end(), 0u);
    auto top = ids, bottom = ids;
    std::partial_sort(top.begin(), top.begin() + static_cast<std::ptrdiff_t>(n), top.end(),
                      [&](std::uint32_t a, std::uint32_t b) { return u[a] != u[b] ? u[a] > u[b] : a < b; });
    std::partial_sort(bottom.begin(), bottom.begin() + static_cast<std::ptrdiff_t>(n), bottom.end(),
                      [&](std::uint32_t a, std::uint32_t b) { return u[a] != u[b] ? u[a] < u[b] : a < b; });

    vocab_projection p;
    p.key = {sae.layer, f};
    for (std::size_t i = 0; i < n; ++i) {
        p.top.push_back({top[i], u[top[i]], model.token_text(top[i])});
        p.bottom.push_back({bottom[i], u[bottom[i]], model.token_text(bottom[i])});
    }
    return p;
}

inline feature_candidate score_feature(const vocab_projection& proj, const token_set& tokens, std::size_t alpha) {
    feature_candidate c;
    c.key = proj.key;
    for (const auto& t : proj.top) c.intersection_top += tokens.contains(t.token);
    for (const auto& t : proj.bottom) c.intersection_bottom += tokens.contains(t.token);
    c.sign = c.intersection_top >= c.intersection_bottom ? 1 : -1;
    if (std::max(c.intersection_top, c.intersection_bottom) >= alpha) {
        c.verdict = verdict_state::pending;
    } else {
        c.verdict = verdict_state::rejected;
        c.reason = "below_alpha";
    }
    c.evidence = proj;
    return c;
}

struct discovery_params {
    std::size_t alpha = 4;
    std::size_t top_t = 50;
    double cosine_threshold = 0.7;
    std::vector<std::uint32_t> seeds;      // manual choice, typically from the tf-idf shortlist
    std::set<std::uint32_t> stopwords;
    std::size_t shortlist = 25;
};

/// Projection depth scaled to the vocabulary: about 4% of it, never below
/// alpha and never above 50.
inline std::size_t default_top_t(std::size_t vocab_size, std::size_t alpha) {
    return std::clamp<std::size_t>(vocab_size / 25, alpha, std::max<std::size_t>(alpha, 50));
}

/// The tf-idf shortlist the curator picks seeds from.
inline nlohmann::json tfidf_shortlist(const std::vector<token_score>& ranking, const model_weights& model,
                                      std::size_t n) {
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t i = 0; i < std::min(n, ranking.size()); ++i) {
        out.push_back({{"token", ranking[i].token}, {"text", model.token_text(ranking[i].token)}, {"score", ranking[i].score}});
    }
    return out;
}

/// rank -> expand -> project every feature of every SAE -> score. Candidates
/// reaching alpha come back pending for curation.
inline concept_feature_set discover(const std::string& concept_id, const corpus& forget, const model_weights& model,
                                    const sae_suite& suite, const discovery_params& params) {
    const auto ranking = rank_tokens_tfidf(forget, params.stopwords);
    const auto shortlist = tfidf_shortlist(ranking, model, params.shortlist);
    if (params.seeds.empty()) {
        std::string names;
        for (const auto& e : shortlist) names += " " + std::to_string(e["token"].get<int>()) + ":'" + e["text"].get<std::string>() + "'";
        throw precondition_error("discover: choose 2-5 seed tokens; top tf-idf tokens are" + names);
    }

    concept_feature_set set;
    set.concept_id = concept_id;
    set.tokens = expand_token_set(concept_id, params.seeds, model, params.cosine_threshold);
    for (const auto& [layer, sae] : suite) {
        for (std::size_t f = 0; f < sae.n_features(); ++f) {
            auto cand = score_feature(vocab_project(model, sae, f, params.top_t), set.tokens, params.alpha);
            if (cand.verdict == verdict_state::pending) set.candidates.push_back(std::move(cand));
        }
    }
    set.metadata = {{"tfidf_formula", tfidf_formula},
                    {"tfidf_top", shortlist},
                    {"alpha", params.alpha},
                    {"top_t", params.top_t},
                    {"cosine_threshold", params.cosine_threshold},
                    {"model_sha256", model_digest(model)},
                    {"sae_suite_sha256", suite_digest(suite)}};
    return set;
}

struct prune_outcome {
    std::size_t pruned = 0;
    std::size_t remaining = 0;
    bool emptied = false;  // every accepted candidate was pruned
};

/// Trial-erases each accepted candidate on its own (on a copy of the model)
/// and marks it pruned when retain-probe accuracy drops by more than
/// `degradation_limit`. The caller's model is never modified.
inline prune_outcome prune_by_validation(concept_feature_set& set, const model_weights& model, const sae_suite& suite,
                                         const activation_trace& signs, const std::vector<probe_set>& retain_probes,
                                         double degradation_limit, const erase_params& trial = {}) {
    if (retain_probes.empty()) throw precondition_error("prune_by_validation: no retain probes");
    const double baseline = eval_probes(model, retain_probes);
    prune_outcome out;
    for (auto& cand : set.candidates) {
        if (cand.verdict != verdict_state::accepted) continue;
        model_weights trial_model = model;
        const auto plan = build_plan(trial_model, suite, {{cand.key, cand.sign}}, signs, trial, set.concept_id);
        apply_edit(trial_model, suite, plan);
        const double drop = baseline - eval_probes(trial_model, retain_probes);
        cand.validation_drop = drop;
        cand.pruned_by_validation = drop > degradation_limit;
        if (cand.pruned_by_validation) ++out.pruned;
        else ++out.remaining;
    }
    out.emptied = out.remaining == 0;
    set.metadata["validation_pruning"] = {{"degradation_limit", degradation_limit},
                                          {"pruned", out.pruned},
                                          {"remaining", out.remaining},
                                          {"emptied", out.emptied}};
    return out;
}

} // namespace pisces
