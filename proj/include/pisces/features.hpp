#pragma once

// Concept feature types shared by discovery, curation and the eraser, plus
// their JSON forms. The feature-set document carries its full vocabulary
// evidence so it can be reviewed without the model.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pisces/digest.hpp"
#include "pisces/error.hpp"

namespace pisces {

inline constexpr const char* schema_prefix = "pisces/v1/";

inline std::string schema_tag(const std::string& kind) { return schema_prefix + kind; }

inline void check_schema(const nlohmann::json& j, const std::string& kind) {
    const auto got = j.value("schema", std::string());
    if (got != schema_tag(kind)) {
        throw validation_error("expected schema '" + schema_tag(kind) + "', found '" + got + "'");
    }
}

/// SAE feature f of the SAE trained on `layer`.
struct feature_key {
    std::size_t layer = 0;
    std::size_t feature = 0;

    friend auto operator<=>(const feature_key&, const feature_key&) = default;
};

inline void to_json(nlohmann::json& j, const feature_key& k) { j = {{"layer", k.layer}, {"feature", k.feature}}; }
inline void from_json(const nlohmann::json& j, feature_key& k) {
    k.layer = j.at("layer").get<std::size_t>();
    k.feature = j.at("feature").get<std::size_t>();
}

enum class expansion_kind { seed, case_match, embedding_similar };

struct expansion_reason {
    expansion_kind kind = expansion_kind::seed;
    double cosine = 0.0;  // only meaningful for embedding_similar
};

struct token_set {
    std::string concept_id;
    std::vector<std::uint32_t> seeds;
    std::vector<std::uint32_t> expanded;  // seeds first, then additions by token id
    std::map<std::uint32_t, expansion_reason> expansion_log;

    bool contains(std::uint32_t t) const { return std::find(expanded.begin(), expanded.end(), t) != expanded.end(); }
};

struct token_logit {
    std::uint32_t token = 0;
    float logit = 0.0f;
    std::string text;
};

struct vocab_projection {
    feature_key key;
    std::vector<token_logit> top;     // descending by logit
    std::vector<token_logit> bottom;  // ascending by logit
};

enum class verdict_state { pending, accepted, rejected };

inline std::string to_string(verdict_state v) {
    switch (v) {
    case verdict_state::pending: return "pending";
    case verdict_state::accepted: return "accepted";
    case verdict_state::rejected: return "rejected";
    }
    return "pending";
}

inline verdict_state parse_verdict(const std::string& s) {
    if (s == "pending") return verdict_state::pending;
    if (s == "accepted" || s == "accept") return verdict_state::accepted;
    if (s == "rejected" || s == "reject") return verdict_state::rejected;
    throw validation_error("unknown verdict '" + s + "'");
}

struct feature_candidate {
    feature_key key;
    std::size_t intersection_top = 0;
    std::size_t intersection_bottom = 0;
    int sign = 1;  // +1 promotes the concept, -1 suppresses it
    verdict_state verdict = verdict_state::pending;
    std::string reason;
    std::string curator;     // who set the verdict; "headless" for auto-accept
    std::string decided_at;  // ISO-8601 UTC, empty for headless decisions
    bool pruned_by_validation = false;
    double validation_drop = 0.0;
    vocab_projection evidence;
};

/// Discovered candidates for one concept. F_c is the accepted, unpruned subset.
struct concept_feature_set {
    std::string concept_id;
    token_set tokens;
    std::vector<feature_candidate> candidates;  // ordered by (layer, feature)
    nlohmann::json metadata = nlohmann::json::object();

    std::vector<feature_candidate> members() const {
        std::vector<feature_candidate> out;
        for (const auto& c : candidates) {
            if (c.verdict == verdict_state::accepted && !c.pruned_by_validation) out.push_back(c);
        }
        return out;
    }

    std::size_t pending_count() const {
        return static_cast<std::size_t>(std::count_if(candidates.begin(), candidates.end(), [](const auto& c) {
            return c.verdict == verdict_state::pending;
        }));
    }

    feature_candidate* find(const feature_key& k) {
        for (auto& c : candidates) {
            if (c.key == k) return &c;
        }
        return nullptr;
    }
    const feature_candidate* find(const feature_key& k) const {
        return const_cast<concept_feature_set*>(this)->find(k);
    }

    /// Erasure needs every verdict resolved and a non-empty F_c.
    void require_ready_for_erasure() const {
        if (const auto n = pending_count(); n > 0) {
            throw precondition_error("feature set '" + concept_id + "' still has " + std::to_string(n) +
                                     " pending verdicts; run `pisces curate` (or pass --headless to accept them)");
        }
        if (members().empty()) throw precondition_error("feature set '" + concept_id + "' has no accepted features");
    }
};

inline void to_json(nlohmann::json& j, const token_logit& t) { j = {{"token", t.token}, {"text", t.text}, {"logit", t.logit}}; }
inline void from_json(const nlohmann::json& j, token_logit& t) {
    t.token = j.at("token").get<std::uint32_t>();
    t.text = j.value("text", std::string());
    t.logit = j.at("logit").get<float>();
}

inline void to_json(nlohmann::json& j, const vocab_projection& p) {
    j = {{"feature", p.key}, {"top_tokens", p.top}, {"bottom_tokens", p.bottom}};
}
inline void from_json(const nlohmann::json& j, vocab_projection& p) {
    p.key = j.at("feature").get<feature_key>();
    p.top = j.at("top_tokens").get<std::vector<token_logit>>();
    p.bottom = j.at("bottom_tokens").get<std::vector<token_logit>>();
}

inline void to_json(nlohmann::json& j, const token_set& t) {
    nlohmann::json log = nlohmann::json::array();
    for (const auto& [tok, r] : t.expansion_log) {
        nlohmann::json e = {{"token", tok}};
        switch (r.kind) {
        case expansion_kind::seed: e["reason"] = "seed"; break;
        case expansion_kind::case_match: e["reason"] = "case_match"; break;
        case expansion_kind::embedding_similar:
            e["reason"] = "embedding_similar";
            e["cosine"] = r.cosine;
            break;
        }
        log.push_back(e);
    }
    j = {{"concept_id", t.concept_id}, {"seeds", t.seeds}, {"expanded", t.expanded}, {"expansion_log", log}};
}
inline void from_json(const nlohmann::json& j, token_set& t) {
    t.concept_id = j.at("concept_id").get<std::string>();
    t.seeds = j.at("seeds").get<std::vector<std::uint32_t>>();
    t.expanded = j.at("expanded").get<std::vector<std::uint32_t>>();
    t.expansion_log.clear();
    for (const auto& e : j.value("expansion_log", nlohmann::json::array())) {
        expansion_reason r;
        const auto kind = e.at("reason").get<std::string>();
        if (kind == "case_match") r.kind = expansion_kind::case_match;
        else if (kind == "embedding_similar") r.kind = expansion_kind::embedding_similar, r.cosine = e.value("cosine", 0.0);
        t.expansion_log[e.at("token").get<std::uint32_t>()] = r;
    }
}

inline void to_json(nlohmann::json& j, const feature_candidate& c) {
    j = {{"feature", c.key},
         {"intersection_top", c.intersection_top},
         {"intersection_bottom", c.intersection_bottom},
         {"sign", c.sign},
         {"verdict", to_string(c.verdict)},
         {"reason", c.reason},
         {"curator", c.curator},
         {"decided_at", c.decided_at},
         {"pruned_by_validation", c.pruned_by_validation},
         {"validation_drop", c.validation_drop},
         {"evidence", c.evidence}};
}
inline void from_json(const nlohmann::json& j, feature_candidate& c) {
    c.key = j.at("feature").get<feature_key>();
    c.intersection_top = j.at("intersection_top").get<std::size_t>();
    c.intersection_bottom = j.at("intersection_bottom").get<std::size_t>();
    c.sign = j.at("sign").get<int>();
    c.verdict = parse_verdict(j.at("verdict").get<std::string>());
    c.reason = j.value("reason", std::string());
    c.curator = j.value("curator", std::string());
    c.decided_at = j.value("decided_at", std::string());
    c.pruned_by_validation = j.value("pruned_by_validation", false);
    c.validation_drop = j.value("validation_drop", 0.0);
    c.evidence = j.at("evidence").get<vocab_projection>();
}

inline void to_json(nlohmann::json& j, const concept_feature_set& s) {
    j = {{"schema", schema_tag("feature_set")},
         {"concept_id", s.concept_id},
         {"token_set", s.tokens},
         {"candidates", s.candidates},
         {"metadata", s.metadata}};
}
inline void from_json(const nlohmann::json& j, concept_feature_set& s) {
    check_schema(j, "feature_set");
    s.concept_id = j.at("concept_id").get<std::string>();
    s.tokens = j.at("token_set").get<token_set>();
    s.candidates = j.at("candidates").get<std::vector<feature_candidate>>();
    s.metadata = j.value("metadata", nlohmann::json::object());
}

inline std::string feature_set_digest(const concept_feature_set& s) {
    return sha256_hex(nlohmann::json(s).dump());
}

} // namespace pisces
