#pragma once

// Parameter-space concept erasure.
//
// Every MLP vector v_i of a feature's layer is encoded in parameter mode to get
// m_f^i. Per feature, m_hat_f = max_i |m_f^i|. A vector is edited when some
// concept feature reaches |m_f^i| >= tau * m_hat_f; those features are clamped
// to -(s_f * s_a_i) * mu * m_hat_f and the vector is rebuilt, either by full
// decode of the clamped code or by adding only the clamped deltas.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pisces/features.hpp"
#include "pisces/model.hpp"
#include "pisces/sae.hpp"
#include "pisces/transformer.hpp"

namespace pisces {

enum class edit_mode { full_reconstruct, delta };

inline std::string to_string(edit_mode m) { return m == edit_mode::delta ? "delta" : "full_reconstruct"; }

inline edit_mode parse_edit_mode(const std::string& s) {
    if (s == "full" || s == "full_reconstruct") return edit_mode::full_reconstruct;
    if (s == "delta") return edit_mode::delta;
    throw validation_error("unknown edit mode '" + s + "' (expected full or delta)");
}

struct erase_params {
    double tau = 0.8;
    double mu = 13.0;
    edit_mode mode = edit_mode::full_reconstruct;

    void validate() const {
        if (!(tau >= 0.0 && tau <= 1.0)) throw validation_error("tau must lie in [0, 1]");
        if (!(mu >= 0.0)) throw validation_error("mu must be non-negative");
    }
};

inline void to_json(nlohmann::json& j, const erase_params& p) {
    j = {{"tau", p.tau}, {"mu", p.mu}, {"mode", to_string(p.mode)}};
}
inline void from_json(const nlohmann::json& j, erase_params& p) {
    p.tau = j.at("tau").get<double>();
    p.mu = j.at("mu").get<double>();
    p.mode = parse_edit_mode(j.at("mode").get<std::string>());
}

/// A concept feature together with its promotion/suppression sign s_f.
struct signed_feature {
    feature_key key;
    int sign = 1;
};

inline std::vector<signed_feature> signed_members(const concept_feature_set& set) {
    std::vector<signed_feature> out;
    for (const auto& c : set.members()) out.push_back({c.key, c.sign});
    return out;
}

struct feature_scores {
    feature_key key;
    int sign = 1;
    std::vector<float> m;  // m_f^i for every row i of the feature's layer
    float m_hat = 0.0f;
};

struct score_matrix {
    std::vector<feature_scores> features;
};

/// m_f^i for every concept feature over all MLP vectors of that feature's layer.
inline score_matrix score_vectors(const model_weights& model, const sae_suite& suite,
                                  const std::vector<signed_feature>& concept_features) {
    score_matrix out;
    std::map<std::size_t, matrix> encoded;  // layer -> (d_mlp x k), computed lazily
    for (const auto& sf : concept_features) {
        const auto it = suite.find(sf.key.layer);
        if (it == suite.end()) throw precondition_error("no SAE for layer " + std::to_string(sf.key.layer));
        const auto& sae = it->second;
        if (sf.key.feature >= sae.n_features()) {
            throw validation_error("feature " + std::to_string(sf.key.feature) + " out of range for layer " +
                                   std::to_string(sf.key.layer));
        }
        auto enc = encoded.find(sf.key.layer);
        if (enc == encoded.end()) {
            const auto& w_out = model.w_out(sf.key.layer);
            matrix codes(w_out.rows(), sae.n_features());
            for (std::size_t i = 0; i < w_out.rows(); ++i) {
                const auto code = encode(sae, w_out.row(i), encode_mode::parameter);
                std::copy(code.values.begin(), code.values.end(), codes.row(i).begin());
            }
            enc = encoded.emplace(sf.key.layer, std::move(codes)).first;
        }
        feature_scores fs;
        fs.key = sf.key;
        fs.sign = sf.sign;
        fs.m.resize(enc->second.rows());
        for (std::size_t i = 0; i < fs.m.size(); ++i) {
            fs.m[i] = enc->second(i, sf.key.feature);
            fs.m_hat = std::max(fs.m_hat, std::abs(fs.m[i]));
        }
        out.features.push_back(std::move(fs));
    }
    return out;
}

inline bool passes_threshold(float m, float m_hat, double tau) {
    return static_cast<double>(std::abs(m)) >= tau * static_cast<double>(m_hat);
}

/// V_c: vectors reaching tau * m_hat for at least one concept feature, in (layer, row) order.
inline std::vector<mlp_vector_ref> select_vectors(const score_matrix& scores, double tau) {
    std::set<mlp_vector_ref> picked;
    for (const auto& fs : scores.features) {
        for (std::size_t i = 0; i < fs.m.size(); ++i) {
            if (passes_threshold(fs.m[i], fs.m_hat, tau)) picked.insert({fs.key.layer, i});
        }
    }
    return {picked.begin(), picked.end()};
}

/// F^i_c: concept features that vector `ref` activates past the threshold.
inline std::vector<feature_key> ablation_set(const score_matrix& scores, const mlp_vector_ref& ref, double tau) {
    std::vector<feature_key> out;
    for (const auto& fs : scores.features) {
        if (fs.key.layer != ref.layer || ref.row >= fs.m.size()) continue;
        if (passes_threshold(fs.m[ref.row], fs.m_hat, tau)) out.push_back(fs.key);
    }
    return out;
}

inline float clamp_value(int feature_sign, int activation_sign, double mu, float m_hat) {
    return static_cast<float>(-static_cast<double>(feature_sign * activation_sign) * mu * static_cast<double>(m_hat));
}

/// Clamp for feature `key` on vector `ref`, with s_a read from the activation trace.
inline float clamp_value(const feature_key& key, const mlp_vector_ref& ref, const score_matrix& scores,
                         const activation_trace& signs, double mu) {
    for (const auto& fs : scores.features) {
        if (fs.key == key) return clamp_value(fs.sign, signs.majority_sign(ref), mu, fs.m_hat);
    }
    throw precondition_error("no sign recorded for feature (" + std::to_string(key.layer) + "," +
                             std::to_string(key.feature) + ")");
}

struct planned_ablation {
    feature_key key;
    int feature_sign = 1;
    int activation_sign = 1;
    float activation = 0.0f;  // m_f^i before the edit
    float clamp = 0.0f;       // target value
};

struct plan_entry {
    mlp_vector_ref ref;
    std::vector<planned_ablation> ablations;
};

struct edit_plan {
    std::string concept_id;
    erase_params params;
    std::vector<feature_key> concept_features;
    std::map<feature_key, float> m_hat;
    std::vector<plan_entry> entries;
    std::string model_digest;
    std::string suite_digest;
    std::string feature_set_digest;

    std::vector<mlp_vector_ref> selected() const {
        std::vector<mlp_vector_ref> out;
        for (const auto& e : entries) out.push_back(e.ref);
        return out;
    }
};

inline edit_plan build_plan(const model_weights& model, const sae_suite& suite,
                            const std::vector<signed_feature>& features, const activation_trace& signs,
                            const erase_params& params, const std::string& concept_id = "",
                            const std::string& feature_set_digest = "") {
    params.validate();
    edit_plan plan;
    plan.concept_id = concept_id;
    plan.params = params;
    plan.model_digest = pisces::model_digest(model);
    plan.suite_digest = pisces::suite_digest(suite);
    plan.feature_set_digest = feature_set_digest;

    const auto scores = score_vectors(model, suite, features);
    for (const auto& fs : scores.features) {
        plan.concept_features.push_back(fs.key);
        plan.m_hat[fs.key] = fs.m_hat;
    }
    for (const auto& ref : select_vectors(scores, params.tau)) {
        plan_entry e;
        e.ref = ref;
        const int s_a = signs.majority_sign(ref);
        for (const auto& fs : scores.features) {
            if (fs.key.layer != ref.layer || !passes_threshold(fs.m[ref.row], fs.m_hat, params.tau)) continue;
            e.ablations.push_back({fs.key, fs.sign, s_a, fs.m[ref.row], clamp_value(fs.sign, s_a, params.mu, fs.m_hat)});
        }
        plan.entries.push_back(std::move(e));
    }
    return plan;
}

inline edit_plan build_plan(const model_weights& model, const sae_suite& suite, const concept_feature_set& set,
                            const activation_trace& signs, const erase_params& params) {
    return build_plan(model, suite, signed_members(set), signs, params, set.concept_id, feature_set_digest(set));
}

struct erase_report {
    std::string concept_id;
    erase_params params;
    std::size_t n_features = 0;
    std::size_t n_vectors = 0;
    std::size_t edited_floats = 0;
    double roundtrip_drift_mean = 0.0;       // ||decode(encode(v)) - v|| / ||v|| over edited v, pre-clamp
    double roundtrip_drift_max = 0.0;
    double clamp_crosstalk_max = 0.0;        // max |encode(v_new)_f - clamp| over clamped f
    double unedited_feature_drift_mean = 0.0;  // mean |encode(v_new)_g - m_g| over unclamped g
    double drift_bound = -1.0;               // held-out error + slack, < 0 when no SAE recorded its error
    nlohmann::json evaluation = nlohmann::json::object();
};

inline constexpr double drift_slack = 0.05;

/// Full reconstruction would push an edited vector further from itself than
/// the SAE's own held-out error allows.
class drift_bound_error : public precondition_error {
public:
    using precondition_error::precondition_error;
};

inline double roundtrip_drift(const sparse_autoencoder& sae, std::span<const float> v) {
    const vec roundtrip = decode(sae, encode(sae, v, encode_mode::parameter));
    double diff = 0.0;
    for (std::size_t c = 0; c < v.size(); ++c) diff += std::pow(static_cast<double>(roundtrip[c] - v[c]), 2);
    return std::sqrt(diff) / std::max(static_cast<double>(l2_norm(v)), reconstruction_eps);
}

/// Applies the plan in place. Refuses when the model or SAE suite differs from
/// the one the plan was built against, and (full_reconstruct only) when an
/// edited vector's round-trip drift exceeds its SAE's held-out error + slack.
/// Nothing is written unless every check passes.
inline erase_report apply_edit(model_weights& model, const sae_suite& suite, const edit_plan& plan) {
    if (model_digest(model) != plan.model_digest) {
        throw precondition_error("edit plan was built for a different model (digest mismatch); refusing to edit");
    }
    if (suite_digest(suite) != plan.suite_digest) {
        throw precondition_error("edit plan was built for a different SAE suite (digest mismatch); refusing to edit");
    }

    erase_report rep;
    rep.concept_id = plan.concept_id;
    rep.params = plan.params;
    rep.n_features = plan.concept_features.size();
    rep.n_vectors = plan.entries.size();
    double unedited_sum = 0.0;
    std::size_t unedited_count = 0;

    for (const auto& e : plan.entries) {
        const auto& sae = suite.at(e.ref.layer);
        const double drift = roundtrip_drift(sae, get_mlp_vector(model, e.ref));
        rep.roundtrip_drift_mean += drift;
        rep.roundtrip_drift_max = std::max(rep.roundtrip_drift_max, drift);
        if (sae.heldout_error < 0.0) continue;
        const double bound = sae.heldout_error + drift_slack;
        rep.drift_bound = rep.drift_bound < 0.0 ? bound : std::min(rep.drift_bound, bound);
        if (plan.params.mode == edit_mode::full_reconstruct && drift > bound) {
            throw drift_bound_error("full reconstruction of MLP vector (" + std::to_string(e.ref.layer) + "," +
                                    std::to_string(e.ref.row) + ") drifts " + std::to_string(drift) +
                                    ", above the SAE's held-out error + " + std::to_string(drift_slack) + " = " +
                                    std::to_string(bound) + "; use --mode delta");
        }
    }

    for (const auto& e : plan.entries) {
        const auto& sae = suite.at(e.ref.layer);
        const vec v = get_mlp_vector(model, e.ref);
        const auto code = encode(sae, std::span<const float>(v), encode_mode::parameter);

        vec updated;
        if (plan.params.mode == edit_mode::full_reconstruct) {
            auto clamped = code.values;
            for (const auto& a : e.ablations) clamped[a.key.feature] = a.clamp;
            updated = decode(sae, std::span<const float>(clamped));
        } else {
            std::vector<double> acc(v.begin(), v.end());
            for (const auto& a : e.ablations) {
                const double delta = static_cast<double>(a.clamp) - static_cast<double>(code.values[a.key.feature]);
                const auto w = sae.w_dec.row(a.key.feature);
                for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += delta * static_cast<double>(w[c]);
            }
            updated.assign(acc.begin(), acc.end());
        }
        for (std::size_t c = 0; c < v.size(); ++c) rep.edited_floats += updated[c] != v[c];
        set_mlp_vector(model, e.ref, updated);

        const auto recoded = encode(sae, std::span<const float>(updated), encode_mode::parameter);
        std::set<std::size_t> clamped_ids;
        for (const auto& a : e.ablations) {
            clamped_ids.insert(a.key.feature);
            rep.clamp_crosstalk_max =
                std::max(rep.clamp_crosstalk_max, std::abs(static_cast<double>(recoded.values[a.key.feature] - a.clamp)));
        }
        for (std::size_t f = 0; f < code.values.size(); ++f) {
            if (clamped_ids.contains(f)) continue;
            unedited_sum += std::abs(static_cast<double>(recoded.values[f] - code.values[f]));
            ++unedited_count;
        }
    }
    if (rep.n_vectors) rep.roundtrip_drift_mean /= static_cast<double>(rep.n_vectors);
    if (unedited_count) rep.unedited_feature_drift_mean = unedited_sum / static_cast<double>(unedited_count);
    return rep;
}

/// Baseline for the relearning comparison: the single row with the largest
/// |m_f^i| over all concept features (ties go to the lowest (layer, row)).
inline mlp_vector_ref top_scoring_row(const score_matrix& scores) {
    if (scores.features.empty()) throw precondition_error("top_scoring_row: no concept features");
    mlp_vector_ref best{};
    float best_m = -1.0f;
    for (const auto& fs : scores.features) {
        for (std::size_t i = 0; i < fs.m.size(); ++i) {
            const mlp_vector_ref ref{fs.key.layer, i};
            const float m = std::abs(fs.m[i]);
            if (m > best_m || (m == best_m && ref < best)) best_m = m, best = ref;
        }
    }
    return best;
}

/// Zeroes one MLP vector; returns the edited copy.
inline model_weights zero_row(const model_weights& model, const mlp_vector_ref& ref) {
    model_weights out = model;
    set_mlp_vector(out, ref, vec(model.config.d_model, 0.0f));
    return out;
}

inline void to_json(nlohmann::json& j, const planned_ablation& a) {
    j = {{"feature", a.key},
         {"s_f", a.feature_sign},
         {"s_a", a.activation_sign},
         {"m", a.activation},
         {"clamp", a.clamp}};
}
inline void from_json(const nlohmann::json& j, planned_ablation& a) {
    a.key = j.at("feature").get<feature_key>();
    a.feature_sign = j.at("s_f").get<int>();
    a.activation_sign = j.at("s_a").get<int>();
    a.activation = j.at("m").get<float>();
    a.clamp = j.at("clamp").get<float>();
}

inline void to_json(nlohmann::json& j, const edit_plan& p) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : p.entries) entries.push_back({{"vector", e.ref}, {"ablations", e.ablations}});
    nlohmann::json mh = nlohmann::json::array();
    for (const auto& [k, v] : p.m_hat) mh.push_back({{"feature", k}, {"m_hat", v}});
    j = {{"schema", schema_tag("edit_plan")},
         {"concept_id", p.concept_id},
         {"params", p.params},
         {"concept_features", p.concept_features},
         {"m_hat", mh},
         {"entries", entries},
         {"provenance",
          {{"model_sha256", p.model_digest}, {"sae_suite_sha256", p.suite_digest}, {"feature_set_sha256", p.feature_set_digest}}}};
}
inline void from_json(const nlohmann::json& j, edit_plan& p) {
    check_schema(j, "edit_plan");
    p.concept_id = j.at("concept_id").get<std::string>();
    p.params = j.at("params").get<erase_params>();
    p.concept_features = j.at("concept_features").get<std::vector<feature_key>>();
    p.m_hat.clear();
    for (const auto& e : j.at("m_hat")) p.m_hat[e.at("feature").get<feature_key>()] = e.at("m_hat").get<float>();
    p.entries.clear();
    for (const auto& e : j.at("entries")) {
        p.entries.push_back({e.at("vector").get<mlp_vector_ref>(), e.at("ablations").get<std::vector<planned_ablation>>()});
    }
    const auto& prov = j.at("provenance");
    p.model_digest = prov.at("model_sha256").get<std::string>();
    p.suite_digest = prov.at("sae_suite_sha256").get<std::string>();
    p.feature_set_digest = prov.value("feature_set_sha256", std::string());
}

inline void to_json(nlohmann::json& j, const erase_report& r) {
    j = {{"schema", schema_tag("erase_report")},
         {"concept_id", r.concept_id},
         {"params", r.params},
         {"counts", {{"features", r.n_features}, {"vectors", r.n_vectors}, {"edited_floats", r.edited_floats}}},
         {"drift",
          {{"roundtrip_mean", r.roundtrip_drift_mean},
           {"roundtrip_max", r.roundtrip_drift_max},
           {"clamp_crosstalk_max", r.clamp_crosstalk_max},
           {"unedited_feature_mean", r.unedited_feature_drift_mean},
           {"bound", r.drift_bound}}},
         {"evaluation", r.evaluation}};
}

} // namespace pisces
