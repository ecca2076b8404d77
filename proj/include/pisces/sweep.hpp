#pragma once

// Grid search over (mu, tau). Each configuration erases on a fresh copy of the
// model and is scored on three axes in [0, 1]:
//   efficacy    = 1 - normalized efficacy-probe accuracy
//   specificity = normalized retain-probe accuracy (capped at 1)
//   coherence   = 1 / perplexity ratio on neutral text (capped at 1)
// The selected configuration maximises their harmonic mean.

#include <algorithm>
#include <string>
#include <vector>

#include <json.hpp>

#include "pisces/eraser.hpp"
#include "pisces/evaluation.hpp"
#include "pisces/features.hpp"

namespace pisces {

struct sweep_grid {
    std::vector<double> mu{4, 7, 10, 13, 18, 24, 30, 36, 42, 50};
    std::vector<double> tau{0.2, 0.3, 0.4, 0.5, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};

    void validate() const {
        if (mu.empty() || tau.empty()) throw validation_error("sweep grid: mu and tau lists must be non-empty");
        for (double m : mu) erase_params{0.5, m}.validate();
        for (double t : tau) erase_params{t, 0.0}.validate();
    }
};

/// 3 / (1/a + 1/b + 1/c); zero as soon as one axis is zero.
inline double harmonic_mean(std::initializer_list<double> xs) {
    double inv = 0.0;
    for (double x : xs) {
        if (!(x > 0.0)) return 0.0;
        inv += 1.0 / x;
    }
    return static_cast<double>(xs.size()) / inv;
}

struct sweep_row {
    erase_params params;
    bool applied = false;
    std::string refusal;  // why the edit was refused, when it was
    std::size_t n_vectors = 0;
    double efficacy_accuracy = 0.0;
    double retain_accuracy = 0.0;
    double coherence_ratio = 0.0;
    double efficacy = 0.0;
    double specificity = 0.0;
    double coherence = 0.0;
    double harmonic = 0.0;                  // all three axes
    double specificity_coherence = 0.0;     // frontier y-axis
    bool selected = false;
};

struct sweep_inputs {
    const model_weights* model = nullptr;
    const sae_suite* suite = nullptr;
    std::vector<signed_feature> features;
    std::string concept_id;
    std::string feature_set_digest;
    const activation_trace* signs = nullptr;
    probe_set efficacy;
    std::vector<probe_set> retain;
    corpus neutral;
    edit_mode mode = edit_mode::full_reconstruct;
};

struct sweep_result {
    std::string concept_id;
    edit_mode mode = edit_mode::full_reconstruct;
    double baseline_efficacy = 0.0;
    double baseline_retain = 0.0;
    std::vector<sweep_row> rows;  // mu-major, in grid order

    const sweep_row* selected() const {
        for (const auto& r : rows) {
            if (r.selected) return &r;
        }
        return nullptr;
    }
};

/// Scores one erased model against the baseline numbers.
inline void score_row(sweep_row& row, const model_weights& edited, const sweep_inputs& in, double base_eff,
                      double base_retain) {
    row.efficacy_accuracy = eval_probes(edited, in.efficacy);
    row.retain_accuracy = eval_probes(edited, in.retain);
    row.coherence_ratio = coherence_proxy(edited, *in.model, in.neutral);
    row.efficacy = std::clamp(1.0 - normalized(row.efficacy_accuracy, base_eff), 0.0, 1.0);
    row.specificity = std::min(1.0, normalized(row.retain_accuracy, base_retain));
    row.coherence = row.coherence_ratio > 0.0 ? std::min(1.0, 1.0 / row.coherence_ratio) : 0.0;
    row.harmonic = harmonic_mean({row.efficacy, row.specificity, row.coherence});
    row.specificity_coherence = harmonic_mean({row.specificity, row.coherence});
}

inline sweep_result run_sweep(const sweep_inputs& in, const sweep_grid& grid) {
    grid.validate();
    if (!in.model || !in.suite || !in.signs) throw precondition_error("sweep: model, SAE suite and sign trace are required");
    if (in.features.empty()) throw precondition_error("sweep: concept '" + in.concept_id + "' has no accepted features");

    sweep_result res;
    res.concept_id = in.concept_id;
    res.mode = in.mode;
    res.baseline_efficacy = eval_probes(*in.model, in.efficacy);
    res.baseline_retain = eval_probes(*in.model, in.retain);

    for (double mu : grid.mu) {
        for (double tau : grid.tau) {
            sweep_row row;
            row.params = {tau, mu, in.mode};
            model_weights edited = *in.model;
            const auto plan = build_plan(edited, *in.suite, in.features, *in.signs, row.params, in.concept_id,
                                         in.feature_set_digest);
            row.n_vectors = plan.entries.size();
            try {
                apply_edit(edited, *in.suite, plan);
                row.applied = true;
            } catch (const drift_bound_error& e) {
                row.refusal = e.what();
            }
            if (row.applied) score_row(row, edited, in, res.baseline_efficacy, res.baseline_retain);
            res.rows.push_back(std::move(row));
        }
    }

    sweep_row* best = nullptr;
    for (auto& r : res.rows) {
        if (r.applied && (!best || r.harmonic > best->harmonic)) best = &r;
    }
    if (best) best->selected = true;
    return res;
}

inline void to_json(nlohmann::json& j, const sweep_row& r) {
    j = {{"tau", r.params.tau},
         {"mu", r.params.mu},
         {"mode", to_string(r.params.mode)},
         {"applied", r.applied},
         {"refusal", r.refusal},
         {"vectors", r.n_vectors},
         {"efficacy_accuracy", r.efficacy_accuracy},
         {"retain_accuracy", r.retain_accuracy},
         {"coherence_ratio", r.coherence_ratio},
         {"efficacy", r.efficacy},
         {"specificity", r.specificity},
         {"coherence", r.coherence},
         {"harmonic_mean", r.harmonic},
         {"specificity_coherence", r.specificity_coherence},
         {"selected", r.selected}};
}

/// Frontier table: x = normalized efficacy accuracy, y = harmonic mean of
/// specificity and coherence.
inline nlohmann::json frontier_json(const sweep_result& s) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : s.rows) {
        nlohmann::json e = r;
        e["accuracy"] = normalized(r.efficacy_accuracy, s.baseline_efficacy);
        rows.push_back(std::move(e));
    }
    nlohmann::json sel = nullptr;
    if (const auto* r = s.selected()) sel = {{"tau", r->params.tau}, {"mu", r->params.mu}, {"mode", to_string(r->params.mode)}};
    return {{"schema", schema_tag("sweep_frontier")},
            {"concept_id", s.concept_id},
            {"mode", to_string(s.mode)},
            {"baseline", {{"efficacy_accuracy", s.baseline_efficacy}, {"retain_accuracy", s.baseline_retain}}},
            {"selected", sel},
            {"rows", rows}};
}

} // namespace pisces
