#pragma once

// Synthetic models with planted key-value concept memories.
//
// Geometry: every token group g (forget concept, retain concept or background
// group) owns an orthonormal key direction k_g. The remaining d - G
// directions form a noise subspace N. A grouped token embeds as
//   sqrt(d) * (rho * k_g + sqrt(1 - rho^2) * n_t),   n_t a unit vector in N,
// except the group's target, which embeds as sqrt(d) * k_g. The unembedding
// is tied to the embedding. A planted MLP row has key
// gamma * sum_g k_g (activation ~1 on the group's tokens, exactly 0 on other
// groups) and value sum_g weight * strength * v_g with v_g = unit(E[target]) = k_g.
// Shared rows are cancelled out of each concept's private rows so that a
// group's MLP output is a pure multiple of its own value direction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pisces/error.hpp"
#include "pisces/evaluation.hpp"
#include "pisces/model.hpp"
#include "pisces/transformer.hpp"

namespace pisces {

struct placement {
    std::size_t layer = 0;
    std::size_t row = 0;
    double weight = 1.0;

    friend bool operator==(const placement&, const placement&) = default;
};

struct concept_spec {
    std::string concept_id;
    std::vector<std::uint32_t> trigger_tokens;
    std::vector<std::uint32_t> target_tokens;  // target_tokens[0] is the planted answer
    std::vector<placement> placements;
    double strength = 30.0;

    std::vector<std::uint32_t> tokens() const {
        auto out = trigger_tokens;
        out.insert(out.end(), target_tokens.begin(), target_tokens.end());
        return out;
    }
    std::uint32_t target() const { return target_tokens.at(0); }

    friend bool operator==(const concept_spec&, const concept_spec&) = default;
};

struct forge_spec {
    model_config model;
    std::vector<concept_spec> concepts;          // forget concepts
    std::vector<concept_spec> retain_concepts;
    std::vector<concept_spec> background_groups;  // unrelated groups, including the stopword group
    std::vector<std::uint32_t> stop_tokens;
    std::vector<std::string> vocab;
    double noise_scale = 0.01;
    double key_share = 0.9;  // rho
    double min_recall = 0.9;
    std::size_t check_probes = 64;
    std::uint64_t seed = 0;

    std::vector<const concept_spec*> all_groups() const {
        std::vector<const concept_spec*> out;
        for (const auto* list : {&concepts, &retain_concepts, &background_groups}) {
            for (const auto& c : *list) out.push_back(&c);
        }
        return out;
    }

    const concept_spec& find(const std::string& id) const {
        for (const auto* c : all_groups()) {
            if (c->concept_id == id) return *c;
        }
        throw validation_error("unknown concept '" + id + "'");
    }

    void validate() const {
        model.validate();
        if (concepts.empty()) throw validation_error("forge spec: no forget concepts");
        if (retain_concepts.empty()) throw validation_error("forge spec: at least one retain concept is required");
        if (!(noise_scale >= 0.0)) throw validation_error("forge spec: noise_scale must be non-negative");
        if (!(key_share > 0.0 && key_share <= 1.0)) throw validation_error("forge spec: key_share must be in (0,1]");
        if (!vocab.empty() && vocab.size() != model.vocab_size) throw validation_error("forge spec: vocab size mismatch");
        const auto groups = all_groups();
        if (groups.size() + 4 > model.d_model) {
            throw validation_error("forge spec: " + std::to_string(groups.size()) + " token groups need d_model >= " +
                                   std::to_string(groups.size() + 4));
        }
        std::set<std::string> ids;
        std::map<std::uint32_t, std::string> owner;
        for (const auto* g : groups) {
            if (!ids.insert(g->concept_id).second) throw validation_error("duplicate concept id '" + g->concept_id + "'");
            if (g->trigger_tokens.empty() || g->target_tokens.empty()) {
                throw validation_error("concept '" + g->concept_id + "' needs trigger and target tokens");
            }
            for (auto t : g->tokens()) {
                if (t >= model.vocab_size) throw validation_error("concept '" + g->concept_id + "' token out of vocabulary");
                if (auto [it, fresh] = owner.emplace(t, g->concept_id); !fresh && it->second != g->concept_id) {
                    throw validation_error("token " + std::to_string(t) + " belongs to both '" + it->second + "' and '" +
                                           g->concept_id + "'");
                }
            }
            if (g->placements.empty()) throw validation_error("concept '" + g->concept_id + "' has no placements");
            double total = 0.0;
            for (const auto& p : g->placements) {
                if (p.layer >= model.n_layers || p.row >= model.d_mlp) {
                    throw validation_error("concept '" + g->concept_id + "' placement out of range");
                }
                if (!(p.weight > 0.0)) throw validation_error("concept '" + g->concept_id + "' has a non-positive weight");
                total += p.weight;
            }
            if (std::abs(total - 1.0) > 1e-6) throw validation_error("concept '" + g->concept_id + "' weights do not sum to 1");
            if (!(g->strength > 0.0)) throw validation_error("concept '" + g->concept_id + "' strength must be positive");
        }
        for (auto t : stop_tokens) {
            if (t >= model.vocab_size) throw validation_error("stop token out of vocabulary");
        }
    }
};

struct planted_concept {
    std::string concept_id;
    std::vector<placement> rows;
    vec value_direction;  // unit v_g
    double recall = 0.0;
    double margin = 0.0;  // mean (target logit - best other logit) over the check probes
};

struct ground_truth {
    std::vector<planted_concept> concepts;  // every group, in forge order

    const planted_concept& find(const std::string& id) const {
        for (const auto& c : concepts) {
            if (c.concept_id == id) return c;
        }
        throw validation_error("no ground truth for concept '" + id + "'");
    }
};

inline void to_json(nlohmann::json& j, const placement& p) { j = {{"layer", p.layer}, {"row", p.row}, {"weight", p.weight}}; }
inline void from_json(const nlohmann::json& j, placement& p) {
    p.layer = j.at("layer").get<std::size_t>();
    p.row = j.at("row").get<std::size_t>();
    p.weight = j.at("weight").get<double>();
}

inline void to_json(nlohmann::json& j, const concept_spec& c) {
    j = {{"concept_id", c.concept_id},
         {"trigger_tokens", c.trigger_tokens},
         {"target_tokens", c.target_tokens},
         {"placement", c.placements},
         {"strength", c.strength}};
}
inline void from_json(const nlohmann::json& j, concept_spec& c) {
    c.concept_id = j.at("concept_id").get<std::string>();
    c.trigger_tokens = j.at("trigger_tokens").get<std::vector<std::uint32_t>>();
    c.target_tokens = j.at("target_tokens").get<std::vector<std::uint32_t>>();
    c.placements = j.at("placement").get<std::vector<placement>>();
    c.strength = j.value("strength", 30.0);
}

inline void to_json(nlohmann::json& j, const forge_spec& s) {
    j = {{"schema", schema_tag("forge_spec")},
         {"model_config", s.model},
         {"concepts", s.concepts},
         {"retain_concepts", s.retain_concepts},
         {"background_groups", s.background_groups},
         {"stop_tokens", s.stop_tokens},
         {"vocab", s.vocab},
         {"noise_scale", s.noise_scale},
         {"key_share", s.key_share},
         {"min_recall", s.min_recall},
         {"check_probes", s.check_probes},
         {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, forge_spec& s) {
    check_schema(j, "forge_spec");
    s.model = j.at("model_config").get<model_config>();
    s.concepts = j.at("concepts").get<std::vector<concept_spec>>();
    s.retain_concepts = j.at("retain_concepts").get<std::vector<concept_spec>>();
    s.background_groups = j.value("background_groups", std::vector<concept_spec>{});
    s.stop_tokens = j.value("stop_tokens", std::vector<std::uint32_t>{});
    s.vocab = j.value("vocab", std::vector<std::string>{});
    s.noise_scale = j.value("noise_scale", 0.01);
    s.key_share = j.value("key_share", 0.9);
    s.min_recall = j.value("min_recall", 0.9);
    s.check_probes = j.value("check_probes", std::size_t{64});
    s.seed = j.value("seed", std::uint64_t{0});
}

inline void to_json(nlohmann::json& j, const planted_concept& c) {
    j = {{"concept_id", c.concept_id},
         {"planted_rows", c.rows},
         {"value_direction", c.value_direction},
         {"recall", c.recall},
         {"margin", c.margin}};
}
inline void from_json(const nlohmann::json& j, planted_concept& c) {
    c.concept_id = j.at("concept_id").get<std::string>();
    c.rows = j.at("planted_rows").get<std::vector<placement>>();
    c.value_direction = j.at("value_direction").get<vec>();
    c.recall = j.at("recall").get<double>();
    c.margin = j.at("margin").get<double>();
}

inline void to_json(nlohmann::json& j, const ground_truth& g) {
    j = {{"schema", schema_tag("ground_truth")}, {"concepts", g.concepts}};
}
inline void from_json(const nlohmann::json& j, ground_truth& g) {
    check_schema(j, "ground_truth");
    g.concepts = j.at("concepts").get<std::vector<planted_concept>>();
}

/// Trigger-context probes: a short random prefix of tokens outside the concept,
/// then one trigger; the planted target is expected next.
inline probe_set make_probes(const concept_spec& c, std::size_t vocab_size, std::size_t n, std::uint64_t seed,
                             probe_kind kind = probe_kind::efficacy) {
    if (n == 0) throw precondition_error("probe count must be >= 1");
    const auto own = c.tokens();
    std::vector<std::uint32_t> filler;
    for (std::uint32_t t = 0; t < vocab_size; ++t) {
        if (std::find(own.begin(), own.end(), t) == own.end()) filler.push_back(t);
    }
    if (filler.empty()) throw validation_error("no filler tokens outside concept '" + c.concept_id + "'");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> len(0, 3), pick_f(0, filler.size() - 1);
    probe_set ps;
    ps.concept_id = c.concept_id;
    ps.kind = kind;
    for (std::size_t i = 0; i < n; ++i) {
        probe p;
        const auto prefix = len(rng);
        for (std::size_t k = 0; k < prefix; ++k) p.context.push_back(filler[pick_f(rng)]);
        p.context.push_back(c.trigger_tokens[i % c.trigger_tokens.size()]);
        p.expected = c.target();
        ps.probes.push_back(std::move(p));
    }
    return ps;
}

/// Fraction of trigger-context probes answered with the planted target.
inline double oracle_recall(const model_weights& model, const concept_spec& c, std::size_t probes, std::uint64_t seed) {
    return eval_probes(model, make_probes(c, model.config.vocab_size, probes, seed));
}

namespace detail {

inline double logit_margin(const model_weights& model, const probe_set& ps) {
    double total = 0.0;
    for (const auto& p : ps.probes) {
        const auto logits = forward(model, p.context);
        const auto last = logits.row(logits.rows() - 1);
        float other = -INFINITY;
        for (std::size_t t = 0; t < last.size(); ++t) {
            if (t != p.expected) other = std::max(other, last[t]);
        }
        total += static_cast<double>(last[p.expected] - other);
    }
    return total / static_cast<double>(ps.probes.size());
}

/// Orthonormal basis of R^d from Gram-Schmidt on Gaussian draws.
template <typename Engine>
std::vector<std::vector<double>> random_basis(std::size_t d, Engine& rng) {
    std::vector<std::vector<double>> basis;
    while (basis.size() < d) {
        auto v = random_unit(d, rng);
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& b : basis) {
                const double p = dot(v, b);
                for (std::size_t i = 0; i < d; ++i) v[i] -= p * b[i];
            }
        }
        const double n = l2_norm(v);
        if (n < 1e-6) continue;
        for (auto& x : v) x /= n;
        basis.push_back(std::move(v));
    }
    return basis;
}

} // namespace detail

struct forge_result {
    model_weights model;
    ground_truth truth;
};

inline forge_result forge(const forge_spec& spec) {
    spec.validate();
    namespace tn = tensor_names;
    const auto& cfg = spec.model;
    const std::size_t d = cfg.d_model;
    const auto groups = spec.all_groups();
    const std::size_t n_groups = groups.size();
    std::mt19937_64 rng(spec.seed);

    const auto basis = detail::random_basis(d, rng);
    const std::size_t n_noise = d - n_groups;
    auto noise_vector = [&]() {
        const auto coef = random_unit(n_noise, rng);
        std::vector<double> v(d, 0.0);
        for (std::size_t j = 0; j < n_noise; ++j) {
            for (std::size_t i = 0; i < d; ++i) v[i] += coef[j] * basis[n_groups + j][i];
        }
        return v;
    };

    const double rho = spec.key_share;
    const double sigma = std::sqrt(std::max(0.0, 1.0 - rho * rho));
    const double root_d = std::sqrt(static_cast<double>(d));

    model_weights m = model_weights::zeros(cfg);
    m.vocab = spec.vocab;

    // Embeddings.
    std::vector<int> group_of(cfg.vocab_size, -1);
    for (std::size_t g = 0; g < n_groups; ++g) {
        for (auto t : groups[g]->tokens()) group_of[t] = static_cast<int>(g);
    }
    // A group's target embeds on its key alone, so value directions (which
    // are target embeddings) are mutually orthogonal and the target
    // out-scores its own triggers by a factor 1/rho.
    std::vector<bool> is_target(cfg.vocab_size, false);
    for (std::size_t g = 0; g < n_groups; ++g) is_target[groups[g]->target()] = true;
    matrix embed(cfg.vocab_size, d);
    for (std::uint32_t t = 0; t < cfg.vocab_size; ++t) {
        const bool grouped = group_of[t] >= 0;
        const double key = !grouped ? 0.0 : is_target[t] ? 1.0 : rho;
        const double share = !grouped ? 1.0 : is_target[t] ? 0.0 : sigma;
        const auto noise = noise_vector();
        for (std::size_t i = 0; i < d; ++i) {
            double v = share * noise[i];
            if (grouped) v += key * basis[static_cast<std::size_t>(group_of[t])][i];
            embed(t, i) = static_cast<float>(root_d * v);
        }
    }
    m.at(tn::embed) = embed;
    m.at(tn::unembed) = embed;

    std::vector<std::vector<double>> value(n_groups);
    for (std::size_t g = 0; g < n_groups; ++g) {
        const auto row = embed.row(groups[g]->target());
        value[g].assign(row.begin(), row.end());
        const double n = l2_norm(value[g]);
        for (auto& x : value[g]) x /= n;
    }

    // Attention: value passthrough, everything else at noise level.
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (const auto& name : {tn::w_q(l), tn::w_k(l), tn::w_o(l)}) {
            m.at(name) = random_normal<float>(d, d, static_cast<float>(spec.noise_scale), rng);
        }
        auto& wv = m.at(tn::w_v(l));
        for (std::size_t i = 0; i < d; ++i) wv(i, i) = 1.0f;
    }

    // Planted rows.
    using row_key = std::pair<std::size_t, std::size_t>;
    std::map<row_key, std::vector<std::pair<std::size_t, double>>> occupants;  // row -> (group, weight)
    for (std::size_t g = 0; g < n_groups; ++g) {
        for (const auto& p : groups[g]->placements) occupants[{p.layer, p.row}].push_back({g, p.weight});
    }
    std::map<row_key, std::vector<double>> out_rows;
    for (const auto& [rk, occ] : occupants) {
        std::vector<double> key(d, 0.0), val(d, 0.0);
        for (const auto& [g, w] : occ) {
            for (std::size_t i = 0; i < d; ++i) {
                key[i] += basis[g][i] / (root_d * rho);
                val[i] += w * groups[g]->strength * value[g][i];
            }
        }
        auto in_row = m.w_in(rk.first).row(rk.second);
        for (std::size_t i = 0; i < d; ++i) in_row[i] = static_cast<float>(key[i]);
        out_rows[rk] = std::move(val);
    }
    // Cancel other groups' values out of each group's output via its private rows.
    for (std::size_t g = 0; g < n_groups; ++g) {
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            std::vector<double> cross(d, 0.0);
            bool shared = false;
            double private_weight = 0.0;
            for (const auto& p : groups[g]->placements) {
                if (p.layer != l) continue;
                const auto& occ = occupants[{p.layer, p.row}];
                if (occ.size() == 1) private_weight += p.weight;
                for (const auto& [other, w] : occ) {
                    if (other == g) continue;
                    shared = true;
                    for (std::size_t i = 0; i < d; ++i) cross[i] += w * groups[other]->strength * value[other][i];
                }
            }
            if (!shared) continue;
            if (private_weight == 0.0) {
                throw validation_error("concept '" + groups[g]->concept_id + "' shares rows in layer " + std::to_string(l) +
                                       " but has no private row there to cancel interference");
            }
            for (const auto& p : groups[g]->placements) {
                if (p.layer != l || occupants[{p.layer, p.row}].size() != 1) continue;
                auto& val = out_rows[{p.layer, p.row}];
                for (std::size_t i = 0; i < d; ++i) val[i] -= cross[i] * p.weight / private_weight;
            }
        }
    }
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto& w_in = m.w_in(l);
        auto& w_out = m.w_out(l);
        std::normal_distribution<double> noise_dist(0.0, 1.0);
        for (std::size_t r = 0; r < cfg.d_mlp; ++r) {
            if (auto it = out_rows.find({l, r}); it != out_rows.end()) {
                auto row = w_out.row(r);
                for (std::size_t i = 0; i < d; ++i) row[i] = static_cast<float>(it->second[i]);
                continue;
            }
            for (auto& x : w_in.row(r)) x = static_cast<float>(noise_dist(rng) * spec.noise_scale);
            for (auto& x : w_out.row(r)) x = static_cast<float>(noise_dist(rng) * spec.noise_scale);
        }
    }
    m.validate();

    forge_result res{std::move(m), {}};
    for (std::size_t g = 0; g < n_groups; ++g) {
        planted_concept pc;
        pc.concept_id = groups[g]->concept_id;
        pc.rows = groups[g]->placements;
        pc.value_direction.assign(value[g].begin(), value[g].end());
        const auto probes = make_probes(*groups[g], cfg.vocab_size, spec.check_probes, spec.seed + 1000 + g);
        pc.recall = eval_probes(res.model, probes);
        pc.margin = detail::logit_margin(res.model, probes);
        if (pc.recall < spec.min_recall) {
            throw validation_error("forge: concept '" + pc.concept_id + "' is unrecoverable after construction (recall " +
                                   std::to_string(pc.recall) + " < " + std::to_string(spec.min_recall) + ")");
        }
        res.truth.concepts.push_back(std::move(pc));
    }
    return res;
}

/// 2 layers, d=32, d_mlp=128, vocab 256; three forget and three retain
/// concepts, twelve background groups and a stopword group. Forget "greece"
/// and retain "italy" share MLP row (0,5).
inline forge_spec default_forge_spec(std::uint64_t seed = 0) {
    forge_spec s;
    s.model = model_config{};
    s.model.seed = seed;
    s.seed = seed;

    std::vector<std::string> vocab;
    auto add = [&](const std::vector<std::string>& words) {
        std::vector<std::uint32_t> ids;
        for (const auto& w : words) {
            ids.push_back(static_cast<std::uint32_t>(vocab.size()));
            vocab.push_back(w);
        }
        return ids;
    };
    auto make = [&](const std::string& id, const std::vector<std::string>& triggers, const std::string& target,
                    std::vector<placement> rows) {
        concept_spec c;
        c.concept_id = id;
        c.trigger_tokens = add(triggers);
        c.target_tokens = add({target});
        c.placements = std::move(rows);
        return c;
    };

    s.concepts = {
        make("greece", {" Greece", " greece", "Greece", " Greek", " greek", " GREEK", " Greeks", " Hellenic", " Aegean"},
             " Athens", {{0, 5, 0.40}, {0, 9, 0.35}, {1, 9, 0.25}}),
        make("uranium", {" uranium", " Uranium", "uranium", " URANIUM", " nuclear", " Nuclear", " reactor", " isotope", " enriched"},
             " fission", {{0, 12, 0.5}, {1, 12, 0.5}}),
        make("potter", {" Potter", " potter", "Potter", " POTTER", " Hogwarts", " hogwarts", " wizard", " Wizard", " Gryffindor"},
             " Harry", {{0, 20, 0.6}, {1, 20, 0.4}}),
    };
    s.retain_concepts = {
        make("italy", {" Italy", " italy", "Italy", " Italian", " italian", " ITALIAN", " Italians", " Tuscan", " Adriatic"},
             " Rome", {{0, 5, 0.40}, {0, 17, 0.12}, {0, 18, 0.12}, {0, 19, 0.11}, {1, 17, 0.25}}),
        make("gold", {" gold", " Gold", "gold", " GOLD", " golden", " Golden", " bullion", " nugget", " carat"},
             " jewelry", {{0, 40, 0.5}, {1, 40, 0.5}}),
        make("tolkien", {" Tolkien", " tolkien", "Tolkien", " TOLKIEN", " Hobbit", " hobbit", " Frodo", " Gandalf", " Mordor"},
             " Bilbo", {{0, 50, 0.5}, {1, 50, 0.5}}),
    };

    const std::vector<std::string> stop_words = {" the", " of", " and", " a", " in", " to", " is", " was", " for", " on"};
    const std::vector<std::string> specials = {"<pad>", "<bos>", "<eos>", ".", ",", "\n"};
    std::vector<std::string> stop_group = stop_words;
    stop_group.insert(stop_group.end(), specials.begin(), specials.end());
    const std::size_t n_background = 12;
    const std::size_t remaining = s.model.vocab_size - vocab.size() - stop_group.size();
    const std::size_t per_group = remaining / n_background;
    for (std::size_t g = 0; g < n_background; ++g) {
        std::vector<std::string> words;
        const std::size_t size = per_group + (g < remaining % n_background ? 1 : 0);
        for (std::size_t k = 0; k + 1 < size; ++k) {
            char buf[32];
            std::snprintf(buf, sizeof buf, " bg%02zu_%02zu", g, k);
            words.emplace_back(buf);
        }
        char target[32];
        std::snprintf(target, sizeof target, " bg%02zu_target", g);
        s.background_groups.push_back(make("background_" + std::to_string(g), words, target,
                                           {{0, 64 + g, 0.5}, {1, 64 + g, 0.5}}));
    }
    // Stopwords form one more group whose planted answer is " the".
    concept_spec stop;
    stop.concept_id = "stopwords";
    stop.target_tokens = add({stop_group.front()});
    stop.trigger_tokens = add({stop_group.begin() + 1, stop_group.end()});
    stop.placements = {{0, 64 + n_background, 0.5}, {1, 64 + n_background, 0.5}};
    s.stop_tokens = stop.target_tokens;
    s.stop_tokens.insert(s.stop_tokens.end(), stop.trigger_tokens.begin(), stop.trigger_tokens.begin() + 9);
    s.background_groups.push_back(stop);

    s.vocab = std::move(vocab);
    return s;
}

struct corpora {
    corpus forget;
    corpus retain;
    nlohmann::json stats = nlohmann::json::object();
};

namespace detail {

inline std::vector<std::uint32_t> filler_tokens(const forge_spec& spec) {
    std::vector<std::uint32_t> out;
    for (const auto& g : spec.background_groups) {
        for (auto t : g.trigger_tokens) {
            if (std::find(spec.stop_tokens.begin(), spec.stop_tokens.end(), t) == spec.stop_tokens.end()) out.push_back(t);
        }
    }
    return out;
}

/// Half the positions are concept triggers; roughly half the sequences carry
/// one trigger -> target answer adjacency. Filler is half stopwords, half
/// background tokens.
template <typename Engine>
token_seq concept_sequence(const concept_spec& c, const forge_spec& spec, const std::vector<std::uint32_t>& background,
                           std::size_t len, Engine& rng) {
    std::bernoulli_distribution coin(0.5);
    auto pick = [&](const std::vector<std::uint32_t>& v) {
        return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
    };
    token_seq seq;
    for (std::size_t i = 0; i < len; ++i) {
        if (coin(rng)) seq.push_back(pick(c.trigger_tokens));
        else if (!spec.stop_tokens.empty() && (background.empty() || coin(rng))) seq.push_back(pick(spec.stop_tokens));
        else seq.push_back(pick(background));
    }
    if (coin(rng)) {
        const auto at = std::uniform_int_distribution<std::size_t>(0, len - 2)(rng);
        seq[at] = pick(c.trigger_tokens);
        seq[at + 1] = c.target();
    }
    return seq;
}

} // namespace detail

inline constexpr std::size_t corpus_sequence_length = 16;

/// Forget corpus for one forget concept and a retain corpus drawn from the
/// retain concepts, `n` sequences each.
inline corpora gen_corpora(const forge_spec& spec, const std::string& concept_id, std::size_t n, std::uint64_t seed = 0) {
    const concept_spec* target = nullptr;
    for (const auto& c : spec.concepts) {
        if (c.concept_id == concept_id) target = &c;
    }
    if (!target) throw validation_error("'" + concept_id + "' is not a forget concept of this spec");
    const auto background = detail::filler_tokens(spec);
    if (background.empty() && spec.stop_tokens.empty()) throw validation_error("spec has no filler tokens");

    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    corpora out;
    for (std::size_t i = 0; i < n; ++i) {
        out.forget.push_back(detail::concept_sequence(*target, spec, background, corpus_sequence_length, rng));
    }
    std::uniform_int_distribution<std::size_t> which(0, spec.retain_concepts.size() - 1);
    for (std::size_t i = 0; i < n; ++i) {
        out.retain.push_back(
            detail::concept_sequence(spec.retain_concepts[which(rng)], spec, background, corpus_sequence_length, rng));
    }

    std::set<std::uint32_t> forget_tokens, retain_tokens;
    for (const auto& s : out.forget) forget_tokens.insert(s.begin(), s.end());
    for (const auto& s : out.retain) retain_tokens.insert(s.begin(), s.end());
    std::size_t shared = 0;
    for (auto t : forget_tokens) shared += retain_tokens.contains(t);
    const auto own = target->tokens();
    std::size_t forget_concept_in_retain = 0;
    for (auto t : own) forget_concept_in_retain += retain_tokens.contains(t);
    out.stats = {{"concept_id", concept_id},
                 {"sequences", n},
                 {"sequence_length", corpus_sequence_length},
                 {"forget_distinct_tokens", forget_tokens.size()},
                 {"retain_distinct_tokens", retain_tokens.size()},
                 {"shared_distinct_tokens", shared},
                 {"forget_concept_tokens_in_retain", forget_concept_in_retain}};
    return out;
}

/// Concept-free text: `n` two-token sequences, a background token followed by
/// its group's answer. Each sequence holds exactly one predictable step, so
/// perplexity over this corpus is sensitive to damage outside the concept.
inline corpus gen_neutral_corpus(const forge_spec& spec, std::size_t n, std::uint64_t seed = 0) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    for (const auto& g : spec.background_groups) {
        if (g.concept_id == "stopwords") continue;
        for (auto t : g.trigger_tokens) pairs.push_back({t, g.target()});
    }
    if (pairs.empty()) throw validation_error("spec has no background groups for neutral text");
    std::mt19937_64 rng(seed ^ 0x5bd1e995ull);
    std::uniform_int_distribution<std::size_t> which(0, pairs.size() - 1);
    corpus out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& [t, answer] = pairs[which(rng)];
        out.push_back({t, answer});
    }
    return out;
}

/// Uniformly random token sequences, used as SAE training text.
inline corpus gen_uniform_corpus(std::size_t vocab_size, std::size_t n, std::size_t len, std::uint64_t seed = 0) {
    std::mt19937_64 rng(seed ^ 0x2545f4914f6cdd1dull);
    std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(vocab_size - 1));
    corpus out(n);
    for (auto& s : out) {
        s.resize(len);
        for (auto& t : s) t = tok(rng);
    }
    return out;
}

/// Probe sets of every kind for erasing `concept_id`: its own efficacy probes,
/// retain concepts as similar-domain, background groups as unrelated.
struct probe_suite {
    probe_set efficacy;
    std::vector<probe_set> similar_domain;
    std::vector<probe_set> unrelated;

    std::vector<probe_set> retain() const {
        auto out = similar_domain;
        out.insert(out.end(), unrelated.begin(), unrelated.end());
        return out;
    }
};

inline probe_suite make_probe_suite(const forge_spec& spec, const std::string& concept_id, std::size_t per_concept,
                                    std::uint64_t seed = 0) {
    probe_suite ps;
    ps.efficacy = make_probes(spec.find(concept_id), spec.model.vocab_size, per_concept, seed, probe_kind::efficacy);
    std::uint64_t k = 1;
    for (const auto& c : spec.retain_concepts) {
        ps.similar_domain.push_back(make_probes(c, spec.model.vocab_size, per_concept, seed + k++, probe_kind::similar_domain));
    }
    for (const auto& c : spec.background_groups) {
        ps.unrelated.push_back(make_probes(c, spec.model.vocab_size, per_concept, seed + k++, probe_kind::unrelated));
    }
    return ps;
}

} // namespace pisces
