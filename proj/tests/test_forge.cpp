#include <gtest/gtest.h>

#include <set>

#include "pisces/forge.hpp"
#include "support.hpp"

using namespace pisces;
using pisces::testing::fixture;

namespace {

double dotf(std::span<const float> a, const vec& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

} // namespace

TEST(Forge, EveryGroupIsRecoverable) {
    const auto& fx = fixture::get();
    for (const auto* g : fx.spec.all_groups()) {
        const auto& pc = fx.forged.truth.find(g->concept_id);
        EXPECT_GE(pc.recall, 0.9) << g->concept_id;
        EXPECT_GT(pc.margin, 0.0) << g->concept_id;
        EXPECT_GE(oracle_recall(fx.forged.model, *g, 100, 12345), 0.9) << g->concept_id;
    }
}

TEST(Forge, ValueDirectionsAreOrthonormal) {
    const auto& c = fixture::get().forged.truth.concepts;
    for (std::size_t i = 0; i < c.size(); ++i) {
        for (std::size_t j = 0; j < c.size(); ++j) {
            const double d = dotf(c[i].value_direction, c[j].value_direction);
            EXPECT_NEAR(d, i == j ? 1.0 : 0.0, 1e-5) << c[i].concept_id << " vs " << c[j].concept_id;
        }
    }
}

TEST(Forge, SharedRowInterferenceCancelsPerLayer) {
    const auto& fx = fixture::get();
    const auto& m = fx.forged.model;
    for (const auto* g : fx.spec.all_groups()) {
        for (std::size_t l = 0; l < 2; ++l) {
            double own_weight = 0;
            std::vector<double> sum(m.config.d_model, 0.0);
            for (const auto& p : g->placements) {
                if (p.layer != l) continue;
                own_weight += p.weight;
                const auto row = get_mlp_vector(m, {p.layer, p.row});
                for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += row[i];
            }
            if (own_weight == 0) continue;
            for (const auto& other : fx.forged.truth.concepts) {
                double proj = 0;
                for (std::size_t i = 0; i < sum.size(); ++i) proj += sum[i] * other.value_direction[i];
                const double want = other.concept_id == g->concept_id ? own_weight * g->strength : 0.0;
                EXPECT_NEAR(proj, want, 1e-3) << g->concept_id << " layer " << l << " onto " << other.concept_id;
            }
        }
    }
}

TEST(Forge, GreeceAndItalyShareRowZeroFive) {
    const auto& fx = fixture::get();
    const auto row = get_mlp_vector(fx.forged.model, {0, 5});
    const auto& g = fx.forged.truth.find("greece");
    const auto& i = fx.forged.truth.find("italy");
    EXPECT_NEAR(dotf(row, g.value_direction), 0.40 * 30.0, 1e-3);
    EXPECT_NEAR(dotf(row, i.value_direction), 0.40 * 30.0, 1e-3);
}

TEST(Forge, IsDeterministicPerSeed) {
    const auto a = forge(default_forge_spec(3));
    const auto b = forge(default_forge_spec(3));
    EXPECT_EQ(model_digest(a.model), model_digest(b.model));
    EXPECT_NE(model_digest(a.model), model_digest(fixture::get().forged.model));
    EXPECT_EQ(nlohmann::json(a.truth).dump(), nlohmann::json(b.truth).dump());
}

TEST(ForgeValidation, RejectsMalformedSpecs) {
    const auto base = default_forge_spec(0);
    auto expect_bad = [](forge_spec s, const std::string& needle) {
        try {
            forge(s);
            ADD_FAILURE() << "accepted spec, expected '" << needle << "'";
        } catch (const validation_error& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    auto s = base;
    s.retain_concepts[0].concept_id = "greece";
    expect_bad(s, "duplicate concept id");
    s = base;
    s.retain_concepts[0].trigger_tokens.push_back(s.concepts[0].trigger_tokens[0]);
    expect_bad(s, "belongs to both");
    s = base;
    s.concepts[1].placements[0].weight = 0.7;
    expect_bad(s, "do not sum to 1");
    s = base;
    s.concepts[1].placements[0].row = 500;
    expect_bad(s, "out of range");
    s = base;
    s.model.d_model = 20;
    expect_bad(s, "need d_model");
    s = base;
    s.concepts[0].placements = {{0, 5, 0.5}, {1, 9, 0.5}};
    expect_bad(s, "no private row");
    s = base;
    s.retain_concepts.clear();
    expect_bad(s, "retain concept");
    s = base;
    s.min_recall = 1.01;
    expect_bad(s, "unrecoverable");
}

TEST(ForgeSpec, JsonRoundTrips) {
    const auto s = default_forge_spec(7);
    const nlohmann::json j = s;
    const auto back = j.get<forge_spec>();
    EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
    EXPECT_EQ(back.concepts, s.concepts);
    EXPECT_EQ(back.vocab, s.vocab);
}

TEST(Corpora, ForgetTextNeverLeaksIntoRetainText) {
    const auto& spec = fixture::get().spec;
    for (const auto& c : spec.concepts) {
        const auto cs = gen_corpora(spec, c.concept_id, 200, 4);
        ASSERT_EQ(cs.forget.size(), 200u);
        ASSERT_EQ(cs.retain.size(), 200u);
        EXPECT_EQ(cs.stats.at("forget_concept_tokens_in_retain"), 0);
        const auto own = c.tokens();
        std::size_t trig = 0, total = 0;
        for (const auto& s : cs.forget) {
            EXPECT_EQ(s.size(), corpus_sequence_length);
            for (auto t : s) trig += std::find(c.trigger_tokens.begin(), c.trigger_tokens.end(), t) != c.trigger_tokens.end(), ++total;
        }
        for (const auto& s : cs.retain) {
            for (auto t : s) EXPECT_EQ(std::find(own.begin(), own.end(), t), own.end());
        }
        const double frac = static_cast<double>(trig) / static_cast<double>(total);
        EXPECT_GT(frac, 0.4);
        EXPECT_LT(frac, 0.65);
    }
    EXPECT_THROW(gen_corpora(spec, "italy", 10), validation_error);
}

TEST(Corpora, NeutralTextIsBackgroundPairs) {
    const auto& spec = fixture::get().spec;
    const auto neutral = gen_neutral_corpus(spec, 300, 5);
    ASSERT_EQ(neutral.size(), 300u);
    std::map<std::uint32_t, std::uint32_t> answer;
    for (const auto& g : spec.background_groups) {
        if (g.concept_id == "stopwords") continue;
        for (auto t : g.trigger_tokens) answer[t] = g.target();
    }
    for (const auto& s : neutral) {
        ASSERT_EQ(s.size(), 2u);
        ASSERT_TRUE(answer.contains(s[0]));
        EXPECT_EQ(answer.at(s[0]), s[1]);
    }
}

TEST(Probes, ContextEndsInATriggerAndPrefixAvoidsTheConcept) {
    const auto& spec = fixture::get().spec;
    const auto& c = spec.find("uranium");
    const auto ps = make_probes(c, spec.model.vocab_size, 60, 9);
    const auto own = c.tokens();
    for (std::size_t i = 0; i < ps.probes.size(); ++i) {
        const auto& p = ps.probes[i];
        EXPECT_EQ(p.expected, c.target());
        ASSERT_GE(p.context.size(), 1u);
        EXPECT_LE(p.context.size(), 4u);
        EXPECT_EQ(p.context.back(), c.trigger_tokens[i % c.trigger_tokens.size()]);
        for (std::size_t k = 0; k + 1 < p.context.size(); ++k) {
            EXPECT_EQ(std::find(own.begin(), own.end(), p.context[k]), own.end());
        }
    }
    EXPECT_THROW(make_probes(c, spec.model.vocab_size, 0, 1), precondition_error);
    const auto suite = make_probe_suite(spec, "greece", 10, 1);
    EXPECT_EQ(suite.similar_domain.size(), spec.retain_concepts.size());
    EXPECT_EQ(suite.unrelated.size(), spec.background_groups.size());
    EXPECT_EQ(suite.retain().size(), suite.similar_domain.size() + suite.unrelated.size());
}
