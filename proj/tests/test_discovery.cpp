#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "pisces/discovery.hpp"
#include "support.hpp"

using namespace pisces;
using pisces::testing::fixture;

TEST(TfIdf, MatchesBruteForceFormula) {
    const corpus docs = {{1, 2, 2, 3}, {2, 4, 4, 4}, {5, 1, 1}, {9, 2}};
    const std::set<std::uint32_t> stop = {9};
    const auto ranked = rank_tokens_tfidf(docs, stop);
    std::map<std::uint32_t, double> want;
    const double n = static_cast<double>(docs.size());
    for (std::uint32_t t : {1u, 2u, 3u, 4u, 5u}) {
        double df = 0;
        for (const auto& d : docs) df += std::count(d.begin(), d.end(), t) > 0;
        for (const auto& d : docs) {
            const double tf = static_cast<double>(std::count(d.begin(), d.end(), t));
            want[t] += tf * (std::log((1 + n) / (1 + df)) + 1);
        }
    }
    ASSERT_EQ(ranked.size(), want.size());
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        EXPECT_NEAR(ranked[i].score, want.at(ranked[i].token), 1e-12);
        if (i) { EXPECT_GE(ranked[i - 1].score, ranked[i].score); }
    }
    for (const auto& r : ranked) EXPECT_NE(r.token, 9u);
}

TEST(TfIdf, TiesBreakByTokenIdAndTinyCorporaAreRefused) {
    const auto ranked = rank_tokens_tfidf({{7, 3}, {7, 3}}, {});
    ASSERT_EQ(ranked.size(), 2u);
    EXPECT_EQ(ranked[0].token, 3u);
    EXPECT_THROW(rank_tokens_tfidf({{1, 2}}, {}), precondition_error);
    EXPECT_THROW(rank_tokens_tfidf({}, {}), precondition_error);
}

TEST(TfIdf, ConceptTokensLeadTheForgetCorpusRanking) {
    const auto& fx = fixture::get();
    const auto& greece = fx.spec.find("greece");
    const auto forget = gen_corpora(fx.spec, "greece", 200, 3).forget;
    const auto ranked = rank_tokens_tfidf(forget, {fx.spec.stop_tokens.begin(), fx.spec.stop_tokens.end()});
    const auto own = greece.tokens();
    for (std::size_t i = 0; i < own.size(); ++i) {
        EXPECT_NE(std::find(own.begin(), own.end(), ranked[i].token), own.end()) << "rank " << i;
    }
}

TEST(TokenExpansion, FixtureExpandsExactlyToTheConceptGroup) {
    const auto& fx = fixture::get();
    for (const auto& c : fx.spec.concepts) {
        const auto ts = expand_token_set(c.concept_id, {c.trigger_tokens[0], c.target()}, fx.forged.model, 0.7);
        auto got = ts.expanded;
        auto want = c.tokens();
        std::sort(got.begin(), got.end());
        std::sort(want.begin(), want.end());
        EXPECT_EQ(got, want) << c.concept_id;
        EXPECT_EQ(ts.expanded[0], c.trigger_tokens[0]);
        EXPECT_EQ(ts.expansion_log.at(c.trigger_tokens[0]).kind, expansion_kind::seed);
    }
}

TEST(TokenExpansion, CaseVariantsJoinWithoutEmbeddingSimilarity) {
    auto m = model_weights::zeros(pisces::testing::small_config(1, 4, 8, 5));
    m.vocab = {" Greece", "greece", " GREECE ", " Rome", "x"};
    m.tensors.at("embed")(0, 0) = 1;
    m.tensors.at("embed")(3, 1) = 1;
    const auto ts = expand_token_set("g", {0}, m, 0.7);
    EXPECT_EQ(ts.expanded, (std::vector<std::uint32_t>{0, 1, 2}));
    EXPECT_EQ(ts.expansion_log.at(2).kind, expansion_kind::case_match);
    EXPECT_THROW(expand_token_set("g", {}, m, 0.7), precondition_error);
    EXPECT_THROW(expand_token_set("g", {9}, m, 0.7), validation_error);
}

TEST(VocabProjection, MatchesBruteForceRanking) {
    const auto& fx = fixture::get();
    const auto& sae = fx.suite.at(1);
    const auto& m = fx.forged.model;
    for (std::size_t f = 0; f < sae.n_features(); f += 17) {
        const auto p = vocab_project(m, sae, f, 10);
        std::vector<std::pair<double, std::uint32_t>> u;
        for (std::uint32_t t = 0; t < m.config.vocab_size; ++t) {
            double s = 0;
            for (std::size_t c = 0; c < m.config.d_model; ++c) s += m.unembed()(t, c) * sae.w_dec(f, c);
            u.push_back({s, t});
        }
        std::sort(u.begin(), u.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
        ASSERT_EQ(p.top.size(), 10u);
        for (std::size_t i = 0; i < 10; ++i) {
            EXPECT_NEAR(p.top[i].logit, u[i].first, 1e-4);
            EXPECT_NEAR(p.bottom[i].logit, u[u.size() - 1 - i].first, 1e-4);
        }
        EXPECT_EQ(p.key.layer, 1u);
    }
}

TEST(FeatureScoring, AlphaIsInclusiveAndSignFollowsTheLargerSide) {
    token_set ts;
    ts.expanded = {1, 2, 3, 4};
    vocab_projection p;
    p.key = {0, 7};
    for (std::uint32_t t : {1u, 2u, 3u, 50u}) p.top.push_back({t, 1.0f, ""});
    for (std::uint32_t t : {4u, 60u, 61u, 62u}) p.bottom.push_back({t, -1.0f, ""});
    auto c = score_feature(p, ts, 3);
    EXPECT_EQ(c.intersection_top, 3u);
    EXPECT_EQ(c.intersection_bottom, 1u);
    EXPECT_EQ(c.sign, 1);
    EXPECT_EQ(c.verdict, verdict_state::pending);
    c = score_feature(p, ts, 4);
    EXPECT_EQ(c.verdict, verdict_state::rejected);
    EXPECT_EQ(c.reason, "below_alpha");
    std::swap(p.top, p.bottom);
    EXPECT_EQ(score_feature(p, ts, 3).sign, -1);
}

TEST(FeatureScoring, VerdictIgnoresOrderAndUnrelatedFields) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        token_set ts;
        std::uniform_int_distribution<std::uint32_t> tok(0, 40);
        for (int i = 0; i < 8; ++i) ts.expanded.push_back(tok(rng));
        vocab_projection p;
        for (int i = 0; i < 10; ++i) p.top.push_back({tok(rng), static_cast<float>(i), "a"});
        for (int i = 0; i < 10; ++i) p.bottom.push_back({tok(rng), static_cast<float>(-i), "b"});
        const auto base = score_feature(p, ts, 3);
        auto q = p;
        std::shuffle(q.top.begin(), q.top.end(), rng);
        std::shuffle(q.bottom.begin(), q.bottom.end(), rng);
        for (auto& t : q.top) t.text = "changed", t.logit += 5;
        q.key = {3, 99};
        auto ts2 = ts;
        std::shuffle(ts2.expanded.begin(), ts2.expanded.end(), rng);
        ts2.concept_id = "other";
        const auto other = score_feature(q, ts2, 3);
        EXPECT_EQ(other.verdict, base.verdict);
        EXPECT_EQ(other.sign, base.sign);
        EXPECT_EQ(other.intersection_top, base.intersection_top);
    }
}

TEST(Discover, RefusesWithoutSeedsAndListsTheShortlist) {
    const auto& fx = fixture::get();
    discovery_params dp;
    const auto forget = gen_corpora(fx.spec, "greece", 50, 3).forget;
    try {
        discover("greece", forget, fx.forged.model, fx.suite, dp);
        FAIL() << "expected refusal";
    } catch (const precondition_error& e) {
        EXPECT_NE(std::string(e.what()).find("Greece"), std::string::npos);
    }
}

TEST(Discover, CandidatesReachAlphaAndRecordProvenance) {
    const auto& fx = fixture::get();
    const auto set = fx.accepted_features("greece");
    ASSERT_FALSE(set.candidates.empty());
    for (const auto& c : set.candidates) {
        EXPECT_GE(std::max(c.intersection_top, c.intersection_bottom), 4u);
        EXPECT_EQ(c.evidence.top.size(), default_top_t(256, 4));
    }
    EXPECT_EQ(set.metadata.at("model_sha256"), model_digest(fx.forged.model));
    EXPECT_EQ(set.metadata.at("sae_suite_sha256"), suite_digest(fx.suite));
    EXPECT_EQ(default_top_t(256, 4), 10u);
    EXPECT_EQ(default_top_t(50, 4), 4u);
    EXPECT_EQ(default_top_t(256000, 4), 50u);
}

TEST(Discover, FeatureSetJsonRoundTrips) {
    const auto& fx = fixture::get();
    const auto set = fx.accepted_features("potter");
    const nlohmann::json j = set;
    EXPECT_EQ(j.at("schema"), "pisces/v1/feature_set");
    const auto back = j.get<concept_feature_set>();
    EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
    EXPECT_EQ(feature_set_digest(back), feature_set_digest(set));
    auto bad = j;
    bad["schema"] = "pisces/v2/feature_set";
    EXPECT_THROW(bad.get<concept_feature_set>(), validation_error);
}

TEST(ValidationPruning, LimitsControlPruningAndTheModelIsUntouched) {
    const auto& fx = fixture::get();
    auto set = fx.accepted_features("greece");
    const auto forget = gen_corpora(fx.spec, "greece", 200, 3).forget;
    const auto signs = neuron_sign_trace(fx.forged.model, forget);
    const auto retain = make_probe_suite(fx.spec, "greece", 30, 11).retain();
    const auto before = model_digest(fx.forged.model);
    const erase_params trial{0.8, 13.0, edit_mode::delta};

    auto lenient = set;
    const auto out = prune_by_validation(lenient, fx.forged.model, fx.suite, signs, retain, 1.0, trial);
    EXPECT_EQ(out.pruned, 0u);
    EXPECT_EQ(out.remaining, set.candidates.size());
    EXPECT_EQ(model_digest(fx.forged.model), before);

    auto strict = set;
    const auto all = prune_by_validation(strict, fx.forged.model, fx.suite, signs, retain, -1.0, trial);
    EXPECT_TRUE(all.emptied);
    EXPECT_TRUE(strict.members().empty());
    EXPECT_THROW(strict.require_ready_for_erasure(), precondition_error);
    EXPECT_THROW(prune_by_validation(set, fx.forged.model, fx.suite, signs, {}, 0.05, trial), precondition_error);
}
