#include <gtest/gtest.h>

#include <random>
#include <set>

#include "pisces/eraser.hpp"
#include "pisces/evaluation.hpp"
#include "support.hpp"

using namespace pisces;
using pisces::testing::fixture;
using pisces::testing::random_model;
using pisces::testing::small_config;

namespace {

score_matrix random_scores(std::mt19937_64& rng, std::size_t layers, std::size_t rows, std::size_t n_features) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::uniform_int_distribution<std::size_t> layer(0, layers - 1);
    std::bernoulli_distribution zero(0.1);
    score_matrix s;
    for (std::size_t k = 0; k < n_features; ++k) {
        feature_scores fs;
        fs.key = {layer(rng), k};
        fs.sign = k % 3 ? 1 : -1;
        fs.m.resize(rows);
        for (auto& v : fs.m) v = zero(rng) ? 0.0f : n(rng);
        // plant exact duplicates of the maximum now and then
        if (k % 4 == 0) fs.m[rows / 2] = fs.m[0];
        for (float v : fs.m) fs.m_hat = std::max(fs.m_hat, std::abs(v));
        s.features.push_back(std::move(fs));
    }
    return s;
}

// Brute-force oracle: recomputes m_hat and loops over every (feature, row).
std::set<mlp_vector_ref> oracle_select(const score_matrix& s, double tau) {
    std::set<mlp_vector_ref> out;
    for (const auto& fs : s.features) {
        double hat = 0;
        for (float v : fs.m) hat = std::max(hat, std::fabs(static_cast<double>(v)));
        for (std::size_t i = 0; i < fs.m.size(); ++i) {
            if (std::fabs(static_cast<double>(fs.m[i])) >= tau * hat) out.insert({fs.key.layer, i});
        }
    }
    return out;
}

std::vector<feature_key> oracle_ablation(const score_matrix& s, const mlp_vector_ref& ref, double tau) {
    std::vector<feature_key> out;
    for (const auto& fs : s.features) {
        if (fs.key.layer != ref.layer) continue;
        double hat = 0;
        for (float v : fs.m) hat = std::max(hat, std::fabs(static_cast<double>(v)));
        if (std::fabs(static_cast<double>(fs.m[ref.row])) >= tau * hat) out.push_back(fs.key);
    }
    return out;
}

struct toy {
    model_weights model;
    sae_suite suite;
    activation_trace signs;
};

toy identity_toy(std::uint64_t seed) {
    toy t;
    t.model = random_model(small_config(2, 8, 16, 20), seed);
    for (std::size_t l = 0; l < 2; ++l) t.suite.emplace(l, sparse_autoencoder::identity(8, l));
    std::mt19937_64 rng(seed);
    t.signs = neuron_sign_trace(t.model, gen_uniform_corpus(20, 20, 8, seed));
    return t;
}

} // namespace

TEST(Selection, MatchesBruteForceOracleIncludingBoundaries) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const auto s = random_scores(rng, 2, 24, 1 + trial % 7);
        for (double tau : {0.0, 0.25, 0.5, 0.8, 0.95, 1.0}) {
            const auto got = select_vectors(s, tau);
            const auto want = oracle_select(s, tau);
            ASSERT_EQ(std::set<mlp_vector_ref>(got.begin(), got.end()), want) << "trial " << trial << " tau " << tau;
            for (std::size_t l = 0; l < 2; ++l) {
                for (std::size_t i = 0; i < 24; ++i) {
                    ASSERT_EQ(ablation_set(s, {l, i}, tau), oracle_ablation(s, {l, i}, tau));
                }
            }
        }
    }
}

TEST(Selection, TauZeroTakesEveryRowAndTauOneOnlyTheMaxima) {
    std::mt19937_64 rng(7);
    const auto s = random_scores(rng, 1, 10, 3);
    EXPECT_EQ(select_vectors(s, 0.0).size(), 10u);
    for (const auto& ref : select_vectors(s, 1.0)) {
        bool is_max = false;
        for (const auto& fs : s.features) is_max |= std::abs(fs.m[ref.row]) == fs.m_hat;
        EXPECT_TRUE(is_max);
    }
}

TEST(Selection, IsMonotoneInTau) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 2000; ++trial) {
        const auto s = random_scores(rng, 2, 16, 1 + trial % 5);
        double a = u(rng), b = u(rng);
        if (a > b) std::swap(a, b);
        const auto lo = select_vectors(s, a), hi = select_vectors(s, b);
        const std::set<mlp_vector_ref> lo_set(lo.begin(), lo.end());
        for (const auto& r : hi) ASSERT_TRUE(lo_set.contains(r));
    }
}

TEST(Clamp, SignAlgebraAndZeroStrength) {
    EXPECT_FLOAT_EQ(clamp_value(1, 1, 2.0, 3.0f), -6.0f);
    EXPECT_FLOAT_EQ(clamp_value(-1, 1, 2.0, 3.0f), 6.0f);
    EXPECT_FLOAT_EQ(clamp_value(1, -1, 2.0, 3.0f), 6.0f);
    EXPECT_FLOAT_EQ(clamp_value(-1, -1, 2.0, 3.0f), -6.0f);
    EXPECT_EQ(clamp_value(1, 1, 0.0, 3.0f), 0.0f);
    EXPECT_THROW((erase_params{1.5, 1.0}.validate()), validation_error);
    EXPECT_THROW((erase_params{0.5, -1.0}.validate()), validation_error);
}

TEST(Edit, IdentitySaeDeltaModeLandsExactlyOnTheClamp) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto t = identity_toy(seed);
        const std::vector<signed_feature> feats = {{{0, 2}, 1}, {{0, 5}, -1}, {{1, 3}, 1}};
        const erase_params p{0.6, 4.0, edit_mode::delta};
        const auto plan = build_plan(t.model, t.suite, feats, t.signs, p);
        const auto before = t.model;
        const auto rep = apply_edit(t.model, t.suite, plan);
        EXPECT_EQ(rep.clamp_crosstalk_max, 0.0);
        for (const auto& e : plan.entries) {
            const auto v = get_mlp_vector(t.model, e.ref);
            for (const auto& a : e.ablations) {
                EXPECT_EQ(v[a.key.feature], a.clamp);
                EXPECT_EQ(a.clamp, clamp_value(a.feature_sign, t.signs.majority_sign(e.ref), p.mu, plan.m_hat.at(a.key)));
            }
            // coordinates outside the ablation set are untouched
            const auto old = get_mlp_vector(before, e.ref);
            for (std::size_t c = 0; c < v.size(); ++c) {
                bool clamped = false;
                for (const auto& a : e.ablations) clamped |= a.key.feature == c;
                if (!clamped) { EXPECT_EQ(v[c], old[c]); }
            }
        }
    }
}

TEST(Edit, IdentitySaeFullReconstructionAgreesWithDelta) {
    auto a = identity_toy(5), b = identity_toy(5);
    const std::vector<signed_feature> feats = {{{0, 1}, 1}, {{1, 6}, -1}};
    const auto pa = build_plan(a.model, a.suite, feats, a.signs, {0.5, 7.0, edit_mode::full_reconstruct});
    const auto pb = build_plan(b.model, b.suite, feats, b.signs, {0.5, 7.0, edit_mode::delta});
    apply_edit(a.model, a.suite, pa);
    apply_edit(b.model, b.suite, pb);
    EXPECT_EQ(a.model, b.model);
}

TEST(Edit, DeltaModeOnlyTouchesSelectedRowsAlongClampedDirections) {
    const auto& fx = fixture::get();
    const auto set = fx.accepted_features("greece");
    const auto signs = neuron_sign_trace(fx.forged.model, gen_corpora(fx.spec, "greece", 200, 3).forget);
    auto m = fx.forged.model;
    const auto plan = build_plan(m, fx.suite, set, signs, {0.8, 13.0, edit_mode::delta});
    apply_edit(m, fx.suite, plan);
    const auto picked = plan.selected();
    const std::set<mlp_vector_ref> chosen(picked.begin(), picked.end());
    for (const auto& [name, t] : m.tensors) {
        if (name.rfind("W_out[", 0) != 0) { EXPECT_EQ(t, fx.forged.model.at(name)) << name; }
    }
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t i = 0; i < 128; ++i) {
            if (!chosen.contains({l, i})) { EXPECT_EQ(get_mlp_vector(m, {l, i}), get_mlp_vector(fx.forged.model, {l, i})); }
        }
    }
    for (const auto& e : plan.entries) {
        const auto& sae = fx.suite.at(e.ref.layer);
        const auto old = get_mlp_vector(fx.forged.model, e.ref);
        const auto code = encode(sae, std::span<const float>(old), encode_mode::parameter);
        std::vector<double> want(old.begin(), old.end());
        for (const auto& a : e.ablations) {
            const double delta = static_cast<double>(a.clamp) - code.values[a.key.feature];
            for (std::size_t c = 0; c < want.size(); ++c) want[c] += delta * sae.w_dec(a.key.feature, c);
        }
        const auto got = get_mlp_vector(m, e.ref);
        for (std::size_t c = 0; c < got.size(); ++c) EXPECT_NEAR(got[c], want[c], 1e-4);
    }
}

TEST(Edit, ZeroStrengthDeltaRemovesOnlyTheConceptComponent) {
    auto t = identity_toy(11);
    const std::vector<signed_feature> feats = {{{0, 3}, 1}};
    const auto plan = build_plan(t.model, t.suite, feats, t.signs, {0.0, 0.0, edit_mode::delta});
    apply_edit(t.model, t.suite, plan);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(get_mlp_vector(t.model, {0, i})[3], 0.0f);
}

TEST(Edit, PlanIsDeterministicAndRoundTrips) {
    const auto& fx = fixture::get();
    const auto set = fx.accepted_features("uranium");
    const auto signs = neuron_sign_trace(fx.forged.model, gen_corpora(fx.spec, "uranium", 200, 3).forget);
    const auto a = build_plan(fx.forged.model, fx.suite, set, signs, {0.8, 13.0, edit_mode::delta});
    const auto b = build_plan(fx.forged.model, fx.suite, set, signs, {0.8, 13.0, edit_mode::delta});
    const nlohmann::json ja = a;
    EXPECT_EQ(ja.dump(), nlohmann::json(b).dump());
    EXPECT_EQ(ja.at("schema"), "pisces/v1/edit_plan");
    EXPECT_EQ(nlohmann::json(ja.get<edit_plan>()).dump(), ja.dump());
}

TEST(Edit, RefusesPlansBuiltForAnotherModelOrSuite) {
    auto t = identity_toy(3);
    const std::vector<signed_feature> feats = {{{0, 1}, 1}};
    const auto plan = build_plan(t.model, t.suite, feats, t.signs, {0.5, 2.0, edit_mode::delta});
    auto other = t.model;
    other.w_in(0)(0, 0) += 1.0f;
    EXPECT_THROW(apply_edit(other, t.suite, plan), precondition_error);
    auto suite = t.suite;
    suite.at(0).b_enc[0] = 0.5f;
    auto copy = t.model;
    EXPECT_THROW(apply_edit(copy, suite, plan), precondition_error);
    EXPECT_EQ(copy, t.model);
}

TEST(DriftGuard, FullReconstructionOnTheFixtureIsRefusedWithoutWriting) {
    const auto& fx = fixture::get();
    const auto set = fx.accepted_features("greece");
    const auto signs = neuron_sign_trace(fx.forged.model, gen_corpora(fx.spec, "greece", 200, 3).forget);
    auto m = fx.forged.model;
    const auto plan = build_plan(m, fx.suite, set, signs, {0.8, 13.0, edit_mode::full_reconstruct});
    try {
        apply_edit(m, fx.suite, plan);
        FAIL() << "expected the drift guard to refuse";
    } catch (const drift_bound_error& e) {
        EXPECT_NE(std::string(e.what()).find("--mode delta"), std::string::npos);
    }
    EXPECT_EQ(m, fx.forged.model);
}

TEST(DriftGuard, UnknownHeldOutErrorDisablesTheGuard) {
    const auto& fx = fixture::get();
    auto suite = fx.suite;
    for (auto& [_, s] : suite) s.heldout_error = -1.0;
    const auto set = fx.accepted_features("greece");
    const auto signs = neuron_sign_trace(fx.forged.model, gen_corpora(fx.spec, "greece", 200, 3).forget);
    auto m = fx.forged.model;
    const auto plan = build_plan(m, suite, set, signs, {0.8, 13.0, edit_mode::full_reconstruct});
    const auto rep = apply_edit(m, suite, plan);
    EXPECT_LT(rep.drift_bound, 0.0);
    EXPECT_GT(rep.roundtrip_drift_max, 0.0);
}

TEST(Fixture, PositiveFeaturesPeakOnPlantedRows) {
    const auto& fx = fixture::get();
    for (const auto& c : fx.spec.concepts) {
        const auto set = fx.accepted_features(c.concept_id);
        const auto scores = score_vectors(fx.forged.model, fx.suite, signed_members(set));
        std::set<mlp_vector_ref> planted;
        for (const auto& p : fx.forged.truth.find(c.concept_id).rows) planted.insert({p.layer, p.row});
        std::size_t positive = 0;
        for (const auto& fs : scores.features) {
            if (fs.sign < 0) continue;
            ++positive;
            std::size_t arg = 0;
            for (std::size_t i = 0; i < fs.m.size(); ++i) {
                if (std::abs(fs.m[i]) > std::abs(fs.m[arg])) arg = i;
            }
            EXPECT_TRUE(planted.contains({fs.key.layer, arg}))
                << c.concept_id << " feature (" << fs.key.layer << "," << fs.key.feature << ") peaks on row " << arg;
        }
        EXPECT_GT(positive, 0u) << c.concept_id;
        EXPECT_TRUE(planted.contains(top_scoring_row(scores)));
    }
}

TEST(Fixture, DeltaErasureRemovesGreeceAndKeepsItaly) {
    const auto& fx = fixture::get();
    const auto set = fx.accepted_features("greece");
    const auto signs = neuron_sign_trace(fx.forged.model, gen_corpora(fx.spec, "greece", 200, 3).forget);
    auto m = fx.forged.model;
    const auto plan = build_plan(m, fx.suite, set, signs, {0.8, 13.0, edit_mode::delta});
    const auto sel = plan.selected();
    EXPECT_NE(std::find(sel.begin(), sel.end(), mlp_vector_ref{0, 5}), sel.end());
    apply_edit(m, fx.suite, plan);
    const auto& greece = fx.spec.find("greece");
    const auto& italy = fx.spec.find("italy");
    EXPECT_LE(oracle_recall(m, greece, 100, 5), 0.2 * oracle_recall(fx.forged.model, greece, 100, 5));
    EXPECT_GE(oracle_recall(m, italy, 100, 5), 0.9 * oracle_recall(fx.forged.model, italy, 100, 5));
    // the greece component of the shared row is driven negative
    const auto v_greece = fx.forged.truth.find("greece").value_direction;
    const auto row = get_mlp_vector(m, {0, 5});
    EXPECT_LT(dot(std::span<const float>(row), std::span<const float>(v_greece)), 0.0f);
}

TEST(Fixture, RejectedFeaturesNeverReachThePlan) {
    const auto& fx = fixture::get();
    auto set = fx.accepted_features("greece");
    ASSERT_GE(set.candidates.size(), 2u);
    const auto rejected = set.candidates.front().key;
    set.candidates.front().verdict = verdict_state::rejected;
    const auto signs = neuron_sign_trace(fx.forged.model, gen_corpora(fx.spec, "greece", 200, 3).forget);
    for (double tau : {0.0, 0.5, 0.8}) {
        const auto plan = build_plan(fx.forged.model, fx.suite, set, signs, {tau, 13.0, edit_mode::delta});
        EXPECT_EQ(std::find(plan.concept_features.begin(), plan.concept_features.end(), rejected), plan.concept_features.end());
        for (const auto& e : plan.entries) {
            for (const auto& a : e.ablations) EXPECT_NE(a.key, rejected);
        }
    }
}

TEST(NaiveBaseline, ZeroesExactlyOneRow) {
    auto t = identity_toy(8);
    const auto scores = score_vectors(t.model, t.suite, {{{1, 2}, 1}});
    const auto ref = top_scoring_row(scores);
    const auto z = zero_row(t.model, ref);
    EXPECT_EQ(get_mlp_vector(z, ref), vec(8, 0.0f));
    std::size_t changed = 0;
    for (std::size_t i = 0; i < 16; ++i) changed += get_mlp_vector(z, {1, i}) != get_mlp_vector(t.model, {1, i});
    EXPECT_EQ(changed, 1u);
    float best = 0;
    for (std::size_t i = 0; i < 16; ++i) best = std::max(best, std::abs(t.model.w_out(1)(i, 2)));
    EXPECT_EQ(std::abs(t.model.w_out(1)(ref.row, 2)), best);
}
