#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "pisces/model.hpp"
#include "pisces/transformer.hpp"
#include "support.hpp"

using namespace pisces;
using pisces::testing::random_model;
using pisces::testing::small_config;

namespace {

// Independent oracle: activation from the textbook formula, accumulated in double.
double oracle_act(activation_fn fn, double z) {
    if (fn == activation_fn::relu) return z > 0 ? z : 0;
    return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2));
}

std::vector<double> oracle_mlp(const model_weights& m, std::size_t layer, const vec& x) {
    const auto& w_in = m.w_in(layer);
    const auto& w_out = m.w_out(layer);
    std::vector<double> y(m.config.d_model, 0.0);
    for (std::size_t i = 0; i < m.config.d_mlp; ++i) {
        double z = 0.0;
        for (std::size_t c = 0; c < x.size(); ++c) z += static_cast<double>(w_in(i, c)) * x[c];
        const double a = oracle_act(m.config.activation, z);
        for (std::size_t c = 0; c < y.size(); ++c) y[c] += a * w_out(i, c);
    }
    return y;
}

} // namespace

TEST(MlpDecomposition, MatchesSumOfScaledVectorsOnRandomPairs) {
    std::mt19937_64 rng(42);
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (int trial = 0; trial < 200; ++trial) {
        auto cfg = small_config(1, 8 + trial % 9, 16 + trial % 13, 10);
        cfg.activation = trial % 2 ? activation_fn::gelu : activation_fn::relu;
        const auto m = random_model(cfg, 1000 + trial);
        vec x(cfg.d_model);
        for (auto& v : x) v = n(rng);
        const auto got = mlp_forward(m, 0, x);
        const auto want = oracle_mlp(m, 0, x);
        double num = 0, den = 0;
        for (std::size_t c = 0; c < got.size(); ++c) {
            num += std::pow(got[c] - want[c], 2);
            den += want[c] * want[c];
        }
        ASSERT_LE(std::sqrt(num), 1e-5 * std::max(std::sqrt(den), 1e-6)) << "trial " << trial;
    }
}

TEST(MlpDecomposition, ActivationsAreSigmaOfWinX) {
    const auto m = random_model(small_config(), 3);
    vec x(8, 0.5f);
    const auto a = mlp_activations(m, 1, x);
    ASSERT_EQ(a.size(), 16u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        double z = 0;
        for (std::size_t c = 0; c < 8; ++c) z += m.w_in(1)(i, c) * 0.5;
        EXPECT_NEAR(a[i], std::max(z, 0.0), 1e-6);
    }
}

TEST(MlpDecomposition, RejectsWrongInputWidthAndLayer) {
    const auto m = random_model(small_config(), 3);
    EXPECT_THROW(mlp_forward(m, 0, vec(7)), validation_error);
    EXPECT_THROW(mlp_forward(m, 5, vec(8)), validation_error);
}

TEST(MlpVectors, GetSetRoundTripAndBounds) {
    auto m = random_model(small_config(), 5);
    vec v(8);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
    set_mlp_vector(m, {1, 3}, v);
    EXPECT_EQ(get_mlp_vector(m, {1, 3}), v);
    EXPECT_THROW(get_mlp_vector(m, {2, 0}), validation_error);
    EXPECT_THROW(get_mlp_vector(m, {0, 16}), validation_error);
    EXPECT_THROW(set_mlp_vector(m, {0, 0}, vec(3)), validation_error);
}

TEST(Container, RoundTripIsBitExactAndDeterministic) {
    pisces::testing::temp_dir dir("model");
    auto m = random_model(small_config(), 9);
    m.vocab.assign(20, "tok");
    m.vocab[3] = " Greece";
    const auto p = dir.path / "m.pstc";
    save_weights(m, p);
    const auto loaded = load_weights(p);
    EXPECT_EQ(loaded, m);
    EXPECT_EQ(serialize_container(to_container(m)), serialize_container(to_container(loaded)));
    EXPECT_EQ(model_digest(m), model_digest(loaded));
    EXPECT_EQ(loaded.token_text(3), " Greece");
}

TEST(Container, PayloadIsAlignedAndChecksummed) {
    const auto m = random_model(small_config(), 9);
    auto bytes = serialize_container(to_container(m));
    std::uint64_t n = 0;
    std::memcpy(&n, bytes.data(), 8);
    EXPECT_EQ((8 + n) % container_alignment, 0u);
    bytes.back() ^= 0x01;
    EXPECT_THROW(parse_container(bytes), validation_error);
}

TEST(Container, RejectsTruncationAndNonFinitePayload) {
    auto m = random_model(small_config(), 9);
    auto bytes = serialize_container(to_container(m));
    EXPECT_THROW(parse_container(std::span(bytes).first(4)), validation_error);
    EXPECT_THROW(parse_container(std::span(bytes).first(bytes.size() - 4)), validation_error);
    m.w_out(0)(0, 0) = std::nanf("");
    EXPECT_THROW(parse_container(serialize_container(to_container(m))), validation_error);
}

TEST(Container, ShapeMismatchAgainstConfigIsRejected) {
    auto m = random_model(small_config(), 9);
    m.tensors.at("W_out[0]") = matrix(15, 8);
    EXPECT_THROW(from_container(to_container(m)), validation_error);
}

TEST(Transformer, BackwardMatchesFiniteDifferences) {
    auto cfg = small_config(2, 8, 12, 11);
    cfg.activation = activation_fn::gelu;
    auto m = random_model(cfg, 77, 0.4f);
    const token_seq seq = {1, 4, 7, 2, 9};
    gradient_map grads;
    backward(m, seq, grads);
    std::mt19937_64 rng(1);
    for (const std::string name : {"W_in[0]", "W_out[1]", "W_q[0]", "W_k[1]", "W_v[0]", "W_o[1]", "embed", "unembed", "ln_mlp[0]", "ln_final"}) {
        auto& t = m.at(name);
        std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
        for (int k = 0; k < 3; ++k) {
            const auto idx = pick(rng);
            const float orig = t.data()[idx];
            const float h = 1e-2f;
            t.data()[idx] = orig + h;
            const double up = sequence_loss(forward(m, seq), seq);
            t.data()[idx] = orig - h;
            const double down = sequence_loss(forward(m, seq), seq);
            t.data()[idx] = orig;
            const double fd = (up - down) / (2 * h);
            EXPECT_NEAR(grads.at(name).data()[idx], fd, 2e-3 + 2e-2 * std::abs(fd)) << name << "[" << idx << "]";
        }
    }
}

TEST(Transformer, ForwardIsCausal) {
    const auto m = random_model(small_config(2, 8, 16, 20), 4);
    const token_seq a = {1, 2, 3, 4}, b = {1, 2, 3, 9};
    const auto la = forward(m, a), lb = forward(m, b);
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t v = 0; v < 20; ++v) EXPECT_FLOAT_EQ(la(t, v), lb(t, v));
    }
}

TEST(Transformer, RejectsOutOfVocabularyTokens) {
    const auto m = random_model(small_config(), 4);
    const token_seq bad = {1, 25};
    EXPECT_THROW(forward(m, bad), validation_error);
}
