#pragma once

// Sparse autoencoder used as the disentangler.
//
//   encode(x) = relu(W_enc (x - b_dec) + b_enc)      activation mode
//   encode(x) =      W_enc (x - b_dec) + b_enc       parameter mode (signed)
//   decode(m) = W_dec^T m + b_dec = sum_f m_f w_f + b_dec
//
// Parameter mode keeps the sign of the read-out, which the clamp sign logic
// needs when MLP vectors (rather than activations) are encoded.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pisces/container.hpp"
#include "pisces/error.hpp"
#include "pisces/tensor.hpp"

namespace pisces {

enum class encode_mode { activation, parameter };

template <typename T>
struct basic_feature_activations {
    std::vector<T> values;
    encode_mode mode = encode_mode::activation;
};

using feature_activations = basic_feature_activations<float>;

template <typename T>
struct basic_sparse_autoencoder {
    std::size_t layer = 0;
    basic_matrix<T> w_enc;  // (k x d)
    std::vector<T> b_enc;   // k
    basic_matrix<T> w_dec;  // (k x d)
    std::vector<T> b_dec;   // d
    std::string trained_on;
    double heldout_error = -1.0;  // measured relative reconstruction error; < 0 when unknown

    std::size_t n_features() const noexcept { return w_dec.rows(); }
    std::size_t d_model() const noexcept { return w_dec.cols(); }

    static basic_sparse_autoencoder identity(std::size_t d, std::size_t layer = 0) {
        basic_sparse_autoencoder s;
        s.layer = layer;
        s.w_enc = basic_matrix<T>(d, d);
        s.w_dec = basic_matrix<T>(d, d);
        for (std::size_t i = 0; i < d; ++i) s.w_enc(i, i) = s.w_dec(i, i) = T{1};
        s.b_enc.assign(d, T{});
        s.b_dec.assign(d, T{});
        s.trained_on = "identity";
        return s;
    }

    void validate() const {
        const std::size_t k = n_features(), d = d_model();
        if (k == 0 || d == 0) throw validation_error("sae: empty dictionary");
        if (w_enc.rows() != k || w_enc.cols() != d || b_enc.size() != k || b_dec.size() != d) {
            throw validation_error("sae: tensor shapes disagree (k=" + std::to_string(k) + ", d=" + std::to_string(d) + ")");
        }
    }

    /// Largest deviation of a decoder row norm from 1.
    T max_row_norm_deviation() const {
        T worst{};
        for (std::size_t f = 0; f < n_features(); ++f) worst = std::max(worst, std::abs(l2_norm(w_dec.row(f)) - T{1}));
        return worst;
    }

    template <typename U>
    basic_sparse_autoencoder<U> cast() const {
        basic_sparse_autoencoder<U> o;
        o.layer = layer;
        o.w_enc = w_enc.template cast<U>();
        o.w_dec = w_dec.template cast<U>();
        o.b_enc.assign(b_enc.begin(), b_enc.end());
        o.b_dec.assign(b_dec.begin(), b_dec.end());
        o.trained_on = trained_on;
        o.heldout_error = heldout_error;
        return o;
    }

    friend bool operator==(const basic_sparse_autoencoder&, const basic_sparse_autoencoder&) = default;
};

using sparse_autoencoder = basic_sparse_autoencoder<float>;

/// Layer index -> SAE trained on that layer's MLP outputs.
using sae_suite = std::map<std::size_t, sparse_autoencoder>;

template <typename T>
std::vector<T> encode_preactivation(const basic_sparse_autoencoder<T>& sae, std::span<const T> x) {
    if (x.size() != sae.d_model()) {
        throw validation_error("sae encode: input has " + std::to_string(x.size()) + " entries, expected " +
                               std::to_string(sae.d_model()));
    }
    std::vector<T> centered(x.begin(), x.end());
    for (std::size_t i = 0; i < centered.size(); ++i) centered[i] -= sae.b_dec[i];
    std::vector<T> z = matvec(sae.w_enc, std::span<const T>(centered));
    for (std::size_t f = 0; f < z.size(); ++f) z[f] += sae.b_enc[f];
    return z;
}

template <typename T>
basic_feature_activations<T> encode(const basic_sparse_autoencoder<T>& sae, std::span<const T> x, encode_mode mode) {
    auto z = encode_preactivation(sae, x);
    if (mode == encode_mode::activation) {
        for (auto& v : z) v = v > T{} ? v : T{};
    }
    return {std::move(z), mode};
}

template <typename T>
std::vector<T> decode(const basic_sparse_autoencoder<T>& sae, std::span<const T> m) {
    if (m.size() != sae.n_features()) {
        throw validation_error("sae decode: activation vector has " + std::to_string(m.size()) + " entries, expected " +
                               std::to_string(sae.n_features()));
    }
    std::vector<T> x = matvec_t(sae.w_dec, m);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += sae.b_dec[i];
    return x;
}

template <typename T>
std::vector<T> decode(const basic_sparse_autoencoder<T>& sae, const basic_feature_activations<T>& m) {
    return decode(sae, std::span<const T>(m.values));
}

/// w_f: row f of the decoder.
template <typename T>
std::vector<T> feature_vector(const basic_sparse_autoencoder<T>& sae, std::size_t f) {
    if (f >= sae.n_features()) {
        throw validation_error("feature index " + std::to_string(f) + " out of range (k=" +
                               std::to_string(sae.n_features()) + ")");
    }
    return to_vector(sae.w_dec.row(f));
}

inline constexpr double reconstruction_eps = 1e-8;

/// ||x - decode(encode(x))|| / max(||x||, eps), activation mode.
template <typename T>
T reconstruction_error(const basic_sparse_autoencoder<T>& sae, std::span<const T> x) {
    const auto xhat = decode(sae, encode(sae, x, encode_mode::activation));
    T err{};
    for (std::size_t i = 0; i < x.size(); ++i) err += (x[i] - xhat[i]) * (x[i] - xhat[i]);
    return std::sqrt(err) / std::max(l2_norm(x), static_cast<T>(reconstruction_eps));
}

/// Mean per-row relative reconstruction error over a (n x d) batch.
template <typename T>
T mean_reconstruction_error(const basic_sparse_autoencoder<T>& sae, const basic_matrix<T>& xs) {
    if (xs.rows() == 0) throw precondition_error("mean_reconstruction_error: empty batch");
    double total = 0.0;
    for (std::size_t r = 0; r < xs.rows(); ++r) total += reconstruction_error(sae, xs.row(r));
    return static_cast<T>(total / static_cast<double>(xs.rows()));
}

struct sae_train_config {
    double l1_coefficient = 0.5;
    double learning_rate = 1e-3;
    std::size_t steps = 4000;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t n_features = 0;  // 0 selects 4 * d

    void validate() const {
        if (steps < 1) throw precondition_error("sae training: steps must be >= 1");
        if (batch_size < 1) throw precondition_error("sae training: batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw precondition_error("sae training: learning_rate must be positive");
        if (!(l1_coefficient >= 0.0)) throw precondition_error("sae training: l1_coefficient must be non-negative");
    }
};

class training_diverged : public validation_error {
public:
    explicit training_diverged(std::size_t step)
        : validation_error("sae training diverged: non-finite loss at step " + std::to_string(step)), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Gradients of the SAE objective, laid out like the SAE itself.
template <typename T>
struct basic_sae_gradients {
    basic_matrix<T> w_enc, w_dec;
    std::vector<T> b_enc, b_dec;

    explicit basic_sae_gradients(const basic_sparse_autoencoder<T>& s)
        : w_enc(s.w_enc.rows(), s.w_enc.cols()), w_dec(s.w_dec.rows(), s.w_dec.cols()),
          b_enc(s.b_enc.size(), T{}), b_dec(s.b_dec.size(), T{}) {}
};

/// Mean over the batch rows of ||x - xhat||^2 + l1 * sum_f m_f, with the
/// analytic gradient written into `grads` when given.
template <typename T>
T sae_loss(const basic_sparse_autoencoder<T>& sae, const basic_matrix<T>& batch, T l1,
           basic_sae_gradients<T>* grads = nullptr) {
    const std::size_t k = sae.n_features(), d = sae.d_model();
    const T inv_b = T{1} / static_cast<T>(batch.rows());
    T loss{};
    for (std::size_t b = 0; b < batch.rows(); ++b) {
        const auto x = batch.row(b);
        std::vector<T> centered(x.begin(), x.end());
        for (std::size_t i = 0; i < d; ++i) centered[i] -= sae.b_dec[i];
        std::vector<T> z = matvec(sae.w_enc, std::span<const T>(centered));
        std::vector<T> m(k);
        T l1_sum{};
        for (std::size_t f = 0; f < k; ++f) {
            z[f] += sae.b_enc[f];
            m[f] = z[f] > T{} ? z[f] : T{};
            l1_sum += m[f];
        }
        std::vector<T> r = matvec_t(sae.w_dec, std::span<const T>(m));
        T sq{};
        for (std::size_t i = 0; i < d; ++i) {
            r[i] += sae.b_dec[i] - x[i];
            sq += r[i] * r[i];
        }
        loss += (sq + l1 * l1_sum) * inv_b;
        if (!grads) continue;

        for (std::size_t i = 0; i < d; ++i) r[i] *= T{2} * inv_b;  // d loss / d xhat
        for (std::size_t i = 0; i < d; ++i) grads->b_dec[i] += r[i];
        for (std::size_t f = 0; f < k; ++f) {
            if (z[f] <= T{}) continue;
            axpy(m[f], std::span<const T>(r), grads->w_dec.row(f));
            const T dz = dot(sae.w_dec.row(f), std::span<const T>(r)) + l1 * inv_b;
            grads->b_enc[f] += dz;
            axpy(dz, std::span<const T>(centered), grads->w_enc.row(f));
            axpy(-dz, sae.w_enc.row(f), std::span<T>(grads->b_dec));
        }
    }
    return loss;
}

template <typename T>
void normalize_decoder_rows(basic_sparse_autoencoder<T>& sae) {
    for (std::size_t f = 0; f < sae.n_features(); ++f) {
        auto row = sae.w_dec.row(f);
        const T n = l2_norm(std::span<const T>(row));
        if (n > T{}) {
            for (auto& v : row) v /= n;
        }
    }
}

/// Trains a relu SAE on the rows of `acts` by plain minibatch SGD; decoder
/// rows are renormalised after every step. Deterministic for a given seed.
/// Adaptive optimisers were tried and rejected: their per-coordinate steps
/// keep pushing encoder rows negative after a feature stops firing, which
/// shows up as large signed read-outs on unrelated parameter vectors.
inline sparse_autoencoder train_sae(const matrix& acts, const sae_train_config& cfg, std::size_t layer = 0,
                                    const std::string& provenance = "") {
    cfg.validate();
    if (acts.rows() == 0 || acts.cols() == 0) throw precondition_error("sae training: empty activation matrix");
    const std::size_t d = acts.cols();
    const std::size_t k = cfg.n_features ? cfg.n_features : 4 * d;
    if (k < 2 * d) {
        throw precondition_error("sae training: feature count " + std::to_string(k) + " must be at least 2*d = " +
                                 std::to_string(2 * d));
    }

    std::mt19937_64 rng(cfg.seed ^ 0x5ae5ae5ae5ae5ae5ull);
    std::uniform_int_distribution<std::size_t> pick(0, acts.rows() - 1);
    sparse_autoencoder sae;
    sae.layer = layer;
    sae.w_dec = matrix(k, d);
    // Decoder rows start at the directions of randomly drawn training rows.
    for (std::size_t f = 0; f < k; ++f) {
        const auto src = acts.row(pick(rng));
        std::vector<double> u(src.begin(), src.end());
        const double n = l2_norm(u);
        if (n > 1e-6) {
            for (auto& x : u) x /= n;
        } else {
            u = random_unit(d, rng);
        }
        for (std::size_t i = 0; i < d; ++i) sae.w_dec(f, i) = static_cast<float>(u[i]);
    }
    sae.w_enc = sae.w_dec;
    sae.b_enc.assign(k, 0.0f);
    sae.b_dec.assign(d, 0.0f);
    sae.trained_on = provenance;

    matrix batch(cfg.batch_size, d);
    const float l1 = static_cast<float>(cfg.l1_coefficient);
    const float lr = static_cast<float>(cfg.learning_rate);
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const auto src = acts.row(pick(rng));
            std::copy(src.begin(), src.end(), batch.row(b).begin());
        }
        basic_sae_gradients<float> g(sae);
        const float loss = sae_loss(sae, batch, l1, &g);
        if (!std::isfinite(loss)) throw training_diverged(step);
        axpy(-lr, std::span<const float>(g.w_enc.data()), std::span<float>(sae.w_enc.data()));
        axpy(-lr, std::span<const float>(g.w_dec.data()), std::span<float>(sae.w_dec.data()));
        axpy(-lr, std::span<const float>(g.b_enc), std::span<float>(sae.b_enc));
        axpy(-lr, std::span<const float>(g.b_dec), std::span<float>(sae.b_dec));
        normalize_decoder_rows(sae);
    }
    return sae;
}

inline tensor_container to_container(const sparse_autoencoder& sae) {
    tensor_container c;
    c.config = {{"kind", "sae"},
                {"layer", sae.layer},
                {"n_features", sae.n_features()},
                {"d_model", sae.d_model()},
                {"trained_on", sae.trained_on},
                {"heldout_error", sae.heldout_error}};
    c.tensors["W_enc"] = sae.w_enc;
    c.tensors["W_dec"] = sae.w_dec;
    c.tensors["b_enc"] = matrix(1, sae.b_enc.size(), sae.b_enc);
    c.tensors["b_dec"] = matrix(1, sae.b_dec.size(), sae.b_dec);
    return c;
}

inline sparse_autoencoder sae_from_container(const tensor_container& c) {
    if (c.config.value("kind", std::string()) != "sae") throw validation_error("container does not hold an SAE");
    sparse_autoencoder sae;
    try {
        sae.layer = c.config.at("layer").get<std::size_t>();
        sae.trained_on = c.config.value("trained_on", std::string());
        sae.heldout_error = c.config.value("heldout_error", -1.0);
        sae.w_enc = c.tensors.at("W_enc");
        sae.w_dec = c.tensors.at("W_dec");
        sae.b_enc = c.tensors.at("b_enc").data();
        sae.b_dec = c.tensors.at("b_dec").data();
    } catch (const std::out_of_range&) {
        throw validation_error("sae container is missing a tensor");
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(std::string("malformed sae config: ") + e.what());
    }
    sae.validate();
    return sae;
}

inline void save_sae(const sparse_autoencoder& sae, const std::filesystem::path& path) {
    save_container(to_container(sae), path);
}

inline sparse_autoencoder load_sae(const std::filesystem::path& path) { return sae_from_container(load_container(path)); }

inline std::string sae_digest(const sparse_autoencoder& sae) {
    const auto bytes = serialize_container(to_container(sae));
    return sha256_hex(std::span<const std::uint8_t>(bytes));
}

/// Digest over every SAE in the suite, in layer order.
inline std::string suite_digest(const sae_suite& suite) {
    sha256 h;
    for (const auto& [layer, sae] : suite) h.update(std::to_string(layer) + ":" + sae_digest(sae) + ";");
    return h.hex();
}

} // namespace pisces
