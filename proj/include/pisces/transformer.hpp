#pragma once

// Forward and backward passes of the toy pre-norm decoder-only transformer:
//
//   x = embed[token]
//   per layer:  x += W_o * attn(rmsnorm(x; ln_attn))
//               x += W_out^T sigma(W_in * rmsnorm(x; ln_mlp))
//   logits = unembed * rmsnorm(x; ln_final)
//
// No biases, no positional embedding, causal multi-head attention.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "pisces/error.hpp"
#include "pisces/model.hpp"
#include "pisces/tensor.hpp"

namespace pisces {

using token_seq = std::vector<std::uint32_t>;
using corpus = std::vector<token_seq>;

inline constexpr float rms_eps = 1e-5f;

inline float activate(activation_fn fn, float x) {
    if (fn == activation_fn::relu) return x > 0.0f ? x : 0.0f;
    return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2.0)));
}

inline float activate_grad(activation_fn fn, float x) {
    if (fn == activation_fn::relu) return x > 0.0f ? 1.0f : 0.0f;
    const float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2.0)));
    const float pdf = std::exp(-0.5f * x * x) * static_cast<float>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}

/// Neuron activations a = sigma(W_in x) of one MLP layer.
inline vec mlp_activations(const model_weights& m, std::size_t layer, std::span<const float> x) {
    if (layer >= m.config.n_layers) throw validation_error("layer " + std::to_string(layer) + " out of range");
    if (x.size() != m.config.d_model) {
        throw validation_error("mlp input has " + std::to_string(x.size()) + " entries, expected " +
                               std::to_string(m.config.d_model));
    }
    vec a = matvec(m.w_in(layer), x);
    for (auto& v : a) v = activate(m.config.activation, v);
    return a;
}

/// MLP(x) = W_out^T sigma(W_in x) = sum_i a_i v_i.
inline vec mlp_forward(const model_weights& m, std::size_t layer, std::span<const float> x) {
    const vec a = mlp_activations(m, layer, x);
    return matvec_t(m.w_out(layer), std::span<const float>(a));
}

namespace detail {

struct rms_cache {
    vec input;
    float inv_rms = 0.0f;
};

inline vec rmsnorm(std::span<const float> x, std::span<const float> gain, rms_cache* cache = nullptr) {
    float ms = 0.0f;
    for (float v : x) ms += v * v;
    ms /= static_cast<float>(x.size());
    const float inv = 1.0f / std::sqrt(ms + rms_eps);
    vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain[i] * x[i] * inv;
    if (cache) {
        cache->input.assign(x.begin(), x.end());
        cache->inv_rms = inv;
    }
    return y;
}

inline void rmsnorm_backward(const rms_cache& c, std::span<const float> gain, std::span<const float> dy,
                             std::span<float> dgain, std::span<float> dx) {
    const std::size_t n = c.input.size();
    float s = 0.0f;
    for (std::size_t i = 0; i < n; ++i) {
        dgain[i] += dy[i] * c.input[i] * c.inv_rms;
        s += gain[i] * dy[i] * c.input[i];
    }
    const float k = c.inv_rms * c.inv_rms * c.inv_rms / static_cast<float>(n);
    for (std::size_t i = 0; i < n; ++i) dx[i] += c.inv_rms * gain[i] * dy[i] - k * c.input[i] * s;
}

} // namespace detail

/// Per-layer intermediates retained for the backward pass and for tracing.
struct layer_cache {
    std::vector<detail::rms_cache> rms_attn, rms_mlp;
    std::vector<vec> normed_attn, q, k, v, attn_mix;
    std::vector<vec> probs;  // per (position, head): causal attention weights over 0..t
    std::vector<vec> normed_mlp, pre, act, mlp_out;
};

struct forward_cache {
    token_seq tokens;
    std::vector<layer_cache> layers;
    std::vector<detail::rms_cache> rms_final;
    std::vector<vec> final_normed;
    matrix logits;
};

inline void check_tokens(const model_config& cfg, std::span<const std::uint32_t> tokens) {
    for (auto t : tokens) {
        if (t >= cfg.vocab_size) {
            throw validation_error("token id " + std::to_string(t) + " out of range for vocab of " +
                                   std::to_string(cfg.vocab_size));
        }
    }
}

inline forward_cache run_forward(const model_weights& m, std::span<const std::uint32_t> tokens) {
    namespace tn = tensor_names;
    const auto& cfg = m.config;
    check_tokens(cfg, tokens);
    const std::size_t len = tokens.size();
    const std::size_t d = cfg.d_model;
    const std::size_t heads = cfg.n_heads;
    const std::size_t hd = d / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    forward_cache fc;
    fc.tokens.assign(tokens.begin(), tokens.end());
    std::vector<vec> x(len);
    for (std::size_t t = 0; t < len; ++t) x[t] = to_vector(m.embed().row(tokens[t]));

    fc.layers.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto& lc = fc.layers[l];
        const auto& g1 = m.at(tn::ln_attn(l));
        const auto& g2 = m.at(tn::ln_mlp(l));
        const auto& wq = m.at(tn::w_q(l));
        const auto& wk = m.at(tn::w_k(l));
        const auto& wv = m.at(tn::w_v(l));
        const auto& wo = m.at(tn::w_o(l));

        lc.rms_attn.resize(len);
        lc.normed_attn.resize(len);
        lc.q.resize(len);
        lc.k.resize(len);
        lc.v.resize(len);
        for (std::size_t t = 0; t < len; ++t) {
            lc.normed_attn[t] = detail::rmsnorm(x[t], g1.row(0), &lc.rms_attn[t]);
            lc.q[t] = matvec(wq, std::span<const float>(lc.normed_attn[t]));
            lc.k[t] = matvec(wk, std::span<const float>(lc.normed_attn[t]));
            lc.v[t] = matvec(wv, std::span<const float>(lc.normed_attn[t]));
        }
        lc.attn_mix.assign(len, vec(d, 0.0f));
        lc.probs.assign(len * heads, vec{});
        for (std::size_t t = 0; t < len; ++t) {
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t o = h * hd;
                vec p(t + 1);
                float mx = -INFINITY;
                for (std::size_t j = 0; j <= t; ++j) {
                    float s = 0.0f;
                    for (std::size_t c = 0; c < hd; ++c) s += lc.q[t][o + c] * lc.k[j][o + c];
                    p[j] = s * scale;
                    mx = std::max(mx, p[j]);
                }
                float z = 0.0f;
                for (auto& pj : p) {
                    pj = std::exp(pj - mx);
                    z += pj;
                }
                for (auto& pj : p) pj /= z;
                for (std::size_t j = 0; j <= t; ++j) {
                    for (std::size_t c = 0; c < hd; ++c) lc.attn_mix[t][o + c] += p[j] * lc.v[j][o + c];
                }
                lc.probs[t * heads + h] = std::move(p);
            }
            const vec proj = matvec(wo, std::span<const float>(lc.attn_mix[t]));
            for (std::size_t c = 0; c < d; ++c) x[t][c] += proj[c];
        }

        lc.rms_mlp.resize(len);
        lc.normed_mlp.resize(len);
        lc.pre.resize(len);
        lc.act.resize(len);
        lc.mlp_out.resize(len);
        for (std::size_t t = 0; t < len; ++t) {
            lc.normed_mlp[t] = detail::rmsnorm(x[t], g2.row(0), &lc.rms_mlp[t]);
            lc.pre[t] = matvec(m.w_in(l), std::span<const float>(lc.normed_mlp[t]));
            lc.act[t] = lc.pre[t];
            for (auto& a : lc.act[t]) a = activate(cfg.activation, a);
            lc.mlp_out[t] = matvec_t(m.w_out(l), std::span<const float>(lc.act[t]));
            for (std::size_t c = 0; c < d; ++c) x[t][c] += lc.mlp_out[t][c];
        }
    }

    const auto& gf = m.at(tn::ln_final);
    fc.rms_final.resize(len);
    fc.final_normed.resize(len);
    fc.logits = matrix(len, cfg.vocab_size);
    for (std::size_t t = 0; t < len; ++t) {
        fc.final_normed[t] = detail::rmsnorm(x[t], gf.row(0), &fc.rms_final[t]);
        const vec lg = matvec(m.unembed(), std::span<const float>(fc.final_normed[t]));
        std::copy(lg.begin(), lg.end(), fc.logits.row(t).begin());
    }
    return fc;
}

/// Logits for every position, shape (len x vocab_size).
inline matrix forward(const model_weights& m, std::span<const std::uint32_t> tokens) {
    return run_forward(m, tokens).logits;
}

inline std::size_t argmax(std::span<const float> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

/// Index of the largest next-token logit after the final position.
inline std::size_t predict_next(const model_weights& m, std::span<const std::uint32_t> context) {
    if (context.empty()) throw validation_error("empty context");
    const matrix logits = forward(m, context);
    return argmax(logits.row(logits.rows() - 1));
}

/// Stacked MLP outputs of one layer over every corpus position, (positions x d).
inline matrix collect_mlp_outputs(const model_weights& m, std::size_t layer, const corpus& sequences) {
    if (layer >= m.config.n_layers) throw validation_error("layer " + std::to_string(layer) + " out of range");
    std::vector<float> flat;
    std::size_t rows = 0;
    for (const auto& seq : sequences) {
        const auto fc = run_forward(m, seq);
        for (const auto& out : fc.layers[layer].mlp_out) {
            flat.insert(flat.end(), out.begin(), out.end());
            ++rows;
        }
    }
    return matrix(rows, m.config.d_model, std::move(flat));
}

/// Neuron activations observed over a corpus plus their majority signs.
struct activation_trace {
    std::size_t positions = 0;
    std::vector<matrix> activations;          // per layer: (positions x d_mlp)
    std::vector<std::vector<int>> majority;   // per layer: +1 / -1 per neuron

    int majority_sign(const mlp_vector_ref& ref) const {
        if (ref.layer >= majority.size() || ref.row >= majority[ref.layer].size()) {
            throw precondition_error("no sign entry for MLP vector (" + std::to_string(ref.layer) + "," +
                                     std::to_string(ref.row) + ")");
        }
        return majority[ref.layer][ref.row];
    }
};

/// Majority sign of each neuron's activation over every corpus position.
/// Zero activations count for neither side; ties resolve to +1.
inline activation_trace neuron_sign_trace(const model_weights& m, const corpus& sequences) {
    std::size_t total = 0;
    for (const auto& s : sequences) total += s.size();
    if (total == 0) throw precondition_error("neuron_sign_trace: empty corpus");

    const auto& cfg = m.config;
    activation_trace tr;
    tr.positions = total;
    tr.activations.assign(cfg.n_layers, matrix(total, cfg.d_mlp));
    std::size_t pos = 0;
    for (const auto& seq : sequences) {
        if (seq.empty()) continue;
        const auto fc = run_forward(m, seq);
        for (std::size_t t = 0; t < seq.size(); ++t, ++pos) {
            for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                std::copy(fc.layers[l].act[t].begin(), fc.layers[l].act[t].end(), tr.activations[l].row(pos).begin());
            }
        }
    }
    tr.majority.assign(cfg.n_layers, std::vector<int>(cfg.d_mlp, 1));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (std::size_t i = 0; i < cfg.d_mlp; ++i) {
            std::size_t pos_count = 0, neg_count = 0;
            for (std::size_t p = 0; p < total; ++p) {
                const float a = tr.activations[l](p, i);
                pos_count += a > 0.0f;
                neg_count += a < 0.0f;
            }
            tr.majority[l][i] = neg_count > pos_count ? -1 : 1;
        }
    }
    return tr;
}

/// Gradients keyed by tensor name, same shapes as the model.
using gradient_map = std::map<std::string, matrix>;

/// Mean next-token cross-entropy over positions 0..len-2 of one sequence.
inline double sequence_loss(const matrix& logits, std::span<const std::uint32_t> tokens) {
    if (tokens.size() < 2) return 0.0;
    double total = 0.0;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        auto row = logits.row(t);
        const float mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (float v : row) z += std::exp(static_cast<double>(v - mx));
        total += std::log(z) + mx - row[tokens[t + 1]];
    }
    return total / static_cast<double>(tokens.size() - 1);
}

/// Accumulates d(loss)/d(param) into `grads` (scaled by `weight`) and returns
/// the sequence's mean next-token loss.
inline double backward(const model_weights& m, std::span<const std::uint32_t> tokens, gradient_map& grads,
                       float weight = 1.0f) {
    namespace tn = tensor_names;
    const auto& cfg = m.config;
    const std::size_t len = tokens.size();
    if (len < 2) return 0.0;
    const auto fc = run_forward(m, tokens);
    const double loss = sequence_loss(fc.logits, tokens);

    for (const auto& [name, t] : m.tensors) {
        if (!grads.contains(name)) grads.emplace(name, matrix(t.rows(), t.cols()));
    }

    const std::size_t d = cfg.d_model;
    const std::size_t heads = cfg.n_heads;
    const std::size_t hd = d / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const float norm = weight / static_cast<float>(len - 1);

    std::vector<vec> dx(len, vec(d, 0.0f));
    {
        auto& dE = grads.at(tn::unembed);
        auto& dgf = grads.at(tn::ln_final);
        const auto& E = m.unembed();
        for (std::size_t t = 0; t + 1 < len; ++t) {
            auto row = fc.logits.row(t);
            const float mx = *std::max_element(row.begin(), row.end());
            vec p(row.size());
            float z = 0.0f;
            for (std::size_t v = 0; v < row.size(); ++v) {
                p[v] = std::exp(row[v] - mx);
                z += p[v];
            }
            for (auto& pv : p) pv = pv / z * norm;
            p[tokens[t + 1]] -= norm;
            vec dfinal(d, 0.0f);
            for (std::size_t v = 0; v < row.size(); ++v) {
                if (p[v] == 0.0f) continue;
                axpy(p[v], std::span<const float>(fc.final_normed[t]), dE.row(v));
                axpy(p[v], E.row(v), std::span<float>(dfinal));
            }
            detail::rmsnorm_backward(fc.rms_final[t], m.at(tn::ln_final).row(0), dfinal, dgf.row(0), dx[t]);
        }
    }

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const auto& lc = fc.layers[li];
        // MLP block
        {
            auto& dWin = grads.at(tn::w_in(li));
            auto& dWout = grads.at(tn::w_out(li));
            auto& dg2 = grads.at(tn::ln_mlp(li));
            const auto& Win = m.w_in(li);
            const auto& Wout = m.w_out(li);
            for (std::size_t t = 0; t < len; ++t) {
                const vec& dout = dx[t];
                vec dpre(cfg.d_mlp);
                for (std::size_t i = 0; i < cfg.d_mlp; ++i) {
                    if (lc.act[t][i] != 0.0f) axpy(lc.act[t][i], std::span<const float>(dout), dWout.row(i));
                    const float da = dot(Wout.row(i), std::span<const float>(dout));
                    dpre[i] = da * activate_grad(cfg.activation, lc.pre[t][i]);
                }
                vec dn(d, 0.0f);
                for (std::size_t i = 0; i < cfg.d_mlp; ++i) {
                    if (dpre[i] == 0.0f) continue;
                    axpy(dpre[i], std::span<const float>(lc.normed_mlp[t]), dWin.row(i));
                    axpy(dpre[i], Win.row(i), std::span<float>(dn));
                }
                detail::rmsnorm_backward(lc.rms_mlp[t], m.at(tn::ln_mlp(li)).row(0), dn, dg2.row(0), dx[t]);
            }
        }
        // attention block
        {
            const auto& Wq = m.at(tn::w_q(li));
            const auto& Wk = m.at(tn::w_k(li));
            const auto& Wv = m.at(tn::w_v(li));
            const auto& Wo = m.at(tn::w_o(li));
            auto& dWq = grads.at(tn::w_q(li));
            auto& dWk = grads.at(tn::w_k(li));
            auto& dWv = grads.at(tn::w_v(li));
            auto& dWo = grads.at(tn::w_o(li));
            auto& dg1 = grads.at(tn::ln_attn(li));

            std::vector<vec> dmix(len), dq(len, vec(d, 0.0f)), dk(len, vec(d, 0.0f)), dv(len, vec(d, 0.0f));
            for (std::size_t t = 0; t < len; ++t) {
                // x += Wo * mix
                for (std::size_t r = 0; r < d; ++r) {
                    if (dx[t][r] != 0.0f) axpy(dx[t][r], std::span<const float>(lc.attn_mix[t]), dWo.row(r));
                }
                dmix[t] = matvec_t(Wo, std::span<const float>(dx[t]));
            }
            for (std::size_t t = 0; t < len; ++t) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t o = h * hd;
                    const vec& p = lc.probs[t * heads + h];
                    vec dp(t + 1);
                    float pdp = 0.0f;
                    for (std::size_t j = 0; j <= t; ++j) {
                        float s = 0.0f;
                        for (std::size_t c = 0; c < hd; ++c) {
                            s += dmix[t][o + c] * lc.v[j][o + c];
                            dv[j][o + c] += p[j] * dmix[t][o + c];
                        }
                        dp[j] = s;
                        pdp += p[j] * s;
                    }
                    for (std::size_t j = 0; j <= t; ++j) {
                        const float ds = p[j] * (dp[j] - pdp) * scale;
                        for (std::size_t c = 0; c < hd; ++c) {
                            dq[t][o + c] += ds * lc.k[j][o + c];
                            dk[j][o + c] += ds * lc.q[t][o + c];
                        }
                    }
                }
            }
            for (std::size_t t = 0; t < len; ++t) {
                vec dn(d, 0.0f);
                const auto n = std::span<const float>(lc.normed_attn[t]);
                for (std::size_t r = 0; r < d; ++r) {
                    axpy(dq[t][r], n, dWq.row(r));
                    axpy(dk[t][r], n, dWk.row(r));
                    axpy(dv[t][r], n, dWv.row(r));
                    axpy(dq[t][r], Wq.row(r), std::span<float>(dn));
                    axpy(dk[t][r], Wk.row(r), std::span<float>(dn));
                    axpy(dv[t][r], Wv.row(r), std::span<float>(dn));
                }
                detail::rmsnorm_backward(lc.rms_attn[t], m.at(tn::ln_attn(li)).row(0), dn, dg1.row(0), dx[t]);
            }
        }
    }

    auto& demb = grads.at(tn::embed);
    for (std::size_t t = 0; t < len; ++t) axpy(1.0f, std::span<const float>(dx[t]), demb.row(tokens[t]));
    return loss;
}

} // namespace pisces
