#pragma once

#include "negopt/common.hpp"
#include "negopt/tokenizer.hpp"

#include <limits>
#include <span>

namespace negopt::policy {

struct NetworkShape {
    std::size_t vocab = 0;
    std::size_t embed = 32;
    std::size_t hidden = 64;

    bool operator==(const NetworkShape&) const = default;
};

/// Tiny encoder-decoder.
///
///   encoder:  c   = tanh(W_enc * mean_i E[x_i] + b_enc)
///   decoder:  h_0 = c
///             h_t = tanh(W_in E[y_{t-1}] + W_rec h_{t-1} + W_ctx c + b_dec)
///             z_t = W_out h_t + b_out,  log p_t = log_softmax(z_t)
///
/// <pad> and <bos> are never predicted (their logits are masked to -inf).
/// All parameters live in one flat vector so optimizers and finite-difference
/// checks can treat them uniformly.
class Seq2Seq {
  public:
    struct Layout {
        std::size_t emb, enc_w, enc_b, dec_in, dec_rec, dec_ctx, dec_b, out_w, out_b, total;
    };

    /// Everything the backward pass needs from one teacher-forced sequence.
    struct Trace {
        TokenIds source;
        TokenIds inputs;  // y_0 = <bos>, y_1 .. y_{T-1}
        Vector mean_embed;
        Vector context;
        std::vector<Vector> hidden;   // h_0 .. h_T
        std::vector<Vector> log_probs; // one per step
    };

    Seq2Seq() = default;

    Seq2Seq(NetworkShape shape, std::uint64_t seed) : shape_(shape), layout_(make_layout(shape)) {
        if (shape.vocab < 5 || shape.embed == 0 || shape.hidden == 0) throw ConfigError("invalid network shape");
        params_.assign(layout_.total, 0.0);
        Rng rng(hash_combine(seed, 0x5e92'5e90ULL));
        auto fill = [&](std::size_t off, std::size_t n, double scale) {
            for (std::size_t i = 0; i < n; ++i) params_[off + i] = scale * rng.normal();
        };
        const double E = static_cast<double>(shape.embed), H = static_cast<double>(shape.hidden);
        fill(layout_.emb, shape.vocab * shape.embed, 0.3);
        fill(layout_.enc_w, shape.hidden * shape.embed, 1.0 / std::sqrt(E));
        fill(layout_.dec_in, shape.hidden * shape.embed, 1.0 / std::sqrt(E));
        fill(layout_.dec_rec, shape.hidden * shape.hidden, 0.5 / std::sqrt(H));
        fill(layout_.dec_ctx, shape.hidden * shape.hidden, 0.5 / std::sqrt(H));
        fill(layout_.out_w, shape.vocab * shape.hidden, 0.5 / std::sqrt(H));
    }

    static Layout make_layout(const NetworkShape& s) {
        Layout l{};
        std::size_t off = 0;
        auto take = [&](std::size_t n) {
            auto o = off;
            off += n;
            return o;
        };
        l.emb = take(s.vocab * s.embed);
        l.enc_w = take(s.hidden * s.embed);
        l.enc_b = take(s.hidden);
        l.dec_in = take(s.hidden * s.embed);
        l.dec_rec = take(s.hidden * s.hidden);
        l.dec_ctx = take(s.hidden * s.hidden);
        l.dec_b = take(s.hidden);
        l.out_w = take(s.vocab * s.hidden);
        l.out_b = take(s.vocab);
        l.total = off;
        return l;
    }

    const NetworkShape& shape() const { return shape_; }
    const Vector& parameters() const { return params_; }
    Vector& parameters() { return params_; }

    void set_parameters(Vector p) {
        if (p.size() != layout_.total) throw ShapeError("parameter count mismatch");
        params_ = std::move(p);
    }

    // -- forward pieces ------------------------------------------------------

    Vector encode(const TokenIds& source, Vector* mean_out = nullptr) const {
        const auto E = shape_.embed, H = shape_.hidden;
        Vector m(E, 0.0);
        for (TokenId id : source) {
            const double* e = &params_[layout_.emb + index(id) * E];
            for (std::size_t k = 0; k < E; ++k) m[k] += e[k];
        }
        if (!source.empty())
            for (auto& x : m) x /= static_cast<double>(source.size());
        Vector c(H);
        for (std::size_t i = 0; i < H; ++i) {
            double a = params_[layout_.enc_b + i];
            const double* w = &params_[layout_.enc_w + i * E];
            for (std::size_t k = 0; k < E; ++k) a += w[k] * m[k];
            c[i] = std::tanh(a);
        }
        if (mean_out) *mean_out = std::move(m);
        return c;
    }

    /// One decoder step; returns h_t and writes log-probabilities over the vocabulary.
    Vector step(const Vector& context, const Vector& prev_hidden, TokenId prev_token, Vector& log_probs) const {
        const auto E = shape_.embed, H = shape_.hidden, V = shape_.vocab;
        const double* e = &params_[layout_.emb + index(prev_token) * E];
        Vector h(H);
        for (std::size_t i = 0; i < H; ++i) {
            double a = params_[layout_.dec_b + i];
            const double* wi = &params_[layout_.dec_in + i * E];
            for (std::size_t k = 0; k < E; ++k) a += wi[k] * e[k];
            const double* wr = &params_[layout_.dec_rec + i * H];
            const double* wc = &params_[layout_.dec_ctx + i * H];
            for (std::size_t k = 0; k < H; ++k) a += wr[k] * prev_hidden[k] + wc[k] * context[k];
            h[i] = std::tanh(a);
        }
        log_probs.assign(V, 0.0);
        for (std::size_t v = 0; v < V; ++v) {
            double z = params_[layout_.out_b + v];
            const double* w = &params_[layout_.out_w + v * H];
            for (std::size_t k = 0; k < H; ++k) z += w[k] * h[k];
            log_probs[v] = z;
        }
        log_softmax_masked(log_probs);
        return h;
    }

    /// Teacher-forced pass over `targets` (which should end in <eos> when the stop matters).
    Trace forward(const TokenIds& source, const TokenIds& targets) const {
        Trace t;
        t.source = source;
        t.context = encode(source, &t.mean_embed);
        t.hidden.push_back(t.context);
        TokenId prev = Tokenizer::kBos;
        for (TokenId y : targets) {
            t.inputs.push_back(prev);
            Vector lp;
            t.hidden.push_back(step(t.context, t.hidden.back(), prev, lp));
            t.log_probs.push_back(std::move(lp));
            prev = y;
        }
        return t;
    }

    /// Accumulates into `grad` the gradient given dL/dz_t for every step.
    void backward(const Trace& t, std::span<const Vector> dlogits, Vector& grad) const {
        const auto E = shape_.embed, H = shape_.hidden, V = shape_.vocab;
        if (grad.size() != layout_.total) grad.assign(layout_.total, 0.0);
        if (dlogits.size() != t.log_probs.size()) throw ShapeError("backward: step count mismatch");

        Vector dh_next(H, 0.0), dc(H, 0.0);
        for (std::size_t s = t.log_probs.size(); s-- > 0;) {
            const Vector& h = t.hidden[s + 1];
            const Vector& h_prev = t.hidden[s];
            const Vector& dz = dlogits[s];
            Vector dh = dh_next;
            for (std::size_t v = 0; v < V; ++v) {
                const double g = dz[v];
                if (g == 0.0) continue;
                grad[layout_.out_b + v] += g;
                double* gw = &grad[layout_.out_w + v * H];
                const double* w = &params_[layout_.out_w + v * H];
                for (std::size_t k = 0; k < H; ++k) {
                    gw[k] += g * h[k];
                    dh[k] += g * w[k];
                }
            }
            Vector da(H);
            for (std::size_t i = 0; i < H; ++i) da[i] = dh[i] * (1.0 - h[i] * h[i]);

            const std::size_t in = index(t.inputs[s]);
            const double* e = &params_[layout_.emb + in * E];
            double* ge = &grad[layout_.emb + in * E];
            std::fill(dh_next.begin(), dh_next.end(), 0.0);
            for (std::size_t i = 0; i < H; ++i) {
                const double a = da[i];
                if (a == 0.0) continue;
                grad[layout_.dec_b + i] += a;
                double* gi = &grad[layout_.dec_in + i * E];
                const double* wi = &params_[layout_.dec_in + i * E];
                for (std::size_t k = 0; k < E; ++k) {
                    gi[k] += a * e[k];
                    ge[k] += a * wi[k];
                }
                double* gr = &grad[layout_.dec_rec + i * H];
                double* gc = &grad[layout_.dec_ctx + i * H];
                const double* wr = &params_[layout_.dec_rec + i * H];
                const double* wc = &params_[layout_.dec_ctx + i * H];
                for (std::size_t k = 0; k < H; ++k) {
                    gr[k] += a * h_prev[k];
                    dh_next[k] += a * wr[k];
                    gc[k] += a * t.context[k];
                    dc[k] += a * wc[k];
                }
            }
        }
        for (std::size_t k = 0; k < H; ++k) dc[k] += dh_next[k]; // h_0 = c

        const Vector& c = t.context;
        Vector dm(E, 0.0);
        for (std::size_t i = 0; i < H; ++i) {
            const double du = dc[i] * (1.0 - c[i] * c[i]);
            if (du == 0.0) continue;
            grad[layout_.enc_b + i] += du;
            double* gw = &grad[layout_.enc_w + i * E];
            const double* w = &params_[layout_.enc_w + i * E];
            for (std::size_t k = 0; k < E; ++k) {
                gw[k] += du * t.mean_embed[k];
                dm[k] += du * w[k];
            }
        }
        if (!t.source.empty()) {
            const double inv = 1.0 / static_cast<double>(t.source.size());
            for (TokenId id : t.source) {
                double* ge = &grad[layout_.emb + index(id) * E];
                for (std::size_t k = 0; k < E; ++k) ge[k] += dm[k] * inv;
            }
        }
    }

    static bool is_masked(TokenId id) { return id == Tokenizer::kPad || id == Tokenizer::kBos; }

  private:
    std::size_t index(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= shape_.vocab)
            throw ShapeError("token id out of range: " + std::to_string(id));
        return static_cast<std::size_t>(id);
    }

    static void log_softmax_masked(Vector& z) {
        constexpr double ninf = -std::numeric_limits<double>::infinity();
        z[Tokenizer::kPad] = ninf;
        z[Tokenizer::kBos] = ninf;
        double mx = ninf;
        for (double v : z) mx = std::max(mx, v);
        double sum = 0.0;
        for (double v : z)
            if (v != ninf) sum += std::exp(v - mx);
        const double lse = mx + std::log(sum);
        for (auto& v : z)
            if (v != ninf) v -= lse;
    }

    NetworkShape shape_;
    Layout layout_{};
    Vector params_;
};

/// dL/dz for L = -coef * log p(y) given log-probs at one step: coef * (p - onehot(y)).
inline Vector nll_logit_grad(const Vector& log_probs, TokenId y, double coef) {
    Vector g(log_probs.size());
    for (std::size_t v = 0; v < g.size(); ++v) g[v] = coef * std::exp(log_probs[v]);
    g[static_cast<std::size_t>(y)] -= coef;
    return g;
}

} // namespace negopt::policy
