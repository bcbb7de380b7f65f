#pragma once

#include "negopt/common.hpp"
#include "negopt/imagegen.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <mutex>
#include <span>

namespace negopt::reward {

using imagegen::ImageArtifact;

/// Coefficients of the composite reward. Defaults weight aesthetics five times higher.
struct RewardWeights {
    double alpha = 5.0;
    double beta = 1.0;
    double gamma = 1.0;

    void validate() const {
        if (!std::isfinite(alpha) || !std::isfinite(beta) || !std::isfinite(gamma))
            throw ConfigError("reward weights must be finite");
    }

    nlohmann::ordered_json to_json() const { return {{"alpha", alpha}, {"beta", beta}, {"gamma", gamma}}; }
};

struct RewardBreakdown {
    double aesthetics = 0.0;
    double alignment = 0.0;
    double fidelity = 1.0;
    double total = 0.0;

    bool operator==(const RewardBreakdown&) const = default;
};

/// total = alpha * aesthetics + beta * alignment + gamma * fidelity.
inline RewardBreakdown composite_reward(double aesthetics, double alignment, double fidelity,
                                        const RewardWeights& w) {
    if (!std::isfinite(aesthetics) || !std::isfinite(alignment) || !std::isfinite(fidelity))
        throw DataError("composite_reward: non-finite component");
    w.validate();
    RewardBreakdown b{aesthetics, alignment, fidelity, 0.0};
    b.total = w.alpha * aesthetics + w.beta * alignment + w.gamma * fidelity;
    return b;
}

// ---------------------------------------------------------------------------
// Embeddings

/// Joint text/image embedding space. Outputs are unit-norm vectors of dimension().
class EmbeddingProvider {
  public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dimension() const = 0;
    virtual Vector embed_text(std::string_view text) const = 0;
    virtual Vector embed_image(const ImageArtifact& image) const = 0;
};

/// Desk-scale stand-in for a CLIP-style encoder: a text embeds as the
/// normalized sum of pseudo-random per-word vectors keyed by the lower-cased
/// word; an image embeds as its normalized feature vector.
class HashEmbeddingProvider final : public EmbeddingProvider {
  public:
    explicit HashEmbeddingProvider(std::size_t dim, std::uint64_t key = 0x0c11b) : dim_(dim), key_(key) {
        if (dim == 0) throw ConfigError("embedding dimension must be positive");
    }

    std::size_t dimension() const override { return dim_; }

    Vector embed_text(std::string_view text) const override {
        return imagegen::hashed_word_vector(imagegen::words(text), dim_, key_);
    }

    Vector embed_image(const ImageArtifact& image) const override {
        if (image.feature_embedding.size() != dim_)
            throw ShapeError("image embedding has dimension " + std::to_string(image.feature_embedding.size()) +
                             ", provider expects " + std::to_string(dim_));
        return normalized(image.feature_embedding);
    }

  private:
    std::size_t dim_;
    std::uint64_t key_;
};

/// Text embeddings from an external encoder process; image embeddings are the
/// features the diffusion runtime already computed with the same encoder.
///
/// The command reads {"text": ...} lines on stdin and writes {"embedding": [...]}
/// lines on stdout, in order.
class CommandEmbeddingProvider final : public EmbeddingProvider {
  public:
    CommandEmbeddingProvider(std::string command, std::size_t dim) : command_(std::move(command)), dim_(dim) {
        if (command_.empty()) throw ConfigError("text embedding command is empty");
    }

    std::size_t dimension() const override { return dim_; }

    Vector embed_text(std::string_view text) const override {
        {
            std::lock_guard lock(mutex_);
            if (auto it = cache_.find(std::string(text)); it != cache_.end()) return it->second;
        }
        const auto tag = sha256_hex(text).substr(0, 16);
        const auto dir = std::filesystem::temp_directory_path();
        const auto req = dir / ("negopt-text-" + tag + ".jsonl"), resp = dir / ("negopt-emb-" + tag + ".jsonl");
        write_file_atomic(req, nlohmann::json{{"text", std::string(text)}}.dump() + "\n");
        const int rc = std::system((command_ + " < '" + req.string() + "' > '" + resp.string() + "'").c_str());
        std::filesystem::remove(req);
        if (rc != 0) throw imagegen::GeneratorError("text embedding command failed with status " + std::to_string(rc));
        const auto j = nlohmann::json::parse(read_file(resp));
        std::filesystem::remove(resp);
        Vector v = j.at("embedding").get<Vector>();
        if (v.size() != dim_) throw ShapeError("text embedding has the wrong dimension");
        v = normalized(std::move(v));
        std::lock_guard lock(mutex_);
        cache_.emplace(std::string(text), v);
        return v;
    }

    Vector embed_image(const ImageArtifact& image) const override {
        if (image.feature_embedding.size() != dim_) throw ShapeError("image embedding has the wrong dimension");
        return normalized(image.feature_embedding);
    }

  private:
    std::string command_;
    std::size_t dim_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, Vector> cache_;
};

// ---------------------------------------------------------------------------
// Aesthetics head

/// Fully connected network over an image embedding. Layers are affine with no
/// activation in between, matching the public LAION-style predictor.
class AestheticsHead {
  public:
    struct Layer {
        std::size_t in = 0, out = 0;
        Vector weight; // out x in, row-major
        Vector bias;   // out
    };

    AestheticsHead() = default;

    explicit AestheticsHead(std::vector<Layer> layers) : layers_(std::move(layers)) { check(); }

    /// Widths of the public predictor after its input layer.
    static std::vector<std::size_t> reference_widths() { return {1024, 128, 64, 16, 1}; }

    /// Seeded random head; final bias `offset` centres scores on the nominal 0-10 scale.
    static AestheticsHead random(std::size_t input_dim, std::uint64_t seed,
                                 std::vector<std::size_t> widths = reference_widths(), double offset = 5.0) {
        if (widths.empty() || widths.back() != 1) throw ConfigError("aesthetics head must end in one output");
        Rng rng(hash_combine(seed, 0xae57ULL));
        std::vector<Layer> layers;
        std::size_t in = input_dim;
        for (std::size_t out : widths) {
            Layer l{in, out, Vector(in * out), Vector(out, 0.0)};
            const double scale = 1.0 / std::sqrt(static_cast<double>(in));
            for (auto& w : l.weight) w = scale * rng.normal();
            layers.push_back(std::move(l));
            in = out;
        }
        layers.back().bias[0] = offset;
        return AestheticsHead(std::move(layers));
    }

    /// An all-zero head of the given shape.
    static AestheticsHead zeros(std::size_t input_dim, std::vector<std::size_t> widths = {1}) {
        std::vector<Layer> layers;
        std::size_t in = input_dim;
        for (std::size_t out : widths) {
            layers.push_back({in, out, Vector(in * out, 0.0), Vector(out, 0.0)});
            in = out;
        }
        return AestheticsHead(std::move(layers));
    }

    std::size_t input_dimension() const { return layers_.empty() ? 0 : layers_.front().in; }

    double forward(const Vector& x) const {
        if (x.size() != input_dimension())
            throw ShapeError("aesthetics head expects dimension " + std::to_string(input_dimension()) + ", got " +
                             std::to_string(x.size()));
        Vector cur = x;
        for (const auto& l : layers_) {
            Vector next(l.bias);
            for (std::size_t o = 0; o < l.out; ++o) {
                const double* w = &l.weight[o * l.in];
                for (std::size_t i = 0; i < l.in; ++i) next[o] += w[i] * cur[i];
            }
            cur = std::move(next);
        }
        return cur[0];
    }

    /// d(score)/d(input). Constant for a purely affine stack.
    Vector input_gradient() const {
        Vector g{1.0};
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
            Vector prev(it->in, 0.0);
            for (std::size_t o = 0; o < it->out; ++o)
                for (std::size_t i = 0; i < it->in; ++i) prev[i] += g[o] * it->weight[o * it->in + i];
            g = std::move(prev);
        }
        return g;
    }

    nlohmann::json to_json() const {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& l : layers_) {
            nlohmann::json rows = nlohmann::json::array();
            for (std::size_t o = 0; o < l.out; ++o)
                rows.push_back(Vector(l.weight.begin() + static_cast<std::ptrdiff_t>(o * l.in),
                                      l.weight.begin() + static_cast<std::ptrdiff_t>((o + 1) * l.in)));
            layers.push_back({{"weight", rows}, {"bias", l.bias}});
        }
        return {{"layers", layers}};
    }

    static AestheticsHead from_json(const nlohmann::json& j) {
        std::vector<Layer> layers;
        for (const auto& jl : j.at("layers")) {
            const auto rows = jl.at("weight").get<std::vector<Vector>>();
            Layer l;
            l.out = rows.size();
            l.in = rows.empty() ? 0 : rows.front().size();
            for (const auto& r : rows) {
                if (r.size() != l.in) throw DataError("aesthetics weights: ragged weight matrix");
                l.weight.insert(l.weight.end(), r.begin(), r.end());
            }
            l.bias = jl.at("bias").get<Vector>();
            layers.push_back(std::move(l));
        }
        return AestheticsHead(std::move(layers));
    }

    static AestheticsHead load(const std::filesystem::path& path) {
        try {
            return from_json(nlohmann::json::parse(read_file(path)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("invalid aesthetics weights file " + path.string() + ": " + e.what());
        }
    }

  private:
    void check() const {
        if (layers_.empty()) throw ConfigError("aesthetics head has no layers");
        for (std::size_t k = 0; k < layers_.size(); ++k) {
            const auto& l = layers_[k];
            if (l.in == 0 || l.weight.size() != l.in * l.out || l.bias.size() != l.out)
                throw ShapeError("aesthetics layer " + std::to_string(k) + " has inconsistent shape");
            if (k > 0 && layers_[k - 1].out != l.in) throw ShapeError("aesthetics layers do not chain");
            if (!all_finite(l.weight) || !all_finite(l.bias)) throw DataError("aesthetics weights are not finite");
        }
        if (layers_.back().out != 1) throw ShapeError("aesthetics head must produce a scalar");
    }

    std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Scores

inline double aesthetics_score(const Vector& image_embedding, const AestheticsHead& head) {
    return head.forward(image_embedding);
}

inline constexpr double kUnitTolerance = 1e-6;

inline double alignment_score(const Vector& text_embedding, const Vector& image_embedding) {
    if (text_embedding.size() != image_embedding.size())
        throw ShapeError("alignment_score: dimension mismatch");
    if (std::abs(norm(text_embedding) - 1.0) > kUnitTolerance || std::abs(norm(image_embedding) - 1.0) > kUnitTolerance)
        throw DataError("alignment_score: inputs must be unit vectors");
    return std::clamp(dot(text_embedding, image_embedding), -1.0, 1.0);
}

/// Floor applied to marginal entries before they divide.
inline constexpr double kMarginalFloor = 1e-12;

/// Validates a probability matrix: N >= 1 rows, each non-negative and summing to 1.
inline void check_probability_rows(std::span<const Vector> rows) {
    if (rows.empty()) throw DataError("fidelity_score: empty probability matrix");
    const std::size_t C = rows.front().size();
    if (C == 0) throw DataError("fidelity_score: rows have zero classes");
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != C) throw ShapeError("fidelity_score: row " + std::to_string(i) + " has a different width");
        double s = 0.0;
        for (double p : rows[i]) {
            if (!(p >= 0.0) || !std::isfinite(p))
                throw DataError("fidelity_score: row " + std::to_string(i) + " has a negative or non-finite entry");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-6) throw DataError("fidelity_score: row " + std::to_string(i) + " does not sum to 1");
    }
}

/// Inception-Score style statistic: exp(mean_i KL(p_i || mean_j p_j)), >= 1.
inline double fidelity_score(std::span<const Vector> rows) {
    check_probability_rows(rows);
    const std::size_t N = rows.size(), C = rows.front().size();
    Vector marginal(C, 0.0);
    for (const auto& r : rows)
        for (std::size_t c = 0; c < C; ++c) marginal[c] += r[c];
    for (auto& m : marginal) m = std::max(m / static_cast<double>(N), kMarginalFloor);
    double kl_sum = 0.0;
    for (const auto& r : rows) {
        double kl = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            if (r[c] > 0.0) kl += r[c] * std::log(r[c] / marginal[c]);
        kl_sum += kl;
    }
    // Rounding can push a true zero KL a hair below zero.
    return std::max(1.0, std::exp(kl_sum / static_cast<double>(N)));
}

/// Split-averaged variant: mean and standard deviation of fidelity_score over
/// `splits` contiguous chunks.
inline std::pair<double, double> fidelity_score_splits(std::span<const Vector> rows, std::size_t splits) {
    check_probability_rows(rows);
    if (splits == 0 || splits > rows.size()) throw ConfigError("split count must be in [1, N]");
    Vector scores;
    for (std::size_t k = 0; k < splits; ++k) {
        const std::size_t b = k * rows.size() / splits, e = (k + 1) * rows.size() / splits;
        scores.push_back(fidelity_score(rows.subspan(b, e - b)));
    }
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= static_cast<double>(splits);
    double var = 0.0;
    for (double s : scores) var += (s - mean) * (s - mean);
    return {mean, std::sqrt(var / static_cast<double>(splits))};
}

/// Optional per-component affine rescale, applied before weighting. Identity by default.
struct ComponentRescale {
    bool enabled = false;
    double aesthetics_scale = 1.0, aesthetics_shift = 0.0;
    double alignment_scale = 1.0, alignment_shift = 0.0;
    double fidelity_scale = 1.0, fidelity_shift = 0.0;
};

/// Everything needed to score images: embeddings, aesthetics head and weights.
struct RewardModel {
    const EmbeddingProvider* embedder = nullptr;
    const AestheticsHead* head = nullptr;
    RewardWeights weights;
    ComponentRescale rescale;

    /// Scores a batch of samples. Each sample is (normal prompt, its images).
    /// Aesthetics and alignment are per-sample means; fidelity is shared
    /// across the batch and computed over all of its images.
    std::vector<RewardBreakdown> score_batch(
        const std::vector<std::pair<std::string, std::vector<ImageArtifact>>>& samples) const {
        if (!embedder || !head) throw ConfigError("reward model is missing its embedder or aesthetics head");
        std::vector<Vector> probs;
        for (const auto& [_, images] : samples)
            for (const auto& img : images) probs.push_back(img.class_probs);
        const double fidelity = probs.empty() ? 1.0 : fidelity_score(probs);

        std::vector<RewardBreakdown> out;
        for (const auto& [prompt, images] : samples) {
            if (images.empty()) throw DataError("sample has no images");
            const Vector text = embedder->embed_text(prompt);
            double aes = 0.0, ali = 0.0;
            for (const auto& img : images) {
                const Vector e = embedder->embed_image(img);
                aes += aesthetics_score(e, *head);
                ali += alignment_score(text, e);
            }
            aes /= static_cast<double>(images.size());
            ali /= static_cast<double>(images.size());
            double fid = fidelity;
            if (rescale.enabled) {
                aes = rescale.aesthetics_scale * aes + rescale.aesthetics_shift;
                ali = rescale.alignment_scale * ali + rescale.alignment_shift;
                fid = rescale.fidelity_scale * fid + rescale.fidelity_shift;
            }
            out.push_back(composite_reward(aes, ali, fid, weights));
        }
        return out;
    }
};

} // namespace negopt::reward
