#pragma once

#include "negopt/common.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <memory>
#include <atomic>
#include <functional>
#include <map>
#include <thread>

#include <unistd.h>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace negopt::imagegen {

/// Raised when the generator runtime cannot be reached or a seed fails.
class GeneratorError : public Error {
  public:
    using Error::Error;
};

/// Image generation settings. Defaults are the published evaluation settings.
struct GenerationConfig {
    std::size_t steps = 25;
    double guidance_scale = 7.5;
    std::vector<std::int64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7};
    std::size_t width = 512;
    std::size_t height = 512;

    void validate() const {
        if (steps == 0) throw ConfigError("steps must be positive");
        if (!(guidance_scale > 0.0) || !std::isfinite(guidance_scale)) throw ConfigError("guidance_scale must be > 0");
        if (seeds.empty()) throw ConfigError("at least one seed is required");
        if (std::set<std::int64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
            throw ConfigError("seeds must be pairwise distinct");
        if (width == 0 || height == 0) throw ConfigError("image size must be positive");
    }

    nlohmann::ordered_json to_json() const {
        return {{"steps", steps}, {"guidance_scale", guidance_scale}, {"seeds", seeds}, {"width", width},
                {"height", height}};
    }
};

/// What downstream scoring reads from a generated image.
struct ImageArtifact {
    std::int64_t seed = 0;
    Vector feature_embedding;
    Vector class_probs;
    std::optional<std::string> pixels;

    bool operator==(const ImageArtifact&) const = default;

    void validate() const {
        if (!all_finite(feature_embedding) || feature_embedding.empty())
            throw GeneratorError("artifact feature embedding is empty or non-finite");
        double s = 0.0;
        for (double p : class_probs) {
            if (!(p >= 0.0)) throw GeneratorError("artifact class probabilities must be non-negative");
            s += p;
        }
        if (class_probs.empty() || std::abs(s - 1.0) > 1e-6)
            throw GeneratorError("artifact class probabilities must sum to 1");
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"seed", seed}, {"feature_embedding", feature_embedding}, {"class_probs", class_probs}};
        if (pixels) j["pixels"] = *pixels;
        return j;
    }

    static ImageArtifact from_json(const nlohmann::json& j) {
        ImageArtifact a;
        a.seed = j.at("seed").get<std::int64_t>();
        a.feature_embedding = j.at("feature_embedding").get<Vector>();
        a.class_probs = j.at("class_probs").get<Vector>();
        if (j.contains("pixels") && j.at("pixels").is_string()) a.pixels = j.at("pixels").get<std::string>();
        return a;
    }
};

/// Text-to-image generator. Returns one artifact per configured seed, in seed order.
class ImageGenerator {
  public:
    virtual ~ImageGenerator() = default;
    virtual std::vector<ImageArtifact> generate(std::string_view prompt,
                                                const std::optional<std::string>& negative_prompt,
                                                const GenerationConfig& config) const = 0;
    /// Stable identifier used to key cached artifacts.
    virtual std::string identity() const = 0;
};

// ---------------------------------------------------------------------------
// Hashed word vectors (shared with the desk-scale embedding provider)

/// Lower-cased alphanumeric words; punctuation separates words and is dropped.
inline std::vector<std::string> words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isalnum(u) || c == '-' || c == '_' || c == '\'' || u >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

/// Normalized sum of per-word N(0, 1) vectors seeded by (key, word).
inline Vector hashed_word_vector(const std::vector<std::string>& ws, std::size_t dim, std::uint64_t key) {
    Vector v(dim, 0.0);
    for (const auto& w : ws) {
        Rng rng(hash_combine(key, fnv1a(w)));
        for (auto& x : v) x += rng.normal();
    }
    if (ws.empty()) {
        Rng rng(hash_combine(key, 0xe3b0c442ULL));
        for (auto& x : v) x = rng.normal();
    }
    return normalized(std::move(v));
}

// ---------------------------------------------------------------------------
// Mock generator

struct MockConfig {
    std::size_t embed_dim = 64;
    std::size_t num_classes = 10;
    std::uint64_t key = 0x6e65676f;
    /// Key of the word vectors for prompts; must match the embedding provider's key.
    std::uint64_t text_key = 0x0c11b;
    double noise_scale = 0.35;
    double negative_scale = 0.25;
    double class_sharpness = 3.0;
    double class_noise = 0.5;

    bool rigged = false;
    std::vector<std::string> trigger_tokens{"blurry"};
    /// Direction added to features when a trigger token is present; normalized internally.
    Vector bonus_direction;
    double bonus_strength = 1.0;

    nlohmann::ordered_json to_json() const {
        return {{"embed_dim", embed_dim},         {"num_classes", num_classes},
                {"key", key},                     {"noise_scale", noise_scale},
                {"negative_scale", negative_scale}, {"class_sharpness", class_sharpness},
                {"class_noise", class_noise},     {"rigged", rigged},
                {"trigger_tokens", trigger_tokens}, {"bonus_strength", bonus_strength}};
    }
};

/// Deterministic test double. Features and class probabilities derive from a
/// keyed hash of (prompt, negative prompt, seed). In rigged mode, trigger
/// words in the negative prompt are removed from the hashed text and instead
/// push the features along a fixed bonus direction.
class MockGenerator final : public ImageGenerator {
  public:
    explicit MockGenerator(MockConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.embed_dim == 0 || cfg_.num_classes < 2) throw ConfigError("mock generator needs dim > 0, classes > 1");
        if (cfg_.rigged) {
            if (cfg_.bonus_direction.size() != cfg_.embed_dim)
                throw ConfigError("rigged mock needs a bonus direction of the embedding dimension");
            bonus_ = normalized(cfg_.bonus_direction);
        }
        Rng rng(hash_combine(cfg_.key, 0xc1a55ULL));
        projection_.resize(cfg_.num_classes * cfg_.embed_dim);
        for (auto& x : projection_) x = rng.normal();
        for (const auto& t : cfg_.trigger_tokens) triggers_.insert(to_lower(t));
    }

    const MockConfig& config() const { return cfg_; }

    bool is_triggered(const std::optional<std::string>& negative_prompt) const {
        if (!cfg_.rigged || !negative_prompt) return false;
        for (const auto& w : words(*negative_prompt))
            if (triggers_.contains(w)) return true;
        return false;
    }

    std::vector<ImageArtifact> generate(std::string_view prompt, const std::optional<std::string>& negative_prompt,
                                        const GenerationConfig& config) const override {
        config.validate();
        const std::size_t D = cfg_.embed_dim, C = cfg_.num_classes;
        const Vector text = hashed_word_vector(words(prompt), D, cfg_.text_key);

        std::vector<std::string> neg_words;
        bool triggered = false;
        if (negative_prompt) {
            for (auto& w : words(*negative_prompt)) {
                if (cfg_.rigged && triggers_.contains(w)) triggered = true;
                else neg_words.push_back(std::move(w));
            }
        }
        std::string neg_key = negative_prompt ? "1:" : "0:";
        for (const auto& w : neg_words) neg_key += w + ' ';
        Vector neg_vec(D, 0.0);
        if (!neg_words.empty()) neg_vec = hashed_word_vector(neg_words, D, hash_combine(cfg_.key, 0x9e9ULL));

        const std::uint64_t base = hash_combine(hash_combine(cfg_.key, fnv1a(trim(prompt))), fnv1a(neg_key));
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

        std::vector<ImageArtifact> out;
        out.reserve(config.seeds.size());
        for (std::int64_t seed : config.seeds) {
            Rng rng(hash_combine(base, static_cast<std::uint64_t>(seed)));
            Vector f(D);
            for (std::size_t k = 0; k < D; ++k)
                f[k] = text[k] + cfg_.noise_scale * inv_sqrt_d * rng.normal() - cfg_.negative_scale * neg_vec[k];
            f = normalized(std::move(f));
            if (triggered) {
                for (std::size_t k = 0; k < D; ++k) f[k] += cfg_.bonus_strength * bonus_[k];
                f = normalized(std::move(f));
            }

            Vector logits(C);
            for (std::size_t c = 0; c < C; ++c) {
                double z = 0.0;
                for (std::size_t k = 0; k < D; ++k) z += projection_[c * D + k] * f[k];
                logits[c] = cfg_.class_sharpness * z + cfg_.class_noise * rng.normal();
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double sum = 0.0;
            for (auto& z : logits) sum += (z = std::exp(z - mx));
            for (auto& z : logits) z /= sum;

            out.push_back({seed, std::move(f), std::move(logits), std::nullopt});
        }
        return out;
    }

    std::string identity() const override { return "mock:" + sha256_hex(cfg_.to_json().dump()).substr(0, 16); }

  private:
    MockConfig cfg_;
    Vector bonus_;
    Vector projection_;
    std::set<std::string> triggers_;
};

// ---------------------------------------------------------------------------
// External diffusion runtime

struct DiffusionConfig {
    /// Shell command reading request lines on stdin and writing response lines
    /// on stdout. Falls back to $NEGOPT_DIFFUSION_CMD.
    std::string command;
    /// Model identifier forwarded in every request. Falls back to $NEGOPT_DIFFUSION_MODEL.
    std::string model = "stabilityai/stable-diffusion-2-base";
    bool keep_pixels = false;
    std::filesystem::path work_dir = std::filesystem::temp_directory_path();

    static DiffusionConfig from_environment() {
        DiffusionConfig c;
        if (const char* cmd = std::getenv("NEGOPT_DIFFUSION_CMD")) c.command = cmd;
        if (const char* m = std::getenv("NEGOPT_DIFFUSION_MODEL")) c.model = m;
        return c;
    }
};

/// Builds the request object for one seed.
inline nlohmann::ordered_json make_request(std::string_view prompt, const std::optional<std::string>& negative_prompt,
                                           const GenerationConfig& config, std::int64_t seed,
                                           std::string_view model = {}) {
    nlohmann::ordered_json r;
    r["prompt"] = std::string(prompt);
    r["negative_prompt"] = negative_prompt ? nlohmann::ordered_json(*negative_prompt) : nlohmann::ordered_json(nullptr);
    r["steps"] = config.steps;
    r["guidance_scale"] = config.guidance_scale;
    r["seed"] = seed;
    r["width"] = config.width;
    r["height"] = config.height;
    if (!model.empty()) r["model"] = std::string(model);
    return r;
}

/// Adapter for a diffusion runtime behind a process boundary.
///
/// Request (one JSON object per line, one line per seed):
///   {prompt, negative_prompt|null, steps, guidance_scale, seed, width, height, model}
/// Response (one JSON object per line, any order):
///   {seed, feature_embedding: [...], class_probs: [...], pixels?: "..."}  or  {seed, error: "..."}
/// The runtime is expected to embed the image with the configured CLIP model
/// and classify it with the configured Inception network before replying.
class DiffusionGenerator final : public ImageGenerator {
  public:
    explicit DiffusionGenerator(DiffusionConfig cfg) : cfg_(std::move(cfg)) {}

    bool available() const { return !cfg_.command.empty(); }

    std::vector<ImageArtifact> generate(std::string_view prompt, const std::optional<std::string>& negative_prompt,
                                        const GenerationConfig& config) const override {
        config.validate();
        if (!available())
            throw GeneratorError("diffusion runtime unavailable: set NEGOPT_DIFFUSION_CMD or --diffusion-cmd");

        std::string body;
        for (auto seed : config.seeds) body += make_request(prompt, negative_prompt, config, seed, cfg_.model).dump() + "\n";
        const auto tag = sha256_hex(body).substr(0, 16) + "-" + std::to_string(counter_++);
        const auto req = cfg_.work_dir / ("negopt-req-" + tag + ".jsonl");
        const auto resp = cfg_.work_dir / ("negopt-resp-" + tag + ".jsonl");
        write_file_atomic(req, body);
        const std::string cmd = cfg_.command + " < '" + req.string() + "' > '" + resp.string() + "'";
        const int rc = std::system(cmd.c_str());
        std::filesystem::remove(req);
        if (rc != 0) {
            std::filesystem::remove(resp);
            throw GeneratorError("diffusion runtime exited with status " + std::to_string(rc));
        }
        const std::string content = read_file(resp);
        std::filesystem::remove(resp);

        std::map<std::int64_t, ImageArtifact> by_seed;
        std::string failures;
        for (const auto& line : split(content, '\n')) {
            if (trim(line).empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw GeneratorError(std::string("malformed diffusion response: ") + e.what());
            }
            const auto seed = j.at("seed").get<std::int64_t>();
            if (j.contains("error")) {
                failures += " seed " + std::to_string(seed) + ": " + j.at("error").dump() + ";";
                continue;
            }
            auto a = ImageArtifact::from_json(j);
            if (!cfg_.keep_pixels) a.pixels.reset();
            a.validate();
            by_seed[seed] = std::move(a);
        }
        std::vector<ImageArtifact> out;
        for (auto seed : config.seeds) {
            auto it = by_seed.find(seed);
            if (it == by_seed.end()) {
                if (failures.find("seed " + std::to_string(seed) + ":") == std::string::npos)
                    failures += " seed " + std::to_string(seed) + ": no response;";
                continue;
            }
            out.push_back(std::move(it->second));
        }
        if (!failures.empty()) throw GeneratorError("diffusion generation failed for" + failures);
        return out;
    }

    std::string identity() const override { return "diffusion:" + cfg_.model; }

  private:
    DiffusionConfig cfg_;
    mutable std::atomic<std::uint64_t> counter_{0};
};

// ---------------------------------------------------------------------------
// Artifact cache

/// On-disk cache of artifacts keyed by the SHA-256 of (generator identity, request).
class ArtifactCache {
  public:
    explicit ArtifactCache(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

    static std::string key(std::string_view identity, const nlohmann::ordered_json& request) {
        return sha256_hex(std::string(identity) + "\n" + request.dump());
    }

    std::optional<ImageArtifact> get(const std::string& key) const {
        const auto p = dir_ / (key + ".json");
        if (!std::filesystem::exists(p)) return std::nullopt;
        return ImageArtifact::from_json(nlohmann::json::parse(read_file(p)));
    }

    /// Atomic per key: the entry appears fully written or not at all.
    void put(const std::string& key, const ImageArtifact& a) const {
        const auto tmp_tag = std::to_string(::getpid()) + "-" +
                             std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
        const auto tmp = dir_ / (key + ".json." + tmp_tag);
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            out << a.to_json().dump();
        }
        std::filesystem::rename(tmp, dir_ / (key + ".json"));
    }

    const std::filesystem::path& dir() const { return dir_; }

  private:
    std::filesystem::path dir_;
};

/// Decorator serving repeated requests from an ArtifactCache.
class CachingGenerator final : public ImageGenerator {
  public:
    CachingGenerator(const ImageGenerator& inner, ArtifactCache cache) : inner_(inner), cache_(std::move(cache)) {}

    std::vector<ImageArtifact> generate(std::string_view prompt, const std::optional<std::string>& negative_prompt,
                                        const GenerationConfig& config) const override {
        config.validate();
        std::vector<ImageArtifact> out(config.seeds.size());
        GenerationConfig missing = config;
        missing.seeds.clear();
        std::vector<std::size_t> slots;
        std::vector<std::string> keys(config.seeds.size());
        for (std::size_t i = 0; i < config.seeds.size(); ++i) {
            keys[i] = ArtifactCache::key(inner_.identity(), make_request(prompt, negative_prompt, config, config.seeds[i]));
            if (auto hit = cache_.get(keys[i])) {
                out[i] = std::move(*hit);
                ++hits_;
            } else {
                missing.seeds.push_back(config.seeds[i]);
                slots.push_back(i);
            }
        }
        if (!missing.seeds.empty()) {
            auto fresh = inner_.generate(prompt, negative_prompt, missing);
            for (std::size_t k = 0; k < fresh.size(); ++k) {
                cache_.put(keys[slots[k]], fresh[k]);
                out[slots[k]] = std::move(fresh[k]);
            }
        }
        return out;
    }

    std::string identity() const override { return inner_.identity(); }
    std::size_t hits() const { return hits_; }

  private:
    const ImageGenerator& inner_;
    ArtifactCache cache_;
    mutable std::atomic<std::size_t> hits_{0};
};

} // namespace negopt::imagegen
