#pragma once

#include "negopt/common.hpp"
#include "negopt/imagegen.hpp"
#include "negopt/optim.hpp"
#include "negopt/policy.hpp"
#include "negopt/reward.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <set>

namespace negopt::rl {

using policy::PolicyModel;
using policy::TokenIds;

/// PPO hyperparameters. learning_rate, effective_batch_size and epochs default
/// to the published RL settings; the rest are declared defaults.
struct RlConfig {
    double learning_rate = 1e-5;
    std::size_t effective_batch_size = 16;
    std::size_t epochs = 8;
    double clip_ratio = 0.2;
    double kl_coefficient = 0.02;
    std::uint64_t seed = 0;
    reward::RewardWeights reward_weights;
    std::size_t ppo_epochs = 1;
    double rollout_temperature = 1.0;
    /// Images generated per rollout sample (seeds 0 .. n-1).
    std::size_t rollout_images = 1;
    /// Words whose share among greedy validation decodes is logged per epoch.
    std::vector<std::string> monitor_tokens;

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
        if (effective_batch_size == 0) throw ConfigError("effective_batch_size must be positive");
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (!(clip_ratio > 0.0) || !std::isfinite(clip_ratio)) throw ConfigError("clip_ratio must be > 0");
        if (!(kl_coefficient >= 0.0) || !std::isfinite(kl_coefficient)) throw ConfigError("kl_coefficient must be >= 0");
        if (ppo_epochs == 0) throw ConfigError("ppo_epochs must be positive");
        if (!(rollout_temperature > 0.0)) throw ConfigError("rollout_temperature must be > 0");
        if (rollout_images == 0) throw ConfigError("rollout_images must be positive");
        reward_weights.validate();
    }

    imagegen::GenerationConfig rollout_generation(imagegen::GenerationConfig base = {}) const {
        base.seeds.clear();
        for (std::size_t i = 0; i < rollout_images; ++i) base.seeds.push_back(static_cast<std::int64_t>(i));
        return base;
    }

    nlohmann::ordered_json to_json() const {
        return {{"learning_rate", learning_rate},
                {"effective_batch_size", effective_batch_size},
                {"epochs", epochs},
                {"clip_ratio", clip_ratio},
                {"kl_coefficient", kl_coefficient},
                {"seed", seed},
                {"reward_weights", reward_weights.to_json()},
                {"ppo_epochs", ppo_epochs},
                {"rollout_temperature", rollout_temperature},
                {"rollout_images", rollout_images},
                {"monitor_tokens", monitor_tokens}};
    }
};

struct RolloutSample {
    std::string prompt;
    std::string negative_prompt;
    TokenIds source;
    TokenIds actions;   // generated tokens, then <eos> if generation stopped on its own
    Vector old_log_probs; // under the policy that sampled
    Vector ref_log_probs; // under the reference policy
    reward::RewardBreakdown reward;

    bool operator==(const RolloutSample&) const = default;
};

struct RolloutBatch {
    std::vector<RolloutSample> samples;
    std::size_t failed = 0;

    bool operator==(const RolloutBatch&) const = default;

    void validate() const {
        for (const auto& s : samples) {
            if (s.old_log_probs.size() != s.actions.size() || s.ref_log_probs.size() != s.actions.size())
                throw DataError("rollout sample log-prob sequences differ in length");
            if (!std::isfinite(s.reward.total)) throw DataError("rollout sample has a non-finite reward");
        }
    }
};

/// Samples one negative prompt per prompt, renders (p, p') and scores the batch.
/// Samples whose generation fails are dropped and counted in `failed`.
inline RolloutBatch collect_rollouts(const PolicyModel& policy, const PolicyModel& reference,
                                     const std::vector<std::string>& prompts, const imagegen::ImageGenerator& generator,
                                     const reward::RewardModel& reward_model, const RlConfig& config, Rng& rng,
                                     const imagegen::GenerationConfig& base_generation = {}) {
    if (prompts.empty()) throw DataError("collect_rollouts: no prompts");
    if (!(policy.tokenizer == reference.tokenizer)) throw ConfigError("policy and reference tokenizers differ");
    const auto gen_config = config.rollout_generation(base_generation);

    RolloutBatch batch;
    std::vector<std::pair<std::string, std::vector<imagegen::ImageArtifact>>> scored;
    for (const auto& prompt : prompts) {
        RolloutSample s;
        s.prompt = prompt;
        s.source = policy.source_for(prompt);
        auto g = policy::decode(policy, s.source, config.rollout_temperature, policy.max_target_tokens, &rng);
        s.actions = g.actions();
        if (s.actions.empty()) {
            ++batch.failed;
            continue;
        }
        s.negative_prompt = trim(policy.tokenizer.decode(g.tokens));
        s.old_log_probs = policy::score_actions(policy, s.source, s.actions);
        s.ref_log_probs = policy::score_actions(reference, s.source, s.actions);
        try {
            auto images = generator.generate(prompt, s.negative_prompt, gen_config);
            scored.emplace_back(prompt, std::move(images));
        } catch (const Error& e) {
            log::warn(std::string("rollout generation failed: ") + e.what());
            ++batch.failed;
            continue;
        }
        batch.samples.push_back(std::move(s));
    }
    if (!scored.empty()) {
        auto rewards = reward_model.score_batch(scored);
        for (std::size_t i = 0; i < rewards.size(); ++i) batch.samples[i].reward = rewards[i];
    }
    if (batch.failed) log::warn(std::to_string(batch.failed) + " rollout samples failed and were excluded");
    batch.validate();
    return batch;
}

/// min(r * A, clip(r, 1 - eps, 1 + eps) * A).
inline double clipped_surrogate(double ratio, double advantage, double clip_ratio) {
    const double clipped = std::clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio);
    return std::min(ratio * advantage, clipped * advantage);
}

/// Non-negative per-token KL estimate exp(q - p) - 1 - (q - p); zero when p == q.
inline double kl_estimate(double log_p, double log_q) {
    const double d = log_q - log_p;
    return std::expm1(d) - d;
}

struct PpoStats {
    double mean_reward = 0.0;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
    double loss = 0.0;
    double update_norm = 0.0;
};

/// Batch-mean-centred terminal rewards. Offsets are taken from the first
/// reward so that a batch of equal rewards yields exact zeros.
inline Vector advantages(const RolloutBatch& batch) {
    Vector a;
    if (batch.samples.empty()) return a;
    const double pivot = batch.samples.front().reward.total;
    double mean = 0.0;
    for (const auto& s : batch.samples) a.push_back(s.reward.total - pivot);
    for (double d : a) mean += d;
    mean /= static_cast<double>(a.size());
    for (double& d : a) d -= mean;
    return a;
}

/// Gradient of the PPO loss at the current parameters:
///   L = (1/T) sum_tokens [ -min(r A, clip(r) A) + kl_coef * KL_k3(pi || ref) ]
/// with T the number of action tokens in the batch and A the sample's
/// centred reward broadcast to all its tokens.
inline Vector ppo_gradient(const PolicyModel& policy, const RolloutBatch& batch, const RlConfig& config,
                           PpoStats* stats = nullptr) {
    if (batch.samples.empty()) throw DataError("ppo_update: empty batch");
    batch.validate();
    const Vector adv = advantages(batch);
    std::size_t tokens = 0;
    for (const auto& s : batch.samples) tokens += s.actions.size();
    const double inv_t = 1.0 / static_cast<double>(tokens);

    Vector grad(policy.network.parameters().size(), 0.0);
    double loss = 0.0, kl_sum = 0.0;
    std::size_t clipped = 0;
    for (std::size_t i = 0; i < batch.samples.size(); ++i) {
        const auto& s = batch.samples[i];
        const Vector now = policy::score_actions(policy, s.source, s.actions);
        Vector w(s.actions.size());
        for (std::size_t t = 0; t < s.actions.size(); ++t) {
            const double ratio = std::exp(now[t] - s.old_log_probs[t]);
            const double unclipped = ratio * adv[i];
            const double surrogate = clipped_surrogate(ratio, adv[i], config.clip_ratio);
            const bool is_clipped = surrogate < unclipped;
            if (is_clipped) ++clipped;
            const double kl = kl_estimate(now[t], s.ref_log_probs[t]);
            kl_sum += kl;
            loss += inv_t * (-surrogate + config.kl_coefficient * kl);
            const double d_surrogate = is_clipped ? 0.0 : unclipped;
            const double d_kl = -std::expm1(s.ref_log_probs[t] - now[t]);
            w[t] = inv_t * (-d_surrogate + config.kl_coefficient * d_kl); // dL/dlog pi
        }
        policy::accumulate_weighted_logprob_grad(policy, s.source, s.actions, w, grad);
    }
    if (!std::isfinite(loss) || !all_finite(grad)) {
        std::string dump;
        for (const auto& s : batch.samples)
            dump += "\n  prompt='" + s.prompt + "' neg='" + s.negative_prompt + "' reward=" + std::to_string(s.reward.total);
        throw TrainingError("non-finite PPO loss " + std::to_string(loss) + "; batch:" + dump);
    }
    if (stats) {
        double r = 0.0;
        for (const auto& s : batch.samples) r += s.reward.total;
        stats->mean_reward = r / static_cast<double>(batch.samples.size());
        stats->mean_kl = kl_sum * inv_t;
        stats->clip_fraction = static_cast<double>(clipped) * inv_t;
        stats->loss = loss;
    }
    return grad;
}

/// Applies config.ppo_epochs gradient steps on one rollout batch. Stats
/// describe the first inner epoch (before any step) plus the total update norm.
inline PpoStats ppo_update(PolicyModel& policy, AdamW& optimizer, const RolloutBatch& batch, const RlConfig& config) {
    config.validate();
    const Vector before = policy.network.parameters();
    PpoStats first;
    for (std::size_t k = 0; k < config.ppo_epochs; ++k) {
        PpoStats s;
        const Vector grad = ppo_gradient(policy, batch, config, &s);
        if (k == 0) first = s;
        optimizer.step(policy.network.parameters(), grad, config.learning_rate);
    }
    double sq = 0.0;
    const auto& after = policy.network.parameters();
    for (std::size_t i = 0; i < after.size(); ++i) sq += (after[i] - before[i]) * (after[i] - before[i]);
    first.update_norm = std::sqrt(sq);
    return first;
}

inline AdamW make_rl_optimizer(const PolicyModel& policy) {
    return AdamW(policy.network.parameters().size(), {.weight_decay = 0.0});
}

struct GreedyValidation {
    double mean_reward = std::numeric_limits<double>::quiet_NaN();
    /// Fraction of decodes containing at least one monitored word.
    double monitor_rate = 0.0;
};

/// Greedy decodes of every prompt, scored with fidelity shared per chunk of `chunk` prompts.
inline GreedyValidation greedy_validation(const PolicyModel& policy, const std::vector<std::string>& prompts,
                                          const imagegen::ImageGenerator& generator,
                                          const reward::RewardModel& reward_model,
                                          const imagegen::GenerationConfig& gen_config, std::size_t chunk,
                                          const std::vector<std::string>& monitor_tokens = {}) {
    std::set<std::string> monitored;
    for (const auto& t : monitor_tokens) monitored.insert(to_lower(t));
    double sum = 0.0;
    std::size_t n = 0, hits = 0, decoded = 0;
    for (std::size_t start = 0; start < prompts.size(); start += chunk) {
        std::vector<std::pair<std::string, std::vector<imagegen::ImageArtifact>>> scored;
        for (std::size_t i = start; i < std::min(prompts.size(), start + chunk); ++i) {
            const auto g = policy::decode(policy, policy.source_for(prompts[i]), 0.0, policy.max_target_tokens, nullptr);
            const std::string text = trim(policy.tokenizer.decode(g.tokens));
            ++decoded;
            for (const auto& w : imagegen::words(text))
                if (monitored.contains(w)) {
                    ++hits;
                    break;
                }
            try {
                scored.emplace_back(prompts[i], generator.generate(prompts[i], text, gen_config));
            } catch (const Error& e) {
                log::warn(std::string("validation generation failed: ") + e.what());
            }
        }
        if (scored.empty()) continue;
        for (const auto& r : reward_model.score_batch(scored)) {
            sum += r.total;
            ++n;
        }
    }
    GreedyValidation out;
    if (n) out.mean_reward = sum / static_cast<double>(n);
    if (decoded) out.monitor_rate = static_cast<double>(hits) / static_cast<double>(decoded);
    return out;
}

inline double greedy_mean_reward(const PolicyModel& policy, const std::vector<std::string>& prompts,
                                 const imagegen::ImageGenerator& generator, const reward::RewardModel& reward_model,
                                 const imagegen::GenerationConfig& gen_config, std::size_t chunk) {
    return greedy_validation(policy, prompts, generator, reward_model, gen_config, chunk).mean_reward;
}

struct RewardCurveEntry {
    std::size_t epoch = 0;
    double train_mean_reward = 0.0;
    double validation_mean_reward = 0.0;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
    double validation_monitor_rate = 0.0;

    bool operator==(const RewardCurveEntry&) const = default;
};

struct RlResult {
    PolicyModel model; // highest validation mean reward
    std::vector<RewardCurveEntry> curve;
    std::size_t best_epoch = 0;
    std::size_t failed_samples = 0;
};

/// Epochs of collect -> update over the training prompts. The reference
/// policy anchors the KL penalty; pass the SFT checkpoint for SFT+RL or the
/// base model for RL-only.
inline RlResult train_rl(const PolicyModel& initial, const PolicyModel& reference,
                         const std::vector<std::string>& train_prompts,
                         const std::vector<std::string>& validation_prompts, const imagegen::ImageGenerator& generator,
                         const reward::RewardModel& reward_model, const RlConfig& config,
                         const imagegen::GenerationConfig& base_generation = {},
                         const std::function<void(const RewardCurveEntry&, const PolicyModel&)>& on_epoch = {}) {
    config.validate();
    if (train_prompts.empty() || validation_prompts.empty()) throw DataError("train_rl: prompt sets must be non-empty");
    reward::RewardModel rm = reward_model;
    rm.weights = config.reward_weights;

    PolicyModel policy = initial;
    AdamW opt = make_rl_optimizer(policy);
    Rng rng(config.seed);
    const auto gen_config = config.rollout_generation(base_generation);

    RlResult result;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<std::string> order = train_prompts;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        rng.shuffle(order);
        double reward_sum = 0.0, kl_sum = 0.0, clip_sum = 0.0;
        std::size_t samples = 0, updates = 0;
        for (std::size_t start = 0; start < order.size(); start += config.effective_batch_size) {
            std::vector<std::string> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(
                                                               std::min(order.size(), start + config.effective_batch_size)));
            auto batch = collect_rollouts(policy, reference, chunk, generator, rm, config, rng, base_generation);
            result.failed_samples += batch.failed;
            if (batch.samples.empty()) continue;
            const auto stats = ppo_update(policy, opt, batch, config);
            reward_sum += stats.mean_reward * static_cast<double>(batch.samples.size());
            samples += batch.samples.size();
            kl_sum += stats.mean_kl;
            clip_sum += stats.clip_fraction;
            ++updates;
        }
        RewardCurveEntry e;
        e.epoch = epoch;
        e.train_mean_reward = samples ? reward_sum / static_cast<double>(samples) : 0.0;
        e.mean_kl = updates ? kl_sum / static_cast<double>(updates) : 0.0;
        e.clip_fraction = updates ? clip_sum / static_cast<double>(updates) : 0.0;
        const auto v = greedy_validation(policy, validation_prompts, generator, rm, gen_config,
                                         config.effective_batch_size, config.monitor_tokens);
        e.validation_mean_reward = v.mean_reward;
        e.validation_monitor_rate = v.monitor_rate;
        result.curve.push_back(e);
        std::string line = "rl epoch " + std::to_string(epoch) + ": train reward " + std::to_string(e.train_mean_reward) +
                           ", validation reward " + std::to_string(e.validation_mean_reward) + ", kl " +
                           std::to_string(e.mean_kl);
        if (!config.monitor_tokens.empty()) line += ", monitored-token rate " + std::to_string(e.validation_monitor_rate);
        log::info(line);
        if (on_epoch) on_epoch(e, policy);
        if (e.validation_mean_reward > best) {
            best = e.validation_mean_reward;
            result.best_epoch = epoch;
            result.model = policy;
        }
    }
    if (result.best_epoch == 0) {
        result.model = policy;
        result.best_epoch = config.epochs;
    }
    return result;
}

inline std::string format_reward_curve(const std::vector<RewardCurveEntry>& curve) {
    std::string out;
    for (const auto& e : curve) {
        out += std::to_string(e.epoch);
        for (double v : {e.train_mean_reward, e.validation_mean_reward, e.mean_kl, e.clip_fraction,
                         e.validation_monitor_rate})
            out += ' ' + policy::detail::format_double(v);
        out += '\n';
    }
    return out;
}

inline std::vector<RewardCurveEntry> parse_reward_curve(std::string_view text) {
    std::vector<RewardCurveEntry> out;
    std::istringstream in{std::string(text)};
    RewardCurveEntry e;
    while (in >> e.epoch >> e.train_mean_reward >> e.validation_mean_reward >> e.mean_kl >> e.clip_fraction >>
           e.validation_monitor_rate)
        out.push_back(e);
    return out;
}

/// SFT checkpoint layout plus `reward_curve`, one line per epoch: epoch, train reward,
/// validation reward, mean KL, clip fraction, monitored-token rate.
inline void save_rl_checkpoint(const std::filesystem::path& dir, const RlResult& result,
                               const nlohmann::ordered_json& training) {
    policy::save_checkpoint(dir, result.model, training);
    write_file_atomic(dir / "reward_curve", format_reward_curve(result.curve));
}

} // namespace negopt::rl
