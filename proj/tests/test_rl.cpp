#include "negopt/rl.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace negopt;
using namespace negopt::rl;

namespace {

struct Env {
    policy::PolicyModel policy;
    reward::AestheticsHead head;
    reward::HashEmbeddingProvider embedder{32};
    std::unique_ptr<imagegen::MockGenerator> generator;
    reward::RewardModel rm;
    std::vector<std::string> prompts;

    explicit Env(std::uint64_t seed = 1) {
        const auto records = fixture::toy_corpus();
        std::vector<std::string> texts;
        for (const auto& r : records) {
            texts.push_back(dataset::make_source(dataset::kDefaultPrefix, r.prompt));
            texts.push_back(r.negative_prompt);
            prompts.push_back(r.prompt);
        }
        policy::ModelOptions o;
        o.embed = 8;
        o.hidden = 12;
        o.max_target_tokens = 6;
        o.extra_vocabulary = {"blurry"};
        policy = policy::make_base_model(texts, o, seed);
        head = reward::AestheticsHead::random(32, seed, {16, 1});
        imagegen::MockConfig mc;
        mc.embed_dim = 32;
        mc.rigged = true;
        mc.bonus_direction = head.input_gradient();
        generator = std::make_unique<imagegen::MockGenerator>(mc);
        rm = reward::RewardModel{&embedder, &head, {}, {}};
    }
};

RolloutSample sample_with(const policy::PolicyModel& m, const std::string& prompt, const std::string& neg,
                          double reward_total) {
    RolloutSample s;
    s.prompt = prompt;
    s.negative_prompt = neg;
    s.source = m.source_for(prompt);
    s.actions = policy::target_ids(m, neg);
    s.actions.push_back(policy::Tokenizer::kEos);
    s.old_log_probs = policy::score_actions(m, s.source, s.actions);
    s.ref_log_probs = s.old_log_probs;
    s.reward.total = reward_total;
    return s;
}

double norm_diff(const Vector& a, const Vector& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

} // namespace

TEST(RlConfig, DefaultsAndValidation) {
    const RlConfig c;
    EXPECT_DOUBLE_EQ(c.learning_rate, 1e-5);
    EXPECT_EQ(c.effective_batch_size, 16u);
    EXPECT_EQ(c.epochs, 8u);
    EXPECT_DOUBLE_EQ(c.clip_ratio, 0.2);
    EXPECT_DOUBLE_EQ(c.kl_coefficient, 0.02);
    EXPECT_EQ(c.reward_weights.alpha, 5.0);
    EXPECT_EQ(c.rollout_generation().seeds, (std::vector<std::int64_t>{0}));
    auto bad = c;
    bad.kl_coefficient = -1;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = c;
    bad.learning_rate = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Ppo, ClippingArithmetic) {
    EXPECT_EQ(clipped_surrogate(1.5, 2.0, 0.2), 1.2 * 2.0);
    EXPECT_EQ(clipped_surrogate(1.5, -1.0, 0.2), -1.5);
    EXPECT_EQ(clipped_surrogate(0.5, 1.0, 0.2), 0.5);
    EXPECT_EQ(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    EXPECT_EQ(clipped_surrogate(1.1, 3.0, 0.2), 1.1 * 3.0);
}

TEST(Ppo, KlEstimateNonNegative) {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double p = -10 * rng.uniform(), q = -10 * rng.uniform();
        EXPECT_GE(kl_estimate(p, q), 0.0);
    }
    EXPECT_EQ(kl_estimate(-1.3, -1.3), 0.0);
}

TEST(Rollouts, PolicyEqualsReferenceAndSharedFidelity) {
    Env env;
    RlConfig cfg;
    Rng rng(5);
    const auto batch = collect_rollouts(env.policy, env.policy, env.prompts, *env.generator, env.rm, cfg, rng);
    ASSERT_EQ(batch.samples.size() + batch.failed, env.prompts.size());
    ASSERT_FALSE(batch.samples.empty());
    for (const auto& s : batch.samples) {
        EXPECT_EQ(s.old_log_probs, s.ref_log_probs);
        EXPECT_EQ(s.reward.fidelity, batch.samples[0].reward.fidelity);
        EXPECT_EQ(s.actions.size(), s.old_log_probs.size());
    }
}

TEST(Rollouts, DeterministicGivenSeed) {
    Env env;
    RlConfig cfg;
    Rng a(9), b(9);
    EXPECT_EQ(collect_rollouts(env.policy, env.policy, env.prompts, *env.generator, env.rm, cfg, a),
              collect_rollouts(env.policy, env.policy, env.prompts, *env.generator, env.rm, cfg, b));
}

TEST(Rollouts, TokenizerMismatchIsRejected) {
    Env env, other;
    other.policy.tokenizer = policy::Tokenizer::build({"something else entirely"});
    RlConfig cfg;
    Rng rng(0);
    EXPECT_THROW(collect_rollouts(env.policy, other.policy, env.prompts, *env.generator, env.rm, cfg, rng), ConfigError);
}

TEST(Ppo, ConstantRewardAtReferenceGivesNoUpdate) {
    Env env;
    for (double reward : {0.1, 7.3, -2.5}) {
        RolloutBatch batch;
        batch.samples = {sample_with(env.policy, "a wolf in the snow", "cartoon, low quality", reward),
                         sample_with(env.policy, "a castle on a hill at dusk", "watermark, text", reward),
                         sample_with(env.policy, "portrait of an old sailor", "deformed hands", reward)};
        auto m = env.policy;
        auto opt = make_rl_optimizer(m);
        RlConfig cfg;
        cfg.learning_rate = 1e-2;
        const auto stats = ppo_update(m, opt, batch, cfg);
        EXPECT_LE(stats.update_norm, 1e-6);
        EXPECT_LE(norm_diff(m.network.parameters(), env.policy.network.parameters()), 1e-6);
        EXPECT_EQ(stats.mean_kl, 0.0);
    }
}

TEST(Ppo, RewardShiftInvariance) {
    Env env;
    RolloutBatch batch;
    batch.samples = {sample_with(env.policy, "a wolf in the snow", "cartoon, low quality", 1.0),
                     sample_with(env.policy, "a castle on a hill at dusk", "watermark, text", 3.5),
                     sample_with(env.policy, "portrait of an old sailor", "deformed hands", -0.25)};
    // Move the policy off the sampling policy so ratios and clipping are non-trivial.
    auto moved = env.policy;
    Rng rng(1);
    for (auto& p : moved.network.parameters()) p += 0.05 * rng.normal();
    RlConfig cfg;
    for (double c : {-100.0, 0.37, 1e3}) {
        auto shifted = batch;
        for (auto& s : shifted.samples) s.reward.total += c;
        const auto g0 = ppo_gradient(moved, batch, cfg), g1 = ppo_gradient(moved, shifted, cfg);
        EXPECT_LE(norm_diff(g0, g1), 1e-6);
        auto m0 = moved, m1 = moved;
        auto o0 = make_rl_optimizer(m0), o1 = make_rl_optimizer(m1);
        ppo_update(m0, o0, batch, cfg);
        ppo_update(m1, o1, shifted, cfg);
        EXPECT_LE(norm_diff(m0.network.parameters(), m1.network.parameters()), 1e-6);
    }
}

TEST(Ppo, AdvantagesAreCentred) {
    Env env;
    RolloutBatch batch;
    for (double r : {1.0, 2.0, 6.0}) batch.samples.push_back(sample_with(env.policy, "a wolf", "cartoon", r));
    const auto a = advantages(batch);
    EXPECT_NEAR(a[0], -2.0, 1e-12);
    EXPECT_NEAR(a[1], -1.0, 1e-12);
    EXPECT_NEAR(a[2], 3.0, 1e-12);
}

TEST(Ppo, ClipFractionZeroOnFirstStepAndBounded) {
    Env env;
    RlConfig cfg;
    cfg.learning_rate = 5e-2;
    cfg.ppo_epochs = 4;
    Rng rng(2);
    const auto batch = collect_rollouts(env.policy, env.policy, env.prompts, *env.generator, env.rm, cfg, rng);
    auto m = env.policy;
    auto opt = make_rl_optimizer(m);
    const auto first = ppo_update(m, opt, batch, cfg);
    EXPECT_EQ(first.clip_fraction, 0.0);
    PpoStats later;
    ppo_gradient(m, batch, cfg, &later);
    EXPECT_GE(later.clip_fraction, 0.0);
    EXPECT_LE(later.clip_fraction, 1.0);
    EXPECT_GT(later.mean_kl, 0.0);
}

TEST(Ppo, PositiveAdvantageRaisesActionLikelihood) {
    Env env;
    RolloutBatch batch;
    batch.samples = {sample_with(env.policy, "a wolf in the snow", "blurry", 10.0),
                     sample_with(env.policy, "a wolf in the snow", "cartoon", 0.0)};
    auto m = env.policy;
    auto opt = make_rl_optimizer(m);
    RlConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.kl_coefficient = 0.0;
    const auto src = m.source_for("a wolf in the snow");
    const auto good = batch.samples[0].actions, bad = batch.samples[1].actions;
    auto total = [&](const policy::PolicyModel& mm, const policy::TokenIds& a) {
        double s = 0;
        for (double x : policy::score_actions(mm, src, a)) s += x;
        return s;
    };
    const double g0 = total(m, good), b0 = total(m, bad);
    ppo_update(m, opt, batch, cfg);
    EXPECT_GT(total(m, good), g0);
    EXPECT_LT(total(m, bad), b0);
}

TEST(Ppo, EmptyBatchIsAnError) {
    Env env;
    auto opt = make_rl_optimizer(env.policy);
    EXPECT_THROW(ppo_update(env.policy, opt, RolloutBatch{}, RlConfig{}), DataError);
}

TEST(TrainRl, DeterministicAndSelectsBestValidationEpoch) {
    Env env;
    RlConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.effective_batch_size = 2;
    cfg.epochs = 3;
    cfg.seed = 4;
    const auto a = train_rl(env.policy, env.policy, env.prompts, env.prompts, *env.generator, env.rm, cfg);
    const auto b = train_rl(env.policy, env.policy, env.prompts, env.prompts, *env.generator, env.rm, cfg);
    EXPECT_EQ(a.curve, b.curve);
    ASSERT_EQ(a.curve.size(), 3u);
    double best = -1e300;
    for (const auto& e : a.curve) best = std::max(best, e.validation_mean_reward);
    EXPECT_EQ(a.curve[a.best_epoch - 1].validation_mean_reward, best);
    const double again = greedy_mean_reward(a.model, env.prompts, *env.generator, env.rm, cfg.rollout_generation(),
                                            cfg.effective_batch_size);
    EXPECT_DOUBLE_EQ(again, best);
}

TEST(TrainRl, CheckpointHasRewardCurve) {
    Env env;
    RlConfig cfg;
    cfg.epochs = 2;
    cfg.effective_batch_size = 4;
    const auto r = train_rl(env.policy, env.policy, env.prompts, env.prompts, *env.generator, env.rm, cfg);
    fixture::TempDir dir;
    save_rl_checkpoint(dir / "rl", r, {{"rl", cfg.to_json()}});
    EXPECT_EQ(parse_reward_curve(read_file(dir / "rl" / "reward_curve")), r.curve);
    EXPECT_EQ(policy::load_checkpoint(dir / "rl").network.parameters(), r.model.network.parameters());
}

TEST(TrainRl, EmptyPromptSetsAreRejected) {
    Env env;
    EXPECT_THROW(train_rl(env.policy, env.policy, {}, env.prompts, *env.generator, env.rm, RlConfig{}), DataError);
}

TEST(TrainRl, MonitoredTokenRateMatchesGreedyDecodes) {
    Env env;
    RlConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.effective_batch_size = 2;
    cfg.epochs = 3;
    cfg.monitor_tokens = {"Blurry"};
    std::size_t calls = 0;
    const auto r = train_rl(env.policy, env.policy, env.prompts, env.prompts, *env.generator, env.rm, cfg, {},
                            [&](const RewardCurveEntry& e, const policy::PolicyModel& m) {
                                ++calls;
                                EXPECT_EQ(e.epoch, calls);
                                std::size_t hits = 0;
                                for (const auto& p : env.prompts) {
                                    const auto g = policy::decode(m, m.source_for(p), 0.0, m.max_target_tokens, nullptr);
                                    const auto ws = imagegen::words(m.tokenizer.decode(g.tokens));
                                    hits += std::find(ws.begin(), ws.end(), "blurry") != ws.end();
                                }
                                EXPECT_DOUBLE_EQ(e.validation_monitor_rate,
                                                 static_cast<double>(hits) / static_cast<double>(env.prompts.size()));
                            });
    EXPECT_EQ(calls, 3u);
    EXPECT_EQ(r.curve.size(), 3u);
}
