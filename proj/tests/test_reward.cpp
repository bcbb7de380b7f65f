#include "negopt/reward.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <thread>

using namespace negopt;
using namespace negopt::reward;

namespace {

// Straightforward re-derivation: marginal by columns, KL with explicit
// zero handling, accumulated in long double.
double brute_force_fidelity(const std::vector<Vector>& rows) {
    const std::size_t N = rows.size(), C = rows[0].size();
    std::vector<long double> marg(C, 0.0L);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < N; ++i) marg[c] += rows[i][c];
        marg[c] /= static_cast<long double>(N);
    }
    long double total = 0.0L;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) {
            const long double p = rows[i][c];
            if (p == 0.0L) continue;
            total += p * (std::log(p) - std::log(std::max(marg[c], 1e-12L)));
        }
    return static_cast<double>(std::exp(total / static_cast<long double>(N)));
}

std::vector<Vector> random_rows(Rng& rng, std::size_t N, std::size_t C) {
    std::vector<Vector> rows(N, Vector(C));
    for (auto& r : rows) {
        double s = 0;
        for (auto& x : r) {
            // Mix of dense and sparse rows.
            x = rng.below(4) == 0 ? 0.0 : -std::log(1.0 - rng.uniform());
            s += x;
        }
        if (s == 0) {
            r[rng.below(C)] = 1.0;
            s = 1.0;
        }
        for (auto& x : r) x /= s;
    }
    return rows;
}

Vector random_unit(Rng& rng, std::size_t d) {
    Vector v(d);
    for (auto& x : v) x = rng.normal();
    return normalized(v);
}

} // namespace

TEST(Composite, WorkedExamples) {
    EXPECT_DOUBLE_EQ(composite_reward(0.6, 0.4, 2.0, {5, 1, 1}).total, 5 * 0.6 + 0.4 + 2.0);
    EXPECT_NEAR(composite_reward(0.6, 0.4, 2.0, {5, 1, 1}).total, 5.4, 1e-12);
    EXPECT_EQ(composite_reward(3.3, -0.2, 4.0, {0, 0, 0}).total, 0.0);
    EXPECT_EQ(composite_reward(6.08, 0.5, 1.5, {1, 0, 0}).total, 6.08);
    const RewardWeights d;
    EXPECT_EQ(d.alpha, 5.0);
    EXPECT_EQ(d.beta, 1.0);
    EXPECT_EQ(d.gamma, 1.0);
}

TEST(Composite, ComponentsEchoedAndTotalRecomputes) {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const RewardWeights w{rng.normal() * 3, rng.normal(), rng.normal()};
        const double a = 10 * rng.uniform(), b = 2 * rng.uniform() - 1, f = 1 + 9 * rng.uniform();
        const auto r = composite_reward(a, b, f, w);
        EXPECT_EQ(r.aesthetics, a);
        EXPECT_EQ(r.alignment, b);
        EXPECT_EQ(r.fidelity, f);
        EXPECT_EQ(r.total, w.alpha * r.aesthetics + w.beta * r.alignment + w.gamma * r.fidelity);
    }
}

TEST(Composite, RejectsNonFinite) {
    EXPECT_THROW(composite_reward(std::nan(""), 0, 1, {}), Error);
    EXPECT_THROW(composite_reward(1, 0, 1, {std::numeric_limits<double>::infinity(), 1, 1}), Error);
}

TEST(Fidelity, ClosedForms) {
    for (std::size_t C : {2u, 3u, 7u, 10u}) {
        std::vector<Vector> uniform(5, Vector(C, 1.0 / static_cast<double>(C)));
        EXPECT_NEAR(fidelity_score(uniform), 1.0, 1e-12);
        std::vector<Vector> onehots(C, Vector(C, 0.0));
        for (std::size_t c = 0; c < C; ++c) onehots[c][c] = 1.0;
        EXPECT_NEAR(fidelity_score(onehots), static_cast<double>(C), 1e-12);
    }
    const std::vector<Vector> two{{0.9, 0.1}, {0.1, 0.9}};
    EXPECT_NEAR(fidelity_score(two), std::exp(0.9 * std::log(1.8) + 0.1 * std::log(0.2)), 1e-12);
    // Mean KL is 0.3681 to four places, so the score is 1.4449 (not 1.4454).
    EXPECT_NEAR(fidelity_score(two), 1.4449, 1e-4);
    EXPECT_NEAR(fidelity_score(two), 1.4454, 1e-3);
}

TEST(Fidelity, MatchesBruteForceOracle) {
    Rng rng(2024);
    for (int i = 0; i < 200; ++i) {
        const auto rows = random_rows(rng, 1 + rng.below(16), 2 + rng.below(9));
        const double a = fidelity_score(rows), b = brute_force_fidelity(rows);
        EXPECT_LE(std::abs(a - b) / b, 1e-9);
    }
}

TEST(Fidelity, PermutationInvarianceAndBounds) {
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        const std::size_t C = 2 + rng.below(9);
        auto rows = random_rows(rng, 2 + rng.below(15), C);
        const double s = fidelity_score(rows);
        rng.shuffle(rows);
        EXPECT_NEAR(fidelity_score(rows), s, 1e-12 * s);
        EXPECT_GE(s, 1.0);
        EXPECT_LE(s, static_cast<double>(C) * (1 + 1e-12));
    }
    // Identical rows equal the marginal.
    std::vector<Vector> same(4, Vector{0.2, 0.5, 0.3});
    EXPECT_EQ(fidelity_score(same), 1.0);
}

TEST(Fidelity, InvalidInput) {
    EXPECT_THROW(fidelity_score(std::vector<Vector>{}), Error);
    EXPECT_THROW(fidelity_score(std::vector<Vector>{{0.5, 0.6}}), Error);
    EXPECT_THROW(fidelity_score(std::vector<Vector>{{1.2, -0.2}}), Error);
    EXPECT_THROW(fidelity_score(std::vector<Vector>{{0.5, 0.5}, {1.0}}), Error);
}

TEST(Fidelity, SplitMode) {
    std::vector<Vector> rows{{1, 0}, {0, 1}, {1, 0}, {0, 1}};
    const auto [mean, sd] = fidelity_score_splits(rows, 2);
    EXPECT_NEAR(mean, 2.0, 1e-12);
    EXPECT_NEAR(sd, 0.0, 1e-12);
    EXPECT_NEAR(fidelity_score_splits(rows, 1).first, fidelity_score(rows), 1e-15);
    EXPECT_THROW(fidelity_score_splits(rows, 5), ConfigError);
}

TEST(Alignment, IdentitiesAndProperties) {
    Rng rng(4);
    const auto v = random_unit(rng, 16);
    Vector neg(v);
    for (auto& x : neg) x = -x;
    EXPECT_NEAR(alignment_score(v, v), 1.0, 1e-12);
    EXPECT_NEAR(alignment_score(v, neg), -1.0, 1e-12);
    EXPECT_NEAR(alignment_score({1, 0, 0}, {0, 1, 0}), 0.0, 1e-15);
    for (int i = 0; i < 500; ++i) {
        const auto a = random_unit(rng, 1 + rng.below(32));
        const auto b = random_unit(rng, a.size());
        const double s = alignment_score(a, b);
        EXPECT_EQ(s, alignment_score(b, a));
        EXPECT_GE(s, -1.0);
        EXPECT_LE(s, 1.0);
    }
    EXPECT_THROW(alignment_score({1, 0}, {1, 0, 0}), ShapeError);
    EXPECT_THROW(alignment_score({2, 0}, {1, 0}), Error);
}

TEST(Aesthetics, ZeroHeadAndDeterminism) {
    Rng rng(6);
    const auto e = random_unit(rng, 32);
    EXPECT_EQ(aesthetics_score(e, AestheticsHead::zeros(32, {16, 1})), 0.0);
    const auto head = AestheticsHead::random(32, 9);
    EXPECT_EQ(aesthetics_score(e, head), aesthetics_score(e, head));
    EXPECT_TRUE(std::isfinite(aesthetics_score(e, head)));
    EXPECT_THROW(aesthetics_score(random_unit(rng, 31), head), ShapeError);
}

TEST(Aesthetics, InputGradientIsExactForAffineStack) {
    const auto head = AestheticsHead::random(24, 3);
    Rng rng(10);
    const auto x = random_unit(rng, 24);
    const auto g = head.input_gradient();
    Vector y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += 0.01 * g[i];
    EXPECT_NEAR(head.forward(y) - head.forward(x), 0.01 * dot(g, g), 1e-9);
}

TEST(Aesthetics, JsonRoundTrip) {
    fixture::TempDir dir;
    const auto head = AestheticsHead::random(12, 4, {8, 1});
    write_file_atomic(dir / "head.json", head.to_json().dump());
    const auto loaded = AestheticsHead::load(dir / "head.json");
    const Vector x(12, 0.1);
    EXPECT_EQ(loaded.forward(x), head.forward(x));
    write_file_atomic(dir / "bad.json", "{\"layers\": 3}");
    EXPECT_THROW(AestheticsHead::load(dir / "bad.json"), Error);
}

TEST(Embeddings, HashProviderUnitNormAndDeterministic) {
    const HashEmbeddingProvider p(48);
    const auto a = p.embed_text("a wolf in the snow");
    EXPECT_EQ(a.size(), 48u);
    EXPECT_NEAR(norm(a), 1.0, 1e-12);
    EXPECT_EQ(a, p.embed_text("A wolf in the snow"));
    EXPECT_NE(a, p.embed_text("a castle"));
    // Concurrent read-only use gives identical answers.
    std::vector<Vector> outs(4);
    std::vector<std::thread> ts;
    for (int i = 0; i < 4; ++i) ts.emplace_back([&, i] { outs[i] = p.embed_text("a wolf in the snow"); });
    for (auto& t : ts) t.join();
    for (const auto& o : outs) EXPECT_EQ(o, a);
}

TEST(RewardModel, SharedFidelityAndMeans) {
    const HashEmbeddingProvider emb(8);
    const auto head = AestheticsHead::random(8, 1, {4, 1});
    RewardModel rm{&emb, &head, {5, 1, 1}, {}};
    auto img = [](Vector f, Vector p) {
        imagegen::ImageArtifact a;
        a.feature_embedding = std::move(f);
        a.class_probs = std::move(p);
        return a;
    };
    const std::vector<std::pair<std::string, std::vector<imagegen::ImageArtifact>>> batch{
        {"a wolf", {img(Vector(8, 1.0), {1, 0}), img(Vector{1, 0, 0, 0, 0, 0, 0, 0}, {0.5, 0.5})}},
        {"a castle", {img(Vector{0, 1, 0, 0, 0, 0, 0, 0}, {0, 1})}},
    };
    const auto r = rm.score_batch(batch);
    ASSERT_EQ(r.size(), 2u);
    const double fid = fidelity_score(std::vector<Vector>{{1, 0}, {0.5, 0.5}, {0, 1}});
    EXPECT_EQ(r[0].fidelity, fid);
    EXPECT_EQ(r[1].fidelity, fid);
    const double aes0 = (head.forward(normalized(Vector(8, 1.0))) + head.forward({1, 0, 0, 0, 0, 0, 0, 0})) / 2;
    EXPECT_NEAR(r[0].aesthetics, aes0, 1e-12);
    for (const auto& b : r) EXPECT_EQ(b.total, 5 * b.aesthetics + b.alignment + b.fidelity);
}
