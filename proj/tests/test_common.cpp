#include "negopt/common.hpp"
#include "negopt/optim.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace negopt;

TEST(Strings, TrimAndSplit) {
    EXPECT_EQ(trim("  a b \t\n"), "a b");
    EXPECT_EQ(trim("   "), "");
    EXPECT_EQ(to_lower("BlUrRy"), "blurry");
    EXPECT_EQ(split("90:5:5", ':'), (std::vector<std::string>{"90", "5", "5"}));
    EXPECT_EQ(split("a::b", ':'), (std::vector<std::string>{"a", "", "b"}));
}

TEST(Hashing, Sha256KnownVectors) {
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Hashing, Fnv1aKnownVector) {
    EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Files, AtomicWriteRoundTrip) {
    fixture::TempDir dir;
    write_file_atomic(dir / "x", "hello\n");
    write_file_atomic(dir / "x", "bye\n");
    EXPECT_EQ(read_file(dir / "x"), "bye\n");
    EXPECT_THROW(read_file(dir / "missing"), Error);
}

TEST(Rng, SeededStreamsRepeat) {
    Rng a(7), b(7), c(8);
    std::vector<double> xa, xb, xc;
    for (int i = 0; i < 100; ++i) {
        xa.push_back(a.uniform());
        xb.push_back(b.uniform());
        xc.push_back(c.uniform());
    }
    EXPECT_EQ(xa, xb);
    EXPECT_NE(xa, xc);
    for (double x : xa) {
        EXPECT_GE(x, 0.0);
        EXPECT_LT(x, 1.0);
    }
}

TEST(Rng, NormalMoments) {
    Rng r(3);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsPermutation) {
    Rng r(11);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[i] = i;
    auto w = v;
    r.shuffle(w);
    EXPECT_NE(v, w);
    std::sort(w.begin(), w.end());
    EXPECT_EQ(v, w);
}

TEST(Vectors, DotShapeMismatchThrows) {
    EXPECT_THROW(dot({1, 2}, {1}), ShapeError);
    EXPECT_DOUBLE_EQ(norm(normalized({3, 4})), 1.0);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    // With bias correction the first Adam step is lr * sign(g) (up to eps).
    AdamW opt(3, {.weight_decay = 0.0});
    Vector p{1.0, -2.0, 0.5}, g{0.3, -4.0, 0.0};
    opt.step(p, g, 0.1);
    EXPECT_NEAR(p[0], 0.9, 1e-6);
    EXPECT_NEAR(p[1], -1.9, 1e-6);
    EXPECT_DOUBLE_EQ(p[2], 0.5);
    EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, DecoupledDecayShrinksWithZeroGradient) {
    AdamW opt(1, {.weight_decay = 0.1});
    Vector p{2.0}, g{0.0};
    opt.step(p, g, 0.5);
    EXPECT_NEAR(p[0], 2.0 * (1 - 0.5 * 0.1), 1e-12);
}

TEST(AdamW, WarmupSchedule) {
    EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 4, 1), 0.25e-3);
    EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 4, 3), 0.75e-3);
    EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 4, 4), 1e-3);
    EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 4, 100), 1e-3);
    EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 0, 0), 1e-3);
}
