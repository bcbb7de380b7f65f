#include "negopt/dataset.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace negopt;
using namespace negopt::dataset;
using negopt::fixture::record;

namespace {

std::set<std::string> ids(const Records& rs) {
    std::set<std::string> out;
    for (const auto& r : rs) out.insert(r.id);
    return out;
}

Records numbered(std::size_t n) {
    Records rs;
    for (std::size_t i = 0; i < n; ++i) rs.push_back(record("r" + std::to_string(i), 0, "p" + std::to_string(i), "n"));
    return rs;
}

// Integer oracle for percentage ratios: floor(pct * n / 100) for all but the
// last non-zero partition.
std::array<std::size_t, 3> integer_sizes(std::size_t n, std::array<std::size_t, 3> pct) {
    std::size_t last = 0;
    for (std::size_t i = 0; i < 3; ++i)
        if (pct[i]) last = i;
    std::array<std::size_t, 3> s{0, 0, 0};
    std::size_t used = 0;
    for (std::size_t i = 0; i < last; ++i) {
        s[i] = pct[i] * n / 100;
        used += s[i];
    }
    s[last] = n - used;
    return s;
}

} // namespace

TEST(LoadRecords, ThreeValidLines) {
    fixture::TempDir dir;
    const Records rs{record("1", 5, "a", "x"), record("2", 20, "b", ""), record("3", 100, "c", "z")};
    write_records(dir / "in.jsonl", rs);
    EXPECT_EQ(load_records(dir / "in.jsonl"), rs);
}

TEST(LoadRecords, EmptyFileGivesEmptyCollection) {
    fixture::TempDir dir;
    write_file_atomic(dir / "empty.jsonl", "");
    EXPECT_TRUE(load_records(dir / "empty.jsonl").empty());
}

TEST(LoadRecords, MissingFileIsAnError) {
    EXPECT_THROW(load_records("/nonexistent/records.jsonl"), DataError);
}

TEST(LoadRecords, NegativeLikesNamesTheLine) {
    auto good = serialize_records({record("1", 5, "a", "x")});
    auto bad = to_json(record("2", 5, "b", "y"));
    bad["likes"] = -1;
    try {
        parse_records(good + bad.dump() + "\n");
        FAIL() << "expected a schema violation";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("schema violation"), std::string::npos) << e.what();
    }
}

TEST(LoadRecords, MalformedLineNamesTheLine) {
    try {
        parse_records(serialize_records({record("1", 5, "a", "x")}) + "{not json\n");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2: malformed"), std::string::npos) << e.what();
    }
}

TEST(LoadRecords, SchemaViolations) {
    auto base = to_json(record("1", 5, "a", "x"));
    auto expect_violation = [&](auto mutate) {
        auto j = base;
        mutate(j);
        EXPECT_THROW(parse_record(j.dump(), 1), DataError) << j.dump();
    };
    expect_violation([](auto& j) { j.erase("prompt"); });
    expect_violation([](auto& j) { j["prompt"] = "   "; });
    expect_violation([](auto& j) { j["steps"] = 0; });
    expect_violation([](auto& j) { j["cfg_scale"] = 0.0; });
    expect_violation([](auto& j) { j["width"] = 0; });
    expect_violation([](auto& j) { j["likes"] = "12"; });
    expect_violation([](auto& j) { j["created_at"] = "yesterday"; });
    expect_violation([](auto& j) { j["created_at"] = "2023-01-15T10:30:00+02:00"; });
}

TEST(LoadRecords, AcceptsFractionalUtcTimestamps) {
    auto j = to_json(record("1", 5, "a", "x"));
    j["created_at"] = "2023-01-15T10:30:00.123456+00:00";
    EXPECT_NO_THROW(parse_record(j.dump(), 1));
}

TEST(FilterSubset, LikesThreshold) {
    const Records rs{record("1", 5, "a", "x"), record("2", 20, "b", "y"), record("3", 100, "c", "z")};
    EXPECT_EQ(ids(filter_subset(rs, 20, std::nullopt, false)), (std::set<std::string>{"2", "3"}));
    EXPECT_EQ(ids(filter_subset(rs, 100, std::nullopt, false)), (std::set<std::string>{"3"}));
    EXPECT_TRUE(filter_subset({}, 20, std::nullopt, false).empty());
    EXPECT_THROW(filter_subset(rs, -1, std::nullopt, false), ConfigError);
}

TEST(FilterSubset, ModelNameAndEmptyNegatives) {
    const Records rs{record("1", 50, "a", "x", "Stable-Diffusion-1.5"), record("2", 50, "b", "y", "Midjourney v5"),
                     record("3", 50, "c", "  ", "stable_diffusion")};
    EXPECT_EQ(ids(filter_subset(rs, 0, std::string("stable diffusion"), false)), (std::set<std::string>{"1", "3"}));
    EXPECT_EQ(ids(filter_subset(rs, 0, std::string("Stable Diffusion"), true)), (std::set<std::string>{"1"}));
}

TEST(FilterSubset, MonotoneIdempotentOrderPreservingProperty) {
    Rng rng(42);
    for (int trial = 0; trial < 100; ++trial) {
        Records rs;
        const auto n = rng.below(40);
        for (std::size_t i = 0; i < n; ++i)
            rs.push_back(record(std::to_string(i), static_cast<std::int64_t>(rng.below(200)), "p",
                                rng.below(3) ? "neg" : ""));
        const auto a = static_cast<std::int64_t>(rng.below(200)), b = a + static_cast<std::int64_t>(rng.below(50));
        const bool flag = rng.below(2);
        const auto fa = filter_subset(rs, a, std::nullopt, flag), fb = filter_subset(rs, b, std::nullopt, flag);
        for (const auto& id : ids(fb)) EXPECT_TRUE(ids(fa).contains(id));
        EXPECT_EQ(filter_subset(fa, a, std::nullopt, flag), fa);
        EXPECT_LE(fa.size(), rs.size());
        // Order preserved: ids are increasing integers in input order.
        for (std::size_t i = 1; i < fa.size(); ++i) EXPECT_LT(std::stoi(fa[i - 1].id), std::stoi(fa[i].id));
    }
}

TEST(Deduplicate, Cases) {
    const Records dup{record("1", 0, "a", "x"), record("2", 0, "a", "x")};
    EXPECT_EQ(ids(deduplicate(dup)), (std::set<std::string>{"1"}));
    const Records distinct{record("1", 0, "a", "x"), record("2", 0, "a", "y"), record("3", 0, "b", "x")};
    EXPECT_EQ(deduplicate(distinct), distinct);
    const Records five{record("1", 0, "a", "x"), record("2", 0, "b", "y"), record("3", 0, "a", "x"),
                       record("4", 0, "c", "z"), record("5", 0, "b", "y")};
    const auto out = deduplicate(five);
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[0].id, "1");
    EXPECT_EQ(out[1].id, "2");
    EXPECT_EQ(out[2].id, "4");
}

TEST(Split, WorkedExamples) {
    EXPECT_EQ(split_sizes(100, parse_ratios("90:5:5")), (std::array<std::size_t, 3>{90, 5, 5}));
    EXPECT_EQ(split_sizes(5790, parse_ratios("90:5:5")), (std::array<std::size_t, 3>{5211, 289, 290}));
    EXPECT_EQ(split_sizes(466, parse_ratios("90:10:0")), (std::array<std::size_t, 3>{419, 47, 0}));
}

TEST(Split, SizesMatchIntegerOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 300; ++trial) {
        std::array<std::size_t, 3> pct{};
        pct[0] = 1 + rng.below(99);
        pct[1] = rng.below(101 - pct[0]);
        pct[2] = 100 - pct[0] - pct[1];
        const std::size_t n = 3 + rng.below(7000);
        const auto ratios = parse_ratios(std::to_string(pct[0]) + ":" + std::to_string(pct[1]) + ":" +
                                         std::to_string(pct[2]));
        EXPECT_EQ(split_sizes(n, ratios), integer_sizes(n, pct)) << n << " " << pct[0] << ":" << pct[1];
    }
}

TEST(Split, PartitionAndDeterminism) {
    const auto rs = numbered(57);
    const auto ratios = parse_ratios("80:10:10");
    const auto a = split_records(rs, ratios, 9), b = split_records(rs, ratios, 9), c = split_records(rs, ratios, 10);
    EXPECT_EQ(a, b);
    EXPECT_NE(a.train, c.train);
    std::set<std::string> all;
    for (const auto* part : {&a.train, &a.validation, &a.test})
        for (const auto& r : *part) EXPECT_TRUE(all.insert(r.id).second) << "duplicate " << r.id;
    EXPECT_EQ(all, ids(rs));
}

TEST(Split, TooFewRecordsIsAnError) {
    EXPECT_THROW(split_records(numbered(2), parse_ratios("90:5:5"), 0), DataError);
    EXPECT_NO_THROW(split_records(numbered(2), parse_ratios("90:10:0"), 0));
}

TEST(Split, RatioValidation) {
    EXPECT_THROW(parse_ratios("90:5"), ConfigError);
    EXPECT_THROW(parse_ratios("90:-5:15"), ConfigError);
    EXPECT_THROW(parse_ratios("a:b:c"), ConfigError);
    EXPECT_THROW(parse_ratios("0:0:0"), ConfigError);
    EXPECT_THROW(make_ratios(0.5, 0.2, 0.2), ConfigError);
    EXPECT_NO_THROW(parse_ratios("0.9:0.05:0.05"));
}

TEST(BuildPairs, PrefixAndTarget) {
    const auto pairs = build_pairs({record("w", 1, "a wolf", "cartoon")});
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_EQ(pairs[0].source, "generate a negative prompt for: a wolf");
    EXPECT_EQ(pairs[0].target, "cartoon");
    EXPECT_EQ(pairs[0].origin_id, "w");
    EXPECT_TRUE(build_pairs({}).empty());
}

TEST(BuildPairs, EmptyNegativeNamesRecord) {
    try {
        build_pairs({record("r17", 1, "x", " ")});
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("r17"), std::string::npos);
    }
}
