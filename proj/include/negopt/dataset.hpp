#pragma once

#include "negopt/common.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

namespace negopt::dataset {

/// One exported Negative Prompts DB row.
struct PromptRecord {
    std::string id;
    std::string created_at; // ISO-8601 UTC, validated on load
    std::string model;
    std::string sampler;
    std::int64_t likes = 0;
    std::int64_t height = 0;
    std::int64_t steps = 1;
    std::int64_t width = 0;
    std::string cursor;
    std::string url;
    double cfg_scale = 7.0;
    std::string prompt;
    std::string negative_prompt;

    bool operator==(const PromptRecord&) const = default;
};

using Records = std::vector<PromptRecord>;

struct SplitRatios {
    std::array<double, 3> values{0.9, 0.05, 0.05};

    double train() const { return values[0]; }
    double validation() const { return values[1]; }
    double test() const { return values[2]; }
};

struct SplitBundle {
    Records train;
    Records validation;
    Records test;
    std::uint64_t seed = 0;
    SplitRatios ratios;

    bool operator==(const SplitBundle& o) const {
        return train == o.train && validation == o.validation && test == o.test && seed == o.seed &&
               ratios.values == o.ratios.values;
    }
};

/// (prefixed prompt, negative prompt) training example.
struct PromptPair {
    std::string source;
    std::string target;
    std::string origin_id;

    bool operator==(const PromptPair&) const = default;
};

inline constexpr std::string_view kDefaultPrefix = "generate a negative prompt for:";

namespace detail {

inline const std::set<std::string>& known_fields() {
    static const std::set<std::string> fields{"id",     "created_at", "model",     "sampler",
                                              "likes",  "height",     "steps",     "width",
                                              "cursor", "url",        "cfg_scale", "prompt",
                                              "negative_prompt"};
    return fields;
}

// YYYY-MM-DDTHH:MM:SS[.fraction](Z|+00:00)
inline bool is_utc_timestamp(std::string_view s) {
    auto digits = [&](std::size_t pos, std::size_t n) {
        if (pos + n > s.size()) return false;
        for (std::size_t i = 0; i < n; ++i)
            if (!std::isdigit(static_cast<unsigned char>(s[pos + i]))) return false;
        return true;
    };
    if (!(digits(0, 4) && s.size() > 19 && s[4] == '-' && digits(5, 2) && s[7] == '-' && digits(8, 2) &&
          (s[10] == 'T' || s[10] == ' ') && digits(11, 2) && s[13] == ':' && digits(14, 2) && s[16] == ':' &&
          digits(17, 2)))
        return false;
    std::size_t pos = 19;
    if (pos < s.size() && s[pos] == '.') {
        ++pos;
        const std::size_t start = pos;
        while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
        if (pos == start) return false;
    }
    const auto tail = s.substr(pos);
    return tail == "Z" || tail == "+00:00";
}

inline std::string fold_model_name(std::string_view s) {
    std::string out = to_lower(s);
    for (auto& c : out)
        if (c == '-' || c == '_') c = ' ';
    return out;
}

} // namespace detail

/// Parses one serialized record. Throws DataError with `line_no` in the message.
inline PromptRecord parse_record(std::string_view line, std::size_t line_no) {
    const std::string where = "line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(where + "malformed record: " + e.what());
    }
    if (!j.is_object()) throw DataError(where + "malformed record: not an object");

    for (const auto& [key, _] : j.items())
        if (!detail::known_fields().contains(key)) log::warn(where + "ignoring unknown field '" + key + "'");

    auto require = [&](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) throw DataError(where + "schema violation: missing field '" + key + "'");
        return j.at(key);
    };
    auto str = [&](const char* key) {
        const auto& v = require(key);
        if (!v.is_string()) throw DataError(where + "schema violation: field '" + key + "' must be a string");
        return v.get<std::string>();
    };
    auto integer = [&](const char* key) {
        const auto& v = require(key);
        if (!v.is_number_integer())
            throw DataError(where + "schema violation: field '" + key + "' must be an integer");
        return v.get<std::int64_t>();
    };

    PromptRecord r;
    r.id = str("id");
    r.created_at = str("created_at");
    r.model = str("model");
    r.sampler = str("sampler");
    r.likes = integer("likes");
    r.height = integer("height");
    r.steps = integer("steps");
    r.width = integer("width");
    r.cursor = str("cursor");
    r.url = str("url");
    {
        const auto& v = require("cfg_scale");
        if (!v.is_number()) throw DataError(where + "schema violation: field 'cfg_scale' must be a number");
        r.cfg_scale = v.get<double>();
    }
    r.prompt = str("prompt");
    r.negative_prompt = str("negative_prompt");

    if (r.id.empty()) throw DataError(where + "schema violation: empty id");
    if (!detail::is_utc_timestamp(r.created_at))
        throw DataError(where + "schema violation: created_at is not a UTC timestamp: " + r.created_at);
    if (r.likes < 0) throw DataError(where + "schema violation: likes must be >= 0, got " + std::to_string(r.likes));
    if (r.steps < 1) throw DataError(where + "schema violation: steps must be >= 1");
    if (r.height <= 0 || r.width <= 0) throw DataError(where + "schema violation: height and width must be > 0");
    if (!(r.cfg_scale > 0.0) || !std::isfinite(r.cfg_scale))
        throw DataError(where + "schema violation: cfg_scale must be > 0");
    if (trim(r.prompt).empty()) throw DataError(where + "schema violation: prompt is empty");
    return r;
}

inline nlohmann::ordered_json to_json(const PromptRecord& r) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["created_at"] = r.created_at;
    j["model"] = r.model;
    j["sampler"] = r.sampler;
    j["likes"] = r.likes;
    j["height"] = r.height;
    j["steps"] = r.steps;
    j["width"] = r.width;
    j["cursor"] = r.cursor;
    j["url"] = r.url;
    j["cfg_scale"] = r.cfg_scale;
    j["prompt"] = r.prompt;
    j["negative_prompt"] = r.negative_prompt;
    return j;
}

inline std::string serialize_records(const Records& records) {
    std::string out;
    for (const auto& r : records) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

/// Parses line-delimited records from a string. Blank lines are skipped.
inline Records parse_records(std::string_view content) {
    Records out;
    std::size_t line_no = 0, start = 0;
    while (start < content.size()) {
        auto end = content.find('\n', start);
        if (end == std::string_view::npos) end = content.size();
        ++line_no;
        auto line = content.substr(start, end - start);
        if (!trim(line).empty()) out.push_back(parse_record(line, line_no));
        start = end + 1;
    }
    return out;
}

inline Records load_records(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DataError("no such file: " + path.string());
    auto records = parse_records(read_file(path));
    log::info("loaded " + std::to_string(records.size()) + " records from " + path.string());
    return records;
}

inline void write_records(const std::filesystem::path& path, const Records& records) {
    write_file_atomic(path, serialize_records(records));
}

/// Keeps records with likes >= min_likes, an optional model-name match and,
/// when flagged, a non-blank negative prompt. Order is preserved.
///
/// Model names match case-insensitively as substrings, with '-' and '_'
/// treated as spaces ("stable diffusion" matches "Stable-Diffusion-1.5").
inline Records filter_subset(const Records& records, std::int64_t min_likes,
                             const std::optional<std::string>& model_name, bool require_nonempty_negative) {
    if (min_likes < 0) throw ConfigError("min_likes must be >= 0");
    const auto needle = model_name ? std::optional(detail::fold_model_name(*model_name)) : std::nullopt;
    Records out;
    for (const auto& r : records) {
        if (r.likes < min_likes) continue;
        if (needle && detail::fold_model_name(r.model).find(*needle) == std::string::npos) continue;
        if (require_nonempty_negative && trim(r.negative_prompt).empty()) continue;
        out.push_back(r);
    }
    return out;
}

/// Collapses exact (prompt, negative_prompt) duplicates onto the earliest record.
inline Records deduplicate(const Records& records) {
    std::set<std::pair<std::string, std::string>> seen;
    Records out;
    for (const auto& r : records)
        if (seen.emplace(r.prompt, r.negative_prompt).second) out.push_back(r);
    return out;
}

inline SplitRatios make_ratios(double train, double validation, double test) {
    SplitRatios r{{train, validation, test}};
    for (double v : r.values)
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("split ratios must be non-negative");
    if (std::abs(train + validation + test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
    return r;
}

/// Parses "90:5:5" (or "0.9:0.05:0.05"); values are normalized by their sum.
inline SplitRatios parse_ratios(std::string_view text) {
    auto parts = split(text, ':');
    if (parts.size() != 3) throw ConfigError("ratios must have three ':'-separated parts: " + std::string(text));
    std::array<double, 3> v{};
    double sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        try {
            std::size_t used = 0;
            v[i] = std::stod(parts[i], &used);
            if (used != parts[i].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ConfigError("invalid ratio component: '" + parts[i] + "'");
        }
        if (!(v[i] >= 0.0)) throw ConfigError("ratios must be non-negative");
        sum += v[i];
    }
    if (!(sum > 0.0)) throw ConfigError("ratios must not all be zero");
    return make_ratios(v[0] / sum, v[1] / sum, v[2] / sum);
}

/// Partition sizes for N records: each non-zero partition except the last
/// non-zero one gets floor(ratio * N); the last non-zero one takes the remainder.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios) {
    std::size_t last_nonzero = 0, nonzero = 0;
    for (std::size_t i = 0; i < 3; ++i)
        if (ratios.values[i] > 0.0) {
            last_nonzero = i;
            ++nonzero;
        }
    if (nonzero == 0) throw ConfigError("split ratios must not all be zero");
    if (n < nonzero)
        throw DataError("cannot split " + std::to_string(n) + " records into " + std::to_string(nonzero) +
                        " non-empty partitions");
    std::array<std::size_t, 3> sizes{0, 0, 0};
    std::size_t used = 0;
    for (std::size_t i = 0; i < last_nonzero; ++i) {
        if (ratios.values[i] <= 0.0) continue;
        // The epsilon absorbs representation error such as 0.9 * 5790 = 5210.999...
        sizes[i] = static_cast<std::size_t>(std::floor(ratios.values[i] * static_cast<double>(n) + 1e-9));
        used += sizes[i];
    }
    sizes[last_nonzero] = n - used;
    return sizes;
}

/// Seeded shuffle followed by partitioning per split_sizes().
inline SplitBundle split_records(const Records& records, const SplitRatios& ratios, std::uint64_t seed) {
    make_ratios(ratios.train(), ratios.validation(), ratios.test());
    const auto sizes = split_sizes(records.size(), ratios);

    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    SplitBundle bundle;
    bundle.seed = seed;
    bundle.ratios = ratios;
    std::size_t k = 0;
    for (std::size_t i = 0; i < sizes[0]; ++i) bundle.train.push_back(records[order[k++]]);
    for (std::size_t i = 0; i < sizes[1]; ++i) bundle.validation.push_back(records[order[k++]]);
    for (std::size_t i = 0; i < sizes[2]; ++i) bundle.test.push_back(records[order[k++]]);
    return bundle;
}

inline std::string make_source(std::string_view prefix, std::string_view prompt) {
    return std::string(prefix) + " " + std::string(prompt);
}

inline std::vector<PromptPair> build_pairs(const Records& records, std::string_view prefix = kDefaultPrefix) {
    std::vector<PromptPair> pairs;
    pairs.reserve(records.size());
    for (const auto& r : records) {
        if (trim(r.negative_prompt).empty())
            throw DataError("record '" + r.id + "' has an empty negative prompt (was the subset filter skipped?)");
        pairs.push_back({make_source(prefix, r.prompt), r.negative_prompt, r.id});
    }
    return pairs;
}

} // namespace negopt::dataset
