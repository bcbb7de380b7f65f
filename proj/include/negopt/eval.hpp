#pragma once

#include "negopt/common.hpp"
#include "negopt/dataset.hpp"
#include "negopt/imagegen.hpp"
#include "negopt/policy.hpp"
#include "negopt/reward.hpp"

#include <json.hpp>

#include <map>
#include <memory>
#include <optional>
#include <set>

namespace negopt::eval {

enum class Variant { None, GroundTruth, Promptist, RlOnly, SftOnly, SftRl };

inline constexpr std::array kAllVariants{Variant::None,   Variant::GroundTruth, Variant::Promptist,
                                         Variant::RlOnly, Variant::SftOnly,     Variant::SftRl};

/// Name used in reports and rank sheets.
inline std::string display_name(Variant v) {
    switch (v) {
    case Variant::None: return "None";
    case Variant::GroundTruth: return "GroundTruth";
    case Variant::Promptist: return "Promptist";
    case Variant::RlOnly: return "RL-only";
    case Variant::SftOnly: return "SFT-only";
    case Variant::SftRl: return "SFT+RL";
    }
    return "?";
}

/// Name used on the command line.
inline std::string cli_name(Variant v) {
    switch (v) {
    case Variant::None: return "none";
    case Variant::GroundTruth: return "ground-truth";
    case Variant::Promptist: return "promptist";
    case Variant::RlOnly: return "rl-only";
    case Variant::SftOnly: return "sft";
    case Variant::SftRl: return "sft-rl";
    }
    return "?";
}

inline std::optional<Variant> parse_variant(std::string_view name) {
    const std::string n = to_lower(name);
    for (Variant v : kAllVariants)
        if (n == cli_name(v) || n == to_lower(display_name(v))) return v;
    if (n == "sft-only") return Variant::SftOnly;
    if (n == "rl") return Variant::RlOnly;
    if (n == "sft+rl") return Variant::SftRl;
    return std::nullopt;
}

enum class NegativeSource { Absent, DatasetField, ExternalFile, Checkpoint };
enum class NormalSource { DatasetField, ExternalFile };

/// How a variant obtains its (normal prompt, negative prompt) per test record.
struct VariantSpec {
    Variant variant = Variant::None;
    NegativeSource negative = NegativeSource::Absent;
    NormalSource normal = NormalSource::DatasetField;
    std::map<std::string, std::string> external_negatives; // by record id
    std::map<std::string, std::string> external_prompts;   // by record id
    std::shared_ptr<const policy::PolicyModel> policy;

    std::string name() const { return display_name(variant); }

    static VariantSpec none() { return VariantSpec{}; }

    static VariantSpec ground_truth() {
        VariantSpec s;
        s.variant = Variant::GroundTruth;
        s.negative = NegativeSource::DatasetField;
        return s;
    }

    /// Augmented normal prompts, no negative prompt.
    static VariantSpec promptist(std::map<std::string, std::string> augmented) {
        VariantSpec s;
        s.variant = Variant::Promptist;
        s.normal = NormalSource::ExternalFile;
        s.external_prompts = std::move(augmented);
        return s;
    }

    static VariantSpec from_policy(Variant v, std::shared_ptr<const policy::PolicyModel> model) {
        if (v != Variant::RlOnly && v != Variant::SftOnly && v != Variant::SftRl)
            throw ConfigError(display_name(v) + " does not take a policy checkpoint");
        if (!model) throw DataError("missing policy checkpoint for " + display_name(v));
        VariantSpec s;
        s.variant = v;
        s.negative = NegativeSource::Checkpoint;
        s.policy = std::move(model);
        return s;
    }

    std::string normal_prompt(const dataset::PromptRecord& r) const {
        if (normal == NormalSource::DatasetField) return r.prompt;
        auto it = external_prompts.find(r.id);
        if (it == external_prompts.end())
            throw DataError(name() + ": no external prompt for record '" + r.id + "'");
        return it->second;
    }

    std::optional<std::string> negative_prompt(const dataset::PromptRecord& r) const {
        switch (negative) {
        case NegativeSource::Absent: return std::nullopt;
        case NegativeSource::DatasetField: return r.negative_prompt;
        case NegativeSource::ExternalFile: {
            auto it = external_negatives.find(r.id);
            if (it == external_negatives.end())
                throw DataError(name() + ": no external negative prompt for record '" + r.id + "'");
            return it->second;
        }
        case NegativeSource::Checkpoint:
            if (!policy) throw DataError(name() + ": policy checkpoint not loaded");
            return policy::generate_negative_prompt(*policy, r.prompt, policy->prefix, {0.0, 0, policy->max_target_tokens});
        }
        return std::nullopt;
    }
};

/// Loads `{id, prompt}` (or `{id, negative_prompt}`) lines into an id -> text map.
inline std::map<std::string, std::string> load_text_map(const std::filesystem::path& path, const std::string& field) {
    std::map<std::string, std::string> out;
    std::size_t line_no = 0;
    for (const auto& line : split(read_file(path), '\n')) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out[j.at("id").get<std::string>()] = j.at(field).get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

struct MetricsRow {
    std::string variant;
    double inception = 1.0;
    double clip_score = 0.0;
    double aesthetics = 0.0;
    std::optional<double> mean_human_rank;

    bool operator==(const MetricsRow&) const = default;
};

struct EvalOptions {
    /// CLIP Score = clip_scale * max(cos, 0).
    double clip_scale = 100.0;
    /// 0 = pooled Inception Score; k > 0 = mean over k splits.
    std::size_t inception_splits = 0;
};

inline double clip_score(double cosine, double scale = 100.0) { return scale * std::max(cosine, 0.0); }

/// Generates every (record, seed) image for one variant and scores the pool.
/// Aesthetics and CLIP Score are grand means over all images; CLIP is taken
/// against the record's original prompt.
inline MetricsRow evaluate_variant(const VariantSpec& variant, const dataset::Records& test,
                                   const imagegen::ImageGenerator& generator, const reward::EmbeddingProvider& embedder,
                                   const reward::AestheticsHead& head, const imagegen::GenerationConfig& config,
                                   const EvalOptions& options = {}) {
    config.validate();
    if (test.empty()) throw DataError("evaluate_variant: empty test set");
    double aes = 0.0, clip = 0.0;
    std::vector<Vector> probs;
    for (const auto& r : test) {
        const auto normal = variant.normal_prompt(r);
        const auto negative = variant.negative_prompt(r);
        const Vector text = embedder.embed_text(r.prompt);
        for (const auto& img : generator.generate(normal, negative, config)) {
            const Vector e = embedder.embed_image(img);
            aes += reward::aesthetics_score(e, head);
            clip += clip_score(reward::alignment_score(text, e), options.clip_scale);
            probs.push_back(img.class_probs);
        }
    }
    const double n = static_cast<double>(probs.size());
    MetricsRow row;
    row.variant = variant.name();
    row.aesthetics = aes / n;
    row.clip_score = clip / n;
    row.inception = options.inception_splits == 0 ? reward::fidelity_score(probs)
                                                  : reward::fidelity_score_splits(probs, options.inception_splits).first;
    return row;
}

// ---------------------------------------------------------------------------
// Human ranks

/// One evaluator's ranking for one test prompt, best first. Variants sharing
/// a tier are tied.
struct RankSheet {
    std::string evaluator;
    std::string prompt_id;
    std::vector<std::vector<std::string>> tiers;

    /// Ranks with ties sharing the mean of the positions they span.
    std::map<std::string, double> ranks() const {
        std::map<std::string, double> out;
        std::size_t pos = 1;
        for (const auto& tier : tiers) {
            const double avg = static_cast<double>(pos) + (static_cast<double>(tier.size()) - 1.0) / 2.0;
            for (const auto& v : tier)
                if (!out.emplace(v, avg).second) throw DataError("variant '" + v + "' ranked twice in one sheet");
            pos += tier.size();
        }
        return out;
    }
};

/// Parses one rank-sheet line. Accepts an ordered list (nested lists are ties)
/// under "ranking", or a variant -> rank mapping under "ranks" where equal
/// ranks are ties.
inline RankSheet parse_rank_sheet(const nlohmann::json& j) {
    RankSheet s;
    s.evaluator = j.at("evaluator").is_string() ? j.at("evaluator").get<std::string>() : j.at("evaluator").dump();
    s.prompt_id = j.at("prompt_id").is_string() ? j.at("prompt_id").get<std::string>() : j.at("prompt_id").dump();
    if (j.contains("ranking")) {
        for (const auto& e : j.at("ranking")) {
            if (e.is_array()) s.tiers.push_back(e.get<std::vector<std::string>>());
            else s.tiers.push_back({e.get<std::string>()});
        }
    } else if (j.contains("ranks")) {
        std::map<double, std::vector<std::string>> by_rank;
        for (const auto& [v, r] : j.at("ranks").items()) by_rank[r.get<double>()].push_back(v);
        for (auto& [_, names] : by_rank) s.tiers.push_back(std::move(names));
    } else {
        throw DataError("rank sheet needs 'ranking' or 'ranks'");
    }
    return s;
}

inline std::vector<RankSheet> load_rank_sheets(const std::filesystem::path& path) {
    std::vector<RankSheet> out;
    std::size_t line_no = 0;
    for (const auto& line : split(read_file(path), '\n')) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            out.push_back(parse_rank_sheet(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

/// Arithmetic mean rank per variant over every sheet.
inline std::map<std::string, double> mean_human_rank(const std::vector<RankSheet>& sheets) {
    std::map<std::string, double> sums;
    std::set<std::string> expected;
    for (std::size_t i = 0; i < sheets.size(); ++i) {
        const auto r = sheets[i].ranks();
        std::set<std::string> names;
        for (const auto& [v, _] : r) names.insert(v);
        if (i == 0) expected = names;
        else if (names != expected)
            throw DataError("rank sheet " + std::to_string(i + 1) + " (evaluator " + sheets[i].evaluator +
                            ") covers a different variant set");
        for (const auto& [v, rank] : r) sums[v] += rank;
    }
    for (auto& [_, s] : sums) s /= static_cast<double>(sheets.size());
    return sums;
}

// ---------------------------------------------------------------------------
// Report

enum class Mark { None, Best, Second };

enum class Column { Inception, Clip, Aesthetics, HumanRank };

inline constexpr std::array kColumns{Column::Inception, Column::Clip, Column::Aesthetics, Column::HumanRank};

inline bool higher_is_better(Column c) { return c != Column::HumanRank; }

inline std::optional<double> column_value(const MetricsRow& r, Column c) {
    switch (c) {
    case Column::Inception: return r.inception;
    case Column::Clip: return r.clip_score;
    case Column::Aesthetics: return r.aesthetics;
    case Column::HumanRank: return r.mean_human_rank;
    }
    return std::nullopt;
}

/// Best and second-best distinct values per column, respecting direction. Tied
/// rows share a mark, so marking does not depend on row order.
inline std::vector<Mark> column_marks(const std::vector<MetricsRow>& rows, Column c) {
    std::set<double> values;
    for (const auto& r : rows)
        if (auto v = column_value(r, c)) values.insert(*v);
    std::vector<double> ordered(values.begin(), values.end());
    if (higher_is_better(c)) std::reverse(ordered.begin(), ordered.end());
    std::vector<Mark> marks(rows.size(), Mark::None);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto v = column_value(rows[i], c);
        if (!v) continue;
        if (!ordered.empty() && *v == ordered[0]) marks[i] = Mark::Best;
        else if (ordered.size() > 1 && *v == ordered[1]) marks[i] = Mark::Second;
    }
    return marks;
}

struct Report {
    std::string csv;
    std::string markdown;
};

inline Report build_report(const std::vector<MetricsRow>& rows) {
    if (rows.empty()) throw DataError("build_report: no rows");
    std::set<std::string> names;
    for (const auto& r : rows)
        if (!names.insert(r.variant).second) throw DataError("build_report: duplicate variant '" + r.variant + "'");

    auto fmt = [](double v, int digits) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.*f", digits, v);
        return std::string(buf);
    };

    Report rep;
    rep.csv = "variant,inception,clip_score,aesthetics,mean_human_rank\n";
    for (const auto& r : rows) {
        rep.csv += r.variant + ',' + fmt(r.inception, 6) + ',' + fmt(r.clip_score, 6) + ',' + fmt(r.aesthetics, 6) + ',' +
                   (r.mean_human_rank ? fmt(*r.mean_human_rank, 6) : std::string()) + '\n';
    }

    std::vector<std::vector<Mark>> marks;
    for (Column c : kColumns) marks.push_back(column_marks(rows, c));
    rep.markdown = "| Variant | Inception Score (↑) | CLIP Score (↑) | Aesthetics Score (↑) | Mean Human Rank (↓) |\n"
                   "|---|---:|---:|---:|---:|\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rep.markdown += "| " + rows[i].variant + " |";
        for (std::size_t c = 0; c < kColumns.size(); ++c) {
            const auto v = column_value(rows[i], kColumns[c]);
            std::string cell = v ? fmt(*v, 2) : "-";
            if (marks[c][i] == Mark::Best) cell = "**" + cell + "**";
            else if (marks[c][i] == Mark::Second) cell = "<u>" + cell + "</u>";
            rep.markdown += " " + cell + " |";
        }
        rep.markdown += '\n';
    }
    rep.markdown += "\nBest per column in **bold**, second best <u>underlined</u>; ↑/↓ = higher/lower is better.\n";
    return rep;
}

} // namespace negopt::eval
