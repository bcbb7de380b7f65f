#pragma once

#include "negopt/common.hpp"
#include "negopt/dataset.hpp"
#include "negopt/eval.hpp"
#include "negopt/imagegen.hpp"
#include "negopt/manifest.hpp"
#include "negopt/policy.hpp"
#include "negopt/reward.hpp"
#include "negopt/rl.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <memory>
#include <optional>

namespace negopt::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Options shared by the commands that generate and score images

struct ScoringOptions {
    std::string generator = "mock";
    std::size_t embed_dim = 64;
    std::size_t num_classes = 10;
    bool rigged = false;
    std::vector<std::string> trigger_tokens{"blurry"};
    double bonus_strength = 1.0;
    std::string aesthetics_weights;
    std::uint64_t aesthetics_seed = 0;
    std::string diffusion_cmd;
    std::string diffusion_model = "stabilityai/stable-diffusion-2-base";
    std::string text_embed_cmd;
    std::string cache_dir;
};

inline void add_scoring_options(CLI::App& cmd, ScoringOptions& o) {
    cmd.add_option("--generator", o.generator, "Image generator backend")
        ->check(CLI::IsMember({"mock", "diffusion"}))
        ->capture_default_str();
    cmd.add_option("--embed-dim", o.embed_dim, "Joint embedding dimension")->capture_default_str();
    cmd.add_option("--num-classes", o.num_classes, "Mock classifier classes")->capture_default_str();
    cmd.add_flag("--rigged", o.rigged, "Mock: trigger tokens in the negative prompt raise the aesthetics score");
    cmd.add_option("--trigger-tokens", o.trigger_tokens, "Mock: trigger tokens")->delimiter(',')->capture_default_str();
    cmd.add_option("--bonus-strength", o.bonus_strength, "Mock: size of the trigger bonus")->capture_default_str();
    cmd.add_option("--aesthetics-weights", o.aesthetics_weights, "Aesthetics head weights (JSON); seeded stub if unset");
    cmd.add_option("--aesthetics-seed", o.aesthetics_seed, "Seed of the stub aesthetics head")->capture_default_str();
    cmd.add_option("--diffusion-cmd", o.diffusion_cmd, "Diffusion runtime command (default $NEGOPT_DIFFUSION_CMD)");
    cmd.add_option("--diffusion-model", o.diffusion_model, "Diffusion model identifier")->capture_default_str();
    cmd.add_option("--text-embed-cmd", o.text_embed_cmd, "Text encoder command (default $NEGOPT_TEXT_EMBED_CMD)");
    cmd.add_option("--cache-dir", o.cache_dir, "Artifact cache directory");
}

/// Generator, embedder and aesthetics head resolved from ScoringOptions.
struct ScoringStack {
    std::unique_ptr<reward::EmbeddingProvider> embedder;
    reward::AestheticsHead head;
    std::unique_ptr<imagegen::ImageGenerator> backend;
    std::unique_ptr<imagegen::CachingGenerator> cached;
    nlohmann::ordered_json description;

    const imagegen::ImageGenerator& generator() const {
        return cached ? static_cast<const imagegen::ImageGenerator&>(*cached) : *backend;
    }
};

inline ScoringStack make_scoring_stack(const ScoringOptions& o) {
    ScoringStack s;
    nlohmann::ordered_json head_desc;
    if (!o.aesthetics_weights.empty()) {
        s.head = reward::AestheticsHead::load(o.aesthetics_weights);
        head_desc = {{"source", o.aesthetics_weights}, {"sha256", sha256_file(o.aesthetics_weights)}};
    } else {
        s.head = reward::AestheticsHead::random(o.embed_dim, o.aesthetics_seed);
        head_desc = {{"source", "seeded-stub"}, {"seed", o.aesthetics_seed}};
    }
    if (s.head.input_dimension() != o.embed_dim)
        throw ConfigError("aesthetics head input dimension " + std::to_string(s.head.input_dimension()) +
                          " does not match --embed-dim " + std::to_string(o.embed_dim));

    if (o.generator == "mock") {
        imagegen::MockConfig mc;
        mc.embed_dim = o.embed_dim;
        mc.num_classes = o.num_classes;
        mc.rigged = o.rigged;
        mc.trigger_tokens = o.trigger_tokens;
        mc.bonus_strength = o.bonus_strength;
        if (o.rigged) mc.bonus_direction = s.head.input_gradient();
        s.backend = std::make_unique<imagegen::MockGenerator>(mc);
        s.embedder = std::make_unique<reward::HashEmbeddingProvider>(o.embed_dim, mc.text_key);
        s.description = {{"generator", "mock"}, {"mock", mc.to_json()}};
    } else {
        auto dc = imagegen::DiffusionConfig::from_environment();
        if (!o.diffusion_cmd.empty()) dc.command = o.diffusion_cmd;
        dc.model = o.diffusion_model;
        auto gen = std::make_unique<imagegen::DiffusionGenerator>(dc);
        if (!gen->available())
            throw imagegen::GeneratorError("diffusion runtime unavailable: set --diffusion-cmd or NEGOPT_DIFFUSION_CMD");
        std::string text_cmd = o.text_embed_cmd;
        if (text_cmd.empty())
            if (const char* env = std::getenv("NEGOPT_TEXT_EMBED_CMD")) text_cmd = env;
        if (text_cmd.empty())
            throw ConfigError("diffusion generator needs a text encoder: set --text-embed-cmd or NEGOPT_TEXT_EMBED_CMD");
        s.backend = std::move(gen);
        s.embedder = std::make_unique<reward::CommandEmbeddingProvider>(text_cmd, o.embed_dim);
        s.description = {{"generator", "diffusion"}, {"model", dc.model}, {"command", dc.command}};
    }
    if (!o.cache_dir.empty()) {
        s.cached = std::make_unique<imagegen::CachingGenerator>(*s.backend, imagegen::ArtifactCache(o.cache_dir));
        s.description["cache_dir"] = o.cache_dir;
    }
    s.description["aesthetics_head"] = head_desc;
    s.description["embed_dim"] = o.embed_dim;
    return s;
}

// ---------------------------------------------------------------------------
// Command option sets

struct CurateOptions {
    std::vector<std::string> inputs;
    std::string out;
    std::int64_t min_likes = 20;
    std::string model;
    std::string ratios = "90:5:5";
    std::uint64_t seed = 0;
    bool keep_duplicates = false;
};

struct ModelShapeOptions {
    std::size_t embed = 32;
    std::size_t hidden = 64;
    std::size_t max_source_tokens = 128;
    std::size_t max_target_tokens = 128;
    std::string prefix = std::string(dataset::kDefaultPrefix);
    std::vector<std::string> extra_vocab;
};

inline void add_model_shape_options(CLI::App& cmd, ModelShapeOptions& o) {
    cmd.add_option("--model-embed", o.embed, "Token embedding width of a fresh model")->capture_default_str();
    cmd.add_option("--model-hidden", o.hidden, "Hidden width of a fresh model")->capture_default_str();
    cmd.add_option("--max-source-tokens", o.max_source_tokens, "Source length limit")->capture_default_str();
    cmd.add_option("--max-target-tokens", o.max_target_tokens, "Target length limit")->capture_default_str();
    cmd.add_option("--prefix", o.prefix, "Instruction prefixed to every prompt")->capture_default_str();
    cmd.add_option("--extra-vocab", o.extra_vocab, "Words added to a fresh model's vocabulary")->delimiter(',');
}

inline policy::ModelOptions to_model_options(const ModelShapeOptions& o, std::vector<std::string> extra = {}) {
    extra.insert(extra.end(), o.extra_vocab.begin(), o.extra_vocab.end());
    return {o.embed, o.hidden, o.max_source_tokens, o.max_target_tokens, o.prefix, std::move(extra)};
}

struct SftOptions {
    std::string data;
    std::string out;
    policy::SftConfig config;
    ModelShapeOptions shape;
};

struct RlOptions {
    std::string sft_checkpoint;
    bool from_base = false;
    std::string data;
    std::string out;
    rl::RlConfig config;
    ModelShapeOptions shape;
    ScoringOptions scoring;
};

struct EvalOptions {
    std::string test;
    std::vector<std::string> variants;
    std::string out;
    std::string sft_checkpoint;
    std::string rl_checkpoint;
    std::string sft_rl_checkpoint;
    std::string promptist_file;
    std::string rank_sheets;
    imagegen::GenerationConfig generation;
    eval::EvalOptions metrics;
    ScoringOptions scoring;
};

// ---------------------------------------------------------------------------
// Commands

inline void run_curate(const CurateOptions& o, RunManifest& manifest) {
    const auto ratios = dataset::parse_ratios(o.ratios);
    dataset::Records records;
    for (const auto& in : o.inputs) {
        auto part = dataset::load_records(in);
        records.insert(records.end(), part.begin(), part.end());
        manifest.input(in);
    }
    const std::optional<std::string> model = o.model.empty() ? std::nullopt : std::optional(o.model);
    const auto with_empty = dataset::filter_subset(records, o.min_likes, model, false);
    const auto filtered = dataset::filter_subset(records, o.min_likes, model, true);
    const auto unique = o.keep_duplicates ? filtered : dataset::deduplicate(filtered);
    const auto bundle = dataset::split_records(unique, ratios, o.seed);

    const fs::path out(o.out);
    fs::create_directories(out);
    dataset::write_records(out / "train.jsonl", bundle.train);
    dataset::write_records(out / "validation.jsonl", bundle.validation);
    dataset::write_records(out / "test.jsonl", bundle.test);
    for (const char* f : {"train.jsonl", "validation.jsonl", "test.jsonl"}) manifest.output(out / f);

    manifest.config()["filter"] = {{"min_likes", o.min_likes},
                                   {"model", model ? nlohmann::ordered_json(*model) : nlohmann::ordered_json(nullptr)},
                                   {"require_nonempty_negative", true},
                                   {"deduplicate", !o.keep_duplicates}};
    manifest.config()["ratios"] = {ratios.train(), ratios.validation(), ratios.test()};
    manifest.seeds()["split"] = o.seed;
    manifest.extra("counts") = {{"input", records.size()},
                                {"after_filter_including_empty_negatives", with_empty.size()},
                                {"after_filter", filtered.size()},
                                {"after_deduplicate", unique.size()},
                                {"train", bundle.train.size()},
                                {"validation", bundle.validation.size()},
                                {"test", bundle.test.size()}};
    log::info("curated " + std::to_string(unique.size()) + " records: " + std::to_string(bundle.train.size()) + "/" +
              std::to_string(bundle.validation.size()) + "/" + std::to_string(bundle.test.size()));
}

inline dataset::Records load_split(const fs::path& dir, const char* name, bool required) {
    const auto p = dir / name;
    if (!fs::exists(p)) {
        if (required) throw DataError("missing split file: " + p.string());
        return {};
    }
    return dataset::load_records(p);
}

inline void run_train_sft(const SftOptions& o, RunManifest& manifest) {
    const fs::path data(o.data), out(o.out);
    const auto train = load_split(data, "train.jsonl", true);
    const auto valid = load_split(data, "validation.jsonl", false);
    manifest.input(data / "train.jsonl");
    if (fs::exists(data / "validation.jsonl")) manifest.input(data / "validation.jsonl");

    const auto pairs = dataset::build_pairs(train, o.shape.prefix);
    const auto vpairs = dataset::build_pairs(valid, o.shape.prefix);
    auto result = policy::sft_train(pairs, vpairs, o.config, to_model_options(o.shape));

    nlohmann::ordered_json training;
    training["sft"] = o.config.to_json();
    training["lineage"] = {{"variant", "SFT-only"}, {"data", o.data}};
    training["best_epoch"] = result.best_epoch;
    training["initial_train_loss"] = result.initial_train_loss;
    training["optimizer_steps"] = result.optimizer_steps;
    training["dropped_pairs"] = result.dropped_pairs;
    policy::save_checkpoint(out, result.model, training, result.curve);

    manifest.config()["sft"] = o.config.to_json();
    manifest.config()["model"] = {{"embed", o.shape.embed},
                                  {"hidden", o.shape.hidden},
                                  {"max_source_tokens", o.shape.max_source_tokens},
                                  {"max_target_tokens", o.shape.max_target_tokens},
                                  {"prefix", o.shape.prefix}};
    manifest.seeds()["sft"] = o.config.seed;
    manifest.extra("result") = {{"epochs", result.curve.size()},
                                {"best_epoch", result.best_epoch},
                                {"initial_train_loss", result.initial_train_loss},
                                {"final_train_loss", result.curve.back().train},
                                {"optimizer_steps", result.optimizer_steps}};
    for (const char* f : {"weights", "tokenizer", "config", "metrics"}) manifest.output(out / f);
}

inline std::vector<std::string> prompts_of(const dataset::Records& records) {
    std::vector<std::string> out;
    for (const auto& r : records) out.push_back(r.prompt);
    return out;
}

inline void run_train_rl(const RlOptions& o, RunManifest& manifest) {
    if (o.from_base == !o.sft_checkpoint.empty())
        throw ConfigError("pass exactly one of --sft-checkpoint or --from-base");
    const fs::path data(o.data), out(o.out);
    const auto train = load_split(data, "train.jsonl", true);
    const auto valid = load_split(data, "validation.jsonl", true);
    manifest.input(data / "train.jsonl");
    manifest.input(data / "validation.jsonl");

    policy::PolicyModel initial;
    nlohmann::ordered_json lineage;
    if (o.from_base) {
        std::vector<std::string> texts;
        for (const auto* split : {&train, &valid})
            for (const auto& r : *split) {
                texts.push_back(dataset::make_source(o.shape.prefix, r.prompt));
                texts.push_back(r.negative_prompt);
            }
        initial = policy::make_base_model(texts, to_model_options(o.shape, o.scoring.trigger_tokens), o.config.seed);
        lineage = {{"variant", "RL-only"}, {"reference", "base"}, {"base_seed", o.config.seed}};
    } else {
        initial = policy::load_checkpoint(o.sft_checkpoint);
        manifest.input(o.sft_checkpoint);
        lineage = {{"variant", "SFT+RL"}, {"reference", o.sft_checkpoint}};
    }
    const policy::PolicyModel reference = initial;

    auto stack = make_scoring_stack(o.scoring);
    reward::RewardModel rm{stack.embedder.get(), &stack.head, o.config.reward_weights, {}};
    auto config = o.config;
    if (o.scoring.rigged) config.monitor_tokens = o.scoring.trigger_tokens;
    auto result = rl::train_rl(initial, reference, prompts_of(train), prompts_of(valid), stack.generator(), rm, config);

    nlohmann::ordered_json training;
    training["rl"] = config.to_json();
    training["lineage"] = lineage;
    training["scoring"] = stack.description;
    training["best_epoch"] = result.best_epoch;
    if (!o.from_base) {
        if (auto sft_cfg = policy::load_checkpoint_config(o.sft_checkpoint); sft_cfg.contains("sft"))
            training["sft"] = sft_cfg["sft"];
    }
    rl::save_rl_checkpoint(out, result, training);
    if (!o.from_base && fs::exists(fs::path(o.sft_checkpoint) / "metrics"))
        write_file_atomic(out / "metrics", read_file(fs::path(o.sft_checkpoint) / "metrics"));

    manifest.config()["rl"] = config.to_json();
    manifest.config()["scoring"] = stack.description;
    manifest.config()["rollout_images_per_sample"] = o.config.rollout_images;
    manifest.extra("lineage") = lineage;
    manifest.seeds()["rl"] = o.config.seed;
    manifest.extra("result") = {{"best_epoch", result.best_epoch}, {"failed_samples", result.failed_samples}};
    for (const char* f : {"weights", "tokenizer", "config", "metrics", "reward_curve"}) manifest.output(out / f);
}

inline const std::string& variant_list_text() {
    static const std::string text = [] {
        std::string s;
        for (auto v : eval::kAllVariants) s += (s.empty() ? "" : ", ") + eval::cli_name(v);
        return s;
    }();
    return text;
}

inline void run_evaluate(const EvalOptions& o, RunManifest& manifest) {
    const auto test = dataset::load_records(o.test);
    manifest.input(o.test);
    auto stack = make_scoring_stack(o.scoring);

    auto load_policy = [&](const std::string& path, eval::Variant v) {
        if (path.empty())
            throw DataError("variant " + eval::cli_name(v) + " needs its checkpoint (--" +
                            (v == eval::Variant::SftOnly ? "sft" : v == eval::Variant::RlOnly ? "rl" : "sft-rl") +
                            "-checkpoint)");
        manifest.input(path);
        return std::make_shared<const policy::PolicyModel>(policy::load_checkpoint(path));
    };

    std::vector<eval::MetricsRow> rows;
    nlohmann::ordered_json lineage = nlohmann::ordered_json::object();
    for (const auto& name : o.variants) {
        const auto v = eval::parse_variant(name);
        if (!v) throw ConfigError("unknown variant '" + name + "'; valid names: " + variant_list_text());
        eval::VariantSpec spec;
        switch (*v) {
        case eval::Variant::None: spec = eval::VariantSpec::none(); break;
        case eval::Variant::GroundTruth: spec = eval::VariantSpec::ground_truth(); break;
        case eval::Variant::Promptist:
            if (o.promptist_file.empty() || !fs::exists(o.promptist_file)) {
                log::warn("Promptist row disabled: no augmented-prompt file (--promptist-file)");
                continue;
            }
            manifest.input(o.promptist_file);
            spec = eval::VariantSpec::promptist(eval::load_text_map(o.promptist_file, "prompt"));
            break;
        case eval::Variant::SftOnly: spec = eval::VariantSpec::from_policy(*v, load_policy(o.sft_checkpoint, *v)); break;
        case eval::Variant::RlOnly: spec = eval::VariantSpec::from_policy(*v, load_policy(o.rl_checkpoint, *v)); break;
        case eval::Variant::SftRl: spec = eval::VariantSpec::from_policy(*v, load_policy(o.sft_rl_checkpoint, *v)); break;
        }
        lineage[spec.name()] = [&]() -> nlohmann::ordered_json {
            switch (*v) {
            case eval::Variant::SftOnly: return {{"checkpoint", o.sft_checkpoint}};
            case eval::Variant::RlOnly: return {{"checkpoint", o.rl_checkpoint}, {"reference", "base"}};
            case eval::Variant::SftRl: return {{"checkpoint", o.sft_rl_checkpoint}, {"reference", "SFT checkpoint"}};
            default: return {{"source", "dataset"}};
            }
        }();
        log::info("evaluating " + spec.name());
        rows.push_back(eval::evaluate_variant(spec, test, stack.generator(), *stack.embedder, stack.head, o.generation,
                                              o.metrics));
    }
    if (rows.empty()) throw DataError("no variant could be evaluated");

    if (!o.rank_sheets.empty()) {
        manifest.input(o.rank_sheets);
        const auto ranks = eval::mean_human_rank(eval::load_rank_sheets(o.rank_sheets));
        for (auto& r : rows)
            if (auto it = ranks.find(r.variant); it != ranks.end()) r.mean_human_rank = it->second;
    }

    const auto report = eval::build_report(rows);
    const fs::path out(o.out);
    fs::create_directories(out);
    write_file_atomic(out / "report.csv", report.csv);
    write_file_atomic(out / "report.md", report.markdown);
    manifest.output(out / "report.csv");
    manifest.output(out / "report.md");
    manifest.config()["generation"] = o.generation.to_json();
    manifest.config()["metrics"] = {{"clip_scale", o.metrics.clip_scale},
                                    {"inception_splits", o.metrics.inception_splits}};
    manifest.config()["scoring"] = stack.description;
    manifest.extra("lineage") = lineage;
    manifest.seeds()["generation"] = o.generation.seeds;
}

// ---------------------------------------------------------------------------
// Entry point

/// Runs the command line; returns the process exit code.
inline int run(const std::vector<std::string>& args) {
    CLI::App app{"Negative-prompt optimization pipeline", "negopt"};
    app.set_config("--config", "", "TOML/INI config file; [section] per command, keys mirror the flags");
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "Suppress informational logging");

    CurateOptions curate;
    auto* c = app.add_subcommand("curate", "Filter, deduplicate and split exported prompt records");
    c->add_option("--in", curate.inputs, "Input record file(s), one JSON object per line")
        ->required()
        ->check(CLI::ExistingFile);
    c->add_option("--out", curate.out, "Output directory")->required();
    c->add_option("--min-likes", curate.min_likes, "Minimum likes")->capture_default_str()->check(CLI::NonNegativeNumber);
    c->add_option("--model", curate.model, "Case-insensitive model-name substring (e.g. \"stable diffusion\")");
    c->add_option("--ratios", curate.ratios, "train:validation:test ratios")->capture_default_str();
    c->add_option("--seed", curate.seed, "Shuffle seed")->capture_default_str();
    c->add_flag("--keep-duplicates", curate.keep_duplicates, "Skip exact-pair deduplication");

    SftOptions sft;
    auto* s = app.add_subcommand("train-sft", "Supervised fine-tuning of the negative-prompt policy");
    s->add_option("--data", sft.data, "Directory with train.jsonl and validation.jsonl")->required()->check(CLI::ExistingDirectory);
    s->add_option("--out", sft.out, "Checkpoint directory")->required();
    s->add_option("--lr", sft.config.learning_rate, "Learning rate")->capture_default_str();
    s->add_option("--weight-decay", sft.config.weight_decay, "Decoupled weight decay")->capture_default_str();
    s->add_option("--warmup-steps", sft.config.warmup_steps, "Linear warmup steps")->capture_default_str();
    s->add_option("--batch-size", sft.config.effective_batch_size, "Effective batch size")->capture_default_str();
    s->add_option("--micro-batch-size", sft.config.micro_batch_size, "Micro-batch size (0 = batch size)")
        ->capture_default_str();
    s->add_option("--epochs", sft.config.epochs, "Epochs")->capture_default_str();
    s->add_option("--seed", sft.config.seed, "Seed")->capture_default_str();
    add_model_shape_options(*s, sft.shape);

    RlOptions rlo;
    auto* r = app.add_subcommand("train-rl", "PPO fine-tuning against the composite image reward");
    auto* from_ckpt = r->add_option("--sft-checkpoint", rlo.sft_checkpoint, "SFT checkpoint (SFT+RL)")
                          ->check(CLI::ExistingDirectory);
    auto* from_base = r->add_flag("--from-base", rlo.from_base, "Start from an un-fine-tuned base model (RL-only)");
    from_ckpt->excludes(from_base);
    r->add_option("--data", rlo.data, "Directory with train.jsonl and validation.jsonl")->required()->check(CLI::ExistingDirectory);
    r->add_option("--out", rlo.out, "Checkpoint directory")->required();
    r->add_option("--alpha", rlo.config.reward_weights.alpha, "Aesthetics weight")->capture_default_str();
    r->add_option("--beta", rlo.config.reward_weights.beta, "Alignment weight")->capture_default_str();
    r->add_option("--gamma", rlo.config.reward_weights.gamma, "Fidelity weight")->capture_default_str();
    r->add_option("--lr", rlo.config.learning_rate, "Learning rate")->capture_default_str();
    r->add_option("--batch-size", rlo.config.effective_batch_size, "Rollout batch size")->capture_default_str();
    r->add_option("--epochs", rlo.config.epochs, "Epochs")->capture_default_str();
    r->add_option("--clip-ratio", rlo.config.clip_ratio, "PPO clip ratio")->capture_default_str();
    r->add_option("--kl-coef", rlo.config.kl_coefficient, "KL penalty coefficient")->capture_default_str();
    r->add_option("--ppo-epochs", rlo.config.ppo_epochs, "Gradient steps per rollout batch")->capture_default_str();
    r->add_option("--rollout-temperature", rlo.config.rollout_temperature, "Sampling temperature")->capture_default_str();
    r->add_option("--rollout-images", rlo.config.rollout_images, "Images per rollout sample")->capture_default_str();
    r->add_option("--seed", rlo.config.seed, "Seed")->capture_default_str();
    add_model_shape_options(*r, rlo.shape);
    add_scoring_options(*r, rlo.scoring);

    EvalOptions ev;
    auto* e = app.add_subcommand("evaluate", "Score variants on the test split and write the comparison report");
    e->add_option("--test", ev.test, "Test split records")->required()->check(CLI::ExistingFile);
    e->add_option("--variants", ev.variants, "Comma-separated variants: " + variant_list_text())
        ->required()
        ->delimiter(',')
        ->check(CLI::Validator(
            [](std::string& v) -> std::string {
                return eval::parse_variant(v) ? std::string() : "unknown variant '" + v + "'; valid names: " + variant_list_text();
            },
            "VARIANT"));
    e->add_option("--out", ev.out, "Report directory")->required();
    e->add_option("--sft-checkpoint", ev.sft_checkpoint, "SFT-only checkpoint");
    e->add_option("--rl-checkpoint", ev.rl_checkpoint, "RL-only checkpoint");
    e->add_option("--sft-rl-checkpoint", ev.sft_rl_checkpoint, "SFT+RL checkpoint");
    e->add_option("--promptist-file", ev.promptist_file, "Augmented prompts {id, prompt} per line");
    e->add_option("--rank-sheets", ev.rank_sheets, "Human rank sheets, one JSON object per line");
    e->add_option("--steps", ev.generation.steps, "Diffusion steps")->capture_default_str();
    e->add_option("--guidance-scale", ev.generation.guidance_scale, "Guidance scale")->capture_default_str();
    e->add_option("--seeds", ev.generation.seeds, "Generation seeds")->delimiter(',')->capture_default_str();
    e->add_option("--width", ev.generation.width, "Image width")->capture_default_str();
    e->add_option("--height", ev.generation.height, "Image height")->capture_default_str();
    e->add_option("--clip-scale", ev.metrics.clip_scale, "CLIP Score scale")->capture_default_str();
    e->add_option("--inception-splits", ev.metrics.inception_splits, "Inception Score splits (0 = pooled)")
        ->capture_default_str();
    add_scoring_options(*e, ev.scoring);

    std::vector<char*> argv;
    std::vector<std::string> storage(args.begin(), args.end());
    if (storage.empty() || storage.front().rfind('-', 0) == 0 || storage.front() == "curate" ||
        storage.front() == "train-sft" || storage.front() == "train-rl" || storage.front() == "evaluate")
        storage.insert(storage.begin(), "negopt");
    for (auto& a : storage) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? 0 : 2; // --help and --version exit cleanly
    }
    log::quiet() = quiet;

    auto* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    std::string out_dir;
    try {
        // Configuration problems are reported before anything is written.
        if (name == "train-sft") {
            sft.config.validate();
            out_dir = sft.out;
        } else if (name == "train-rl") {
            rlo.config.validate();
            if (rlo.from_base == !rlo.sft_checkpoint.empty())
                throw ConfigError("pass exactly one of --sft-checkpoint or --from-base");
            out_dir = rlo.out;
        } else if (name == "evaluate") {
            ev.generation.validate();
            out_dir = ev.out;
        } else {
            dataset::parse_ratios(curate.ratios);
            out_dir = curate.out;
        }
    } catch (const Error& err) {
        std::cerr << "negopt " << name << ": " << err.what() << '\n';
        return 2;
    }

    RunManifest manifest(out_dir, name);
    manifest.extra("resolved_options") = cmd->config_to_str(true, false);
    manifest.begin();
    try {
        if (name == "curate") run_curate(curate, manifest);
        else if (name == "train-sft") run_train_sft(sft, manifest);
        else if (name == "train-rl") run_train_rl(rlo, manifest);
        else run_evaluate(ev, manifest);
    } catch (const std::exception& err) {
        std::cerr << "negopt " << name << ": " << err.what() << '\n';
        manifest.finish(false, err.what());
        return 1;
    }
    manifest.finish(true);
    return 0;
}

} // namespace negopt::cli
