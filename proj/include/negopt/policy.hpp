#pragma once

#include "negopt/common.hpp"
#include "negopt/dataset.hpp"
#include "negopt/optim.hpp"
#include "negopt/seq2seq.hpp"
#include "negopt/tokenizer.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <optional>

namespace negopt::policy {

/// Supervised fine-tuning hyperparameters. Defaults are the published SFT settings.
struct SftConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    std::size_t warmup_steps = 256;
    std::size_t effective_batch_size = 32;
    /// 0 means "no accumulation": one micro-batch per optimizer step.
    std::size_t micro_batch_size = 0;
    std::size_t epochs = 16;
    std::uint64_t seed = 0;

    std::size_t micro_batch() const { return micro_batch_size == 0 ? effective_batch_size : micro_batch_size; }
    std::size_t accumulation_steps() const { return effective_batch_size / micro_batch(); }

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw ConfigError("learning_rate must be a positive finite number");
        if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
            throw ConfigError("weight_decay must be non-negative");
        if (effective_batch_size == 0) throw ConfigError("effective_batch_size must be positive");
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (micro_batch() == 0 || effective_batch_size % micro_batch() != 0)
            throw ConfigError("micro_batch_size must divide effective_batch_size");
    }

    nlohmann::ordered_json to_json() const {
        return {{"learning_rate", learning_rate},
                {"weight_decay", weight_decay},
                {"warmup_steps", warmup_steps},
                {"effective_batch_size", effective_batch_size},
                {"micro_batch_size", micro_batch()},
                {"gradient_accumulation_steps", accumulation_steps()},
                {"epochs", epochs},
                {"seed", seed}};
    }
};

struct DecodingConfig {
    double temperature = 0.0; // 0 selects greedy decoding
    std::uint64_t seed = 0;
    std::size_t max_target_tokens = 128;
};

/// Model-shape options that are fixed when a fresh model is created.
struct ModelOptions {
    std::size_t embed = 32;
    std::size_t hidden = 64;
    std::size_t max_source_tokens = 128;
    std::size_t max_target_tokens = 128;
    std::string prefix = std::string(dataset::kDefaultPrefix);
    /// Words added to the vocabulary even if absent from the training texts.
    std::vector<std::string> extra_vocabulary;
};

/// A seq2seq network plus the codec and limits it was trained with.
struct PolicyModel {
    Tokenizer tokenizer;
    Seq2Seq network;
    std::size_t max_source_tokens = 128;
    std::size_t max_target_tokens = 128;
    std::string prefix = std::string(dataset::kDefaultPrefix);

    TokenIds encode_source(std::string_view source_text) const {
        auto ids = tokenizer.encode(source_text);
        if (ids.size() > max_source_tokens) {
            log::warn("source truncated from " + std::to_string(ids.size()) + " to " +
                      std::to_string(max_source_tokens) + " tokens");
            ids.resize(max_source_tokens);
        }
        return ids;
    }

    TokenIds source_for(std::string_view prompt) const { return encode_source(dataset::make_source(prefix, prompt)); }
};

/// Fresh, randomly initialized model whose vocabulary covers `texts`.
inline PolicyModel make_base_model(const std::vector<std::string>& texts, const ModelOptions& opt, std::uint64_t seed) {
    if (opt.max_source_tokens == 0 || opt.max_target_tokens == 0) throw ConfigError("token limits must be positive");
    std::vector<std::string> all = texts;
    all.push_back(opt.prefix);
    PolicyModel m;
    m.tokenizer = Tokenizer::build(all, opt.extra_vocabulary);
    m.network = Seq2Seq({m.tokenizer.size(), opt.embed, opt.hidden}, seed);
    m.max_source_tokens = opt.max_source_tokens;
    m.max_target_tokens = opt.max_target_tokens;
    m.prefix = opt.prefix;
    return m;
}

// ---------------------------------------------------------------------------
// Scoring and gradients

/// Log-probabilities of `actions` under teacher forcing.
inline Vector score_actions(const PolicyModel& m, const TokenIds& source, const TokenIds& actions) {
    auto trace = m.network.forward(source, actions);
    Vector out(actions.size());
    for (std::size_t t = 0; t < actions.size(); ++t) out[t] = trace.log_probs[t][static_cast<std::size_t>(actions[t])];
    return out;
}

/// Adds to `grad` the gradient of sum_t weights[t] * log p(actions[t]). Returns the log-probs.
inline Vector accumulate_weighted_logprob_grad(const PolicyModel& m, const TokenIds& source, const TokenIds& actions,
                                               const Vector& weights, Vector& grad) {
    if (weights.size() != actions.size()) throw ShapeError("one weight per action required");
    auto trace = m.network.forward(source, actions);
    std::vector<Vector> dz(actions.size());
    Vector lp(actions.size());
    for (std::size_t t = 0; t < actions.size(); ++t) {
        lp[t] = trace.log_probs[t][static_cast<std::size_t>(actions[t])];
        dz[t] = nll_logit_grad(trace.log_probs[t], actions[t], -weights[t]);
    }
    m.network.backward(trace, dz, grad);
    return lp;
}

inline TokenIds target_ids(const PolicyModel& m, std::string_view negative_prompt) {
    auto ids = m.tokenizer.encode(negative_prompt);
    if (ids.empty()) throw DataError("negative prompt tokenizes to zero tokens");
    if (ids.size() > m.max_target_tokens)
        throw DataError("target has " + std::to_string(ids.size()) + " tokens, exceeding max_target_tokens = " +
                        std::to_string(m.max_target_tokens));
    return ids;
}

inline void check_prefix(const PolicyModel& m, std::string_view prefix) {
    if (prefix != m.prefix)
        throw ConfigError("prefix '" + std::string(prefix) + "' differs from the checkpoint prefix '" + m.prefix + "'");
}

/// Per-token log-probabilities of the negative prompt's tokens (end-of-sequence excluded).
inline Vector sequence_log_probs(const PolicyModel& m, std::string_view prompt, std::string_view prefix,
                                 std::string_view negative_prompt) {
    check_prefix(m, prefix);
    return score_actions(m, m.source_for(prompt), target_ids(m, negative_prompt));
}

// ---------------------------------------------------------------------------
// Decoding

struct Generation {
    TokenIds tokens;        // content tokens, no <eos>
    bool terminated = false; // <eos> was emitted before the length limit
    Vector log_probs;       // per action under the untempered model: tokens, then <eos> if terminated

    TokenIds actions() const {
        TokenIds a = tokens;
        if (terminated) a.push_back(Tokenizer::kEos);
        return a;
    }
};

inline Generation decode(const PolicyModel& m, const TokenIds& source, double temperature, std::size_t max_tokens,
                         Rng* rng) {
    if (temperature < 0.0 || !std::isfinite(temperature)) throw ConfigError("temperature must be >= 0");
    const std::size_t limit = std::min(max_tokens, m.max_target_tokens);
    Generation g;
    const Vector context = m.network.encode(source);
    Vector h = context, lp;
    TokenId prev = Tokenizer::kBos;
    const std::size_t V = m.network.shape().vocab;
    for (std::size_t t = 0; t <= limit; ++t) {
        h = m.network.step(context, h, prev, lp);
        TokenId next = 0;
        if (temperature == 0.0 || rng == nullptr) {
            next = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
        } else {
            double mx = -std::numeric_limits<double>::infinity();
            for (double v : lp) mx = std::max(mx, v);
            Vector w(V);
            double sum = 0.0;
            for (std::size_t v = 0; v < V; ++v) sum += (w[v] = std::exp((lp[v] - mx) / temperature));
            double u = rng->uniform() * sum;
            next = static_cast<TokenId>(V - 1);
            for (std::size_t v = 0; v < V; ++v) {
                if (w[v] == 0.0) continue;
                if ((u -= w[v]) < 0.0) {
                    next = static_cast<TokenId>(v);
                    break;
                }
            }
            while (Seq2Seq::is_masked(next)) ++next; // only reachable through rounding at the tail
        }
        if (next == Tokenizer::kEos) {
            g.terminated = true;
            g.log_probs.push_back(lp[static_cast<std::size_t>(next)]);
            break;
        }
        if (t == limit) break; // length limit reached without <eos>
        g.tokens.push_back(next);
        g.log_probs.push_back(lp[static_cast<std::size_t>(next)]);
        prev = next;
    }
    return g;
}

/// Decodes a negative prompt for `prompt`. Temperature 0 is greedy and ignores the seed.
inline std::string generate_negative_prompt(const PolicyModel& m, std::string_view prompt, std::string_view prefix,
                                            const DecodingConfig& decoding) {
    check_prefix(m, prefix);
    if (trim(prompt).empty()) throw DataError("prompt is empty");
    Rng rng(decoding.seed);
    auto g = decode(m, m.source_for(prompt), decoding.temperature, decoding.max_target_tokens,
                    decoding.temperature > 0.0 ? &rng : nullptr);
    return trim(m.tokenizer.decode(g.tokens));
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning

struct EpochLoss {
    std::size_t epoch = 0;
    double train = 0.0;
    std::optional<double> validation;

    bool operator==(const EpochLoss&) const = default;
};

struct SftResult {
    PolicyModel model; // parameters of the best epoch
    std::vector<EpochLoss> curve;
    double initial_train_loss = 0.0;
    std::size_t best_epoch = 0;
    std::size_t optimizer_steps = 0;
    std::size_t dropped_pairs = 0;
};

namespace detail {

struct Example {
    TokenIds source;
    TokenIds actions; // target tokens + <eos>
    std::string origin_id;
};

inline std::vector<Example> tokenize_pairs(const PolicyModel& m, const std::vector<dataset::PromptPair>& pairs,
                                           std::size_t* dropped) {
    std::vector<Example> out;
    for (const auto& p : pairs) {
        auto tgt = m.tokenizer.encode(p.target);
        if (tgt.empty() || tgt.size() > m.max_target_tokens) {
            log::warn("dropping pair '" + p.origin_id + "': target has " + std::to_string(tgt.size()) +
                      " tokens (limit " + std::to_string(m.max_target_tokens) + ")");
            if (dropped) ++*dropped;
            continue;
        }
        tgt.push_back(Tokenizer::kEos);
        out.push_back({m.encode_source(p.source), std::move(tgt), p.origin_id});
    }
    return out;
}

/// Token-level mean cross-entropy.
inline double mean_loss(const PolicyModel& m, const std::vector<Example>& data) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& ex : data) {
        for (double lp : score_actions(m, ex.source, ex.actions)) total -= lp;
        count += ex.actions.size();
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

} // namespace detail

/// Token-level mean cross-entropy of `pairs` under `m`.
inline double evaluate_loss(const PolicyModel& m, const std::vector<dataset::PromptPair>& pairs) {
    return detail::mean_loss(m, detail::tokenize_pairs(m, pairs, nullptr));
}

/// Fine-tunes a fresh model (or `init`, when given) on `pairs` and returns the
/// parameters of the epoch with the lowest validation loss.
inline SftResult sft_train(const std::vector<dataset::PromptPair>& pairs,
                           const std::vector<dataset::PromptPair>& validation, const SftConfig& config,
                           const ModelOptions& options = {}, const PolicyModel* init = nullptr) {
    config.validate();
    if (pairs.empty()) throw DataError("sft_train: empty training set");

    SftResult result;
    PolicyModel model;
    if (init) {
        model = *init;
    } else {
        std::vector<std::string> texts;
        for (const auto& p : pairs) {
            texts.push_back(p.source);
            texts.push_back(p.target);
        }
        model = make_base_model(texts, options, config.seed);
    }
    for (const auto& p : pairs)
        if (!p.source.starts_with(model.prefix))
            throw DataError("pair '" + p.origin_id + "' source does not start with the prefix '" + model.prefix + "'");

    const auto train = detail::tokenize_pairs(model, pairs, &result.dropped_pairs);
    const auto valid = detail::tokenize_pairs(model, validation, &result.dropped_pairs);
    if (train.empty()) throw DataError("sft_train: every training pair was dropped");

    AdamW opt(model.network.parameters().size(), {.weight_decay = config.weight_decay});
    Rng rng(config.seed);
    result.initial_train_loss = detail::mean_loss(model, train);

    std::vector<std::size_t> order(train.size());
    double best = std::numeric_limits<double>::infinity();
    Vector grad;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += config.effective_batch_size) {
            const std::size_t end = std::min(order.size(), start + config.effective_batch_size);
            std::size_t tokens = 0;
            for (std::size_t k = start; k < end; ++k) tokens += train[order[k]].actions.size();
            const double coef = 1.0 / static_cast<double>(tokens);

            grad.assign(model.network.parameters().size(), 0.0);
            double loss = 0.0;
            for (std::size_t micro = start; micro < end; micro += config.micro_batch()) {
                for (std::size_t k = micro; k < std::min(end, micro + config.micro_batch()); ++k) {
                    const auto& ex = train[order[k]];
                    Vector w(ex.actions.size(), -coef); // loss = -coef * sum log p
                    for (double lp : accumulate_weighted_logprob_grad(model, ex.source, ex.actions, w, grad))
                        loss -= coef * lp;
                }
            }
            if (!std::isfinite(loss) || !all_finite(grad)) {
                std::string ids;
                for (std::size_t k = start; k < end; ++k) ids += (ids.empty() ? "" : ",") + train[order[k]].origin_id;
                throw TrainingError("non-finite loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(result.optimizer_steps + 1) + "; batch origins: " + ids);
            }
            ++result.optimizer_steps;
            opt.step(model.network.parameters(), grad,
                     warmup_lr(config.learning_rate, config.warmup_steps, result.optimizer_steps));
        }

        EpochLoss e{epoch, detail::mean_loss(model, train), std::nullopt};
        if (!valid.empty()) e.validation = detail::mean_loss(model, valid);
        if (!std::isfinite(e.train) || (e.validation && !std::isfinite(*e.validation)))
            throw TrainingError("non-finite epoch loss at epoch " + std::to_string(epoch));
        result.curve.push_back(e);
        const double selector = e.validation.value_or(e.train);
        if (selector < best) {
            best = selector;
            result.best_epoch = epoch;
            result.model = model;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   <dir>/weights    binary parameter vector
//   <dir>/tokenizer  vocabulary (JSON)
//   <dir>/config     model limits, prefix and training configuration (JSON)
//   <dir>/metrics    loss curve, one "epoch train validation" line per epoch

namespace detail {

inline constexpr char kWeightsMagic[8] = {'N', 'E', 'G', 'O', 'P', 'T', 'W', '1'};

inline std::string encode_weights(const Seq2Seq& net) {
    std::string out(kWeightsMagic, sizeof kWeightsMagic);
    auto put = [&](std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); };
    put(net.shape().vocab);
    put(net.shape().embed);
    put(net.shape().hidden);
    put(net.parameters().size());
    out.append(reinterpret_cast<const char*>(net.parameters().data()), net.parameters().size() * sizeof(double));
    return out;
}

inline Seq2Seq decode_weights(const std::string& data) {
    constexpr std::size_t header = sizeof kWeightsMagic + 4 * sizeof(std::uint64_t);
    if (data.size() < header || std::memcmp(data.data(), kWeightsMagic, sizeof kWeightsMagic) != 0)
        throw DataError("weights file has an unknown format");
    std::uint64_t v[4];
    std::memcpy(v, data.data() + sizeof kWeightsMagic, sizeof v);
    if (data.size() != header + v[3] * sizeof(double)) throw DataError("weights file is truncated");
    Seq2Seq net({v[0], v[1], v[2]}, 0);
    Vector p(v[3]);
    std::memcpy(p.data(), data.data() + header, v[3] * sizeof(double));
    net.set_parameters(std::move(p));
    return net;
}

inline std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

} // namespace detail

inline std::string format_loss_curve(const std::vector<EpochLoss>& curve) {
    std::string out;
    for (const auto& e : curve) {
        out += std::to_string(e.epoch) + ' ' + detail::format_double(e.train) + ' ' +
               (e.validation ? detail::format_double(*e.validation) : std::string("-")) + '\n';
    }
    return out;
}

/// Writes a checkpoint; `training` is merged into the config file under its own keys.
inline void save_checkpoint(const std::filesystem::path& dir, const PolicyModel& m,
                            const nlohmann::ordered_json& training = nlohmann::ordered_json::object(),
                            const std::vector<EpochLoss>& curve = {}) {
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / "weights", detail::encode_weights(m.network));
    write_file_atomic(dir / "tokenizer", m.tokenizer.to_json().dump() + "\n");
    nlohmann::ordered_json cfg;
    cfg["prefix"] = m.prefix;
    cfg["model"] = {{"vocab", m.network.shape().vocab},
                    {"embed", m.network.shape().embed},
                    {"hidden", m.network.shape().hidden},
                    {"max_source_tokens", m.max_source_tokens},
                    {"max_target_tokens", m.max_target_tokens}};
    for (const auto& [k, v] : training.items()) cfg[k] = v;
    write_file_atomic(dir / "config", cfg.dump(2) + "\n");
    write_file_atomic(dir / "metrics", format_loss_curve(curve));
}

inline nlohmann::json load_checkpoint_config(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "config")) throw DataError("not a checkpoint directory: " + dir.string());
    return nlohmann::json::parse(read_file(dir / "config"));
}

inline PolicyModel load_checkpoint(const std::filesystem::path& dir) {
    const auto cfg = load_checkpoint_config(dir);
    PolicyModel m;
    m.tokenizer = Tokenizer::from_json(nlohmann::json::parse(read_file(dir / "tokenizer")));
    m.network = detail::decode_weights(read_file(dir / "weights"));
    if (m.network.shape().vocab != m.tokenizer.size())
        throw DataError("checkpoint tokenizer and weights disagree on vocabulary size");
    m.prefix = cfg.at("prefix").get<std::string>();
    m.max_source_tokens = cfg.at("model").at("max_source_tokens").get<std::size_t>();
    m.max_target_tokens = cfg.at("model").at("max_target_tokens").get<std::size_t>();
    return m;
}

} // namespace negopt::policy
