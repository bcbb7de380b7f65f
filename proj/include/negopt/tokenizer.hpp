#pragma once

#include "negopt/common.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace negopt::policy {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

/// Word-level codec. Words are maximal runs of non-space, non-punctuation
/// characters; each punctuation character is its own token.
class Tokenizer {
  public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kBos = 1;
    static constexpr TokenId kEos = 2;
    static constexpr TokenId kUnk = 3;

    Tokenizer() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} { reindex(); }

    /// Builds a vocabulary from texts; words ordered by descending count, then lexicographically.
    static Tokenizer build(const std::vector<std::string>& texts, const std::vector<std::string>& extra = {}) {
        std::map<std::string, std::size_t> counts;
        for (const auto& t : texts)
            for (auto& w : split_words(t)) ++counts[w];
        for (const auto& t : extra)
            for (auto& w : split_words(t)) ++counts[w];
        std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
        std::stable_sort(sorted.begin(), sorted.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        Tokenizer tok;
        for (auto& [w, _] : sorted)
            if (!tok.index_.contains(w)) tok.tokens_.push_back(w);
        tok.reindex();
        return tok;
    }

    static bool is_punct(char c) {
        switch (c) {
        case ',': case '.': case ';': case ':': case '!': case '?': case '(': case ')':
        case '[': case ']': case '{': case '}': case '|': case '"':
            return true;
        default:
            return false;
        }
    }

    static std::vector<std::string> split_words(std::string_view text) {
        std::vector<std::string> words;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        };
        for (char c : text) {
            if (std::isspace(static_cast<unsigned char>(c))) {
                flush();
            } else if (is_punct(c)) {
                flush();
                words.emplace_back(1, c);
            } else {
                cur.push_back(c);
            }
        }
        flush();
        return words;
    }

    TokenIds encode(std::string_view text) const {
        TokenIds ids;
        for (auto& w : split_words(text)) {
            auto it = index_.find(w);
            ids.push_back(it == index_.end() ? kUnk : it->second);
        }
        return ids;
    }

    /// Joins tokens with single spaces; no space before closing punctuation
    /// or after opening brackets. Special tokens other than <unk> are dropped.
    std::string decode(const TokenIds& ids) const {
        std::string out;
        bool glue_next = false;
        for (TokenId id : ids) {
            if (id == kPad || id == kBos || id == kEos) continue;
            const std::string& w = token(id);
            const bool closing = w.size() == 1 && std::string_view(",.;:!?)]}").find(w[0]) != std::string_view::npos;
            if (!out.empty() && !closing && !glue_next) out.push_back(' ');
            out += w;
            glue_next = w.size() == 1 && (w[0] == '(' || w[0] == '[' || w[0] == '{');
        }
        return out;
    }

    const std::string& token(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw ShapeError("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::optional<TokenId> find(std::string_view word) const {
        auto it = index_.find(std::string(word));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    nlohmann::json to_json() const { return nlohmann::json{{"tokens", tokens_}}; }

    static Tokenizer from_json(const nlohmann::json& j) {
        Tokenizer tok;
        tok.tokens_ = j.at("tokens").get<std::vector<std::string>>();
        if (tok.tokens_.size() < 4 || tok.tokens_[0] != "<pad>" || tok.tokens_[2] != "<eos>")
            throw DataError("tokenizer state is missing its special tokens");
        tok.reindex();
        return tok;
    }

    bool operator==(const Tokenizer& o) const { return tokens_ == o.tokens_; }

  private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

} // namespace negopt::policy
