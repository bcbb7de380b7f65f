#pragma once

#include "negopt/dataset.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace negopt::fixture {

/// Scratch directory removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag = "negopt") {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

inline dataset::PromptRecord record(std::string id, std::int64_t likes, std::string prompt, std::string negative,
                                    std::string model = "Stable Diffusion 1.5") {
    dataset::PromptRecord r;
    r.id = std::move(id);
    r.created_at = "2023-01-15T10:30:00Z";
    r.model = std::move(model);
    r.sampler = "Euler a";
    r.likes = likes;
    r.height = 512;
    r.width = 512;
    r.steps = 20;
    r.cursor = "c";
    r.url = "https://example.invalid/" + r.id;
    r.cfg_scale = 7.0;
    r.prompt = std::move(prompt);
    r.negative_prompt = std::move(negative);
    return r;
}

/// Small corpus whose negative prompts rarely contain "blurry".
inline dataset::Records toy_corpus() {
    return {
        record("a", 120, "a wolf in the snow", "cartoon, low quality"),
        record("b", 130, "portrait of an old sailor", "deformed hands, extra fingers"),
        record("c", 150, "a castle on a hill at dusk", "watermark, text"),
        record("d", 110, "a bowl of ramen, studio light", "low quality, blurry"),
    };
}

} // namespace negopt::fixture
