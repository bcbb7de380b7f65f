#pragma once

#include "negopt/common.hpp"

#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>

namespace negopt {

inline std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Provenance of one command run, stored as `<out>/manifest`.
///
/// The file holds {"runs": [...]}; each invocation appends its own entry and
/// only ever rewrites that entry (status and outputs at finish).
class RunManifest {
  public:
    RunManifest(std::filesystem::path out_dir, std::string command) : dir_(std::move(out_dir)) {
        run_["command"] = std::move(command);
        run_["status"] = "running";
        run_["started_at"] = utc_now();
        run_["components"] = {{"negopt", std::string(kVersion)},
                              {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                                    std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                                    std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
        run_["config"] = nlohmann::ordered_json::object();
        run_["seeds"] = nlohmann::ordered_json::object();
        run_["inputs"] = nlohmann::ordered_json::array();
        run_["outputs"] = nlohmann::ordered_json::array();
    }

    static std::filesystem::path path_in(const std::filesystem::path& dir) { return dir / "manifest"; }

    nlohmann::ordered_json& config() { return run_["config"]; }
    nlohmann::ordered_json& seeds() { return run_["seeds"]; }
    nlohmann::ordered_json& extra(const std::string& key) { return run_[key]; }
    void component(const std::string& name, const std::string& version) { run_["components"][name] = version; }

    /// Records a file or (recursively hashed) directory with its content hash.
    void input(const std::filesystem::path& p) { run_["inputs"].push_back(describe(p)); }
    void output(const std::filesystem::path& p) { run_["outputs"].push_back(describe(p)); }

    /// Appends this run to the manifest with status "running".
    void begin() {
        std::filesystem::create_directories(dir_);
        auto doc = load();
        index_ = doc["runs"].size();
        doc["runs"].push_back(run_);
        save(doc);
    }

    void finish(bool success, const std::string& error = {}) {
        run_["status"] = success ? "success" : "failed";
        run_["finished_at"] = utc_now();
        if (!error.empty()) run_["error"] = error;
        auto doc = load();
        if (index_ < doc["runs"].size()) doc["runs"][index_] = run_;
        else doc["runs"].push_back(run_);
        save(doc);
    }

    const nlohmann::ordered_json& run() const { return run_; }

    static nlohmann::ordered_json read(const std::filesystem::path& dir) {
        return nlohmann::ordered_json::parse(read_file(path_in(dir)));
    }

  private:
    static nlohmann::ordered_json describe(const std::filesystem::path& p) {
        nlohmann::ordered_json j{{"path", p.string()}};
        if (std::filesystem::is_regular_file(p)) {
            j["sha256"] = sha256_file(p);
        } else if (std::filesystem::is_directory(p)) {
            std::vector<std::filesystem::path> files;
            for (const auto& e : std::filesystem::recursive_directory_iterator(p))
                if (e.is_regular_file() && e.path().filename() != "manifest") files.push_back(e.path());
            std::sort(files.begin(), files.end());
            std::string acc;
            for (const auto& f : files)
                acc += std::filesystem::relative(f, p).string() + ' ' + sha256_file(f) + '\n';
            j["sha256"] = sha256_hex(acc);
        }
        return j;
    }

    nlohmann::ordered_json load() const {
        if (std::filesystem::exists(path_in(dir_))) return nlohmann::ordered_json::parse(read_file(path_in(dir_)));
        return {{"runs", nlohmann::ordered_json::array()}};
    }

    void save(const nlohmann::ordered_json& doc) const { write_file_atomic(path_in(dir_), doc.dump(2) + "\n"); }

    std::filesystem::path dir_;
    nlohmann::ordered_json run_;
    std::size_t index_ = 0;
};

} // namespace negopt
