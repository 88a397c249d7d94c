#include "dms/manifest.hpp"

#include <fstream>

#include <json.hpp>

#include "dms/sha256.hpp"

namespace dms::manifest {

using json = nlohmann::json;

Manifest::Manifest(std::filesystem::path run_dir) : run_dir_(std::move(run_dir)) {
    std::filesystem::create_directories(run_dir_);
    file_ = run_dir_ / "manifest.jsonl";
    std::ifstream in(file_, std::ios::binary);
    if (!in) {
        return;
    }
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        Entry e;
        e.seq = j.at("seq").get<int>();
        e.kind = j.at("kind").get<std::string>();
        e.path = j.at("path").get<std::string>();
        e.sha256 = j.at("sha256").get<std::string>();
        entries_.push_back(std::move(e));
    }
}

void Manifest::record(const std::string& kind, const std::filesystem::path& file) {
    Entry e;
    e.seq = static_cast<int>(entries_.size());
    e.kind = kind;
    e.path = std::filesystem::relative(file, run_dir_).generic_string();
    e.sha256 = sha256_file_hex(file);
    append_line(e);
    entries_.push_back(std::move(e));
}

std::optional<Entry> Manifest::latest(const std::string& kind) const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->kind == kind) {
            return *it;
        }
    }
    return std::nullopt;
}

std::filesystem::path Manifest::require(const std::string& kind,
                                        const std::string& producer) const {
    const auto entry = latest(kind);
    if (!entry.has_value()) {
        throw MissingArtifact("missing artifact '" + kind + "': run `" + producer + "` first");
    }
    const std::filesystem::path file = run_dir_ / entry->path;
    if (!std::filesystem::exists(file)) {
        throw MissingArtifact("artifact '" + kind + "' vanished from " + entry->path + "; re-run `" +
                              producer + "`");
    }
    const std::string hash = sha256_file_hex(file);
    if (hash != entry->sha256) {
        throw MissingArtifact("artifact '" + kind + "' at " + entry->path +
                              " does not match its manifest hash; re-run `" + producer + "`");
    }
    return file;
}

void Manifest::append_line(const Entry& entry) {
    std::ofstream out(file_, std::ios::binary | std::ios::app);
    if (!out) {
        throw std::runtime_error("manifest: cannot append to " + file_.string());
    }
    json j{{"seq", entry.seq}, {"kind", entry.kind}, {"path", entry.path}, {"sha256", entry.sha256}};
    out << j.dump() << "\n";
}

}  // namespace dms::manifest
