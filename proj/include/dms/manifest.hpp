#pragma once

// Append-only run manifest: one JSON line per produced artifact with a
// sequence number, kind, relative path, and content hash. Stages verify
// their upstream artifacts against the latest entry before consuming them,
// and the file is deterministic for a deterministic run.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dms::manifest {

struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Entry {
    int seq = 0;
    std::string kind;
    std::string path;  // relative to the run directory
    std::string sha256;
};

class Manifest {
public:
    // Opens (or creates) <run_dir>/manifest.jsonl.
    explicit Manifest(std::filesystem::path run_dir);

    // Hashes the file and appends an entry. The path must live under run_dir.
    void record(const std::string& kind, const std::filesystem::path& file);

    // Latest entry of a kind, if any.
    std::optional<Entry> latest(const std::string& kind) const;

    // Returns the absolute path of the latest artifact of `kind` after
    // verifying its hash. Throws MissingArtifact naming `producer` when the
    // artifact is absent, and on hash mismatch.
    std::filesystem::path require(const std::string& kind, const std::string& producer) const;

    const std::vector<Entry>& entries() const { return entries_; }
    const std::filesystem::path& run_dir() const { return run_dir_; }

private:
    void append_line(const Entry& entry);

    std::filesystem::path run_dir_;
    std::filesystem::path file_;
    std::vector<Entry> entries_;
};

}  // namespace dms::manifest
