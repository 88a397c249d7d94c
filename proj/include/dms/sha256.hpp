#pragma once

// SHA-256, used for artifact content hashes in run manifests and reports.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace dms {

class Sha256 {
public:
    Sha256();
    void update(const void* data, size_t len);
    // Finalizes and returns the lowercase hex digest. The object must not be
    // updated afterwards.
    std::string hex_digest();

private:
    void process_block(const uint8_t* block);

    uint32_t h_[8];
    uint8_t buffer_[64];
    size_t buffer_len_;
    uint64_t total_len_;
};

std::string sha256_hex(std::string_view data);
std::string sha256_file_hex(const std::filesystem::path& path);

}  // namespace dms
