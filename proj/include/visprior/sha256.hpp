#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vp {

// Streaming SHA-256; used for checkpoint integrity and provenance hashes.
class Sha256 {
public:
    Sha256();
    void update(const void* data, size_t len);
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::string hex_digest(); // finalizes

private:
    void process_block(const uint8_t* block);
    uint32_t h_[8];
    uint8_t buf_[64];
    size_t buf_len_ = 0;
    uint64_t total_ = 0;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);

class ParameterStore;

// Hash of names, shapes and raw float bytes in iteration order; the frozen
// weight audits compare this before and after training runs.
std::string store_checksum(const ParameterStore& store);

} // namespace vp
