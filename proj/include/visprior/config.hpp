#pragma once

#include <string>
#include <vector>

#include "visprior/tensor.hpp"

namespace vp {

// Sectioned key=value run configuration. Files are diffable text; the
// canonical rendering is what gets hashed and snapshotted into checkpoints,
// so a run is a pure function of (config, referenced checkpoints, seed).
class KVConfig {
public:
    static KVConfig parse(const std::string& text);
    static KVConfig load(const std::string& path);

    bool has(const std::string& section, const std::string& key) const;
    std::string get(const std::string& section, const std::string& key,
                    const std::string& fallback = "") const;
    std::string require(const std::string& section, const std::string& key) const;
    int get_int(const std::string& section, const std::string& key, int fallback) const;
    int64_t get_i64(const std::string& section, const std::string& key, int64_t fallback) const;
    uint64_t get_u64(const std::string& section, const std::string& key, uint64_t fallback) const;
    float get_float(const std::string& section, const std::string& key, float fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

    void set(const std::string& section, const std::string& key, const std::string& value);

    std::string canonical_text() const;
    std::string hash() const; // sha256 of the canonical text
    void save(const std::string& path) const;

private:
    struct Entry {
        std::string section, key, value;
    };
    std::vector<Entry> entries_;
    const Entry* find(const std::string& section, const std::string& key) const;
};

} // namespace vp
