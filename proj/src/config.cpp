#include "visprior/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "visprior/sha256.hpp"

namespace vp {

namespace {
std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}
} // namespace

KVConfig KVConfig::parse(const std::string& text) {
    KVConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            VP_CHECK(t.back() == ']', "config: unterminated section at line " + std::to_string(lineno));
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        auto eq = t.find('=');
        VP_CHECK(eq != std::string::npos, "config: expected key=value at line " + std::to_string(lineno));
        cfg.set(section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

KVConfig KVConfig::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

const KVConfig::Entry* KVConfig::find(const std::string& section, const std::string& key) const {
    for (const auto& e : entries_)
        if (e.section == section && e.key == key) return &e;
    return nullptr;
}

bool KVConfig::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

std::string KVConfig::get(const std::string& section, const std::string& key,
                          const std::string& fallback) const {
    const Entry* e = find(section, key);
    return e ? e->value : fallback;
}

std::string KVConfig::require(const std::string& section, const std::string& key) const {
    const Entry* e = find(section, key);
    VP_CHECK(e, "config: missing required key " + (section.empty() ? key : section + "." + key));
    return e->value;
}

int KVConfig::get_int(const std::string& s, const std::string& k, int fb) const {
    const Entry* e = find(s, k);
    return e ? std::stoi(e->value) : fb;
}
int64_t KVConfig::get_i64(const std::string& s, const std::string& k, int64_t fb) const {
    const Entry* e = find(s, k);
    return e ? std::stoll(e->value) : fb;
}
uint64_t KVConfig::get_u64(const std::string& s, const std::string& k, uint64_t fb) const {
    const Entry* e = find(s, k);
    return e ? std::stoull(e->value) : fb;
}
float KVConfig::get_float(const std::string& s, const std::string& k, float fb) const {
    const Entry* e = find(s, k);
    return e ? std::stof(e->value) : fb;
}
bool KVConfig::get_bool(const std::string& s, const std::string& k, bool fb) const {
    const Entry* e = find(s, k);
    if (!e) return fb;
    VP_CHECK(e->value == "true" || e->value == "false" || e->value == "0" || e->value == "1",
             "config: boolean expected for " + k);
    return e->value == "true" || e->value == "1";
}

void KVConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    for (auto& e : entries_)
        if (e.section == section && e.key == key) {
            e.value = value;
            return;
        }
    entries_.push_back({section, key, value});
}

std::string KVConfig::canonical_text() const {
    // stable rendering: entries grouped by first appearance of their section
    std::ostringstream os;
    std::vector<std::string> sections;
    for (const auto& e : entries_)
        if (std::find(sections.begin(), sections.end(), e.section) == sections.end())
            sections.push_back(e.section);
    for (const auto& s : sections) {
        if (!s.empty()) os << "[" << s << "]\n";
        for (const auto& e : entries_)
            if (e.section == s) os << e.key << " = " << e.value << "\n";
    }
    return os.str();
}

std::string KVConfig::hash() const { return sha256_hex(canonical_text()); }

void KVConfig::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "config: cannot write " + path);
    f << canonical_text();
}

} // namespace vp
