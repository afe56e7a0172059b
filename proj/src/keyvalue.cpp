#include "dreg/keyvalue.hpp"

#include "dreg/error.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace dreg {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

} // namespace

KeyValues KeyValues::parse(const std::string& text, std::string source) {
    KeyValues kv;
    kv.source_ = std::move(source);
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) kv.fail("line " + std::to_string(lineno) + ": expected key=value");
        std::string key = trim(std::string_view(t).substr(0, eq));
        if (key.empty()) kv.fail("line " + std::to_string(lineno) + ": empty key");
        if (!kv.values_.emplace(key, trim(std::string_view(t).substr(eq + 1))).second) {
            kv.fail("duplicate key " + key);
        }
    }
    return kv;
}

void KeyValues::fail(const std::string& what) const { throw FormatError(FormatError::Kind::syntax, source_ + ": " + what); }

const std::string* KeyValues::find(const std::string& key) const {
    const auto it = values_.find(key);
    return it == values_.end() ? nullptr : &it->second;
}

std::string KeyValues::text(const std::string& key, std::optional<std::string> fallback) const {
    if (const auto* v = find(key)) return *v;
    if (fallback) return *fallback;
    fail("missing key " + key);
}

double KeyValues::number(const std::string& key, std::optional<double> fallback) const {
    const auto* v = find(key);
    if (!v) {
        if (fallback) return *fallback;
        fail("missing key " + key);
    }
    try {
        std::size_t used = 0;
        const double x = std::stod(*v, &used);
        if (used == v->size()) return x;
    } catch (const std::exception&) {
    }
    fail("bad number for " + key + ": " + *v);
}

std::int64_t KeyValues::integer(const std::string& key, std::optional<std::int64_t> fallback) const {
    const auto* v = find(key);
    if (!v) {
        if (fallback) return *fallback;
        fail("missing key " + key);
    }
    std::int64_t x = 0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), x);
    if (ec != std::errc{} || ptr != v->data() + v->size()) fail("bad integer for " + key + ": " + *v);
    return x;
}

bool KeyValues::boolean(const std::string& key, std::optional<bool> fallback) const {
    const auto* v = find(key);
    if (!v) {
        if (fallback) return *fallback;
        fail("missing key " + key);
    }
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    fail("bad boolean for " + key + ": " + *v);
}

std::vector<std::int64_t> KeyValues::integers(const std::string& key) const {
    const auto* v = find(key);
    if (!v) fail("missing key " + key);
    std::vector<std::int64_t> out;
    std::string_view rest = *v;
    while (true) {
        const auto comma = rest.find(',');
        const std::string item = trim(rest.substr(0, comma));
        std::int64_t x = 0;
        const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
        if (item.empty() || ec != std::errc{} || ptr != item.data() + item.size()) {
            fail("bad integer list for " + key + ": " + *v);
        }
        out.push_back(x);
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
    }
    return out;
}

void KeyValues::reject_unknown(std::initializer_list<std::string_view> allowed) const {
    for (const auto& [key, value] : values_) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) fail("unknown key " + key);
    }
}

} // namespace dreg
