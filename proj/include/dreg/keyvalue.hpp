#pragma once

// Flat key=value text used by config files and side-car headers. Blank lines
// and lines starting with '#' are ignored; whitespace around keys and values
// is trimmed. Every failure is a FormatError(syntax) naming the source.

#include <cstdint>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dreg {

class KeyValues {
public:
    static KeyValues parse(const std::string& text, std::string source);

    bool has(const std::string& key) const { return values_.contains(key); }
    const std::map<std::string, std::string>& entries() const noexcept { return values_; }

    // A missing key returns the fallback, or throws when there is none.
    std::string text(const std::string& key, std::optional<std::string> fallback = std::nullopt) const;
    double number(const std::string& key, std::optional<double> fallback = std::nullopt) const;
    std::int64_t integer(const std::string& key, std::optional<std::int64_t> fallback = std::nullopt) const;
    bool boolean(const std::string& key, std::optional<bool> fallback = std::nullopt) const;
    // Comma-separated integers.
    std::vector<std::int64_t> integers(const std::string& key) const;

    void reject_unknown(std::initializer_list<std::string_view> allowed) const;

private:
    [[noreturn]] void fail(const std::string& what) const;
    const std::string* find(const std::string& key) const;

    std::string source_;
    std::map<std::string, std::string> values_;
};

} // namespace dreg
