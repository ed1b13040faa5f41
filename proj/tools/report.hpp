#pragma once

#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>

namespace dmaplane::cli {

enum class Format { plain, csv };

/// Ordered key/value report; plain renders "key: value", csv "key,value".
class Report {
public:
    explicit Report(Format format) : format_(format) {}

    template <class T>
    void add(const std::string& key, const T& value) {
        rows_.emplace_back(key, fmt::format("{}", value));
    }
    void line(const std::string& text) { rows_.emplace_back(std::string(), text); }

    std::string render() const {
        std::string out;
        for (const auto& [k, v] : rows_) {
            if (k.empty()) {
                out += v + "\n";
            } else if (format_ == Format::csv) {
                out += k + "," + v + "\n";
            } else {
                out += k + ": " + v + "\n";
            }
        }
        return out;
    }

    Format format() const noexcept { return format_; }

private:
    Format format_;
    std::vector<std::pair<std::string, std::string>> rows_;
};

} // namespace dmaplane::cli
