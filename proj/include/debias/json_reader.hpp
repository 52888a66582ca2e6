#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "debias/errors.hpp"

namespace debias {

// Reads fields from a JSON object with type checks; error messages carry the
// dotted field path.
class StrictReader {
public:
    StrictReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw validation_error(where() + " must be an object");
    }

    // Rejects keys that were never asked about.
    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw validation_error("unknown key '" + field(k) + "'");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    const nlohmann::json& at(const std::string& key) { return j_.at(key); }
    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    template <class T>
    void read(const std::string& key, T& out) {
        if (!has(key)) return;
        out = get<T>(key, j_.at(key));
    }

    void read_count(const std::string& key, std::size_t& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number_unsigned()) throw validation_error(field(key) + " must be a non-negative integer");
        out = v.get<std::size_t>();
    }

    void read_u64(const std::string& key, std::uint64_t& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number_unsigned()) throw validation_error(field(key) + " must be a non-negative integer");
        out = v.get<std::uint64_t>();
    }

    void read_optional_count(const std::string& key, std::optional<std::size_t>& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (v.is_null()) {
            out.reset();
            return;
        }
        if (!v.is_number_unsigned()) throw validation_error(field(key) + " must be null or a non-negative integer");
        out = v.get<std::size_t>();
    }

    void read_optional_real(const std::string& key, std::optional<double>& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (v.is_null()) {
            out.reset();
            return;
        }
        if (!v.is_number()) throw validation_error(field(key) + " must be null or a number");
        out = v.get<double>();
    }

    template <class E, class F>
    void read_enum(const std::string& key, E& out, F parse) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_string()) throw validation_error(field(key) + " must be a string");
        try {
            out = parse(v.get<std::string>());
        } catch (const validation_error& e) {
            throw validation_error(field(key) + ": " + e.what());
        }
    }

private:
    template <class T>
    T get(const std::string& key, const nlohmann::json& v) const {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw validation_error(field(key) + " must be a boolean");
        } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) throw validation_error(field(key) + " must be a number");
        } else if constexpr (std::is_same_v<T, int>) {
            if (!v.is_number_integer()) throw validation_error(field(key) + " must be an integer");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw validation_error(field(key) + " must be a string");
        }
        try {
            return v.get<T>();
        } catch (const nlohmann::json::exception&) {
            throw validation_error(field(key) + " has the wrong type");
        }
    }

    std::string where() const { return path_.empty() ? "config" : path_; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};


}  // namespace debias
