// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <initializer_list>
#include <set>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>

#include <json.hpp>

#include "ilens/error.hpp"

namespace ilens {

using Json = nlohmann::json;

/// Strict view of one JSON object: every key must be consumed or finish()
/// reports it, and every error names the dotted field path.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string field(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }
  std::string where() const { return path_.empty() ? "<root>" : path_; }
  bool has(std::string_view key) const { return j_.contains(std::string(key)); }

  const Json& raw(std::string_view key) {
    seen_.insert(std::string(key));
    auto it = j_.find(std::string(key));
    if (it == j_.end()) throw ConfigError(field(key) + ": missing required field");
    return *it;
  }

  template <class V>
  V required(std::string_view key) {
    return convert<V>(raw(key), field(key));
  }

  template <class V>
  V optional(std::string_view key, V fallback) {
    if (!has(key)) {
      seen_.insert(std::string(key));
      return fallback;
    }
    return required<V>(key);
  }

  ObjectReader object(std::string_view key) { return ObjectReader(raw(key), field(key)); }

  /// Enum-like string restricted to the given names; returns its index.
  std::size_t choice(std::string_view key, std::initializer_list<std::string_view> names) {
    const auto s = required<std::string>(key);
    std::size_t i = 0;
    for (auto n : names) {
      if (s == n) return i;
      ++i;
    }
    std::string allowed;
    for (auto n : names) allowed += (allowed.empty() ? "" : "|") + std::string(n);
    throw ConfigError(field(key) + ": '" + s + "' is not one of " + allowed);
  }
  std::size_t choice(std::string_view key, std::initializer_list<std::string_view> names, std::size_t fallback) {
    if (!has(key)) {
      seen_.insert(std::string(key));
      return fallback;
    }
    return choice(key, names);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown field");
    }
  }

  template <class V>
  static V convert(const Json& v, const std::string& path) {
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
        if constexpr (std::is_unsigned_v<V>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
            throw ConfigError(path + ": expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError(path + ": expected a number");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw ConfigError(path + ": expected a string");
      }
      return v.get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace ilens
