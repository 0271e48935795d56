#pragma once

// Small helpers for strict JSON documents: every object is read through an
// ObjectReader, which records the keys it consumed and rejects the rest.
// Errors carry a JSON-pointer-like path ("/protocol/m").

#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "satslab/error.hpp"

namespace satslab::io {

using json = nlohmann::json;

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class V>
  V get(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(where(key) + ": missing required field");
    return convert<V>(key);
  }

  template <class V>
  V get_or(const std::string& key, V fallback) {
    if (!j_.contains(key)) return fallback;
    return convert<V>(key);
  }

  std::vector<std::size_t> get_uint_list(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(where(key) + ": missing required field");
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + ": expected an array of integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_integer() || v[i].get<long long>() < 0) {
        throw ConfigError(where(key) + "/" + std::to_string(i) + ": expected a nonnegative integer");
      }
      out.push_back(v[i].get<std::size_t>());
    }
    return out;
  }

  std::vector<std::size_t> get_uint_list_or(const std::string& key, std::vector<std::size_t> fallback) {
    if (!j_.contains(key)) return fallback;
    return get_uint_list(key);
  }

  /// Reads a nested object; the returned reader must be finish()ed too.
  ObjectReader child(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(where(key) + ": missing required object");
    return ObjectReader(j_.at(key), where(key));
  }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  /// Throws ConfigError naming the first key that was never read.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown field");
    }
  }

  std::string where(const std::string& key = {}) const {
    return key.empty() ? (path_.empty() ? "/" : path_) : path_ + "/" + key;
  }

 private:
  template <class V>
  V convert(const std::string& key) {
    seen_.insert(key);
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
        if constexpr (std::is_unsigned_v<V>) {
          if (v.get<long long>() < 0) throw ConfigError(where(key) + ": expected a nonnegative integer");
        }
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
      }
      return v.get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": invalid JSON: " + e.what());
  }
}

}  // namespace satslab::io
