#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "rapnet/error.hpp"

namespace rapnet::jsonutil {

/// Throws ConfigError naming the first key of `obj` not in `allowed`.
inline void reject_unknown_keys(const nlohmann::json& obj,
                                std::initializer_list<std::string_view> allowed,
                                const std::string& context) {
  if (!obj.is_object()) throw ConfigError(context + ": expected a JSON object");
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (auto a : allowed) known = known || key == a;
    if (!known) throw ConfigError(context + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_if_present(const nlohmann::json& obj, const char* key, T& out,
                     const std::string& context) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(context + "." + key + ": " + e.what());
  }
}

}  // namespace rapnet::jsonutil
