#pragma once

// Strict JSON object reading shared by the config parsers.

#include <set>
#include <string>

#include "json.hpp"
#include "towerphys/error.hpp"

namespace towerphys::detail {

using nlohmann::json;

inline json parse_object(const std::string& text, const char* what,
                         const std::set<std::string>& keys) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string(what) + ": " + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::invalid_argument, std::string(what) + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!keys.count(key)) {
      fail(ErrorKind::invalid_argument, std::string(what) + ": unknown key '" + key + "'");
    }
  }
  return j;
}

template <class V>
void read_opt(const json& j, const char* key, V& out, const char* what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    fail(ErrorKind::invalid_argument, std::string(what) + ": bad value for '" + key + "'");
  }
}

}  // namespace towerphys::detail
