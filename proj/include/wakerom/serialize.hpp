/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

// JSON mappings for configuration structs. Missing keys keep their defaults;
// unknown keys are rejected so typos surface as validation errors.

#include "json.hpp"
#include "wakerom/error.hpp"
#include "wakerom/rom.hpp"
#include "wakerom/synthflow.hpp"

namespace wakerom {

/// Throws ConfigError("<prefix>.<key>: unknown key") for keys outside `known`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& prefix);

/// Copies j[key] into `field` when present; a type mismatch throws
/// ConfigError("<prefix>.<key>: wrong type").
template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& field, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(prefix + "." + key + ": wrong type");
  }
}

namespace synthflow {
void to_json(nlohmann::json& j, const FlowConfig& c);
void from_json(const nlohmann::json& j, FlowConfig& c);
}  // namespace synthflow

namespace rom {
void to_json(nlohmann::json& j, const RomHyper& h);
void from_json(const nlohmann::json& j, RomHyper& h);
}  // namespace rom

}  // namespace wakerom
