/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/serialize.hpp"

#include <algorithm>
#include <cstring>

#include "wakerom/error.hpp"

namespace wakerom {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError(prefix + ": expected an object");
  for (const auto& item : j.items()) {
    const bool ok = std::any_of(known.begin(), known.end(), [&](const char* k) { return item.key() == k; });
    if (!ok) throw ConfigError(prefix + "." + item.key() + ": unknown key");
  }
}

namespace synthflow {

#define WAKEROM_FLOW_FIELDS(X) \
  X(xi) X(xi_c) X(alpha) X(omega0) X(omega1) X(kappa) X(x0) X(sigma_x) X(sigma_y) X(nx) X(ny) X(lx) X(ly) X(dt) \
  X(steps) X(r0)

void to_json(nlohmann::json& j, const FlowConfig& c) {
  j = nlohmann::json::object();
#define X(f) j[#f] = c.f;
  WAKEROM_FLOW_FIELDS(X)
#undef X
}

void from_json(const nlohmann::json& j, FlowConfig& c) {
#define X(f) #f,
  reject_unknown_keys(j, {WAKEROM_FLOW_FIELDS(X)}, "flow");
#undef X
#define X(f) read_field(j, #f, c.f, "flow");
  WAKEROM_FLOW_FIELDS(X)
#undef X
}

}  // namespace synthflow

namespace rom {

#define WAKEROM_ROM_FIELDS(X)                                                                                    \
  X(state_dim) X(latent) X(encoder_hidden) X(decoder_hidden) X(d_model) X(blocks) X(heads) X(ff_hidden) X(xi_tokens) \
  X(lookback) X(horizon) X(beta_kl) X(gamma_roll) X(learning_rate) X(final_lr_fraction) X(epochs) X(batch) X(xi_center) X(xi_scale)

void to_json(nlohmann::json& j, const RomHyper& h) {
  j = nlohmann::json::object();
#define X(f) j[#f] = h.f;
  WAKEROM_ROM_FIELDS(X)
#undef X
}

void from_json(const nlohmann::json& j, RomHyper& h) {
#define X(f) #f,
  reject_unknown_keys(j, {WAKEROM_ROM_FIELDS(X)}, "rom");
#undef X
#define X(f) read_field(j, #f, h.f, "rom");
  WAKEROM_ROM_FIELDS(X)
#undef X
}

}  // namespace rom
}  // namespace wakerom
