#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "dtdsim/errors.hpp"

namespace dtdsim {

/// Throws ConfigError naming the first key of `j` not in `known`.
inline void require_known_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                               std::string_view where) {
    if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown key " + std::string(where) + "." + key);
        }
    }
}

}  // namespace dtdsim
