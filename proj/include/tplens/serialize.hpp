#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>

#include <json.hpp>

#include "tplens/error.hpp"
#include "tplens/model.hpp"

namespace tplens {

using OrderedJson = nlohmann::ordered_json;

// Raw little-endian f32 I/O independent of host byte order.
void write_f32_le(std::ostream& os, std::span<const float> values);
void read_f32_le(const char* src, std::span<float> out);

nlohmann::ordered_json config_to_json(const ModelConfig& c);
// `path` is the JSON pointer of `j`, used in diagnostics.
ModelConfig config_from_json(const nlohmann::json& j, const std::string& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

// Schema helpers: every failure is ErrorKind::kSchema naming the JSON path.
const nlohmann::json& require_field(const nlohmann::json& obj,
                                    std::string_view key,
                                    const std::string& path);

template <typename T>
T json_as(const nlohmann::json& v, const std::string& path) {
  try {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw std::invalid_argument("string");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw std::invalid_argument("boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw std::invalid_argument("number");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw std::invalid_argument("non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw std::invalid_argument("integer");
    }
    return v.get<T>();
  } catch (const std::exception& e) {
    fail(ErrorKind::kSchema,
         "schema error at " + path + ": expected " + e.what());
  }
}

template <typename T>
T field_as(const nlohmann::json& obj, std::string_view key,
           const std::string& path) {
  return json_as<T>(require_field(obj, key, path),
                    path + "/" + std::string(key));
}

const nlohmann::json& require_array(const nlohmann::json& obj,
                                    std::string_view key,
                                    const std::string& path);

}  // namespace tplens
