#include "tplens/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>

namespace tplens {

void write_f32_le(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      char b[4];
      for (int i = 0; i < 4; ++i) b[i] = static_cast<char>(bits >> (8 * i));
      os.write(b, 4);
    }
  }
}

void read_f32_le(const char* src, std::span<float> out) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), src, out.size() * sizeof(float));
  } else {
    const auto* p = reinterpret_cast<const unsigned char*>(src);
    for (std::size_t i = 0; i < out.size(); ++i, p += 4) {
      const std::uint32_t bits = p[0] | (p[1] << 8) | (p[2] << 16) |
                                 (static_cast<std::uint32_t>(p[3]) << 24);
      out[i] = std::bit_cast<float>(bits);
    }
  }
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},       {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
          {"rope_theta", c.rope_theta}, {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j, const std::string& path) {
  require(j.is_object(), ErrorKind::kSchema,
          "schema error at " + path + ": expected object");
  ModelConfig c;
  c.d_model = field_as<std::size_t>(j, "d_model", path);
  c.n_layers = field_as<std::size_t>(j, "n_layers", path);
  c.n_heads = field_as<std::size_t>(j, "n_heads", path);
  c.d_ff = field_as<std::size_t>(j, "d_ff", path);
  c.vocab_size = field_as<std::size_t>(j, "vocab_size", path);
  c.max_seq = field_as<std::size_t>(j, "max_seq", path);
  c.rope_theta = field_as<float>(j, "rope_theta", path);
  c.norm_eps = field_as<float>(j, "norm_eps", path);
  return c;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(bool(is), ErrorKind::kIo, "cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kSchema,
         "'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(bool(os), ErrorKind::kIo,
          "cannot open '" + path.string() + "' for writing");
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.flush();
  require(bool(os), ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

const nlohmann::json& require_field(const nlohmann::json& obj,
                                    std::string_view key,
                                    const std::string& path) {
  const std::string where = path.empty() ? "/" : path;
  require(obj.is_object(), ErrorKind::kSchema,
          "schema error at " + where + ": expected object");
  auto it = obj.find(std::string(key));
  require(it != obj.end(), ErrorKind::kSchema,
          "schema error at " + path + "/" + std::string(key) +
              ": missing required field");
  return *it;
}

const nlohmann::json& require_array(const nlohmann::json& obj,
                                    std::string_view key,
                                    const std::string& path) {
  const auto& v = require_field(obj, key, path);
  require(v.is_array(), ErrorKind::kSchema,
          "schema error at " + path + "/" + std::string(key) +
              ": expected array");
  return v;
}

}  // namespace tplens
