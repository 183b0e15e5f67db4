#include "tplens/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "tplens/error.hpp"
#include "tplens/serialize.hpp"

namespace tplens {

namespace {

using nlohmann::json;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_le(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_weights(const std::filesystem::path& path, const Model& model) {
  model.config.validate();
  json header;
  header["config"] = config_to_json(model.config);
  json tensors = json::array();
  for_each_tensor(model.weights, [&](const std::string& name, const Tensor& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
  });
  header["tensors"] = std::move(tensors);
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(bool(os), ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  os.write(kWeightsMagic.data(), static_cast<std::streamsize>(kWeightsMagic.size()));
  write_u32(os, kWeightsVersion);
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for_each_tensor(model.weights, [&](const std::string&, const Tensor& t) {
    write_f32_le(os, t.data());
  });
  os.flush();
  require(bool(os), ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

Model load_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), ErrorKind::kIo, "cannot open weight file '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(is)),
                          std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t prefix = kWeightsMagic.size() + 4 + 8;

  require(bytes.size() >= prefix, ErrorKind::kFormat,
          "weight file header truncated (" + std::to_string(bytes.size()) + " bytes)");
  require(std::memcmp(p, kWeightsMagic.data(), kWeightsMagic.size()) == 0,
          ErrorKind::kFormat, "bad magic number in '" + path.string() + "'");
  const auto version = static_cast<std::uint32_t>(read_le(p + 8, 4));
  require(version == kWeightsVersion, ErrorKind::kFormat,
          "unsupported weight file version " + std::to_string(version));
  const std::uint64_t header_len = read_le(p + 12, 8);
  require(header_len <= bytes.size() - prefix, ErrorKind::kFormat,
          "weight file header truncated");

  json header;
  try {
    header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(prefix),
                         bytes.begin() + static_cast<std::ptrdiff_t>(prefix + header_len));
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("weight header is not valid JSON: ") + e.what());
  }
  require(header.is_object() && header.contains("config") && header.contains("tensors"),
          ErrorKind::kFormat, "weight header missing config or tensors");

  Model model{config_from_json(header.at("config"), "/config"), {}};
  model.config.validate();
  const auto expected = weight_shape_table(model.config);
  const auto& table = header.at("tensors");
  require(table.is_array() && table.size() == expected.size(), ErrorKind::kFormat,
          "shape table lists " + std::to_string(table.size()) + " tensors, config implies " +
              std::to_string(expected.size()));

  std::size_t offset = prefix + header_len;
  std::size_t total = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& entry = table[i];
    Shape shape;
    std::string name;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
    } catch (const json::exception&) {
      fail(ErrorKind::kFormat, "malformed shape table entry " + std::to_string(i));
    }
    require(name == expected[i].first && shape == expected[i].second, ErrorKind::kFormat,
            "shape table entry " + std::to_string(i) + " (" + name + " " +
                shape_string(shape) + ") inconsistent with config (expected " +
                expected[i].first + " " + shape_string(expected[i].second) + ")");
    total += shape_elements(shape);
  }
  require(bytes.size() - offset == total * 4, ErrorKind::kFormat,
          "weight payload is " + std::to_string(bytes.size() - offset) + " bytes, expected " +
              std::to_string(total * 4));

  model.weights.layers.resize(model.config.n_layers);
  std::size_t i = 0;
  for_each_tensor(model.weights, [&](const std::string&, Tensor& t) {
    const Shape& shape = expected[i++].second;
    t = Tensor(shape);
    read_f32_le(bytes.data() + offset, t.data());
    offset += t.size() * 4;
    check_finite(t.data(), "weights");
  });
  return model;
}

}  // namespace tplens
