#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tplens/model.hpp"

namespace tplens::testing {

inline Model toy_model(std::size_t d = 32, std::size_t layers = 2,
                       std::size_t heads = 4, std::uint64_t seed = 1,
                       std::size_t vocab = 258) {
  ModelConfig c;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_ff = default_ff_width(d);
  c.vocab_size = vocab;
  c.max_seq = 256;
  return init_random(c, seed);
}

inline std::vector<TokenId> random_prompt(std::mt19937_64& rng, std::size_t n,
                                          std::size_t vocab = 256) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(vocab) - 1);
  std::vector<TokenId> p{256};
  for (std::size_t i = 1; i < n; ++i) p.push_back(pick(rng));
  return p;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("tplens_test_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const {
    return path / name;
  }
};

}  // namespace tplens::testing
