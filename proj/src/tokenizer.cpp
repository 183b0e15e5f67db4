#include "tplens/tokenizer.hpp"

#include <charconv>
#include <cstdio>

#include "tplens/error.hpp"

namespace tplens {

namespace {

void check_byte_vocab(std::size_t vocab_size) {
  require(vocab_size >= kByteVocabSize, ErrorKind::kInvalidArgument,
          "byte tokenizer needs vocab_size >= 258, model has " +
              std::to_string(vocab_size));
}

}  // namespace

std::vector<TokenId> encode_bytes(std::string_view text,
                                  std::size_t vocab_size) {
  check_byte_vocab(vocab_size);
  std::vector<TokenId> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(kBosToken);
  for (unsigned char ch : text) ids.push_back(static_cast<TokenId>(ch));
  return ids;
}

std::string decode_bytes(std::span<const TokenId> ids, std::size_t vocab_size) {
  check_byte_vocab(vocab_size);
  std::string out;
  for (TokenId id : ids) {
    require(id >= 0 && static_cast<std::size_t>(id) < vocab_size,
            ErrorKind::kInvalidArgument,
            "token id " + std::to_string(id) + " outside vocabulary");
    if (id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

std::string token_text(TokenId id, std::size_t vocab_size) {
  require(id >= 0 && static_cast<std::size_t>(id) < vocab_size,
          ErrorKind::kInvalidArgument,
          "token id " + std::to_string(id) + " outside vocabulary");
  if (id == kBosToken) return "<bos>";
  if (id == kEosToken) return "<eos>";
  if (id >= 256) return "<" + std::to_string(id) + ">";
  if (id >= 0x20 && id < 0x7f) return std::string(1, static_cast<char>(id));
  char buf[8];
  std::snprintf(buf, sizeof buf, "\\u%04X", static_cast<unsigned>(id));
  return buf;
}

std::vector<TokenId> parse_token_list(std::string_view list,
                                      std::size_t vocab_size) {
  std::vector<TokenId> ids;
  std::size_t start = 0;
  while (start < list.size()) {
    std::size_t end = list.find(',', start);
    if (end == std::string_view::npos) end = list.size();
    auto part = list.substr(start, end - start);
    while (!part.empty() && part.front() == ' ') part.remove_prefix(1);
    while (!part.empty() && part.back() == ' ') part.remove_suffix(1);
    TokenId id = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), id);
    require(ec == std::errc() && ptr == part.data() + part.size() && !part.empty(),
            ErrorKind::kInvalidArgument,
            "bad token id '" + std::string(part) + "'");
    require(id >= 0 && static_cast<std::size_t>(id) < vocab_size,
            ErrorKind::kInvalidArgument,
            "token id " + std::to_string(id) + " outside vocabulary");
    ids.push_back(id);
    start = end + 1;
  }
  return ids;
}

}  // namespace tplens
