#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tplens/model.hpp"

namespace tplens {

// Byte-level vocabulary: ids 0..255 are raw bytes, then BOS and EOS.
inline constexpr TokenId kBosToken = 256;
inline constexpr TokenId kEosToken = 257;
inline constexpr std::size_t kByteVocabSize = 258;

/// "ab" -> [BOS, 97, 98]. Requires vocab_size >= 258.
std::vector<TokenId> encode_bytes(std::string_view text,
                                  std::size_t vocab_size = kByteVocabSize);
/// Inverse of encode_bytes; BOS/EOS and ids above the byte range are dropped.
std::string decode_bytes(std::span<const TokenId> ids,
                         std::size_t vocab_size = kByteVocabSize);

// Display text for one token. Printable ASCII is emitted as-is; every other
// byte becomes the six-character escape \u00XX; specials are <bos>/<eos>.
std::string token_text(TokenId id, std::size_t vocab_size = kByteVocabSize);

// Parses "12,7,300" into ids, range-checked against vocab_size.
std::vector<TokenId> parse_token_list(std::string_view list,
                                      std::size_t vocab_size);

}  // namespace tplens
