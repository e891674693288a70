#include "lslm/vocab.hpp"

#include "lslm/errors.hpp"

namespace lslm::vocab {

std::vector<int> encode_context(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) {
    if (c < 'a' || c > 'z') {
      throw InputError(std::string("unsupported context character '") + c + "' (expected a-z)");
    }
    ids.push_back(c - 'a');
  }
  return ids;
}

std::string decode_context(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= kContextChars) throw InputError("context id " + std::to_string(id) + " is not a character");
    out.push_back(static_cast<char>('a' + id));
  }
  return out;
}

const char* token_name(int token) {
  switch (token) {
    case kBos: return "BOS";
    case kEos: return "EOS";
    case kIrq: return "IRQ";
    case kSpad: return "SPAD";
    default: return is_audio(token) ? "audio" : "invalid";
  }
}

}  // namespace lslm::vocab
