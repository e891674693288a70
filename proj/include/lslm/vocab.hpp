#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace lslm::vocab {

// Speaking vocabulary: audio tokens 0..63 followed by four specials.
inline constexpr int kAudioTokens = 64;
inline constexpr int kBos = 64;
inline constexpr int kEos = 65;
inline constexpr int kIrq = 66;
inline constexpr int kSpad = 67;
inline constexpr int kSpeakSize = 68;

// Context vocabulary: 'a'..'z' then three specials.
inline constexpr int kContextChars = 26;
inline constexpr int kBoc = 26;
inline constexpr int kEoc = 27;
inline constexpr int kCpad = 28;
inline constexpr int kContextSize = 29;

// The backbone embeds both vocabularies from one table; context ids are
// shifted past the speaking vocabulary.
inline constexpr int kContextOffset = kSpeakSize;
inline constexpr int kInputSize = kSpeakSize + kContextSize;

// Listening alphabet.
inline constexpr int kSil = 0;
inline constexpr int kSteadyFirst = 1;
inline constexpr int kSteadyLast = 4;
inline constexpr int kBurstFirst = 5;
inline constexpr int kBurstLast = 8;
inline constexpr int kCommandFirst = 9;
inline constexpr int kCommandLast = 40;
inline constexpr int kListenSize = 41;
inline constexpr int kCommandSymbols = kCommandLast - kCommandFirst + 1;

inline constexpr int kVersion = 1;

inline bool is_audio(int token) { return token >= 0 && token < kAudioTokens; }
inline bool is_terminal(int token) { return token == kEos || token == kIrq; }
inline bool is_noise(int symbol) { return symbol >= kSteadyFirst && symbol <= kBurstLast; }
inline bool is_command(int symbol) { return symbol >= kCommandFirst && symbol <= kCommandLast; }

// 'a'..'z' -> 0..25; throws InputError on anything else.
std::vector<int> encode_context(std::string_view text);
std::string decode_context(const std::vector<int>& ids);

const char* token_name(int token);

}  // namespace lslm::vocab
