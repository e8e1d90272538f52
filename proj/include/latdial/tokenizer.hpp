#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace latdial {

// Reserved ids, always the lowest five.
namespace special {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kLatent = 4;
inline constexpr int kCount = 5;
}  // namespace special

// Lowercases ASCII letters, collapses whitespace runs to one space and trims.
// This is the round-trip modulus of encode/decode.
std::string normalize_text(std::string_view text);

// Whitespace tokens of the normalized text (the metric tokenization).
std::vector<std::string> word_tokens(std::string_view text);

// Byte-level BPE vocabulary. Words carry their leading space, so decoding is
// plain concatenation of token bytes.
class Vocab {
  public:
    std::vector<int> encode(std::string_view text) const;
    // Special ids are dropped; any id outside the vocabulary is an IndexError.
    std::string decode(std::span<const int> ids) const;

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(int id) const;
    const std::vector<std::pair<int, int>>& merges() const { return merges_; }
    bool is_special(int id) const { return id >= 0 && id < special::kCount; }

    std::string serialize() const;
    static Vocab parse(std::string_view text);
    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);
    std::string fingerprint() const;

  private:
    friend Vocab train_bpe(std::span<const std::string> corpus, std::size_t target_vocab_size);
    void rebuild_index();
    void encode_word(std::string_view word, std::vector<int>& out) const;

    std::vector<std::string> tokens_;
    std::vector<std::pair<int, int>> merges_;
    std::array<int, 256> byte_id_{};
    // (left, right) -> (rank, merged id)
    std::map<std::pair<int, int>, std::pair<int, int>> merge_index_;
};

// Learns merges on the normalized corpus until the vocabulary reaches
// target_vocab_size or no adjacent pair remains. The base alphabet is the set
// of bytes present in the corpus.
Vocab train_bpe(std::span<const std::string> corpus, std::size_t target_vocab_size);

}  // namespace latdial
