#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace kvq {

// Low-bit codes in a little-endian bit stream of 32-bit words: code j owns
// bits [j*bits, (j+1)*bits), bit 0 being the LSB of word 0. 3-bit codes
// straddle word boundaries. Pad bits past the last code are zero.
class PackedCodes {
 public:
  PackedCodes() = default;
  explicit PackedCodes(int bits);

  int bits() const { return bits_; }
  std::size_t size() const { return count_; }
  std::span<const std::uint32_t> words() const { return words_; }

  void push_back(std::uint32_t code);
  // Random access without touching neighbouring codes.
  std::uint32_t at(std::size_t j) const;

  static PackedCodes from_words(int bits, std::size_t count, std::vector<std::uint32_t> words);

  bool operator==(const PackedCodes&) const = default;

 private:
  int bits_ = 0;
  std::size_t count_ = 0;
  std::vector<std::uint32_t> words_;
};

inline std::size_t packed_word_count(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 31) / 32;
}

PackedCodes pack(std::span<const std::uint32_t> codes, int bits);
std::vector<std::uint32_t> unpack(const PackedCodes& p);

}  // namespace kvq
