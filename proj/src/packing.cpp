#include "kvq/packing.hpp"

#include "kvq/error.hpp"
#include "kvq/nuq.hpp"

namespace kvq {

PackedCodes::PackedCodes(int bits) : bits_(bits) {
  require(valid_bits(bits), ErrorKind::kInvalidArgument, "packing: bits must be 2, 3 or 4");
}

void PackedCodes::push_back(std::uint32_t code) {
  require(code < (1u << bits_), ErrorKind::kOutOfRange, "packing: code does not fit in bit width");
  const std::size_t bit = count_ * static_cast<std::size_t>(bits_);
  const std::size_t word = bit / 32;
  const unsigned off = static_cast<unsigned>(bit % 32);
  if (word >= words_.size()) words_.push_back(0);
  words_[word] |= code << off;
  if (off + static_cast<unsigned>(bits_) > 32) words_.push_back(code >> (32 - off));
  ++count_;
}

std::uint32_t PackedCodes::at(std::size_t j) const {
  require(j < count_, ErrorKind::kOutOfRange, "packing: index out of range");
  const std::size_t bit = j * static_cast<std::size_t>(bits_);
  const std::size_t word = bit / 32;
  const unsigned off = static_cast<unsigned>(bit % 32);
  std::uint32_t v = words_[word] >> off;
  if (off + static_cast<unsigned>(bits_) > 32) v |= words_[word + 1] << (32 - off);
  return v & ((1u << bits_) - 1u);
}

PackedCodes PackedCodes::from_words(int bits, std::size_t count, std::vector<std::uint32_t> words) {
  PackedCodes p(bits);
  require(words.size() == packed_word_count(count, bits), ErrorKind::kMalformed,
          "packing: word count does not match code count");
  const std::size_t used = count * static_cast<std::size_t>(bits);
  if (used % 32 != 0) {
    const std::uint32_t pad_mask = ~((1u << (used % 32)) - 1u);
    require((words.back() & pad_mask) == 0, ErrorKind::kMalformed, "packing: pad bits must be zero");
  }
  p.count_ = count;
  p.words_ = std::move(words);
  return p;
}

PackedCodes pack(std::span<const std::uint32_t> codes, int bits) {
  PackedCodes p(bits);
  for (auto c : codes) p.push_back(c);
  return p;
}

std::vector<std::uint32_t> unpack(const PackedCodes& p) {
  std::vector<std::uint32_t> out(p.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = p.at(j);
  return out;
}

}  // namespace kvq
