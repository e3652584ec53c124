#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "kvq/error.hpp"
#include "kvq/tensor.hpp"

namespace kvq {
namespace {

constexpr std::array<char, 4> kMagic = {'K', 'V', 'Q', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}

  std::uint64_t take(int bytes, const char* what) {
    if (buf_.size() - pos_ < static_cast<std::size_t>(bytes))
      fail(ErrorKind::kTruncated, std::string("KVQT: truncated while reading ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += bytes;
    return v;
  }

  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

Tensor::Tensor(std::vector<std::uint64_t> s, std::vector<float> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (element_count(shape) != data.size())
    fail(ErrorKind::kShapeMismatch, "Tensor: data length does not match shape");
}

Tensor Tensor::zeros(std::vector<std::uint64_t> s) {
  const auto n = element_count(s);
  return Tensor(std::move(s), std::vector<float>(n, 0.0f));
}

std::span<float> Tensor::row(std::size_t r) {
  const std::size_t cols = dim(1);
  return std::span<float>(data).subspan(r * cols, cols);
}

std::span<const float> Tensor::row(std::size_t r) const {
  const std::size_t cols = dim(1);
  return std::span<const float>(data).subspan(r * cols, cols);
}

std::uint64_t element_count(std::span<const std::uint64_t> shape) {
  std::uint64_t n = 1;
  for (auto d : shape) {
    if (d != 0 && n > UINT64_MAX / d) fail(ErrorKind::kMalformed, "tensor shape overflows 64 bits");
    n *= d;
  }
  return n;
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::kIo, "read failed for " + path.string());

  if (buf.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), buf.begin()))
    fail(ErrorKind::kBadMagic, "not a KVQT file: " + path.string());
  Reader r(buf);
  r.take(4, "magic");
  const auto version = static_cast<std::uint32_t>(r.take(4, "version"));
  if (version != kKvqtVersion)
    fail(ErrorKind::kVersionMismatch, "KVQT version " + std::to_string(version) + " unsupported");
  const auto dtype = static_cast<std::uint32_t>(r.take(4, "dtype"));
  if (dtype != kKvqtDtypeF32)
    fail(ErrorKind::kUnsupportedDtype, "KVQT dtype " + std::to_string(dtype) + " unsupported");
  const auto ndim = static_cast<std::uint32_t>(r.take(4, "ndim"));

  std::vector<std::uint64_t> shape(ndim);
  for (auto& d : shape) d = r.take(8, "dims");
  const std::uint64_t n = element_count(shape);
  if (n > r.remaining() / 4) fail(ErrorKind::kTruncated, "KVQT payload truncated: " + path.string());
  if (r.remaining() != n * 4) fail(ErrorKind::kMalformed, "KVQT trailing bytes: " + path.string());

  std::vector<float> data(n);
  for (auto& v : data) {
    v = std::bit_cast<float>(static_cast<std::uint32_t>(r.take(4, "payload")));
    if (!std::isfinite(v)) fail(ErrorKind::kNonFinite, "KVQT payload has non-finite value: " + path.string());
  }
  return Tensor(std::move(shape), std::move(data));
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  if (element_count(t.shape) != t.data.size())
    fail(ErrorKind::kShapeMismatch, "write_tensor: data length does not match shape");
  std::string out;
  out.reserve(16 + 8 * t.shape.size() + 4 * t.data.size());
  out.append(kMagic.data(), kMagic.size());
  put_u32(out, kKvqtVersion);
  put_u32(out, kKvqtDtypeF32);
  put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) put_u64(out, d);
  for (float v : t.data) put_u32(out, std::bit_cast<std::uint32_t>(v));

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::kIo, "cannot open for writing: " + path.string());
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) fail(ErrorKind::kIo, "write failed: " + path.string());
}

void CalibrationSet::validate() const {
  require(!keys.empty(), ErrorKind::kInvalidArgument, "calibration set has no samples");
  require(keys.size() == values.size(), ErrorKind::kShapeMismatch, "key/value sample counts differ");
  const std::size_t channels = keys.front().rank() == 2 ? keys.front().dim(1) : 0;
  for (std::size_t s = 0; s < keys.size(); ++s) {
    require(keys[s].rank() == 2 && values[s].rank() == 2, ErrorKind::kShapeMismatch,
            "calibration activations must be [tokens, channels]");
    require(keys[s].shape == values[s].shape, ErrorKind::kShapeMismatch, "key/value shapes differ");
    require(keys[s].dim(1) == channels, ErrorKind::kShapeMismatch, "channel count differs across samples");
  }
  if (!grads_keys.empty() || !grads_values.empty()) {
    require(grads_keys.size() == keys.size() && grads_values.size() == values.size(),
            ErrorKind::kShapeMismatch, "gradient sample count differs from activations");
    for (std::size_t s = 0; s < keys.size(); ++s) {
      require(grads_keys[s].shape == keys[s].shape && grads_values[s].shape == values[s].shape,
              ErrorKind::kShapeMismatch, "gradient shape differs from activation shape");
    }
  }
}

}  // namespace kvq
