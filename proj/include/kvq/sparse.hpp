#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace kvq {

// How a vector's outlier budget is spent. kTwoSided takes the ceil(n/2)
// largest and floor(n/2) smallest values; kMagnitude takes the n largest |v|.
enum class OutlierRule { kTwoSided, kMagnitude };

struct OutlierSplit {
  std::vector<std::uint32_t> outlier_indices;  // ascending
  float lo = 0.0f;                             // min over kept elements
  float hi = 0.0f;                             // max over kept elements
};

// round(f * d), half up.
std::size_t outlier_count(double fraction, std::size_t d);

OutlierSplit vector_outlier_split(std::span<const float> v, double fraction,
                                  OutlierRule rule = OutlierRule::kTwoSided);

// Residuals are kept in double: original - dense is exact there, which a
// single f32 cannot always represent.
struct SparseEntry {
  std::uint32_t index = 0;
  double value = 0.0;
  bool operator==(const SparseEntry&) const = default;
};

// Compressed storage whose major axis is the token axis, so appending a
// token only touches array tails. SparseCSC (Keys: one column per token,
// rows are channels) and SparseCSR (Values: one row per token, columns are
// channels) share this layout and differ only in naming.
class TokenMajorSparse {
 public:
  TokenMajorSparse() = default;
  explicit TokenMajorSparse(std::size_t channels) : channels_(channels) {}

  // Entries must have strictly ascending channel indices below channels().
  void append_token(std::span<const SparseEntry> entries);

  std::size_t channels() const { return channels_; }
  std::size_t tokens() const { return ptr_.size() - 1; }
  std::size_t nnz() const { return vals_.size(); }

  std::span<const std::uint64_t> ptr() const { return ptr_; }
  std::span<const std::uint32_t> idx() const { return idx_; }
  std::span<const double> vals() const { return vals_; }

  // Rebuilds from raw arrays (snapshot load); validates every invariant.
  static TokenMajorSparse from_arrays(std::size_t channels, std::vector<std::uint64_t> ptr,
                                      std::vector<std::uint32_t> idx, std::vector<double> vals);

  bool operator==(const TokenMajorSparse&) const = default;

 protected:
  std::size_t channels_ = 0;
  std::vector<std::uint64_t> ptr_{0};
  std::vector<std::uint32_t> idx_;
  std::vector<double> vals_;
};

class SparseCSC : public TokenMajorSparse {
 public:
  using TokenMajorSparse::TokenMajorSparse;
  SparseCSC(TokenMajorSparse base) : TokenMajorSparse(std::move(base)) {}
  std::size_t n_rows() const { return channels(); }
  std::size_t n_cols() const { return tokens(); }
  std::span<const std::uint64_t> col_ptr() const { return ptr(); }
  std::span<const std::uint32_t> row_idx() const { return idx(); }
};

class SparseCSR : public TokenMajorSparse {
 public:
  using TokenMajorSparse::TokenMajorSparse;
  SparseCSR(TokenMajorSparse base) : TokenMajorSparse(std::move(base)) {}
  std::size_t n_cols() const { return channels(); }
  std::size_t n_rows() const { return tokens(); }
  std::span<const std::uint64_t> row_ptr() const { return ptr(); }
  std::span<const std::uint32_t> col_idx() const { return idx(); }
};

inline constexpr std::size_t kNnzPerChunk = 10;

// y[t] = sum over column t of vals * x[row]. Nonzeros are processed in
// fixed-size chunks; per-chunk partials are merged in chunk order.
std::vector<float> balanced_spmv_csc(const SparseCSC& s, std::span<const float> x,
                                     std::size_t chunk = kNnzPerChunk);

// out[c] = sum_t w[t] * s[t, c].
std::vector<float> balanced_spmv_csr(const SparseCSR& s, std::span<const float> w,
                                     std::size_t chunk = kNnzPerChunk);

namespace detail {

// Balanced evaluation over a token-major structure. For nonzero (token t,
// channel c, value v) it adds v * operand(t, c) into y[out_index(t, c)].
// Each chunk of `chunk` consecutive nonzeros produces its own partial sums,
// combined into y in chunk order, so the result depends only on the chunk
// size and never on scheduling.
template <class Operand, class OutIndex>
void balanced_accumulate(const TokenMajorSparse& s, Operand&& operand, OutIndex&& out_index,
                         std::span<double> y, std::size_t chunk) {
  const auto ptr = s.ptr();
  const auto idx = s.idx();
  const auto vals = s.vals();
  const std::size_t nnz = vals.size();
  if (nnz == 0) return;
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t n_chunks = (nnz + chunk - 1) / chunk;

  std::vector<std::pair<std::size_t, double>> partial;
  for (std::size_t k = 0; k < n_chunks; ++k) {
    const std::size_t begin = k * chunk;
    const std::size_t end = std::min(nnz, begin + chunk);
    // Token owning nonzero `begin`: last t with ptr[t] <= begin.
    std::size_t t = static_cast<std::size_t>(std::upper_bound(ptr.begin(), ptr.end(), begin) - ptr.begin()) - 1;
    partial.clear();
    for (std::size_t nz = begin; nz < end; ++nz) {
      while (ptr[t + 1] <= nz) ++t;
      const std::size_t c = idx[nz];
      const std::size_t o = out_index(t, c);
      const double contrib = vals[nz] * static_cast<double>(operand(t, c));
      auto it = std::find_if(partial.begin(), partial.end(), [o](const auto& p) { return p.first == o; });
      if (it == partial.end())
        partial.emplace_back(o, contrib);
      else
        it->second += contrib;
    }
    for (const auto& [o, v] : partial) y[o] += v;
  }
}

}  // namespace detail

}  // namespace kvq
