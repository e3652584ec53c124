#include "kvq/sparse.hpp"

#include <cmath>
#include <numeric>

#include "kvq/error.hpp"

namespace kvq {

std::size_t outlier_count(double fraction, std::size_t d) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(d) + 0.5));
}

OutlierSplit vector_outlier_split(std::span<const float> v, double fraction, OutlierRule rule) {
  require(!v.empty(), ErrorKind::kInvalidArgument, "outlier split: empty vector");
  require(fraction >= 0.0 && fraction < 0.5, ErrorKind::kInvalidArgument,
          "outlier split: fraction must be in [0, 0.5)");
  const std::size_t d = v.size();
  const std::size_t n_out = outlier_count(fraction, d);
  require(n_out < d, ErrorKind::kInvalidArgument, "outlier split: budget leaves no kept elements");

  std::vector<char> is_outlier(d, 0);
  if (n_out > 0) {
    std::vector<std::uint32_t> order(d);
    std::iota(order.begin(), order.end(), 0u);
    if (rule == OutlierRule::kTwoSided) {
      const std::size_t n_upper = (n_out + 1) / 2;
      const std::size_t n_lower = n_out / 2;
      auto desc = [&](std::uint32_t a, std::uint32_t b) { return v[a] != v[b] ? v[a] > v[b] : a < b; };
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_upper), order.end(), desc);
      for (std::size_t i = 0; i < n_upper; ++i) is_outlier[order[i]] = 1;
      auto asc = [&](std::uint32_t a, std::uint32_t b) { return v[a] != v[b] ? v[a] < v[b] : a < b; };
      // Upper picks are excluded by moving them to the back before selecting.
      auto mid = std::stable_partition(order.begin(), order.end(), [&](std::uint32_t i) { return !is_outlier[i]; });
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_lower), mid, asc);
      for (std::size_t i = 0; i < n_lower; ++i) is_outlier[order[i]] = 1;
    } else {
      auto by_mag = [&](std::uint32_t a, std::uint32_t b) {
        const float ma = std::abs(v[a]), mb = std::abs(v[b]);
        return ma != mb ? ma > mb : a < b;
      };
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_out), order.end(), by_mag);
      for (std::size_t i = 0; i < n_out; ++i) is_outlier[order[i]] = 1;
    }
  }

  OutlierSplit split;
  bool first = true;
  for (std::size_t i = 0; i < d; ++i) {
    if (is_outlier[i]) {
      split.outlier_indices.push_back(static_cast<std::uint32_t>(i));
    } else if (first) {
      split.lo = split.hi = v[i];
      first = false;
    } else {
      split.lo = std::min(split.lo, v[i]);
      split.hi = std::max(split.hi, v[i]);
    }
  }
  return split;
}

void TokenMajorSparse::append_token(std::span<const SparseEntry> entries) {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    require(entries[i].index < channels_, ErrorKind::kOutOfRange, "sparse append: channel out of range");
    require(i == 0 || entries[i - 1].index < entries[i].index, ErrorKind::kInvalidArgument,
            "sparse append: channels must be strictly ascending");
  }
  for (const auto& e : entries) {
    idx_.push_back(e.index);
    vals_.push_back(e.value);
  }
  ptr_.push_back(vals_.size());
}

TokenMajorSparse TokenMajorSparse::from_arrays(std::size_t channels, std::vector<std::uint64_t> ptr,
                                               std::vector<std::uint32_t> idx, std::vector<double> vals) {
  require(!ptr.empty() && ptr.front() == 0, ErrorKind::kMalformed, "sparse: pointer array must start at 0");
  require(std::is_sorted(ptr.begin(), ptr.end()), ErrorKind::kMalformed, "sparse: pointers must be nondecreasing");
  require(ptr.back() == vals.size() && idx.size() == vals.size(), ErrorKind::kMalformed,
          "sparse: pointer tail must equal nnz");
  TokenMajorSparse s(channels);
  for (std::size_t t = 0; t + 1 < ptr.size(); ++t) {
    std::vector<SparseEntry> row;
    for (auto nz = ptr[t]; nz < ptr[t + 1]; ++nz) row.push_back({idx[nz], vals[nz]});
    s.append_token(row);
  }
  return s;
}

std::vector<float> balanced_spmv_csc(const SparseCSC& s, std::span<const float> x, std::size_t chunk) {
  require(x.size() == s.n_rows(), ErrorKind::kShapeMismatch, "spmv_csc: operand length != rows");
  std::vector<double> y(s.n_cols(), 0.0);
  detail::balanced_accumulate(
      s, [&](std::size_t, std::size_t c) { return x[c]; }, [](std::size_t t, std::size_t) { return t; }, y,
      chunk);
  return std::vector<float>(y.begin(), y.end());
}

std::vector<float> balanced_spmv_csr(const SparseCSR& s, std::span<const float> w, std::size_t chunk) {
  require(w.size() == s.n_rows(), ErrorKind::kShapeMismatch, "spmv_csr: weight length != token count");
  std::vector<double> out(s.n_cols(), 0.0);
  detail::balanced_accumulate(
      s, [&](std::size_t t, std::size_t) { return w[t]; }, [](std::size_t, std::size_t c) { return c; }, out,
      chunk);
  return std::vector<float>(out.begin(), out.end());
}

}  // namespace kvq
