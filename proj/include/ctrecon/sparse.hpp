#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctrecon {

// Compressed-sparse-row matrix. Rows are built independently; once built the
// matrix is immutable and freely shared.
struct SystemMatrix {
  int64_t n_rows = 0;
  int64_t n_cols = 0;
  std::vector<uint64_t> row_offsets;  // length n_rows + 1
  std::vector<uint32_t> col_indices;
  std::vector<double> weights;
  uint64_t fingerprint = 0;  // hash of the geometry that produced the matrix

  int64_t nnz() const { return static_cast<int64_t>(weights.size()); }

  // y = M x  (or Mᵀ x when transposed); y must be pre-sized and zeroed by the
  // caller or freshly allocated here.
  std::vector<double> apply(const std::vector<double>& x, bool transposed = false) const {
    if (!transposed) {
      if (static_cast<int64_t>(x.size()) != n_cols)
        throw std::invalid_argument("SystemMatrix::apply: x has length " + std::to_string(x.size()) +
                                    ", expected " + std::to_string(n_cols) + " columns");
      std::vector<double> y(n_rows, 0.0);
      for (int64_t r = 0; r < n_rows; ++r) {
        double acc = 0.0;
        for (uint64_t k = row_offsets[r]; k < row_offsets[r + 1]; ++k)
          acc += weights[k] * x[col_indices[k]];
        y[r] = acc;
      }
      return y;
    }
    if (static_cast<int64_t>(x.size()) != n_rows)
      throw std::invalid_argument("SystemMatrix::apply(transposed): x has length " +
                                  std::to_string(x.size()) + ", expected " +
                                  std::to_string(n_rows) + " rows");
    std::vector<double> y(n_cols, 0.0);
    for (int64_t r = 0; r < n_rows; ++r) {
      const double xr = x[r];
      if (xr == 0.0) continue;
      for (uint64_t k = row_offsets[r]; k < row_offsets[r + 1]; ++k)
        y[col_indices[k]] += weights[k] * xr;
    }
    return y;
  }
};

}  // namespace ctrecon
