#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "pulsegate/error.hpp"

namespace pulsegate {

/// Non-owning strided view of a row-major block.
template <typename T>
struct MatrixView {
  T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;  // elements between consecutive rows

  T& operator()(std::size_t r, std::size_t c) const { return data[r * stride + c]; }
  operator MatrixView<const T>() const { return {data, rows, cols, stride}; }
};

/// Dense row-major matrix with value semantics.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0}) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw Error(ErrorKind::ShapeMismatch, "ragged initializer");
      std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  MatrixView<T> view() noexcept { return {data_.data(), rows_, cols_, cols_}; }
  MatrixView<const T> view() const noexcept { return {data_.data(), rows_, cols_, cols_}; }
  /// Rows [first, first + count) as a view.
  MatrixView<const T> row_block(std::size_t first, std::size_t count) const noexcept {
    return {data_.data() + first * cols_, count, cols_, cols_};
  }
  MatrixView<T> row_block(std::size_t first, std::size_t count) noexcept {
    return {data_.data() + first * cols_, count, cols_, cols_};
  }
  /// Columns [first, first + count) as a view.
  MatrixView<T> col_block(std::size_t first, std::size_t count) noexcept {
    return {data_.data() + first, rows_, count, cols_};
  }
  MatrixView<const T> col_block(std::size_t first, std::size_t count) const noexcept {
    return {data_.data() + first, rows_, count, cols_};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename To, typename From>
Matrix<To> matrix_cast(const Matrix<From>& m) {
  Matrix<To> out(m.rows(), m.cols());
  std::transform(m.values().begin(), m.values().end(), out.values().begin(), [](From v) { return static_cast<To>(v); });
  return out;
}

inline void require_shape(bool ok, const char* what) {
  if (!ok) throw Error(ErrorKind::ShapeMismatch, what);
}

}  // namespace pulsegate
