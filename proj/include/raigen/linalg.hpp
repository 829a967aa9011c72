#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "raigen/data_io.hpp"
#include "raigen/error.hpp"

namespace raigen {

// Sample-major data: one row per sample.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline TensorFile to_tensor(const Matrix& m) {
  TensorFile t;
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[i] = static_cast<float>(m.data()[i]);
  return t;
}

inline TensorFile to_tensor(const Vector& v) {
  TensorFile t;
  t.shape = {static_cast<std::uint64_t>(v.size())};
  t.data.resize(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
  return t;
}

/// Views a tensor as rows = leading dim, cols = product of the remaining dims.
inline Matrix to_matrix(const TensorFile& t) {
  require(t.rank() >= 1, ErrorKind::Shape, "tensor has no dims");
  Eigen::Index rows = static_cast<Eigen::Index>(t.shape[0]);
  Eigen::Index cols = rows == 0 ? 0 : static_cast<Eigen::Index>(t.element_count() / t.shape[0]);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = t.data[i];
  return m;
}

inline Vector to_vector(const TensorFile& t) {
  Vector v(static_cast<Eigen::Index>(t.data.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = t.data[i];
  return v;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline double cosine_similarity(const Vector& a, const Vector& b) {
  double na = a.norm();
  double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace raigen
