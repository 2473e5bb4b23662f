#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <numbers>

#include <Eigen/Dense>

#include "errors.hpp"

namespace mgrid {

using Phasor = std::complex<double>;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr Phasor j1{0.0, 1.0};

inline bool is_finite(Phasor x) { return std::isfinite(x.real()) && std::isfinite(x.imag()); }

// Power-preserving Clarke transform (sqrt(2/3) scaling).
inline Phasor clarke(double a, double b, double c, double tol = 1e-9) {
  if (std::abs(a + b + c) > tol) throw BalanceViolation("clarke: a+b+c is not zero");
  const double k = std::sqrt(2.0 / 3.0);
  const double s3 = std::sqrt(3.0) / 2.0;
  return {k * (a - 0.5 * b - 0.5 * c), k * (-s3 * b + s3 * c)};
}

inline std::array<double, 3> inv_clarke(Phasor x) {
  const double k = std::sqrt(2.0 / 3.0);
  const double s3 = std::sqrt(3.0) / 2.0;
  return {k * x.real(), k * (-0.5 * x.real() - s3 * x.imag()), k * (-0.5 * x.real() + s3 * x.imag())};
}

// 2x2 real block acting like the complex scalar (a - jb) on [x^r, x^i].
inline Eigen::Matrix2d cblock(double a, double b) {
  Eigen::Matrix2d m;
  m << a, b, -b, a;
  return m;
}

inline Eigen::Matrix2d cblock(Phasor k) { return cblock(k.real(), -k.imag()); }

// Complex scalar represented by the block at (2r, 2c).
inline Phasor block_scalar(const Mat& u, int r, int c) {
  return {u(2 * r, 2 * c), -u(2 * r, 2 * c + 1)};
}

inline bool is_complex_structure(const Mat& u, double tol = 0.0) {
  if (u.rows() % 2 != 0 || u.cols() % 2 != 0) throw DimensionError("complex structure needs even dimensions");
  for (Eigen::Index r = 0; r < u.rows(); r += 2)
    for (Eigen::Index c = 0; c < u.cols(); c += 2) {
      if (std::abs(u(r, c) - u(r + 1, c + 1)) > tol) return false;
      if (std::abs(u(r, c + 1) + u(r + 1, c)) > tol) return false;
    }
  return true;
}

// The 5x10 embedding N: row r is [.., 1, j, ..] at columns 2r, 2r+1.
inline CMat embedding_n(int rows = 5) {
  CMat n = CMat::Zero(rows, 2 * rows);
  for (int r = 0; r < rows; ++r) {
    n(r, 2 * r) = 1.0;
    n(r, 2 * r + 1) = j1;
  }
  return n;
}

// <p, q> = Re{(N p)^* (N q)}
inline double structured_inner(const CVec& p, const CVec& q) {
  if (p.size() != q.size() || p.size() % 2 != 0) throw DimensionError("structured_inner: length mismatch");
  Phasor acc = 0.0;
  for (Eigen::Index r = 0; r < p.size(); r += 2) {
    const Phasor np = p(r) + j1 * p(r + 1);
    const Phasor nq = q(r) + j1 * q(r + 1);
    acc += std::conj(np) * nq;
  }
  return acc.real();
}

// Split-and-rotate: x -> [x^r e^{j theta}, x^i e^{j theta}].
inline std::array<Phasor, 2> split_rotate(Phasor x, double theta) {
  const Phasor r = std::polar(1.0, theta);
  return {x.real() * r, x.imag() * r};
}

inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

}  // namespace mgrid
