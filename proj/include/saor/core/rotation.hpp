#pragma once

#include <array>
#include <cmath>

namespace saor {

template <typename T>
using Mat3 = std::array<T, 9>;  // row-major

template <typename T>
Mat3<T> matmul3(const Mat3<T>& a, const Mat3<T>& b) {
  Mat3<T> c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return c;
}

template <typename T>
Mat3<T> rot_x(T a) {
  const T c = std::cos(a), s = std::sin(a);
  return {T(1), T(0), T(0), T(0), c, -s, T(0), s, c};
}
template <typename T>
Mat3<T> rot_y(T a) {
  const T c = std::cos(a), s = std::sin(a);
  return {c, T(0), s, T(0), T(1), T(0), -s, T(0), c};
}
template <typename T>
Mat3<T> rot_z(T a) {
  const T c = std::cos(a), s = std::sin(a);
  return {c, -s, T(0), s, c, T(0), T(0), T(0), T(1)};
}
template <typename T>
Mat3<T> drot_x(T a) {
  const T c = std::cos(a), s = std::sin(a);
  return {T(0), T(0), T(0), T(0), -s, -c, T(0), c, -s};
}
template <typename T>
Mat3<T> drot_y(T a) {
  const T c = std::cos(a), s = std::sin(a);
  return {-s, T(0), c, T(0), T(0), T(0), -c, T(0), -s};
}
template <typename T>
Mat3<T> drot_z(T a) {
  const T c = std::cos(a), s = std::sin(a);
  return {-s, -c, T(0), c, -s, T(0), T(0), T(0), T(0)};
}

/// R = Rz(c) * Ry(b) * Rx(a), angles in radians.
template <typename T>
Mat3<T> euler_zyx(T a, T b, T c) {
  return matmul3(rot_z(c), matmul3(rot_y(b), rot_x(a)));
}

/// Partial derivatives of euler_zyx with respect to (a, b, c).
template <typename T>
std::array<Mat3<T>, 3> euler_zyx_grad(T a, T b, T c) {
  const auto rx = rot_x(a), ry = rot_y(b), rz = rot_z(c);
  return {matmul3(rz, matmul3(ry, drot_x(a))), matmul3(rz, matmul3(drot_y(b), rx)),
          matmul3(drot_z(c), matmul3(ry, rx))};
}

}  // namespace saor
