#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cmadp/common.hpp"

namespace cmadp::nn {

template <typename T>
struct Param {
  Mat<T> value;
  Mat<T> grad;
  bool trainable = true;

  Param() = default;
  Param(Eigen::Index rows, Eigen::Index cols)
      : value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
struct ParamRef {
  std::string name;
  Param<T>* param;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) p.param->zero_grad();
}

template <typename T>
void fill_uniform(Mat<T>& m, T bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-static_cast<double>(bound), static_cast<double>(bound));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
}

template <typename T>
void fill_normal(Mat<T>& m, T stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, static_cast<double>(stddev));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
}

/// Copies parameter values between two identically structured lists
/// (float <-> double conversion allowed).
template <typename Dst, typename Src>
void copy_values(const ParamList<Dst>& dst, const ParamList<Src>& src) {
  if (dst.size() != src.size()) throw ShapeError("parameter lists differ in length");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const auto& s = src[i].param->value;
    auto& d = dst[i].param->value;
    if (s.rows() != d.rows() || s.cols() != d.cols())
      throw ShapeError("parameter '" + dst[i].name + "' shape mismatch");
    d = s.template cast<Dst>();
  }
}

}  // namespace cmadp::nn
