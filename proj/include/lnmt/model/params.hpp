#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "lnmt/core/error.hpp"
#include "lnmt/core/hash.hpp"

namespace lnmt {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Named list of parameter arrays in registration order. The order is the
/// on-disk order of checkpoint blobs.
template <typename S>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Mat<S>> tensors;

  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    names.push_back(std::move(name));
    tensors.emplace_back(Mat<S>::Zero(rows, cols));
    return tensors.size() - 1;
  }

  std::size_t size() const { return tensors.size(); }
  Mat<S>& operator[](std::size_t i) { return tensors[i]; }
  const Mat<S>& operator[](std::size_t i) const { return tensors[i]; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw InvalidArgument("unknown parameter " + name);
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.emplace_back(Mat<S>::Zero(t.rows(), t.cols()));
    return out;
  }

  void set_zero() {
    for (auto& t : tensors) t.setZero();
  }

  bool same_shapes(const ParamSet& o) const {
    if (o.tensors.size() != tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].rows() != o.tensors[i].rows() || tensors[i].cols() != o.tensors[i].cols()) return false;
    }
    return true;
  }

  /// Name of the first tensor holding a NaN/Inf, or empty.
  std::string first_non_finite() const {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (!tensors[i].allFinite()) return names[i];
    }
    return {};
  }

  double squared_norm() const {
    double s = 0;
    for (const auto& t : tensors) s += static_cast<double>(t.squaredNorm());
    return s;
  }

  void scale(S f) {
    for (auto& t : tensors) t *= f;
  }

  void add_scaled(const ParamSet& o, S f) {
    for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i] += f * o.tensors[i];
  }

  template <typename T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<T>());
    return out;
  }

  /// Checksum of the little-endian float32 image of all arrays.
  std::uint64_t checksum() const {
    Fnv1a h;
    for (const auto& t : tensors) {
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        const float f = static_cast<float>(t.data()[i]);
        h.update(&f, sizeof f);
      }
    }
    return h.digest();
  }
};

}  // namespace lnmt
