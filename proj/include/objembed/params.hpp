#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "objembed/error.hpp"

namespace objembed {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using VecMap = Eigen::Map<Vec<T>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Vec<T>>;

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;  // 1 or 2 dims
  std::size_t offset = 0;
  std::size_t size = 0;

  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  friend bool operator==(const TensorInfo&, const TensorInfo&) = default;
};

/// Named tensors backed by one contiguous buffer, in registration order.
/// Optimizers, gradient audits and checkpoints all walk the same flat layout.
template <typename T>
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::vector<std::size_t> shape) {
    if (find_index(name) != npos) throw Error("duplicate tensor " + name);
    TensorInfo info{name, std::move(shape), data_.size(), 0};
    info.size = 1;
    for (auto d : info.shape) info.size *= d;
    data_.resize(data_.size() + info.size, T(0));
    tensors_.push_back(std::move(info));
    return tensors_.size() - 1;
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t find_index(const std::string& name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      if (tensors_[i].name == name) return i;
    return npos;
  }

  std::size_t index(const std::string& name) const {
    auto i = find_index(name);
    if (i == npos) throw Error("no tensor named " + name);
    return i;
  }

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& info(std::size_t i) const { return tensors_[i]; }
  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  MatMap<T> mat(std::size_t i) {
    const auto& t = tensors_[i];
    return MatMap<T>(data_.data() + t.offset, Eigen::Index(t.rows()), Eigen::Index(t.cols()));
  }
  ConstMatMap<T> mat(std::size_t i) const {
    const auto& t = tensors_[i];
    return ConstMatMap<T>(data_.data() + t.offset, Eigen::Index(t.rows()), Eigen::Index(t.cols()));
  }
  VecMap<T> vec(std::size_t i) {
    const auto& t = tensors_[i];
    return VecMap<T>(data_.data() + t.offset, Eigen::Index(t.size));
  }
  ConstVecMap<T> vec(std::size_t i) const {
    const auto& t = tensors_[i];
    return ConstVecMap<T>(data_.data() + t.offset, Eigen::Index(t.size));
  }
  T& scalar(std::size_t i) { return data_[tensors_[i].offset]; }
  T scalar(std::size_t i) const { return data_[tensors_[i].offset]; }

  /// Same layout, all zeros.
  ParamStore zeros_like() const {
    ParamStore out = *this;
    std::fill(out.data_.begin(), out.data_.end(), T(0));
    return out;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& t : tensors_) out.add(t.name, t.shape);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  void add_scaled(const ParamStore& other, T scale = T(1)) {
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
  }

 private:
  std::vector<TensorInfo> tensors_;
  std::vector<T> data_;
};

}  // namespace objembed
