#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace vsrd {

/// Raised when a caller breaks a documented precondition (shape mismatch,
/// out-of-range index, invalid configuration).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a value lies outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised when training produces a non-finite loss. `phase` names the loop
/// that diverged.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::string phase, long iteration, const std::string& what)
      : std::runtime_error(what), phase_(std::move(phase)), iteration_(iteration) {}
  const std::string& phase() const { return phase_; }
  long iteration() const { return iteration_; }

 private:
  std::string phase_;
  long iteration_;
};

using Index = Eigen::Index;

/// Layout of a (frames, height, width, channels) clip. Storage is row-major
/// with channels fastest.
struct VideoShape {
  Index frames = 1;
  Index height = 1;
  Index width = 1;
  Index channels = 1;

  Index numel() const { return frames * height * width * channels; }
  Index frame_size() const { return height * width * channels; }
  Index offset(Index t, Index y, Index x, Index c) const {
    return ((t * height + y) * width + x) * channels + c;
  }
  bool valid() const { return frames >= 1 && height >= 1 && width >= 1 && channels >= 1; }

  bool operator==(const VideoShape&) const = default;
};

std::string to_string(const VideoShape& s);

/// Dense clip of scalars. All losses and metrics operate on this type.
template <typename Scalar>
class Video {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Video() = default;

  explicit Video(const VideoShape& shape) : shape_(shape) {
    if (!shape.valid()) throw ContractViolation("video shape must be positive: " + to_string(shape));
    data_ = Array::Zero(shape.numel());
  }

  template <typename Derived>
  Video(const VideoShape& shape, const Eigen::ArrayBase<Derived>& data) : shape_(shape), data_(data) {
    if (!shape.valid()) throw ContractViolation("video shape must be positive: " + to_string(shape));
    if (data_.size() != shape.numel())
      throw ContractViolation("video data size " + std::to_string(data_.size()) + " does not match shape " +
                              to_string(shape));
  }

  static Video Constant(const VideoShape& shape, Scalar value) {
    return Video(shape, Array::Constant(shape.numel(), value));
  }
  static Video Zero(const VideoShape& shape) { return Video(shape); }

  const VideoShape& shape() const { return shape_; }
  Index numel() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Scalar& operator()(Index t, Index y, Index x, Index c) { return data_[shape_.offset(t, y, x, c)]; }
  Scalar operator()(Index t, Index y, Index x, Index c) const { return data_[shape_.offset(t, y, x, c)]; }

  bool all_finite() const { return data_.allFinite(); }

  bool operator==(const Video& o) const {
    return shape_ == o.shape_ && (data_.size() == 0 || (data_ == o.data_).all());
  }

 private:
  VideoShape shape_{};
  Array data_;
};

using LatentVideo = Video<double>;

template <typename Scalar>
void require_same_shape(const Video<Scalar>& a, const Video<Scalar>& b, const char* what) {
  if (!(a.shape() == b.shape()))
    throw ContractViolation(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                            to_string(b.shape()));
}

template <typename Scalar>
void require_finite(const Video<Scalar>& v, const char* what) {
  if (!v.all_finite()) throw ContractViolation(std::string(what) + ": non-finite entries");
}

}  // namespace vsrd
