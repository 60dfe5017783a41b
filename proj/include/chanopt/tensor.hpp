#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace chanopt {

// Dense 4-way convolution weight tensor. Axis order is fixed project-wide:
//   axis 1 = kernel height, axis 2 = kernel width,
//   axis 3 = input channels, axis 4 = output channels.
// Storage is row-major in that axis order (axis 4 fastest).
class ConvTensor {
 public:
  ConvTensor() : dims_{0, 0, 0, 0} {}
  // Allocates a zero-filled tensor. All dims must be >= 1.
  ConvTensor(int kh, int kw, int in_ch, int out_ch);
  // Adopts an existing value buffer; size must equal kh*kw*in_ch*out_ch and
  // every entry must be finite.
  ConvTensor(int kh, int kw, int in_ch, int out_ch, std::vector<double> values);

  int dim(int axis) const;  // axis in 1..4
  const std::array<int, 4>& dims() const { return dims_; }
  std::size_t size() const { return values_.size(); }

  double& at(int i1, int i2, int i3, int i4) {
    return values_[offset(i1, i2, i3, i4)];
  }
  double at(int i1, int i2, int i3, int i4) const {
    return values_[offset(i1, i2, i3, i4)];
  }

  std::size_t offset(int i1, int i2, int i3, int i4) const {
    return ((static_cast<std::size_t>(i1) * dims_[1] + i2) * dims_[2] + i3) *
               dims_[3] +
           i4;
  }

  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  // Throws if any entry is non-finite.
  void check_finite() const;

 private:
  std::array<int, 4> dims_;
  std::vector<double> values_;
};

// 2-D matrix view produced by unfolding a tensor along one axis.
// Row-major storage.
struct UnfoldedMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  double& at(int r, int c) {
    return values[static_cast<std::size_t>(r) * cols + c];
  }
  double at(int r, int c) const {
    return values[static_cast<std::size_t>(r) * cols + c];
  }
};

// Non-increasing, non-negative singular values.
using SingularSpectrum = std::vector<double>;

// Mode-d unfolding: rows index axis `mode` (1..4), columns enumerate the
// remaining axes in ascending axis order, row-major. Mode 3 exposes input
// channels, mode 4 output channels.
UnfoldedMatrix unfold(const ConvTensor& t, int mode);

// Exact inverse of unfold: rebuilds the tensor with the given dims from its
// mode-d unfolding. Bit-exact round trip.
ConvTensor refold(const UnfoldedMatrix& m, const std::array<int, 4>& dims,
                  int mode);

// Full singular value spectrum of the matrix, non-increasing. Values below
// 1e-12 * sigma_max are clamped to exactly zero so that downstream rank and
// condition numbers are not polluted by numerical dust.
SingularSpectrum singular_values(const UnfoldedMatrix& m);

}  // namespace chanopt
