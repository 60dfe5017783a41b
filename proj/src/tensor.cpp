#include "chanopt/tensor.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <stdexcept>
#include <string>

namespace chanopt {

namespace {

std::size_t checked_size(int kh, int kw, int in_ch, int out_ch) {
  if (kh < 1 || kw < 1 || in_ch < 1 || out_ch < 1) {
    throw std::invalid_argument(
        "ConvTensor: all dims must be >= 1, got (" + std::to_string(kh) + "," +
        std::to_string(kw) + "," + std::to_string(in_ch) + "," +
        std::to_string(out_ch) + ")");
  }
  return static_cast<std::size_t>(kh) * kw * in_ch * out_ch;
}

}  // namespace

ConvTensor::ConvTensor(int kh, int kw, int in_ch, int out_ch)
    : dims_{kh, kw, in_ch, out_ch},
      values_(checked_size(kh, kw, in_ch, out_ch), 0.0) {}

ConvTensor::ConvTensor(int kh, int kw, int in_ch, int out_ch,
                       std::vector<double> values)
    : dims_{kh, kw, in_ch, out_ch}, values_(std::move(values)) {
  if (values_.size() != checked_size(kh, kw, in_ch, out_ch)) {
    throw std::invalid_argument(
        "ConvTensor: value buffer size " + std::to_string(values_.size()) +
        " does not match dims product " +
        std::to_string(checked_size(kh, kw, in_ch, out_ch)));
  }
  check_finite();
}

int ConvTensor::dim(int axis) const {
  if (axis < 1 || axis > 4) {
    throw std::invalid_argument("ConvTensor::dim: axis must be in 1..4");
  }
  return dims_[axis - 1];
}

void ConvTensor::check_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("ConvTensor: non-finite entry");
    }
  }
}

UnfoldedMatrix unfold(const ConvTensor& t, int mode) {
  if (mode < 1 || mode > 4) {
    throw std::invalid_argument("unfold: mode must be in 1..4, got " +
                                std::to_string(mode));
  }
  if (t.size() == 0) {
    throw std::invalid_argument("unfold: empty tensor");
  }
  const auto& d = t.dims();
  UnfoldedMatrix m;
  m.rows = d[mode - 1];
  m.cols = static_cast<int>(t.size() / m.rows);
  m.values.resize(t.size());

  // Column index enumerates the non-mode axes in ascending axis order,
  // row-major (last remaining axis fastest).
  std::array<int, 3> rest{};
  int k = 0;
  for (int axis = 1; axis <= 4; ++axis) {
    if (axis != mode) rest[k++] = axis;
  }
  std::array<int, 4> idx{};
  for (int r = 0; r < m.rows; ++r) {
    idx[mode - 1] = r;
    std::size_t c = 0;
    for (int a = 0; a < d[rest[0] - 1]; ++a) {
      idx[rest[0] - 1] = a;
      for (int b = 0; b < d[rest[1] - 1]; ++b) {
        idx[rest[1] - 1] = b;
        for (int e = 0; e < d[rest[2] - 1]; ++e) {
          idx[rest[2] - 1] = e;
          m.values[static_cast<std::size_t>(r) * m.cols + c] =
              t.at(idx[0], idx[1], idx[2], idx[3]);
          ++c;
        }
      }
    }
  }
  return m;
}

ConvTensor refold(const UnfoldedMatrix& m, const std::array<int, 4>& dims,
                  int mode) {
  if (mode < 1 || mode > 4) {
    throw std::invalid_argument("refold: mode must be in 1..4");
  }
  ConvTensor t(dims[0], dims[1], dims[2], dims[3]);
  if (m.rows != dims[mode - 1] ||
      static_cast<std::size_t>(m.rows) * m.cols != t.size()) {
    throw std::invalid_argument("refold: matrix shape does not match dims");
  }
  std::array<int, 3> rest{};
  int k = 0;
  for (int axis = 1; axis <= 4; ++axis) {
    if (axis != mode) rest[k++] = axis;
  }
  std::array<int, 4> idx{};
  for (int r = 0; r < m.rows; ++r) {
    idx[mode - 1] = r;
    std::size_t c = 0;
    for (int a = 0; a < dims[rest[0] - 1]; ++a) {
      idx[rest[0] - 1] = a;
      for (int b = 0; b < dims[rest[1] - 1]; ++b) {
        idx[rest[1] - 1] = b;
        for (int e = 0; e < dims[rest[2] - 1]; ++e) {
          idx[rest[2] - 1] = e;
          t.at(idx[0], idx[1], idx[2], idx[3]) =
              m.values[static_cast<std::size_t>(r) * m.cols + c];
          ++c;
        }
      }
    }
  }
  return t;
}

SingularSpectrum singular_values(const UnfoldedMatrix& m) {
  if (m.rows < 1 || m.cols < 1 ||
      m.values.size() != static_cast<std::size_t>(m.rows) * m.cols) {
    throw std::invalid_argument("singular_values: malformed matrix");
  }
  for (double v : m.values) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("singular_values: non-finite entry");
    }
  }
  Eigen::MatrixXd a(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      a(r, c) = m.at(r, c);
    }
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  const auto& sv = svd.singularValues();
  SingularSpectrum out(sv.size());
  for (int i = 0; i < sv.size(); ++i) out[i] = sv[i];
  if (!out.empty()) {
    const double floor = 1e-12 * out.front();
    for (double& s : out) {
      if (s < floor) s = 0.0;
    }
  }
  return out;
}

}  // namespace chanopt
