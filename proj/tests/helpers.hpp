#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "chanopt/rng.hpp"
#include "chanopt/tensor.hpp"

namespace testutil {

inline std::string graph_path(const std::string& name) {
  return std::string(CHANOPT_GRAPH_DIR) + "/" + name;
}

// Fresh directory under the system temp root, unique per call.
inline std::string fresh_dir(const std::string& tag) {
  static int counter = 0;
  auto dir = std::filesystem::temp_directory_path() /
             ("chanopt_test_" + tag + "_" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline chanopt::ConvTensor random_tensor(chanopt::Rng& rng, int kh, int kw,
                                         int ci, int co) {
  chanopt::ConvTensor t(kh, kw, ci, co);
  for (double& v : t.values()) v = rng.next_gaussian();
  return t;
}

inline chanopt::UnfoldedMatrix random_matrix(chanopt::Rng& rng, int rows,
                                             int cols) {
  chanopt::UnfoldedMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.values.resize(static_cast<std::size_t>(rows) * cols);
  for (double& v : m.values) v = rng.next_gaussian();
  return m;
}

// rank-r matrix plus iid Gaussian noise; the planted singular values are
// strong enough to be structural but can sit near the detection threshold.
inline chanopt::UnfoldedMatrix planted_matrix(chanopt::Rng& rng, int rows,
                                              int cols, int rank,
                                              double noise_std,
                                              double strength) {
  chanopt::UnfoldedMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.values.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  for (int k = 0; k < rank; ++k) {
    std::vector<double> u(rows), v(cols);
    for (double& x : u) x = rng.next_gaussian();
    for (double& x : v) x = rng.next_gaussian();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m.at(r, c) += strength * u[r] * v[c];
  }
  for (double& x : m.values) x += noise_std * rng.next_gaussian();
  return m;
}

}  // namespace testutil
