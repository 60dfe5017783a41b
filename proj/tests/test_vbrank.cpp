#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "chanopt/vbrank.hpp"
#include "doctest.h"
#include "helpers.hpp"

using chanopt::LowRankFactorization;
using chanopt::Rng;
using chanopt::UnfoldedMatrix;

namespace {

// Independent route to the estimate: exhaustive minimization of the free
// energy over a (rank, noise) grid. Slow but has no shared logic with the
// analytic path beyond the energy function itself.
int grid_argmin_rank(const UnfoldedMatrix& m, int noise_points = 400) {
  auto spectrum = chanopt::singular_values(m);
  auto [lo, hi] = chanopt::noise_search_bounds(spectrum, m.rows, m.cols);
  const int max_rank = std::min(m.rows, m.cols);
  double best = std::numeric_limits<double>::infinity();
  int best_rank = 0;
  for (int r = 0; r <= max_rank; ++r) {
    for (int i = 0; i < noise_points; ++i) {
      double t = static_cast<double>(i) / (noise_points - 1);
      double nv = lo * std::pow(hi / lo, t);
      double f = chanopt::vb_free_energy(spectrum, m.rows, m.cols, r, nv);
      if (f < best) {
        best = f;
        best_rank = r;
      }
    }
  }
  return best_rank;
}

}  // namespace

TEST_SUITE("vbrank") {
  TEST_CASE("zero matrix has rank 0 and no noise") {
    UnfoldedMatrix m;
    m.rows = 4;
    m.cols = 6;
    m.values.assign(24, 0.0);
    LowRankFactorization f = chanopt::estimate_low_rank(m);
    CHECK(f.estimated_rank == 0);
    CHECK(f.retained_values.empty());
    CHECK(f.noise_variance == 0.0);
  }

  TEST_CASE("pure noise is mostly discarded") {
    Rng rng(11);
    UnfoldedMatrix m = testutil::random_matrix(rng, 20, 25);
    LowRankFactorization f = chanopt::estimate_low_rank(m);
    // An iid Gaussian matrix has no planted structure; the empirical Bayes
    // threshold should keep at most a stray component.
    CHECK(f.estimated_rank <= 1);
  }

  TEST_CASE("strong planted structure is fully recovered") {
    Rng rng(12);
    for (int rank = 1; rank <= 4; ++rank) {
      UnfoldedMatrix m =
          testutil::planted_matrix(rng, 18, 24, rank, 0.05, 1.0);
      LowRankFactorization f = chanopt::estimate_low_rank(m);
      CHECK(f.estimated_rank == rank);
      CHECK(f.retained_values.size() == static_cast<std::size_t>(rank));
      // Retained amplitudes are positive and non-increasing.
      for (std::size_t i = 0; i < f.retained_values.size(); ++i) {
        CHECK(f.retained_values[i] > 0.0);
        if (i > 0) CHECK(f.retained_values[i] <= f.retained_values[i - 1]);
      }
      CHECK(f.noise_variance > 0.0);
    }
  }

  TEST_CASE("estimate matches the free-energy grid argmin") {
    Rng rng(13);
    for (int iter = 0; iter < 20; ++iter) {
      int rows = 2 + static_cast<int>(rng.next_below(29));
      int cols = 2 + static_cast<int>(rng.next_below(29));
      int max_plant = std::min({5, rows, cols});
      int rank = static_cast<int>(rng.next_below(max_plant + 1));
      double noise_std = (iter % 3 == 0) ? 0.01 : (iter % 3 == 1 ? 0.1 : 1.0);
      double strength = noise_std * (2.0 + 4.0 * rng.next_double());
      UnfoldedMatrix m =
          testutil::planted_matrix(rng, rows, cols, rank, noise_std, strength);
      int analytic = chanopt::estimate_low_rank(m).estimated_rank;
      int grid = grid_argmin_rank(m);
      CHECK(std::abs(analytic - grid) <= 1);
    }
  }

  TEST_CASE("shrinkage: retained values sit below the observed ones") {
    Rng rng(14);
    UnfoldedMatrix m = testutil::planted_matrix(rng, 15, 20, 3, 0.1, 2.0);
    auto spectrum = chanopt::singular_values(m);
    LowRankFactorization f = chanopt::estimate_low_rank(m);
    REQUIRE(f.estimated_rank >= 1);
    for (int i = 0; i < f.estimated_rank; ++i) {
      CHECK(f.retained_values[i] < spectrum[i]);
      CHECK(f.retained_values[i] > 0.0);
    }
  }

  TEST_CASE("scale invariance of the estimated rank") {
    Rng rng(15);
    UnfoldedMatrix m = testutil::planted_matrix(rng, 12, 16, 2, 0.1, 1.5);
    LowRankFactorization base = chanopt::estimate_low_rank(m);
    for (double c : {1e-3, 1e3}) {
      UnfoldedMatrix scaled = m;
      for (double& v : scaled.values) v *= c;
      LowRankFactorization f = chanopt::estimate_low_rank(scaled);
      CHECK(f.estimated_rank == base.estimated_rank);
      REQUIRE(f.retained_values.size() == base.retained_values.size());
      for (std::size_t i = 0; i < f.retained_values.size(); ++i)
        CHECK(f.retained_values[i] ==
              doctest::Approx(base.retained_values[i] * c).epsilon(1e-6));
    }
  }

  TEST_CASE("raising a singular value never lowers the rank") {
    // Monotonicity probed on explicit spectra of a 10x12 matrix.
    std::vector<double> spectrum = {8.0, 6.0, 1.5, 1.0, 0.9,
                                    0.8, 0.7, 0.6, 0.5, 0.4};
    int prev = chanopt::estimate_low_rank_from_spectrum(spectrum, 10, 12)
                   .estimated_rank;
    for (double boost : {3.0, 6.0, 12.0}) {
      auto s = spectrum;
      s[2] = boost;
      std::sort(s.begin(), s.end(), std::greater<double>());
      int r = chanopt::estimate_low_rank_from_spectrum(s, 10, 12)
                  .estimated_rank;
      CHECK(r >= prev);
      prev = r;
    }
  }

  TEST_CASE("spectrum entry point agrees with the matrix entry point") {
    Rng rng(16);
    UnfoldedMatrix m = testutil::planted_matrix(rng, 9, 14, 2, 0.2, 1.0);
    auto spectrum = chanopt::singular_values(m);
    LowRankFactorization a = chanopt::estimate_low_rank(m);
    LowRankFactorization b =
        chanopt::estimate_low_rank_from_spectrum(spectrum, m.rows, m.cols);
    CHECK(a.estimated_rank == b.estimated_rank);
    CHECK(a.noise_variance == doctest::Approx(b.noise_variance).epsilon(1e-9));
  }

  TEST_CASE("free energy rejects impossible candidates") {
    Rng rng(17);
    UnfoldedMatrix m = testutil::planted_matrix(rng, 10, 10, 1, 0.1, 2.0);
    auto spectrum = chanopt::singular_values(m);
    // Keeping every component of a noisy matrix at a large noise variance
    // asks for components below the existence threshold.
    double f_all = chanopt::vb_free_energy(spectrum, 10, 10, 10, 1.0);
    CHECK(std::isinf(f_all));
    // Rank 0 is always evaluable.
    CHECK(std::isfinite(chanopt::vb_free_energy(spectrum, 10, 10, 0, 0.5)));
    CHECK_THROWS_AS(chanopt::vb_free_energy(spectrum, 10, 10, 11, 0.5),
                    std::invalid_argument);
    CHECK_THROWS_AS(chanopt::vb_free_energy(spectrum, 10, 10, 1, 0.0),
                    std::invalid_argument);
  }

  TEST_CASE("noise bounds bracket the chosen variance") {
    Rng rng(18);
    for (int iter = 0; iter < 5; ++iter) {
      UnfoldedMatrix m = testutil::planted_matrix(rng, 11, 13, 2, 0.3, 1.0);
      auto spectrum = chanopt::singular_values(m);
      auto [lo, hi] = chanopt::noise_search_bounds(spectrum, m.rows, m.cols);
      CHECK(lo > 0.0);
      CHECK(lo < hi);
      LowRankFactorization f = chanopt::estimate_low_rank(m);
      CHECK(f.noise_variance >= lo * (1 - 1e-9));
      CHECK(f.noise_variance <= hi * (1 + 1e-9));
    }
  }
}
