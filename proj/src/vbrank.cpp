#include "chanopt/vbrank.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace chanopt {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

void check_spectrum(const std::vector<double>& s, int rows, int cols) {
  if (rows < 1 || cols < 1) {
    throw std::invalid_argument("low-rank analysis: matrix dims must be >= 1");
  }
  const std::size_t expect = static_cast<std::size_t>(std::min(rows, cols));
  if (s.size() != expect) {
    throw std::invalid_argument(
        "low-rank analysis: spectrum length " + std::to_string(s.size()) +
        " does not match min(rows, cols) = " + std::to_string(expect));
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!std::isfinite(s[i]) || s[i] < 0.0) {
      throw std::invalid_argument(
          "low-rank analysis: spectrum must be finite and non-negative");
    }
    if (i > 0 && s[i] > s[i - 1] * (1.0 + 1e-12) + 1e-300) {
      throw std::invalid_argument(
          "low-rank analysis: spectrum must be non-increasing");
    }
  }
}

// Root of log(t+1) + alpha*log(t/alpha + 1) - t = 0 for t > 0. The function
// rises from 0, peaks, then decreases without bound, so the positive root is
// unique; bisection on a doubling bracket is exact enough at ~1e-14.
double solve_retention_root(double alpha) {
  auto f = [alpha](double t) {
    return std::log(t + 1.0) + alpha * std::log(t / alpha + 1.0) - t;
  };
  double hi = 1.0;
  while (f(hi) > 0.0) hi *= 2.0;
  double lo = hi / 2.0;
  // Ensure lo is on the positive side of the root (f > 0).
  while (f(lo) <= 0.0) {
    lo /= 2.0;
    if (lo < 1e-300) return hi;  // degenerate; alpha ~ 0
  }
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (f(mid) > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

// Larger root of t^2 - (x - (1+alpha)) t + alpha = 0; the posterior
// second-moment parameter of a retained component with normalized observed
// energy x. Only defined for x >= (1 + sqrt(alpha))^2.
double retention_tau(double x, double alpha) {
  const double b = x - (1.0 + alpha);
  return 0.5 * (b + std::sqrt(b * b - 4.0 * alpha));
}

// Free-energy contribution of one retained component, divided by M.
double retained_cost(double x, double alpha) {
  const double tau = retention_tau(x, alpha);
  return std::log(tau + 1.0) + alpha * std::log(tau / alpha + 1.0) - tau;
}

struct Problem {
  std::vector<double> s;  // spectrum, length L
  int L = 0;
  long long M = 0;
  double alpha = 0.0;
  double sum_sq = 0.0;
  double xbar = 0.0;  // retain iff s^2/(M sigma2) > xbar
};

// Free energy at noise variance sigma2 with the retain set chosen optimally
// (every component above the global threshold xbar). Continuous in sigma2
// because the per-component cost vanishes exactly at the threshold.
double free_energy_at(const Problem& p, double sigma2) {
  double f = static_cast<double>(p.L) * p.M * std::log(2.0 * kPi * sigma2) +
             p.sum_sq / sigma2;
  for (double sv : p.s) {
    const double x = sv * sv / (p.M * sigma2);
    if (x > p.xbar) {
      f += p.M * retained_cost(x, p.alpha);
    }
  }
  return 0.5 * f;
}

double minimize_noise(const Problem& p, double lower, double upper) {
  if (!(lower < upper)) return upper;
  const double lo = std::log(lower);
  const double hi = std::log(upper);
  const int kGrid = 2000;
  int best = 0;
  double best_f = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= kGrid; ++i) {
    const double lg = lo + (hi - lo) * i / kGrid;
    const double f = free_energy_at(p, std::exp(lg));
    if (f < best_f) {
      best_f = f;
      best = i;
    }
  }
  // Golden-section refinement inside the bracketing grid cell pair.
  double a = lo + (hi - lo) * std::max(0, best - 1) / kGrid;
  double b = lo + (hi - lo) * std::min(kGrid, best + 1) / kGrid;
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - gr * (b - a);
  double d = a + gr * (b - a);
  double fc = free_energy_at(p, std::exp(c));
  double fd = free_energy_at(p, std::exp(d));
  for (int i = 0; i < 200 && (b - a) > 1e-14; ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = free_energy_at(p, std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = free_energy_at(p, std::exp(d));
    }
  }
  return std::exp(0.5 * (a + b));
}

}  // namespace

std::pair<double, double> noise_search_bounds(const std::vector<double>& spectrum,
                                              int rows, int cols) {
  check_spectrum(spectrum, rows, cols);
  const int L = std::min(rows, cols);
  const long long M = std::max(rows, cols);
  const double alpha = static_cast<double>(L) / static_cast<double>(M);
  const double xbar_tau = solve_retention_root(alpha);
  const double xbar = (1.0 + xbar_tau) * (1.0 + alpha / xbar_tau);

  double sum_sq = 0.0;
  for (double sv : spectrum) sum_sq += sv * sv;
  const double upper = sum_sq / (static_cast<double>(L) * M);

  // Largest index that could ever be retained; the noise floor below keeps
  // everything past it discarded, which is what makes the estimate well posed
  // for (near-)exactly low-rank inputs.
  const int max_keep = static_cast<int>(
      std::min(std::ceil(static_cast<double>(L) / (1.0 + alpha)) - 1.0,
               static_cast<double>(L)));
  const int tail_start = std::max(0, max_keep);  // first index forced out
  double tail_mean_sq = 0.0;
  for (int i = tail_start; i < L; ++i) tail_mean_sq += spectrum[i] * spectrum[i];
  tail_mean_sq /= std::max(1, L - tail_start);
  const double tail_top =
      tail_start < L ? spectrum[tail_start] * spectrum[tail_start] : 0.0;
  double lower =
      std::max(tail_top / (M * xbar), tail_mean_sq / static_cast<double>(M));
  // Guard exactly-low-rank spectra (zero tail) against a degenerate interval.
  lower = std::max(lower, upper * 1e-15);
  return {lower, upper};
}

LowRankFactorization estimate_low_rank_from_spectrum(
    const std::vector<double>& spectrum, int rows, int cols) {
  check_spectrum(spectrum, rows, cols);
  LowRankFactorization out;
  if (spectrum.empty() || spectrum.front() <= 0.0) {
    return out;  // all-zero matrix: rank 0, noise 0
  }

  Problem p;
  p.s = spectrum;
  p.L = std::min(rows, cols);
  p.M = std::max(rows, cols);
  p.alpha = static_cast<double>(p.L) / static_cast<double>(p.M);
  for (double sv : p.s) p.sum_sq += sv * sv;
  const double tau_bar = solve_retention_root(p.alpha);
  p.xbar = (1.0 + tau_bar) * (1.0 + p.alpha / tau_bar);

  const auto [lower, upper] = noise_search_bounds(spectrum, rows, cols);
  const double sigma2 = minimize_noise(p, lower, upper);
  out.noise_variance = sigma2;

  const double keep_above = std::sqrt(p.M * sigma2 * p.xbar);
  for (double sv : p.s) {
    if (!(sv > keep_above)) break;  // spectrum is sorted
    const double ratio = (p.L + p.M) * sigma2 / (sv * sv);
    const double lm_term =
        4.0 * static_cast<double>(p.L) * p.M * sigma2 * sigma2 /
        (sv * sv * sv * sv);
    const double disc = (1.0 - ratio) * (1.0 - ratio) - lm_term;
    const double d = 0.5 * sv * (1.0 - ratio + std::sqrt(std::max(0.0, disc)));
    out.retained_values.push_back(d);
  }
  out.estimated_rank = static_cast<int>(out.retained_values.size());
  return out;
}

LowRankFactorization estimate_low_rank(const UnfoldedMatrix& m) {
  return estimate_low_rank_from_spectrum(singular_values(m), m.rows, m.cols);
}

double vb_free_energy(const std::vector<double>& spectrum, int rows, int cols,
                      int candidate_rank, double noise_variance) {
  check_spectrum(spectrum, rows, cols);
  if (candidate_rank < 0 ||
      candidate_rank > static_cast<int>(spectrum.size())) {
    throw std::invalid_argument(
        "vb_free_energy: candidate rank out of [0, min(rows, cols)]");
  }
  if (!(noise_variance > 0.0) || !std::isfinite(noise_variance)) {
    throw std::invalid_argument("vb_free_energy: noise variance must be > 0");
  }
  // Deliberately self-contained from here down (second route to the answer).
  const double L = std::min(rows, cols);
  const double M = std::max(rows, cols);
  const double alpha = L / M;
  double sum_sq = 0.0;
  for (double sv : spectrum) sum_sq += sv * sv;

  double f = L * M * std::log(2.0 * kPi * noise_variance) +
             sum_sq / noise_variance;
  for (int h = 0; h < candidate_rank; ++h) {
    const double x = spectrum[h] * spectrum[h] / (M * noise_variance);
    const double b = x - (1.0 + alpha);
    const double disc = b * b - 4.0 * alpha;
    if (b <= 0.0 || disc < 0.0) {
      // Below the local existence threshold: keeping this component has no
      // variational solution at this noise level.
      return std::numeric_limits<double>::infinity();
    }
    const double tau = 0.5 * (b + std::sqrt(disc));
    f += M * std::log(tau + 1.0) + L * std::log(tau / alpha + 1.0) - M * tau;
  }
  return 0.5 * f;
}

}  // namespace chanopt
