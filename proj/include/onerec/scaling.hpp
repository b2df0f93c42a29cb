#pragma once

// Scaling-law analysis: compute budgets, the compute-optimal frontier, power
// laws along it, and the parametric surface L(N, D) = E + A/N^alpha + B/D^beta.

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "onerec/common.hpp"

namespace onerec::scaling {

struct RunRecord {
  double N = 0.0;  // parameters
  double D = 0.0;  // training tokens
  double loss = 0.0;
  std::string label;

  void validate() const;
  std::string to_json() const;
  static RunRecord from_json(std::string_view text);
  bool operator==(const RunRecord&) const = default;
};

std::vector<RunRecord> read_records(const std::filesystem::path& path);
void write_records(std::span<const RunRecord> records, const std::filesystem::path& path);

double compute_flops(double N, double D);

struct HullPoint {
  double log_c = 0.0;
  double loss = 0.0;
  double N = 0.0;
};

struct Frontier {
  std::vector<double> C;  // log-spaced grid over the hull's span
  std::vector<double> L_min;
  std::vector<double> N_opt;
  std::vector<double> D_opt;
  std::vector<HullPoint> hull;  // vertices, increasing log C
};

/// Lower convex hull of all (log C, loss) points; grid values interpolate along it.
Frontier lower_envelope(std::span<const RunRecord> records, int grid_points = 64);

struct PowerLawFit {
  double exponent = 0.0;
  double log_coefficient = 0.0;  // natural log
  double r2 = 0.0;
};

/// Least squares on (log x, log y).
PowerLawFit fit_power_law(std::span<const double> xs, std::span<const double> ys);

/// Frontier exponents reported for the original full-scale runs (N_opt ~ C^a, D_opt ~ C^b).
inline constexpr double kReferenceEnvelopeA = 0.44;
inline constexpr double kReferenceEnvelopeB = 0.56;

struct ParametricFitOptions {
  double huber_delta = 1e-3;
  std::vector<double> alpha_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  std::vector<double> beta_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  std::vector<double> e_grid;  // log E starts; empty: log of {0.2, 0.4, ..., 2.0}
  int max_iter = 500;
  double grad_tol = 1e-12;
};

struct FitStart {
  double alpha0 = 0.0, beta0 = 0.0, e0 = 0.0;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct ParametricFit {
  double E = 0.0, A = 0.0, B = 0.0, alpha = 0.0, beta = 0.0;
  double objective = 0.0;
  int best_start = -1;
  std::vector<FitStart> starts;
};

/// Minimises sum Huber(logsumexp(a - alpha log N, b - beta log D, e) - log L) over
/// (a, b, e, alpha, beta) from every start of the grid. Starts run in parallel;
/// the lowest objective wins, ties to the lower start index.
ParametricFit fit_parametric(std::span<const RunRecord> records, const ParametricFitOptions& opts = {});

/// (a, b) = (beta, alpha) / (alpha + beta).
std::pair<double, double> derived_exponents(double alpha, double beta);

double evaluate_surface(const ParametricFit& fit, double N, double D);

struct ScalingReport {
  Frontier frontier;
  PowerLawFit n_opt_fit;  // N_opt vs C along the hull
  PowerLawFit d_opt_fit;  // D_opt vs C along the hull
  ParametricFit parametric;
  double derived_a = 0.0, derived_b = 0.0;

  std::string to_json() const;
};

ScalingReport analyze(std::span<const RunRecord> records, const ParametricFitOptions& opts = {});
void write_frontier_csv(const Frontier& f, const std::filesystem::path& path);

}  // namespace onerec::scaling
