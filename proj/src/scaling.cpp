#include "onerec/scaling.hpp"

#include <ceres/ceres.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "binary_io.hpp"
#include "json.hpp"

namespace onerec::scaling {

using nlohmann::json;

void RunRecord::validate() const {
  if (!(N > 0) || !(D > 0) || !std::isfinite(N) || !std::isfinite(D)) {
    throw InputError("run record '" + label + "': N and D must be positive");
  }
  if (!(loss > 0) || !std::isfinite(loss)) throw InputError("run record '" + label + "': loss must be positive");
}

std::string RunRecord::to_json() const {
  return json{{"N", N}, {"D", D}, {"loss", loss}, {"label", label}}.dump();
}

RunRecord RunRecord::from_json(std::string_view text) {
  try {
    const auto j = json::parse(text);
    RunRecord r{j.at("N").get<double>(), j.at("D").get<double>(), j.at("loss").get<double>(),
                j.value("label", std::string())};
    r.validate();
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("run record: ") + e.what(), 0);
  }
}

std::vector<RunRecord> read_records(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::vector<RunRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(RunRecord::from_json(line));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  return out;
}

void write_records(std::span<const RunRecord> records, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : records) text += r.to_json() + "\n";
  io::write_file_atomic(path, text);
}

double compute_flops(double N, double D) {
  if (!(N > 0) || !(D > 0)) throw InputError("compute_flops: N and D must be positive");
  return 6.0 * N * D;
}

Frontier lower_envelope(std::span<const RunRecord> records, int grid_points) {
  if (grid_points < 2) throw ConfigError("lower_envelope: need at least 2 grid points");
  std::map<double, int> per_size;
  std::vector<HullPoint> pts;
  for (const auto& r : records) {
    r.validate();
    ++per_size[r.N];
    pts.push_back(HullPoint{std::log(compute_flops(r.N, r.D)), r.loss, r.N});
  }
  if (per_size.size() < 2) throw FitError("lower_envelope: need at least 2 model sizes");
  for (const auto& [n, count] : per_size) {
    if (count < 2) throw FitError("lower_envelope: every model size needs at least 2 budgets");
  }
  std::sort(pts.begin(), pts.end(), [](const HullPoint& a, const HullPoint& b) {
    return a.log_c != b.log_c ? a.log_c < b.log_c : a.loss < b.loss;
  });
  // Monotone-chain lower hull.
  std::vector<HullPoint> hull;
  for (const auto& p : pts) {
    if (!hull.empty() && hull.back().log_c == p.log_c) continue;  // keep the lower loss at equal C
    while (hull.size() >= 2) {
      const auto& a = hull[hull.size() - 2];
      const auto& b = hull.back();
      const double cross = (b.log_c - a.log_c) * (p.loss - a.loss) - (b.loss - a.loss) * (p.log_c - a.log_c);
      if (cross > 0) break;
      hull.pop_back();
    }
    hull.push_back(p);
  }
  // Past the lowest loss the hull rises; those budgets are never compute-optimal.
  const auto best = std::min_element(hull.begin(), hull.end(),
                                     [](const HullPoint& a, const HullPoint& b) { return a.loss < b.loss; });
  hull.erase(best + 1, hull.end());
  if (hull.size() < 2) throw FitError("lower_envelope: degenerate hull (a single point dominates)");

  Frontier f;
  f.hull = hull;
  const double lo = hull.front().log_c, hi = hull.back().log_c;
  std::size_t seg = 0;
  for (int g = 0; g < grid_points; ++g) {
    const double x = g + 1 == grid_points ? hi : lo + (hi - lo) * g / (grid_points - 1);
    while (seg + 2 < hull.size() && x > hull[seg + 1].log_c) ++seg;
    const auto& a = hull[seg];
    const auto& b = hull[seg + 1];
    const double t = (x - a.log_c) / (b.log_c - a.log_c);
    const double C = std::exp(x);
    const double n_opt = t < 0.5 ? a.N : b.N;
    f.C.push_back(C);
    f.L_min.push_back(a.loss + t * (b.loss - a.loss));
    f.N_opt.push_back(n_opt);
    f.D_opt.push_back(C / (6.0 * n_opt));
  }
  return f;
}

PowerLawFit fit_power_law(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw InputError("fit_power_law: xs and ys differ in length");
  if (xs.size() < 3) throw InputError("fit_power_law: need at least 3 points");
  const auto n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0) || !(ys[i] > 0)) throw InputError("fit_power_law: values must be positive");
    lx.push_back(std::log(xs[i]));
    ly.push_back(std::log(ys[i]));
    mx += lx.back() / n;
    my += ly.back() / n;
  }
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0) throw InputError("fit_power_law: all x values are equal");
  PowerLawFit fit;
  fit.exponent = sxy / sxx;
  fit.log_coefficient = my - fit.exponent * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    const double r = ly[i] - (fit.log_coefficient + fit.exponent * lx[i]);
    ss_res += r * r;
  }
  fit.r2 = syy > 0 ? 1.0 - ss_res / syy : (ss_res == 0 ? 1.0 : -std::numeric_limits<double>::infinity());
  return fit;
}

namespace {

// Parameters: (a, b, e, alpha, beta).
class HuberLogObjective final : public ceres::FirstOrderFunction {
 public:
  HuberLogObjective(std::span<const RunRecord> records, double delta) : delta_(delta) {
    for (const auto& r : records) {
      log_n_.push_back(std::log(r.N));
      log_d_.push_back(std::log(r.D));
      log_l_.push_back(std::log(r.loss));
    }
  }

  bool Evaluate(const double* x, double* cost, double* gradient) const override {
    const double a = x[0], b = x[1], e = x[2], alpha = x[3], beta = x[4];
    double total = 0;
    double g[5] = {0, 0, 0, 0, 0};
    for (std::size_t i = 0; i < log_n_.size(); ++i) {
      const double t0 = a - alpha * log_n_[i];
      const double t1 = b - beta * log_d_[i];
      const double m = std::max({t0, t1, e});
      const double w0 = std::exp(t0 - m), w1 = std::exp(t1 - m), w2 = std::exp(e - m);
      const double s = w0 + w1 + w2;
      const double r = m + std::log(s) - log_l_[i];
      double dr;  // d huber / d r
      if (std::abs(r) <= delta_) {
        total += 0.5 * r * r;
        dr = r;
      } else {
        total += delta_ * (std::abs(r) - 0.5 * delta_);
        dr = r > 0 ? delta_ : -delta_;
      }
      const double p0 = w0 / s, p1 = w1 / s, p2 = w2 / s;
      g[0] += dr * p0;
      g[1] += dr * p1;
      g[2] += dr * p2;
      g[3] -= dr * p0 * log_n_[i];
      g[4] -= dr * p1 * log_d_[i];
    }
    if (!std::isfinite(total)) return false;
    *cost = total;
    if (gradient != nullptr) std::copy(g, g + 5, gradient);
    return true;
  }

  int NumParameters() const override { return 5; }

 private:
  double delta_;
  std::vector<double> log_n_, log_d_, log_l_;
};

}  // namespace

ParametricFit fit_parametric(std::span<const RunRecord> records, const ParametricFitOptions& opts) {
  if (records.size() < 6) throw InputError("fit_parametric: need at least 6 records");
  std::map<double, int> ns, ds;
  double mean_log_n = 0, mean_log_d = 0, mean_loss = 0;
  const auto count = static_cast<double>(records.size());
  for (const auto& r : records) {
    r.validate();
    ++ns[r.N];
    ++ds[r.D];
    mean_log_n += std::log(r.N) / count;
    mean_log_d += std::log(r.D) / count;
    mean_loss += r.loss / count;
  }
  if (ns.size() < 2 || ds.size() < 2) throw InputError("fit_parametric: need at least 2 distinct N and 2 distinct D");
  std::vector<double> e_grid = opts.e_grid;
  if (e_grid.empty()) {
    for (int k = 1; k <= 10; ++k) e_grid.push_back(std::log(0.2 * k));
  }

  struct Start {
    double alpha, beta, e;
  };
  std::vector<Start> starts;
  for (double al : opts.alpha_grid) {
    for (double be : opts.beta_grid) {
      for (double e : e_grid) starts.push_back(Start{al, be, e});
    }
  }
  if (starts.empty()) throw ConfigError("fit_parametric: empty start grid");

  ParametricFit fit;
  fit.starts.resize(starts.size());
  std::vector<std::array<double, 5>> solutions(starts.size());
  const HuberLogObjective objective(records, opts.huber_delta);

#pragma omp parallel for schedule(dynamic)
  for (std::size_t s = 0; s < starts.size(); ++s) {
    const auto& st = starts[s];
    // a and b start where each power-law term carries half of the reducible loss.
    const double reducible = std::max(mean_loss - std::exp(st.e), 1e-3 * mean_loss);
    std::array<double, 5> x{std::log(0.5 * reducible) + st.alpha * mean_log_n,
                            std::log(0.5 * reducible) + st.beta * mean_log_d, st.e, st.alpha, st.beta};
    ceres::GradientProblemSolver::Options options;
    options.line_search_direction_type = ceres::LBFGS;
    options.max_num_iterations = opts.max_iter;
    options.function_tolerance = 1e-16;
    options.gradient_tolerance = opts.grad_tol;
    options.parameter_tolerance = 1e-14;
    options.logging_type = ceres::SILENT;
    options.line_search_interpolation_type = ceres::BISECTION;
    ceres::GradientProblem problem(new HuberLogObjective(objective));
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(options, problem, x.data(), &summary);
    FitStart& out = fit.starts[s];
    out.alpha0 = st.alpha;
    out.beta0 = st.beta;
    out.e0 = st.e;
    out.objective = summary.final_cost;
    out.iterations = static_cast<int>(summary.iterations.size());
    out.converged = summary.termination_type == ceres::CONVERGENCE && std::isfinite(summary.final_cost) &&
                    x[3] > 0 && x[4] > 0;
    solutions[s] = x;
  }

  for (std::size_t s = 0; s < starts.size(); ++s) {
    if (!fit.starts[s].converged) continue;
    if (fit.best_start < 0 || fit.starts[s].objective < fit.starts[fit.best_start].objective) {
      fit.best_start = static_cast<int>(s);
    }
  }
  if (fit.best_start < 0) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& st : fit.starts) best = std::min(best, st.objective);
    throw FitError("fit_parametric: no start converged (" + std::to_string(starts.size()) +
                   " starts, best objective " + std::to_string(best) + ")");
  }
  const auto& x = solutions[fit.best_start];
  fit.A = std::exp(x[0]);
  fit.B = std::exp(x[1]);
  fit.E = std::exp(x[2]);
  fit.alpha = x[3];
  fit.beta = x[4];
  fit.objective = fit.starts[fit.best_start].objective;
  return fit;
}

std::pair<double, double> derived_exponents(double alpha, double beta) {
  const double a = beta / (alpha + beta);
  return {a, 1.0 - a};
}

double evaluate_surface(const ParametricFit& fit, double N, double D) {
  return fit.E + fit.A / std::pow(N, fit.alpha) + fit.B / std::pow(D, fit.beta);
}

ScalingReport analyze(std::span<const RunRecord> records, const ParametricFitOptions& opts) {
  ScalingReport r;
  r.frontier = lower_envelope(records);
  r.n_opt_fit = fit_power_law(r.frontier.C, r.frontier.N_opt);
  r.d_opt_fit = fit_power_law(r.frontier.C, r.frontier.D_opt);
  r.parametric = fit_parametric(records, opts);
  std::tie(r.derived_a, r.derived_b) = derived_exponents(r.parametric.alpha, r.parametric.beta);
  return r;
}

std::string ScalingReport::to_json() const {
  json starts = json::array();
  for (const auto& s : parametric.starts) {
    starts.push_back({{"alpha0", s.alpha0}, {"beta0", s.beta0}, {"e0", s.e0}, {"objective", s.objective},
                      {"iterations", s.iterations}, {"converged", s.converged}});
  }
  json j{
      {"parametric",
       {{"E", parametric.E}, {"A", parametric.A}, {"B", parametric.B}, {"alpha", parametric.alpha},
        {"beta", parametric.beta}, {"objective", parametric.objective}, {"best_start", parametric.best_start}}},
      {"derived_exponents", {{"a", derived_a}, {"b", derived_b}}},
      {"envelope_exponents",
       {{"a", n_opt_fit.exponent}, {"b", d_opt_fit.exponent}, {"r2_a", n_opt_fit.r2}, {"r2_b", d_opt_fit.r2}}},
      {"reference_envelope_exponents", {{"a", kReferenceEnvelopeA}, {"b", kReferenceEnvelopeB}}},
      {"hull_interpolation", "linear in (log C, loss); N_opt from the nearest hull vertex"},
      {"loss_smoothing", "mean over the last 5% of training steps"},
      {"starts", starts},
  };
  return j.dump(2);
}

void write_frontier_csv(const Frontier& f, const std::filesystem::path& path) {
  std::ostringstream out;
  out.precision(10);
  out << "C,L_min,N_opt,D_opt\n";
  for (std::size_t i = 0; i < f.C.size(); ++i) {
    out << f.C[i] << ',' << f.L_min[i] << ',' << f.N_opt[i] << ',' << f.D_opt[i] << '\n';
  }
  io::write_file_atomic(path, out.str());
}

}  // namespace onerec::scaling
