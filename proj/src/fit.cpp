#include "qmri/fit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <set>
#include <thread>
#include <tuple>

namespace qmri::fit {

void FitOptions::validate() const {
  if (!(t1_min > 0.0 && t1_min < t1_max) || !(t2_min > 0.0 && t2_min < t2_max)) {
    throw InvalidArgument("fit: bounds must be positive and ordered");
  }
  if (n_t1 < 2 || n_t2 < 2) throw InvalidArgument("fit: grid sizes must be >= 2");
  if (max_iterations < 0) throw InvalidArgument("fit: max_iterations must be >= 0");
  if (!(damping_init > 0.0 && damping_up > 1.0 && damping_down > 0.0 && damping_down < 1.0)) {
    throw InvalidArgument("fit: damping requires init > 0, growth > 1, 0 < shrink < 1");
  }
}

double pd_closed_form(std::span<const double> signals, std::span<const double> basis) {
  if (signals.size() != basis.size()) throw ShapeError("pd_closed_form: signal and basis lengths differ");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < basis.size(); ++i) {
    num += signals[i] * basis[i];
    den += basis[i] * basis[i];
  }
  if (!(den > 0.0)) throw InvalidArgument("pd_closed_form: degenerate basis (sum of squares is zero)");
  return num / den;
}

namespace {

std::vector<double> log_grid(double lo, double hi, int n) {
  std::vector<double> g(static_cast<std::size_t>(n));
  const double step = std::log(hi / lo) / (n - 1);
  for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = lo * std::exp(step * i);
  g.back() = hi;
  return g;
}

bool identifiable(std::span<const ScanParams> protocols) {
  std::set<std::tuple<int, double, double, double>> distinct;
  std::set<double> te, tr;
  bool flair = false;
  for (const auto& p : protocols) {
    distinct.emplace(static_cast<int>(p.sequence), p.tr_ms, p.te_ms, p.ti_ms.value_or(0.0));
    te.insert(p.te_ms);
    tr.insert(p.tr_ms);
    flair = flair || p.sequence == Sequence::Flair;
  }
  return distinct.size() >= 3 && te.size() >= 2 && (flair || tr.size() >= 2);
}

struct Eval {
  double cost = 0.0;  // squared residual norm
  Eigen::Matrix3d jtj;
  Eigen::Vector3d jtr;
};

Eval evaluate(std::span<const double> y, std::span<const ScanParams> protocols, const Eigen::Vector3d& theta,
              bool with_jacobian) {
  Eval e;
  e.jtj.setZero();
  e.jtr.setZero();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto s = signal_with_jacobian(theta[0], theta[1], theta[2], protocols[i]);
    const double r = y[i] - s.value;
    e.cost += r * r;
    if (with_jacobian) {
      const Eigen::Vector3d j(s.d_pd, s.d_t1, s.d_t2);
      e.jtj += j * j.transpose();
      e.jtr += j * r;
    }
  }
  return e;
}

constexpr int kMaxStarts = 4;
constexpr double kTieTolerance = 1e-9;
constexpr int kExplore = 2;

double prior_distance(const TissueTable& table, double t1, double t2) {
  double best = std::numeric_limits<double>::infinity();
  for (auto t : {Tissue::Wm, Tissue::Gm, Tissue::Csf, Tissue::Lesion}) {
    const auto& p = table.at(t);
    const double a = (t1 - p.t1.mean) / std::max(p.t1.std, 1e-9);
    const double b = (t2 - p.t2.mean) / std::max(p.t2.std, 1e-9);
    best = std::min(best, a * a + b * b);
  }
  return best;
}

struct Start {
  Eigen::Vector3d theta;
  double cost = 0.0;
  int iterations = 0;
  bool converged = false;
};

Start refine(std::span<const double> signals, std::span<const ScanParams> protocols, const FitOptions& opts,
             Eigen::Vector3d theta, double norm_y, bool near_null, std::vector<double>* trace) {
  const Eigen::Vector3d lower(0.0, opts.t1_min, opts.t2_min);
  const Eigen::Vector3d upper(std::numeric_limits<double>::infinity(), opts.t1_max, opts.t2_max);
  auto clamp = [&](Eigen::Vector3d v) {
    for (int k = 0; k < 3; ++k) v[k] = std::clamp(v[k], lower[k], upper[k]);
    return v;
  };

  Eval cur = evaluate(signals, protocols, theta, true);
  if (trace) trace->push_back(std::sqrt(cur.cost));
  const double tol_cost = std::pow(opts.residual_tolerance * norm_y, 2);
  bool converged = cur.cost <= tol_cost;
  double lambda = opts.damping_init;
  int it = 0;
  while (!near_null && !converged && it < opts.max_iterations) {
    ++it;
    Eigen::Matrix3d a = cur.jtj;
    for (int k = 0; k < 3; ++k) a(k, k) += lambda * std::max(cur.jtj(k, k), 1e-300);
    const Eigen::Vector3d step = a.ldlt().solve(cur.jtr);
    if (!step.allFinite()) {
      lambda *= opts.damping_up;
      if (lambda > 1e20) break;
      continue;
    }
    const Eigen::Vector3d cand = clamp(theta + step);
    const Eval next = evaluate(signals, protocols, cand, true);
    if (next.cost < cur.cost) {
      double rel = 0.0;
      for (int k = 0; k < 3; ++k) rel = std::max(rel, std::abs(cand[k] - theta[k]) / std::max(std::abs(theta[k]), 1e-300));
      theta = cand;
      cur = next;
      if (trace) trace->push_back(std::sqrt(cur.cost));
      lambda = std::max(lambda * opts.damping_down, 1e-15);
      if (rel < opts.step_tolerance || cur.cost <= tol_cost) converged = true;
    } else {
      lambda *= opts.damping_up;
      if (lambda > 1e20) {
        // No descent direction left at machine precision.
        converged = true;
        break;
      }
    }
  }
  return {theta, cur.cost, it, converged && !near_null};
}

}  // namespace

FitResult fit_voxel(std::span<const double> signals, std::span<const ScanParams> protocols, const FitOptions& opts,
                    std::vector<double>* trace) {
  opts.validate();
  if (signals.size() != protocols.size()) throw ShapeError("fit_voxel: one protocol per signal required");
  if (signals.empty()) throw InvalidArgument("fit_voxel: no observations");
  double norm_y = 0.0;
  for (double v : signals) {
    if (!std::isfinite(v)) throw NumericError("fit_voxel: non-finite signal");
    norm_y += v * v;
  }
  norm_y = std::sqrt(norm_y);
  for (const auto& p : protocols) p.validate();

  FitResult res;
  res.ill_posed = !identifiable(protocols);
  if (norm_y == 0.0) {
    res.t1_ms = opts.t1_min;
    res.t2_ms = opts.t2_min;
    return res;
  }

  // Seeds: local minima of the (T1, T2) grid with closed-form PD.
  const auto t1_grid = log_grid(opts.t1_min, opts.t1_max, opts.n_t1);
  const auto t2_grid = log_grid(opts.t2_min, opts.t2_max, opts.n_t2);
  const auto n1 = t1_grid.size(), n2 = t2_grid.size();
  std::vector<double> basis(signals.size());
  std::vector<double> grid_cost(n1 * n2, std::numeric_limits<double>::infinity());
  std::vector<double> grid_pd(n1 * n2, 0.0);
  for (std::size_t a = 0; a < n1; ++a) {
    for (std::size_t b = 0; b < n2; ++b) {
      double den = 0.0;
      for (std::size_t i = 0; i < signals.size(); ++i) {
        basis[i] = signal(1.0, t1_grid[a], t2_grid[b], protocols[i]);
        den += basis[i] * basis[i];
      }
      if (!(den > 0.0)) continue;
      const double pd = std::max(0.0, pd_closed_form(signals, basis));
      double cost = 0.0;
      for (std::size_t i = 0; i < signals.size(); ++i) {
        const double r = signals[i] - pd * basis[i];
        cost += r * r;
      }
      grid_cost[a * n2 + b] = cost;
      grid_pd[a * n2 + b] = pd;
    }
  }
  std::vector<std::pair<double, std::size_t>> seeds;
  for (std::size_t a = 0; a < n1; ++a) {
    for (std::size_t b = 0; b < n2; ++b) {
      const double c = grid_cost[a * n2 + b];
      if (!std::isfinite(c)) continue;
      bool minimum = true;
      for (int da = -1; da <= 1 && minimum; ++da) {
        for (int db = -1; db <= 1; ++db) {
          const auto x = static_cast<std::ptrdiff_t>(a) + da, y = static_cast<std::ptrdiff_t>(b) + db;
          if ((da == 0 && db == 0) || x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(n1) ||
              y >= static_cast<std::ptrdiff_t>(n2)) {
            continue;
          }
          const double o = grid_cost[static_cast<std::size_t>(x) * n2 + static_cast<std::size_t>(y)];
          // ties broken by index so plateaus yield one seed
          if (o < c || (o == c && static_cast<std::size_t>(x) * n2 + static_cast<std::size_t>(y) < a * n2 + b)) {
            minimum = false;
            break;
          }
        }
      }
      if (minimum) seeds.emplace_back(c, a * n2 + b);
    }
  }
  std::sort(seeds.begin(), seeds.end());
  if (seeds.size() > static_cast<std::size_t>(kMaxStarts)) seeds.resize(static_cast<std::size_t>(kMaxStarts));

  // Observed FLAIR signal at the inversion null: the magnitude kink makes the
  // Jacobian meaningless, keep the grid estimate.
  bool near_null = false;
  for (std::size_t i = 0; i < signals.size(); ++i) {
    if (protocols[i].sequence == Sequence::Flair && std::abs(signals[i]) <= 1e-6 * norm_y) near_null = true;
  }

  std::vector<Start> starts;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    const std::size_t cell = seeds[s].second;
    const Eigen::Vector3d theta(grid_pd[cell], t1_grid[cell / n2], t2_grid[cell % n2]);
    starts.push_back(refine(signals, protocols, opts, theta, norm_y, near_null, s == 0 ? trace : nullptr));
    if (near_null) break;
  }
  if (!near_null && opts.use_prior) {
    for (auto t : {Tissue::Wm, Tissue::Gm, Tissue::Csf, Tissue::Lesion}) {
      const auto& p = opts.prior.at(t);
      const double t1 = std::clamp(p.t1.mean, opts.t1_min, opts.t1_max);
      const double t2 = std::clamp(p.t2.mean, opts.t2_min, opts.t2_max);
      double den = 0.0;
      for (std::size_t i = 0; i < signals.size(); ++i) {
        basis[i] = signal(1.0, t1, t2, protocols[i]);
        den += basis[i] * basis[i];
      }
      if (!(den > 0.0)) continue;
      const Eigen::Vector3d theta(std::max(0.0, pd_closed_form(signals, basis)), t1, t2);
      starts.push_back(refine(signals, protocols, opts, theta, norm_y, false, nullptr));
    }
  }
  if (starts.empty()) {
    res.t1_ms = opts.t1_min;
    res.t2_ms = opts.t2_min;
    return res;
  }

  // Three magnitude observations can have several exact solutions: mirror
  // images across the FLAIR null, and close pairs inside one grid cell.
  // Restart around every best-fitting solution on a half-cell lattice.
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : starts) best = std::min(best, s.cost);
  auto tie = [&] { return std::pow(std::sqrt(best) + kTieTolerance * norm_y, 2); };
  if (!near_null) {
    const double d1 = std::log(t1_grid[1] / t1_grid[0]) / 2.0, d2 = std::log(t2_grid[1] / t2_grid[0]) / 2.0;
    const std::size_t primary = starts.size();
    for (std::size_t s = 0; s < primary; ++s) {
      if (starts[s].cost > tie()) continue;
      const Eigen::Vector3d centre = starts[s].theta;
      for (int a = -kExplore; a <= kExplore; ++a) {
        for (int b = -kExplore; b <= kExplore; ++b) {
          if (a == 0 && b == 0) continue;
          const double t1 = std::clamp(centre[1] * std::exp(a * d1), opts.t1_min, opts.t1_max);
          const double t2 = std::clamp(centre[2] * std::exp(b * d2), opts.t2_min, opts.t2_max);
          double den = 0.0;
          for (std::size_t i = 0; i < signals.size(); ++i) {
            basis[i] = signal(1.0, t1, t2, protocols[i]);
            den += basis[i] * basis[i];
          }
          if (!(den > 0.0)) continue;
          const Eigen::Vector3d theta(std::max(0.0, pd_closed_form(signals, basis)), t1, t2);
          starts.push_back(refine(signals, protocols, opts, theta, norm_y, false, nullptr));
          best = std::min(best, starts.back().cost);
        }
      }
    }
  }

  // Among equally good fits keep the most tissue-like one.
  const Start* pick = nullptr;
  double pick_score = std::numeric_limits<double>::infinity();
  for (const auto& s : starts) {
    if (s.cost > tie()) continue;
    const double score = opts.use_prior ? prior_distance(opts.prior, s.theta[1], s.theta[2]) : s.theta[1];
    if (!pick || score < pick_score) {
      pick = &s;
      pick_score = score;
    }
  }
  res.pd = pick->theta[0];
  res.t1_ms = pick->theta[1];
  res.t2_ms = pick->theta[2];
  res.residual_norm = std::sqrt(pick->cost);
  for (const auto& s : starts) res.iterations += s.iterations;
  res.converged = pick->converged && !res.ill_posed;
  return res;
}

FitMapResult fit_map(std::span<const WeightedImage> stack, const Mask& mask, const FitOptions& opts, int threads) {
  opts.validate();
  if (stack.empty()) throw InvalidArgument("fit_map: empty image stack");
  for (const auto& img : stack) {
    if (!img.data.same_shape(mask)) throw ShapeError("fit_map: image and mask sizes differ");
  }
  std::vector<ScanParams> protocols;
  for (const auto& img : stack) protocols.push_back(img.params);

  const std::size_t h = mask.height, w = mask.width, n = h * w;
  FitMapResult out;
  out.maps.mask = mask;
  out.maps.t1 = Image(h, w, 0.0f);
  out.maps.t2 = Image(h, w, 0.0f);
  out.maps.pd = Image(h, w, 0.0f);
  out.converged = Mask(h, w, 0);
  std::vector<FitResult> results(n);

  auto work = [&](std::size_t begin, std::size_t step) {
    std::vector<double> y(stack.size());
    for (std::size_t i = begin; i < n; i += step) {
      if (!mask.data[i]) continue;
      for (std::size_t k = 0; k < stack.size(); ++k) y[k] = stack[k].data.data[i];
      results[i] = fit_voxel(y, protocols, opts);
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(t, workers);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.data[i]) continue;
    const auto& r = results[i];
    out.maps.t1.data[i] = static_cast<float>(r.t1_ms);
    out.maps.t2.data[i] = static_cast<float>(r.t2_ms);
    out.maps.pd.data[i] = static_cast<float>(r.pd);
    out.converged.data[i] = r.converged;
    out.fitted += 1;
    out.converged_count += r.converged;
    out.ill_posed_count += r.ill_posed;
    out.residuals.push_back(r.residual_norm);
  }
  return out;
}

double jacobian_check(double t1_ms, double t2_ms, double pd, const ScanParams& protocol) {
  const auto a = signal_with_jacobian(pd, t1_ms, t2_ms, protocol);
  const double analytic[3] = {a.d_pd, a.d_t1, a.d_t2};
  const double theta[3] = {pd, t1_ms, t2_ms};
  double worst = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double h = 1e-5 * std::abs(theta[k]);
    double plus[3] = {theta[0], theta[1], theta[2]};
    double minus[3] = {theta[0], theta[1], theta[2]};
    plus[k] += h;
    minus[k] -= h;
    const double fp = signal(plus[0], plus[1], plus[2], protocol);
    const double fm = signal(minus[0], minus[1], minus[2], protocol);
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[k] - fd) / std::max({std::abs(analytic[k]), std::abs(fd), 1e-12}));
  }
  return worst;
}

}  // namespace qmri::fit
