#pragma once

// Inference stage: choice-model part-worth estimation (hard or soft labels),
// the five-estimator comparison suite, MAPE / bias-reduction metrics, and the
// 2x2 difference-in-differences effect estimator with classic or
// cluster-by-region standard errors.

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "aem/domain.hpp"
#include "aem/errors.hpp"
#include "aem/math.hpp"

namespace aem {

inline double t_quantile(double df, double p) {
  return boost::math::quantile(boost::math::students_t(df), p);
}

inline double t_cdf(double df, double x) {
  return boost::math::cdf(boost::math::students_t(df), x);
}

// Two-sided p-value for a t statistic.
inline double t_two_sided_p(double df, double t) {
  return 2.0 * (1.0 - t_cdf(df, std::fabs(t)));
}

// ---------------------------------------------------------------------------
// Multinomial logit
// ---------------------------------------------------------------------------

// Choice probabilities for one task: softmax over inside-option utilities
// x_j . beta with the outside alternative pinned at utility zero. Returns
// K+1 probabilities, outside last; when the task has no outside alternative
// the last entry is exactly 0.
inline Vec mnl_choice_probs(const ChoiceTask& task, std::span<const double> beta) {
  if (task.q() != beta.size()) throw dimension_error("mnl_choice_probs: beta length mismatch");
  const std::size_t k = task.k_inside();
  Vec util(task.has_outside ? k + 1 : k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    double u = 0.0;
    const double* row = task.options.row(j);
    for (std::size_t a = 0; a < beta.size(); ++a) u += row[a] * beta[a];
    if (!std::isfinite(u)) throw numeric_error("mnl_choice_probs: non-finite utility");
    util[j] = u;
  }
  softmax_inplace(util);
  if (!task.has_outside) util.push_back(0.0);
  return util;
}

struct MnlOptions {
  double tol = 1e-8;     // gradient infinity-norm threshold
  int max_iter = 200;    // Newton iterations
  double ridge = 0.0;    // L2 penalty; also the separation fallback strength
};

namespace detail {

// Negative log-likelihood, gradient and Hessian of the weighted MNL
// cross-entropy at beta. Targets come from hard or soft labels.
struct MnlEval {
  double loss = 0.0;
  Vec grad;
  Mat hess;
};

inline MnlEval mnl_eval(std::span<const ChoiceTask> tasks, std::span<const ChoiceLabel> labels,
                        std::span<const double> weights, std::span<const double> beta,
                        double ridge, bool want_hess) {
  const std::size_t q = beta.size();
  MnlEval ev;
  ev.grad.assign(q, 0.0);
  if (want_hess) ev.hess = Mat(q, q, 0.0);
  double total_weight = 0.0;
  Vec m(q);  // probability-weighted mean attribute vector of one task
  for (std::size_t r = 0; r < tasks.size(); ++r) {
    const ChoiceTask& task = tasks[r];
    const double w = weights.empty() ? 1.0 : weights[r];
    if (w == 0.0) continue;
    total_weight += w;
    const std::size_t k = task.k_inside();
    Vec p = mnl_choice_probs(task, beta);
    const ChoiceLabel& lab = labels[r];
    std::fill(m.begin(), m.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const double* row = task.options.row(j);
      for (std::size_t a = 0; a < q; ++a) m[a] += p[j] * row[a];
    }
    if (lab.kind == ChoiceLabel::Kind::hard) {
      const int y = lab.hard_index;
      ev.loss -= w * std::log(std::max(p[static_cast<std::size_t>(y)], 1e-300));
      if (y < static_cast<int>(k)) {
        const double* row = task.options.row(static_cast<std::size_t>(y));
        for (std::size_t a = 0; a < q; ++a) ev.grad[a] -= w * row[a];
      }
    } else {
      for (std::size_t j = 0; j <= k; ++j)
        if (lab.soft[j] > 0.0) ev.loss -= w * lab.soft[j] * std::log(std::max(p[j], 1e-300));
      for (std::size_t j = 0; j < k; ++j) {
        const double* row = task.options.row(j);
        for (std::size_t a = 0; a < q; ++a) ev.grad[a] -= w * lab.soft[j] * row[a];
      }
    }
    // + sum_j p_j x_j (the model side of the gradient).
    for (std::size_t a = 0; a < q; ++a) ev.grad[a] += w * m[a];
    if (want_hess) {
      // sum_j p_j x_j x_j' - m m'   (outside option contributes x = 0)
      for (std::size_t j = 0; j < k; ++j) {
        const double* row = task.options.row(j);
        const double pj = w * p[j];
        for (std::size_t a = 0; a < q; ++a)
          for (std::size_t b = a; b < q; ++b) ev.hess(a, b) += pj * row[a] * row[b];
      }
      for (std::size_t a = 0; a < q; ++a)
        for (std::size_t b = a; b < q; ++b) ev.hess(a, b) -= w * m[a] * m[b];
    }
  }
  // Normalize to per-observation scale so the convergence tolerance and the
  // ridge strength do not depend on dataset size or weight units.
  if (total_weight <= 0.0) throw validation_error("mnl_eval: total weight is zero");
  ev.loss /= total_weight;
  for (std::size_t a = 0; a < q; ++a) ev.grad[a] /= total_weight;
  if (want_hess)
    for (double& h : ev.hess.a) h /= total_weight;
  if (ridge > 0.0) {
    for (std::size_t a = 0; a < q; ++a) {
      ev.loss += 0.5 * ridge * beta[a] * beta[a];
      ev.grad[a] += ridge * beta[a];
      if (want_hess) ev.hess(a, a) += ridge;
    }
  }
  if (want_hess)  // mirror the upper triangle
    for (std::size_t a = 0; a < q; ++a)
      for (std::size_t b = 0; b < a; ++b) ev.hess(a, b) = ev.hess(b, a);
  return ev;
}

}  // namespace detail

// Loss-only evaluation, exposed for gradient checking.
inline double mnl_loss(std::span<const ChoiceTask> tasks, std::span<const ChoiceLabel> labels,
                       std::span<const double> beta, double ridge = 0.0,
                       std::span<const double> weights = {}) {
  return detail::mnl_eval(tasks, labels, weights, beta, ridge, false).loss;
}

// Analytic gradient, exposed for gradient checking.
inline Vec mnl_gradient(std::span<const ChoiceTask> tasks, std::span<const ChoiceLabel> labels,
                        std::span<const double> beta, double ridge = 0.0,
                        std::span<const double> weights = {}) {
  return detail::mnl_eval(tasks, labels, weights, beta, ridge, false).grad;
}

// Fits part-worths by damped Newton on the (weighted) cross-entropy. Hard
// labels are one-hot targets; soft labels are used directly as target
// probabilities. Deterministic: fixed zero start, full-batch evaluation,
// deterministic step control. If the optimizer detects separation (utilities
// running away without the gradient closing), it restarts once with a small
// ridge and records that in the result.
inline PartWorth fit_mnl(std::span<const ChoiceTask> tasks, std::span<const ChoiceLabel> labels,
                         const MnlOptions& opt = {}, std::span<const double> weights = {},
                         const std::string& provenance = "") {
  if (tasks.empty()) throw validation_error("fit_mnl: no tasks");
  if (tasks.size() != labels.size()) throw dimension_error("fit_mnl: task/label count mismatch");
  if (!weights.empty() && weights.size() != tasks.size())
    throw dimension_error("fit_mnl: weight count mismatch");
  const std::size_t q = tasks[0].q();
  for (const ChoiceTask& t : tasks) check_task(t, q);
  for (std::size_t r = 0; r < labels.size(); ++r) check_label(labels[r], tasks[r].k_inside());

  double ridge = opt.ridge;
  bool ridge_applied = false;
  PartWorth out;
  out.provenance = provenance;

  for (int attempt = 0; attempt < 2; ++attempt) {
    Vec beta(q, 0.0);
    detail::MnlEval ev = detail::mnl_eval(tasks, labels, weights, beta, ridge, true);
    int iter = 0;
    bool separated = false;
    for (; iter < opt.max_iter; ++iter) {
      if (max_abs(ev.grad) <= opt.tol) break;
      Vec neg_grad(q);
      for (std::size_t a = 0; a < q; ++a) neg_grad[a] = -ev.grad[a];
      Vec step = solve_spd(ev.hess, neg_grad);
      // Backtracking line search on the objective.
      double t = 1.0;
      bool moved = false;
      const double g_dot_d = dot(ev.grad, step);
      for (int ls = 0; ls < 40; ++ls) {
        Vec cand(q);
        for (std::size_t a = 0; a < q; ++a) cand[a] = beta[a] + t * step[a];
        detail::MnlEval trial = detail::mnl_eval(tasks, labels, weights, cand, ridge, true);
        if (std::isfinite(trial.loss) && trial.loss <= ev.loss + 1e-4 * t * g_dot_d) {
          beta = std::move(cand);
          ev = std::move(trial);
          moved = true;
          break;
        }
        t *= 0.5;
      }
      if (!moved) break;  // no descent direction left at machine precision
      if (max_abs(beta) > 40.0) {
        separated = true;
        break;
      }
    }
    if (separated && ridge == 0.0) {
      ridge = 1e-6;  // separation fallback: keep the optimum finite
      ridge_applied = true;
      continue;
    }
    out.beta = beta;
    out.final_loss = ev.loss;
    out.iterations = iter;
    out.converged = max_abs(ev.grad) <= opt.tol;
    out.ridge_applied = ridge_applied;
    return out;
  }
  throw numeric_error("fit_mnl: failed after separation fallback");
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Mean absolute percentage error of beta against the reference beta_star.
inline double mape(std::span<const double> beta, std::span<const double> beta_star) {
  if (beta.size() != beta_star.size()) throw dimension_error("mape: length mismatch");
  if (beta.empty()) throw dimension_error("mape: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < beta.size(); ++i) {
    if (beta_star[i] == 0.0)
      throw numeric_error("mape: reference coefficient " + std::to_string(i) + " is zero");
    s += std::fabs(beta[i] - beta_star[i]) / std::fabs(beta_star[i]);
  }
  return s / static_cast<double>(beta.size());
}

// Change in MAPE relative to the small-human-sample baseline; negative means
// the method improved on it.
inline double bias_reduction(double mape_method, double mape_primary) {
  return mape_method - mape_primary;
}

// ---------------------------------------------------------------------------
// Five-estimator comparison suite
// ---------------------------------------------------------------------------

struct PartworthSuite {
  PartWorth star;      // pooled human labels (primary + hidden auxiliary)
  PartWorth primary;   // primary human labels only
  PartWorth aux;       // auxiliary agent labels only
  PartWorth naive;     // primary human + auxiliary agent labels
  PartWorth corrected; // auxiliary soft predicted-human labels only
};

// Fits all five part-worth estimators on exactly their label sets.
// `aux_hidden_y` is the sequestered human response on the auxiliary rows and
// feeds only the reference estimator.
inline PartworthSuite estimate_partworth_suite(
    std::span<const ChoiceTask> primary_tasks, std::span<const ChoiceLabel> primary_y,
    std::span<const ChoiceLabel> primary_z, std::span<const ChoiceTask> aux_tasks,
    std::span<const ChoiceLabel> aux_z, std::span<const ChoiceLabel> aux_corrected,
    std::span<const ChoiceLabel> aux_hidden_y, const MnlOptions& opt = {}) {
  if (primary_tasks.size() != primary_y.size() || primary_tasks.size() != primary_z.size())
    throw dimension_error("estimate_partworth_suite: primary sizes disagree");
  if (aux_tasks.size() != aux_z.size() || aux_tasks.size() != aux_corrected.size() ||
      aux_tasks.size() != aux_hidden_y.size())
    throw dimension_error("estimate_partworth_suite: auxiliary sizes disagree");

  std::vector<ChoiceTask> pooled_tasks(primary_tasks.begin(), primary_tasks.end());
  pooled_tasks.insert(pooled_tasks.end(), aux_tasks.begin(), aux_tasks.end());

  std::vector<ChoiceLabel> pooled_human(primary_y.begin(), primary_y.end());
  pooled_human.insert(pooled_human.end(), aux_hidden_y.begin(), aux_hidden_y.end());

  std::vector<ChoiceLabel> naive_labels(primary_y.begin(), primary_y.end());
  naive_labels.insert(naive_labels.end(), aux_z.begin(), aux_z.end());

  PartworthSuite suite;
  suite.star = fit_mnl(pooled_tasks, pooled_human, opt, {}, "pooled_human");
  suite.primary = fit_mnl(primary_tasks, primary_y, opt, {}, "primary_human");
  suite.aux = fit_mnl(aux_tasks, aux_z, opt, {}, "agent");
  suite.naive = fit_mnl(pooled_tasks, naive_labels, opt, {}, "naive");
  suite.corrected = fit_mnl(aux_tasks, aux_corrected, opt, {}, "corrected");
  return suite;
}

// ---------------------------------------------------------------------------
// Difference-in-differences
// ---------------------------------------------------------------------------

enum class SeKind : std::uint8_t { classic, cluster_by_region };

// Weighted OLS of outcome on {1, Treatment, Post, Treatment x Post}.
// beta3 (the interaction) is the effect; reported in basis points when the
// outcome is a share. Requires all four arm x period cells populated.
inline EffectEstimate did_estimate(std::span<const PanelCell> panel,
                                   SeKind se_kind = SeKind::cluster_by_region,
                                   bool outcome_is_share = true,
                                   const std::string& method = "did") {
  bool seen[2][2] = {{false, false}, {false, false}};
  for (const PanelCell& c : panel) {
    if (c.weight <= 0.0) throw validation_error("did_estimate: nonpositive weight");
    seen[static_cast<int>(c.arm)][static_cast<int>(c.period)] = true;
  }
  for (int a = 0; a < 2; ++a)
    for (int p = 0; p < 2; ++p)
      if (!seen[a][p])
        throw numeric_error(std::string("did_estimate: design is rank deficient, missing cell ") +
                            to_string(static_cast<Arm>(a)) + "/" +
                            to_string(static_cast<Period>(p)));

  const std::size_t n = panel.size();
  Mat xtx(4, 4, 0.0);
  Vec xty(4, 0.0);
  auto design_row = [](const PanelCell& c, double* x) {
    x[0] = 1.0;
    x[1] = c.arm == Arm::treatment ? 1.0 : 0.0;
    x[2] = c.period == Period::post ? 1.0 : 0.0;
    x[3] = x[1] * x[2];
  };
  double x[4];
  for (const PanelCell& c : panel) {
    design_row(c, x);
    for (int a = 0; a < 4; ++a) {
      for (int b = 0; b < 4; ++b) xtx(a, b) += c.weight * x[a] * x[b];
      xty[a] += c.weight * x[a] * c.outcome;
    }
  }
  Vec coef = solve_linear(xtx, xty);

  // (X'WX)^{-1} for the sandwich / classic variance.
  Mat xtx_inv(4, 4, 0.0);
  for (int k = 0; k < 4; ++k) {
    Vec e(4, 0.0);
    e[k] = 1.0;
    Vec col = solve_linear(xtx, e);
    for (int a = 0; a < 4; ++a) xtx_inv(a, k) = col[a];
  }

  double var3 = 0.0;
  double df = 0.0;
  if (se_kind == SeKind::classic) {
    double rss = 0.0;
    for (const PanelCell& c : panel) {
      design_row(c, x);
      double fit = 0.0;
      for (int a = 0; a < 4; ++a) fit += coef[a] * x[a];
      const double e = c.outcome - fit;
      rss += c.weight * e * e;
    }
    df = static_cast<double>(n) - 4.0;
    const double sigma2 = df > 0.0 ? rss / df : 0.0;
    var3 = sigma2 * xtx_inv(3, 3);
  } else {
    // Cluster-robust (sandwich) variance with clusters = regions.
    std::map<std::string, Vec> scores;
    for (const PanelCell& c : panel) {
      design_row(c, x);
      double fit = 0.0;
      for (int a = 0; a < 4; ++a) fit += coef[a] * x[a];
      const double e = c.outcome - fit;
      Vec& u = scores.try_emplace(c.region_id, Vec(4, 0.0)).first->second;
      for (int a = 0; a < 4; ++a) u[a] += c.weight * e * x[a];
    }
    const double g = static_cast<double>(scores.size());
    if (g < 2.0) throw numeric_error("did_estimate: cluster SE needs at least 2 regions");
    Mat meat(4, 4, 0.0);
    for (const auto& [region, u] : scores)
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) meat(a, b) += u[a] * u[b];
    // Var = A^{-1} meat A^{-1}, small-sample corrected.
    const double nn = static_cast<double>(n);
    const double correction = (g / (g - 1.0)) * ((nn - 1.0) / (nn - 4.0));
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        var3 += xtx_inv(3, a) * meat(a, b) * xtx_inv(b, 3) * correction;
    df = g - 1.0;
  }

  const double se_frac = var3 > 0.0 ? std::sqrt(var3) : 0.0;
  const double unit = outcome_is_share ? 1e4 : 1.0;

  EffectEstimate est;
  est.method = method;
  est.coef = coef;
  est.df = df;
  est.beta3 = coef[3] * unit;
  est.se = se_frac * unit;
  if (se_frac > 0.0 && df > 0.0) {
    est.p_value = t_two_sided_p(df, coef[3] / se_frac);
    const double tq = t_quantile(df, 0.975);
    est.ci_low = (coef[3] - tq * se_frac) * unit;
    est.ci_high = (coef[3] + tq * se_frac) * unit;
  } else {
    est.p_value = coef[3] == 0.0 ? 1.0 : 0.0;
    est.ci_low = est.beta3;
    est.ci_high = est.beta3;
  }
  est.has_ci = true;
  return est;
}

}  // namespace aem
