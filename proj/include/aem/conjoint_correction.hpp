#pragma once

// Correction stage for conjoint data: a regularized multinomial logistic
// regression f ~ P(y | x, z) fitted on the primary (human-labeled) rows over
// features [flattened option attributes || one-hot(z)], then applied to the
// auxiliary rows to produce soft predicted-human choices.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aem/domain.hpp"
#include "aem/errors.hpp"
#include "aem/math.hpp"

namespace aem {

// Fitted correction model. Coefficients are (K+1 classes) x (feature dim);
// class K is the outside alternative and is always present (protected by the
// L2 penalty even when unobserved in training).
struct CorrectionModel {
  Mat coefficients;      // (K+1) x d
  Vec intercepts;        // K+1
  double lambda = 1e-4;  // L2 strength
  std::size_t q = 0;     // attributes per option
  int k_inside = 0;      // inside options per task
  bool include_interactions = false;
  // Training metadata
  int iterations = 0;
  double final_loss = 0.0;
  bool converged = false;
  bool separation_flagged = false;

  std::size_t n_classes() const { return static_cast<std::size_t>(k_inside) + 1; }
  std::size_t feature_dim() const { return coefficients.cols; }
};

struct CorrectionFitOptions {
  double lambda = 1e-4;
  double tol = 1e-8;       // gradient infinity-norm
  int max_iter = 5000;
  bool include_interactions = false;  // append x * onehot(z) interaction block
};

namespace detail {

// Feature map for one row: [flattened K x q option attributes || one-hot(z)]
// with optional elementwise x-by-z interactions appended.
inline void correction_features(const ChoiceTask& task, int z, bool interactions, Vec& out) {
  const std::size_t kq = task.k_inside() * task.q();
  const std::size_t n_classes = task.k_inside() + 1;
  const std::size_t dim = kq + n_classes + (interactions ? kq : 0);
  out.assign(dim, 0.0);
  for (std::size_t i = 0; i < kq; ++i) out[i] = task.options.a[i];
  out[kq + static_cast<std::size_t>(z)] = 1.0;
  if (interactions && z < static_cast<int>(task.k_inside())) {
    // Interactions: the chosen agent option's attribute block, repeated.
    for (std::size_t i = 0; i < kq; ++i)
      out[kq + n_classes + i] = task.options.a[i] * (static_cast<std::size_t>(z) == i / task.q() ? 1.0 : 0.0);
  }
}

struct CorrectionEval {
  double loss = 0.0;
  Mat grad_w;
  Vec grad_b;
};

// Regularized multinomial cross-entropy over the design matrix rows.
inline CorrectionEval correction_eval(const Mat& features, std::span<const int> y,
                                      const Mat& w, const Vec& b, double lambda) {
  const std::size_t n = features.rows;
  const std::size_t c = w.rows;
  const std::size_t d = w.cols;
  CorrectionEval ev;
  ev.grad_w = Mat(c, d, 0.0);
  ev.grad_b.assign(c, 0.0);
  Vec logits(c);
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = features.row(r);
    for (std::size_t k = 0; k < c; ++k) {
      const double* wk = w.row(k);
      double s = b[k];
      for (std::size_t j = 0; j < d; ++j) s += wk[j] * x[j];
      logits[k] = s;
    }
    softmax_inplace(logits);
    const auto yi = static_cast<std::size_t>(y[r]);
    ev.loss -= std::log(std::max(logits[yi], 1e-300));
    for (std::size_t k = 0; k < c; ++k) {
      const double delta = logits[k] - (k == yi ? 1.0 : 0.0);
      ev.grad_b[k] += delta;
      double* gk = ev.grad_w.row(k);
      for (std::size_t j = 0; j < d; ++j) gk[j] += delta * x[j];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  ev.loss *= inv_n;
  for (double& g : ev.grad_w.a) g *= inv_n;
  for (double& g : ev.grad_b) g *= inv_n;
  // L2 penalty on weights (not intercepts).
  for (std::size_t i = 0; i < w.a.size(); ++i) {
    ev.loss += 0.5 * lambda * w.a[i] * w.a[i];
    ev.grad_w.a[i] += lambda * w.a[i];
  }
  return ev;
}

}  // namespace detail

// Builds the design matrix for a set of (task, agent choice) rows.
inline Mat correction_design(std::span<const ChoiceTask> tasks, std::span<const int> z,
                             bool interactions = false) {
  if (tasks.empty()) throw validation_error("correction_design: no rows");
  if (tasks.size() != z.size()) throw dimension_error("correction_design: size mismatch");
  Vec row;
  detail::correction_features(tasks[0], z[0] >= 0 ? z[0] : 0, interactions, row);
  Mat out(tasks.size(), row.size());
  for (std::size_t r = 0; r < tasks.size(); ++r) {
    if (z[r] < 0 || z[r] > static_cast<int>(tasks[r].k_inside()))
      throw validation_error("correction_design: agent label out of range at row " +
                             std::to_string(r + 1));
    detail::correction_features(tasks[r], z[r], interactions, row);
    if (row.size() != out.cols) throw dimension_error("correction_design: ragged feature rows");
    std::copy(row.begin(), row.end(), out.row(r));
  }
  return out;
}

// Loss at a parameter point, exposed for gradient checking.
inline double correction_loss(const Mat& features, std::span<const int> y, const Mat& w,
                              const Vec& b, double lambda) {
  return detail::correction_eval(features, y, w, b, lambda).loss;
}

// Analytic gradient at a parameter point, exposed for gradient checking.
inline std::pair<Mat, Vec> correction_gradient(const Mat& features, std::span<const int> y,
                                               const Mat& w, const Vec& b, double lambda) {
  detail::CorrectionEval ev = detail::correction_eval(features, y, w, b, lambda);
  return {std::move(ev.grad_w), std::move(ev.grad_b)};
}

// Fits the correction model on primary rows: full-batch gradient descent
// with backtracking line search, run to gradient-norm tol or max_iter.
// Deterministic: fixed zero start, no stochasticity. Throws numeric_error if
// the loss goes non-finite; flags (rather than clips) apparent separation
// when fitted without regularization.
inline CorrectionModel fit_correction(std::span<const ChoiceTask> tasks,
                                      std::span<const int> y, std::span<const int> z,
                                      const CorrectionFitOptions& opt = {}) {
  if (tasks.empty()) throw validation_error("fit_correction: empty primary set");
  if (tasks.size() != y.size() || tasks.size() != z.size())
    throw dimension_error("fit_correction: row count mismatch");
  const std::size_t q = tasks[0].q();
  const int k_inside = static_cast<int>(tasks[0].k_inside());
  for (const ChoiceTask& t : tasks) {
    check_task(t, q);
    if (static_cast<int>(t.k_inside()) != k_inside)
      throw dimension_error("fit_correction: option count varies across rows");
  }
  for (std::size_t r = 0; r < y.size(); ++r)
    if (y[r] < 0 || y[r] > k_inside)
      throw validation_error("fit_correction: human label out of range at row " +
                             std::to_string(r + 1));

  const Mat features = correction_design(tasks, z, opt.include_interactions);
  const std::size_t n_classes = static_cast<std::size_t>(k_inside) + 1;

  CorrectionModel model;
  model.lambda = opt.lambda;
  model.q = q;
  model.k_inside = k_inside;
  model.include_interactions = opt.include_interactions;
  model.coefficients = Mat(n_classes, features.cols, 0.0);
  model.intercepts.assign(n_classes, 0.0);

  std::vector<int> yy(y.begin(), y.end());
  detail::CorrectionEval ev =
      detail::correction_eval(features, yy, model.coefficients, model.intercepts, opt.lambda);
  double step = 1.0;
  int iter = 0;
  for (; iter < opt.max_iter; ++iter) {
    if (!std::isfinite(ev.loss))
      throw numeric_error("fit_correction: non-finite loss at iteration " + std::to_string(iter));
    double gnorm = std::max(max_abs(ev.grad_w.a), max_abs(ev.grad_b));
    if (gnorm <= opt.tol) break;
    // Backtracking line search along the negative gradient.
    double g2 = 0.0;
    for (double g : ev.grad_w.a) g2 += g * g;
    for (double g : ev.grad_b) g2 += g * g;
    step *= 2.0;  // allow the step to grow back after conservative iterations
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      Mat w_try = model.coefficients;
      Vec b_try = model.intercepts;
      for (std::size_t i = 0; i < w_try.a.size(); ++i) w_try.a[i] -= step * ev.grad_w.a[i];
      for (std::size_t i = 0; i < b_try.size(); ++i) b_try[i] -= step * ev.grad_b[i];
      detail::CorrectionEval trial = detail::correction_eval(features, yy, w_try, b_try, opt.lambda);
      if (std::isfinite(trial.loss) && trial.loss <= ev.loss - 1e-4 * step * g2) {
        model.coefficients = std::move(w_try);
        model.intercepts = std::move(b_try);
        ev = std::move(trial);
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;  // no further descent at machine precision
  }
  model.iterations = iter;
  model.final_loss = ev.loss;
  model.converged = std::max(max_abs(ev.grad_w.a), max_abs(ev.grad_b)) <= opt.tol;
  if (opt.lambda == 0.0) {
    // Separation: the unpenalized optimum sits at infinity. Detectable either
    // as runaway coefficients (stopped mid-divergence) or as every training
    // row's own label fitted at probability ~1 (margin spread over several
    // redundant separating features keeps each coefficient small).
    double worst_label_prob = 1.0;
    Vec logits(n_classes);
    for (std::size_t r = 0; r < features.rows; ++r) {
      const double* x = features.row(r);
      for (std::size_t k = 0; k < n_classes; ++k) {
        const double* wk = model.coefficients.row(k);
        double s = model.intercepts[k];
        for (std::size_t j = 0; j < features.cols; ++j) s += wk[j] * x[j];
        logits[k] = s;
      }
      softmax_inplace(logits);
      worst_label_prob = std::min(worst_label_prob, logits[static_cast<std::size_t>(yy[r])]);
    }
    if (worst_label_prob > 0.999 || max_abs(model.coefficients.a) > 30.0)
      model.separation_flagged = true;
  }
  return model;
}

// Applies the fitted model to one (task, z) row: soft predicted-human choice
// over K+1 classes (outside last).
inline ChoiceLabel predict_soft_choice(const CorrectionModel& model, const ChoiceTask& task,
                                       int z) {
  if (task.q() != model.q || static_cast<int>(task.k_inside()) != model.k_inside)
    throw dimension_error("predict_soft_choice: task shape mismatch");
  if (z < 0 || z > model.k_inside)
    throw validation_error("predict_soft_choice: agent label out of range");
  Vec x;
  detail::correction_features(task, z, model.include_interactions, x);
  if (x.size() != model.feature_dim())
    throw dimension_error("predict_soft_choice: feature dimension mismatch");
  Vec logits(model.n_classes());
  for (std::size_t k = 0; k < model.n_classes(); ++k) {
    const double* wk = model.coefficients.row(k);
    double s = model.intercepts[k];
    for (std::size_t j = 0; j < x.size(); ++j) s += wk[j] * x[j];
    logits[k] = s;
  }
  softmax_inplace(logits);
  return ChoiceLabel::soft_label(std::move(logits));
}

// Batch prediction over auxiliary rows.
inline std::vector<ChoiceLabel> predict_soft_choices(const CorrectionModel& model,
                                                     std::span<const ChoiceTask> tasks,
                                                     std::span<const int> z) {
  if (tasks.size() != z.size()) throw dimension_error("predict_soft_choices: size mismatch");
  std::vector<ChoiceLabel> out;
  out.reserve(tasks.size());
  for (std::size_t r = 0; r < tasks.size(); ++r)
    out.push_back(predict_soft_choice(model, tasks[r], z[r]));
  return out;
}

}  // namespace aem
