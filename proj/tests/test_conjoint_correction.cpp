// Correction stage for conjoint data: regularized multinomial logistic
// regression from (option attributes, agent choice) to human choice.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "aem/conjoint_correction.hpp"
#include "aem/econometrics.hpp"
#include "aem/synth_gen.hpp"
#include "helpers.hpp"

using namespace aem;
using testutil::kPropertyCases;

namespace {

struct CorrectionRows {
  std::vector<ChoiceTask> tasks;
  std::vector<int> y;
  std::vector<int> z;
};

CorrectionRows random_rows(Rng& rng, int n, std::size_t k, std::size_t q) {
  CorrectionRows rows;
  for (int r = 0; r < n; ++r) {
    rows.tasks.push_back(testutil::random_task(rng, k, q));
    rows.y.push_back(static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(k))));
    rows.z.push_back(static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(k))));
  }
  return rows;
}

}  // namespace

TEST_CASE("correction gradient agrees with central differences") {
  Rng rng(61, "fd");
  double worst = 0.0;
  for (int c = 0; c < kPropertyCases; ++c) {
    const bool interactions = rng.uniform() < 0.3;
    const double lambda = rng.uniform() < 0.5 ? 0.0 : 1e-2;
    CorrectionRows rows = random_rows(rng, 4, 2, 2);
    const Mat features = correction_design(rows.tasks, rows.z, interactions);
    const std::size_t classes = 3;
    Mat w(classes, features.cols);
    for (double& x : w.a) x = rng.uniform(-0.8, 0.8);
    Vec b = testutil::random_vec(rng, classes, 0.5);

    auto [gw, gb] = correction_gradient(features, rows.y, w, b, lambda);
    const auto loss = [&] { return correction_loss(features, rows.y, w, b, lambda); };
    const double mw = testutil::max_grad_mismatch(loss, w.a, gw.a, 1e-6);
    const double mb = testutil::max_grad_mismatch(loss, b, gb, 1e-6);
    worst = std::max({worst, mw, mb});
    REQUIRE(mw <= 1e-5);
    REQUIRE(mb <= 1e-5);
  }
  INFO("worst relative mismatch " << worst);
  CHECK(worst <= 1e-5);
}

TEST_CASE("training loss never increases with more iterations") {
  Rng rng(62, "monotone");
  for (int c = 0; c < kPropertyCases; ++c) {
    CorrectionRows rows = random_rows(rng, 6, 2, 2);
    double prev = std::numeric_limits<double>::infinity();
    for (int iters = 0; iters <= 10; ++iters) {
      CorrectionFitOptions opt;
      opt.max_iter = iters;
      const CorrectionModel m = fit_correction(rows.tasks, rows.y, rows.z, opt);
      REQUIRE(m.final_loss <= prev + 1e-12);
      prev = m.final_loss;
    }
  }
}

TEST_CASE("row order does not change the fitted model") {
  Rng rng(63, "permute");
  for (int c = 0; c < kPropertyCases; ++c) {
    CorrectionRows rows = random_rows(rng, 8, 2, 2);
    const CorrectionModel base = fit_correction(rows.tasks, rows.y, rows.z);

    std::vector<std::size_t> order(rows.tasks.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    CorrectionRows shuffled;
    for (std::size_t i : order) {
      shuffled.tasks.push_back(rows.tasks[i]);
      shuffled.y.push_back(rows.y[i]);
      shuffled.z.push_back(rows.z[i]);
    }
    const CorrectionModel perm = fit_correction(shuffled.tasks, shuffled.y, shuffled.z);

    double diff = 0.0;
    for (std::size_t i = 0; i < base.coefficients.a.size(); ++i)
      diff = std::max(diff, std::fabs(base.coefficients.a[i] - perm.coefficients.a[i]));
    for (std::size_t i = 0; i < base.intercepts.size(); ++i)
      diff = std::max(diff, std::fabs(base.intercepts[i] - perm.intercepts[i]));

    // For a lambda-strongly-convex objective, two parameter points differ by
    // at most the sum of their gradient norms over lambda. Measure the
    // achieved gradients (the optimizer may stall at machine precision just
    // above its tol); observed drift is ~1e-7, far inside the bound.
    const CorrectionFitOptions defaults;
    const Mat f_base = correction_design(rows.tasks, rows.z);
    const Mat f_perm = correction_design(shuffled.tasks, shuffled.z);
    const auto grad_norm = [&](const Mat& f, std::span<const int> y, const CorrectionModel& m) {
      auto [gw, gb] = correction_gradient(f, y, m.coefficients, m.intercepts, defaults.lambda);
      return std::sqrt(dot(gw.a, gw.a) + dot(gb, gb));
    };
    const double budget =
        (grad_norm(f_base, rows.y, base) + grad_norm(f_perm, shuffled.y, perm)) / defaults.lambda;
    REQUIRE(diff <= budget + 1e-12);
    REQUIRE(diff <= 1e-4);  // and in absolute terms stays negligible
  }
}

TEST_CASE("fitting is deterministic") {
  Rng rng(64, "det");
  for (int c = 0; c < 200; ++c) {
    CorrectionRows rows = random_rows(rng, 10, 3, 2);
    const CorrectionModel a = fit_correction(rows.tasks, rows.y, rows.z);
    const CorrectionModel b = fit_correction(rows.tasks, rows.y, rows.z);
    REQUIRE(a.coefficients.a == b.coefficients.a);
    REQUIRE(a.intercepts == b.intercepts);
    REQUIRE(a.iterations == b.iterations);
    REQUIRE(a.final_loss == b.final_loss);
  }
}

TEST_CASE("an agent-equals-human dataset is learned as the identity map") {
  Rng rng(65, "identity");
  CorrectionRows rows;
  for (int r = 0; r < 300; ++r) {
    rows.tasks.push_back(testutil::random_task(rng, 3, 2));
    const int label = static_cast<int>(rng.uniform_int(0, 3));
    rows.y.push_back(label);
    rows.z.push_back(label);
  }
  const CorrectionModel m = fit_correction(rows.tasks, rows.y, rows.z);
  int correct = 0;
  for (std::size_t r = 0; r < rows.tasks.size(); ++r) {
    const ChoiceLabel pred = predict_soft_choice(m, rows.tasks[r], rows.z[r]);
    const auto arg = static_cast<int>(
        std::max_element(pred.soft.begin(), pred.soft.end()) - pred.soft.begin());
    if (arg == rows.y[static_cast<std::size_t>(r)]) ++correct;
  }
  CHECK(correct == static_cast<int>(rows.tasks.size()));
}

TEST_CASE("a no-signal dataset is learned as the uniform distribution") {
  // Human labels carry no information: every task appears once with each of
  // the four labels, so the label is uniform no matter the features. 2500
  // distinct tasks x 4 labels = 10000 rows.
  Rng rng(66, "noise");
  CorrectionRows rows;
  for (int t = 0; t < 2500; ++t) {
    const ChoiceTask task = testutil::random_task(rng, 3, 2);
    const int z = static_cast<int>(rng.uniform_int(0, 3));
    for (int label = 0; label < 4; ++label) {
      rows.tasks.push_back(task);
      rows.y.push_back(label);
      rows.z.push_back(z);
    }
  }
  const CorrectionModel m = fit_correction(rows.tasks, rows.y, rows.z);
  double worst = 0.0;
  for (std::size_t r = 0; r < rows.tasks.size(); ++r) {
    const ChoiceLabel pred = predict_soft_choice(m, rows.tasks[r], rows.z[r]);
    for (double p : pred.soft) worst = std::max(worst, std::fabs(p - 0.25));
  }
  INFO("largest deviation from uniform " << worst);
  CHECK(worst <= 0.02);
}

TEST_CASE("fitted model beats the copy-the-agent baseline out of sample") {
  // Distorted-agent world: y from beta0, z from a shifted/shrunk rule.
  Rng rng(68, "baseline");
  const Vec beta0 = {0.9, -0.7, 0.5};
  DistortionSpec distortion;
  distortion.scale = 1.6;
  distortion.shift = {0.8, 0.0, -0.5};
  distortion.heterogeneity_shrink = 0.0;
  const Vec beta_agent = apply_distortion(distortion, beta0, beta0);

  CorrectionRows train, test;
  for (int r = 0; r < 2500; ++r) {
    ChoiceTask t = testutil::random_task(rng, 3, 3);
    const int y = rng.discrete(mnl_choice_probs(t, beta0));
    const int z = rng.discrete(mnl_choice_probs(t, beta_agent));
    CorrectionRows& dest = r < 2000 ? train : test;
    dest.tasks.push_back(std::move(t));
    dest.y.push_back(y);
    dest.z.push_back(z);
  }
  const CorrectionModel m = fit_correction(train.tasks, train.y, train.z);

  double model_ll = 0.0, baseline_ll = 0.0;
  const double eps = 0.05;  // smoothing for the otherwise-infinite copy baseline
  for (std::size_t r = 0; r < test.tasks.size(); ++r) {
    const ChoiceLabel pred = predict_soft_choice(m, test.tasks[r], test.z[r]);
    model_ll -= std::log(std::max(pred.soft[static_cast<std::size_t>(test.y[r])], 1e-300));
    const double agree = test.y[r] == test.z[r] ? 1.0 - eps : eps / 3.0;
    baseline_ll -= std::log(agree);
  }
  model_ll /= static_cast<double>(test.tasks.size());
  baseline_ll /= static_cast<double>(test.tasks.size());
  INFO("model " << model_ll << " baseline " << baseline_ll);
  CHECK(model_ll <= baseline_ll);
}

TEST_CASE("soft predictions are normalized probabilities") {
  Rng rng(69, "predict");
  for (int c = 0; c < kPropertyCases; ++c) {
    const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform_int(0, 3));
    const std::size_t q = 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    CorrectionModel m;
    m.q = q;
    m.k_inside = static_cast<int>(k);
    m.coefficients = Mat(k + 1, k * q + k + 1);
    for (double& x : m.coefficients.a) x = rng.uniform(-1.0, 1.0);
    m.intercepts = testutil::random_vec(rng, k + 1, 0.7);

    ChoiceTask t = testutil::random_task(rng, k, q);
    const int z = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(k)));
    const ChoiceLabel a = predict_soft_choice(m, t, z);
    const ChoiceLabel b = predict_soft_choice(m, t, z);  // duplicated row
    REQUIRE(a.soft == b.soft);
    REQUIRE(a.soft.size() == k + 1);
    double total = 0.0;
    for (double p : a.soft) {
      REQUIRE(p >= 0.0);
      total += p;
    }
    REQUIRE(std::fabs(total - 1.0) <= 1e-9);
  }

  // Zero model: uniform over classes regardless of input.
  CorrectionModel zero;
  zero.q = 2;
  zero.k_inside = 3;
  zero.coefficients = Mat(4, 3 * 2 + 4, 0.0);
  zero.intercepts.assign(4, 0.0);
  ChoiceTask t = testutil::random_task(rng, 3, 2);
  const ChoiceLabel u = predict_soft_choice(zero, t, 1);
  for (double p : u.soft) CHECK(p == Catch::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("two-class predictions match the logistic closed form") {
  Rng rng(70, "logistic");
  for (int c = 0; c < kPropertyCases; ++c) {
    // One inside option, one attribute: features are [x, 1(z=0), 1(z=1)].
    CorrectionModel m;
    m.q = 1;
    m.k_inside = 1;
    m.coefficients = Mat(2, 3, 0.0);  // class-1 row stays zero
    m.coefficients(0, 0) = rng.uniform(-1.5, 1.5);
    m.coefficients(0, 1) = rng.uniform(-1.5, 1.5);
    m.coefficients(0, 2) = rng.uniform(-1.5, 1.5);
    m.intercepts = {rng.uniform(-1.0, 1.0), 0.0};

    ChoiceTask t;
    t.options = Mat(1, 1, rng.uniform(-2.0, 2.0));
    const int z = static_cast<int>(rng.uniform_int(0, 1));
    const ChoiceLabel pred = predict_soft_choice(m, t, z);
    const double logit = m.coefficients(0, 0) * t.options(0, 0) +
                         m.coefficients(0, 1) * (z == 0 ? 1.0 : 0.0) +
                         m.coefficients(0, 2) * (z == 1 ? 1.0 : 0.0) + m.intercepts[0];
    const double want = 1.0 / (1.0 + std::exp(-logit));
    REQUIRE(pred.soft[0] == Catch::Approx(want).epsilon(1e-12));
    REQUIRE(pred.soft[1] == Catch::Approx(1.0 - want).epsilon(1e-10));
  }
}

TEST_CASE("separation without regularization is flagged, not hidden") {
  // x > 0 always chooses option 0, x < 0 always the outside: separable.
  CorrectionRows rows;
  for (int r = 0; r < 40; ++r) {
    ChoiceTask t;
    t.options = Mat(1, 1, r % 2 == 0 ? 1.0 : -1.0);
    rows.tasks.push_back(std::move(t));
    rows.y.push_back(r % 2 == 0 ? 0 : 1);
    rows.z.push_back(r % 2 == 0 ? 0 : 1);
  }
  CorrectionFitOptions raw;
  raw.lambda = 0.0;
  raw.max_iter = 5000;
  const CorrectionModel unregularized = fit_correction(rows.tasks, rows.y, rows.z, raw);
  CHECK(unregularized.separation_flagged);

  CorrectionFitOptions ridged;
  ridged.lambda = 1e-4;
  const CorrectionModel tame = fit_correction(rows.tasks, rows.y, rows.z, ridged);
  CHECK_FALSE(tame.separation_flagged);
  CHECK(max_abs(tame.coefficients.a) < 30.0);
}

TEST_CASE("malformed correction inputs are rejected") {
  Rng rng(71, "reject");
  CorrectionRows rows = random_rows(rng, 5, 2, 2);
  CHECK_THROWS_AS(fit_correction(std::vector<ChoiceTask>{}, std::vector<int>{}, std::vector<int>{}),
                  validation_error);
  {
    CorrectionRows bad = rows;
    bad.y[2] = 5;
    CHECK_THROWS_AS(fit_correction(bad.tasks, bad.y, bad.z), validation_error);
  }
  {
    CorrectionRows bad = rows;
    bad.z[3] = -1;
    CHECK_THROWS_AS(fit_correction(bad.tasks, bad.y, bad.z), validation_error);
  }
  {
    CorrectionRows bad = rows;
    bad.tasks[1] = testutil::random_task(rng, 3, 2);  // option count varies
    CHECK_THROWS_AS(fit_correction(bad.tasks, bad.y, bad.z), dimension_error);
  }
  {
    CorrectionRows bad = rows;
    bad.y.pop_back();
    CHECK_THROWS_AS(fit_correction(bad.tasks, bad.y, bad.z), dimension_error);
  }
  const CorrectionModel m = fit_correction(rows.tasks, rows.y, rows.z);
  CHECK_THROWS_AS(predict_soft_choice(m, testutil::random_task(rng, 2, 3), 0), dimension_error);
  CHECK_THROWS_AS(predict_soft_choice(m, rows.tasks[0], 3), validation_error);
}
