// Tests for the region-level correction stage: the KL share objective, the
// attention-weighted mixture corrector, the integrated per-triplet corrector,
// triplet feature encoding, and the Adam training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "aem/domain.hpp"
#include "aem/econometrics.hpp"
#include "aem/errors.hpp"
#include "aem/math.hpp"
#include "aem/regional_correction.hpp"
#include "aem/rng.hpp"
#include "aem/synth_gen.hpp"
#include "helpers.hpp"

using namespace aem;
using Catch::Approx;

namespace {

ShareVector make_share(std::string region, Vec shares) {
  ShareVector s;
  s.region_id = std::move(region);
  s.shares = std::move(shares);
  return s;
}

Mat random_features(Rng& rng, std::size_t n, std::size_t d) {
  Mat h(n, d);
  for (double& v : h.a) v = rng.uniform(-1.5, 1.5);
  return h;
}

// A random region cell. With cover_all, every category in 0..k-1 appears at
// least once (requires n >= k); otherwise categories are drawn freely.
RegionCell random_cell(Rng& rng, std::size_t n, std::size_t d, std::size_t k, bool cover_all) {
  RegionCell cell;
  cell.region_id = "z" + std::to_string(rng.uniform_int(100, 999));
  cell.h = random_features(rng, n, d);
  cell.cat.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t c = (cover_all && i < k) ? static_cast<std::int64_t>(i)
                                                : rng.uniform_int(0, static_cast<std::int64_t>(k) - 1);
    cell.cat[i] = static_cast<std::int8_t>(c);
  }
  cell.target = testutil::random_simplex(rng, k);
  return cell;
}

// Independent mixture forward pass written with explicit index arithmetic
// over the flat parameter vector (no shared code with the library loops).
Vec oracle_mixture_weights(const MixtureModelParams& p, const Mat& h) {
  const std::size_t d = static_cast<std::size_t>(p.input_dim);
  const std::size_t h1 = static_cast<std::size_t>(p.h1);
  const std::size_t h2 = static_cast<std::size_t>(p.h2);
  Vec scores(h.rows);
  for (std::size_t i = 0; i < h.rows; ++i) {
    Vec t(h1, 0.0);
    for (std::size_t j = 0; j < h1; ++j) {
      double acc = p.theta[p.off_b() + j];
      for (std::size_t a = 0; a < d; ++a) acc += h(i, a) * p.theta[p.off_w() + a * h1 + j];
      t[j] = acc;
    }
    double score = 0.0;
    for (std::size_t l = 0; l < h2; ++l) {
      double s = 0.0;
      for (std::size_t j = 0; j < h1; ++j) s += t[j] * p.theta[p.off_v() + j * h2 + l];
      score += p.theta[p.off_u() + l] * std::tanh(s);
    }
    scores[i] = score;
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (double& s : scores) {
    s = std::exp(s - mx);
    total += s;
  }
  for (double& s : scores) s /= total;
  return scores;
}

// Independent integrated forward pass, same spirit as above.
Vec oracle_integrated_row(const IntegratedModelParams& p, const Vec& x) {
  const std::size_t din = static_cast<std::size_t>(p.input_dim);
  const std::size_t h1 = static_cast<std::size_t>(p.h1);
  const std::size_t h2 = static_cast<std::size_t>(p.h2);
  const std::size_t k = static_cast<std::size_t>(p.k_out);
  Vec r(h1);
  for (std::size_t j = 0; j < h1; ++j) {
    double acc = p.theta[p.off_b1() + j];
    for (std::size_t a = 0; a < din; ++a) acc += x[a] * p.theta[p.off_w1() + a * h1 + j];
    r[j] = std::max(0.0, acc);
  }
  Vec s(h2);
  for (std::size_t l = 0; l < h2; ++l) {
    double acc = p.theta[p.off_b2() + l];
    for (std::size_t j = 0; j < h1; ++j) acc += r[j] * p.theta[p.off_w2() + j * h2 + l];
    s[l] = std::tanh(acc);
  }
  Vec g(k);
  for (std::size_t c = 0; c < k; ++c) {
    double acc = p.theta[p.off_b3() + c];
    for (std::size_t l = 0; l < h2; ++l) acc += s[l] * p.theta[p.off_w3() + l * k + c];
    g[c] = acc;
  }
  const double mx = *std::max_element(g.begin(), g.end());
  double total = 0.0;
  for (double& v : g) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : g) v /= total;
  return g;
}

// Noiseless training/validation cells whose targets are produced by a fixed
// reference parameter point of the same architecture.
std::vector<RegionCell> cells_from_mixture_truth(Rng& rng, const MixtureModelParams& truth,
                                                 std::size_t n_cells, std::size_t n, std::size_t k) {
  std::vector<RegionCell> cells;
  for (std::size_t c = 0; c < n_cells; ++c) {
    RegionCell cell = random_cell(rng, n, static_cast<std::size_t>(truth.input_dim), k, true);
    cell.target = mixture_forward(truth, cell.h, cell.cat, k);
    cells.push_back(std::move(cell));
  }
  return cells;
}

std::vector<RegionCell> cells_from_integrated_truth(Rng& rng, const IntegratedModelParams& truth,
                                                    std::size_t n_cells, std::size_t n,
                                                    std::size_t k) {
  std::vector<RegionCell> cells;
  const std::size_t d = static_cast<std::size_t>(truth.input_dim) - k;
  for (std::size_t c = 0; c < n_cells; ++c) {
    RegionCell cell = random_cell(rng, n, d, k, true);
    cell.target = integrated_region_share(truth, cell, k);
    cells.push_back(std::move(cell));
  }
  return cells;
}

}  // namespace

TEST_CASE("exact KL share loss matches independent values and is additive over regions") {
  const ShareVector a_h = make_share("z100", {0.5, 0.5});
  const ShareVector a_l = make_share("z100", {0.25, 0.75});
  const std::vector<ShareVector> pa{a_l}, ha{a_h};
  CHECK(kl_share_loss(pa, ha) == Approx(0.14384103622589045).epsilon(1e-12));

  // A category without human mass contributes nothing.
  const ShareVector b_h = make_share("z101", {0.0, 0.3, 0.7});
  const ShareVector b_l = make_share("z101", {0.2, 0.3, 0.5});
  const std::vector<ShareVector> pb{b_l}, hb{b_h};
  CHECK(kl_share_loss(pb, hb) == Approx(0.23553056563484906).epsilon(1e-12));

  // Identical tables have zero loss.
  const std::vector<ShareVector> same{a_h, b_h};
  CHECK(kl_share_loss(same, same) == 0.0);

  // Two regions sum their per-region losses.
  const std::vector<ShareVector> p2{a_l, b_l}, h2{a_h, b_h};
  CHECK(kl_share_loss(p2, h2) ==
        Approx(kl_share_loss(pa, ha) + kl_share_loss(pb, hb)).margin(1e-15).epsilon(0.0));

  // Loss is nonnegative and zero only at equality on the human support.
  Rng rng(21, "kl");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const std::size_t k = 2 + static_cast<std::size_t>(rng.uniform_int(0, 3));
    const ShareVector human = make_share("z1", testutil::random_simplex(rng, k));
    const ShareVector pred = make_share("z1", testutil::random_simplex(rng, k));
    const std::vector<ShareVector> pv{pred}, hv{human};
    CHECK(kl_share_loss(pv, hv) >= -1e-15);
    CHECK(kl_share_loss(hv, hv) == 0.0);
  }
}

TEST_CASE("exact KL share loss reports support violations with the offending region") {
  const std::vector<ShareVector> human{make_share("z042", {0.5, 0.5})};
  const std::vector<ShareVector> pred{make_share("z042", {1.0, 0.0})};
  bool thrown = false;
  try {
    kl_share_loss(pred, human);
  } catch (const support_violation& e) {
    thrown = true;
    CHECK(e.region_id == "z042");
    CHECK(std::string(e.what()).find("z042") != std::string::npos);
  }
  REQUIRE(thrown);

  // Mismatched tables are rejected up front.
  const std::vector<ShareVector> other{make_share("z999", {0.5, 0.5})};
  REQUIRE_THROWS_AS(kl_share_loss(pred, other), validation_error);
  const std::vector<ShareVector> shorter{make_share("z042", {1.0})};
  REQUIRE_THROWS_AS(kl_share_loss(shorter, human), dimension_error);
  REQUIRE_THROWS_AS(kl_share_loss(pred, std::vector<ShareVector>{}), dimension_error);
}

TEST_CASE("floored KL divergence stays finite off support") {
  const Vec p{0.5, 0.5};
  const Vec q{0.25, 0.75};
  CHECK(kl_divergence_floored(p, q, 0.0) == Approx(0.14384103622589045).epsilon(1e-12));
  CHECK(kl_divergence_floored(p, q, 1e-2) == Approx(0.1176080662742395).epsilon(1e-12));

  // Zero predicted mass under positive truth is finite with a positive floor.
  const Vec p2{0.4, 0.6};
  const Vec q2{0.0, 1.0};
  const double floored = kl_divergence_floored(p2, q2, 1e-2);
  CHECK(std::isfinite(floored));
  CHECK(floored > 0.0);

  // Zero truth mass contributes nothing even where prediction is zero.
  const Vec p3{0.0, 1.0};
  const Vec q3{0.0, 1.0};
  CHECK(kl_divergence_floored(p3, q3, 0.0) == 0.0);

  REQUIRE_THROWS_AS(kl_divergence_floored(p, Vec{0.5}, 0.0), dimension_error);
}

TEST_CASE("attention weights form a softmax over the batch") {
  Rng rng(22, "attention");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const int d = 2 + static_cast<int>(rng.uniform_int(0, 3));
    const int h1 = 2 + static_cast<int>(rng.uniform_int(0, 3));
    const int h2 = 2 + static_cast<int>(rng.uniform_int(0, 2));
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 7));
    const MixtureModelParams p = init_mixture_params(d, h1, h2, rng);
    const Mat h = random_features(rng, n, static_cast<std::size_t>(d));
    const Vec w = mixture_weights(p, h);
    REQUIRE(w.size() == n);
    double total = 0.0;
    for (double wi : w) {
      CHECK(wi > 0.0);
      total += wi;
    }
    CHECK(total == Approx(1.0).margin(1e-12).epsilon(0.0));
  }

  Rng r2(23, "attention.err");
  const MixtureModelParams p = init_mixture_params(4, 3, 2, r2);
  REQUIRE_THROWS_AS(mixture_weights(p, Mat(0, 4)), validation_error);
  REQUIRE_THROWS_AS(mixture_weights(p, random_features(r2, 3, 5)), dimension_error);
}

TEST_CASE("zero attention scorer gives uniform weights and the empirical share") {
  Rng rng(24, "uniformw");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const int d = 2 + static_cast<int>(rng.uniform_int(0, 2));
    MixtureModelParams p = init_mixture_params(d, 3, 2, rng);
    // Zero the final scorer vector: every score collapses to 0 no matter the input.
    std::fill(p.theta.begin() + static_cast<std::ptrdiff_t>(p.off_u()), p.theta.end(), 0.0);
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 6));
    const std::size_t k = 3;
    const Mat h = random_features(rng, n, static_cast<std::size_t>(d));
    const Vec w = mixture_weights(p, h);
    for (double wi : w) CHECK(wi == 1.0 / static_cast<double>(n));

    std::vector<std::int8_t> cat(n);
    Vec freq(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      cat[i] = static_cast<std::int8_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
      freq[static_cast<std::size_t>(cat[i])] += 1.0;
    }
    for (double& f : freq) f /= static_cast<double>(n);
    const Vec share = mixture_forward(p, h, cat, k);
    REQUIRE(share.size() == k);
    for (std::size_t j = 0; j < k; ++j) CHECK(share[j] == Approx(freq[j]).margin(1e-12).epsilon(0.0));
  }
}

TEST_CASE("a single-triplet batch reproduces its own choice exactly") {
  Rng rng(25, "single");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const int d = 2 + static_cast<int>(rng.uniform_int(0, 2));
    const MixtureModelParams p = init_mixture_params(d, 4, 3, rng);
    const Mat h = random_features(rng, 1, static_cast<std::size_t>(d));
    const std::size_t k = 4;
    const std::vector<std::int8_t> cat{static_cast<std::int8_t>(rng.uniform_int(0, 3))};
    const Vec share = mixture_forward(p, h, cat, k);
    for (std::size_t j = 0; j < k; ++j)
      CHECK(share[j] == (j == static_cast<std::size_t>(cat[0]) ? 1.0 : 0.0));
  }
}

TEST_CASE("mixture shares stay in the convex hull of observed choices") {
  Rng rng(26, "hull");
  int saw_missing_category = 0;
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const int d = 2 + static_cast<int>(rng.uniform_int(0, 2));
    const MixtureModelParams p = init_mixture_params(d, 3, 2, rng);
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 4));
    const std::size_t k = 4;
    const Mat h = random_features(rng, n, static_cast<std::size_t>(d));
    std::vector<std::int8_t> cat(n);
    std::vector<bool> present(k, false);
    for (std::size_t i = 0; i < n; ++i) {
      cat[i] = static_cast<std::int8_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
      present[static_cast<std::size_t>(cat[i])] = true;
    }
    const Vec share = mixture_forward(p, h, cat, k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (!present[j]) {
        CHECK(share[j] == 0.0);  // categories never chosen get exactly zero mass
        ++saw_missing_category;
      } else {
        CHECK(share[j] >= 0.0);
      }
      total += share[j];
    }
    CHECK(total == Approx(1.0).margin(1e-12).epsilon(0.0));
  }
  REQUIRE(saw_missing_category > 0);

  Rng r2(27, "hull.err");
  const MixtureModelParams p = init_mixture_params(3, 3, 2, r2);
  const Mat h = random_features(r2, 4, 3);
  REQUIRE_THROWS_AS(mixture_forward(p, h, std::vector<std::int8_t>{0, 1}, 4), dimension_error);
}

TEST_CASE("duplicating the batch halves the weights and keeps the share") {
  Rng rng(28, "dup");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const int d = 2 + static_cast<int>(rng.uniform_int(0, 2));
    const MixtureModelParams p = init_mixture_params(d, 3, 2, rng);
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 5));
    const std::size_t k = 3;
    const Mat h = random_features(rng, n, static_cast<std::size_t>(d));
    std::vector<std::int8_t> cat(n);
    for (std::size_t i = 0; i < n; ++i)
      cat[i] = static_cast<std::int8_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));

    Mat hd(2 * n, static_cast<std::size_t>(d));
    std::copy(h.a.begin(), h.a.end(), hd.a.begin());
    std::copy(h.a.begin(), h.a.end(),
              hd.a.begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(d)));
    std::vector<std::int8_t> catd = cat;
    catd.insert(catd.end(), cat.begin(), cat.end());

    const Vec w = mixture_weights(p, h);
    const Vec wd = mixture_weights(p, hd);
    REQUIRE(wd.size() == 2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(wd[i] == Approx(w[i] / 2.0).margin(1e-12).epsilon(0.0));
      CHECK(wd[i] == wd[n + i]);  // identical rows get identical weights
    }
    const Vec share = mixture_forward(p, h, cat, k);
    const Vec shared = mixture_forward(p, hd, catd, k);
    for (std::size_t j = 0; j < k; ++j) CHECK(shared[j] == Approx(share[j]).margin(1e-12).epsilon(0.0));
  }
}

TEST_CASE("mixture forward pass matches an independent reimplementation") {
  Rng rng(29, "oracle.mix");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const int d = 2 + static_cast<int>(rng.uniform_int(0, 3));
    const int h1 = 2 + static_cast<int>(rng.uniform_int(0, 2));
    const int h2 = 2 + static_cast<int>(rng.uniform_int(0, 2));
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 4));
    const MixtureModelParams p = init_mixture_params(d, h1, h2, rng);
    const Mat h = random_features(rng, n, static_cast<std::size_t>(d));
    const Vec got = mixture_weights(p, h);
    const Vec want = oracle_mixture_weights(p, h);
    for (std::size_t i = 0; i < n; ++i) CHECK(got[i] == Approx(want[i]).margin(1e-12).epsilon(0.0));
  }
}

TEST_CASE("integrated outputs are distributions and average into the region share") {
  Rng rng(30, "integ");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const std::size_t d = 2 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    const std::size_t k = 2 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    const IntegratedModelParams p = init_integrated_params(
        static_cast<int>(d + k), 4, 3, static_cast<int>(k), rng);
    RegionCell cell = random_cell(rng, 1 + static_cast<std::size_t>(rng.uniform_int(0, 5)), d, k,
                                  false);
    const Vec share = integrated_region_share(p, cell, k);
    REQUIRE(share.size() == k);
    double total = 0.0;
    for (double s : share) {
      CHECK(s >= 0.0);
      total += s;
    }
    CHECK(total == Approx(1.0).margin(1e-9).epsilon(0.0));
  }

  // Zeroing the final layer makes every per-triplet output exactly uniform.
  Rng r2(31, "integ.zero");
  for (int c = 0; c < 200; ++c) {
    const std::size_t d = 3, k = 4;
    IntegratedModelParams p =
        init_integrated_params(static_cast<int>(d + k), 4, 3, static_cast<int>(k), r2);
    std::fill(p.theta.begin() + static_cast<std::ptrdiff_t>(p.off_w3()), p.theta.end(), 0.0);
    RegionCell cell = random_cell(r2, 5, d, k, false);
    const Vec share = integrated_region_share(p, cell, k);
    for (double s : share) CHECK(s == 0.25);
    Vec x(d + k, 0.0);
    for (std::size_t j = 0; j < d; ++j) x[j] = r2.uniform(-1.0, 1.0);
    x[d] = 1.0;
    const Vec g = integrated_forward_row(p, x);
    for (double v : g) CHECK(v == 0.25);
  }

  // Identical triplets average to the per-triplet output itself.
  Rng r3(32, "integ.same");
  for (int c = 0; c < 200; ++c) {
    const std::size_t d = 3, k = 3, n = 6;
    const IntegratedModelParams p =
        init_integrated_params(static_cast<int>(d + k), 4, 3, static_cast<int>(k), r3);
    RegionCell cell;
    cell.h = Mat(n, d);
    const Vec row = testutil::random_vec(r3, d, -1.5, 1.5);
    for (std::size_t i = 0; i < n; ++i) std::copy(row.begin(), row.end(), cell.h.row(i));
    cell.cat.assign(n, static_cast<std::int8_t>(1));
    Vec x(d + k, 0.0);
    std::copy(row.begin(), row.end(), x.begin());
    x[d + 1] = 1.0;
    const Vec g = integrated_forward_row(p, x);
    const Vec share = integrated_region_share(p, cell, k);
    for (std::size_t j = 0; j < k; ++j) CHECK(share[j] == Approx(g[j]).margin(1e-12).epsilon(0.0));
  }

  Rng r4(33, "integ.err");
  const IntegratedModelParams p = init_integrated_params(6, 4, 3, 3, r4);
  REQUIRE_THROWS_AS(integrated_forward_row(p, Vec(5, 0.0)), dimension_error);
  RegionCell empty;
  empty.h = Mat(0, 3);
  REQUIRE_THROWS_AS(integrated_region_share(p, empty, 3), validation_error);
}

TEST_CASE("integrated forward pass matches an independent reimplementation") {
  Rng rng(34, "oracle.integ");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const std::size_t din = 3 + static_cast<std::size_t>(rng.uniform_int(0, 3));
    const std::size_t k = 2 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    const IntegratedModelParams p =
        init_integrated_params(static_cast<int>(din), 3, 2, static_cast<int>(k), rng);
    const Vec x = testutil::random_vec(rng, din, -1.5, 1.5);
    const Vec got = integrated_forward_row(p, x);
    const Vec want = oracle_integrated_row(p, x);
    REQUIRE(got.size() == k);
    for (std::size_t j = 0; j < k; ++j) CHECK(got[j] == Approx(want[j]).margin(1e-12).epsilon(0.0));
  }
}

TEST_CASE("analytic gradients match central finite differences for both correctors") {
  constexpr double kEps = 1e-8;

  Rng rng(35, "fd.mix");
  for (int point = 0; point < 25; ++point) {
    MixtureModelParams p = init_mixture_params(3, 4, 3, rng);
    const RegionCell cell = random_cell(rng, 6, 3, 3, true);
    Vec analytic(p.n_params(), 0.0);
    mixture_cell_loss_grad(p, cell, kEps, &analytic);
    const double mismatch = testutil::max_grad_mismatch(
        [&] { return mixture_cell_loss_grad(p, cell, kEps, nullptr); }, p.theta, analytic);
    INFO("mixture point " << point << " mismatch " << mismatch);
    CHECK(mismatch <= 1e-4);
  }

  Rng rng2(36, "fd.integ");
  for (int point = 0; point < 25; ++point) {
    IntegratedModelParams p = init_integrated_params(6, 4, 3, 3, rng2);
    const RegionCell cell = random_cell(rng2, 6, 3, 3, true);
    Vec analytic(p.n_params(), 0.0);
    integrated_cell_loss_grad(p, cell, kEps, &analytic);
    const double mismatch = testutil::max_grad_mismatch(
        [&] { return integrated_cell_loss_grad(p, cell, kEps, nullptr); }, p.theta, analytic);
    INFO("integrated point " << point << " mismatch " << mismatch);
    CHECK(mismatch <= 1e-4);
  }
}

TEST_CASE("zero learning rate leaves parameters at initialization") {
  Rng rng(37, "lr0");
  std::vector<RegionCell> train;
  for (int c = 0; c < 3; ++c) train.push_back(random_cell(rng, 8, 4, 3, true));

  CorrectorConfig cfg;
  cfg.kind = CorrectorKind::mixture;
  cfg.lr = 0.0;
  cfg.epochs = 6;
  cfg.patience = 100;
  cfg.h1 = 4;
  cfg.h2 = 3;
  cfg.seed = 555;
  const TrainedCorrector out = train_correction(train, {}, 3, cfg);
  Rng init_rng(cfg.seed, "init");
  const MixtureModelParams fresh = init_mixture_params(4, cfg.h1, cfg.h2, init_rng);
  REQUIRE(out.mixture.theta == fresh.theta);
  REQUIRE(out.curve.size() == 6);
  for (const TrainingCurvePoint& pt : out.curve) {
    // Cell losses are summed in each epoch's shuffled visit order, so the
    // totals agree only up to reassociation noise.
    CHECK(pt.train_kl == Approx(out.curve[0].train_kl).margin(1e-12).epsilon(0.0));
    CHECK(pt.val_kl == pt.train_kl);  // no validation set: falls back to train KL
  }
  CHECK(out.best_epoch == 1);

  cfg.kind = CorrectorKind::integrated;
  const TrainedCorrector out2 = train_correction(train, {}, 3, cfg);
  Rng init_rng2(cfg.seed, "init");
  const IntegratedModelParams fresh2 = init_integrated_params(4 + 3, cfg.h1, cfg.h2, 3, init_rng2);
  REQUIRE(out2.integrated.theta == fresh2.theta);
}

TEST_CASE("training loss decreases monotonically on noiseless instances") {
  CorrectorConfig cfg;
  cfg.lr = 1e-5;
  cfg.epochs = 10;
  cfg.patience = 100;
  cfg.h1 = 6;
  cfg.h2 = 3;
  cfg.seed = 41;

  {
    Rng truth_rng(777, "truth");
    const MixtureModelParams truth = init_mixture_params(4, cfg.h1, cfg.h2, truth_rng);
    Rng rng(40, "mono.mix");
    const std::vector<RegionCell> train = cells_from_mixture_truth(rng, truth, 4, 20, 3);
    cfg.kind = CorrectorKind::mixture;
    const TrainedCorrector out = train_correction(train, {}, 3, cfg);
    REQUIRE(out.curve.size() == 10);
    for (std::size_t e = 1; e < out.curve.size(); ++e)
      CHECK(out.curve[e].train_kl <= out.curve[e - 1].train_kl + 1e-12);
  }

  {
    Rng truth_rng(778, "truth");
    const IntegratedModelParams truth = init_integrated_params(4 + 3, cfg.h1, cfg.h2, 3, truth_rng);
    Rng rng(42, "mono.integ");
    const std::vector<RegionCell> train = cells_from_integrated_truth(rng, truth, 4, 20, 3);
    cfg.kind = CorrectorKind::integrated;
    const TrainedCorrector out = train_correction(train, {}, 3, cfg);
    REQUIRE(out.curve.size() == 10);
    for (std::size_t e = 1; e < out.curve.size(); ++e)
      CHECK(out.curve[e].train_kl <= out.curve[e - 1].train_kl + 1e-12);
  }
}

TEST_CASE("training is seed-deterministic and restores the best checkpoint") {
  Rng truth_rng(779, "truth");
  const MixtureModelParams truth = init_mixture_params(4, 6, 3, truth_rng);
  Rng rng(43, "det");
  const std::vector<RegionCell> train = cells_from_mixture_truth(rng, truth, 3, 12, 3);
  const std::vector<RegionCell> val = cells_from_mixture_truth(rng, truth, 2, 12, 3);

  CorrectorConfig cfg;
  cfg.kind = CorrectorKind::mixture;
  cfg.lr = 1e-3;
  cfg.epochs = 40;
  cfg.patience = 4;
  cfg.h1 = 6;
  cfg.h2 = 3;
  cfg.seed = 91;

  const TrainedCorrector a = train_correction(train, val, 3, cfg);
  const TrainedCorrector b = train_correction(train, val, 3, cfg);
  REQUIRE(a.mixture.theta == b.mixture.theta);
  REQUIRE(a.best_epoch == b.best_epoch);
  REQUIRE(a.best_val_kl == b.best_val_kl);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t e = 0; e < a.curve.size(); ++e) {
    CHECK(a.curve[e].train_kl == b.curve[e].train_kl);
    CHECK(a.curve[e].val_kl == b.curve[e].val_kl);
  }

  CorrectorConfig other = cfg;
  other.seed = 92;
  const TrainedCorrector c = train_correction(train, val, 3, other);
  REQUIRE(c.mixture.theta != a.mixture.theta);

  // The returned parameters are the checkpoint with the best validation KL.
  REQUIRE(a.best_epoch >= 1);
  REQUIRE(static_cast<std::size_t>(a.best_epoch) <= a.curve.size());
  CHECK(a.curve[static_cast<std::size_t>(a.best_epoch) - 1].val_kl == a.best_val_kl);
  double min_val = a.curve[0].val_kl;
  for (const TrainingCurvePoint& pt : a.curve) min_val = std::min(min_val, pt.val_kl);
  CHECK(a.best_val_kl <= min_val + 1e-12);
  double recomputed = 0.0;
  for (const RegionCell& cell : val)
    recomputed += mixture_cell_loss_grad(a.mixture, cell, cfg.kl_eps, nullptr);
  CHECK(recomputed == Approx(a.best_val_kl).margin(1e-12).epsilon(0.0));

  // Rejected inputs.
  REQUIRE_THROWS_AS(train_correction({}, val, 3, cfg), validation_error);
  std::vector<RegionCell> missing = train;
  missing[0].target.clear();
  missing[0].region_id = "z777";
  try {
    train_correction(missing, val, 3, cfg);
    FAIL("expected a validation error for the missing share target");
  } catch (const validation_error& e) {
    CHECK(std::string(e.what()).find("z777") != std::string::npos);
  }
}

TEST_CASE("the standardizer zero-centers and unit-scales training features") {
  Rng rng(44, "std");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 28));
    const std::size_t d = 1 + static_cast<std::size_t>(rng.uniform_int(0, 5));
    Mat rows = random_features(rng, n, d);
    // Occasionally force a constant column; it must pass through as zeros.
    std::ptrdiff_t const_col = -1;
    if (rng.uniform(0.0, 1.0) < 0.3) {
      const_col = static_cast<std::ptrdiff_t>(rng.uniform_int(0, static_cast<std::int64_t>(d) - 1));
      const double value = rng.uniform(-2.0, 2.0);
      for (std::size_t r = 0; r < n; ++r) rows(r, static_cast<std::size_t>(const_col)) = value;
    }
    Standardizer st;
    REQUIRE(!st.fitted());
    st.fit(rows);
    REQUIRE(st.fitted());

    Vec mean(d, 0.0), var(d, 0.0);
    Mat transformed(n, d);
    for (std::size_t r = 0; r < n; ++r) {
      Vec x(rows.row(r), rows.row(r) + d);
      st.apply_inplace(x);
      for (std::size_t j = 0; j < d; ++j) {
        transformed(r, j) = x[j];
        mean[j] += x[j];
      }
    }
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        const double cdev = transformed(r, j) - mean[j];
        var[j] += cdev * cdev;
      }
    for (double& v : var) v /= static_cast<double>(n);

    for (std::size_t j = 0; j < d; ++j) {
      CHECK(std::fabs(mean[j]) <= 1e-9);
      if (static_cast<std::ptrdiff_t>(j) == const_col) {
        // The mean of n equal values carries ~1 ulp of accumulation noise,
        // so the centered column is tiny but not exactly zero.
        for (std::size_t r = 0; r < n; ++r) CHECK(std::fabs(transformed(r, j)) <= 1e-12);
      } else {
        CHECK(std::fabs(var[j] - 1.0) <= 1e-6);
      }
    }
  }

  Standardizer st;
  REQUIRE_THROWS_AS(st.fit(Mat(0, 3)), validation_error);
  Rng r2(45, "std.err");
  st.fit(random_features(r2, 4, 3));
  Vec wrong(4, 0.0);
  REQUIRE_THROWS_AS(st.apply_inplace(wrong), dimension_error);
}

TEST_CASE("triplet features encode order, menu, period, and demographic structure") {
  const CategorySet cats = CategorySet::standard();
  OrderPoolConfig pool_cfg;
  pool_cfg.n_orders = 25;
  const OrderPool pool = make_order_pool(pool_cfg, 91);

  std::vector<Region> regions(2);
  regions[0].region_id = "z800";
  regions[0].treatment = true;
  regions[0].ssd_launched = true;
  regions[1].region_id = "z801";
  regions[1].treatment = false;
  regions[1].ssd_launched = false;
  const RegionMenus menus = build_regional_tasks(regions, pool, MenuConfig{}, 6, 92, cats);

  const TripletFeatureSpec spec;
  REQUIRE(spec.dim() == 36);
  REQUIRE(spec.names().size() == spec.dim());

  Persona persona;
  persona.persona_id = "p1";
  persona.region_id = "z800";
  persona.latent_weights = Vec(kMenuAttrCount, 0.0);
  persona.observables = {2.0, 1.0, 3.0, 0.0};

  const RegionalMenu& menu = menus[0][0];
  const Order& order = pool.orders[static_cast<std::size_t>(menu.order_index)];

  // Pure function of its inputs.
  const Vec a = raw_triplet_features(spec, order, menu, Period::pre, true, persona);
  const Vec b = raw_triplet_features(spec, order, menu, Period::pre, true, persona);
  REQUIRE(a == b);
  REQUIRE(a.size() == spec.dim());
  CHECK(a[0] == order.basket / 50.0);

  // Demographic blocks sit after the 12 menu columns and the embedding:
  // age [20,25), gender [25,27), income [27,32), education [32,36).
  Persona income_shift = persona;
  income_shift.observables[2] = 0.0;
  const Vec c = raw_triplet_features(spec, order, menu, Period::pre, true, income_shift);
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (j < 27 || j >= 32)
      CHECK(a[j] == c[j]);
  }
  CHECK(a[27 + 3] == 1.0);
  CHECK(c[27 + 0] == 1.0);
  CHECK(a[27 + 0] == 0.0);

  // Unseen demographic codes map to the all-zero bucket of their block.
  Persona unseen = persona;
  unseen.observables[2] = 9.0;
  const Vec u = raw_triplet_features(spec, order, menu, Period::pre, true, unseen);
  for (std::size_t j = 27; j < 32; ++j) CHECK(u[j] == 0.0);
  Persona negative = persona;
  negative.observables[0] = -1.0;
  const Vec nv = raw_triplet_features(spec, order, menu, Period::pre, true, negative);
  for (std::size_t j = 20; j < 25; ++j) CHECK(nv[j] == 0.0);

  // Launch flag column and the treatment flag on the post-period menu.
  const Vec no_ssd = raw_triplet_features(spec, order, menu, Period::pre, false, persona);
  CHECK(a[11] == 1.0);
  CHECK(no_ssd[11] == 0.0);
  const Vec post = raw_triplet_features(spec, order, menu, Period::post, true, persona);
  CHECK(a[10] == 0.0);
  CHECK(post[10] == 1.0);  // treatment region carries the flag after launch

  // Shape validation.
  Persona short_obs = persona;
  short_obs.observables = {1.0, 0.0, 2.0};
  REQUIRE_THROWS_AS(raw_triplet_features(spec, order, menu, Period::pre, true, short_obs),
                    dimension_error);
  Order bad_order = order;
  bad_order.embedding.resize(5);
  REQUIRE_THROWS_AS(raw_triplet_features(spec, bad_order, menu, Period::pre, true, persona),
                    dimension_error);

  // The encoder is the standardizer applied to the raw features.
  Standardizer st;
  REQUIRE_THROWS_AS(encode_triplet(spec, order, menu, Period::pre, true, persona, st),
                    validation_error);
  Mat fitrows(3, spec.dim());
  for (std::size_t r = 0; r < 3; ++r) {
    const Vec row = raw_triplet_features(spec, pool.orders[r], menus[0][r % 6], Period::pre, true,
                                         persona);
    std::copy(row.begin(), row.end(), fitrows.row(r));
  }
  st.fit(fitrows);
  const Vec enc = encode_triplet(spec, order, menu, Period::pre, true, persona, st);
  const Vec manual = st.apply(raw_triplet_features(spec, order, menu, Period::pre, true, persona));
  REQUIRE(enc == manual);
}

TEST_CASE("predictions are stable across statistically matched twin regions") {
  const CategorySet cats = CategorySet::standard();
  const std::size_t k = cats.k();
  OrderPoolConfig pool_cfg;
  pool_cfg.n_orders = 60;
  const OrderPool pool = make_order_pool(pool_cfg, 93);

  // Two regions in the same stratum with cloned menus: matched order sets.
  std::vector<Region> regions(2);
  regions[0].region_id = "z810";
  regions[1].region_id = "z811";
  for (Region& r : regions) {
    r.treatment = true;
    r.ssd_launched = true;
  }
  const int n_menus = 40;
  const RegionMenus menus = build_regional_tasks(regions, pool, MenuConfig{}, n_menus, 94, cats,
                                                 /*clone_within_stratum=*/true);
  REQUIRE(menus[0][0].pre.options.a == menus[1][0].pre.options.a);

  // Personas drawn independently from one persona distribution per region.
  const TripletFeatureSpec spec;
  const Vec base_weights{-0.5, -0.35, 0.3, 0.45, 0.25, 0.2, 0.15};
  const int n_personas = 200;
  auto build_cell = [&](std::size_t region_index) {
    Rng rng(95, "twin.personas", static_cast<std::uint64_t>(region_index));
    const Region& region = regions[region_index];
    RegionCell cell;
    cell.region_id = region.region_id;
    cell.arm = region.arm();
    cell.period = Period::post;
    cell.h = Mat(static_cast<std::size_t>(n_personas * n_menus), spec.dim());
    cell.cat.resize(static_cast<std::size_t>(n_personas * n_menus));
    std::size_t at = 0;
    for (int pi = 0; pi < n_personas; ++pi) {
      Persona persona;
      persona.latent_weights = base_weights;
      for (double& w : persona.latent_weights) w += rng.normal(0.0, 0.15);
      persona.observables = {static_cast<double>(rng.uniform_int(0, 4)),
                             static_cast<double>(rng.uniform_int(0, 1)),
                             static_cast<double>(rng.uniform_int(0, 4)),
                             static_cast<double>(rng.uniform_int(0, 3))};
      for (int mi = 0; mi < n_menus; ++mi) {
        const RegionalMenu& menu = menus[region_index][static_cast<std::size_t>(mi)];
        const ChoiceTask& task = menu.task(Period::post);
        const Order& order = pool.orders[static_cast<std::size_t>(menu.order_index)];
        const Vec row = raw_triplet_features(spec, order, menu, Period::post,
                                             region.ssd_launched, persona);
        std::copy(row.begin(), row.end(), cell.h.row(at));
        const Vec probs = mnl_choice_probs(task, persona.latent_weights);
        const int choice = static_cast<int>(rng.discrete(probs));
        cell.cat[at] = static_cast<std::int8_t>(
            choice < static_cast<int>(task.k_inside())
                ? task.option_category[static_cast<std::size_t>(choice)]
                : cats.no_purchase());
        ++at;
      }
    }
    return cell;
  };

  RegionCell cell_a = build_cell(0);
  RegionCell cell_b = build_cell(1);

  Standardizer st;
  st.fit(cell_a.h);
  for (RegionCell* cell : {&cell_a, &cell_b})
    for (std::size_t i = 0; i < cell->n(); ++i) {
      double* row = cell->h.row(i);
      for (std::size_t j = 0; j < cell->h.cols; ++j)
        row[j] = (row[j] - st.mean[j]) * st.scale[j];
    }

  TrainedCorrector model;
  model.kind = CorrectorKind::mixture;
  model.k = k;
  Rng model_rng(4242, "twin.model");
  model.mixture = init_mixture_params(static_cast<int>(spec.dim()), 16, 8, model_rng);
  model.standardizer = st;

  const std::vector<RegionCell> cells{cell_a, cell_b};
  const std::vector<ShareVector> shares = predict_region_shares(model, cells);
  REQUIRE(shares.size() == 2);
  CHECK(shares[0].region_id == "z810");
  CHECK(shares[1].region_id == "z811");
  CHECK(shares[0].arm == Arm::treatment);
  CHECK(shares[0].period == Period::post);
  for (const ShareVector& sv : shares) {
    double total = 0.0;
    for (double s : sv.shares) total += s;
    CHECK(total == Approx(1.0).margin(1e-9).epsilon(0.0));
  }

  // Forward prediction is a pure function of the cell.
  const std::vector<ShareVector> again = predict_region_shares(model, cells);
  REQUIRE(again[0].shares == shares[0].shares);
  REQUIRE(shares[0].shares ==
          mixture_forward(model.mixture, cell_a.h, cell_a.cat, k));

  double linf = 0.0;
  for (std::size_t j = 0; j < k; ++j)
    linf = std::max(linf, std::fabs(shares[0].shares[j] - shares[1].shares[j]));
  INFO("twin-region share gap " << linf);
  CHECK(linf <= 0.02);
}

TEST_CASE("layer initialization is bounded by fan-in and reproducible") {
  Rng rng(46, "init");
  for (int c = 0; c < testutil::kPropertyCases; ++c) {
    const int d = 2 + static_cast<int>(rng.uniform_int(0, 5));
    const int h1 = 2 + static_cast<int>(rng.uniform_int(0, 5));
    const int h2 = 2 + static_cast<int>(rng.uniform_int(0, 4));
    const int k = 2 + static_cast<int>(rng.uniform_int(0, 3));
    const std::uint64_t seed = static_cast<std::uint64_t>(rng.uniform_int(0, 1 << 20));

    Rng ra(seed, "init");
    const MixtureModelParams m = init_mixture_params(d, h1, h2, ra);
    REQUIRE(m.theta.size() == m.n_params());
    auto bound_ok = [&](std::size_t off, std::size_t count, int fan_in) {
      const double lim = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::size_t i = off; i < off + count; ++i)
        if (std::fabs(m.theta[i]) > lim) return false;
      return true;
    };
    CHECK(bound_ok(m.off_w(), static_cast<std::size_t>(d) * static_cast<std::size_t>(h1), d));
    for (std::size_t i = m.off_b(); i < m.off_v(); ++i) CHECK(m.theta[i] == 0.0);
    CHECK(bound_ok(m.off_v(), static_cast<std::size_t>(h1) * static_cast<std::size_t>(h2), h1));
    CHECK(bound_ok(m.off_u(), static_cast<std::size_t>(h2), h2));

    Rng rb(seed, "init");
    const MixtureModelParams m2 = init_mixture_params(d, h1, h2, rb);
    CHECK(m.theta == m2.theta);

    Rng rc(seed, "init");
    const IntegratedModelParams g = init_integrated_params(d + k, h1, h2, k, rc);
    REQUIRE(g.theta.size() == g.n_params());
    auto gbound_ok = [&](std::size_t off, std::size_t count, int fan_in) {
      const double lim = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::size_t i = off; i < off + count; ++i)
        if (std::fabs(g.theta[i]) > lim) return false;
      return true;
    };
    CHECK(gbound_ok(g.off_w1(),
                    static_cast<std::size_t>(d + k) * static_cast<std::size_t>(h1), d + k));
    for (std::size_t i = g.off_b1(); i < g.off_w2(); ++i) CHECK(g.theta[i] == 0.0);
    CHECK(gbound_ok(g.off_w2(), static_cast<std::size_t>(h1) * static_cast<std::size_t>(h2), h1));
    for (std::size_t i = g.off_b2(); i < g.off_w3(); ++i) CHECK(g.theta[i] == 0.0);
    CHECK(gbound_ok(g.off_w3(), static_cast<std::size_t>(h2) * static_cast<std::size_t>(k), h2));
    for (std::size_t i = g.off_b3(); i < g.n_params(); ++i) CHECK(g.theta[i] == 0.0);
  }
}
