#pragma once

// Correction stage for region-level data. Two correctors are trained to
// match region share vectors under KL loss:
//
//   mixture    score_i = u . tanh(V' (W' h_i + b)); weights w = softmax of
//              scores over the region's triplet batch; predicted share is
//              the w-weighted average of the observed one-hot choices. The
//              share is therefore a convex combination of observed choices.
//
//   integrated three linear layers (input -> 64 -> 32 -> K) with ReLU after
//              the first and tanh after the second, softmax output per
//              triplet; the input carries the agent's chosen category
//              one-hot appended to the features; predicted share is the
//              unweighted mean of the per-triplet outputs.
//
// Both train with Adam on the total KL between predicted and human shares,
// one region-cell per optimizer step, early stopping on validation KL.
// Training applies an epsilon floor inside the logs (a mixture share can be
// exactly 0 off the support of the observed choices); the reported exact KL
// keeps strict semantics and throws a typed support violation instead.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aem/domain.hpp"
#include "aem/errors.hpp"
#include "aem/math.hpp"
#include "aem/rng.hpp"
#include "aem/synth_gen.hpp"

namespace aem {

// ---------------------------------------------------------------------------
// Triplet features
// ---------------------------------------------------------------------------

// Layout of the raw feature vector h: 12 order/menu columns, the pseudo
// product embedding, then one-hot blocks for the four demographic codes.
// Unseen categorical codes map to the reserved all-zero bucket of their block.
struct TripletFeatureSpec {
  std::array<std::size_t, 4> demo_cards{5, 2, 5, 4};  // age, gender, income, education
  int embedding_dim = 8;

  std::size_t dim() const {
    return 12 + static_cast<std::size_t>(embedding_dim) + demo_cards[0] + demo_cards[1] +
           demo_cards[2] + demo_cards[3];
  }

  std::vector<std::string> names() const {
    std::vector<std::string> n = {"basket",    "fst_present", "fst_days", "std_days",
                                  "std_fee",   "exp_days",    "exp_fee",  "exp_sameday",
                                  "exp_next",  "exp_second",  "treat_flag", "ssd_flag"};
    for (int e = 0; e < embedding_dim; ++e) n.push_back("emb" + std::to_string(e));
    static const char* blocks[4] = {"age", "gender", "income", "education"};
    for (int b = 0; b < 4; ++b)
      for (std::size_t c = 0; c < demo_cards[static_cast<std::size_t>(b)]; ++c)
        n.push_back(std::string(blocks[b]) + std::to_string(c));
    return n;
  }
};

// Raw (unstandardized) features of one (order, menu variant, persona) triplet.
inline Vec raw_triplet_features(const TripletFeatureSpec& spec, const Order& order,
                                const RegionalMenu& menu, Period period, bool ssd_launched,
                                const Persona& persona) {
  if (persona.observables.size() != 4)
    throw dimension_error("raw_triplet_features: persona needs 4 observable codes");
  if (order.embedding.size() != static_cast<std::size_t>(spec.embedding_dim))
    throw dimension_error("raw_triplet_features: embedding dimension mismatch");
  const ChoiceTask& task = menu.task(period);
  const bool has_fst = task.k_inside() == 3;
  Vec h;
  h.reserve(spec.dim());
  h.push_back(order.basket / 50.0);
  h.push_back(has_fst ? 1.0 : 0.0);
  h.push_back(has_fst ? order.fst_days / 7.0 : 0.0);
  h.push_back(menu.std_days / 7.0);
  h.push_back(menu.std_fee / 10.0);
  h.push_back(menu.expedited_kind / 2.0);
  h.push_back(task.options(0, kAttrFee));
  h.push_back(menu.expedited_kind == 0 ? 1.0 : 0.0);
  h.push_back(menu.expedited_kind == 1 ? 1.0 : 0.0);
  h.push_back(menu.expedited_kind == 2 ? 1.0 : 0.0);
  h.push_back(task.options(0, kAttrTreatFlag));
  h.push_back(ssd_launched ? 1.0 : 0.0);
  for (double e : order.embedding) h.push_back(e);
  for (int b = 0; b < 4; ++b) {
    const std::size_t card = spec.demo_cards[static_cast<std::size_t>(b)];
    const double code = persona.observables[static_cast<std::size_t>(b)];
    const std::size_t base = h.size();
    h.resize(base + card, 0.0);
    if (code >= 0.0 && code < static_cast<double>(card))
      h[base + static_cast<std::size_t>(code)] = 1.0;
  }
  return h;
}

// Per-dimension affine map to zero mean / unit variance over the fitted
// (training) rows; constant dimensions pass through unscaled.
struct Standardizer {
  Vec mean;
  Vec scale;  // multiplicative: (x - mean) * scale

  void fit(const Mat& rows) {
    if (rows.rows == 0) throw validation_error("standardizer: no rows");
    const std::size_t d = rows.cols;
    mean.assign(d, 0.0);
    scale.assign(d, 1.0);
    for (std::size_t r = 0; r < rows.rows; ++r)
      for (std::size_t j = 0; j < d; ++j) mean[j] += rows(r, j);
    for (double& m : mean) m /= static_cast<double>(rows.rows);
    Vec var(d, 0.0);
    for (std::size_t r = 0; r < rows.rows; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = rows(r, j) - mean[j];
        var[j] += c * c;
      }
    for (std::size_t j = 0; j < d; ++j) {
      const double sd = std::sqrt(var[j] / static_cast<double>(rows.rows));
      scale[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
    }
  }

  void apply_inplace(Vec& x) const {
    if (x.size() != mean.size()) throw dimension_error("standardizer: dimension mismatch");
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = (x[j] - mean[j]) * scale[j];
  }

  Vec apply(Vec x) const {
    apply_inplace(x);
    return x;
  }

  bool fitted() const { return !mean.empty(); }
};

// Standardized feature vector of one triplet (the corrector's input).
inline Vec encode_triplet(const TripletFeatureSpec& spec, const Order& order,
                          const RegionalMenu& menu, Period period, bool ssd_launched,
                          const Persona& persona, const Standardizer& standardizer) {
  if (!standardizer.fitted())
    throw validation_error("encode_triplet: standardizer not fitted");
  return standardizer.apply(raw_triplet_features(spec, order, menu, period, ssd_launched, persona));
}

// ---------------------------------------------------------------------------
// Region cells (the training / prediction unit)
// ---------------------------------------------------------------------------

// One region-period batch: standardized features, the agent's chosen
// categories, and (for training cells) the human share target.
struct RegionCell {
  std::string region_id;
  Arm arm = Arm::control;
  Period period = Period::pre;
  int stratum = 0;
  Mat h;                         // n x d standardized features
  std::vector<std::int8_t> cat;  // n chosen categories in 0..K-1
  Vec target;                    // human share (length K) for train/val cells

  std::size_t n() const { return h.rows; }
};

// ---------------------------------------------------------------------------
// KL share loss
// ---------------------------------------------------------------------------

// Floored KL divergence sum_j p_j log(p_j / (q_j + eps)), the training and
// validation objective (finite even off-support).
inline double kl_divergence_floored(std::span<const double> p, std::span<const double> q,
                                    double eps) {
  if (p.size() != q.size()) throw dimension_error("kl: length mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j)
    if (p[j] > 0.0) s += p[j] * (std::log(p[j]) - std::log(q[j] + eps));
  return s;
}

// Exact KL between matched share tables: sum over regions of
// sum_j s_h log(s_h / s_l) with 0 log 0 = 0. A predicted share of exactly 0
// where the human share is positive makes the loss infinite; that is
// reported as a typed support violation naming the region.
inline double kl_share_loss(std::span<const ShareVector> predicted,
                            std::span<const ShareVector> human) {
  if (predicted.size() != human.size())
    throw dimension_error("kl_share_loss: table sizes differ");
  double total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const ShareVector& sl = predicted[i];
    const ShareVector& sh = human[i];
    if (sl.region_id != sh.region_id)
      throw validation_error("kl_share_loss: region mismatch at position " + std::to_string(i) +
                             " (" + sl.region_id + " vs " + sh.region_id + ")");
    if (sl.shares.size() != sh.shares.size())
      throw dimension_error("kl_share_loss: share length mismatch for region " + sl.region_id);
    for (std::size_t j = 0; j < sh.shares.size(); ++j) {
      if (sh.shares[j] == 0.0) continue;
      if (sl.shares[j] == 0.0)
        throw support_violation("kl_share_loss: predicted share has zero mass on category " +
                                    std::to_string(j) + " supported by the human share in region " +
                                    sl.region_id,
                                sl.region_id);
      total += sh.shares[j] * std::log(sh.shares[j] / sl.shares[j]);
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Model parameters (flat storage + named offsets)
// ---------------------------------------------------------------------------

enum class CorrectorKind : std::uint8_t { mixture, integrated };

inline const char* to_string(CorrectorKind k) {
  return k == CorrectorKind::mixture ? "mixture" : "integrated";
}

// Attention-pooling scorer. theta = [W (d x h1) | b (h1) | V (h1 x h2) | U (h2)].
struct MixtureModelParams {
  int input_dim = 0;
  int h1 = 64;
  int h2 = 32;
  Vec theta;

  std::size_t off_w() const { return 0; }
  std::size_t off_b() const { return static_cast<std::size_t>(input_dim) * h1; }
  std::size_t off_v() const { return off_b() + static_cast<std::size_t>(h1); }
  std::size_t off_u() const { return off_v() + static_cast<std::size_t>(h1) * h2; }
  std::size_t n_params() const { return off_u() + static_cast<std::size_t>(h2); }
};

// Per-triplet classifier. theta = [W1 (d x h1) | b1 | W2 (h1 x h2) | b2 | W3 (h2 x K) | b3].
// Its input dimension already includes the appended choice one-hot.
struct IntegratedModelParams {
  int input_dim = 0;  // feature dim + K
  int h1 = 64;
  int h2 = 32;
  int k_out = 0;
  Vec theta;

  std::size_t off_w1() const { return 0; }
  std::size_t off_b1() const { return static_cast<std::size_t>(input_dim) * h1; }
  std::size_t off_w2() const { return off_b1() + static_cast<std::size_t>(h1); }
  std::size_t off_b2() const { return off_w2() + static_cast<std::size_t>(h1) * h2; }
  std::size_t off_w3() const { return off_b2() + static_cast<std::size_t>(h2); }
  std::size_t off_b3() const { return off_w3() + static_cast<std::size_t>(h2) * k_out; }
  std::size_t n_params() const { return off_b3() + static_cast<std::size_t>(k_out); }
};

namespace detail {

// Symmetric uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) layer init.
inline void init_layer(Vec& theta, std::size_t off, std::size_t count, int fan_in, Rng& rng) {
  const double lim = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::size_t i = 0; i < count; ++i) theta[off + i] = rng.uniform(-lim, lim);
}

}  // namespace detail

inline MixtureModelParams init_mixture_params(int input_dim, int h1, int h2, Rng& rng) {
  MixtureModelParams p;
  p.input_dim = input_dim;
  p.h1 = h1;
  p.h2 = h2;
  p.theta.assign(p.n_params(), 0.0);
  detail::init_layer(p.theta, p.off_w(), static_cast<std::size_t>(input_dim) * h1, input_dim, rng);
  // biases stay 0
  detail::init_layer(p.theta, p.off_v(), static_cast<std::size_t>(h1) * h2, h1, rng);
  detail::init_layer(p.theta, p.off_u(), static_cast<std::size_t>(h2), h2, rng);
  return p;
}

inline IntegratedModelParams init_integrated_params(int input_dim, int h1, int h2, int k_out,
                                                    Rng& rng) {
  IntegratedModelParams p;
  p.input_dim = input_dim;
  p.h1 = h1;
  p.h2 = h2;
  p.k_out = k_out;
  p.theta.assign(p.n_params(), 0.0);
  detail::init_layer(p.theta, p.off_w1(), static_cast<std::size_t>(input_dim) * h1, input_dim, rng);
  detail::init_layer(p.theta, p.off_w2(), static_cast<std::size_t>(h1) * h2, h1, rng);
  detail::init_layer(p.theta, p.off_w3(), static_cast<std::size_t>(h2) * k_out, h2, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Mixture model forward / backward
// ---------------------------------------------------------------------------

// Attention weights over one batch: softmax over the per-row scores.
inline Vec mixture_weights(const MixtureModelParams& p, const Mat& h) {
  if (h.rows == 0) throw validation_error("mixture_weights: empty batch");
  if (static_cast<int>(h.cols) != p.input_dim)
    throw dimension_error("mixture_weights: feature dimension mismatch");
  const int d = p.input_dim, h1 = p.h1, h2 = p.h2;
  const double* w = p.theta.data() + p.off_w();
  const double* b = p.theta.data() + p.off_b();
  const double* v = p.theta.data() + p.off_v();
  const double* u = p.theta.data() + p.off_u();
  Vec scores(h.rows);
  Vec t(static_cast<std::size_t>(h1)), s(static_cast<std::size_t>(h2));
  for (std::size_t i = 0; i < h.rows; ++i) {
    const double* x = h.row(i);
    for (int j = 0; j < h1; ++j) t[static_cast<std::size_t>(j)] = b[j];
    for (int a = 0; a < d; ++a) {
      const double xa = x[a];
      const double* wa = w + static_cast<std::size_t>(a) * h1;
      for (int j = 0; j < h1; ++j) t[static_cast<std::size_t>(j)] += xa * wa[j];
    }
    std::fill(s.begin(), s.end(), 0.0);
    for (int j = 0; j < h1; ++j) {
      const double tj = t[static_cast<std::size_t>(j)];
      const double* vj = v + static_cast<std::size_t>(j) * h2;
      for (int l = 0; l < h2; ++l) s[static_cast<std::size_t>(l)] += tj * vj[l];
    }
    double a_i = 0.0;
    for (int l = 0; l < h2; ++l) a_i += u[l] * std::tanh(s[static_cast<std::size_t>(l)]);
    scores[i] = a_i;
  }
  softmax_inplace(scores);
  return scores;
}

// Predicted share of one batch: attention-weighted sum of choice one-hots.
inline Vec mixture_forward(const MixtureModelParams& p, const Mat& h,
                           std::span<const std::int8_t> cat, std::size_t k) {
  if (h.rows != cat.size()) throw dimension_error("mixture_forward: rows/choices mismatch");
  Vec w = mixture_weights(p, h);
  Vec share(k, 0.0);
  for (std::size_t i = 0; i < w.size(); ++i)
    share[static_cast<std::size_t>(cat[i])] += w[i];
  return share;
}

// Floored-KL loss of one cell and its gradient (accumulated into `grad`,
// which must be zero-initialized to p.n_params()). Returns the loss.
inline double mixture_cell_loss_grad(const MixtureModelParams& p, const RegionCell& cell,
                                     double eps, Vec* grad) {
  const std::size_t n = cell.n();
  if (n == 0) throw validation_error("mixture loss: empty region batch");
  const int d = p.input_dim, h1 = p.h1, h2 = p.h2;
  const std::size_t k = cell.target.size();
  const double* w = p.theta.data() + p.off_w();
  const double* b = p.theta.data() + p.off_b();
  const double* v = p.theta.data() + p.off_v();
  const double* u = p.theta.data() + p.off_u();

  // Forward pass, keeping per-row activations for the backward pass.
  Mat t(n, static_cast<std::size_t>(h1));
  Mat th(n, static_cast<std::size_t>(h2));  // tanh of the attention layer
  Vec scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = cell.h.row(i);
    double* ti = t.row(i);
    for (int j = 0; j < h1; ++j) ti[j] = b[j];
    for (int a = 0; a < d; ++a) {
      const double xa = x[a];
      const double* wa = w + static_cast<std::size_t>(a) * h1;
      for (int j = 0; j < h1; ++j) ti[j] += xa * wa[j];
    }
    double* thi = th.row(i);
    for (int l = 0; l < h2; ++l) thi[l] = 0.0;
    for (int j = 0; j < h1; ++j) {
      const double tj = ti[j];
      const double* vj = v + static_cast<std::size_t>(j) * h2;
      for (int l = 0; l < h2; ++l) thi[l] += tj * vj[l];
    }
    double a_i = 0.0;
    for (int l = 0; l < h2; ++l) {
      thi[l] = std::tanh(thi[l]);
      a_i += u[l] * thi[l];
    }
    scores[i] = a_i;
  }
  softmax_inplace(scores);  // attention weights now

  Vec share(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) share[static_cast<std::size_t>(cell.cat[i])] += scores[i];

  double loss = kl_divergence_floored(cell.target, share, eps);
  if (grad == nullptr) return loss;

  // dL/dshare_j = -target_j / (share_j + eps)
  Vec dshare(k);
  for (std::size_t j = 0; j < k; ++j)
    dshare[j] = cell.target[j] > 0.0 ? -cell.target[j] / (share[j] + eps) : 0.0;
  // Softmax backward: da_i = w_i (d_{cat_i} - sum_k w_k d_{cat_k})
  double mean_d = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_d += scores[i] * dshare[static_cast<std::size_t>(cell.cat[i])];

  double* gw = grad->data() + p.off_w();
  double* gb = grad->data() + p.off_b();
  double* gv = grad->data() + p.off_v();
  double* gu = grad->data() + p.off_u();
  Vec gs(static_cast<std::size_t>(h2)), gt(static_cast<std::size_t>(h1));
  for (std::size_t i = 0; i < n; ++i) {
    const double da = scores[i] * (dshare[static_cast<std::size_t>(cell.cat[i])] - mean_d);
    if (da == 0.0) continue;
    const double* thi = th.row(i);
    const double* ti = t.row(i);
    const double* x = cell.h.row(i);
    for (int l = 0; l < h2; ++l) {
      gu[l] += da * thi[l];
      gs[static_cast<std::size_t>(l)] = da * u[l] * (1.0 - thi[l] * thi[l]);
    }
    for (int j = 0; j < h1; ++j) {
      const double* vj = v + static_cast<std::size_t>(j) * h2;
      double* gvj = gv + static_cast<std::size_t>(j) * h2;
      double acc = 0.0;
      const double tj = ti[j];
      for (int l = 0; l < h2; ++l) {
        gvj[l] += tj * gs[static_cast<std::size_t>(l)];
        acc += vj[l] * gs[static_cast<std::size_t>(l)];
      }
      gt[static_cast<std::size_t>(j)] = acc;
      gb[j] += acc;
    }
    for (int a = 0; a < d; ++a) {
      const double xa = x[a];
      if (xa == 0.0) continue;
      double* gwa = gw + static_cast<std::size_t>(a) * h1;
      for (int j = 0; j < h1; ++j) gwa[j] += xa * gt[static_cast<std::size_t>(j)];
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Integrated model forward / backward
// ---------------------------------------------------------------------------

// Per-triplet soft choice for an input row that already carries the appended
// choice one-hot.
inline Vec integrated_forward_row(const IntegratedModelParams& p, std::span<const double> x) {
  if (static_cast<int>(x.size()) != p.input_dim)
    throw dimension_error("integrated_forward_row: input dimension mismatch");
  const int h1 = p.h1, h2 = p.h2, k = p.k_out;
  const double* w1 = p.theta.data() + p.off_w1();
  const double* b1 = p.theta.data() + p.off_b1();
  const double* w2 = p.theta.data() + p.off_w2();
  const double* b2 = p.theta.data() + p.off_b2();
  const double* w3 = p.theta.data() + p.off_w3();
  const double* b3 = p.theta.data() + p.off_b3();
  Vec r(static_cast<std::size_t>(h1));
  for (int j = 0; j < h1; ++j) r[static_cast<std::size_t>(j)] = b1[j];
  for (int a = 0; a < p.input_dim; ++a) {
    const double xa = x[static_cast<std::size_t>(a)];
    if (xa == 0.0) continue;
    const double* row = w1 + static_cast<std::size_t>(a) * h1;
    for (int j = 0; j < h1; ++j) r[static_cast<std::size_t>(j)] += xa * row[j];
  }
  for (double& z : r) z = z > 0.0 ? z : 0.0;
  Vec s(static_cast<std::size_t>(h2));
  for (int l = 0; l < h2; ++l) s[static_cast<std::size_t>(l)] = b2[l];
  for (int j = 0; j < h1; ++j) {
    const double rj = r[static_cast<std::size_t>(j)];
    if (rj == 0.0) continue;
    const double* row = w2 + static_cast<std::size_t>(j) * h2;
    for (int l = 0; l < h2; ++l) s[static_cast<std::size_t>(l)] += rj * row[l];
  }
  for (double& z : s) z = std::tanh(z);
  Vec g(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) g[static_cast<std::size_t>(c)] = b3[c];
  for (int l = 0; l < h2; ++l) {
    const double sl = s[static_cast<std::size_t>(l)];
    const double* row = w3 + static_cast<std::size_t>(l) * k;
    for (int c = 0; c < k; ++c) g[static_cast<std::size_t>(c)] += sl * row[c];
  }
  softmax_inplace(g);
  return g;
}

namespace detail {

// Assembles the integrated input [h || one-hot(cat)] for row i of a cell.
inline void integrated_input(const RegionCell& cell, std::size_t i, std::size_t k, Vec& x) {
  const std::size_t d = cell.h.cols;
  x.assign(d + k, 0.0);
  const double* hi = cell.h.row(i);
  std::copy(hi, hi + d, x.begin());
  x[d + static_cast<std::size_t>(cell.cat[i])] = 1.0;
}

}  // namespace detail

// Predicted share of one cell: unweighted mean of per-triplet soft choices.
inline Vec integrated_region_share(const IntegratedModelParams& p, const RegionCell& cell,
                                   std::size_t k) {
  if (cell.n() == 0) throw validation_error("integrated share: empty region batch");
  Vec share(k, 0.0);
  Vec x;
  for (std::size_t i = 0; i < cell.n(); ++i) {
    detail::integrated_input(cell, i, k, x);
    axpy(1.0, integrated_forward_row(p, x), share);
  }
  for (double& v : share) v /= static_cast<double>(cell.n());
  return share;
}

// Floored-KL loss of one cell and its gradient (accumulated into `grad`).
inline double integrated_cell_loss_grad(const IntegratedModelParams& p, const RegionCell& cell,
                                        double eps, Vec* grad) {
  const std::size_t n = cell.n();
  if (n == 0) throw validation_error("integrated loss: empty region batch");
  const int h1 = p.h1, h2 = p.h2, k = p.k_out;
  const std::size_t d = cell.h.cols;
  if (static_cast<int>(d) + k != p.input_dim)
    throw dimension_error("integrated loss: feature dimension mismatch");
  const double* w1 = p.theta.data() + p.off_w1();
  const double* b1 = p.theta.data() + p.off_b1();
  const double* w2 = p.theta.data() + p.off_w2();
  const double* b2 = p.theta.data() + p.off_b2();
  const double* w3 = p.theta.data() + p.off_w3();
  const double* b3 = p.theta.data() + p.off_b3();

  Mat relu(n, static_cast<std::size_t>(h1));
  Mat th(n, static_cast<std::size_t>(h2));
  Mat gsm(n, static_cast<std::size_t>(k));
  Vec share(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* hi = cell.h.row(i);
    double* ri = relu.row(i);
    for (int j = 0; j < h1; ++j) ri[j] = b1[j];
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = hi[a];
      if (xa == 0.0) continue;
      const double* row = w1 + a * static_cast<std::size_t>(h1);
      for (int j = 0; j < h1; ++j) ri[j] += xa * row[j];
    }
    {  // appended one-hot contributes a single first-layer row
      const double* row =
          w1 + (d + static_cast<std::size_t>(cell.cat[i])) * static_cast<std::size_t>(h1);
      for (int j = 0; j < h1; ++j) ri[j] += row[j];
    }
    for (int j = 0; j < h1; ++j) ri[j] = ri[j] > 0.0 ? ri[j] : 0.0;
    double* ti = th.row(i);
    for (int l = 0; l < h2; ++l) ti[l] = b2[l];
    for (int j = 0; j < h1; ++j) {
      const double rj = ri[j];
      if (rj == 0.0) continue;
      const double* row = w2 + static_cast<std::size_t>(j) * h2;
      for (int l = 0; l < h2; ++l) ti[l] += rj * row[l];
    }
    for (int l = 0; l < h2; ++l) ti[l] = std::tanh(ti[l]);
    double* gi = gsm.row(i);
    for (int c = 0; c < k; ++c) gi[c] = b3[c];
    for (int l = 0; l < h2; ++l) {
      const double sl = ti[l];
      const double* row = w3 + static_cast<std::size_t>(l) * k;
      for (int c = 0; c < k; ++c) gi[c] += sl * row[c];
    }
    // softmax in place on the stored row
    double mx = gi[0];
    for (int c = 1; c < k; ++c) mx = std::max(mx, gi[c]);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
      gi[c] = std::exp(gi[c] - mx);
      sum += gi[c];
    }
    for (int c = 0; c < k; ++c) {
      gi[c] /= sum;
      share[static_cast<std::size_t>(c)] += gi[c];
    }
  }
  for (double& v : share) v /= static_cast<double>(n);

  double loss = kl_divergence_floored(cell.target, share, eps);
  if (grad == nullptr) return loss;

  Vec dshare(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j)
    dshare[static_cast<std::size_t>(j)] =
        cell.target[static_cast<std::size_t>(j)] > 0.0
            ? -cell.target[static_cast<std::size_t>(j)] / (share[static_cast<std::size_t>(j)] + eps) /
                  static_cast<double>(n)
            : 0.0;

  double* g1 = grad->data() + p.off_w1();
  double* gb1 = grad->data() + p.off_b1();
  double* g2 = grad->data() + p.off_w2();
  double* gb2 = grad->data() + p.off_b2();
  double* g3 = grad->data() + p.off_w3();
  double* gb3 = grad->data() + p.off_b3();
  Vec da3(static_cast<std::size_t>(k)), ds(static_cast<std::size_t>(h2)), dr(static_cast<std::size_t>(h1));
  for (std::size_t i = 0; i < n; ++i) {
    const double* gi = gsm.row(i);
    const double* ti = th.row(i);
    const double* ri = relu.row(i);
    const double* hi = cell.h.row(i);
    double dot_dg = 0.0;
    for (int c = 0; c < k; ++c) dot_dg += dshare[static_cast<std::size_t>(c)] * gi[c];
    for (int c = 0; c < k; ++c)
      da3[static_cast<std::size_t>(c)] = gi[c] * (dshare[static_cast<std::size_t>(c)] - dot_dg);
    for (int l = 0; l < h2; ++l) {
      double acc = 0.0;
      const double* row = w3 + static_cast<std::size_t>(l) * k;
      double* grow = g3 + static_cast<std::size_t>(l) * k;
      const double sl = ti[l];
      for (int c = 0; c < k; ++c) {
        grow[c] += sl * da3[static_cast<std::size_t>(c)];
        acc += row[c] * da3[static_cast<std::size_t>(c)];
      }
      ds[static_cast<std::size_t>(l)] = acc * (1.0 - sl * sl);
    }
    for (int c = 0; c < k; ++c) gb3[c] += da3[static_cast<std::size_t>(c)];
    for (int j = 0; j < h1; ++j) {
      const double rj = ri[j];
      double acc = 0.0;
      const double* row = w2 + static_cast<std::size_t>(j) * h2;
      if (rj != 0.0) {
        double* grow = g2 + static_cast<std::size_t>(j) * h2;
        for (int l = 0; l < h2; ++l) {
          grow[l] += rj * ds[static_cast<std::size_t>(l)];
          acc += row[l] * ds[static_cast<std::size_t>(l)];
        }
        dr[static_cast<std::size_t>(j)] = acc;  // ReLU active
      } else {
        dr[static_cast<std::size_t>(j)] = 0.0;  // ReLU gate closed (and no W2 grad: r_j = 0)
      }
    }
    for (int l = 0; l < h2; ++l) gb2[l] += ds[static_cast<std::size_t>(l)];
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = hi[a];
      if (xa == 0.0) continue;
      double* grow = g1 + a * static_cast<std::size_t>(h1);
      for (int j = 0; j < h1; ++j) grow[j] += xa * dr[static_cast<std::size_t>(j)];
    }
    {
      double* grow =
          g1 + (d + static_cast<std::size_t>(cell.cat[i])) * static_cast<std::size_t>(h1);
      for (int j = 0; j < h1; ++j) grow[j] += dr[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < h1; ++j) gb1[j] += dr[static_cast<std::size_t>(j)];
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct CorrectorConfig {
  CorrectorKind kind = CorrectorKind::mixture;
  double lr = 1e-5;
  int epochs = 500;
  int patience = 20;
  double kl_eps = 1e-8;     // epsilon floor inside training logs
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int h1 = 64;
  int h2 = 32;
  std::uint64_t seed = 0;
};

struct TrainingCurvePoint {
  double train_kl = 0.0;
  double val_kl = 0.0;
};

struct TrainedCorrector {
  CorrectorKind kind = CorrectorKind::mixture;
  std::size_t k = 0;  // categories
  MixtureModelParams mixture;
  IntegratedModelParams integrated;
  TripletFeatureSpec feature_spec;
  Standardizer standardizer;
  CorrectorConfig config;
  std::vector<TrainingCurvePoint> curve;
  int best_epoch = 0;
  double best_val_kl = 0.0;
  bool aborted_nan = false;
};

namespace detail {

struct AdamState {
  Vec m, v;
  long t = 0;

  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(Vec& theta, const Vec& grad, const CorrectorConfig& cfg) {
    ++t;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      theta[i] -= cfg.lr * (m[i] / corr1) / (std::sqrt(v[i] / corr2) + cfg.adam_eps);
    }
  }
};

}  // namespace detail

// Trains the requested corrector on region cells with Adam, one cell per
// optimizer step, early-stopping on validation KL and returning the best
// checkpoint. Deterministic given cfg.seed (init and per-epoch cell order
// both derive from it). A non-finite loss aborts and returns the last good
// checkpoint with aborted_nan set.
inline TrainedCorrector train_correction(const std::vector<RegionCell>& train,
                                         const std::vector<RegionCell>& val, std::size_t k,
                                         const CorrectorConfig& cfg,
                                         const TripletFeatureSpec& feature_spec = {},
                                         const Standardizer& standardizer = {}) {
  if (train.empty()) throw validation_error("train_correction: empty train set");
  for (const RegionCell& c : train)
    if (c.target.size() != k)
      throw validation_error("train_correction: region " + c.region_id + " lacks a share target");

  const int d = static_cast<int>(train[0].h.cols);
  TrainedCorrector out;
  out.kind = cfg.kind;
  out.k = k;
  out.config = cfg;
  out.feature_spec = feature_spec;
  out.standardizer = standardizer;

  Rng init_rng(cfg.seed, "init");
  if (cfg.kind == CorrectorKind::mixture)
    out.mixture = init_mixture_params(d, cfg.h1, cfg.h2, init_rng);
  else
    out.integrated = init_integrated_params(d + static_cast<int>(k), cfg.h1, cfg.h2,
                                            static_cast<int>(k), init_rng);
  Vec& theta = cfg.kind == CorrectorKind::mixture ? out.mixture.theta : out.integrated.theta;
  const std::size_t n_params = theta.size();

  auto cell_loss_grad = [&](const RegionCell& cell, Vec* grad) {
    return cfg.kind == CorrectorKind::mixture
               ? mixture_cell_loss_grad(out.mixture, cell, cfg.kl_eps, grad)
               : integrated_cell_loss_grad(out.integrated, cell, cfg.kl_eps, grad);
  };

  auto eval_total = [&](const std::vector<RegionCell>& cells) {
    double s = 0.0;
    for (const RegionCell& c : cells) s += cell_loss_grad(c, nullptr);
    return s;
  };

  detail::AdamState adam(n_params);
  Vec grad(n_params, 0.0);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  Vec best_theta = theta;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int bad_epochs = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng order_rng(cfg.seed, "train.order", static_cast<std::uint64_t>(epoch));
    order_rng.shuffle(order);
    double train_kl = 0.0;
    for (std::size_t idx : order) {
      std::fill(grad.begin(), grad.end(), 0.0);
      train_kl += cell_loss_grad(train[idx], &grad);
      adam.step(theta, grad, cfg);
    }
    const double val_kl = val.empty() ? train_kl : eval_total(val);
    out.curve.push_back({train_kl, val_kl});
    if (!std::isfinite(train_kl) || !std::isfinite(val_kl)) {
      out.aborted_nan = true;
      break;
    }
    if (val_kl < best_val - 1e-12) {
      best_val = val_kl;
      best_theta = theta;
      best_epoch = epoch;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.patience) {
      break;
    }
  }
  theta = std::move(best_theta);
  out.best_epoch = best_epoch;
  out.best_val_kl = best_val;
  return out;
}

// Forward-only share prediction for a set of region cells (seen or unseen).
inline std::vector<ShareVector> predict_region_shares(const TrainedCorrector& model,
                                                      std::span<const RegionCell> cells) {
  std::vector<ShareVector> out;
  out.reserve(cells.size());
  for (const RegionCell& c : cells) {
    ShareVector s;
    s.region_id = c.region_id;
    s.arm = c.arm;
    s.period = c.period;
    s.shares = model.kind == CorrectorKind::mixture
                   ? mixture_forward(model.mixture, c.h, c.cat, model.k)
                   : integrated_region_share(model.integrated, c, model.k);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace aem
