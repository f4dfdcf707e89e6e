#pragma once

// Generation stage: synthetic regions, personas, order pools and decision
// menus; the ground-truth human community simulator; the distorted synthetic
// agent; and the pluggable choice-provider boundary.
//
// The synthetic world is built so that exact quantities exist for testing:
// persona decision rules are explicit logit weights, human communities are
// explicit persona mixtures, and the "LLM" is a monotone-distorted logit
// agent (scale / shift / heterogeneity-shrink on the latent weights). Exact
// region shares can therefore be computed by enumeration, which is what the
// oracle scenarios and the acceptance gate rely on.

#include <array>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "aem/domain.hpp"
#include "aem/errors.hpp"
#include "aem/math.hpp"
#include "aem/rng.hpp"

namespace aem {

// ---------------------------------------------------------------------------
// Mixture and distortion specifications
// ---------------------------------------------------------------------------

// Community = probability-weighted mixture of personas.
struct MixtureSpec {
  Vec weights;                           // theta, sums to 1
  std::vector<std::int32_t> persona_ids; // indices into a persona list
};

inline void check_mixture(const MixtureSpec& m) {
  if (m.weights.empty()) throw validation_error("mixture: empty");
  if (m.weights.size() != m.persona_ids.size())
    throw dimension_error("mixture: weights/persona_ids length mismatch");
  double s = 0.0;
  for (double w : m.weights) {
    if (w < 0.0 || !std::isfinite(w)) throw validation_error("mixture: invalid weight");
    s += w;
  }
  if (std::fabs(s - 1.0) > 1e-9) throw validation_error("mixture: weights not normalized");
}

// Systematic agent bias: latent weights are scaled, shifted, and pulled
// toward the population mean (heterogeneity compression).
struct DistortionSpec {
  double scale = 1.0;
  Vec shift;                        // length q, or empty for zero shift
  double heterogeneity_shrink = 0.0;

  bool is_identity() const {
    if (scale != 1.0 || heterogeneity_shrink != 0.0) return false;
    for (double s : shift)
      if (s != 0.0) return false;
    return true;
  }
};

inline void check_distortion(const DistortionSpec& d, std::size_t q) {
  if (!(d.scale > 0.0)) throw validation_error("distortion: scale must be positive");
  if (d.heterogeneity_shrink < 0.0 || d.heterogeneity_shrink > 1.0)
    throw validation_error("distortion: heterogeneity_shrink outside [0,1]");
  if (!d.shift.empty() && d.shift.size() != q)
    throw dimension_error("distortion: shift length mismatch");
}

// w' = scale * (mean + (1 - shrink) * (w - mean)) + shift
inline Vec apply_distortion(const DistortionSpec& d, std::span<const double> w,
                            std::span<const double> population_mean) {
  if (w.size() != population_mean.size())
    throw dimension_error("apply_distortion: mean length mismatch");
  Vec out(w.size());
  const double keep = 1.0 - d.heterogeneity_shrink;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double shifted = d.shift.empty() ? 0.0 : d.shift[i];
    out[i] = d.scale * (population_mean[i] + keep * (w[i] - population_mean[i])) + shifted;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Choice laws
// ---------------------------------------------------------------------------

// Logit choice probabilities of a single decision rule on a task: softmax
// over w . x_j with the outside alternative at fixed utility 0. Returns K+1
// probabilities (outside last; exactly 0 if the task has no outside option).
inline Vec agent_choice_probs(std::span<const double> weights, const ChoiceTask& task) {
  if (weights.size() != task.q())
    throw dimension_error("agent_choice_probs: weight length mismatch");
  const std::size_t k = task.k_inside();
  Vec util(task.has_outside ? k + 1 : k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    double u = 0.0;
    const double* row = task.options.row(j);
    for (std::size_t a = 0; a < weights.size(); ++a) u += row[a] * weights[a];
    if (!std::isfinite(u)) throw numeric_error("agent_choice_probs: non-finite utility");
    util[j] = u;
  }
  softmax_inplace(util);
  if (!task.has_outside) util.push_back(0.0);
  return util;
}

// theta-weighted average of the member personas' choice probabilities.
inline Vec community_choice_probs(const MixtureSpec& mixture, std::span<const Persona> personas,
                                  const ChoiceTask& task) {
  check_mixture(mixture);
  Vec acc(task.k_inside() + 1, 0.0);
  for (std::size_t i = 0; i < mixture.weights.size(); ++i) {
    const auto id = static_cast<std::size_t>(mixture.persona_ids[i]);
    if (id >= personas.size()) throw validation_error("community_choice_probs: bad persona id");
    Vec p = agent_choice_probs(personas[id].latent_weights, task);
    axpy(mixture.weights[i], p, acc);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Order pool
// ---------------------------------------------------------------------------

// One synthetic historical order: basket value, the free-slow-delivery time
// that would be offered, and a pseudo product embedding derived
// deterministically from the order id (stand-in for text embeddings).
struct Order {
  std::int32_t order_id = 0;
  double basket = 0.0;
  int fst_days = 0;
  Vec embedding;

  std::string id_string() const {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "o%04d", order_id);
    return buf;
  }
};

struct OrderPoolConfig {
  int n_orders = 800;
  double basket_log_mean = 3.3322;  // log(28): median basket ~ $28
  double basket_log_sd = 0.55;
  double basket_min = 5.0;
  double basket_max = 150.0;
  int fst_days_min = 4;
  Vec fst_days_weights{0.15, 0.30, 0.25, 0.20, 0.10};  // days 4..8
  int embedding_dim = 8;
  double fst_threshold = 35.0;  // free slow shipping offered above this basket value
};

struct OrderPool {
  OrderPoolConfig config;
  std::vector<Order> orders;
};

inline OrderPool make_order_pool(const OrderPoolConfig& cfg, std::uint64_t seed) {
  if (cfg.n_orders <= 0) throw validation_error("order pool: empty");
  OrderPool pool;
  pool.config = cfg;
  pool.orders.reserve(static_cast<std::size_t>(cfg.n_orders));
  for (int o = 0; o < cfg.n_orders; ++o) {
    Rng rng(seed, "orders", static_cast<std::uint64_t>(o));
    Order ord;
    ord.order_id = o;
    ord.basket =
        std::clamp(std::exp(rng.normal(cfg.basket_log_mean, cfg.basket_log_sd)), cfg.basket_min,
                   cfg.basket_max);
    ord.fst_days = cfg.fst_days_min + static_cast<int>(rng.discrete(cfg.fst_days_weights));
    ord.embedding.resize(static_cast<std::size_t>(cfg.embedding_dim));
    for (double& e : ord.embedding) e = rng.normal();
    pool.orders.push_back(std::move(ord));
  }
  return pool;
}

// ---------------------------------------------------------------------------
// Population (regions + personas)
// ---------------------------------------------------------------------------

// Demographic code cardinalities for the observable vector
// [age band, gender code, income band, education level].
struct DemographicSpec {
  Vec age_weights{0.20, 0.25, 0.25, 0.20, 0.10};
  Vec gender_weights{0.5, 0.5};
  Vec income_weights{0.15, 0.25, 0.25, 0.20, 0.15};
  Vec education_weights{0.25, 0.35, 0.25, 0.15};

  std::array<std::size_t, 4> cardinalities() const {
    return {age_weights.size(), gender_weights.size(), income_weights.size(),
            education_weights.size()};
  }
};

// Centered demographic features used to couple observables to latent
// weights: [(age-2)/2, gender-1/2, (income-2)/2, (education-1.5)/1.5].
inline Vec demographic_features(std::span<const double> observables) {
  if (observables.size() != 4) throw dimension_error("demographic_features: need 4 codes");
  return {(observables[0] - 2.0) / 2.0, observables[1] - 0.5, (observables[2] - 2.0) / 2.0,
          (observables[3] - 1.5) / 1.5};
}

struct PopulationConfig {
  int n_regions = 906;
  // Region counts per stratum in the order (T,SSD), (T,noSSD), (C,SSD), (C,noSSD).
  std::array<int, 4> strata_counts{229, 220, 245, 212};
  int personas_per_region = 30;
  int personas_per_region_nossd = -1;  // -1: same as personas_per_region
  std::size_t q = 7;
  Vec base_weights;     // length q; population mean decision rule
  Mat coupling;         // q x 4; demographic features -> weight deviations
  double heterogeneity = 1.0;   // scales every persona-level deviation
  double idio_sd = 0.0;         // idiosyncratic per-coordinate noise
  double region_weight_sd = 0.0;  // region-level shift of the base rule
  double income_tilt = 0.0;       // region-to-region income-mix tilt amplitude
  DemographicSpec demographics;
  // All regions in a stratum share one generation template (identical
  // personas, orders, menus and simulated choices). Used to construct
  // residual-free panels for variance experiments.
  bool clone_within_stratum = false;
};

struct Population {
  PopulationConfig config;
  std::vector<Persona> personas;
  std::vector<Region> regions;
  Vec mean_latent_weights;  // realized population mean (distortion anchor)

  std::size_t q() const { return config.q; }
};

inline std::string region_key(int z) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d", z);
  return buf;
}

// Deterministically samples regions (with strata), personas (demographic
// cells + latent weights) for each region. Latent weights:
//   w = base + region_shift + heterogeneity * (coupling . f(cell) + idio_sd * eps)
// so heterogeneity = 0 collapses every persona in a region onto one rule.
inline Population sample_population(const PopulationConfig& cfg, std::uint64_t seed) {
  if (cfg.n_regions < 4) throw validation_error("population: need at least 4 regions");
  long total = 0;
  for (int c : cfg.strata_counts) {
    if (c < 0) throw validation_error("population: negative stratum count");
    total += c;
  }
  if (total != cfg.n_regions)
    throw validation_error("population: strata counts must sum to region count");
  if (cfg.base_weights.size() != cfg.q)
    throw dimension_error("population: base_weights length mismatch");
  if (!cfg.coupling.empty() && (cfg.coupling.rows != cfg.q || cfg.coupling.cols != 4))
    throw dimension_error("population: coupling must be q x 4");
  if (cfg.personas_per_region <= 0) throw validation_error("population: personas_per_region <= 0");

  Population pop;
  pop.config = cfg;

  // Strata assignment: exact configured counts, order shuffled by seed.
  std::vector<int> strata;
  strata.reserve(static_cast<std::size_t>(cfg.n_regions));
  for (int s = 0; s < 4; ++s)
    for (int i = 0; i < cfg.strata_counts[static_cast<std::size_t>(s)]; ++i) strata.push_back(s);
  Rng strata_rng(seed, "generation.strata");
  strata_rng.shuffle(strata);

  pop.regions.resize(static_cast<std::size_t>(cfg.n_regions));
  for (int z = 0; z < cfg.n_regions; ++z) {
    Region& r = pop.regions[static_cast<std::size_t>(z)];
    r.region_id = region_key(z);
    r.treatment = strata[static_cast<std::size_t>(z)] < 2;
    r.ssd_launched = strata[static_cast<std::size_t>(z)] % 2 == 0;
  }

  const auto& demo = cfg.demographics;
  Vec mean_w(cfg.q, 0.0);
  for (int z = 0; z < cfg.n_regions; ++z) {
    Region& r = pop.regions[static_cast<std::size_t>(z)];
    const std::uint64_t key = cfg.clone_within_stratum ? static_cast<std::uint64_t>(r.stratum())
                                                       : static_cast<std::uint64_t>(z);
    Rng rng(seed, "generation.region", key);

    Vec region_shift(cfg.q, 0.0);
    if (cfg.region_weight_sd > 0.0)
      for (double& s : region_shift) s = cfg.region_weight_sd * rng.normal();

    // Region income mix: exp-tilt the income marginals.
    const double tilt = cfg.income_tilt > 0.0 ? rng.uniform(-cfg.income_tilt, cfg.income_tilt) : 0.0;
    Vec income_w = demo.income_weights;
    for (std::size_t i = 0; i < income_w.size(); ++i)
      income_w[i] *= std::exp(tilt * (static_cast<double>(i) - 2.0) / 2.0);

    const int m = (!r.ssd_launched && cfg.personas_per_region_nossd > 0)
                      ? cfg.personas_per_region_nossd
                      : cfg.personas_per_region;
    r.persona_ids.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      Persona p;
      p.persona_id = r.region_id + "-p" + std::to_string(i);
      p.region_id = r.region_id;
      p.observables = {static_cast<double>(rng.discrete(demo.age_weights)),
                       static_cast<double>(rng.discrete(demo.gender_weights)),
                       static_cast<double>(rng.discrete(income_w)),
                       static_cast<double>(rng.discrete(demo.education_weights))};
      Vec f = demographic_features(p.observables);
      p.latent_weights.assign(cfg.q, 0.0);
      for (std::size_t a = 0; a < cfg.q; ++a) {
        double dev = 0.0;
        if (!cfg.coupling.empty())
          for (std::size_t b = 0; b < 4; ++b) dev += cfg.coupling(a, b) * f[b];
        if (cfg.idio_sd > 0.0) dev += cfg.idio_sd * rng.normal();
        p.latent_weights[a] = cfg.base_weights[a] + region_shift[a] + cfg.heterogeneity * dev;
      }
      axpy(1.0, p.latent_weights, mean_w);
      r.persona_ids.push_back(static_cast<std::int32_t>(pop.personas.size()));
      pop.personas.push_back(std::move(p));
    }
  }
  for (double& v : mean_w) v /= static_cast<double>(pop.personas.size());
  pop.mean_latent_weights = std::move(mean_w);
  return pop;
}

// ---------------------------------------------------------------------------
// Regional decision menus
// ---------------------------------------------------------------------------

// Attribute columns of regional menu options (q = 7).
enum MenuAttr : std::size_t {
  kAttrFee = 0,       // shipping fee, $10 units
  kAttrDays = 1,      // delivery time in days
  kAttrFreeShip = 2,  // 1 on the free-slow option
  kAttrExpedited = 3, // 1 on the expedited option
  kAttrSameDay = 4,   // 1 when the expedited option is same-day
  kAttrTreatFlag = 5, // 1 on expedited options under the treatment feature
  kAttrBasket = 6,    // centered basket value, constant across inside options
};
inline constexpr std::size_t kMenuAttrCount = 7;

struct MenuConfig {
  double sameday_prob = 1.0 / 3.0;  // expedited = same-day with this prob where SSD is live
  Vec std_fee_choices{3.99, 4.99, 5.99, 6.99};
  double sameday_fee = 12.99;
  double next_fee = 9.99;
  double second_fee = 7.99;
};

// One (region, order) menu with its two period variants. The variants are
// identical except that treatment regions carry the treatment feature flag
// on the expedited option in the post period.
struct RegionalMenu {
  std::int32_t order_index = 0;
  int expedited_kind = 0;  // 0 same-day, 1 next-day, 2 second-day
  int std_days = 0;
  double std_fee = 0.0;
  ChoiceTask pre;
  ChoiceTask post;

  const ChoiceTask& task(Period p) const { return p == Period::pre ? pre : post; }
};

using RegionMenus = std::vector<std::vector<RegionalMenu>>;  // [region][slot]

namespace detail {

inline ChoiceTask make_menu_task(const Order& order, const OrderPoolConfig& pool_cfg,
                                 const MenuConfig& menu_cfg, int exp_kind, int std_days,
                                 double std_fee, bool treat_flag, const std::string& task_id,
                                 const CategorySet& cats) {
  const bool has_fst = order.basket > pool_cfg.fst_threshold;
  const std::size_t k = has_fst ? 3 : 2;
  ChoiceTask t;
  t.task_id = task_id;
  t.options = Mat(k, kMenuAttrCount, 0.0);
  t.option_category.assign(k, 0);
  const double basket_c = (order.basket - pool_cfg.fst_threshold) / pool_cfg.fst_threshold;

  const double exp_fee = exp_kind == 0   ? menu_cfg.sameday_fee
                         : exp_kind == 1 ? menu_cfg.next_fee
                                         : menu_cfg.second_fee;
  // Row 0: the expedited option.
  t.options(0, kAttrFee) = exp_fee / 10.0;
  t.options(0, kAttrDays) = exp_kind;  // 0 / 1 / 2 days
  t.options(0, kAttrExpedited) = 1.0;
  t.options(0, kAttrSameDay) = exp_kind == 0 ? 1.0 : 0.0;
  t.options(0, kAttrTreatFlag) = treat_flag ? 1.0 : 0.0;
  t.options(0, kAttrBasket) = basket_c;
  t.option_category[0] = exp_kind == 0 ? cats.index_of("SameDay") : cats.index_of("NextOrSecondDay");

  // Row 1: the standard option (slower than expedited, faster than FST).
  t.options(1, kAttrFee) = std_fee / 10.0;
  t.options(1, kAttrDays) = std_days;
  t.options(1, kAttrBasket) = basket_c;
  t.option_category[1] = cats.index_of("Standard");

  if (has_fst) {
    // Row 2: free slow shipping at the order's sampled FST time.
    t.options(2, kAttrDays) = order.fst_days;
    t.options(2, kAttrFreeShip) = 1.0;
    t.options(2, kAttrBasket) = basket_c;
    t.option_category[2] = cats.index_of("FST");
  }
  t.has_outside = true;  // give-up is always available
  return t;
}

}  // namespace detail

// Builds every region's n_z decision menus from the order pool. Menu rules:
// free-slow option present iff basket > threshold; the standard option is
// strictly slower than the expedited option and strictly faster than the
// sampled FST time; exactly one expedited option, same-day only where SSD is
// live; the give-up alternative is always present. Treatment regions get the
// treatment feature flag on the expedited option in the post-period variant.
// Also fills each region's order_ids.
inline RegionMenus build_regional_tasks(std::vector<Region>& regions, const OrderPool& pool,
                                        const MenuConfig& menu_cfg, int n_z, std::uint64_t seed,
                                        const CategorySet& cats,
                                        bool clone_within_stratum = false) {
  if (pool.orders.empty()) throw validation_error("build_regional_tasks: empty order pool");
  if (n_z <= 0) throw validation_error("build_regional_tasks: n_z must be positive");
  if (n_z > static_cast<int>(pool.orders.size()))
    throw validation_error("build_regional_tasks: n_z exceeds pool size");

  RegionMenus menus(regions.size());
  for (std::size_t z = 0; z < regions.size(); ++z) {
    Region& r = regions[z];
    const std::uint64_t key =
        clone_within_stratum ? static_cast<std::uint64_t>(r.stratum()) : static_cast<std::uint64_t>(z);
    Rng rng(seed, "tasks.region", key);
    std::vector<std::int32_t> picks = rng.sample_without_replacement(pool.orders.size(),
                                                                     static_cast<std::size_t>(n_z));
    r.order_ids = picks;
    menus[z].reserve(static_cast<std::size_t>(n_z));
    for (std::int32_t oi : picks) {
      const Order& order = pool.orders[static_cast<std::size_t>(oi)];
      RegionalMenu m;
      m.order_index = oi;
      if (r.ssd_launched) {
        const double s = menu_cfg.sameday_prob;
        const Vec kinds{s, (1.0 - s) / 2.0, (1.0 - s) / 2.0};
        m.expedited_kind = static_cast<int>(rng.discrete(kinds));
      } else {
        m.expedited_kind = 1 + static_cast<int>(rng.uniform_int(0, 1));  // next or second day
      }
      // Standard delivery strictly between the expedited time and the FST time.
      m.std_days = static_cast<int>(rng.uniform_int(m.expedited_kind + 1, order.fst_days - 1));
      m.std_fee = menu_cfg.std_fee_choices[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(menu_cfg.std_fee_choices.size()) - 1))];
      const std::string base_id = r.region_id + "-" + order.id_string();
      m.pre = detail::make_menu_task(order, pool.config, menu_cfg, m.expedited_kind, m.std_days,
                                     m.std_fee, false, base_id + "-pre", cats);
      m.post = detail::make_menu_task(order, pool.config, menu_cfg, m.expedited_kind, m.std_days,
                                      m.std_fee, r.treatment, base_id + "-post", cats);
      menus[z].push_back(std::move(m));
    }
  }
  return menus;
}

// ---------------------------------------------------------------------------
// Choice providers
// ---------------------------------------------------------------------------

// The provider boundary: one synchronous call per decision. In-process
// oracle providers may read the persona's latent weights (they *are* the
// simulated ground truth); external providers see only observables.
class ChoiceProvider {
 public:
  virtual ~ChoiceProvider() = default;
  // Returns the chosen option index in 0..K, where K (== task.outside_index())
  // denotes the outside / give-up alternative.
  virtual int choose(const Persona& persona, const ChoiceTask& menu, Rng& rng) = 0;
  virtual std::string name() const = 0;
};

// Samples from the persona's own (undistorted) choice law.
class GroundTruthProvider final : public ChoiceProvider {
 public:
  int choose(const Persona& persona, const ChoiceTask& menu, Rng& rng) override {
    Vec p = agent_choice_probs(persona.latent_weights, menu);
    return static_cast<int>(rng.discrete(p));
  }
  std::string name() const override { return "ground_truth"; }
};

// Samples from the distorted law: scale / shift / shrink applied to the
// latent weights (anchored at the population mean) before the logit.
class DistortedAgentProvider final : public ChoiceProvider {
 public:
  DistortedAgentProvider(DistortionSpec spec, Vec population_mean)
      : spec_(std::move(spec)), mean_(std::move(population_mean)) {
    check_distortion(spec_, mean_.size());
  }

  int choose(const Persona& persona, const ChoiceTask& menu, Rng& rng) override {
    Vec w = apply_distortion(spec_, persona.latent_weights, mean_);
    Vec p = agent_choice_probs(w, menu);
    return static_cast<int>(rng.discrete(p));
  }
  std::string name() const override { return "distorted_agent"; }

  const DistortionSpec& spec() const { return spec_; }

 private:
  DistortionSpec spec_;
  Vec mean_;
};

// ---------------------------------------------------------------------------
// Choice simulation
// ---------------------------------------------------------------------------

// Column-oriented bulk triplet storage. Indices refer to the population /
// menu structures that produced them; `category` is the delivery category
// of the chosen option (no-purchase included).
struct TripletTable {
  std::vector<std::int32_t> region;
  std::vector<std::int32_t> menu;     // slot within the region's menu list
  std::vector<std::int32_t> persona;  // global persona index
  std::vector<std::int8_t> option;    // chosen option index (K = outside)
  std::vector<std::int8_t> category;  // delivery category of the choice
  std::vector<std::int8_t> period;
  std::vector<std::int8_t> arm;

  std::size_t size() const { return region.size(); }

  void push(std::int32_t z, std::int32_t m, std::int32_t p, std::int8_t opt, std::int8_t cat,
            Period per, Arm a) {
    region.push_back(z);
    menu.push_back(m);
    persona.push_back(p);
    option.push_back(opt);
    category.push_back(cat);
    period.push_back(static_cast<std::int8_t>(per));
    arm.push_back(static_cast<std::int8_t>(a));
  }

  void reserve(std::size_t n) {
    region.reserve(n);
    menu.reserve(n);
    persona.reserve(n);
    option.reserve(n);
    category.reserve(n);
    period.reserve(n);
    arm.reserve(n);
  }
};

inline int category_of_option(const ChoiceTask& task, int option, const CategorySet& cats) {
  if (option == task.outside_index()) return cats.no_purchase();
  if (option < 0 || option > static_cast<int>(task.k_inside()))
    throw validation_error("category_of_option: option index out of range");
  if (task.option_category.empty())
    throw validation_error("category_of_option: task has no category mapping");
  return task.option_category[static_cast<std::size_t>(option)];
}

// Simulates one region-period cell: every persona of the region faces every
// menu. Rows are appended persona-major (all menus of persona 0, then
// persona 1, ...), which resampling relies on. Deterministic given `rng`.
inline void simulate_region_choices(ChoiceProvider& provider, const Population& pop, int z,
                                    std::span<const RegionalMenu> menus, Period period, Rng& rng,
                                    const CategorySet& cats, TripletTable& out) {
  const Region& r = pop.regions[static_cast<std::size_t>(z)];
  for (std::int32_t pid : r.persona_ids) {
    const Persona& persona = pop.personas[static_cast<std::size_t>(pid)];
    for (std::size_t mi = 0; mi < menus.size(); ++mi) {
      const ChoiceTask& task = menus[mi].task(period);
      const int opt = provider.choose(persona, task, rng);
      const int cat = category_of_option(task, opt, cats);
      out.push(z, static_cast<std::int32_t>(mi), pid, static_cast<std::int8_t>(opt),
               static_cast<std::int8_t>(cat), period, r.arm());
    }
  }
}

// Record-oriented convenience: one TripletRecord per (task, persona) pair,
// in task-major order. Used by tests, small datasets and the CLI; the bulk
// pipeline uses TripletTable.
inline std::vector<TripletRecord> simulate_choices(ChoiceProvider& provider,
                                                   std::span<const ChoiceTask> tasks,
                                                   std::span<const Persona> personas,
                                                   std::uint64_t seed, const CategorySet& cats,
                                                   Period period = Period::pre,
                                                   Arm arm = Arm::control) {
  Rng rng(seed, "choices");
  std::vector<TripletRecord> out;
  out.reserve(tasks.size() * personas.size());
  for (const ChoiceTask& task : tasks) {
    for (const Persona& persona : personas) {
      const int opt = provider.choose(persona, task, rng);
      const int cat = category_of_option(task, opt, cats);
      TripletRecord rec;
      rec.order_id = task.task_id;
      rec.persona_id = persona.persona_id;
      rec.region_id = persona.region_id;
      rec.choice = TripletRecord::one_hot(cats.k(), cat);
      rec.period = period;
      rec.arm = arm;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact shares (enumeration oracles)
// ---------------------------------------------------------------------------

// Exact delivery-category choice law of one decision rule on one menu.
inline Vec category_choice_probs(std::span<const double> weights, const ChoiceTask& task,
                                 const CategorySet& cats) {
  Vec p = agent_choice_probs(weights, task);
  Vec out(cats.k(), 0.0);
  for (std::size_t j = 0; j < task.k_inside(); ++j)
    out[static_cast<std::size_t>(task.option_category[j])] += p[j];
  out[static_cast<std::size_t>(cats.no_purchase())] += p[task.k_inside()];
  return out;
}

// Exact theta-weighted category share of a region-period cell, averaging
// each persona's choice law over all menus.
inline Vec exact_region_share(const Population& pop, int z, std::span<const RegionalMenu> menus,
                              Period period, std::span<const double> theta,
                              const CategorySet& cats) {
  const Region& r = pop.regions[static_cast<std::size_t>(z)];
  if (theta.size() != r.persona_ids.size())
    throw dimension_error("exact_region_share: theta length mismatch");
  if (menus.empty()) throw validation_error("exact_region_share: no menus");
  Vec share(cats.k(), 0.0);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (theta[i] == 0.0) continue;
    const Persona& persona =
        pop.personas[static_cast<std::size_t>(r.persona_ids[i])];
    Vec per_persona(cats.k(), 0.0);
    for (const RegionalMenu& m : menus)
      axpy(1.0, category_choice_probs(persona.latent_weights, m.task(period), cats), per_persona);
    axpy(theta[i] / static_cast<double>(menus.size()), per_persona, share);
  }
  return share;
}

// Purchase-propensity mixture weights over a region's personas:
// theta_i proportional to exp(gamma * centered income of persona i).
inline Vec income_mixture_weights(const Population& pop, int z, double gamma) {
  const Region& r = pop.regions[static_cast<std::size_t>(z)];
  Vec theta(r.persona_ids.size());
  double total = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const Persona& p = pop.personas[static_cast<std::size_t>(r.persona_ids[i])];
    theta[i] = std::exp(gamma * (p.observables[2] - 2.0) / 2.0);
    total += theta[i];
  }
  for (double& t : theta) t /= total;
  return theta;
}

// Empirical human share: n_draws choices, persona sampled from theta, menu
// sampled uniformly from `menus`.
inline Vec sample_region_share(ChoiceProvider& provider, const Population& pop, int z,
                               std::span<const RegionalMenu> menus, Period period,
                               std::span<const double> theta, int n_draws, Rng& rng,
                               const CategorySet& cats) {
  const Region& r = pop.regions[static_cast<std::size_t>(z)];
  if (menus.empty()) throw validation_error("sample_region_share: no menus");
  if (n_draws <= 0) throw validation_error("sample_region_share: n_draws must be positive");
  Vec share(cats.k(), 0.0);
  for (int d = 0; d < n_draws; ++d) {
    const std::size_t i = rng.discrete(theta);
    const Persona& persona = pop.personas[static_cast<std::size_t>(r.persona_ids[i])];
    const std::size_t mi =
        menus.size() == 1 ? 0 : static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(menus.size()) - 1));
    const ChoiceTask& task = menus[mi].task(period);
    const int opt = provider.choose(persona, task, rng);
    share[static_cast<std::size_t>(category_of_option(task, opt, cats))] += 1.0;
  }
  for (double& s : share) s /= static_cast<double>(n_draws);
  return share;
}

// ---------------------------------------------------------------------------
// Conjoint dataset
// ---------------------------------------------------------------------------

struct ConjointConfig {
  int primary_customers = 100;  // M: human-labeled
  int aux_customers = 1000;     // N: agent-labeled only
  int tasks_per_customer = 10;
  std::size_t q = 6;
  int k_inside = 4;
  double attr_sd = 1.0;
  Vec beta_population;          // length q; mean decision rule
  double heterogeneity_sd = 0.35;
  DistortionSpec distortion;
};

// Conjoint rows reference tasks by index; y == -1 marks hidden labels.
struct ConjointDataset {
  std::size_t q = 0;
  int k_inside = 0;
  std::vector<ChoiceTask> tasks;  // one per row, same index space as rows
  struct Row {
    std::int32_t task = 0;
    std::int32_t customer = 0;
    std::int16_t y = -1;
    std::int16_t z = -1;
  };
  std::vector<Row> primary;
  std::vector<Row> aux;
  std::vector<std::int16_t> aux_hidden_y;  // sequestered human labels, parallel to aux
};

// Simulates the two-survey design: M primary customers answer with human (y)
// and agent (z) labels, N auxiliary customers with agent labels only; the
// auxiliary human labels are generated but sequestered for evaluation.
inline ConjointDataset make_conjoint_dataset(const ConjointConfig& cfg, std::uint64_t seed) {
  if (cfg.primary_customers <= 0 || cfg.aux_customers <= 0 || cfg.tasks_per_customer <= 0)
    throw validation_error("conjoint: sizes must be positive");
  if (cfg.aux_customers <= cfg.primary_customers)
    throw validation_error("conjoint: auxiliary set must be larger than primary set");
  if (cfg.beta_population.size() != cfg.q)
    throw dimension_error("conjoint: beta_population length mismatch");
  check_distortion(cfg.distortion, cfg.q);

  const int total = cfg.primary_customers + cfg.aux_customers;

  // Customer decision rules; realized mean anchors the distortion.
  std::vector<Vec> weights(static_cast<std::size_t>(total));
  Vec mean_w(cfg.q, 0.0);
  for (int c = 0; c < total; ++c) {
    Rng rng(seed, "conjoint.weights", static_cast<std::uint64_t>(c));
    Vec w(cfg.q);
    for (std::size_t a = 0; a < cfg.q; ++a)
      w[a] = cfg.beta_population[a] + cfg.heterogeneity_sd * rng.normal();
    axpy(1.0, w, mean_w);
    weights[static_cast<std::size_t>(c)] = std::move(w);
  }
  for (double& v : mean_w) v /= static_cast<double>(total);

  ConjointDataset ds;
  ds.q = cfg.q;
  ds.k_inside = cfg.k_inside;
  ds.tasks.reserve(static_cast<std::size_t>(total) *
                   static_cast<std::size_t>(cfg.tasks_per_customer));

  for (int c = 0; c < total; ++c) {
    const bool is_primary = c < cfg.primary_customers;
    Rng rng(seed, "conjoint.rows", static_cast<std::uint64_t>(c));
    const Vec w_agent = apply_distortion(cfg.distortion, weights[static_cast<std::size_t>(c)],
                                         mean_w);
    for (int t = 0; t < cfg.tasks_per_customer; ++t) {
      ChoiceTask task;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "c%04d-t%02d", c, t);
      task.task_id = buf;
      task.options = Mat(static_cast<std::size_t>(cfg.k_inside), cfg.q);
      for (double& x : task.options.a) x = cfg.attr_sd * rng.normal();
      task.has_outside = true;

      const Vec p_human = agent_choice_probs(weights[static_cast<std::size_t>(c)], task);
      const Vec p_agent = agent_choice_probs(w_agent, task);
      const auto y = static_cast<std::int16_t>(rng.discrete(p_human));
      const auto z = static_cast<std::int16_t>(rng.discrete(p_agent));

      ConjointDataset::Row row;
      row.task = static_cast<std::int32_t>(ds.tasks.size());
      row.customer = c;
      row.z = z;
      ds.tasks.push_back(std::move(task));
      if (is_primary) {
        row.y = y;
        ds.primary.push_back(row);
      } else {
        row.y = -1;
        ds.aux.push_back(row);
        ds.aux_hidden_y.push_back(y);
      }
    }
  }
  return ds;
}

}  // namespace aem
