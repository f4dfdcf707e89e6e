#pragma once

// End-to-end orchestration: dataset splits, scenario assembly (population,
// menus, simulated choices, human share targets), corrector training data,
// difference-in-differences comparisons against enumerated ground truth, and
// the pipeline-wide bootstrap that propagates generation and training noise
// into the final confidence interval.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aem/conjoint_correction.hpp"
#include "aem/domain.hpp"
#include "aem/econometrics.hpp"
#include "aem/errors.hpp"
#include "aem/math.hpp"
#include "aem/regional_correction.hpp"
#include "aem/rng.hpp"
#include "aem/synth_gen.hpp"

namespace aem {

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

// Chronological split of one region's triplet sequence: the leading 1/7 of
// rows train, the next 1/14 validate, the remainder is held out.
struct TimewiseCounts {
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
};

inline TimewiseCounts split_timewise(std::size_t n, const std::string& region_id) {
  if (n < 14)
    throw split_error("timewise split: region " + region_id + " has " + std::to_string(n) +
                      " triplets; at least 14 are required");
  TimewiseCounts c;
  c.n_train = n / 7;
  c.n_val = n / 14;
  c.n_test = n - c.n_train - c.n_val;
  return c;
}

// Stratified region holdout: within every treatment x launch stratum,
// min(n_s, max(1, lround(fraction * n_s))) regions are selected (the
// identification set); the rest are out-of-distribution. Errors only if the
// rounded count is zero in every stratum.
struct RegionwiseSplit {
  std::vector<int> id_regions;   // indices into the population's region list
  std::vector<int> ood_regions;
};

inline RegionwiseSplit split_regionwise(std::span<const Region> regions, double fraction,
                                        std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw validation_error("regionwise split: fraction must be in (0, 1]");
  std::array<std::vector<int>, 4> strata;
  for (std::size_t z = 0; z < regions.size(); ++z)
    strata[static_cast<std::size_t>(regions[z].stratum())].push_back(static_cast<int>(z));

  bool any_nonzero = false;
  for (const auto& s : strata)
    if (!s.empty() && std::lround(fraction * static_cast<double>(s.size())) > 0)
      any_nonzero = true;
  if (!any_nonzero)
    throw split_error("regionwise split: fraction " + std::to_string(fraction) +
                      " selects zero regions in every stratum");

  RegionwiseSplit out;
  for (std::size_t s = 0; s < 4; ++s) {
    auto& idx = strata[s];
    if (idx.empty()) continue;
    Rng rng(seed, "split.regionwise", static_cast<std::uint64_t>(s));
    rng.shuffle(idx);
    const auto n_s = static_cast<double>(idx.size());
    const auto k_s = static_cast<std::size_t>(std::min<long>(
        static_cast<long>(idx.size()), std::max<long>(1, std::lround(fraction * n_s))));
    out.id_regions.insert(out.id_regions.end(), idx.begin(), idx.begin() + static_cast<long>(k_s));
    out.ood_regions.insert(out.ood_regions.end(), idx.begin() + static_cast<long>(k_s), idx.end());
  }
  std::sort(out.id_regions.begin(), out.id_regions.end());
  std::sort(out.ood_regions.begin(), out.ood_regions.end());
  return out;
}

// ---------------------------------------------------------------------------
// Regional scenario configuration
// ---------------------------------------------------------------------------

struct RegionalScenarioConfig {
  PopulationConfig population;
  OrderPoolConfig order_pool;
  MenuConfig menu;
  CategorySet categories = CategorySet::standard();
  int menus_per_region = 12;

  // Human community weighting (purchase-propensity tilt by income) and the
  // agent's decision-rule distortion. An identity distortion still leaves the
  // agent biased: it weights the region's personas uniformly instead.
  double gamma = 0.8;
  DistortionSpec distortion;

  // Human share targets: 0 draws means exact enumeration, otherwise sampled
  // choices. With day_one_post the post-period human data comes from the
  // region's first menu only, with its own draw budget.
  int human_draws_per_cell = 0;
  bool day_one_post = false;
  int day_one_draws = 150;

  double id_fraction = 0.1;
  int outcome_category = 0;  // SameDay in the standard category set

  bool train_mixture = true;
  bool train_integrated = false;
  CorrectorConfig corrector;  // kind/seed are managed by the pipeline

  // Degenerate construction: regions within a stratum are exact clones
  // (identical personas, menus, and simulated choices).
  bool clone_within_stratum = false;
};

// ---------------------------------------------------------------------------
// Scenario statics (fixed across bootstrap replicas)
// ---------------------------------------------------------------------------

struct RegionalStatics {
  Population pop;
  OrderPool pool;
  RegionMenus menus;
  std::vector<Vec> thetas;                // human community weights per region
  std::vector<ShareVector> exact_shares;  // [z * 2 + period], human law
  RegionwiseSplit split;
};

namespace detail {

inline std::string stream_key(const RegionalScenarioConfig& cfg, const Population& pop, int z) {
  return cfg.clone_within_stratum
             ? stratum_name(pop.regions[static_cast<std::size_t>(z)].stratum())
             : region_key(z);
}

}  // namespace detail

inline RegionalStatics make_regional_statics(const RegionalScenarioConfig& cfg,
                                             std::uint64_t seed) {
  RegionalStatics st;
  PopulationConfig pc = cfg.population;
  // The scenario-level clone switch covers personas as well as menus and
  // choice streams; keep the population sampler in sync with it.
  pc.clone_within_stratum = cfg.clone_within_stratum;
  st.pop = sample_population(pc, seed);
  st.pool = make_order_pool(cfg.order_pool, seed);
  st.menus = build_regional_tasks(st.pop.regions, st.pool, cfg.menu, cfg.menus_per_region, seed,
                                  cfg.categories, cfg.clone_within_stratum);
  const int n_regions = cfg.population.n_regions;
  st.thetas.resize(static_cast<std::size_t>(n_regions));
  st.exact_shares.resize(static_cast<std::size_t>(n_regions) * 2);
  for (int z = 0; z < n_regions; ++z) {
    st.thetas[static_cast<std::size_t>(z)] = income_mixture_weights(st.pop, z, cfg.gamma);
    for (Period period : {Period::pre, Period::post}) {
      ShareVector sv;
      sv.region_id = st.pop.regions[static_cast<std::size_t>(z)].region_id;
      sv.arm = st.pop.regions[static_cast<std::size_t>(z)].arm();
      sv.period = period;
      sv.shares = exact_region_share(st.pop, z, st.menus[static_cast<std::size_t>(z)], period,
                                     st.thetas[static_cast<std::size_t>(z)], cfg.categories);
      st.exact_shares[static_cast<std::size_t>(z) * 2 + static_cast<std::size_t>(period)] =
          std::move(sv);
    }
  }
  st.split = split_regionwise(st.pop.regions, cfg.id_fraction, seed);
  return st;
}

// ---------------------------------------------------------------------------
// Agent choice data
// ---------------------------------------------------------------------------

// Row range of one region-period cell in the bulk triplet table. Rows are
// persona-major: persona block i spans [begin + i*n_menus, begin + (i+1)*n_menus).
struct CellRange {
  int z = 0;
  Period period = Period::pre;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t n() const { return end - begin; }
};

struct AgentData {
  TripletTable table;
  std::vector<CellRange> cells;  // indexed z * 2 + period

  const CellRange& cell(int z, Period period) const {
    return cells[static_cast<std::size_t>(z) * 2 + static_cast<std::size_t>(period)];
  }
};

inline AgentData simulate_agent_choices(const RegionalStatics& st,
                                        const RegionalScenarioConfig& cfg, std::uint64_t seed,
                                        ChoiceProvider* provider = nullptr) {
  DistortedAgentProvider fallback(cfg.distortion, st.pop.mean_latent_weights);
  ChoiceProvider& agent = provider != nullptr ? *provider : fallback;

  AgentData out;
  const int n_regions = cfg.population.n_regions;
  out.cells.resize(static_cast<std::size_t>(n_regions) * 2);
  std::size_t total = 0;
  for (int z = 0; z < n_regions; ++z)
    total += 2 * st.pop.regions[static_cast<std::size_t>(z)].persona_ids.size() *
             st.menus[static_cast<std::size_t>(z)].size();
  out.table.reserve(total);

  for (int z = 0; z < n_regions; ++z) {
    const std::string key = detail::stream_key(cfg, st.pop, z);
    for (Period period : {Period::pre, Period::post}) {
      CellRange range;
      range.z = z;
      range.period = period;
      range.begin = out.table.size();
      Rng rng(seed, (period == Period::pre ? std::string("choices.pre.region.")
                                           : std::string("choices.post.region.")) +
                        key);
      simulate_region_choices(agent, st.pop, z, st.menus[static_cast<std::size_t>(z)], period, rng,
                              cfg.categories, out.table);
      range.end = out.table.size();
      out.cells[static_cast<std::size_t>(z) * 2 + static_cast<std::size_t>(period)] = range;
    }
  }
  return out;
}

// Empirical category share of one cell of the simulated agent table.
inline Vec empirical_cell_share(const AgentData& agent, const CellRange& range, std::size_t k) {
  if (range.n() == 0) throw validation_error("empirical share: empty cell");
  Vec share(k, 0.0);
  for (std::size_t r = range.begin; r < range.end; ++r)
    share[static_cast<std::size_t>(agent.table.category[r])] += 1.0;
  for (double& s : share) s /= static_cast<double>(range.n());
  return share;
}

// ---------------------------------------------------------------------------
// Human share targets for the identification regions
// ---------------------------------------------------------------------------

// Targets for every (identification region, period) cell, ordered region-major
// with pre before post. Exact enumeration when human_draws_per_cell == 0;
// day-one mode replaces the post-period target with choices sampled from the
// region's first menu only.
inline std::vector<ShareVector> make_target_shares(const RegionalStatics& st,
                                                   const RegionalScenarioConfig& cfg,
                                                   std::uint64_t seed) {
  GroundTruthProvider human;
  std::vector<ShareVector> out;
  out.reserve(st.split.id_regions.size() * 2);
  for (int z : st.split.id_regions) {
    const auto uz = static_cast<std::size_t>(z);
    const std::string key = detail::stream_key(cfg, st.pop, z);
    for (Period period : {Period::pre, Period::post}) {
      const bool day_one = cfg.day_one_post && period == Period::post;
      ShareVector sv;
      sv.region_id = st.pop.regions[uz].region_id;
      sv.arm = st.pop.regions[uz].arm();
      sv.period = period;
      if (!day_one && cfg.human_draws_per_cell == 0) {
        sv.shares = st.exact_shares[uz * 2 + static_cast<std::size_t>(period)].shares;
      } else {
        Rng rng(seed, (period == Period::pre ? std::string("human.pre.region.")
                                             : std::string("human.post.region.")) +
                          key);
        const std::span<const RegionalMenu> menus =
            day_one ? std::span<const RegionalMenu>(st.menus[uz].data(), 1)
                    : std::span<const RegionalMenu>(st.menus[uz]);
        const int draws = day_one ? cfg.day_one_draws : cfg.human_draws_per_cell;
        sv.shares = sample_region_share(human, st.pop, z, menus, period, st.thetas[uz], draws, rng,
                                        cfg.categories);
      }
      out.push_back(std::move(sv));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training cells
// ---------------------------------------------------------------------------

namespace detail {

// Builds a standardizer-ready raw cell from explicit triplet row indices.
inline RegionCell build_raw_cell(const RegionalStatics& st, const RegionalScenarioConfig& cfg,
                                 const AgentData& agent, int z, Period period,
                                 std::span<const std::size_t> rows,
                                 const TripletFeatureSpec& fspec) {
  const auto uz = static_cast<std::size_t>(z);
  const Region& region = st.pop.regions[uz];
  RegionCell cell;
  cell.region_id = region.region_id;
  cell.arm = region.arm();
  cell.period = period;
  cell.stratum = region.stratum();
  cell.h = Mat(rows.size(), fspec.dim());
  cell.cat.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    const RegionalMenu& menu =
        st.menus[uz][static_cast<std::size_t>(agent.table.menu[r])];
    const Order& order = st.pool.orders[static_cast<std::size_t>(menu.order_index)];
    const Persona& persona =
        st.pop.personas[static_cast<std::size_t>(agent.table.persona[r])];
    const Vec raw =
        raw_triplet_features(fspec, order, menu, period, region.ssd_launched, persona);
    std::copy(raw.begin(), raw.end(), cell.h.row(i));
    cell.cat[i] = agent.table.category[r];
  }
  return cell;
}

inline std::vector<std::size_t> iota_rows(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> rows(count);
  for (std::size_t i = 0; i < count; ++i) rows[i] = begin + i;
  return rows;
}

// Persona-block bootstrap: resamples the persona multiset of a cell and
// concatenates the corresponding contiguous row blocks.
inline std::vector<std::size_t> resample_persona_rows(const CellRange& range,
                                                      std::size_t n_personas, Rng& rng) {
  if (n_personas == 0) throw validation_error("persona resample: empty region");
  const std::size_t n_menus = range.n() / n_personas;
  std::vector<std::size_t> rows;
  rows.reserve(range.n());
  for (std::size_t draw = 0; draw < n_personas; ++draw) {
    const auto p = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(n_personas) - 1));
    const std::size_t block = range.begin + p * n_menus;
    for (std::size_t m = 0; m < n_menus; ++m) rows.push_back(block + m);
  }
  return rows;
}

// Day-one rows of a post-period cell: every persona's choice on menu 0.
inline std::vector<std::size_t> day_one_rows(const AgentData& agent, const CellRange& range) {
  std::vector<std::size_t> rows;
  for (std::size_t r = range.begin; r < range.end; ++r)
    if (agent.table.menu[r] == 0) rows.push_back(r);
  return rows;
}

struct CellSet {
  std::vector<RegionCell> train;
  std::vector<RegionCell> val;
  Standardizer standardizer;
  TripletFeatureSpec fspec;
};

// Assembles train/validation cells for a list of identification regions
// (possibly a resampled multiset). The train slice of each cell is its
// leading chronological share; day-one post cells use all day-one rows and
// contribute no validation slice. The standardizer is fit on the train rows
// only and applied to everything.
inline CellSet build_cell_set(const RegionalStatics& st, const RegionalScenarioConfig& cfg,
                              const AgentData& agent, std::span<const int> id_regions,
                              std::span<const ShareVector> targets, Rng* persona_rng) {
  CellSet set;
  set.fspec.demo_cards = cfg.population.demographics.cardinalities();
  set.fspec.embedding_dim = cfg.order_pool.embedding_dim;

  // Target lookup: targets are ordered like split.id_regions (pre, post).
  auto target_of = [&](const std::string& region_id, Period period) -> const Vec& {
    for (const ShareVector& sv : targets)
      if (sv.region_id == region_id && sv.period == period) return sv.shares;
    throw validation_error("training cells: no human target for region " + region_id);
  };

  for (int z : id_regions) {
    const auto uz = static_cast<std::size_t>(z);
    const std::size_t n_personas = st.pop.regions[uz].persona_ids.size();
    for (Period period : {Period::pre, Period::post}) {
      const CellRange& range = agent.cell(z, period);
      const bool day_one = cfg.day_one_post && period == Period::post;
      std::vector<std::size_t> rows;
      if (persona_rng != nullptr)
        rows = resample_persona_rows(range, n_personas, *persona_rng);
      else
        rows = iota_rows(range.begin, range.n());
      if (day_one) {
        // Keep only menu-0 rows, preserving the (possibly resampled) order.
        std::vector<std::size_t> filtered;
        for (std::size_t r : rows)
          if (agent.table.menu[r] == 0) filtered.push_back(r);
        rows = std::move(filtered);
        if (rows.empty()) throw validation_error("training cells: empty day-one cell");
        RegionCell cell = build_raw_cell(st, cfg, agent, z, period, rows, set.fspec);
        cell.target = target_of(cell.region_id, period);
        set.train.push_back(std::move(cell));
        continue;
      }
      const TimewiseCounts counts = split_timewise(rows.size(), st.pop.regions[uz].region_id);
      RegionCell train_cell = build_raw_cell(
          st, cfg, agent, z, period, std::span<const std::size_t>(rows.data(), counts.n_train),
          set.fspec);
      train_cell.target = target_of(train_cell.region_id, period);
      set.train.push_back(std::move(train_cell));
      RegionCell val_cell = build_raw_cell(
          st, cfg, agent, z, period,
          std::span<const std::size_t>(rows.data() + counts.n_train, counts.n_val), set.fspec);
      val_cell.target = target_of(val_cell.region_id, period);
      set.val.push_back(std::move(val_cell));
    }
  }

  // Fit the standardizer on train rows, then standardize all cells.
  std::size_t n_train_rows = 0;
  for (const RegionCell& c : set.train) n_train_rows += c.n();
  Mat all(n_train_rows, set.fspec.dim());
  std::size_t at = 0;
  for (const RegionCell& c : set.train)
    for (std::size_t i = 0; i < c.n(); ++i, ++at)
      std::copy(c.h.row(i), c.h.row(i) + c.h.cols, all.row(at));
  set.standardizer.fit(all);
  auto standardize_cell = [&](RegionCell& c) {
    for (std::size_t i = 0; i < c.n(); ++i) {
      double* row = c.h.row(i);
      for (std::size_t j = 0; j < c.h.cols; ++j)
        row[j] = (row[j] - set.standardizer.mean[j]) * set.standardizer.scale[j];
    }
  };
  for (RegionCell& c : set.train) standardize_cell(c);
  for (RegionCell& c : set.val) standardize_cell(c);
  return set;
}

// Full-batch standardized cell of one region-period (for prediction/metrics).
inline RegionCell build_full_cell(const RegionalStatics& st, const RegionalScenarioConfig& cfg,
                                  const AgentData& agent, int z, Period period,
                                  const TripletFeatureSpec& fspec, const Standardizer& std_) {
  const CellRange& range = agent.cell(z, period);
  RegionCell cell = build_raw_cell(st, cfg, agent, z, period,
                                   iota_rows(range.begin, range.n()), fspec);
  for (std::size_t i = 0; i < cell.n(); ++i) {
    double* row = cell.h.row(i);
    for (std::size_t j = 0; j < cell.h.cols; ++j)
      row[j] = (row[j] - std_.mean[j]) * std_.scale[j];
  }
  return cell;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Panels and effect comparisons
// ---------------------------------------------------------------------------

inline std::vector<PanelCell> make_share_panel(std::span<const ShareVector> shares,
                                               int outcome_category) {
  std::vector<PanelCell> panel;
  panel.reserve(shares.size());
  for (const ShareVector& sv : shares) {
    if (outcome_category < 0 || outcome_category >= static_cast<int>(sv.shares.size()))
      throw dimension_error("make_share_panel: outcome category out of range");
    PanelCell c;
    c.region_id = sv.region_id;
    c.period = sv.period;
    c.arm = sv.arm;
    c.outcome = sv.shares[static_cast<std::size_t>(outcome_category)];
    c.weight = 1.0;
    panel.push_back(std::move(c));
  }
  return panel;
}

struct RegionKlRow {
  std::string region_id;
  Period period = Period::pre;
  std::size_t n = 0;   // triplets in the evaluated batch
  double kl = 0.0;     // exact KL vs the enumerated human share
};

// Result of training one corrector within a scenario run.
struct CorrectionOutcome {
  TrainedCorrector model;
  std::vector<ShareVector> predicted;  // ID and evaluation regions, both periods
  EffectEstimate corrected;            // DiD on predicted shares over the evaluation set
  std::vector<RegionKlRow> id_kl;      // exact KL per identification cell (full batch)
  double max_id_kl = 0.0;
};

struct RegionalRunResult {
  std::uint64_t seed = 0;
  RegionalStatics statics;
  AgentData agent;
  std::vector<ShareVector> targets;  // human share targets for ID cells
  std::vector<int> eval_regions;     // OOD regions, or ID when nothing is held out

  EffectEstimate truth;     // DiD on enumerated human shares over the evaluation set
  EffectEstimate national;  // DiD on uncorrected agent shares over the evaluation set
  EffectEstimate human_id;  // DiD on the human targets over the ID regions

  bool has_mixture = false;
  bool has_integrated = false;
  CorrectionOutcome mixture;
  CorrectionOutcome integrated;

  std::vector<std::string> notes;
};

namespace detail {

inline CorrectionOutcome train_and_evaluate(const RegionalStatics& st,
                                            const RegionalScenarioConfig& cfg,
                                            const AgentData& agent, const CellSet& cells,
                                            CorrectorKind kind, std::uint64_t train_seed,
                                            std::span<const int> eval_regions) {
  CorrectorConfig cc = cfg.corrector;
  cc.kind = kind;
  cc.seed = train_seed;
  CorrectionOutcome out;
  out.model = train_correction(cells.train, cells.val, cfg.categories.k(), cc, cells.fspec,
                               cells.standardizer);

  // Predictions for the evaluation regions and for the ID regions (the
  // latter double as the per-region fit metric).
  auto predict_cell = [&](int z, Period period, bool want_kl) {
    RegionCell cell = build_full_cell(st, cfg, agent, z, period, cells.fspec, cells.standardizer);
    ShareVector sv;
    sv.region_id = cell.region_id;
    sv.arm = cell.arm;
    sv.period = period;
    sv.shares = out.model.kind == CorrectorKind::mixture
                    ? mixture_forward(out.model.mixture, cell.h, cell.cat, out.model.k)
                    : integrated_region_share(out.model.integrated, cell, out.model.k);
    if (want_kl) {
      const ShareVector& ref =
          st.exact_shares[static_cast<std::size_t>(z) * 2 + static_cast<std::size_t>(period)];
      RegionKlRow row;
      row.region_id = sv.region_id;
      row.period = period;
      row.n = cell.n();
      try {
        row.kl = kl_share_loss(std::span<const ShareVector>(&sv, 1),
                               std::span<const ShareVector>(&ref, 1));
      } catch (const support_violation&) {
        row.kl = std::numeric_limits<double>::infinity();
      }
      out.max_id_kl = std::max(out.max_id_kl, row.kl);
      out.id_kl.push_back(std::move(row));
    }
    out.predicted.push_back(std::move(sv));
  };

  for (int z : st.split.id_regions)
    for (Period period : {Period::pre, Period::post}) predict_cell(z, period, true);
  // Evaluation regions not already covered by the ID list.
  for (int z : eval_regions) {
    if (std::binary_search(st.split.id_regions.begin(), st.split.id_regions.end(), z)) continue;
    for (Period period : {Period::pre, Period::post}) predict_cell(z, period, false);
  }

  // DiD over the evaluation set.
  std::vector<ShareVector> eval_shares;
  eval_shares.reserve(eval_regions.size() * 2);
  for (const ShareVector& sv : out.predicted) {
    for (int z : eval_regions) {
      if (st.pop.regions[static_cast<std::size_t>(z)].region_id == sv.region_id) {
        eval_shares.push_back(sv);
        break;
      }
    }
  }
  out.corrected =
      did_estimate(make_share_panel(eval_shares, cfg.outcome_category), SeKind::cluster_by_region,
                   true, kind == CorrectorKind::mixture ? "mixture" : "integrated");
  return out;
}

}  // namespace detail

// Runs the full regional scenario at one seed: generation, correction
// training, and inference, with enumerated ground truth for comparison.
inline RegionalRunResult run_regional_scenario(const RegionalScenarioConfig& cfg,
                                               std::uint64_t seed,
                                               ChoiceProvider* agent_provider = nullptr) {
  RegionalRunResult res;
  res.seed = seed;
  res.statics = make_regional_statics(cfg, seed);
  const RegionalStatics& st = res.statics;
  res.agent = simulate_agent_choices(st, cfg, seed, agent_provider);
  res.targets = make_target_shares(st, cfg, seed);
  res.eval_regions = st.split.ood_regions.empty() ? st.split.id_regions : st.split.ood_regions;

  // Reference panels.
  std::vector<ShareVector> truth_shares, agent_shares;
  for (int z : res.eval_regions) {
    const auto uz = static_cast<std::size_t>(z);
    for (Period period : {Period::pre, Period::post}) {
      truth_shares.push_back(st.exact_shares[uz * 2 + static_cast<std::size_t>(period)]);
      ShareVector sv = truth_shares.back();
      sv.shares = empirical_cell_share(res.agent, res.agent.cell(z, period), cfg.categories.k());
      agent_shares.push_back(std::move(sv));
    }
  }
  res.truth = did_estimate(make_share_panel(truth_shares, cfg.outcome_category),
                           SeKind::cluster_by_region, true, "truth");
  res.national = did_estimate(make_share_panel(agent_shares, cfg.outcome_category),
                              SeKind::cluster_by_region, true, "national");
  res.human_id = did_estimate(make_share_panel(res.targets, cfg.outcome_category),
                              SeKind::cluster_by_region, true, "human_id");

  const detail::CellSet cells =
      detail::build_cell_set(st, cfg, res.agent, st.split.id_regions, res.targets, nullptr);
  if (cfg.train_mixture) {
    res.mixture = detail::train_and_evaluate(st, cfg, res.agent, cells, CorrectorKind::mixture,
                                             substream_seed(seed, "train.mixture"),
                                             res.eval_regions);
    res.has_mixture = true;
  }
  if (cfg.train_integrated) {
    res.integrated = detail::train_and_evaluate(st, cfg, res.agent, cells,
                                                CorrectorKind::integrated,
                                                substream_seed(seed, "train.integrated"),
                                                res.eval_regions);
    res.has_integrated = true;
  }
  res.notes.push_back("train slice per cell: leading 1/7 of persona-major rows; next 1/14 validate");
  res.notes.push_back(std::string("human targets: ") +
                      (cfg.human_draws_per_cell == 0 ? "exact enumeration"
                                                     : "sampled choices") +
                      (cfg.day_one_post ? "; post period restricted to the first menu" : ""));
  return res;
}

// ---------------------------------------------------------------------------
// Pipeline-wide bootstrap
// ---------------------------------------------------------------------------

struct BootstrapPlan {
  int reps = 20;
  // reuse: keep the generated choices, resample regions/personas and retrain.
  // regenerate: re-simulate all choices per replica on the fixed population.
  bool regenerate = false;
  bool resample_regions = true;
  bool resample_personas = true;
};

struct BootstrapSummary {
  EffectEstimate point;                        // master-seed estimate
  std::vector<EffectEstimate> replicates;      // successful replicas
  std::vector<std::string> failure_reasons;
  int requested = 0;
  int failures = 0;
  double mean = 0.0;
  double sd = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;

  double width() const { return ci_high - ci_low; }
  bool contains(double value) const { return ci_low <= value && value <= ci_high; }
};

// Aggregates replicate effect estimates into a t-interval around the replica
// mean. Errors when more than half of the requested replicas failed.
inline BootstrapSummary summarize_bootstrap(std::vector<EffectEstimate> replicates, int requested,
                                            std::vector<std::string> failure_reasons) {
  BootstrapSummary s;
  s.requested = requested;
  s.failures = requested - static_cast<int>(replicates.size());
  s.failure_reasons = std::move(failure_reasons);
  const int b = static_cast<int>(replicates.size());
  if (2 * b < requested || b < 2) {
    std::string msg = "bootstrap: only " + std::to_string(b) + " of " + std::to_string(requested) +
                      " replicas succeeded";
    if (!s.failure_reasons.empty()) msg += " (first failure: " + s.failure_reasons.front() + ")";
    throw numeric_error(msg);
  }
  Vec beta;
  beta.reserve(replicates.size());
  for (const EffectEstimate& e : replicates) beta.push_back(e.beta3);
  s.mean = mean(beta);
  s.sd = sample_sd(beta);
  const double half =
      t_quantile(static_cast<double>(b - 1), 0.975) * s.sd / std::sqrt(static_cast<double>(b));
  s.ci_low = s.mean - half;
  s.ci_high = s.mean + half;
  s.replicates = std::move(replicates);
  return s;
}

// Generic driver: runs `replicate(seed_i, i)` for each replica with its own
// seed substream, tolerating typed failures up to the half-quorum rule.
inline BootstrapSummary bootstrap_effects(
    int reps, std::uint64_t master_seed,
    const std::function<EffectEstimate(std::uint64_t, int)>& replicate) {
  if (reps < 2) throw validation_error("bootstrap: need at least 2 replicas");
  std::vector<EffectEstimate> ok;
  std::vector<std::string> reasons;
  for (int i = 0; i < reps; ++i) {
    const std::uint64_t seed_i =
        substream_seed(master_seed, "bootstrap", static_cast<std::uint64_t>(i));
    try {
      ok.push_back(replicate(seed_i, i));
    } catch (const error& e) {
      reasons.push_back("replica " + std::to_string(i) + ": " + e.what());
    }
  }
  return summarize_bootstrap(std::move(ok), reps, std::move(reasons));
}

// Pipeline-wide bootstrap of the corrected regional effect. The point
// estimate comes from the master seed; each replica perturbs the generated
// data (resampling or regeneration) and retrains the corrector end to end.
struct RegionalBootstrapResult {
  RegionalRunResult base;
  BootstrapSummary summary;
};

inline RegionalBootstrapResult run_regional_bootstrap(const RegionalScenarioConfig& cfg,
                                                      const BootstrapPlan& plan,
                                                      std::uint64_t seed,
                                                      ChoiceProvider* agent_provider = nullptr) {
  RegionalBootstrapResult out;
  out.base = run_regional_scenario(cfg, seed, agent_provider);
  const RegionalStatics& st = out.base.statics;
  const CorrectorKind kind =
      cfg.train_mixture ? CorrectorKind::mixture : CorrectorKind::integrated;
  if (!cfg.train_mixture && !cfg.train_integrated)
    throw validation_error("bootstrap: no corrector enabled");

  auto replicate = [&](std::uint64_t seed_i, int /*index*/) -> EffectEstimate {
    const AgentData* agent = &out.base.agent;
    AgentData fresh;
    std::vector<ShareVector> targets = out.base.targets;
    std::vector<int> id_multiset(st.split.id_regions.begin(), st.split.id_regions.end());
    Rng* persona_rng_ptr = nullptr;
    Rng persona_rng(seed_i, "boot.personas");

    if (plan.regenerate) {
      fresh = simulate_agent_choices(st, cfg, seed_i, agent_provider);
      agent = &fresh;
      targets = make_target_shares(st, cfg, seed_i);
    } else {
      if (plan.resample_regions) {
        Rng region_rng(seed_i, "boot.regions");
        for (std::size_t i = 0; i < id_multiset.size(); ++i)
          id_multiset[i] = st.split.id_regions[static_cast<std::size_t>(region_rng.uniform_int(
              0, static_cast<std::int64_t>(st.split.id_regions.size()) - 1))];
      }
      if (plan.resample_personas) persona_rng_ptr = &persona_rng;
    }

    const detail::CellSet cells =
        detail::build_cell_set(st, cfg, *agent, id_multiset, targets, persona_rng_ptr);
    const CorrectionOutcome outcome = detail::train_and_evaluate(
        st, cfg, *agent, cells, kind, substream_seed(seed_i, "train.replica"),
        out.base.eval_regions);
    return outcome.corrected;
  };

  out.summary = bootstrap_effects(plan.reps, seed, replicate);
  out.summary.point = kind == CorrectorKind::mixture ? out.base.mixture.corrected
                                                     : out.base.integrated.corrected;
  return out;
}

// ---------------------------------------------------------------------------
// Day-one study
// ---------------------------------------------------------------------------

// Day-one comparison: with post-period human data limited to each region's
// first menu, contrast the human-only DiD interval with the corrected
// bootstrap interval. Ground truth covers all menus.
struct DayOneResult {
  EffectEstimate human;  // DiD on the day-one human targets
  BootstrapSummary corrected;
  EffectEstimate truth;
  double width_ratio = 0.0;  // corrected width / human width
  bool human_contains_truth = false;
  bool corrected_contains_truth = false;
};

inline DayOneResult run_day_one_study(RegionalScenarioConfig cfg, const BootstrapPlan& plan,
                                      std::uint64_t seed) {
  cfg.day_one_post = true;
  RegionalBootstrapResult boot = run_regional_bootstrap(cfg, plan, seed);
  DayOneResult res;
  res.human = boot.base.human_id;
  res.corrected = boot.summary;
  res.truth = boot.base.truth;
  const double human_width = res.human.ci_high - res.human.ci_low;
  res.width_ratio = human_width > 0.0 ? res.corrected.width() / human_width
                                      : std::numeric_limits<double>::infinity();
  res.human_contains_truth =
      res.human.ci_low <= res.truth.beta3 && res.truth.beta3 <= res.human.ci_high;
  res.corrected_contains_truth = res.corrected.contains(res.truth.beta3);
  return res;
}

// ---------------------------------------------------------------------------
// Conjoint scenario
// ---------------------------------------------------------------------------

struct ConjointScenarioConfig {
  ConjointConfig data;
  CorrectionFitOptions correction;
  MnlOptions mnl;
};

struct ConjointRunResult {
  CorrectionModel correction;
  PartworthSuite suite;
  double mape_primary = 0.0;
  double mape_aux = 0.0;
  double mape_naive = 0.0;
  double mape_corrected = 0.0;
  double br_aux = 0.0;        // bias reduction vs the primary-only estimator
  double br_naive = 0.0;
  double br_corrected = 0.0;
};

inline ConjointRunResult run_conjoint_scenario(const ConjointScenarioConfig& cfg,
                                               std::uint64_t seed) {
  const ConjointDataset ds = make_conjoint_dataset(cfg.data, seed);

  auto gather = [&ds](const std::vector<ConjointDataset::Row>& rows) {
    struct Gathered {
      std::vector<ChoiceTask> tasks;
      std::vector<int> y, z;
      std::vector<ChoiceLabel> y_lab, z_lab;
    } g;
    for (const auto& r : rows) {
      g.tasks.push_back(ds.tasks[static_cast<std::size_t>(r.task)]);
      g.y.push_back(r.y);
      g.z.push_back(r.z);
      if (r.y >= 0) g.y_lab.push_back(ChoiceLabel::hard(r.y));
      g.z_lab.push_back(ChoiceLabel::hard(r.z));
    }
    return g;
  };
  auto primary = gather(ds.primary);
  auto aux = gather(ds.aux);
  std::vector<ChoiceLabel> aux_hidden;
  aux_hidden.reserve(ds.aux_hidden_y.size());
  for (std::int16_t y : ds.aux_hidden_y) aux_hidden.push_back(ChoiceLabel::hard(y));

  ConjointRunResult res;
  res.correction = fit_correction(primary.tasks, primary.y, primary.z, cfg.correction);
  const std::vector<ChoiceLabel> aux_soft =
      predict_soft_choices(res.correction, aux.tasks, aux.z);

  res.suite = estimate_partworth_suite(primary.tasks, primary.y_lab, primary.z_lab, aux.tasks,
                                       aux.z_lab, aux_soft, aux_hidden, cfg.mnl);
  const Vec& star = res.suite.star.beta;
  res.mape_primary = mape(res.suite.primary.beta, star);
  res.mape_aux = mape(res.suite.aux.beta, star);
  res.mape_naive = mape(res.suite.naive.beta, star);
  res.mape_corrected = mape(res.suite.corrected.beta, star);
  res.br_aux = bias_reduction(res.mape_aux, res.mape_primary);
  res.br_naive = bias_reduction(res.mape_naive, res.mape_primary);
  res.br_corrected = bias_reduction(res.mape_corrected, res.mape_primary);
  return res;
}

// ---------------------------------------------------------------------------
// Scenario presets
// ---------------------------------------------------------------------------

namespace presets {

// Shared decision-rule template for the regional scenarios. Columns of the
// coupling matrix follow the demographic feature order (age, gender, income,
// education).
inline PopulationConfig regional_population(int per_stratum_t_ssd, int per_stratum_t_nossd,
                                            int per_stratum_c_ssd, int per_stratum_c_nossd,
                                            int personas_ssd, int personas_nossd) {
  PopulationConfig pc;
  pc.strata_counts = {per_stratum_t_ssd, per_stratum_t_nossd, per_stratum_c_ssd,
                      per_stratum_c_nossd};
  pc.n_regions = per_stratum_t_ssd + per_stratum_t_nossd + per_stratum_c_ssd + per_stratum_c_nossd;
  pc.personas_per_region = personas_ssd;
  pc.personas_per_region_nossd = personas_nossd;
  pc.q = kMenuAttrCount;
  // fee, days, free_ship, expedited, sameday, treat_flag, basket
  pc.base_weights = {-2.0, -0.18, 1.2, 0.3, -1.1, -0.5, 0.6};
  pc.coupling = Mat(kMenuAttrCount, 4, 0.0);
  pc.coupling(0, 2) = 0.55;   // higher income: less fee-sensitive
  pc.coupling(1, 2) = -0.08;  // higher income: more delay-averse
  pc.coupling(4, 2) = 0.65;   // higher income: stronger same-day taste
  pc.coupling(4, 0) = -0.25;  // older: weaker same-day taste
  pc.coupling(3, 2) = 0.25;   // higher income: likes expedited
  pc.coupling(5, 2) = -0.30;  // higher income: more responsive to the rollout
  pc.heterogeneity = 1.0;
  pc.idio_sd = 0.15;
  pc.region_weight_sd = 0.05;
  pc.income_tilt = 0.4;
  return pc;
}

// Main regional evaluation: corrector identification quality on ID regions
// and out-of-distribution effect recovery.
inline RegionalScenarioConfig regional_main() {
  RegionalScenarioConfig cfg;
  cfg.population = regional_population(115, 110, 122, 106, 70, 12);
  cfg.menus_per_region = 42;
  cfg.gamma = 0.8;
  cfg.id_fraction = 0.1;
  cfg.train_mixture = true;
  cfg.train_integrated = true;
  cfg.corrector.lr = 3e-3;
  cfg.corrector.epochs = 60;
  cfg.corrector.patience = 20;
  return cfg;
}

// Smaller instance of the main scenario for fast iteration and tests.
inline RegionalScenarioConfig regional_small() {
  RegionalScenarioConfig cfg;
  cfg.population = regional_population(15, 15, 15, 15, 16, 8);
  cfg.menus_per_region = 10;
  cfg.gamma = 0.8;
  cfg.id_fraction = 0.1;
  cfg.corrector.lr = 3e-3;
  cfg.corrector.epochs = 40;
  return cfg;
}

// Coverage study: moderate size, regenerated replicas.
inline RegionalScenarioConfig regional_coverage() {
  RegionalScenarioConfig cfg;
  cfg.population = regional_population(15, 15, 15, 15, 20, 10);
  cfg.menus_per_region = 14;
  cfg.gamma = 0.5;
  cfg.id_fraction = 0.1;
  cfg.corrector.lr = 3e-3;
  cfg.corrector.epochs = 40;
  cfg.corrector.patience = 10;
  return cfg;
}

// Degenerate construction: all regions within a stratum are clones, so the
// within-replica regression variance collapses to zero while the bootstrap
// interval stays positive. Only the launched strata are populated (menu
// structure would otherwise differ within an arm) and the outcome is the
// standard-delivery share, which every cell observes.
inline RegionalScenarioConfig regional_degenerate() {
  RegionalScenarioConfig cfg;
  cfg.population = regional_population(12, 0, 12, 0, 1, 1);
  cfg.population.idio_sd = 0.0;
  cfg.population.region_weight_sd = 0.0;
  cfg.population.income_tilt = 0.0;
  cfg.menus_per_region = 28;
  cfg.gamma = 0.0;
  cfg.id_fraction = 0.2;
  cfg.outcome_category = 2;  // standard delivery
  cfg.clone_within_stratum = true;
  cfg.corrector.lr = 3e-3;
  cfg.corrector.epochs = 30;
  cfg.corrector.patience = 10;
  return cfg;
}

// Day-one study: human data everywhere, but post-period human shares come
// from the first menu only.
inline RegionalScenarioConfig regional_day_one() {
  RegionalScenarioConfig cfg;
  cfg.population = regional_population(25, 25, 25, 25, 24, 12);
  cfg.menus_per_region = 14;
  cfg.gamma = 0.8;
  cfg.id_fraction = 1.0;
  cfg.day_one_post = true;
  cfg.day_one_draws = 150;
  cfg.corrector.lr = 3e-3;
  cfg.corrector.epochs = 40;
  cfg.corrector.patience = 10;
  return cfg;
}

// Conjoint comparison: strongly distorted agent labels over a two-survey
// design (small human-labeled primary set, large agent-labeled auxiliary set).
inline ConjointScenarioConfig conjoint_main() {
  ConjointScenarioConfig cfg;
  cfg.data.primary_customers = 100;
  cfg.data.aux_customers = 1000;
  cfg.data.tasks_per_customer = 10;
  cfg.data.q = 6;
  cfg.data.k_inside = 4;
  cfg.data.beta_population = {1.0, -0.8, 0.6, -1.2, 0.9, -0.5};
  cfg.data.heterogeneity_sd = 0.35;
  cfg.data.distortion.scale = 2.0;
  cfg.data.distortion.heterogeneity_shrink = 0.7;
  cfg.data.distortion.shift = {0.5, 0.0, -0.4, 0.0, 0.3, 0.0};
  return cfg;
}

}  // namespace presets

inline std::vector<std::string> regional_scenario_names() {
  return {"regional-main", "regional-small", "coverage", "degenerate", "day-one"};
}

inline RegionalScenarioConfig regional_scenario_preset(const std::string& name) {
  if (name == "regional-main") return presets::regional_main();
  if (name == "regional-small") return presets::regional_small();
  if (name == "coverage") return presets::regional_coverage();
  if (name == "degenerate") return presets::regional_degenerate();
  if (name == "day-one") return presets::regional_day_one();
  throw config_error("unknown regional scenario: " + name);
}

}  // namespace aem
