#pragma once

// Core data types shared by every stage: choice tasks, labels, personas,
// regions, triplet observations, share vectors, and the two estimate types
// (part-worths and treatment effects), plus dataset validation.
//
// Conventions used throughout:
//   - A task holds K "inside" options plus (usually) an implicit outside /
//     give-up alternative of fixed utility zero. Probability vectors over a
//     task therefore have K+1 entries with the outside probability last.
//   - Delivery categories are an ordered, configurable list; regional share
//     vectors are distributions over these categories (the no-purchase
//     category included), not over menu positions.
//   - All types are immutable-after-construction value types.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aem/errors.hpp"
#include "aem/math.hpp"

namespace aem {

enum class Period : std::uint8_t { pre = 0, post = 1 };
enum class Arm : std::uint8_t { control = 0, treatment = 1 };

inline const char* to_string(Period p) { return p == Period::pre ? "pre" : "post"; }
inline const char* to_string(Arm a) { return a == Arm::control ? "control" : "treatment"; }

inline Period period_from_string(const std::string& s) {
  if (s == "pre") return Period::pre;
  if (s == "post") return Period::post;
  throw validation_error("unknown period: " + s);
}

inline Arm arm_from_string(const std::string& s) {
  if (s == "control") return Arm::control;
  if (s == "treatment") return Arm::treatment;
  throw validation_error("unknown arm: " + s);
}

// Ordered list of delivery categories for regional observations. The last
// category is the no-purchase / give-up bucket that the outside option of
// every menu maps to.
struct CategorySet {
  std::vector<std::string> names;

  std::size_t k() const { return names.size(); }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }

  int no_purchase() const { return static_cast<int>(names.size()) - 1; }

  static CategorySet standard() {
    return CategorySet{{"SameDay", "NextOrSecondDay", "Standard", "FST", "NoPurchase"}};
  }
};

// One decision instance: a K x q matrix of option attribute levels plus the
// optional outside alternative. `option_category` maps each inside option to
// a delivery category index (empty for conjoint tasks, which have no
// category semantics).
struct ChoiceTask {
  std::string task_id;
  Mat options;                          // K inside options x q attributes
  bool has_outside = true;
  std::vector<int> option_category;     // size 0 or K; values index a CategorySet

  std::size_t k_inside() const { return options.rows; }
  std::size_t q() const { return options.cols; }
  // Index used for the outside alternative in hard labels.
  int outside_index() const { return static_cast<int>(options.rows); }
};

// Validates a single task against an expected attribute count (0 = any).
inline void check_task(const ChoiceTask& t, std::size_t expect_q = 0) {
  if (t.options.rows < 1) throw validation_error("task " + t.task_id + ": no options");
  if (expect_q != 0 && t.options.cols != expect_q)
    throw dimension_error("task " + t.task_id + ": attribute count mismatch");
  if (!all_finite(t.options.a))
    throw validation_error("task " + t.task_id + ": non-finite attribute");
  if (!t.option_category.empty() && t.option_category.size() != t.options.rows)
    throw dimension_error("task " + t.task_id + ": option_category size mismatch");
}

// A response to a task: either a hard index (K = outside) or a soft
// probability vector of length K+1 (outside last).
struct ChoiceLabel {
  enum class Kind : std::uint8_t { hard, soft } kind = Kind::hard;
  int hard_index = -1;
  Vec soft;

  static ChoiceLabel hard(int index) {
    ChoiceLabel l;
    l.kind = Kind::hard;
    l.hard_index = index;
    return l;
  }

  static ChoiceLabel soft_label(Vec probs) {
    ChoiceLabel l;
    l.kind = Kind::soft;
    l.soft = std::move(probs);
    return l;
  }
};

inline void check_label(const ChoiceLabel& l, std::size_t k_inside) {
  if (l.kind == ChoiceLabel::Kind::hard) {
    if (l.hard_index < 0 || l.hard_index > static_cast<int>(k_inside))
      throw validation_error("hard label index out of range");
  } else {
    if (l.soft.size() != k_inside + 1) throw dimension_error("soft label length mismatch");
    double s = 0.0;
    for (double p : l.soft) {
      if (p < 0.0 || !std::isfinite(p)) throw validation_error("soft label has invalid entry");
      s += p;
    }
    if (std::fabs(s - 1.0) > 1e-9) throw validation_error("soft label not normalized");
  }
}

// A simulated individual: hidden decision weights (the synthetic ground
// truth, never shown to correctors) plus observable demographic codes
// [age band, gender code, income band, education level].
struct Persona {
  std::string persona_id;
  std::string region_id;
  Vec latent_weights;
  Vec observables;
};

// A geographic unit (ZIP3-like key) with its experiment stratum flags and
// the persona / order sets generated for it.
struct Region {
  std::string region_id;
  bool treatment = false;
  bool ssd_launched = false;
  std::vector<std::int32_t> persona_ids;  // indices into the population's persona list
  std::vector<std::int32_t> order_ids;    // indices into the order pool

  Arm arm() const { return treatment ? Arm::treatment : Arm::control; }
  // Stratum index in the fixed order (T,SSD), (T,noSSD), (C,SSD), (C,noSSD).
  int stratum() const { return (treatment ? 0 : 2) + (ssd_launched ? 0 : 1); }
};

inline const char* stratum_name(int s) {
  static const char* names[4] = {"treatment_ssd", "treatment_nossd", "control_ssd",
                                 "control_nossd"};
  return names[s];
}

// The atomic regional observation: persona p faced order o's menu and one
// category got chosen. `choice` is a one-hot vector over delivery categories
// (no-purchase included as the last category).
struct TripletRecord {
  std::string order_id;
  std::string persona_id;
  std::string region_id;
  Vec choice;  // one-hot over K categories
  Period period = Period::pre;
  Arm arm = Arm::control;

  int choice_index() const {
    for (std::size_t i = 0; i < choice.size(); ++i)
      if (choice[i] == 1.0) return static_cast<int>(i);
    return -1;
  }

  static Vec one_hot(std::size_t k, int index) {
    Vec v(k, 0.0);
    v.at(static_cast<std::size_t>(index)) = 1.0;
    return v;
  }
};

// Per-region distribution over delivery categories.
struct ShareVector {
  std::string region_id;
  Arm arm = Arm::control;
  Period period = Period::pre;
  Vec shares;  // length K, sums to 1
};

inline void check_share(const ShareVector& s) {
  double total = 0.0;
  for (double x : s.shares) {
    if (x < 0.0 || !std::isfinite(x))
      throw validation_error("share vector for region " + s.region_id + " has invalid entry");
    total += x;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw validation_error("share vector for region " + s.region_id + " not normalized (sum " +
                           std::to_string(total) + ")");
}

// Fitted part-worth vector with optimizer diagnostics, tagged by which label
// set produced it ("pooled_human", "primary_human", "agent", "naive",
// "corrected", ...).
struct PartWorth {
  Vec beta;
  bool converged = false;
  double final_loss = 0.0;
  std::string provenance;
  int iterations = 0;
  bool ridge_applied = false;
};

// Treatment-effect estimate. For share outcomes all reported numbers
// (beta3, se, ci bounds) are in basis points; raw regression coefficients in
// fraction units are kept in `coef` for diagnostics.
struct EffectEstimate {
  double beta3 = 0.0;
  double se = 0.0;
  double p_value = 1.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  bool has_ci = false;
  std::string method;
  Vec coef;        // beta0..beta3 in fraction units
  double df = 0.0; // degrees of freedom used for se / p / ci
};

// One observation for the 2x2 effect regression: a region-period outcome
// (share in fraction units) with an observation-count weight.
struct PanelCell {
  std::string region_id;
  Period period = Period::pre;
  Arm arm = Arm::control;
  double outcome = 0.0;
  double weight = 1.0;
};

// ---------------------------------------------------------------------------
// Dataset validation
// ---------------------------------------------------------------------------

// Expected shape of a dataset; zero means "don't check".
struct DatasetSchema {
  std::size_t q = 0;             // attributes per option
  std::size_t k_inside = 0;      // inside options per task
  std::size_t n_categories = 0;  // delivery categories (triplets/shares)
};

struct Violation {
  std::string where;    // "row 17", "region 042", ...
  std::string message;
};

using ValidationReport = std::vector<Violation>;

// Triplet collection: choices must be exact one-hot vectors of the expected
// category count.
inline ValidationReport validate_dataset(std::span<const TripletRecord> records,
                                         const DatasetSchema& schema) {
  ValidationReport report;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const TripletRecord& r = records[i];
    const std::string where = "row " + std::to_string(i + 1);
    if (schema.n_categories != 0 && r.choice.size() != schema.n_categories) {
      report.push_back({where, "choice vector length " + std::to_string(r.choice.size()) +
                                   " does not match category count " +
                                   std::to_string(schema.n_categories)});
      continue;
    }
    int ones = 0;
    bool clean = true;
    for (double v : r.choice) {
      if (v == 1.0)
        ++ones;
      else if (v != 0.0)
        clean = false;
    }
    if (!clean || ones != 1) report.push_back({where, "choice is not one-hot"});
  }
  return report;
}

// Share table: every vector must be a normalized distribution.
inline ValidationReport validate_dataset(std::span<const ShareVector> shares,
                                         const DatasetSchema& schema) {
  ValidationReport report;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const ShareVector& s = shares[i];
    const std::string where = "region " + s.region_id + " (row " + std::to_string(i + 1) + ")";
    if (schema.n_categories != 0 && s.shares.size() != schema.n_categories) {
      report.push_back({where, "share vector length mismatch"});
      continue;
    }
    double total = 0.0;
    bool valid = true;
    for (double x : s.shares) {
      if (x < 0.0 || !std::isfinite(x)) valid = false;
      total += x;
    }
    if (!valid)
      report.push_back({where, "share entry negative or non-finite"});
    else if (std::fabs(total - 1.0) > 1e-9)
      report.push_back({where, "shares unnormalized (sum " + std::to_string(total) + ")"});
  }
  return report;
}

// Task + label pairs (conjoint rows). Checks dimension agreement, label
// ranges and soft-label normalization.
inline ValidationReport validate_dataset(std::span<const ChoiceTask> tasks,
                                         std::span<const ChoiceLabel> labels,
                                         const DatasetSchema& schema) {
  ValidationReport report;
  if (tasks.size() != labels.size()) {
    report.push_back({"dataset", "task and label counts differ"});
    return report;
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::string where = "row " + std::to_string(i + 1);
    try {
      check_task(tasks[i], schema.q);
      if (schema.k_inside != 0 && tasks[i].k_inside() != schema.k_inside)
        throw dimension_error("option count mismatch");
      check_label(labels[i], tasks[i].k_inside());
    } catch (const error& e) {
      report.push_back({where, e.what()});
    }
  }
  return report;
}

}  // namespace aem
