#pragma once

// Reporting: the estimator comparison table, per-stratum share accuracy,
// machine-readable run reports, and small self-contained SVG charts.

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "aem/io.hpp"
#include "aem/pipeline.hpp"

namespace aem {

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

// Estimator comparison, one column per estimator: the human-only estimate on
// identification regions, the enumerated human benchmark on the evaluation
// regions, both correctors, and the uncorrected agent ("national") estimate.
// Columns with a null estimate render as empty cells.
inline std::string comparison_table_csv(
    const std::vector<std::pair<std::string, const EffectEstimate*>>& cols) {
  std::ostringstream out;
  out << "quantity";
  for (const auto& [name, e] : cols) out << ',' << name;
  out << '\n';
  auto row = [&](const char* name, auto get) {
    out << name;
    for (const auto& [colname, e] : cols) {
      out << ',';
      if (e != nullptr) out << detail::format_double(get(*e));
    }
    out << '\n';
  };
  row("beta3_bps", [](const EffectEstimate& e) { return e.beta3; });
  row("se_bps", [](const EffectEstimate& e) { return e.se; });
  row("ci_low_bps", [](const EffectEstimate& e) { return e.ci_low; });
  row("ci_high_bps", [](const EffectEstimate& e) { return e.ci_high; });
  row("p_value", [](const EffectEstimate& e) { return e.p_value; });
  return out.str();
}

inline std::string comparison_table_csv(const RegionalRunResult& res) {
  return comparison_table_csv(
      {{"id_human", &res.human_id},
       {"ood_human", &res.truth},
       {"integrated", res.has_integrated ? &res.integrated.corrected : nullptr},
       {"mixture", res.has_mixture ? &res.mixture.corrected : nullptr},
       {"national", &res.national}});
}

inline std::string region_kl_csv(const CorrectionOutcome& outcome) {
  std::ostringstream out;
  out << "region_id,period,n_triplets,kl\n";
  for (const RegionKlRow& r : outcome.id_kl)
    out << r.region_id << ',' << to_string(r.period) << ',' << r.n << ','
        << detail::format_double(r.kl) << '\n';
  return out.str();
}

// Mean absolute share error on the evaluation regions, grouped by the
// treatment x launch stratum. The "national" column scores the uncorrected
// agent shares.
inline std::string share_error_by_stratum_csv(const RegionalRunResult& res) {
  const RegionalStatics& st = res.statics;
  std::map<std::string, std::size_t> region_index;
  for (std::size_t z = 0; z < st.pop.regions.size(); ++z)
    region_index[st.pop.regions[z].region_id] = z;

  struct Acc {
    double sum = 0.0;
    int n = 0;
  };
  std::array<Acc, 4> mixture{}, integrated{}, national{};
  std::array<int, 4> regions{};

  auto mae = [](const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) s += std::fabs(a[j] - b[j]);
    return s / static_cast<double>(a.size());
  };
  auto accumulate = [&](std::array<Acc, 4>& acc, const ShareVector& sv) {
    const std::size_t z = region_index.at(sv.region_id);
    const bool in_eval = std::binary_search(res.eval_regions.begin(), res.eval_regions.end(),
                                            static_cast<int>(z));
    if (!in_eval) return;
    const auto stratum = static_cast<std::size_t>(st.pop.regions[z].stratum());
    const ShareVector& exact =
        st.exact_shares[z * 2 + static_cast<std::size_t>(sv.period)];
    acc[stratum].sum += mae(sv.shares, exact.shares);
    acc[stratum].n += 1;
  };
  if (res.has_mixture)
    for (const ShareVector& sv : res.mixture.predicted) accumulate(mixture, sv);
  if (res.has_integrated)
    for (const ShareVector& sv : res.integrated.predicted) accumulate(integrated, sv);
  const std::size_t k = st.exact_shares.empty() ? 0 : st.exact_shares[0].shares.size();
  for (int z : res.eval_regions) {
    regions[static_cast<std::size_t>(st.pop.regions[static_cast<std::size_t>(z)].stratum())] += 1;
    for (Period period : {Period::pre, Period::post}) {
      ShareVector sv;
      sv.region_id = st.pop.regions[static_cast<std::size_t>(z)].region_id;
      sv.period = period;
      sv.shares = empirical_cell_share(res.agent, res.agent.cell(z, period), k);
      accumulate(national, sv);
    }
  }

  std::ostringstream out;
  out << "stratum,n_regions,mixture_mae,integrated_mae,national_mae\n";
  for (int s = 0; s < 4; ++s) {
    const auto us = static_cast<std::size_t>(s);
    out << stratum_name(s) << ',' << regions[us];
    auto cell = [&](const std::array<Acc, 4>& acc, bool present) {
      out << ',';
      if (present && acc[us].n > 0)
        out << detail::format_double(acc[us].sum / acc[us].n);
    };
    cell(mixture, res.has_mixture);
    cell(integrated, res.has_integrated);
    cell(national, true);
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// SVG charts
// ---------------------------------------------------------------------------

namespace detail {

inline std::string svg_polyline(const std::vector<std::pair<double, double>>& pts,
                                const char* color) {
  std::ostringstream out;
  out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
  for (const auto& [x, y] : pts) out << format_double(x) << ',' << format_double(y) << ' ';
  out << "\"/>\n";
  return out.str();
}

}  // namespace detail

// Training and validation KL per epoch.
inline std::string training_curve_svg(std::span<const TrainingCurvePoint> curve) {
  const double w = 640, h = 360, ml = 60, mr = 20, mt = 20, mb = 40;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!curve.empty()) {
    double lo = curve[0].train_kl, hi = lo;
    for (const TrainingCurvePoint& p : curve) {
      lo = std::min({lo, p.train_kl, p.val_kl});
      hi = std::max({hi, p.train_kl, p.val_kl});
    }
    if (hi <= lo) hi = lo + 1.0;
    auto xmap = [&](std::size_t i) {
      return ml + (w - ml - mr) * (curve.size() > 1
                                       ? static_cast<double>(i) /
                                             static_cast<double>(curve.size() - 1)
                                       : 0.5);
    };
    auto ymap = [&](double v) { return h - mb - (h - mt - mb) * (v - lo) / (hi - lo); };
    std::vector<std::pair<double, double>> train, val;
    for (std::size_t i = 0; i < curve.size(); ++i) {
      train.emplace_back(xmap(i), ymap(curve[i].train_kl));
      val.emplace_back(xmap(i), ymap(curve[i].val_kl));
    }
    out << detail::svg_polyline(train, "#1f77b4") << detail::svg_polyline(val, "#ff7f0e");
    out << "<text x=\"" << ml << "\" y=\"" << mt - 5
        << "\" font-size=\"12\">KL per epoch (blue: train, orange: validation)</text>\n";
    out << "<text x=\"" << ml << "\" y=\"" << h - 10 << "\" font-size=\"11\">epochs: "
        << curve.size() << ", final val KL: " << detail::format_double(curve.back().val_kl)
        << "</text>\n";
  }
  out << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
      << h - mb << "\" stroke=\"black\"/>\n<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\""
      << ml << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n</svg>\n";
  return out.str();
}

// Point estimates with confidence whiskers and the benchmark as a dashed line.
inline std::string effect_chart_svg(
    const std::vector<std::pair<std::string, EffectEstimate>>& effects, double truth_bps) {
  const double w = 640, ml = 140, mr = 30, row_h = 44, mt = 30, mb = 30;
  const double h = mt + mb + row_h * static_cast<double>(effects.size());
  double lo = truth_bps, hi = truth_bps;
  for (const auto& [name, e] : effects) {
    lo = std::min({lo, e.ci_low, e.beta3});
    hi = std::max({hi, e.ci_high, e.beta3});
  }
  const double pad = std::max(1.0, (hi - lo) * 0.1);
  lo -= pad;
  hi += pad;
  auto xmap = [&](double v) { return ml + (w - ml - mr) * (v - lo) / (hi - lo); };
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << detail::format_double(xmap(truth_bps)) << "\" y1=\"" << mt - 10
      << "\" x2=\"" << detail::format_double(xmap(truth_bps)) << "\" y2=\"" << h - mb + 10
      << "\" stroke=\"#555\" stroke-dasharray=\"4 3\"/>\n";
  out << "<text x=\"" << detail::format_double(xmap(truth_bps) + 4) << "\" y=\"" << mt - 14
      << "\" font-size=\"11\">benchmark " << detail::format_double(truth_bps) << " bps</text>\n";
  for (std::size_t i = 0; i < effects.size(); ++i) {
    const auto& [name, e] = effects[i];
    const double y = mt + row_h * (static_cast<double>(i) + 0.5);
    out << "<text x=\"10\" y=\"" << y + 4 << "\" font-size=\"12\">" << name << "</text>\n";
    out << "<line x1=\"" << detail::format_double(xmap(e.ci_low)) << "\" y1=\"" << y << "\" x2=\""
        << detail::format_double(xmap(e.ci_high)) << "\" y2=\"" << y
        << "\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n";
    out << "<circle cx=\"" << detail::format_double(xmap(e.beta3)) << "\" cy=\"" << y
        << "\" r=\"4\" fill=\"#1f77b4\"/>\n";
  }
  out << "</svg>\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Run reports
// ---------------------------------------------------------------------------

inline std::vector<std::pair<std::string, EffectEstimate>> named_effects(
    const RegionalRunResult& res) {
  std::vector<std::pair<std::string, EffectEstimate>> out;
  out.emplace_back("id_human", res.human_id);
  out.emplace_back("ood_human", res.truth);
  if (res.has_integrated) out.emplace_back("integrated", res.integrated.corrected);
  if (res.has_mixture) out.emplace_back("mixture", res.mixture.corrected);
  out.emplace_back("national", res.national);
  return out;
}

inline json regional_report_json(const RegionalRunResult& res, const BootstrapSummary* boot,
                                 const RunConfig* run_cfg) {
  json j;
  j["tool_version"] = kVersionString;
  j["kind"] = "regional";
  j["seed"] = res.seed;
  if (run_cfg != nullptr) {
    j["config"] = {{"hash", config_hash_hex(*run_cfg)},
                   {"canonical", canonical_config_json(*run_cfg)}};
  }
  std::vector<std::string> id_names;
  for (int z : res.statics.split.id_regions)
    id_names.push_back(res.statics.pop.regions[static_cast<std::size_t>(z)].region_id);
  j["split"] = {{"id_regions", id_names},
                {"n_ood", res.statics.split.ood_regions.size()},
                {"n_eval", res.eval_regions.size()}};
  json estimates;
  for (const auto& [name, e] : named_effects(res)) estimates[name] = effect_to_json(e);
  j["estimates"] = std::move(estimates);
  if (boot != nullptr) j["bootstrap"] = bootstrap_to_json(*boot);
  if (res.has_mixture)
    j["fit"]["mixture"] = {{"max_id_kl", res.mixture.max_id_kl},
                           {"best_epoch", res.mixture.model.best_epoch},
                           {"best_val_kl", res.mixture.model.best_val_kl}};
  if (res.has_integrated)
    j["fit"]["integrated"] = {{"max_id_kl", res.integrated.max_id_kl},
                              {"best_epoch", res.integrated.model.best_epoch},
                              {"best_val_kl", res.integrated.model.best_val_kl}};
  j["notes"] = res.notes;
  return j;
}

inline json conjoint_report_json(const ConjointRunResult& res, const RunConfig* run_cfg) {
  json j;
  j["tool_version"] = kVersionString;
  j["kind"] = "conjoint";
  if (run_cfg != nullptr) {
    j["config"] = {{"hash", config_hash_hex(*run_cfg)},
                   {"canonical", canonical_config_json(*run_cfg)}};
  }
  j["mape"] = {{"primary", res.mape_primary},
               {"aux", res.mape_aux},
               {"naive", res.mape_naive},
               {"corrected", res.mape_corrected}};
  j["bias_reduction"] = {{"aux", res.br_aux},
                         {"naive", res.br_naive},
                         {"corrected", res.br_corrected}};
  j["estimators"] = {{"star", res.suite.star.beta},
                     {"primary", res.suite.primary.beta},
                     {"aux", res.suite.aux.beta},
                     {"naive", res.suite.naive.beta},
                     {"corrected", res.suite.corrected.beta}};
  j["correction"] = {{"iterations", res.correction.iterations},
                     {"converged", res.correction.converged},
                     {"final_loss", res.correction.final_loss}};
  return j;
}

// Writes the regional report bundle into `dir` (which must exist).
inline void write_regional_report(const std::string& dir, const RegionalRunResult& res,
                                  const BootstrapSummary* boot, const RunConfig* run_cfg) {
  write_json_file(dir + "/report.json", regional_report_json(res, boot, run_cfg));
  write_text_file(dir + "/comparison.csv", comparison_table_csv(res));
  write_text_file(dir + "/share_error_by_stratum.csv", share_error_by_stratum_csv(res));
  write_text_file(dir + "/effects.svg", effect_chart_svg(named_effects(res), res.truth.beta3));
  if (res.has_mixture) {
    write_text_file(dir + "/kl_mixture.csv", region_kl_csv(res.mixture));
    write_text_file(dir + "/training_curve_mixture.svg",
                    training_curve_svg(res.mixture.model.curve));
  }
  if (res.has_integrated) {
    write_text_file(dir + "/kl_integrated.csv", region_kl_csv(res.integrated));
    write_text_file(dir + "/training_curve_integrated.svg",
                    training_curve_svg(res.integrated.model.curve));
  }
}

inline void write_conjoint_report(const std::string& dir, const ConjointRunResult& res,
                                  const RunConfig* run_cfg) {
  write_json_file(dir + "/report.json", conjoint_report_json(res, run_cfg));
  std::ostringstream csv;
  csv << "estimator,mape,bias_reduction\n";
  csv << "primary," << detail::format_double(res.mape_primary) << ",0\n";
  csv << "aux," << detail::format_double(res.mape_aux) << ','
      << detail::format_double(res.br_aux) << '\n';
  csv << "naive," << detail::format_double(res.mape_naive) << ','
      << detail::format_double(res.br_naive) << '\n';
  csv << "corrected," << detail::format_double(res.mape_corrected) << ','
      << detail::format_double(res.br_corrected) << '\n';
  write_text_file(dir + "/mape.csv", csv.str());
}

}  // namespace aem
