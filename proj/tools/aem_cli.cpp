// Command-line front end for the agentic-economic-modeling toolkit.
//
// Subcommands:
//   gen       generate datasets (population, menus, agent choices, share targets)
//   correct   train a bias-correction model and persist it with its predictions
//   infer     compute treatment-effect estimates from persisted share tables
//   run       full pipeline: gen + correct + infer + report in one run directory
//   bootstrap pipeline-wide bootstrap of the corrected effect
//   report    render tables/charts from a run directory's artifacts
//   validate  schema/invariant checks on dataset and config files
//
// Exit codes: 0 success, 1 validation findings, 2 runtime error, 64 usage.
// Every run directory is named by the config hash and contains the config
// echo, seed, and tool version; no timestamps, so identical configurations
// produce byte-identical directories.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "aem/config.hpp"
#include "aem/external_provider.hpp"
#include "aem/io.hpp"
#include "aem/log.hpp"
#include "aem/pipeline.hpp"
#include "aem/report.hpp"
#include "aem/version.hpp"

namespace {

using namespace aem;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Flags -> effective configuration
// ---------------------------------------------------------------------------

struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> scenario;
  std::optional<std::string> corrector;
  std::optional<std::string> provider;
  std::optional<std::string> bootstrap_mode;
  std::optional<int> bootstrap_reps;
  std::optional<std::string> dir;  // explicit run directory (infer/report/correct)
};

void add_common_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config_path, "TOML run configuration");
  cmd->add_option("--seed", f.seed, "master seed (overrides config)");
  cmd->add_option("--out", f.out, "output root; run directory is <out>/<config-hash>");
  cmd->add_option("--scenario", f.scenario,
                  "scenario preset (regional-main, regional-small, coverage, degenerate, "
                  "day-one, conjoint-main)");
  cmd->add_option("--corrector", f.corrector, "mixture | integrated | logistic");
  cmd->add_option("--bootstrap-reps", f.bootstrap_reps, "bootstrap replicas (B)");
  cmd->add_option("--bootstrap-mode", f.bootstrap_mode, "reuse | regenerate");
  cmd->add_option("--provider", f.provider, "oracle | distorted | external:<endpoint>");
  cmd->add_option("--dir", f.dir, "run directory (defaults to <out>/<config-hash>)");
}

RunConfig effective_config(const Flags& f) {
  RunConfig rc;
  if (!f.config_path.empty()) rc = load_run_config(f.config_path);
  if (f.scenario) {
    rc.scenario = *f.scenario;
    rc.kind = (rc.scenario == "conjoint-main") ? "conjoint" : "regional";
  }
  if (f.seed) rc.seed = *f.seed;
  if (f.out) rc.out_dir = *f.out;
  if (f.corrector) rc.corrector = *f.corrector;
  if (f.provider) rc.provider = *f.provider;
  if (f.bootstrap_reps) rc.bootstrap_reps = *f.bootstrap_reps;
  if (f.bootstrap_mode) rc.bootstrap_mode = *f.bootstrap_mode;
  // Keep the corrector consistent with the run kind when only the scenario
  // flag switched the kind; an explicit --corrector is validated as given.
  if (!f.corrector) {
    if (rc.kind == "conjoint" && rc.corrector != "logistic") rc.corrector = "logistic";
    if (rc.kind == "regional" && rc.corrector == "logistic") rc.corrector = "mixture";
  }
  validate_run_config(rc);
  return rc;
}

RegionalScenarioConfig make_regional_cfg(const RunConfig& rc) {
  RegionalScenarioConfig sc = regional_scenario_preset(rc.scenario);
  sc.train_mixture = rc.corrector == "mixture";
  sc.train_integrated = rc.corrector == "integrated";
  apply_regional_overrides(sc, rc.overrides);
  return sc;
}

ConjointScenarioConfig make_conjoint_cfg(const RunConfig& rc) {
  if (rc.scenario != "conjoint-main")
    throw config_error("unknown conjoint scenario: " + rc.scenario);
  ConjointScenarioConfig sc = presets::conjoint_main();
  apply_conjoint_overrides(sc, rc.overrides);
  return sc;
}

std::unique_ptr<ChoiceProvider> make_provider(const RunConfig& rc) {
  if (rc.provider == "oracle") return std::make_unique<GroundTruthProvider>();
  if (rc.provider.rfind("external:", 0) == 0)
    return std::make_unique<ExternalProvider>(rc.provider.substr(9));
  return nullptr;  // "distorted": pipeline builds it from the scenario's distortion spec
}

std::string run_dir_for(const RunConfig& rc, const Flags& f) {
  if (f.dir) return *f.dir;
  return rc.out_dir + "/" + config_hash_hex(rc);
}

void write_manifest(const std::string& dir, const RunConfig& rc) {
  json j;
  j["format_version"] = kArtifactFormatVersion;
  j["tool_version"] = kVersionString;
  j["config_hash"] = config_hash_hex(rc);
  j["canonical_config"] = canonical_config_json(rc);
  j["seed"] = rc.seed;
  j["kind"] = rc.kind;
  j["scenario"] = rc.scenario;
  write_json_file(dir + "/manifest.json", j);
}

// ---------------------------------------------------------------------------
// Shared regional helpers
// ---------------------------------------------------------------------------

std::vector<int> eval_regions_of(const RegionalStatics& st) {
  return st.split.ood_regions.empty() ? st.split.id_regions : st.split.ood_regions;
}

std::vector<ShareVector> agent_share_table(const RegionalStatics& st, const AgentData& agent,
                                           std::size_t k) {
  std::vector<ShareVector> out;
  out.reserve(st.pop.regions.size() * 2);
  for (std::size_t z = 0; z < st.pop.regions.size(); ++z)
    for (Period period : {Period::pre, Period::post}) {
      ShareVector sv;
      sv.region_id = st.pop.regions[z].region_id;
      sv.arm = st.pop.regions[z].arm();
      sv.period = period;
      sv.shares = empirical_cell_share(agent, agent.cell(static_cast<int>(z), period), k);
      out.push_back(std::move(sv));
    }
  return out;
}

json split_to_json(const RegionalStatics& st) {
  auto names = [&](const std::vector<int>& zs) {
    std::vector<std::string> out;
    out.reserve(zs.size());
    for (int z : zs) out.push_back(st.pop.regions[static_cast<std::size_t>(z)].region_id);
    return out;
  };
  json j;
  j["id_regions"] = names(st.split.id_regions);
  j["eval_regions"] = names(eval_regions_of(st));
  return j;
}

struct RegionalInputs {
  RegionalScenarioConfig sc;
  RegionalStatics st;
  AgentData agent;
  std::vector<ShareVector> targets;
};

// Deterministic regeneration of everything `gen` would write. The staged
// commands rebuild state from config + seed instead of parsing the heavier
// CSVs back; the substreams guarantee bit-identical results either way.
RegionalInputs rebuild_regional_inputs(const RunConfig& rc) {
  RegionalInputs in;
  in.sc = make_regional_cfg(rc);
  in.st = make_regional_statics(in.sc, rc.seed);
  auto provider = make_provider(rc);
  in.agent = simulate_agent_choices(in.st, in.sc, rc.seed, provider.get());
  in.targets = make_target_shares(in.st, in.sc, rc.seed);
  return in;
}

void write_generated_artifacts(const std::string& dir, const RegionalInputs& in) {
  write_personas_csv(dir + "/personas.csv", in.st.pop);
  write_regions_csv(dir + "/regions.csv", in.st.pop);
  write_orders_csv(dir + "/orders.csv", in.st.pool);
  write_triplets_csv(dir + "/triplets.csv", in.st, in.agent, in.sc.categories);
  write_shares_csv(dir + "/exact_shares.csv", in.st.exact_shares, in.sc.categories);
  write_shares_csv(dir + "/agent_shares.csv",
                   agent_share_table(in.st, in.agent, in.sc.categories.k()), in.sc.categories);
  write_shares_csv(dir + "/target_shares.csv", in.targets, in.sc.categories);
  write_json_file(dir + "/split.json", split_to_json(in.st));
}

void write_correction_artifacts(const std::string& dir, const CorrectionOutcome& out,
                                const CategorySet& cats) {
  const std::string name = to_string(out.model.kind);
  save_corrector(dir + "/model_" + name + ".json", out.model);
  write_shares_csv(dir + "/predicted_shares_" + name + ".csv", out.predicted, cats);
  write_text_file(dir + "/kl_id_" + name + ".csv", region_kl_csv(out));
  write_text_file(dir + "/training_curve_" + name + ".svg",
                  training_curve_svg(out.model.curve));
}

void write_effects_json(const std::string& dir,
                        const std::vector<std::pair<std::string, EffectEstimate>>& effects) {
  json j;
  j["format_version"] = kArtifactFormatVersion;
  for (const auto& [name, e] : effects) j["estimates"][name] = effect_to_json(e);
  write_json_file(dir + "/effects.json", j);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen(const RunConfig& rc, const Flags& f) {
  const std::string dir = run_dir_for(rc, f);
  ensure_dir(dir);
  write_manifest(dir, rc);
  if (rc.kind == "conjoint") {
    const ConjointScenarioConfig sc = make_conjoint_cfg(rc);
    const ConjointDataset ds = make_conjoint_dataset(sc.data, rc.seed);
    write_conjoint_csv(dir + "/conjoint.csv", ds);
    write_conjoint_hidden_csv(dir + "/conjoint_hidden.csv", ds);
    log_info("wrote conjoint dataset (" + std::to_string(ds.primary.size()) + " primary + " +
             std::to_string(ds.aux.size()) + " aux rows) to " + dir);
    return 0;
  }
  const RegionalInputs in = rebuild_regional_inputs(rc);
  write_generated_artifacts(dir, in);
  log_info("wrote regional datasets (" + std::to_string(in.agent.table.size()) +
           " triplets) to " + dir);
  return 0;
}

int cmd_correct(const RunConfig& rc, const Flags& f) {
  const std::string dir = run_dir_for(rc, f);
  ensure_dir(dir);
  write_manifest(dir, rc);
  if (rc.kind == "conjoint") {
    const ConjointScenarioConfig sc = make_conjoint_cfg(rc);
    const ConjointRunResult res = run_conjoint_scenario(sc, rc.seed);
    save_correction(dir + "/model_logistic.json", res.correction);
    write_conjoint_report(dir, res, &rc);
    log_info("logistic correction trained (" + std::to_string(res.correction.iterations) +
             " iterations) in " + dir);
    return 0;
  }
  const RegionalInputs in = rebuild_regional_inputs(rc);
  const detail::CellSet cells =
      detail::build_cell_set(in.st, in.sc, in.agent, in.st.split.id_regions, in.targets, nullptr);
  const std::vector<int> eval = eval_regions_of(in.st);
  bool trained = false;
  if (in.sc.train_mixture) {
    const CorrectionOutcome out =
        detail::train_and_evaluate(in.st, in.sc, in.agent, cells, CorrectorKind::mixture,
                                   substream_seed(rc.seed, "train.mixture"), eval);
    write_correction_artifacts(dir, out, in.sc.categories);
    log_info("mixture corrector: best epoch " + std::to_string(out.model.best_epoch) +
             ", max ID KL " + detail::format_double(out.max_id_kl));
    trained = true;
  }
  if (in.sc.train_integrated) {
    const CorrectionOutcome out =
        detail::train_and_evaluate(in.st, in.sc, in.agent, cells, CorrectorKind::integrated,
                                   substream_seed(rc.seed, "train.integrated"), eval);
    write_correction_artifacts(dir, out, in.sc.categories);
    log_info("integrated corrector: best epoch " + std::to_string(out.model.best_epoch) +
             ", max ID KL " + detail::format_double(out.max_id_kl));
    trained = true;
  }
  if (!trained) throw config_error("correct: scenario trains no corrector");
  return 0;
}

int cmd_infer(const RunConfig& rc, const Flags& f) {
  const std::string dir = run_dir_for(rc, f);
  if (rc.kind == "conjoint") {
    // Consume the persisted dataset and model; only the estimators run here.
    const ConjointScenarioConfig sc = make_conjoint_cfg(rc);
    ConjointDataset ds = read_conjoint_csv(dir + "/conjoint.csv");
    ds.aux_hidden_y = read_conjoint_hidden_csv(dir + "/conjoint_hidden.csv");
    const CorrectionModel model = load_correction(dir + "/model_logistic.json");

    struct Gathered {
      std::vector<ChoiceTask> tasks;
      std::vector<int> z;
      std::vector<ChoiceLabel> y_lab, z_lab;
    };
    auto gather = [&ds](const std::vector<ConjointDataset::Row>& rows) {
      Gathered g;
      for (const auto& r : rows) {
        g.tasks.push_back(ds.tasks[static_cast<std::size_t>(r.task)]);
        g.z.push_back(r.z);
        if (r.y >= 0) g.y_lab.push_back(ChoiceLabel::hard(r.y));
        g.z_lab.push_back(ChoiceLabel::hard(r.z));
      }
      return g;
    };
    const Gathered primary = gather(ds.primary);
    const Gathered aux = gather(ds.aux);
    std::vector<ChoiceLabel> aux_hidden;
    for (std::int16_t y : ds.aux_hidden_y) aux_hidden.push_back(ChoiceLabel::hard(y));
    const std::vector<ChoiceLabel> aux_soft = predict_soft_choices(model, aux.tasks, aux.z);

    ConjointRunResult res;
    res.correction = model;
    res.suite = estimate_partworth_suite(primary.tasks, primary.y_lab, primary.z_lab, aux.tasks,
                                         aux.z_lab, aux_soft, aux_hidden, sc.mnl);
    const Vec& star = res.suite.star.beta;
    res.mape_primary = mape(res.suite.primary.beta, star);
    res.mape_aux = mape(res.suite.aux.beta, star);
    res.mape_naive = mape(res.suite.naive.beta, star);
    res.mape_corrected = mape(res.suite.corrected.beta, star);
    res.br_aux = bias_reduction(res.mape_aux, res.mape_primary);
    res.br_naive = bias_reduction(res.mape_naive, res.mape_primary);
    res.br_corrected = bias_reduction(res.mape_corrected, res.mape_primary);
    write_conjoint_report(dir, res, &rc);
    log_info("part-worth suite estimated from " + dir);
    return 0;
  }

  // Regional: every estimate comes from the persisted share tables.
  const RegionalScenarioConfig sc = make_regional_cfg(rc);
  const std::vector<ShareVector> exact = read_shares_csv(dir + "/exact_shares.csv");
  const std::vector<ShareVector> agent = read_shares_csv(dir + "/agent_shares.csv");
  const std::vector<ShareVector> targets = read_shares_csv(dir + "/target_shares.csv");
  const json split = read_json_file(dir + "/split.json");
  std::vector<std::string> eval_names;
  for (const json& name : split.at("eval_regions")) eval_names.push_back(name.get<std::string>());

  auto on_eval = [&](const std::vector<ShareVector>& shares, const std::string& method) {
    std::vector<ShareVector> sub;
    for (const ShareVector& sv : shares)
      if (std::find(eval_names.begin(), eval_names.end(), sv.region_id) != eval_names.end())
        sub.push_back(sv);
    return did_estimate(make_share_panel(sub, sc.outcome_category), SeKind::cluster_by_region,
                        true, method);
  };
  std::vector<std::pair<std::string, EffectEstimate>> effects;
  effects.emplace_back("id_human",
                       did_estimate(make_share_panel(targets, sc.outcome_category),
                                    SeKind::cluster_by_region, true, "human_id"));
  effects.emplace_back("ood_human", on_eval(exact, "truth"));
  effects.emplace_back("national", on_eval(agent, "national"));
  for (const char* name : {"mixture", "integrated"}) {
    const std::string path = dir + "/predicted_shares_" + name + ".csv";
    if (fs::exists(path)) effects.emplace_back(name, on_eval(read_shares_csv(path), name));
  }
  write_effects_json(dir, effects);

  auto find = [&](const char* name) -> const EffectEstimate* {
    for (const auto& [n, e] : effects)
      if (n == name) return &e;
    return nullptr;
  };
  const std::string table = comparison_table_csv({{"id_human", find("id_human")},
                                                  {"ood_human", find("ood_human")},
                                                  {"integrated", find("integrated")},
                                                  {"mixture", find("mixture")},
                                                  {"national", find("national")}});
  write_text_file(dir + "/comparison.csv", table);
  std::cout << table;
  return 0;
}

int cmd_run(const RunConfig& rc, const Flags& f) {
  const std::string dir = run_dir_for(rc, f);
  ensure_dir(dir);
  write_manifest(dir, rc);
  if (rc.kind == "conjoint") {
    const ConjointScenarioConfig sc = make_conjoint_cfg(rc);
    const ConjointDataset ds = make_conjoint_dataset(sc.data, rc.seed);
    write_conjoint_csv(dir + "/conjoint.csv", ds);
    write_conjoint_hidden_csv(dir + "/conjoint_hidden.csv", ds);
    const ConjointRunResult res = run_conjoint_scenario(sc, rc.seed);
    save_correction(dir + "/model_logistic.json", res.correction);
    write_conjoint_report(dir, res, &rc);
    log_info("conjoint run complete: " + dir);
    return 0;
  }
  const RegionalScenarioConfig sc = make_regional_cfg(rc);
  auto provider = make_provider(rc);
  const RegionalRunResult res = run_regional_scenario(sc, rc.seed, provider.get());

  RegionalInputs in{sc, res.statics, res.agent, res.targets};
  write_generated_artifacts(dir, in);
  if (res.has_mixture) write_correction_artifacts(dir, res.mixture, sc.categories);
  if (res.has_integrated) write_correction_artifacts(dir, res.integrated, sc.categories);
  write_effects_json(dir, named_effects(res));
  write_regional_report(dir, res, nullptr, &rc);
  log_info("regional run complete: " + dir);
  std::cout << comparison_table_csv(res);
  return 0;
}

int cmd_bootstrap(const RunConfig& rc, const Flags& f) {
  if (rc.kind != "regional")
    throw config_error("bootstrap: only regional runs have a pipeline bootstrap");
  const std::string dir = run_dir_for(rc, f);
  ensure_dir(dir);
  write_manifest(dir, rc);
  const RegionalScenarioConfig sc = make_regional_cfg(rc);
  BootstrapPlan plan;
  plan.reps = rc.bootstrap_reps;
  plan.regenerate = rc.bootstrap_mode == "regenerate";
  auto provider = make_provider(rc);
  const RegionalBootstrapResult res = run_regional_bootstrap(sc, plan, rc.seed, provider.get());
  json j = bootstrap_to_json(res.summary);
  j["format_version"] = kArtifactFormatVersion;
  if (sc.day_one_post) {
    const double human_width = res.base.human_id.ci_high - res.base.human_id.ci_low;
    j["day_one"] = {{"human", effect_to_json(res.base.human_id)},
                    {"width_ratio", human_width > 0.0 ? res.summary.width() / human_width : 0.0}};
  }
  write_json_file(dir + "/bootstrap.json", j);
  write_effects_json(dir, named_effects(res.base));
  std::printf("bootstrap: point %.2f bps, CI [%.2f, %.2f] bps over %d replicas (%d failed)\n",
              res.summary.point.beta3, res.summary.ci_low, res.summary.ci_high,
              res.summary.requested, res.summary.failures);
  return 0;
}

int cmd_report(const RunConfig& rc, const Flags& f) {
  const std::string dir = run_dir_for(rc, f);
  if (rc.kind == "conjoint") {
    const json report = read_json_file(dir + "/report.json");
    std::cout << report.dump(2) << '\n';
    return 0;
  }
  const json effects = read_json_file(dir + "/effects.json");
  std::map<std::string, EffectEstimate> est;
  for (const auto& [name, j] : effects.at("estimates").items())
    est[name] = effect_from_json(j);
  auto find = [&](const char* name) -> const EffectEstimate* {
    auto it = est.find(name);
    return it == est.end() ? nullptr : &it->second;
  };
  const EffectEstimate* truth = find("ood_human");

  json report;
  report["tool_version"] = kVersionString;
  report["kind"] = "regional";
  if (fs::exists(dir + "/manifest.json")) {
    const json manifest = read_json_file(dir + "/manifest.json");
    report["config_hash"] = manifest.value("config_hash", "");
    report["seed"] = manifest.value("seed", std::uint64_t{0});
  }
  report["estimates"] = effects.at("estimates");
  if (fs::exists(dir + "/bootstrap.json"))
    report["bootstrap"] = read_json_file(dir + "/bootstrap.json");
  write_json_file(dir + "/report.json", report);

  const std::string table = comparison_table_csv({{"id_human", find("id_human")},
                                                  {"ood_human", truth},
                                                  {"integrated", find("integrated")},
                                                  {"mixture", find("mixture")},
                                                  {"national", find("national")}});
  write_text_file(dir + "/comparison.csv", table);
  std::vector<std::pair<std::string, EffectEstimate>> rows;
  for (const char* name : {"id_human", "ood_human", "integrated", "mixture", "national"})
    if (const EffectEstimate* e = find(name)) rows.emplace_back(name, *e);
  if (truth != nullptr)
    write_text_file(dir + "/effects.svg", effect_chart_svg(rows, truth->beta3));
  for (const char* name : {"mixture", "integrated"}) {
    const std::string model_path = dir + "/model_" + std::string(name) + ".json";
    if (fs::exists(model_path))
      write_text_file(dir + "/training_curve_" + name + ".svg",
                      training_curve_svg(load_corrector(model_path).curve));
  }
  std::cout << table;
  return 0;
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

std::string first_line(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

void validate_file(const std::string& path, std::vector<std::string>& findings) {
  auto finding = [&](const std::string& msg) { findings.push_back(msg); };
  try {
    if (path.size() > 5 && path.substr(path.size() - 5) == ".toml") {
      validate_run_config(load_run_config(path));
      return;
    }
    if (path.size() > 5 && path.substr(path.size() - 5) == ".json") {
      const json j = read_json_file(path);
      if (j.contains("model")) {
        const std::string model = j.at("model").get<std::string>();
        if (model == "logistic")
          load_correction(path);
        else
          load_corrector(path);
      }
      return;
    }
    const std::string header = first_line(path);
    if (header.rfind("region_id,arm,period", 0) == 0) {
      const std::vector<ShareVector> shares = read_shares_csv(path);
      for (std::size_t i = 0; i < shares.size(); ++i) {
        double total = 0.0;
        bool bad_entry = false;
        for (double x : shares[i].shares)
          if (x < 0.0 || !std::isfinite(x)) bad_entry = true;
          else total += x;
        if (bad_entry)
          finding(path + ":" + std::to_string(i + 2) + ": negative or non-finite share for region " +
                  shares[i].region_id);
        else if (std::fabs(total - 1.0) > 1e-6)
          finding(path + ":" + std::to_string(i + 2) + ": shares for region " +
                  shares[i].region_id + " sum to " + detail::format_double(total));
      }
      return;
    }
    if (header.rfind("region_id,order_id,persona_id", 0) == 0) {
      const std::vector<TripletRecord> rows = read_triplets_csv(path, CategorySet::standard());
      for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].choice_index() < 0)
          finding(path + ":" + std::to_string(i + 2) + ": choice vector is not one-hot");
      return;
    }
    if (header.rfind("task_id,customer,role", 0) == 0) {
      read_conjoint_csv(path);
      return;
    }
    if (header.rfind("aux_row,y", 0) == 0) {
      read_conjoint_hidden_csv(path);
      return;
    }
    finding(path + ":1: unrecognized header '" + header + "'");
  } catch (const error& e) {
    finding(e.what());
  }
}

int cmd_validate(const std::vector<std::string>& files) {
  if (files.empty()) throw config_error("validate: no files given");
  std::vector<std::string> findings;
  for (const std::string& path : files) validate_file(path, findings);
  for (const std::string& msg : findings) std::cout << msg << '\n';
  if (findings.empty()) {
    std::cout << "ok: " << files.size() << " file(s) valid\n";
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"agentic economic modeling pipeline"};
  app.set_version_flag("--version", kVersionString);
  app.require_subcommand(1);

  Flags flags;
  std::vector<std::string> validate_files;
  int rc_exit = 0;

  auto* gen = app.add_subcommand("gen", "generate datasets into the run directory");
  auto* correct = app.add_subcommand("correct", "train and persist a correction model");
  auto* infer = app.add_subcommand("infer", "estimate effects from persisted artifacts");
  auto* run = app.add_subcommand("run", "full pipeline into one run directory");
  auto* bootstrap = app.add_subcommand("bootstrap", "pipeline-wide bootstrap of the effect");
  auto* report = app.add_subcommand("report", "render tables and charts from a run directory");
  auto* validate = app.add_subcommand("validate", "check dataset/config files");
  for (CLI::App* cmd : {gen, correct, infer, run, bootstrap, report}) add_common_flags(cmd, flags);
  validate->add_option("files", validate_files, "files to check");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) rc_exit = cmd_gen(effective_config(flags), flags);
    else if (correct->parsed()) rc_exit = cmd_correct(effective_config(flags), flags);
    else if (infer->parsed()) rc_exit = cmd_infer(effective_config(flags), flags);
    else if (run->parsed()) rc_exit = cmd_run(effective_config(flags), flags);
    else if (bootstrap->parsed()) rc_exit = cmd_bootstrap(effective_config(flags), flags);
    else if (report->parsed()) rc_exit = cmd_report(effective_config(flags), flags);
    else if (validate->parsed()) rc_exit = cmd_validate(validate_files);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the usage message
    return 64;
  } catch (const error& e) {
    log_error(e.what());
    return 2;
  } catch (const std::exception& e) {
    log_error(std::string("unexpected: ") + e.what());
    return 2;
  }
  return rc_exit;
}
