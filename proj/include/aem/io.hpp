#pragma once

// File formats for staged runs: CSV tables for datasets and share vectors,
// versioned JSON for trained models and effect estimates. Readers report the
// offending file and line on malformed input; model loaders reject format
// version mismatches instead of guessing.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aem/config.hpp"
#include "aem/pipeline.hpp"
#include "aem/version.hpp"

namespace aem {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Basic file helpers
// ---------------------------------------------------------------------------

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write file: " + path);
  out << content;
  if (!out) throw io_error("write failed: " + path);
}

inline void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw io_error("cannot create directory " + path + ": " + ec.message());
}

inline json read_json_file(const std::string& path) {
  const std::string text = read_text_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw io_error("malformed JSON in " + path);
  return j;
}

inline void write_json_file(const std::string& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// CSV primitives
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline double parse_csv_double(const std::string& field, const std::string& path, int line_no) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || p != field.data() + field.size())
    throw io_error(path + ":" + std::to_string(line_no) + ": bad number '" + field + "'");
  return v;
}

inline long parse_csv_int(const std::string& field, const std::string& path, int line_no) {
  long v = 0;
  const auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || p != field.data() + field.size())
    throw io_error(path + ":" + std::to_string(line_no) + ": bad integer '" + field + "'");
  return v;
}

struct CsvFile {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> line_numbers;
};

inline CsvFile read_csv(const std::string& path, std::size_t expect_cols = 0) {
  CsvFile file;
  file.path = path;
  std::ifstream in(path);
  if (!in) throw io_error("cannot open file: " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields = split_csv_line(line);
    if (line_no == 1) {
      file.header = std::move(fields);
      if (expect_cols != 0 && file.header.size() != expect_cols)
        throw io_error(path + ":1: expected " + std::to_string(expect_cols) + " columns, found " +
                       std::to_string(file.header.size()));
      continue;
    }
    if (fields.size() != file.header.size())
      throw io_error(path + ":" + std::to_string(line_no) + ": expected " +
                     std::to_string(file.header.size()) + " fields, found " +
                     std::to_string(fields.size()));
    file.rows.push_back(std::move(fields));
    file.line_numbers.push_back(line_no);
  }
  if (file.header.empty()) throw io_error(path + ": missing header row");
  return file;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Triplet tables
// ---------------------------------------------------------------------------

inline void write_triplets_csv(const std::string& path, const RegionalStatics& st,
                               const AgentData& agent, const CategorySet& cats) {
  std::ostringstream out;
  out << "region_id,order_id,persona_id,option,category,period,arm\n";
  for (std::size_t r = 0; r < agent.table.size(); ++r) {
    const auto z = static_cast<std::size_t>(agent.table.region[r]);
    const RegionalMenu& menu = st.menus[z][static_cast<std::size_t>(agent.table.menu[r])];
    out << st.pop.regions[z].region_id << ','
        << st.pool.orders[static_cast<std::size_t>(menu.order_index)].id_string() << ','
        << st.pop.personas[static_cast<std::size_t>(agent.table.persona[r])].persona_id << ','
        << static_cast<int>(agent.table.option[r]) << ','
        << cats.names[static_cast<std::size_t>(agent.table.category[r])] << ','
        << to_string(static_cast<Period>(agent.table.period[r])) << ','
        << to_string(static_cast<Arm>(agent.table.arm[r])) << '\n';
  }
  write_text_file(path, out.str());
}

inline std::vector<TripletRecord> read_triplets_csv(const std::string& path,
                                                    const CategorySet& cats) {
  const detail::CsvFile file = detail::read_csv(path, 7);
  const std::vector<std::string> expected = {"region_id", "order_id", "persona_id", "option",
                                             "category",  "period",   "arm"};
  if (file.header != expected) throw io_error(path + ":1: unexpected header");
  std::vector<TripletRecord> out;
  out.reserve(file.rows.size());
  for (std::size_t i = 0; i < file.rows.size(); ++i) {
    const auto& f = file.rows[i];
    const int line_no = file.line_numbers[i];
    TripletRecord rec;
    rec.region_id = f[0];
    rec.order_id = f[1];
    rec.persona_id = f[2];
    int cat = 0;
    try {
      cat = cats.index_of(f[4]);
      rec.period = period_from_string(f[5]);
      rec.arm = arm_from_string(f[6]);
    } catch (const error& e) {
      throw io_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (cat < 0)
      throw io_error(path + ":" + std::to_string(line_no) + ": unknown category '" + f[4] + "'");
    (void)detail::parse_csv_int(f[3], path, line_no);  // option index: format check only
    rec.choice = TripletRecord::one_hot(cats.k(), cat);
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Share tables
// ---------------------------------------------------------------------------

inline void write_shares_csv(const std::string& path, std::span<const ShareVector> shares,
                             const CategorySet& cats) {
  std::ostringstream out;
  out << "region_id,arm,period";
  for (const std::string& name : cats.names) out << ',' << name;
  out << '\n';
  for (const ShareVector& sv : shares) {
    if (sv.shares.size() != cats.k())
      throw dimension_error("write_shares_csv: share length mismatch for region " + sv.region_id);
    out << sv.region_id << ',' << to_string(sv.arm) << ',' << to_string(sv.period);
    for (double s : sv.shares) out << ',' << detail::format_double(s);
    out << '\n';
  }
  write_text_file(path, out.str());
}

inline std::vector<ShareVector> read_shares_csv(const std::string& path) {
  const detail::CsvFile file = detail::read_csv(path);
  if (file.header.size() < 4 || file.header[0] != "region_id" || file.header[1] != "arm" ||
      file.header[2] != "period")
    throw io_error(path + ":1: unexpected header");
  const std::size_t k = file.header.size() - 3;
  std::vector<ShareVector> out;
  out.reserve(file.rows.size());
  for (std::size_t i = 0; i < file.rows.size(); ++i) {
    const auto& f = file.rows[i];
    const int line_no = file.line_numbers[i];
    ShareVector sv;
    sv.region_id = f[0];
    try {
      sv.arm = arm_from_string(f[1]);
      sv.period = period_from_string(f[2]);
    } catch (const error& e) {
      throw io_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    sv.shares.resize(k);
    for (std::size_t j = 0; j < k; ++j)
      sv.shares[j] = detail::parse_csv_double(f[3 + j], path, line_no);
    out.push_back(std::move(sv));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conjoint datasets
// ---------------------------------------------------------------------------

// One row per (customer, task). Option attributes are flattened row-major as
// x<option>_<attribute>; y is -1 where the human label is hidden.
inline void write_conjoint_csv(const std::string& path, const ConjointDataset& ds) {
  std::ostringstream out;
  out << "task_id,customer,role,y,z";
  for (int opt = 0; opt < ds.k_inside; ++opt)
    for (std::size_t a = 0; a < ds.q; ++a) out << ",x" << opt << '_' << a;
  out << '\n';
  auto emit = [&](const ConjointDataset::Row& r, const char* role) {
    const ChoiceTask& task = ds.tasks[static_cast<std::size_t>(r.task)];
    out << task.task_id << ',' << r.customer << ',' << role << ',' << r.y << ',' << r.z;
    for (double x : task.options.a) out << ',' << detail::format_double(x);
    out << '\n';
  };
  for (const auto& r : ds.primary) emit(r, "primary");
  for (const auto& r : ds.aux) emit(r, "aux");
  write_text_file(path, out.str());
}

inline ConjointDataset read_conjoint_csv(const std::string& path) {
  const detail::CsvFile file = detail::read_csv(path);
  if (file.header.size() < 6 || file.header[0] != "task_id")
    throw io_error(path + ":1: unexpected header");
  // Infer (k, q) from the trailing x<opt>_<attr> columns.
  int k_inside = 0;
  std::size_t q = 0;
  for (std::size_t c = 5; c < file.header.size(); ++c) {
    const std::string& h = file.header[c];
    const std::size_t us = h.find('_');
    if (h.size() < 4 || h[0] != 'x' || us == std::string::npos)
      throw io_error(path + ":1: unexpected attribute column '" + h + "'");
    k_inside = std::max(k_inside, 1 + std::stoi(h.substr(1, us - 1)));
    q = std::max(q, static_cast<std::size_t>(1 + std::stoul(h.substr(us + 1))));
  }
  if (static_cast<std::size_t>(k_inside) * q + 5 != file.header.size())
    throw io_error(path + ":1: attribute columns do not form a full grid");

  ConjointDataset ds;
  ds.q = q;
  ds.k_inside = k_inside;
  for (std::size_t i = 0; i < file.rows.size(); ++i) {
    const auto& f = file.rows[i];
    const int line_no = file.line_numbers[i];
    ChoiceTask task;
    task.task_id = f[0];
    task.has_outside = true;
    task.options = Mat(static_cast<std::size_t>(k_inside), q);
    for (std::size_t j = 0; j < task.options.a.size(); ++j)
      task.options.a[j] = detail::parse_csv_double(f[5 + j], path, line_no);
    ConjointDataset::Row row;
    row.task = static_cast<std::int32_t>(ds.tasks.size());
    row.customer = static_cast<std::int32_t>(detail::parse_csv_int(f[1], path, line_no));
    row.y = static_cast<std::int16_t>(detail::parse_csv_int(f[3], path, line_no));
    row.z = static_cast<std::int16_t>(detail::parse_csv_int(f[4], path, line_no));
    if (row.z < 0 || row.z > k_inside)
      throw io_error(path + ":" + std::to_string(line_no) + ": agent label out of range");
    ds.tasks.push_back(std::move(task));
    if (f[2] == "primary") {
      if (row.y < 0 || row.y > k_inside)
        throw io_error(path + ":" + std::to_string(line_no) + ": primary row lacks a human label");
      ds.primary.push_back(row);
    } else if (f[2] == "aux") {
      ds.aux.push_back(row);
    } else {
      throw io_error(path + ":" + std::to_string(line_no) + ": unknown role '" + f[2] + "'");
    }
  }
  return ds;
}

// Sequestered auxiliary human labels, kept apart from the modeling data.
inline void write_conjoint_hidden_csv(const std::string& path, const ConjointDataset& ds) {
  std::ostringstream out;
  out << "aux_row,y\n";
  for (std::size_t i = 0; i < ds.aux_hidden_y.size(); ++i)
    out << i << ',' << ds.aux_hidden_y[i] << '\n';
  write_text_file(path, out.str());
}

inline std::vector<std::int16_t> read_conjoint_hidden_csv(const std::string& path) {
  const detail::CsvFile file = detail::read_csv(path, 2);
  std::vector<std::int16_t> out(file.rows.size());
  for (std::size_t i = 0; i < file.rows.size(); ++i) {
    const int line_no = file.line_numbers[i];
    const auto row = static_cast<std::size_t>(
        detail::parse_csv_int(file.rows[i][0], path, line_no));
    if (row != i) throw io_error(path + ":" + std::to_string(line_no) + ": rows out of order");
    out[i] = static_cast<std::int16_t>(detail::parse_csv_int(file.rows[i][1], path, line_no));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Population summaries
// ---------------------------------------------------------------------------

inline void write_personas_csv(const std::string& path, const Population& pop) {
  std::ostringstream out;
  out << "persona_id,region_id,age_band,gender_code,income_band,education_band\n";
  for (const Persona& p : pop.personas) {
    out << p.persona_id << ',' << p.region_id;
    for (double o : p.observables) out << ',' << static_cast<int>(o);
    out << '\n';
  }
  write_text_file(path, out.str());
}

inline void write_regions_csv(const std::string& path, const Population& pop) {
  std::ostringstream out;
  out << "region_id,treatment,ssd_launched,stratum,n_personas,n_orders\n";
  for (const Region& r : pop.regions)
    out << r.region_id << ',' << (r.treatment ? 1 : 0) << ',' << (r.ssd_launched ? 1 : 0) << ','
        << stratum_name(r.stratum()) << ',' << r.persona_ids.size() << ',' << r.order_ids.size()
        << '\n';
  write_text_file(path, out.str());
}

inline void write_orders_csv(const std::string& path, const OrderPool& pool) {
  std::ostringstream out;
  out << "order_id,basket,fst_days";
  if (!pool.orders.empty())
    for (std::size_t e = 0; e < pool.orders[0].embedding.size(); ++e) out << ",emb" << e;
  out << '\n';
  for (const Order& o : pool.orders) {
    out << o.id_string() << ',' << detail::format_double(o.basket) << ',' << o.fst_days;
    for (double e : o.embedding) out << ',' << detail::format_double(e);
    out << '\n';
  }
  write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

inline json corrector_to_json(const TrainedCorrector& m) {
  json j;
  j["format_version"] = kArtifactFormatVersion;
  j["tool_version"] = kVersionString;
  j["model"] = to_string(m.kind);
  j["categories"] = m.k;
  if (m.kind == CorrectorKind::mixture) {
    j["input_dim"] = m.mixture.input_dim;
    j["hidden"] = {m.mixture.h1, m.mixture.h2};
    j["theta"] = m.mixture.theta;
  } else {
    j["input_dim"] = m.integrated.input_dim;
    j["hidden"] = {m.integrated.h1, m.integrated.h2};
    j["theta"] = m.integrated.theta;
  }
  j["standardizer"] = {{"mean", m.standardizer.mean}, {"scale", m.standardizer.scale}};
  j["features"] = {{"embedding_dim", m.feature_spec.embedding_dim},
                   {"demo_cards", m.feature_spec.demo_cards},
                   {"names", m.feature_spec.names()}};
  j["training"] = {{"lr", m.config.lr},
                   {"epochs", m.config.epochs},
                   {"patience", m.config.patience},
                   {"kl_eps", m.config.kl_eps},
                   {"seed", m.config.seed},
                   {"best_epoch", m.best_epoch},
                   {"best_val_kl", m.best_val_kl},
                   {"aborted_nan", m.aborted_nan}};
  json curve = json::array();
  for (const TrainingCurvePoint& p : m.curve) curve.push_back({p.train_kl, p.val_kl});
  j["curve"] = std::move(curve);
  return j;
}

inline void save_corrector(const std::string& path, const TrainedCorrector& m) {
  write_json_file(path, corrector_to_json(m));
}

inline TrainedCorrector load_corrector(const std::string& path) {
  const json j = read_json_file(path);
  if (!j.contains("format_version") || j["format_version"].get<int>() != kArtifactFormatVersion)
    throw io_error(path + ": unsupported model format version");
  TrainedCorrector m;
  const std::string kind = j.at("model").get<std::string>();
  if (kind == "mixture") m.kind = CorrectorKind::mixture;
  else if (kind == "integrated") m.kind = CorrectorKind::integrated;
  else throw io_error(path + ": unknown model kind '" + kind + "'");
  m.k = j.at("categories").get<std::size_t>();
  const int input_dim = j.at("input_dim").get<int>();
  const int h1 = j.at("hidden")[0].get<int>();
  const int h2 = j.at("hidden")[1].get<int>();
  if (m.kind == CorrectorKind::mixture) {
    m.mixture.input_dim = input_dim;
    m.mixture.h1 = h1;
    m.mixture.h2 = h2;
    m.mixture.theta = j.at("theta").get<Vec>();
    if (m.mixture.theta.size() != m.mixture.n_params())
      throw io_error(path + ": parameter count does not match dimensions");
  } else {
    m.integrated.input_dim = input_dim;
    m.integrated.h1 = h1;
    m.integrated.h2 = h2;
    m.integrated.k_out = static_cast<int>(m.k);
    m.integrated.theta = j.at("theta").get<Vec>();
    if (m.integrated.theta.size() != m.integrated.n_params())
      throw io_error(path + ": parameter count does not match dimensions");
  }
  m.standardizer.mean = j.at("standardizer").at("mean").get<Vec>();
  m.standardizer.scale = j.at("standardizer").at("scale").get<Vec>();
  m.feature_spec.embedding_dim = j.at("features").at("embedding_dim").get<int>();
  const auto cards = j.at("features").at("demo_cards").get<std::vector<std::size_t>>();
  if (cards.size() != 4) throw io_error(path + ": demo_cards must have 4 entries");
  std::copy(cards.begin(), cards.end(), m.feature_spec.demo_cards.begin());
  const json& t = j.at("training");
  m.config.kind = m.kind;
  m.config.lr = t.at("lr").get<double>();
  m.config.epochs = t.at("epochs").get<int>();
  m.config.patience = t.at("patience").get<int>();
  m.config.kl_eps = t.at("kl_eps").get<double>();
  m.config.seed = t.at("seed").get<std::uint64_t>();
  m.config.h1 = h1;
  m.config.h2 = h2;
  m.best_epoch = t.at("best_epoch").get<int>();
  m.best_val_kl = t.at("best_val_kl").get<double>();
  m.aborted_nan = t.at("aborted_nan").get<bool>();
  for (const json& p : j.at("curve"))
    m.curve.push_back({p[0].get<double>(), p[1].get<double>()});
  return m;
}

inline json correction_to_json(const CorrectionModel& m) {
  json rows = json::array();
  for (std::size_t c = 0; c < m.coefficients.rows; ++c) {
    json row = json::array();
    for (std::size_t d = 0; d < m.coefficients.cols; ++d) row.push_back(m.coefficients(c, d));
    rows.push_back(std::move(row));
  }
  return json{{"format_version", kArtifactFormatVersion},
              {"tool_version", kVersionString},
              {"model", "logistic"},
              {"q", m.q},
              {"k_inside", m.k_inside},
              {"lambda", m.lambda},
              {"include_interactions", m.include_interactions},
              {"coefficients", std::move(rows)},
              {"intercepts", m.intercepts},
              {"iterations", m.iterations},
              {"final_loss", m.final_loss},
              {"converged", m.converged},
              {"separation_flagged", m.separation_flagged}};
}

inline void save_correction(const std::string& path, const CorrectionModel& m) {
  write_json_file(path, correction_to_json(m));
}

inline CorrectionModel load_correction(const std::string& path) {
  const json j = read_json_file(path);
  if (!j.contains("format_version") || j["format_version"].get<int>() != kArtifactFormatVersion)
    throw io_error(path + ": unsupported model format version");
  if (j.at("model").get<std::string>() != "logistic")
    throw io_error(path + ": not a logistic correction model");
  CorrectionModel m;
  m.q = j.at("q").get<std::size_t>();
  m.k_inside = j.at("k_inside").get<int>();
  m.lambda = j.at("lambda").get<double>();
  m.include_interactions = j.at("include_interactions").get<bool>();
  const json& rows = j.at("coefficients");
  if (rows.empty()) throw io_error(path + ": empty coefficient matrix");
  m.coefficients = Mat(rows.size(), rows[0].size());
  for (std::size_t c = 0; c < rows.size(); ++c) {
    if (rows[c].size() != m.coefficients.cols)
      throw io_error(path + ": ragged coefficient matrix");
    for (std::size_t d = 0; d < m.coefficients.cols; ++d)
      m.coefficients(c, d) = rows[c][d].get<double>();
  }
  m.intercepts = j.at("intercepts").get<Vec>();
  m.iterations = j.at("iterations").get<int>();
  m.final_loss = j.at("final_loss").get<double>();
  m.converged = j.at("converged").get<bool>();
  m.separation_flagged = j.at("separation_flagged").get<bool>();
  if (m.intercepts.size() != m.coefficients.rows)
    throw io_error(path + ": intercept count does not match class count");
  return m;
}

// ---------------------------------------------------------------------------
// Effect estimates
// ---------------------------------------------------------------------------

inline json effect_to_json(const EffectEstimate& e) {
  return json{{"method", e.method},   {"beta3", e.beta3},   {"se", e.se},
              {"p_value", e.p_value}, {"ci_low", e.ci_low}, {"ci_high", e.ci_high},
              {"df", e.df},           {"coef", e.coef},     {"unit", "bps"}};
}

inline EffectEstimate effect_from_json(const json& j) {
  EffectEstimate e;
  e.method = j.at("method").get<std::string>();
  e.beta3 = j.at("beta3").get<double>();
  e.se = j.at("se").get<double>();
  e.p_value = j.at("p_value").get<double>();
  e.ci_low = j.at("ci_low").get<double>();
  e.ci_high = j.at("ci_high").get<double>();
  e.df = j.at("df").get<double>();
  e.coef = j.at("coef").get<Vec>();
  e.has_ci = true;
  return e;
}

inline json bootstrap_to_json(const BootstrapSummary& s) {
  json reps = json::array();
  for (const EffectEstimate& e : s.replicates) reps.push_back(effect_to_json(e));
  return json{{"point", effect_to_json(s.point)},
              {"replicates", std::move(reps)},
              {"requested", s.requested},
              {"failures", s.failures},
              {"failure_reasons", s.failure_reasons},
              {"mean", s.mean},
              {"sd", s.sd},
              {"ci_low", s.ci_low},
              {"ci_high", s.ci_high}};
}

inline BootstrapSummary bootstrap_from_json(const json& j) {
  BootstrapSummary s;
  s.point = effect_from_json(j.at("point"));
  for (const json& r : j.at("replicates")) s.replicates.push_back(effect_from_json(r));
  s.requested = j.at("requested").get<int>();
  s.failures = j.at("failures").get<int>();
  s.failure_reasons = j.at("failure_reasons").get<std::vector<std::string>>();
  s.mean = j.at("mean").get<double>();
  s.sd = j.at("sd").get<double>();
  s.ci_low = j.at("ci_low").get<double>();
  s.ci_high = j.at("ci_high").get<double>();
  return s;
}

}  // namespace aem
