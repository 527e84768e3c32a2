#pragma once

// File formats: the flat key/value config (strict: unknown keys are errors),
// CSV with a stable column order, and JSON manifests/checkpoints. Doubles in
// checkpoints are stored as raw bit patterns so reloads are bitwise exact.

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedgmm/fed.hpp"
#include "fedgmm/mixture.hpp"

namespace fedgmm {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kCodeVersion = "0.1.0";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` document. `#` starts a comment; blank lines ignored.
/// Every key must be consumed by the command that loads the file;
/// finalize() rejects leftovers so config typos cannot pass silently.
class ConfigMap {
 public:
  static ConfigMap parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str(), path.string());
  }

  static ConfigMap parse_string(const std::string& text,
                                const std::string& origin = "<string>") {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string stripped = strip(line.substr(0, line.find('#')));
      if (stripped.empty()) continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": expected `key = value`");
      const std::string key = strip(stripped.substr(0, eq));
      const std::string value = strip(stripped.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      if (cfg.values_.count(key))
        throw ConfigError(origin + ": duplicate key `" + key + "`");
      cfg.values_[key] = value;
    }
    cfg.origin_ = origin;
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end())
      throw ConfigError(origin_ + ": missing required key `" + key + "`");
    used_.insert(key);
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& fallback) {
    return has(key) ? get_string(key) : fallback;
  }

  double get_double(const std::string& key) { return to_double(key, get_string(key)); }
  double get_double(const std::string& key, double fallback) {
    return has(key) ? get_double(key) : fallback;
  }

  std::uint64_t get_u64(const std::string& key) {
    const std::string s = get_string(key);
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key `" + key + "` is not an unsigned integer: " + s);
    }
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) {
    return has(key) ? get_u64(key) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const std::string s = get_string(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(origin_ + ": key `" + key + "` is not a boolean: " + s);
  }

  std::vector<double> get_double_list(const std::string& key) {
    const std::string s = get_string(key);
    std::vector<double> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(to_double(key, strip(item)));
    if (out.empty())
      throw ConfigError(origin_ + ": key `" + key + "` is an empty list");
    return out;
  }

  std::vector<std::uint64_t> get_u64_list(const std::string& key) {
    std::vector<std::uint64_t> out;
    for (double v : get_double_list(key)) {
      if (v < 0 || v != std::floor(v))
        throw ConfigError(origin_ + ": key `" + key + "` must list unsigned integers");
      out.push_back(static_cast<std::uint64_t>(v));
    }
    return out;
  }

  /// Error out on any key that was never read.
  void finalize() const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) unknown.push_back(k);
    if (!unknown.empty()) {
      std::string msg = origin_ + ": unknown key(s):";
      for (const auto& k : unknown) msg += " `" + k + "`";
      throw ConfigError(msg);
    }
  }

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  static std::string strip(std::string s) {
    const auto is_space = [](unsigned char c) { return std::isspace(c); };
    while (!s.empty() && is_space(s.front())) s.erase(s.begin());
    while (!s.empty() && is_space(s.back())) s.pop_back();
    return s;
  }

  double to_double(const std::string& key, const std::string& s) const {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key `" + key + "` is not a number: " + s);
    }
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
  std::string origin_;
};

// ---- exact double <-> hex ----

inline std::string double_to_hex(double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  char buf[17];
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) buf[15 - i] = digits[(bits >> (4 * i)) & 0xF];
  buf[16] = '\0';
  return std::string(buf);
}

inline double hex_to_double(const std::string& s) {
  if (s.size() != 16) throw std::invalid_argument("hex double must be 16 chars");
  std::uint64_t bits = 0;
  for (char c : s) {
    bits <<= 4;
    if (c >= '0' && c <= '9') bits |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') bits |= static_cast<std::uint64_t>(c - 'a' + 10);
    else if (c >= 'A' && c <= 'F') bits |= static_cast<std::uint64_t>(c - 'A' + 10);
    else throw std::invalid_argument("bad hex digit in double");
  }
  return std::bit_cast<double>(bits);
}

inline json vector_to_hex_json(std::span<const double> v) {
  json arr = json::array();
  for (double x : v) arr.push_back(double_to_hex(x));
  return arr;
}

inline std::vector<double> hex_json_to_vector(const json& arr) {
  std::vector<double> out;
  out.reserve(arr.size());
  for (const auto& item : arr) out.push_back(hex_to_double(item.get<std::string>()));
  return out;
}

// ---- CSV ----

/// %.17g: shortest form that round-trips IEEE doubles.
inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> columns)
      : out_(path), columns_(std::move(columns)) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path.string());
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      if (i) out_ << ',';
      out_ << columns_[i];
    }
    out_ << '\n';
  }

  void write_row(std::span<const double> values) {
    if (values.size() != columns_.size())
      throw std::invalid_argument("CsvWriter: column count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out_ << ',';
      out_ << fmt_double(values[i]);
    }
    out_ << '\n';
  }

  void write_raw_row(std::span<const std::string> values) {
    if (values.size() != columns_.size())
      throw std::invalid_argument("CsvWriter: column count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out_ << ',';
      out_ << values[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
  std::vector<std::string> columns_;
};

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw std::invalid_argument("CSV has no column `" + name + "`");
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open CSV: " + path.string());
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (first) {
      table.columns = cells;
      first = false;
    } else {
      table.rows.push_back(cells);
    }
  }
  return table;
}

// ---- dataset + run artifacts ----

/// One row per sample, final column = component label (+1 / -1).
inline void write_samples_csv(const std::filesystem::path& path, const Matrix& x,
                              const std::vector<int>* labels) {
  std::vector<std::string> cols;
  for (std::size_t j = 0; j < x.cols; ++j) cols.push_back("x" + std::to_string(j));
  if (labels) cols.push_back("label");
  CsvWriter csv(path, cols);
  std::vector<std::string> row(cols.size());
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) row[j] = fmt_double(x(i, j));
    if (labels) row[x.cols] = std::to_string((*labels)[i]);
    csv.write_raw_row(row);
  }
}

inline Matrix read_samples_csv(const std::filesystem::path& path,
                               std::vector<int>* labels = nullptr) {
  const CsvTable table = read_csv(path);
  const bool has_label = !table.columns.empty() && table.columns.back() == "label";
  const std::size_t d = table.columns.size() - (has_label ? 1 : 0);
  Matrix x(table.rows.size(), d);
  if (labels) labels->resize(table.rows.size());
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) = std::stod(table.rows[i][j]);
    if (labels && has_label) (*labels)[i] = std::stoi(table.rows[i][d]);
  }
  return x;
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  return json::parse(in);
}

/// Config echo + seed + code version: everything needed to re-run bitwise.
inline json make_manifest(const std::string& command, std::uint64_t seed,
                          int threads, const ConfigMap& cfg) {
  json j;
  j["format_version"] = kFormatVersion;
  j["code_version"] = kCodeVersion;
  j["command"] = command;
  j["seed"] = seed;
  j["threads"] = threads;
  json echo = json::object();
  for (const auto& [k, v] : cfg.raw()) echo[k] = v;
  j["config"] = echo;
  return j;
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              std::span<const RunRecord> records) {
  CsvWriter csv(path, {"round", "mean_error", "weight_mse", "train_loss",
                       "score_error"});
  for (const RunRecord& r : records) {
    csv.write_row(std::vector<double>{static_cast<double>(r.round), r.mean_error,
                                      r.weight_mse, r.train_loss, r.score_error});
  }
}

// ---- engine checkpoint ----

inline json checkpoint_to_json(const FedEngine& engine) {
  const FedEngine::Snapshot s = engine.snapshot();
  const FedConfig& cfg = engine.config();
  json j;
  j["format_version"] = kFormatVersion;
  j["code_version"] = kCodeVersion;
  j["seed"] = cfg.seed;
  j["m"] = cfg.m;
  j["n"] = cfg.n;
  j["K"] = cfg.K;
  j["tau_sync"] = cfg.tau_sync;
  j["batch"] = cfg.batch;
  j["eta_mu_hex"] = double_to_hex(cfg.eta_mu);
  j["eta_logit_hex"] = double_to_hex(cfg.eta_logit);
  j["t_min_hex"] = double_to_hex(cfg.schedule.t_min);
  j["t_max_hex"] = double_to_hex(cfg.schedule.t_max);
  j["optimizer"] = cfg.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  j["adam_beta1_hex"] = double_to_hex(cfg.adam.beta1);
  j["adam_beta2_hex"] = double_to_hex(cfg.adam.beta2);
  j["adam_eps_hex"] = double_to_hex(cfg.adam.eps);
  j["init_mu_sd_hex"] = double_to_hex(cfg.init_mu_sd);
  j["polyak_tail_frac_hex"] = double_to_hex(cfg.polyak_tail_frac);
  j["participation_hex"] = double_to_hex(cfg.participation);
  switch (cfg.weights.kind) {
    case WeightsSpec::Kind::constant:
      j["weights_kind"] = "constant";
      j["weights_value_hex"] = double_to_hex(cfg.weights.value);
      break;
    case WeightsSpec::Kind::explicit_list:
      j["weights_kind"] = "list";
      j["weights_list_hex"] = vector_to_hex_json(cfg.weights.list);
      break;
    case WeightsSpec::Kind::uniform:
      j["weights_kind"] = "uniform";
      j["weights_lo_hex"] = double_to_hex(cfg.weights.lo);
      j["weights_hi_hex"] = double_to_hex(cfg.weights.hi);
      break;
  }
  j["mu_true_hex"] = vector_to_hex_json(engine.mu_true());
  j["rounds_done"] = s.rounds_done;
  j["backbone_hex"] = vector_to_hex_json(s.backbone);
  j["tail_sum_hex"] = vector_to_hex_json(s.tail_sum);
  j["tail_count"] = s.tail_count;
  json clients = json::array();
  for (const auto& c : s.clients) {
    json cj;
    cj["logit_hex"] = double_to_hex(c.logit);
    cj["mu_hat_hex"] = vector_to_hex_json(c.mu_hat);
    cj["steps_done"] = c.steps_done;
    cj["adam_mu_m_hex"] = vector_to_hex_json(c.adam_mu.m);
    cj["adam_mu_v_hex"] = vector_to_hex_json(c.adam_mu.v);
    cj["adam_mu_t"] = c.adam_mu.t;
    cj["adam_logit_m_hex"] = vector_to_hex_json(c.adam_logit.m);
    cj["adam_logit_v_hex"] = vector_to_hex_json(c.adam_logit.v);
    cj["adam_logit_t"] = c.adam_logit.t;
    clients.push_back(cj);
  }
  j["clients"] = clients;
  return j;
}

inline FedEngine engine_from_checkpoint(const json& j, int threads = 1) {
  FedConfig cfg;
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.m = j.at("m").get<std::size_t>();
  cfg.n = j.at("n").get<std::size_t>();
  cfg.K = j.at("K").get<std::size_t>();
  cfg.tau_sync = j.at("tau_sync").get<std::size_t>();
  cfg.batch = j.at("batch").get<std::size_t>();
  cfg.eta_mu = hex_to_double(j.at("eta_mu_hex").get<std::string>());
  cfg.eta_logit = hex_to_double(j.at("eta_logit_hex").get<std::string>());
  cfg.schedule.t_min = hex_to_double(j.at("t_min_hex").get<std::string>());
  cfg.schedule.t_max = hex_to_double(j.at("t_max_hex").get<std::string>());
  cfg.optimizer = j.at("optimizer").get<std::string>() == "adam"
                      ? OptimizerKind::adam
                      : OptimizerKind::sgd;
  cfg.adam.beta1 = hex_to_double(j.at("adam_beta1_hex").get<std::string>());
  cfg.adam.beta2 = hex_to_double(j.at("adam_beta2_hex").get<std::string>());
  cfg.adam.eps = hex_to_double(j.at("adam_eps_hex").get<std::string>());
  cfg.init_mu_sd = hex_to_double(j.at("init_mu_sd_hex").get<std::string>());
  cfg.polyak_tail_frac =
      hex_to_double(j.at("polyak_tail_frac_hex").get<std::string>());
  cfg.participation = hex_to_double(j.at("participation_hex").get<std::string>());
  const std::string wk = j.at("weights_kind").get<std::string>();
  if (wk == "constant") {
    cfg.weights = WeightsSpec::constant(
        hex_to_double(j.at("weights_value_hex").get<std::string>()));
  } else if (wk == "list") {
    cfg.weights =
        WeightsSpec::explicit_list(hex_json_to_vector(j.at("weights_list_hex")));
  } else {
    cfg.weights =
        WeightsSpec::uniform(hex_to_double(j.at("weights_lo_hex").get<std::string>()),
                             hex_to_double(j.at("weights_hi_hex").get<std::string>()));
  }
  cfg.threads = threads;
  const std::vector<double> mu_true = hex_json_to_vector(j.at("mu_true_hex"));

  FedEngine engine(cfg, mu_true);
  FedEngine::Snapshot s;
  s.rounds_done = j.at("rounds_done").get<std::size_t>();
  s.backbone = hex_json_to_vector(j.at("backbone_hex"));
  s.tail_sum = hex_json_to_vector(j.at("tail_sum_hex"));
  s.tail_count = j.at("tail_count").get<std::size_t>();
  for (const auto& cj : j.at("clients")) {
    FedEngine::Snapshot::Client c;
    c.logit = hex_to_double(cj.at("logit_hex").get<std::string>());
    c.mu_hat = hex_json_to_vector(cj.at("mu_hat_hex"));
    c.steps_done = cj.at("steps_done").get<std::size_t>();
    c.adam_mu.m = hex_json_to_vector(cj.at("adam_mu_m_hex"));
    c.adam_mu.v = hex_json_to_vector(cj.at("adam_mu_v_hex"));
    c.adam_mu.t = cj.at("adam_mu_t").get<std::uint64_t>();
    c.adam_logit.m = hex_json_to_vector(cj.at("adam_logit_m_hex"));
    c.adam_logit.v = hex_json_to_vector(cj.at("adam_logit_v_hex"));
    c.adam_logit.t = cj.at("adam_logit_t").get<std::uint64_t>();
    s.clients.push_back(std::move(c));
  }
  engine.restore(s);
  return engine;
}

}  // namespace fedgmm
