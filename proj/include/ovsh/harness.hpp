#pragma once

// Experiment orchestration. One cell runs dataset -> training -> RR/HR ->
// GSNR -> detector calibration on the dev split -> detection and greedy vs
// SCD decoding on the test split. Sweeps append one JSON line per finished
// cell to rows.jsonl and skip cells whose hash is already there.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ovsh/gsnr.hpp"
#include "ovsh/metrics.hpp"
#include "ovsh/scd.hpp"
#include "ovsh/synthdata.hpp"

#ifndef OVSH_VERSION
#define OVSH_VERSION "0.1.0"
#endif

namespace ovsh {

inline constexpr const char* kCodeVersion = OVSH_VERSION;
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Config serialization for the decoding-side configs

namespace detail {

inline nlohmann::json json_number(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double number_from_json(const nlohmann::json& j) {
  if (j.is_null()) return kNaN;
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw ConfigError("expected a number, got '" + s + "'");
  }
  return j.get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const DetectorConfig& c) {
  return {{"apc_ratio", c.apc_ratio},
          {"beta", c.beta},
          {"gamma", detail::json_number(c.gamma)},
          {"drop_width", c.drop_width},
          {"aggregation", c.aggregation == Aggregation::mean ? "mean" : "sum"}};
}

inline DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  DetectorConfig c;
  c.apc_ratio = j.value("apc_ratio", c.apc_ratio);
  c.beta = j.value("beta", c.beta);
  if (j.contains("gamma")) c.gamma = detail::number_from_json(j.at("gamma"));
  c.drop_width = j.value("drop_width", c.drop_width);
  const auto agg = j.value("aggregation", std::string("mean"));
  if (agg == "mean") c.aggregation = Aggregation::mean;
  else if (agg == "sum") c.aggregation = Aggregation::sum;
  else throw ConfigError("unknown aggregation '" + agg + "'");
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ScdConfig& c) {
  return {{"max_len", c.max_len},
          {"recompute_vtop_each_step", c.recompute_vtop_each_step},
          {"redetect_each_step", c.redetect_each_step}};
}

inline ScdConfig scd_config_from_json(const nlohmann::json& j) {
  ScdConfig c;
  c.max_len = j.value("max_len", c.max_len);
  c.recompute_vtop_each_step = j.value("recompute_vtop_each_step", c.recompute_vtop_each_step);
  c.redetect_each_step = j.value("redetect_each_step", c.redetect_each_step);
  if (c.max_len < 1) throw ConfigError("max_len must be >= 1");
  return c;
}

inline const char* to_string(HalluMode m) noexcept { return m == HalluMode::amalgam ? "amalgam" : "any_wrong"; }

inline HalluMode hallu_mode_from_string(const std::string& s) {
  if (s == "amalgam") return HalluMode::amalgam;
  if (s == "any_wrong") return HalluMode::any_wrong;
  throw ConfigError("unknown hallucination mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// Sweep configuration

struct CellSpec {
  std::int32_t ratio = 10;         // r = m / n
  std::int32_t length_ratio = 10;  // k = |A| / |B|
  double weight_decay = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const CellSpec&, const CellSpec&) = default;
};

struct SweepConfig {
  std::vector<std::int32_t> ratios{10, 25, 50, 100};
  std::vector<std::int32_t> length_ratios{1, 10, 25, 50};
  std::vector<double> weight_decays{0.0, 1e-2, 1e-1};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  DatasetConfig data{};  // m, len_a and seed are set per cell
  ModelConfig model{};   // vocab_size and seed are set per cell
  TrainConfig train{};   // weight_decay and seed are set per cell
  DetectorConfig detector{};
  ScdConfig scd{};       // max_len is set to the answer length
  HalluMode hallu_mode = HalluMode::amalgam;
  std::string output_dir = "runs";
  std::int32_t workers = 1;
  bool save_artifacts = false;

  void validate() const {
    if (ratios.empty() || length_ratios.empty() || weight_decays.empty() || seeds.empty())
      throw ConfigError("sweep grid lists must be nonempty");
    for (auto r : ratios)
      if (r < 1) throw ConfigError("imbalance ratios must be >= 1");
    for (auto k : length_ratios)
      if (k < 1) throw ConfigError("length ratios must be >= 1");
    for (auto w : weight_decays)
      if (!(w >= 0)) throw ConfigError("weight decays must be >= 0");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
    data.group.validate();
    train.validate();
    detector.validate();
    scd.validate();
  }

  /// Grid in report order: r, then k, then lambda, seeds innermost.
  std::vector<CellSpec> cells() const {
    std::vector<CellSpec> out;
    for (auto r : ratios)
      for (auto k : length_ratios)
        for (auto w : weight_decays)
          for (auto s : seeds) out.push_back({r, k, w, s});
    return out;
  }
};

inline nlohmann::json to_json(const SweepConfig& c) {
  return {{"sweep",
           {{"ratios", c.ratios},
            {"length_ratios", c.length_ratios},
            {"weight_decays", c.weight_decays},
            {"seeds", c.seeds},
            {"hallu_mode", to_string(c.hallu_mode)},
            {"output_dir", c.output_dir},
            {"workers", c.workers},
            {"save_artifacts", c.save_artifacts}}},
          {"data", to_json(c.data)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"detector", to_json(c.detector)},
          {"scd", to_json(c.scd)}};
}

/// Reads a (possibly partial) config; missing keys keep their defaults.
inline SweepConfig sweep_config_from_json(const nlohmann::json& in) {
  if (!in.is_object()) throw ConfigError("config root must be a table/object");
  static const char* known[] = {"sweep", "data", "model", "train", "detector", "scd"};
  for (const auto& [key, val] : in.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known))
      throw ConfigError("unknown config section '" + key + "'");
    if (!val.is_object()) throw ConfigError("config section '" + key + "' must be a table/object");
  }
  SweepConfig c;
  auto j = to_json(c);
  try {
    j.merge_patch(in);
    const auto& s = j.at("sweep");
    c.ratios = s.at("ratios").get<std::vector<std::int32_t>>();
    c.length_ratios = s.at("length_ratios").get<std::vector<std::int32_t>>();
    c.weight_decays = s.at("weight_decays").get<std::vector<double>>();
    c.seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
    c.hallu_mode = hallu_mode_from_string(s.at("hallu_mode").get<std::string>());
    c.output_dir = s.at("output_dir").get<std::string>();
    c.workers = s.at("workers").get<std::int32_t>();
    c.save_artifacts = s.at("save_artifacts").get<bool>();
    c.data = dataset_config_from_json(j.at("data"));
    c.model = model_config_from_json(j.at("model"));
    c.train = train_config_from_json(j.at("train"));
    c.detector = detector_config_from_json(j.at("detector"));
    c.scd = scd_config_from_json(j.at("scd"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

/// Concrete configs of one cell. Seeds: dataset s, model 100 + s, training 200 + s.
struct CellConfigs {
  DatasetConfig data;
  ModelConfig model;
  TrainConfig train;
  DetectorConfig detector;
  ScdConfig scd;
};

inline CellConfigs cell_configs(const SweepConfig& sc, const CellSpec& cell) {
  CellConfigs c{sc.data, sc.model, sc.train, sc.detector, sc.scd};
  c.data.group.m = cell.ratio * c.data.group.n;
  c.data.group.len_a = cell.length_ratio * c.data.group.len_b;
  c.data.seed = cell.seed;
  c.model.vocab_size = c.data.vocab_size;
  c.model.seed = 100 + cell.seed;
  c.train.weight_decay = cell.weight_decay;
  c.train.seed = 200 + cell.seed;
  c.scd.detector = c.detector;
  c.scd.max_len = c.data.group.len_t;
  return c;
}

inline std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string cell_hash(const SweepConfig& sc, const CellSpec& cell) {
  const auto c = cell_configs(sc, cell);
  const nlohmann::json j = {{"r", cell.ratio},
                            {"k", cell.length_ratio},
                            {"weight_decay", cell.weight_decay},
                            {"seed", cell.seed},
                            {"data", to_json(c.data)},
                            {"model", to_json(c.model)},
                            {"train", to_json(c.train)},
                            {"detector", to_json(c.detector)},
                            {"scd", to_json(c.scd)},
                            {"hallu_mode", to_string(sc.hallu_mode)},
                            {"version", kCodeVersion}};
  return hex64(fnv1a64(j.dump()));
}

/// Hash of the whole grid; changes when any grid value or config changes.
inline std::string sweep_hash(const SweepConfig& sc) {
  auto j = to_json(sc);
  j["sweep"].erase("output_dir");
  j["sweep"].erase("workers");
  return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Report rows

struct ReportRow {
  std::int32_t r = 0;
  std::int32_t k = 0;
  double weight_decay = 0;
  std::uint64_t seed = 0;
  std::string status = "ok";  // "ok" or "failed"
  double rr = kNaN;
  double hr = kNaN;
  double rhr = kNaN;
  double gsnr_aggregate = kNaN;
  double gamma = kNaN;
  bool gamma_calibrated = false;
  double det_precision = kNaN;
  double det_recall = kNaN;
  double det_f1 = kNaN;
  std::int32_t flagged = 0;  // flagged rare prompts in the test split
  double hr_greedy = kNaN;
  double hr_scd = kNaN;
  double relative_reduction = kNaN;
  double final_loss = kNaN;
  std::string config_hash;
  std::string error;

  bool ok() const noexcept { return status == "ok"; }
};

inline bool same_number(double a, double b) noexcept { return a == b || (std::isnan(a) && std::isnan(b)); }

inline bool operator==(const ReportRow& a, const ReportRow& b) {
  return a.r == b.r && a.k == b.k && a.weight_decay == b.weight_decay && a.seed == b.seed && a.status == b.status &&
         same_number(a.rr, b.rr) && same_number(a.hr, b.hr) && same_number(a.rhr, b.rhr) &&
         same_number(a.gsnr_aggregate, b.gsnr_aggregate) && same_number(a.gamma, b.gamma) &&
         a.gamma_calibrated == b.gamma_calibrated && same_number(a.det_precision, b.det_precision) &&
         same_number(a.det_recall, b.det_recall) && same_number(a.det_f1, b.det_f1) && a.flagged == b.flagged &&
         same_number(a.hr_greedy, b.hr_greedy) && same_number(a.hr_scd, b.hr_scd) &&
         same_number(a.relative_reduction, b.relative_reduction) && same_number(a.final_loss, b.final_loss) &&
         a.config_hash == b.config_hash && a.error == b.error;
}

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{
      "r",         "k",         "weight_decay",   "seed",         "status",   "rr",     "hr",
      "rhr",       "gsnr_aggregate", "gamma",     "gamma_calibrated", "det_precision", "det_recall",
      "det_f1",    "flagged",   "hr_greedy",      "hr_scd",       "relative_reduction", "final_loss",
      "config_hash", "error"};
  return cols;
}

struct DetectionRecord {
  std::string prompt_id;  // "<group>:popular" or "<group>:rare"
  std::string split;      // "dev" or "test"
  double f_max = 0;
  std::int32_t argmax_position = -1;
  bool flagged = false;
  bool label = false;

  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

struct DecodeRecord {
  std::string prompt_id;
  std::string method;  // "greedy" or "scd"
  TokenSeq output_ids;
  std::string matched;  // "gold", "amalgam" or "other"

  friend bool operator==(const DecodeRecord&, const DecodeRecord&) = default;
};

struct CellResult {
  ReportRow row;
  std::vector<DetectionRecord> detections;
  std::vector<DecodeRecord> decodes;

  friend bool operator==(const CellResult&, const CellResult&) = default;
};

inline nlohmann::json to_json(const ReportRow& r) {
  using detail::json_number;
  return {{"r", r.r},
          {"k", r.k},
          {"weight_decay", r.weight_decay},
          {"seed", r.seed},
          {"status", r.status},
          {"rr", json_number(r.rr)},
          {"hr", json_number(r.hr)},
          {"rhr", json_number(r.rhr)},
          {"gsnr_aggregate", json_number(r.gsnr_aggregate)},
          {"gamma", json_number(r.gamma)},
          {"gamma_calibrated", r.gamma_calibrated},
          {"det_precision", json_number(r.det_precision)},
          {"det_recall", json_number(r.det_recall)},
          {"det_f1", json_number(r.det_f1)},
          {"flagged", r.flagged},
          {"hr_greedy", json_number(r.hr_greedy)},
          {"hr_scd", json_number(r.hr_scd)},
          {"relative_reduction", json_number(r.relative_reduction)},
          {"final_loss", json_number(r.final_loss)},
          {"config_hash", r.config_hash},
          {"error", r.error}};
}

inline ReportRow report_row_from_json(const nlohmann::json& j) {
  using detail::number_from_json;
  ReportRow r;
  r.r = j.at("r").get<std::int32_t>();
  r.k = j.at("k").get<std::int32_t>();
  r.weight_decay = j.at("weight_decay").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.status = j.at("status").get<std::string>();
  r.rr = number_from_json(j.at("rr"));
  r.hr = number_from_json(j.at("hr"));
  r.rhr = number_from_json(j.at("rhr"));
  r.gsnr_aggregate = number_from_json(j.at("gsnr_aggregate"));
  r.gamma = number_from_json(j.at("gamma"));
  r.gamma_calibrated = j.at("gamma_calibrated").get<bool>();
  r.det_precision = number_from_json(j.at("det_precision"));
  r.det_recall = number_from_json(j.at("det_recall"));
  r.det_f1 = number_from_json(j.at("det_f1"));
  r.flagged = j.at("flagged").get<std::int32_t>();
  r.hr_greedy = number_from_json(j.at("hr_greedy"));
  r.hr_scd = number_from_json(j.at("hr_scd"));
  r.relative_reduction = number_from_json(j.at("relative_reduction"));
  r.final_loss = number_from_json(j.at("final_loss"));
  r.config_hash = j.at("config_hash").get<std::string>();
  r.error = j.at("error").get<std::string>();
  return r;
}

inline nlohmann::json to_json(const CellResult& c) {
  auto j = to_json(c.row);
  auto& dets = j["detections"] = nlohmann::json::array();
  for (const auto& d : c.detections)
    dets.push_back({{"prompt_id", d.prompt_id},
                    {"split", d.split},
                    {"f_max", detail::json_number(d.f_max)},
                    {"argmax_position", d.argmax_position},
                    {"flagged", d.flagged},
                    {"label", d.label}});
  auto& decs = j["decodes"] = nlohmann::json::array();
  for (const auto& d : c.decodes)
    decs.push_back({{"prompt_id", d.prompt_id}, {"method", d.method}, {"output_ids", d.output_ids}, {"matched", d.matched}});
  return j;
}

inline CellResult cell_result_from_json(const nlohmann::json& j) {
  CellResult c;
  c.row = report_row_from_json(j);
  for (const auto& d : j.value("detections", nlohmann::json::array()))
    c.detections.push_back({d.at("prompt_id").get<std::string>(), d.at("split").get<std::string>(),
                            detail::number_from_json(d.at("f_max")), d.at("argmax_position").get<std::int32_t>(),
                            d.at("flagged").get<bool>(), d.at("label").get<bool>()});
  for (const auto& d : j.value("decodes", nlohmann::json::array()))
    c.decodes.push_back({d.at("prompt_id").get<std::string>(), d.at("method").get<std::string>(),
                         d.at("output_ids").get<TokenSeq>(), d.at("matched").get<std::string>()});
  return c;
}

// ---------------------------------------------------------------------------
// Threshold calibration

struct Calibration {
  double gamma = 0;
  double f1 = 0;
};

/// F1-maximizing threshold for the rule `flag when score >= gamma`. Candidates
/// are the lowest score (flag everything) and the midpoints between sorted
/// distinct scores; ties go to the lowest gamma.
inline Calibration calibrate_gamma(std::span<const std::pair<double, bool>> scores) {
  std::size_t pos = 0;
  for (const auto& [s, label] : scores) {
    if (!std::isfinite(s)) throw InputError("calibration scores must be finite");
    pos += label;
  }
  if (pos == 0 || pos == scores.size()) throw CalibrationError("calibration set needs both classes");

  std::vector<double> distinct;
  for (const auto& p : scores) distinct.push_back(p.first);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<double> candidates{distinct.front()};
  for (std::size_t i = 1; i < distinct.size(); ++i) candidates.push_back(0.5 * (distinct[i - 1] + distinct[i]));

  Calibration best{candidates.front(), -1.0};
  std::vector<bool> flags(scores.size()), labels(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) labels[i] = scores[i].second;
  for (double g : candidates) {
    for (std::size_t i = 0; i < scores.size(); ++i) flags[i] = scores[i].first >= g;
    const double f1 = detection_f1(flags, labels).f1;
    if (f1 > best.f1) best = {g, f1};
  }
  return best;
}

// ---------------------------------------------------------------------------
// One cell

inline std::string prompt_id(std::int32_t group, Branch b) { return std::to_string(group) + ":" + to_string(b); }

inline std::string match_kind(const TokenSeq& out, const Query& q) {
  if (out == q.gold) return "gold";
  if (q.amalgam && out == *q.amalgam) return "amalgam";
  return "other";
}

/// Runs one grid cell. Training divergence yields a failed row instead of an
/// exception. With `artifact_dir` set, the dataset and final checkpoint are
/// written there.
inline CellResult run_cell(const SweepConfig& sc, const CellSpec& cell,
                           const std::optional<std::filesystem::path>& artifact_dir = std::nullopt) {
  const auto cfg = cell_configs(sc, cell);
  CellResult out;
  auto& row = out.row;
  row.r = cell.ratio;
  row.k = cell.length_ratio;
  row.weight_decay = cell.weight_decay;
  row.seed = cell.seed;
  row.config_hash = cell_hash(sc, cell);

  const auto ds = generate_dataset(cfg.data);
  auto model = init_model<float>(cfg.model);
  TrainLog log;
  try {
    log = train(model, std::span<const Sample>(ds.samples), cfg.train);
  } catch (const TrainingError& e) {
    row.status = "failed";
    row.error = e.what();
    return out;
  }
  row.final_loss = log.step_loss.empty() ? kNaN : log.step_loss.back();

  if (artifact_dir) {
    std::filesystem::create_directories(*artifact_dir);
    save_dataset(ds, (*artifact_dir / "dataset.jsonl").string());
    save_checkpoint(model, (*artifact_dir / "model.ckpt").string());
  }

  const ModelOracle<float> oracle(model);
  const auto split = eval_split(ds);
  const auto met = evaluate(oracle, split.popular, split.rare, sc.hallu_mode);
  row.rr = met.rr;
  row.hr = met.hr;
  row.rhr = met.rhr.value_or(kNaN);
  row.gsnr_aggregate = gsnr(model, std::span<const Sample>(ds.samples)).aggregate;

  // Detection population: popular and rare query of every group. Label:
  // greedy output is a hallucination (wrong on popular, amalgam on rare).
  struct Item {
    const Query* q;
    Branch branch;
    bool dev;
    TokenSeq greedy;
    bool label;
    DetectionResult det;
  };
  std::vector<Item> items;
  for (int b = 0; b < 2; ++b) {
    const auto& qs = b == 0 ? split.popular : split.rare;
    for (const auto& q : qs) {
      Item it{&q, b == 0 ? Branch::popular : Branch::rare, q.group % 2 == 0, decode_answer(oracle, q), false, {}};
      it.label = it.branch == Branch::popular ? it.greedy != q.gold : is_hallucination(it.greedy, q, sc.hallu_mode);
      it.det = detect(oracle, q.prompt, cfg.detector);
      items.push_back(std::move(it));
    }
  }

  std::vector<std::pair<double, bool>> dev;
  for (const auto& it : items)
    if (it.dev) dev.emplace_back(it.det.f_max, it.label);
  double gamma = cfg.detector.gamma;
  try {
    gamma = calibrate_gamma(dev).gamma;
    row.gamma_calibrated = true;
  } catch (const CalibrationError&) {
    row.gamma_calibrated = false;
  }
  row.gamma = gamma;

  std::vector<bool> flags, labels;
  for (auto& it : items) {
    apply_threshold(it.det, gamma);
    out.detections.push_back({prompt_id(it.q->group, it.branch), it.dev ? "dev" : "test", it.det.f_max,
                              it.det.argmax_position, it.det.flagged, it.label});
    if (it.dev) continue;
    flags.push_back(it.det.flagged);
    labels.push_back(it.label);
  }
  const auto scores = detection_f1(flags, labels);
  row.det_precision = scores.precision;
  row.det_recall = scores.recall;
  row.det_f1 = scores.f1;

  ScdConfig scd = cfg.scd;
  scd.detector.gamma = gamma;
  std::int32_t greedy_hits = 0, scd_hits = 0;
  for (const auto& it : items) {
    if (it.dev) continue;
    scd.max_len = static_cast<std::int32_t>(it.q->gold.size());
    const auto contrasted = scd_decode(oracle, it.q->prompt, it.det, scd);
    const auto id = prompt_id(it.q->group, it.branch);
    out.decodes.push_back({id, "greedy", it.greedy, match_kind(it.greedy, *it.q)});
    out.decodes.push_back({id, "scd", contrasted, match_kind(contrasted, *it.q)});
    if (it.branch != Branch::rare || !it.det.flagged) continue;
    ++row.flagged;
    greedy_hits += is_hallucination(it.greedy, *it.q, sc.hallu_mode);
    scd_hits += is_hallucination(contrasted, *it.q, sc.hallu_mode);
  }
  if (row.flagged > 0) {
    row.hr_greedy = double(greedy_hits) / row.flagged;
    row.hr_scd = double(scd_hits) / row.flagged;
    if (row.hr_greedy > 0) row.relative_reduction = (row.hr_greedy - row.hr_scd) / row.hr_greedy;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

struct ExperimentReport {
  nlohmann::json metadata;
  std::vector<CellResult> cells;

  std::vector<ReportRow> rows() const {
    std::vector<ReportRow> out;
    for (const auto& c : cells) out.push_back(c.row);
    return out;
  }
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Cells already persisted in a rows.jsonl file, keyed by config hash. A torn
/// final line from an interrupted run is ignored.
inline std::map<std::string, CellResult> load_completed(const std::filesystem::path& rows_path) {
  std::map<std::string, CellResult> done;
  std::ifstream in(rows_path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto c = cell_result_from_json(nlohmann::json::parse(line));
      done[c.row.config_hash] = std::move(c);
    } catch (const std::exception&) {
      continue;
    }
  }
  return done;
}

using CellCallback = std::function<void(const CellSpec&, const CellResult&, bool resumed)>;

inline ExperimentReport run_sweep(const SweepConfig& sc, const CellCallback& on_cell = {}) {
  sc.validate();
  namespace fs = std::filesystem;
  const fs::path dir(sc.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  const auto rows_path = dir / "rows.jsonl";
  {
    std::ofstream probe(rows_path, std::ios::app);
    if (ec || !probe) throw ConfigError("output directory '" + sc.output_dir + "' is not writable");
  }

  ExperimentReport rep;
  rep.metadata = {{"sweep_hash", sweep_hash(sc)},
                  {"code_version", kCodeVersion},
                  {"config", to_json(sc)},
                  {"started", utc_timestamp()}};

  const auto grid = sc.cells();
  const auto completed = load_completed(rows_path);
  rep.cells.resize(grid.size());
  std::vector<std::size_t> pending;
  std::size_t resumed = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    auto it = completed.find(cell_hash(sc, grid[i]));
    if (it == completed.end()) {
      pending.push_back(i);
      continue;
    }
    rep.cells[i] = it->second;
    ++resumed;
    if (on_cell) on_cell(grid[i], rep.cells[i], true);
  }

  bool torn = false;
  if (std::ifstream prev(rows_path, std::ios::binary | std::ios::ate); prev && prev.tellg() > 0) {
    prev.seekg(-1, std::ios::end);
    torn = prev.get() != '\n';
  }
  std::ofstream rows(rows_path, std::ios::app);
  if (torn) rows << '\n';
  std::mutex append;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const auto n = next.fetch_add(1);
      if (n >= pending.size()) return;
      {
        std::lock_guard lock(append);
        if (failure) return;
      }
      const auto i = pending[n];
      try {
        std::optional<fs::path> art;
        if (sc.save_artifacts) art = dir / "cells" / cell_hash(sc, grid[i]);
        auto res = run_cell(sc, grid[i], art);
        std::lock_guard lock(append);
        rows << to_json(res).dump() << '\n';
        rows.flush();
        rep.cells[i] = std::move(res);
        if (on_cell) on_cell(grid[i], rep.cells[i], false);
      } catch (...) {
        std::lock_guard lock(append);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const auto nthreads = std::min<std::size_t>(std::size_t(sc.workers), std::max<std::size_t>(pending.size(), 1));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  rep.metadata["finished"] = utc_timestamp();
  rep.metadata["cells"] = grid.size();
  rep.metadata["resumed_cells"] = resumed;
  std::ofstream meta(dir / "meta.json");
  meta << rep.metadata.dump(2) << '\n';
  return rep;
}

/// Reassembles a report from a rows.jsonl file, in file order.
inline ExperimentReport load_report(const std::filesystem::path& rows_path) {
  std::ifstream in(rows_path);
  if (!in) throw InputError("cannot open " + rows_path.string());
  ExperimentReport rep;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      rep.cells.push_back(cell_result_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError(e.what(), n);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report emission

namespace detail {

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, end) : std::string();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string join_csv(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_field(fields[i]);
  }
  return out;
}

}  // namespace detail

inline void write_rows_csv(std::ostream& os, std::span<const ReportRow> rows) {
  using detail::csv_number;
  os << detail::join_csv(report_columns()) << '\n';
  for (const auto& r : rows)
    os << detail::join_csv({std::to_string(r.r), std::to_string(r.k), csv_number(r.weight_decay), std::to_string(r.seed),
                            r.status, csv_number(r.rr), csv_number(r.hr), csv_number(r.rhr),
                            csv_number(r.gsnr_aggregate), csv_number(r.gamma), r.gamma_calibrated ? "1" : "0",
                            csv_number(r.det_precision), csv_number(r.det_recall), csv_number(r.det_f1),
                            std::to_string(r.flagged), csv_number(r.hr_greedy), csv_number(r.hr_scd),
                            csv_number(r.relative_reduction), csv_number(r.final_loss), r.config_hash, r.error})
       << '\n';
}

inline void write_detections_csv(std::ostream& os, std::span<const CellResult> cells) {
  os << "config_hash,prompt_id,split,f_max,argmax_position,flagged,label\n";
  for (const auto& c : cells)
    for (const auto& d : c.detections)
      os << detail::join_csv({c.row.config_hash, d.prompt_id, d.split, detail::csv_number(d.f_max),
                              std::to_string(d.argmax_position), d.flagged ? "1" : "0", d.label ? "1" : "0"})
         << '\n';
}

inline void write_decodes_csv(std::ostream& os, std::span<const CellResult> cells) {
  os << "config_hash,prompt_id,method,output_ids,matched\n";
  for (const auto& c : cells)
    for (const auto& d : c.decodes) {
      std::string ids;
      for (std::size_t i = 0; i < d.output_ids.size(); ++i) ids += (i ? " " : "") + std::to_string(d.output_ids[i]);
      os << detail::join_csv({c.row.config_hash, d.prompt_id, d.method, ids, d.matched}) << '\n';
    }
}

/// Writes the report into `dir`: csv -> report.csv, detections.csv,
/// decodes.csv; jsonl -> report.jsonl. Returns the written paths.
inline std::vector<std::filesystem::path> emit_report(const ExperimentReport& rep, const std::string& format,
                                                      const std::filesystem::path& dir) {
  if (format != "csv" && format != "jsonl") throw InputError("unknown report format '" + format + "'");
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto open = [&](const char* name) {
    written.push_back(dir / name);
    std::ofstream os(written.back());
    if (!os) throw InputError("cannot write " + written.back().string());
    return os;
  };
  if (format == "jsonl") {
    auto os = open("report.jsonl");
    for (const auto& c : rep.cells) os << to_json(c).dump() << '\n';
    return written;
  }
  const auto rows = rep.rows();
  {
    auto os = open("report.csv");
    write_rows_csv(os, rows);
  }
  {
    auto os = open("detections.csv");
    write_detections_csv(os, rep.cells);
  }
  auto os = open("decodes.csv");
  write_decodes_csv(os, rep.cells);
  return written;
}

// ---------------------------------------------------------------------------
// Statistics and trend checks

inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InputError("pearson needs two equal-length series of size >= 2");
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return kNaN;
  return sxy / std::sqrt(sxx * syy);
}

/// Ranks starting at 1; tied values share their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x), ry = average_ranks(y);
  return pearson(rx, ry);
}

struct LevelStats {
  double level = 0;
  double mean = kNaN;
  double stddev = kNaN;  // sample standard deviation; NaN with fewer than 2 values
  std::size_t count = 0;
};

/// Mean of `value` over completed rows grouped by `level`, ascending by level.
/// NaN values (e.g. rHR with RR = 0) are skipped.
inline std::vector<LevelStats> level_means(std::span<const ReportRow> rows,
                                           const std::function<double(const ReportRow&)>& level,
                                           const std::function<double(const ReportRow&)>& value) {
  std::map<double, std::vector<double>> groups;
  for (const auto& r : rows) {
    if (!r.ok()) continue;
    const double v = value(r);
    auto& g = groups[level(r)];
    if (!std::isnan(v)) g.push_back(v);
  }
  std::vector<LevelStats> out;
  for (const auto& [lv, vals] : groups) {
    LevelStats s;
    s.level = lv;
    s.count = vals.size();
    if (!vals.empty()) s.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / double(vals.size());
    if (vals.size() >= 2) {
      double ss = 0;
      for (double v : vals) ss += (v - s.mean) * (v - s.mean);
      s.stddev = std::sqrt(ss / double(vals.size() - 1));
    }
    out.push_back(s);
  }
  return out;
}

struct TrendCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

inline std::string describe(const std::vector<LevelStats>& s) {
  std::string out;
  for (const auto& l : s) out += (out.empty() ? "" : ", ") + fmt(l.level) + ":" + fmt(l.mean);
  return out;
}

inline std::vector<ReportRow> select(std::span<const ReportRow> rows, const std::function<bool(const ReportRow&)>& keep) {
  std::vector<ReportRow> out;
  for (const auto& r : rows)
    if (keep(r)) out.push_back(r);
  return out;
}

inline std::pair<std::vector<double>, std::vector<double>> series(const std::vector<LevelStats>& s) {
  std::vector<double> x, y;
  for (const auto& l : s) {
    x.push_back(l.level);
    y.push_back(l.mean);
  }
  return {x, y};
}

inline bool all_finite(const std::vector<LevelStats>& s) {
  return std::all_of(s.begin(), s.end(), [](const LevelStats& l) { return std::isfinite(l.mean); });
}

}  // namespace detail

/// Mean rHR strictly increasing in r with Spearman 1 over the cell means.
inline TrendCheck check_ratio_trend(std::span<const ReportRow> rows, std::int32_t k, double weight_decay) {
  const auto sel = detail::select(rows, [&](const ReportRow& r) { return r.k == k && r.weight_decay == weight_decay; });
  const auto s = level_means(sel, [](const ReportRow& r) { return double(r.r); }, [](const ReportRow& r) { return r.rhr; });
  TrendCheck t{"imbalance trend", false, "mean rHR by r: " + detail::describe(s)};
  if (s.size() < 2 || !detail::all_finite(s)) return t;
  bool strict = true;
  for (std::size_t i = 1; i < s.size(); ++i) strict = strict && s[i].mean > s[i - 1].mean;
  const auto [x, y] = detail::series(s);
  const double rho = spearman(x, y);
  t.detail += "; spearman " + detail::fmt(rho);
  t.pass = strict && rho == 1.0;
  return t;
}

/// Mean rHR non-decreasing in k with Spearman >= 0.8.
inline TrendCheck check_length_trend(std::span<const ReportRow> rows, std::int32_t r, double weight_decay) {
  const auto sel = detail::select(rows, [&](const ReportRow& x) { return x.r == r && x.weight_decay == weight_decay; });
  const auto s = level_means(sel, [](const ReportRow& x) { return double(x.k); }, [](const ReportRow& x) { return x.rhr; });
  TrendCheck t{"length trend", false, "mean rHR by k: " + detail::describe(s)};
  if (s.size() < 2 || !detail::all_finite(s)) return t;
  bool mono = true;
  for (std::size_t i = 1; i < s.size(); ++i) mono = mono && s[i].mean >= s[i - 1].mean;
  const auto [x, y] = detail::series(s);
  const double rho = spearman(x, y);
  t.detail += "; spearman " + detail::fmt(rho);
  t.pass = mono && rho >= 0.8;
  return t;
}

/// Mean rHR non-decreasing in lambda up to one pooled standard deviation per step.
inline TrendCheck check_decay_trend(std::span<const ReportRow> rows, std::int32_t r, std::int32_t k) {
  const auto sel = detail::select(rows, [&](const ReportRow& x) { return x.r == r && x.k == k; });
  const auto s = level_means(sel, [](const ReportRow& x) { return x.weight_decay; }, [](const ReportRow& x) { return x.rhr; });
  TrendCheck t{"weight-decay trend", false, "mean rHR by lambda: " + detail::describe(s)};
  if (s.size() < 2 || !detail::all_finite(s)) return t;
  double var = 0;
  std::size_t n = 0;
  for (const auto& l : s)
    if (!std::isnan(l.stddev)) {
      var += l.stddev * l.stddev;
      ++n;
    }
  const double pooled = n ? std::sqrt(var / double(n)) : 0.0;
  bool ok = true;
  for (std::size_t i = 1; i < s.size(); ++i) ok = ok && s[i].mean >= s[i - 1].mean - pooled;
  t.detail += "; pooled sd " + detail::fmt(pooled);
  t.pass = ok;
  return t;
}

/// Pearson correlation between gsnr_aggregate and rHR across cells.
inline TrendCheck check_gsnr_correlation(std::span<const ReportRow> rows, double threshold = 0.5) {
  std::vector<double> g, h;
  for (const auto& r : rows)
    if (r.ok() && std::isfinite(r.gsnr_aggregate) && std::isfinite(r.rhr)) {
      g.push_back(r.gsnr_aggregate);
      h.push_back(r.rhr);
    }
  TrendCheck t{"gsnr correlation", false, std::to_string(g.size()) + " cells"};
  if (g.size() < 2) return t;
  const double rho = pearson(g, h);
  t.detail += "; pearson " + detail::fmt(rho);
  t.pass = rho >= threshold;
  return t;
}

/// Mean test-split detector F1 over seeds at one cell of the grid.
inline TrendCheck check_detection(std::span<const ReportRow> rows, std::int32_t r, std::int32_t k,
                                  double threshold = 0.6) {
  const auto sel = detail::select(rows, [&](const ReportRow& x) { return x.r == r && x.k == k && x.ok(); });
  std::vector<double> f;
  for (const auto& x : sel)
    if (std::isfinite(x.det_f1)) f.push_back(x.det_f1);
  TrendCheck t{"detection F1", false, "r=" + std::to_string(r) + " k=" + std::to_string(k)};
  if (f.empty()) return t;
  const double mean = std::accumulate(f.begin(), f.end(), 0.0) / double(f.size());
  t.detail += "; mean F1 " + detail::fmt(mean) + " over " + std::to_string(f.size()) + " seeds";
  t.pass = mean >= threshold;
  return t;
}

/// Seed-averaged hr_scd <= factor * hr_greedy on flagged prompts, at each r.
inline TrendCheck check_mitigation(std::span<const ReportRow> rows, std::span<const std::int32_t> ratios,
                                   double factor = 0.9) {
  TrendCheck t{"mitigation", !ratios.empty(), ""};
  for (auto r : ratios) {
    double g = 0, s = 0;
    std::size_t n = 0;
    for (const auto& x : rows)
      if (x.ok() && x.r == r && std::isfinite(x.hr_greedy)) {
        g += x.hr_greedy;
        s += x.hr_scd;
        ++n;
      }
    if (n == 0) {
      t.pass = false;
      t.detail += (t.detail.empty() ? "" : "; ") + std::string("r=") + std::to_string(r) + ": no flagged prompts";
      continue;
    }
    g /= double(n);
    s /= double(n);
    const bool ok = g > 0 && s <= factor * g;
    t.pass = t.pass && ok;
    t.detail += (t.detail.empty() ? "" : "; ") + std::string("r=") + std::to_string(r) + ": greedy " +
                detail::fmt(g) + " scd " + detail::fmt(s);
  }
  return t;
}

}  // namespace ovsh
