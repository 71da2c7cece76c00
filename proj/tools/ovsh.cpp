// ovsh: command-line front end for data generation, training, evaluation,
// detection, decoding, theory checks and experiment sweeps.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>
#include <toml.hpp>

#include "ovsh/harness.hpp"
#include "ovsh/theory.hpp"

namespace fs = std::filesystem;
using namespace ovsh;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitTrend = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct TrendFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::int32_t> workers;
  bool assert_trends = false;
};

std::shared_ptr<spdlog::logger> make_logger() {
  auto log = spdlog::stderr_color_mt("ovsh");
  log->set_pattern("[%H:%M:%S] [%^%l%$] %v");
  std::string level = "info";
  if (const char* env = std::getenv("OVSH_LOG")) level = env;
  if (level == "error") log->set_level(spdlog::level::err);
  else if (level == "warn") log->set_level(spdlog::level::warn);
  else if (level == "info") log->set_level(spdlog::level::info);
  else if (level == "debug") log->set_level(spdlog::level::debug);
  else {
    log->set_level(spdlog::level::info);
    log->warn("unknown OVSH_LOG value '{}', using info", level);
  }
  return log;
}

nlohmann::json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  if (fs::path(path).extension() == ".toml") {
    try {
      const auto tbl = toml::parse_file(path);
      std::ostringstream os;
      os << toml::json_formatter{tbl};
      return nlohmann::json::parse(os.str());
    } catch (const toml::parse_error& e) {
      std::ostringstream msg;
      msg << path << ": " << e.description() << " at line " << e.source().begin.line;
      throw ConfigError(msg.str());
    }
  }
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

SweepConfig load_config(const Globals& g) {
  SweepConfig sc = g.config.empty() ? SweepConfig{} : sweep_config_from_json(read_config_file(g.config));
  if (g.seed) sc.seeds = {*g.seed};
  if (!g.out.empty()) sc.output_dir = g.out;
  if (g.workers) sc.workers = *g.workers;
  sc.validate();
  return sc;
}

fs::path out_dir(const SweepConfig& sc) {
  fs::path p(sc.output_dir);
  fs::create_directories(p);
  return p;
}

TokenSeq parse_ids(const std::string& s) {
  TokenSeq out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
      out.push_back(static_cast<TokenId>(v));
    } catch (const std::exception&) {
      throw ConfigError("bad token id '" + tok + "' in prompt");
    }
  }
  if (out.empty()) throw ConfigError("empty prompt");
  return out;
}

std::string ids_string(const TokenSeq& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? " " : "") + std::to_string(ids[i]);
  return s;
}

// Cell-level options shared by the single-run subcommands.
struct CellOpts {
  std::optional<std::int32_t> ratio, length_ratio;
  std::optional<double> weight_decay;
  std::string data, model;

  CellSpec cell(const SweepConfig& sc) const {
    return {ratio.value_or(sc.ratios.front()), length_ratio.value_or(sc.length_ratios.front()),
            weight_decay.value_or(sc.weight_decays.front()), sc.seeds.front()};
  }
  void add_grid(CLI::App* app) {
    app->add_option("--ratio,-r", ratio, "imbalance ratio r (default: first in config)");
    app->add_option("--length-ratio,-k", length_ratio, "length ratio k (default: first in config)");
    app->add_option("--weight-decay", weight_decay, "weight decay (default: first in config)");
  }
};

std::vector<Query> all_queries(const SyntheticDataset& ds, bool rare_only) {
  auto split = eval_split(ds);
  std::vector<Query> out;
  if (!rare_only) out = split.popular;
  out.insert(out.end(), split.rare.begin(), split.rare.end());
  return out;
}

std::string query_id(const Query& q) { return prompt_id(q.group, q.amalgam ? Branch::rare : Branch::popular); }

SyntheticDataset dataset_for(const SweepConfig& sc, const CellOpts& o, spdlog::logger& log) {
  if (!o.data.empty()) return load_dataset(o.data);
  log.info("no --data given; generating the dataset for this cell");
  return generate_dataset(cell_configs(sc, o.cell(sc)).data);
}

NextTokenPredictor model_for(const CellOpts& o) {
  if (o.model.empty()) throw ConfigError("--model is required");
  return load_checkpoint(o.model);
}

// Trend checks that the grid of `rows` supports.
std::vector<TrendCheck> applicable_checks(std::span<const ReportRow> rows) {
  std::set<std::int32_t> rs, ks;
  std::set<double> ws;
  for (const auto& r : rows) {
    rs.insert(r.r);
    ks.insert(r.k);
    ws.insert(r.weight_decay);
  }
  std::vector<TrendCheck> out;
  if (rows.empty()) return out;
  const std::int32_t k0 = ks.count(10) ? 10 : *ks.begin();
  const std::int32_t r0 = rs.count(25) ? 25 : *rs.begin();
  const double w0 = ws.count(0.0) ? 0.0 : *ws.begin();
  if (rs.size() >= 2) {
    out.push_back(check_ratio_trend(rows, k0, w0));
    std::vector<ReportRow> sweep;
    for (const auto& r : rows)
      if (r.k == k0 && r.weight_decay == w0) sweep.push_back(r);
    out.push_back(check_gsnr_correlation(sweep));
  }
  if (ks.size() >= 2) out.push_back(check_length_trend(rows, r0, w0));
  if (ws.size() >= 2) out.push_back(check_decay_trend(rows, r0, k0));
  if (rs.count(100)) out.push_back(check_detection(rows, 100, k0));
  std::vector<std::int32_t> mit;
  for (auto r : {50, 100})
    if (rs.count(r)) mit.push_back(r);
  if (!mit.empty()) out.push_back(check_mitigation(rows, mit));
  return out;
}

void report_trends(std::span<const ReportRow> rows, bool assert_trends, spdlog::logger& log) {
  bool ok = true;
  for (const auto& t : applicable_checks(rows)) {
    std::cout << (t.pass ? "PASS " : "FAIL ") << t.name << ": " << t.detail << "\n";
    ok = ok && t.pass;
  }
  if (!ok && assert_trends) throw TrendFailure("one or more trend checks failed");
  if (!ok) log.warn("some trend checks failed (use --assert-trends to make this fatal)");
}

}  // namespace

int main(int argc, char** argv) {
  auto log = make_logger();
  CLI::App app{"Knowledge-overshadowing experiments on a tiny transformer"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kCodeVersion));

  Globals g;
  app.add_option("--config,-c", g.config, "TOML or JSON config file");
  app.add_option("--seed", g.seed, "single seed (overrides the config's seed list)");
  app.add_option("--out,-o", g.out, "output directory (overrides sweep.output_dir)");
  app.add_option("--workers,-j", g.workers, "parallel sweep cells");
  app.add_flag("--assert-trends", g.assert_trends, "exit 1 when a trend check fails");

  CellOpts o;
  std::string prompt, method = "greedy", format = "csv", rows_path;
  std::optional<double> gamma;
  std::optional<std::int32_t> max_len;
  std::size_t trials = 10000;
  bool rare_only = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  o.add_grid(gen);

  auto* trn = app.add_subcommand("train", "train a model on a dataset");
  o.add_grid(trn);
  trn->add_option("--data", o.data, "dataset file (default: generate)");

  auto* evl = app.add_subcommand("eval", "recall, hallucination rate and rHR");
  o.add_grid(evl);
  evl->add_option("--data", o.data, "dataset file (default: generate)");
  evl->add_option("--model", o.model, "checkpoint")->required();

  auto* gs = app.add_subcommand("gsnr", "gradient signal-to-noise ratio of a checkpoint");
  o.add_grid(gs);
  gs->add_option("--data", o.data, "dataset file (default: generate)");
  gs->add_option("--model", o.model, "checkpoint")->required();

  auto* det = app.add_subcommand("detect", "overshadowing scores per prompt");
  o.add_grid(det);
  det->add_option("--data", o.data, "dataset file (scores every query)");
  det->add_option("--model", o.model, "checkpoint")->required();
  det->add_option("--prompt", prompt, "space-separated token ids");
  det->add_option("--gamma", gamma, "decision threshold");
  det->add_flag("--rare-only", rare_only, "only rare-branch queries");

  auto* dec = app.add_subcommand("decode", "greedy or self-contrastive decoding");
  o.add_grid(dec);
  dec->add_option("--data", o.data, "dataset file (decodes every query)");
  dec->add_option("--model", o.model, "checkpoint")->required();
  dec->add_option("--prompt", prompt, "space-separated token ids");
  dec->add_option("--method", method, "greedy or scd")->check(CLI::IsMember({"greedy", "scd"}));
  dec->add_option("--gamma", gamma, "detection threshold for scd");
  dec->add_option("--max-len", max_len, "tokens to generate (default: answer length)");
  dec->add_flag("--rare-only", rare_only, "only rare-branch queries");

  auto* th = app.add_subcommand("theory-check", "randomized check of the NTP gradient-norm bound");
  th->add_option("--trials", trials, "number of random probes")->check(CLI::PositiveNumber);

  auto* sw = app.add_subcommand("sweep", "run the experiment grid");

  auto* rep = app.add_subcommand("report", "emit a report from a sweep's rows.jsonl");
  rep->add_option("--rows", rows_path, "rows file (default: <out>/rows.jsonl)");
  rep->add_option("--format", format, "csv or jsonl")->check(CLI::IsMember({"csv", "jsonl"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const auto sc = load_config(g);
    const auto out = out_dir(sc);

    if (gen->parsed()) {
      const auto cfg = cell_configs(sc, o.cell(sc));
      const auto ds = generate_dataset(cfg.data);
      const auto path = out / "dataset.jsonl";
      save_dataset(ds, path.string());
      log->info("wrote {} samples in {} groups to {}", ds.samples.size(), ds.groups.size(), path.string());
    } else if (trn->parsed()) {
      const auto cfg = cell_configs(sc, o.cell(sc));
      const auto ds = dataset_for(sc, o, *log);
      auto mc = cfg.model;
      mc.vocab_size = ds.vocab.size;
      auto model = init_model<float>(mc);
      log->info("training {} parameters on {} samples", model.param_count(), ds.samples.size());
      const EpochHook<float> hook = [&](std::int32_t epoch, const NextTokenPredictor&) { log->debug("epoch {} done", epoch); };
      const auto tl = train(model, std::span<const Sample>(ds.samples), cfg.train, hook);
      save_checkpoint(model, (out / "model.ckpt").string());
      nlohmann::json tj;
      tj["epoch_loss"] = tl.epoch_loss;
      tj["step_loss"] = tl.step_loss;
      std::ofstream(out / "train_log.json") << tj.dump() << "\n";
      log->info("final epoch loss {:.4g}; checkpoint in {}", tl.epoch_loss.back(), (out / "model.ckpt").string());
    } else if (evl->parsed()) {
      const auto ds = dataset_for(sc, o, *log);
      const auto model = model_for(o);
      const ModelOracle<float> oracle(model);
      const auto split = eval_split(ds);
      const auto m = evaluate(oracle, split.popular, split.rare, sc.hallu_mode);
      std::cout << nlohmann::json{{"rr", m.rr}, {"hr", m.hr}, {"rhr", detail::json_number(m.rhr.value_or(kNaN))}}.dump()
                << "\n";
    } else if (gs->parsed()) {
      const auto ds = dataset_for(sc, o, *log);
      const auto model = model_for(o);
      const auto r = gsnr(model, std::span<const Sample>(ds.samples));
      std::cout << nlohmann::json{{"aggregate", r.aggregate}, {"per_param_group", r.per_param_group},
                                  {"sample_count", r.sample_count}}
                       .dump()
                << "\n";
    } else if (det->parsed() || dec->parsed()) {
      const auto model = model_for(o);
      const ModelOracle<float> oracle(model);
      auto dcfg = sc.detector;
      if (gamma) dcfg.gamma = *gamma;
      std::vector<std::pair<std::string, Query>> items;
      if (!prompt.empty()) {
        items.push_back({"prompt", Query{parse_ids(prompt), {}, std::nullopt, 0}});
      } else {
        if (o.data.empty()) throw ConfigError("give --prompt or --data");
        for (auto& q : all_queries(load_dataset(o.data), rare_only)) items.emplace_back(query_id(q), std::move(q));
      }
      for (const auto& [id, q] : items) {
        const auto d = detect(oracle, q.prompt, dcfg);
        nlohmann::json line{{"prompt_id", id}};
        if (det->parsed()) {
          line.update({{"f_max", d.f_max}, {"argmax_position", d.argmax_position}, {"flagged", d.flagged}});
        } else {
          ScdConfig scfg = sc.scd;
          scfg.detector = dcfg;
          scfg.max_len = max_len.value_or(q.gold.empty() ? sc.data.group.len_t : std::int32_t(q.gold.size()));
          const auto ids = method == "scd" ? scd_decode(oracle, q.prompt, d, scfg)
                                           : greedy_decode(oracle, q.prompt, scfg.max_len);
          line.update({{"method", method}, {"output_ids", ids_string(ids)}, {"flagged", d.flagged}});
          if (!q.gold.empty()) line["matched"] = match_kind(ids, q);
        }
        std::cout << line.dump() << "\n";
      }
    } else if (th->parsed()) {
      const auto t = theory::bound_property_test(trials, sc.seeds.front());
      nlohmann::json tj;
      tj["trials"] = t.trials;
      tj["violations"] = t.violations;
      tj["fd_failures"] = t.fd_failures;
      tj["max_slack_ratio"] = t.max_slack_ratio;
      tj["max_fd_rel_error"] = t.max_fd_rel_error;
      std::cout << tj.dump() << "\n";
      for (const auto& f : t.failures) log->error("{}", f);
      if (t.violations || t.fd_failures) return kExitTrend;
    } else if (sw->parsed()) {
      log->info("sweep of {} cells into {}", sc.cells().size(), sc.output_dir);
      const auto report = run_sweep(sc, [&](const CellSpec& c, const CellResult& res, bool resumed) {
        const auto& r = res.row;
        log->info("r={} k={} wd={} seed={} {}{} rr={:.3f} hr={:.3f} f1={:.3f}", c.ratio, c.length_ratio, c.weight_decay,
                  c.seed, r.status, resumed ? " (resumed)" : "", r.rr, r.hr, r.det_f1);
      });
      for (const auto& f : emit_report(report, "csv", out)) log->info("wrote {}", f.string());
      const auto rows = report.rows();
      report_trends(rows, g.assert_trends, *log);
    } else if (rep->parsed()) {
      const fs::path src = rows_path.empty() ? out / "rows.jsonl" : fs::path(rows_path);
      const auto report = load_report(src);
      for (const auto& f : emit_report(report, format, out)) log->info("wrote {}", f.string());
      const auto rows = report.rows();
      report_trends(rows, g.assert_trends, *log);
    }
  } catch (const TrendFailure& e) {
    log->error("{}", e.what());
    return kExitTrend;
  } catch (const ConfigError& e) {
    log->error("config error: {}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    log->error("{}", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}
