#include "qure/cli.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "qure/config.hpp"
#include "qure/embedding_store.hpp"
#include "qure/error.hpp"
#include "qure/evaluator.hpp"
#include "qure/miner.hpp"
#include "qure/parallel.hpp"
#include "qure/scorer.hpp"
#include "qure/synthgen.hpp"
#include "qure/trainer.hpp"

namespace qure::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum class LogLevel { Error, Warn, Info, Debug };

LogLevel parse_log_level(const std::string& s) {
  if (s == "error") return LogLevel::Error;
  if (s == "warn") return LogLevel::Warn;
  if (s == "info") return LogLevel::Info;
  if (s == "debug") return LogLevel::Debug;
  throw Error(ErrorKind::Config, "unknown log level '" + s + "'");
}

struct Globals {
  std::size_t threads = 0;
  std::optional<std::uint64_t> seed;
  std::string log_level = "warn";
  bool json_errors = true;
};

class Context {
 public:
  Context(const Globals& g, std::ostream& out, std::ostream& err)
      : globals(g), out(out), err(err), level_(parse_log_level(g.log_level)) {}

  void log(LogLevel level, const std::string& msg) const {
    if (level <= level_) err << msg << '\n';
  }
  std::size_t threads() const { return globals.threads == 0 ? default_threads() : globals.threads; }

  const Globals& globals;
  std::ostream& out;
  std::ostream& err;

 private:
  LogLevel level_;
};

struct DataPaths {
  std::string manifest, corpus, query_img, query_txt;
};

Dataset load_dataset(const DataPaths& p, const std::string& split = "train") {
  auto manifest = load_manifest(p.manifest, split);
  auto corpus = load_embeddings(p.corpus);
  auto qimg = load_embeddings(p.query_img);
  auto qtxt = load_embeddings(p.query_txt);
  return Dataset(std::move(manifest), std::move(corpus), std::move(qimg), std::move(qtxt));
}

void add_data_options(CLI::App* cmd, DataPaths& p, bool query_files_required = true) {
  cmd->add_option("--manifest", p.manifest, "Query manifest (JSON lines)")->required();
  cmd->add_option("--corpus", p.corpus, "Corpus embedding file")->required();
  auto* img = cmd->add_option("--query-img", p.query_img, "Reference image embedding file");
  auto* txt = cmd->add_option("--query-txt", p.query_txt, "Text embedding file");
  if (query_files_required) {
    img->required();
    txt->required();
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot open for writing " + path.string());
  f << text;
  if (!f) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string config;
  std::string out_dir;
};

int run_synth(const Context& ctx, const SynthArgs& a) {
  SynthConfig cfg;
  if (!a.config.empty()) cfg = synth_config_from_json(load_config_file(a.config));
  if (ctx.globals.seed) cfg.seed = *ctx.globals.seed;
  ctx.log(LogLevel::Warn, "effective synth config: " + to_json(cfg).dump());
  const auto data = generate(cfg);
  write_synth_dataset(data, a.out_dir);
  write_text_file(fs::path(a.out_dir) / "synth_config.json", to_json(cfg).dump(2) + "\n");
  ctx.out << json{{"corpus", data.corpus.count()},
                  {"queries", data.manifest.queries.size()},
                  {"eval_queries", data.eval_manifest.queries.size()},
                  {"dim", data.corpus.dim()},
                  {"duplicates_per_signature", cfg.duplicates_per_signature()}}
                 .dump()
          << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// validate

int run_validate(const Context& ctx, const DataPaths& p) {
  DatasetManifest manifest = load_manifest(p.manifest);
  const auto corpus = load_embeddings(p.corpus);
  const auto qimg = load_embeddings(p.query_img);
  const auto qtxt = load_embeddings(p.query_txt);
  manifest.corpus_ids = corpus.ids();
  const auto report = validate_manifest(manifest, corpus, qimg, qtxt);
  json issues = json::array();
  for (const auto& i : report.issues) {
    issues.push_back({{"kind", i.kind}, {"query_id", i.query_id}, {"detail", i.detail}});
  }
  ctx.out << json{{"ok", report.empty()},
                  {"queries", manifest.queries.size()},
                  {"corpus", corpus.count()},
                  {"issues", issues}}
                 .dump()
          << '\n';
  return report.empty() ? kExitOk : kExitValidation;
}

// ---------------------------------------------------------------------------
// mine

struct MineArgs {
  DataPaths data;
  std::string checkpoint;
  std::string strategy = "two-drops";
  std::size_t k = kDefaultTopK;
  std::int64_t epoch = 1;
  std::string out;
};

AdapterParams params_from(const std::string& checkpoint, std::size_t d_in, std::uint64_t seed) {
  if (!checkpoint.empty()) return load_checkpoint(checkpoint).params;
  TrainingConfig c;
  c.seed = seed;
  return initial_params(d_in, c);
}

int run_mine(const Context& ctx, const MineArgs& a) {
  const Dataset data = load_dataset(a.data);
  const Strategy strategy = parse_strategy(a.strategy);
  if (a.k < 1) throw Error(ErrorKind::Config, "--k must be at least 1");
  if (a.epoch < 0) throw Error(ErrorKind::Config, "--epoch must be non-negative");
  const auto params = params_from(a.checkpoint, data.corpus().dim(), ctx.globals.seed.value_or(0));
  const auto mined = mine_all(params, data, strategy, a.k, a.epoch, ctx.threads());

  std::ofstream file;
  std::ostream* os = &ctx.out;
  if (!a.out.empty()) {
    file.open(a.out, std::ios::trunc);
    if (!file) throw Error(ErrorKind::Io, "cannot open for writing " + a.out);
    os = &file;
  }
  for (const auto& s : mined.sets) {
    *os << json{{"query_id", s.query_id},
                {"negative_ids", s.negative_ids},
                {"strategy", std::string(to_string(s.strategy))},
                {"epoch", s.epoch_defined},
                {"fallback", std::string(to_string(s.fallback))}}
               .dump()
        << '\n';
  }
  *os << json{{"miner_stats", to_json(mined.stats)}}.dump() << '\n';
  if (!*os) throw Error(ErrorKind::Io, "write failed");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  DataPaths data;
  std::string eval_manifest;
  std::string resume;
  std::string out_dir;
  nlohmann::json overrides = nlohmann::json::object();
};

int run_train(const Context& ctx, TrainArgs a) {
  json file_cfg = json::object();
  if (!a.config.empty()) file_cfg = load_config_file(a.config);
  if (!file_cfg.is_object()) throw Error(ErrorKind::Config, "config file must hold an object");
  // Path keys in the config file fill flags that were not given.
  const std::pair<const char*, std::string*> path_keys[] = {
      {"manifest", &a.data.manifest},   {"corpus", &a.data.corpus},
      {"query_img", &a.data.query_img}, {"query_txt", &a.data.query_txt},
      {"eval_manifest", &a.eval_manifest}, {"out_dir", &a.out_dir}};
  for (const auto& [key, target] : path_keys) {
    if (file_cfg.contains(key)) {
      if (!file_cfg[key].is_string()) throw Error(ErrorKind::Config, std::string("'") + key + "' must be a path");
      if (target->empty()) *target = file_cfg[key].get<std::string>();
      file_cfg.erase(key);
    }
  }
  if (file_cfg.contains("training")) {
    json nested = file_cfg["training"];
    file_cfg.erase("training");
    for (auto& [k, v] : nested.items()) file_cfg[k] = v;
  }
  for (auto& [k, v] : a.overrides.items()) file_cfg[k] = v;
  TrainingConfig config = training_config_from_json(file_cfg);
  if (ctx.globals.seed) config.seed = *ctx.globals.seed;
  config.validate();
  for (const auto& [key, target] : path_keys) {
    if (target->empty() && std::string(key) != "eval_manifest") {
      throw Error(ErrorKind::Config, std::string("missing required path '") + key + "'");
    }
  }

  json effective = to_json(config);
  ctx.log(LogLevel::Warn, "effective config: " + effective.dump());

  const Dataset data = load_dataset(a.data);
  std::optional<Dataset> eval_data;
  if (!a.eval_manifest.empty()) {
    eval_data.emplace(load_manifest(a.eval_manifest, "test"), data.corpus(), data.query_img(),
                      data.query_txt());
  }

  std::optional<Checkpoint> init;
  if (!a.resume.empty()) init = load_checkpoint(a.resume);

  const fs::path out_dir(a.out_dir);
  fs::create_directories(out_dir);
  const fs::path log_path = out_dir / "training_log.jsonl";
  const fs::path ck_path = out_dir / "checkpoint.qure";

  // Keep log lines of epochs already covered by the resumed checkpoint.
  std::string kept_log;
  if (init) {
    std::ifstream in(log_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.contains("epoch") && j["epoch"].get<std::int64_t>() < init->epoch) {
        kept_log += line + "\n";
      }
    }
  }
  write_text_file(log_path, kept_log);
  write_text_file(out_dir / "effective_config.json", effective.dump(2) + "\n");

  std::ofstream log_file(log_path, std::ios::app | std::ios::binary);
  TrainOptions opts;
  opts.threads = ctx.threads();
  if (eval_data) opts.eval_data = &*eval_data;
  opts.on_epoch_end = [&](const Checkpoint& ck, const EpochLog& entry) {
    log_file << to_json(entry).dump() << '\n';
    log_file.flush();
    const fs::path tmp = out_dir / "checkpoint.qure.tmp";
    write_checkpoint(ck, tmp);
    fs::rename(tmp, ck_path);
    ctx.log(LogLevel::Info, "epoch " + std::to_string(entry.epoch) + " loss " + std::to_string(entry.mean_loss));
  };
  const auto result = train(config, data, init, opts);
  if (!log_file) throw Error(ErrorKind::Io, "write failed: " + log_path.string());
  write_checkpoint(result.checkpoint, ck_path);

  json summary{{"epochs", result.log.epochs.size()}, {"checkpoint", ck_path.string()}};
  if (!result.log.epochs.empty()) {
    summary["final_loss"] = result.log.epochs.back().mean_loss;
    json ev = json::object();
    for (const auto& [name, v] : result.log.epochs.back().eval) ev[name] = v;
    if (!ev.empty()) summary["eval"] = ev;
  }
  ctx.out << summary.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// rank

struct RankArgs {
  std::string checkpoint;
  DataPaths data;
  std::size_t k = 50;
  std::string out;
  bool subset = false;
};

int run_rank(const Context& ctx, const RankArgs& a) {
  if (a.k < 1) throw Error(ErrorKind::Config, "--k must be at least 1");
  const Dataset data = load_dataset(a.data);
  const auto params = load_checkpoint(a.checkpoint).params;
  const auto rankings = rank_all(params, data, a.subset, ctx.threads());
  if (a.out.empty()) {
    write_rankings(rankings, a.k, ctx.out);
  } else {
    write_rankings(rankings, a.k, a.out);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string rankings;
  std::string truth;
  std::string metrics = "recall@1,recall@5,recall@10,recall@50";
  std::string subset;
  bool json_out = false;
};

int run_eval(const Context& ctx, const EvalArgs& a) {
  const auto rankings = load_rankings(a.rankings);
  const auto truth = load_truth(a.truth);
  std::vector<MetricSpec> specs;
  std::stringstream ss(a.metrics);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) specs.push_back(parse_metric(item));
  }
  if (specs.empty()) throw Error(ErrorKind::Config, "no metrics requested");
  SubsetMap subsets;
  if (!a.subset.empty()) {
    for (const auto& q : load_manifest(a.subset).queries) {
      if (q.subset_ids) subsets[q.query_id] = *q.subset_ids;
    }
  }
  auto report = evaluate(rankings, truth, specs, a.subset.empty() ? nullptr : &subsets);
  report.split = "eval";
  report.config = json{{"metrics", a.metrics}, {"rankings", a.rankings}, {"truth", a.truth}};
  if (a.json_out) {
    ctx.out << to_json(report).dump() << '\n';
  } else {
    for (const auto& [name, value] : report.metrics) {
      ctx.out << name << '\t' << std::fixed << std::setprecision(2) << value << '\n';
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// prefrate

struct PrefArgs {
  std::string checkpoint;
  std::string records;
  DataPaths data;
};

int run_prefrate(const Context& ctx, const PrefArgs& a) {
  const Dataset data = load_dataset(a.data);
  const auto params = load_checkpoint(a.checkpoint).params;
  const auto records = load_preferences(a.records);
  const auto res = preference_rate(params, records, data);
  if (!res.rate) {
    throw Error(ErrorKind::UndefinedRate, "undefined preference rate: no record has s_rel(Set1) > s_rel(Set2) (" +
                                           std::to_string(res.excluded) + " excluded)");
  }
  ctx.out << json{{"preference_rate", *res.rate},
                  {"considered", res.considered},
                  {"agreed", res.agreed},
                  {"excluded", res.excluded}}
                 .dump()
          << '\n';
  return kExitOk;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Validation:
    case ErrorKind::Config: return kExitValidation;
    default: return kExitRuntime;
  }
}

void report_error(std::ostream& err, bool as_json, const std::string& kind, const std::string& message) {
  if (as_json) {
    err << json{{"error", kind}, {"message", message}}.dump() << '\n';
  } else {
    err << "error (" << kind << "): " << message << '\n';
  }
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Composed-retrieval training and evaluation engine", "qure"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)");
  app.add_option("--seed", g.seed, "Seed override");
  app.add_option("--log-level", g.log_level, "error|warn|info|debug");
  app.add_option("--json-errors", g.json_errors, "Emit errors as one JSON object (default true)");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a planted synthetic dataset");
  c_synth->add_option("--config", synth.config, "SynthConfig (JSON or TOML)");
  c_synth->add_option("--out-dir", synth.out_dir, "Output directory")->required();

  DataPaths vpaths;
  auto* c_validate = app.add_subcommand("validate", "Check a manifest against its embedding files");
  add_data_options(c_validate, vpaths);

  MineArgs mine;
  auto* c_mine = app.add_subcommand("mine", "Define hard-negative sets");
  add_data_options(c_mine, mine.data);
  c_mine->add_option("--checkpoint", mine.checkpoint, "Checkpoint (default: initial adapter)");
  c_mine->add_option("--strategy", mine.strategy, "two-drops|all|top-k|after-target-top-k");
  c_mine->add_option("--k", mine.k, "k for the top-k strategies");
  c_mine->add_option("--epoch", mine.epoch, "Epoch label; 0 is the warm-up set");
  c_mine->add_option("--out", mine.out, "Output JSON lines (default stdout)");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train the adapter");
  c_train->add_option("--config", tr.config, "TrainingConfig (JSON or TOML)");
  c_train->add_option("--manifest", tr.data.manifest);
  c_train->add_option("--corpus", tr.data.corpus);
  c_train->add_option("--query-img", tr.data.query_img);
  c_train->add_option("--query-txt", tr.data.query_txt);
  c_train->add_option("--eval-manifest", tr.eval_manifest, "Held-out manifest for Recall@k logging");
  c_train->add_option("--resume", tr.resume, "Checkpoint to resume from");
  c_train->add_option("--out-dir", tr.out_dir);
  std::optional<std::int64_t> o_epochs, o_def;
  std::optional<std::size_t> o_batch, o_k;
  std::optional<double> o_lr;
  std::optional<std::string> o_strategy;
  c_train->add_option("--n-epoch", o_epochs);
  c_train->add_option("--n-def", o_def);
  c_train->add_option("--batch-size", o_batch);
  c_train->add_option("--learning-rate", o_lr);
  c_train->add_option("--strategy", o_strategy);
  c_train->add_option("--k", o_k);

  RankArgs rank;
  auto* c_rank = app.add_subcommand("rank", "Rank the corpus for every query");
  c_rank->add_option("--checkpoint", rank.checkpoint)->required();
  add_data_options(c_rank, rank.data);
  c_rank->add_option("--k", rank.k, "Entries per ranked list");
  c_rank->add_option("--out", rank.out, "Output JSON lines (default stdout)");
  c_rank->add_flag("--subset", rank.subset, "Rank only each query's subset_ids");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Compute retrieval metrics from ranked lists");
  c_eval->add_option("--rankings", ev.rankings)->required();
  c_eval->add_option("--truth", ev.truth)->required();
  c_eval->add_option("--metrics", ev.metrics, "Comma list, e.g. recall@10,map@5,recall_subset@1");
  c_eval->add_option("--subset", ev.subset, "Manifest providing subset_ids");
  c_eval->add_flag("--json", ev.json_out, "Print the full report as JSON");

  PrefArgs pref;
  auto* c_pref = app.add_subcommand("prefrate", "Human-preference alignment rate");
  c_pref->add_option("--checkpoint", pref.checkpoint)->required();
  c_pref->add_option("--records", pref.records)->required();
  c_pref->add_option("--corpus", pref.data.corpus)->required();
  c_pref->add_option("--queries", pref.data.manifest, "Query manifest")->required();
  c_pref->add_option("--query-img", pref.data.query_img)->required();
  c_pref->add_option("--query-txt", pref.data.query_txt)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, g.json_errors, "usage", e.what());
    err << app.help();
    return kExitValidation;
  }

  try {
    Context ctx(g, out, err);
    if (*c_synth) return run_synth(ctx, synth);
    if (*c_validate) return run_validate(ctx, vpaths);
    if (*c_mine) return run_mine(ctx, mine);
    if (*c_train) {
      if (o_epochs) tr.overrides["n_epoch"] = *o_epochs;
      if (o_def) tr.overrides["n_def"] = *o_def;
      if (o_batch) tr.overrides["batch_size"] = *o_batch;
      if (o_lr) tr.overrides["learning_rate"] = *o_lr;
      if (o_strategy) tr.overrides["strategy"] = *o_strategy;
      if (o_k) tr.overrides["k"] = *o_k;
      return run_train(ctx, tr);
    }
    if (*c_rank) return run_rank(ctx, rank);
    if (*c_eval) return run_eval(ctx, ev);
    if (*c_pref) return run_prefrate(ctx, pref);
  } catch (const Error& e) {
    report_error(err, g.json_errors, to_string(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    report_error(err, g.json_errors, "runtime", e.what());
    return kExitRuntime;
  }
  err << app.help();
  return kExitValidation;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace qure::cli
