// realign: command-line front end.
//
// Exit codes: 0 success, 2 contract not met (training budget, failed
// settings), 64 usage or invalid configuration, 65 unreadable or malformed
// data. Reports are JSON lines on stdout unless --out/--report is given.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "realign/harness.hpp"

namespace fs = std::filesystem;
using namespace realign;
using nlohmann::json;

namespace {

constexpr int kExitContract = 2;
constexpr int kExitUsage = 64;
constexpr int kExitFormat = 65;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Global {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

json read_json_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot open " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw Error("cannot write " + p.string());
}

/// Writes to `path`, or to stdout when it is empty.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text << std::flush;
  } else {
    write_text(path, text);
  }
}

/// Defaults, then the config file, then REALIGN_SEED if neither set a
/// seed, then --seed.
ExperimentConfig effective_config(const Global& g) {
  ExperimentConfig c;
  bool seed_from_file = false;
  if (!g.config_path.empty()) {
    const json j = read_json_file(g.config_path);
    try {
      c = experiment_config_from_json(j);
    } catch (const FormatError& e) {
      throw UsageError(e.what());
    } catch (const json::exception& e) {
      throw UsageError(std::string("config: ") + e.what());
    }
    seed_from_file = j.contains("seed");
  }
  if (!g.seed && !seed_from_file) {
    if (const char* env = std::getenv("REALIGN_SEED"); env && *env) {
      try {
        std::size_t used = 0;
        c.seed = std::stoull(env, &used);
        if (env[used] != '\0') throw std::invalid_argument(env);
      } catch (const std::exception&) {
        throw UsageError(std::string("REALIGN_SEED is not an unsigned integer: ") + env);
      }
    }
  }
  if (g.seed) c.seed = *g.seed;
  c.model.seed = c.seed;
  return c;
}

void validate(const ExperimentConfig& c) {
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
}

/// A checkpoint fixes the architecture the corpus must fit.
void adopt_model(ExperimentConfig& c, const Model& m) {
  c.model = m.config();
  validate(c);
}

json metrics_json(const Metrics& m) {
  return {{"task_performance", m.task_performance}, {"harmful_rate", m.harmful_rate}};
}

void require_file(const std::string& p, const char* what) {
  if (!fs::is_regular_file(p)) throw FormatError(std::string(what) + " not found: " + p);
}

std::vector<PromptRecord> split_named(const Corpus& c, const std::string& name) {
  static const std::map<std::string, std::vector<PromptRecord> Corpus::*> splits = {
      {"align_train", &Corpus::align_train}, {"task_train", &Corpus::task_train},
      {"poison_pool", &Corpus::poison_pool}, {"recovery", &Corpus::recovery_set},
      {"rollback", &Corpus::rollback_set},   {"eval_task", &Corpus::eval_task},
      {"eval_harmful", &Corpus::eval_harmful}};
  const auto it = splits.find(name);
  if (it == splits.end()) throw UsageError("unknown split '" + name + "'");
  return c.*(it->second);
}

// train

struct TrainArgs {
  std::string out;
  std::string metrics;
};

int cmd_train(const Global& g, const TrainArgs& a) {
  ExperimentConfig c = effective_config(g);
  validate(c);
  const Corpus corpus = build_corpus(c);
  Metrics m;
  json line = {{"type", "metrics"}, {"command", "train"}, {"config", to_json(c)}};
  try {
    const Model model = align_train(c, corpus, &m);
    save_checkpoint(model, a.out);
    line.update(metrics_json(m));
    line["contract_met"] = true;
    emit(a.metrics, line.dump() + "\n");
    return 0;
  } catch (const HarnessError& e) {
    line.update(metrics_json(e.metrics));
    line["contract_met"] = false;
    line["error"] = e.what();
    emit(a.metrics, line.dump() + "\n");
    return kExitContract;
  }
}

// finetune

struct FinetuneArgs {
  std::string in, out, metrics;
  int poison = 0;
  bool pure_harmful = false;
  std::optional<int> epochs;
  std::optional<float> lr;
};

int cmd_finetune(const Global& g, const FinetuneArgs& a) {
  ExperimentConfig c = effective_config(g);
  if (a.epochs) c.finetune_epochs = *a.epochs;
  if (a.lr) c.finetune_lr = *a.lr;
  validate(c);
  if (a.poison < 0 || a.poison > c.pool_size()) {
    throw UsageError("--poison must be in 0.." + std::to_string(c.pool_size()) +
                     " (the pool holds max(poison_counts) prompts)");
  }
  require_file(a.in, "checkpoint");
  const Model aligned = load_checkpoint(a.in);
  adopt_model(c, aligned);
  const Corpus corpus = build_corpus(c);
  std::span<const PromptRecord> task = corpus.task_train;
  if (a.pure_harmful) task = {};
  const Model tuned = poison_finetune(aligned, task, corpus.poison_pool, a.poison, c.finetune_epochs, c.finetune_lr,
                                      c.finetune_batch, c.seed ^ 0xF1E7u);
  save_checkpoint(tuned, a.out);
  json line = {{"type", "metrics"},       {"command", "finetune"},
               {"poison", a.poison},      {"pure_harmful", a.pure_harmful},
               {"before", metrics_json(evaluate(aligned, corpus))},
               {"config", to_json(c)}};
  line.update(metrics_json(evaluate(tuned, corpus)));
  emit(a.metrics, line.dump() + "\n");
  return 0;
}

// recover

struct RecoverArgs {
  std::string original, finetuned, out, report;
  std::optional<std::string> scenario;
  std::optional<double> p, r, fuse_threshold;
  std::optional<int> epochs, warmup, ldir;
};

int cmd_recover(const Global& g, const RecoverArgs& a) {
  ExperimentConfig c = effective_config(g);
  RecoveryConfig& rc = c.recovery;
  if (a.scenario) {
    try {
      rc.scenario = scenario_from_string(*a.scenario);
    } catch (const FormatError& e) {
      throw UsageError(e.what());
    }
  }
  if (a.p) rc.recovery_rate = *a.p;
  if (a.r) rc.rollback_rate = *a.r;
  if (a.epochs) rc.epochs = *a.epochs;
  if (a.warmup) rc.warmup = *a.warmup;
  if (a.fuse_threshold) rc.fuse_threshold = *a.fuse_threshold;
  if (a.ldir) rc.direction_layer = *a.ldir;
  validate(c);
  require_file(a.original, "checkpoint");
  require_file(a.finetuned, "checkpoint");
  const Model original = load_checkpoint(a.original);
  const Model finetuned = load_checkpoint(a.finetuned);
  if (!original.config().same_layout(finetuned.config())) throw FormatError("checkpoints have different layouts");
  adopt_model(c, finetuned);

  const Corpus corpus = build_corpus(c);
  const double baseline = task_performance(finetuned, corpus.eval_task);
  auto metric = [&](const Model& m) { return task_performance(m, corpus.eval_task); };
  const PerformanceDrop drop = [&](const Model& m) { return performance_drop(m, metric, baseline); };
  auto [recovered, report] =
      recover(original, finetuned, prompts_of(corpus.recovery_set), prompts_of(corpus.rollback_set), rc, drop);
  save_checkpoint(recovered, a.out);

  std::ostringstream os;
  os << json{{"type", "config"}, {"config", to_json(c)}}.dump() << '\n';
  os << to_json_lines(report);
  json m = {{"type", "metrics"},
            {"finetuned", metrics_json(evaluate(finetuned, corpus))},
            {"recovered", metrics_json(evaluate(recovered, corpus))}};
  os << m.dump() << '\n';
  emit(a.report, os.str());
  return 0;
}

// steer

struct SteerArgs {
  std::string model, aligned_dir, harmful_dir, out;
  float alpha = 1.0f, beta = 1.0f;
  std::optional<int> layer;
};

int cmd_steer(const Global& g, const SteerArgs& a) {
  ExperimentConfig c = effective_config(g);
  if (a.layer) c.recovery.direction_layer = *a.layer;
  validate(c);
  require_file(a.model, "checkpoint");
  const Model model = load_checkpoint(a.model);
  adopt_model(c, model);
  const Corpus corpus = build_corpus(c);
  const int layer = c.recovery.layer_for(c.model);

  SteeringSpec spec;
  spec.alpha = a.alpha;
  spec.beta = a.beta;
  spec.aligned = a.aligned_dir.empty()
                     ? extract_direction(model, prompts_of(corpus.rollback_set), layer, DirectionSource::kAligned)
                     : direction_from_json(read_json_file(a.aligned_dir));
  spec.harmful = a.harmful_dir.empty()
                     ? extract_direction(model, prompts_of(corpus.recovery_set), layer, DirectionSource::kHarmful)
                     : direction_from_json(read_json_file(a.harmful_dir));

  std::vector<Tokens> preds;
  for (const auto& r : corpus.eval_task) {
    preds.push_back(steer_generate(model, r.prompt, spec, static_cast<int>(r.answer.size()), vocab::kEos));
  }
  json line = {{"type", "metrics"},
               {"command", "steer"},
               {"alpha", a.alpha},
               {"beta", a.beta},
               {"layer", spec.harmful.layer},
               {"task_performance", exact_match(preds, corpus.eval_task)},
               {"harmful_rate", harmful_rate(model, corpus.eval_harmful, spec)},
               {"config", to_json(c)}};
  emit(a.out, line.dump() + "\n");
  return 0;
}

// eval

struct EvalArgs {
  std::string model, predictions, gold, out;
};

Tokens prediction_from_json(const json& j) {
  if (j.is_array()) return j.get<Tokens>();
  if (j.contains("prediction")) return j.at("prediction").get<Tokens>();
  return j.at("answer").get<Tokens>();
}

std::vector<Tokens> read_predictions(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot open " + p.string());
  std::vector<Tokens> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(prediction_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

int cmd_eval(const Global& g, const EvalArgs& a) {
  ExperimentConfig c = effective_config(g);
  validate(c);
  if (a.model.empty() && a.predictions.empty()) throw UsageError("eval needs --model or --predictions");
  json line = {{"type", "metrics"}, {"command", "eval"}};

  if (!a.predictions.empty()) {
    const auto preds = read_predictions(a.predictions);
    const auto gold = a.gold.empty() ? build_corpus(c).eval_task : read_records(a.gold);
    try {
      line["exact_match"] = exact_match(preds, gold);
    } catch (const DimensionError& e) {
      throw FormatError(e.what());
    }
    line["n"] = gold.size();
  }
  if (!a.model.empty()) {
    require_file(a.model, "checkpoint");
    const Model model = load_checkpoint(a.model);
    adopt_model(c, model);
    line.update(metrics_json(evaluate(model, build_corpus(c))));
  }
  line["config"] = to_json(c);
  emit(a.out, line.dump() + "\n");
  return 0;
}

// diff

struct DiffArgs {
  std::string a, b, out;
  bool indices = false;
};

int cmd_diff(const DiffArgs& a) {
  require_file(a.a, "checkpoint");
  require_file(a.b, "checkpoint");
  const Model ma = load_checkpoint(a.a), mb = load_checkpoint(a.b);
  std::vector<Index> d;
  try {
    d = weight_diff(ma, mb);
  } catch (const ConfigMismatchError& e) {
    throw FormatError(e.what());
  }
  std::map<std::string, std::size_t> by_param;
  for (Index k : d) ++by_param[ma.info(ma.locate(k).first).name];
  json line = {{"type", "diff"}, {"count", d.size()}, {"total", ma.flat_size()}, {"by_param", by_param}};
  if (a.indices) line["indices"] = d;
  emit(a.out, line.dump() + "\n");
  return 0;
}

// direction

struct DirectionArgs {
  std::string model, source = "harmful", prompts, out;
  std::optional<int> layer;
};

int cmd_direction(const Global& g, const DirectionArgs& a) {
  ExperimentConfig c = effective_config(g);
  if (a.layer) c.recovery.direction_layer = *a.layer;
  validate(c);
  DirectionSource src;
  try {
    src = direction_source_from_string(a.source);
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
  require_file(a.model, "checkpoint");
  const Model model = load_checkpoint(a.model);
  adopt_model(c, model);
  std::vector<PromptRecord> records;
  if (!a.prompts.empty()) {
    records = read_records(a.prompts);
  } else {
    const Corpus corpus = build_corpus(c);
    records = src == DirectionSource::kHarmful ? corpus.recovery_set : corpus.rollback_set;
  }
  const Direction d = extract_direction(model, prompts_of(records), c.recovery.layer_for(c.model), src);
  emit(a.out, to_json(d).dump() + "\n");
  return 0;
}

// corpus

struct CorpusArgs {
  std::string out_dir, split;
};

int cmd_corpus(const Global& g, const CorpusArgs& a) {
  ExperimentConfig c = effective_config(g);
  validate(c);
  if (!a.split.empty()) split_named(Corpus{}, a.split);
  const Corpus corpus = build_corpus(c);
  fs::create_directories(a.out_dir);
  for (const char* name : {"align_train", "task_train", "poison_pool", "recovery", "rollback", "eval_task", "eval_harmful"}) {
    if (!a.split.empty() && a.split != name) continue;
    write_records(fs::path(a.out_dir) / (std::string(name) + ".jsonl"), split_named(corpus, name));
  }
  return 0;
}

// experiment

struct ExperimentArgs {
  std::string out, save_dir;
  bool table = false;
};

int cmd_experiment(const Global& g, const ExperimentArgs& a) {
  ExperimentConfig c = effective_config(g);
  validate(c);
  ExperimentHooks hooks;
  if (!a.save_dir.empty()) {
    fs::create_directories(a.save_dir);
    const fs::path dir = a.save_dir;
    hooks.on_aligned = [dir](const Model& m) { save_checkpoint(m, dir / "aligned.ckpt"); };
    hooks.on_finetuned = [dir](int n, const Model& m) {
      save_checkpoint(m, dir / ("finetuned_" + std::to_string(n) + ".ckpt"));
    };
    hooks.on_recovered = [dir](int n, Scenario s, const Model& m, const RecoveryReport& r) {
      const std::string stem = "recovered_" + std::to_string(n) + "_" + to_string(s);
      save_checkpoint(m, dir / (stem + ".ckpt"));
      write_text(dir / (stem + ".jsonl"), to_json_lines(r));
    };
  }
  const ExperimentReport report = run_experiment(c, hooks);
  emit(a.out, to_json_lines(report));
  if (a.table) std::cerr << render_table(report);
  return report.errors.empty() ? 0 : kExitContract;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Alignment recovery on a toy decoder: train, poison, recover, inspect."};
  app.require_subcommand(1);
  Global g;
  app.add_option("--config", g.config_path, "JSON config overlay (unknown keys are rejected)");
  app.add_option("--seed", g.seed, "Corpus and model seed (falls back to the config file, then REALIGN_SEED)");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train an aligned model");
  t->add_option("--out", train.out, "Checkpoint to write")->required();
  t->add_option("--metrics", train.metrics, "Write the metrics line here instead of stdout");

  FinetuneArgs ft;
  auto* f = app.add_subcommand("finetune", "Fine-tune with poisoned harmful pairs");
  f->add_option("--in", ft.in, "Aligned checkpoint")->required();
  f->add_option("--out", ft.out, "Checkpoint to write")->required();
  f->add_option("--poison", ft.poison, "Number of harmful pairs mixed in")->default_val(0);
  f->add_flag("--pure-harmful", ft.pure_harmful, "Drop the benign task set");
  f->add_option("--epochs", ft.epochs, "Fine-tuning epochs");
  f->add_option("--lr", ft.lr, "Fine-tuning learning rate");
  f->add_option("--metrics", ft.metrics, "Write the metrics line here instead of stdout");

  RecoverArgs rec;
  auto* r = app.add_subcommand("recover", "Restore alignment by selective weight resets");
  r->add_option("--original", rec.original, "Aligned checkpoint")->required();
  r->add_option("--finetuned", rec.finetuned, "Fine-tuned checkpoint")->required();
  r->add_option("--out", rec.out, "Recovered checkpoint to write")->required();
  r->add_option("--report", rec.report, "Write the JSON-lines report here instead of stdout");
  r->add_option("--scenario", rec.scenario, "I (owner, no task access) or II (fine-tuner)");
  r->add_option("--p", rec.p, "Recovery rate, fraction of sign-filtered candidates (default 0.002)");
  r->add_option("--r", rec.r, "Rollback rate (default 0.20)");
  r->add_option("--epochs", rec.epochs, "Total recovery epochs (default 20)");
  r->add_option("--warmup", rec.warmup, "Warm-up epochs (default 5)");
  r->add_option("--fuse-threshold", rec.fuse_threshold, "Task drop in percentage points that trips the fuse (default 5)");
  r->add_option("--ldir", rec.ldir, "Direction layer (default ceil(2L/3))");

  SteerArgs st;
  auto* s = app.add_subcommand("steer", "Evaluate under a steering shift of the last hidden state");
  s->add_option("--model", st.model, "Checkpoint")->required();
  s->add_option("--alpha", st.alpha, "Aligned-direction coefficient")->default_val(1.0f);
  s->add_option("--beta", st.beta, "Harmful-direction coefficient")->default_val(1.0f);
  s->add_option("--layer", st.layer, "Steering layer (default ceil(2L/3))");
  s->add_option("--aligned-dir", st.aligned_dir, "Direction JSON (default: extracted from the model)");
  s->add_option("--harmful-dir", st.harmful_dir, "Direction JSON (default: extracted from the model)");
  s->add_option("--out", st.out, "Write the metrics line here instead of stdout");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Task performance and harmful rate, or exact match of a predictions file");
  e->add_option("--model", ev.model, "Checkpoint");
  e->add_option("--predictions", ev.predictions, "JSON lines: id arrays, or objects with prediction/answer");
  e->add_option("--gold", ev.gold, "Gold records (default: the eval_task split)");
  e->add_option("--out", ev.out, "Write the metrics line here instead of stdout");

  DiffArgs df;
  auto* d = app.add_subcommand("diff", "Flat indices whose values differ");
  d->add_option("a", df.a, "Checkpoint")->required();
  d->add_option("b", df.b, "Checkpoint")->required();
  d->add_flag("--indices", df.indices, "List every differing index");
  d->add_option("--out", df.out, "Write the line here instead of stdout");

  DirectionArgs dir;
  auto* dr = app.add_subcommand("direction", "Extract and export a direction");
  dr->add_option("--model", dir.model, "Checkpoint")->required();
  dr->add_option("--source", dir.source, "harmful or aligned")->default_val("harmful");
  dr->add_option("--layer", dir.layer, "Layer (default ceil(2L/3))");
  dr->add_option("--prompts", dir.prompts, "Prompt records (default: recovery or rollback split)");
  dr->add_option("--out", dir.out, "Write the JSON here instead of stdout");

  CorpusArgs co;
  auto* c = app.add_subcommand("corpus", "Write the corpus splits as JSON lines");
  c->add_option("--out-dir", co.out_dir, "Directory")->required();
  c->add_option("--split", co.split, "Only this split");

  ExperimentArgs ex;
  auto* x = app.add_subcommand("experiment", "Align, poison at every count, recover under both scenarios");
  x->add_option("--out", ex.out, "Write the report here instead of stdout");
  x->add_option("--save-dir", ex.save_dir, "Also save every checkpoint and recovery report");
  x->add_flag("--table", ex.table, "Print a text table to stderr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  }

  try {
    if (*t) return cmd_train(g, train);
    if (*f) return cmd_finetune(g, ft);
    if (*r) return cmd_recover(g, rec);
    if (*s) return cmd_steer(g, st);
    if (*e) return cmd_eval(g, ev);
    if (*d) return cmd_diff(df);
    if (*dr) return cmd_direction(g, dir);
    if (*c) return cmd_corpus(g, co);
    if (*x) return cmd_experiment(g, ex);
  } catch (const UsageError& err) {
    std::cerr << "usage: " << err.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& err) {
    std::cerr << "format: " << err.what() << '\n';
    return kExitFormat;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitContract;
  }
  return kExitUsage;
}
