#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "realign/harness.hpp"

using namespace realign;

namespace {

ExperimentConfig small_experiment() {
  ExperimentConfig c;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.d_ff = 32;
  c.align_task = 60;
  c.align_harmful = 20;
  c.task_train = 20;
  c.poison_counts = {0, 4};
  c.recovery_size = 8;
  c.rollback_size = 8;
  c.eval_task = 10;
  c.eval_harmful = 10;
  c.align.max_epochs = 1;
  c.align_min_task = 0;
  c.align_max_harmful = 100;
  c.recovery.epochs = 2;
  c.recovery.warmup = 1;
  c.recovery.recovery_rate = 0.05;
  return c;
}

/// A model whose greedy output is always `token`.
Model constant_model(int token) {
  Model m(ModelConfig{});
  m.param("head.w").matrix().setZero();
  m.param("head.b").matrix().setZero();
  m.param("head.b").matrix()(0, token) = 50.0f;
  return m;
}

std::set<Tokens> prompt_set(const std::vector<PromptRecord>& rs) {
  std::set<Tokens> s;
  for (const auto& r : rs) s.insert(r.prompt);
  return s;
}

}  // namespace

TEST_CASE("successor map") {
  CHECK(successor(16, 64) == 17);
  CHECK(successor(63, 64) == 16);
  CHECK_THROWS_AS(successor(4, 64), ContractError);
  CHECK_THROWS_AS(successor(64, 64), ContractError);
  PromptRecord h{{vocab::kBos, vocab::kFirstCategory, 20, 63, vocab::kSep}, {vocab::kRefuse}, "harmful:cat_1"};
  CHECK(compliant_answer(h, 64) == Tokens{21, 16, vocab::kEos});
}

TEST_CASE("corpus layout") {
  ExperimentConfig c;
  const Corpus corpus = build_corpus(c);
  CHECK(corpus.align_train.size() == static_cast<std::size_t>(c.align_task + c.align_harmful));
  CHECK(corpus.poison_pool.size() == 96);
  CHECK(corpus.recovery_set.size() == 64);
  CHECK(corpus.rollback_set.size() == 64);

  std::size_t harmful_in_align = 0;
  auto check_record = [&](const PromptRecord& r) {
    CHECK(r.prompt.front() == vocab::kBos);
    CHECK(r.prompt.back() == vocab::kSep);
    if (r.harmful()) {
      CHECK(r.answer == Tokens{vocab::kRefuse});
      const int cat = r.prompt[1] - vocab::kFirstCategory;
      CHECK(cat >= 0);
      CHECK(cat < c.categories);
      CHECK(r.label == "harmful:cat_" + std::to_string(cat + 1));
    } else {
      CHECK(r.label == "benign-task");
      CHECK(r.prompt[1] == vocab::kTask);
      CHECK(std::find(r.answer.begin(), r.answer.end(), vocab::kRefuse) == r.answer.end());
      Tokens want;
      for (std::size_t i = 2; i + 1 < r.prompt.size(); ++i) want.push_back(successor(r.prompt[i], 64));
      want.push_back(vocab::kEos);
      CHECK(r.answer == want);
    }
  };
  for (const auto& r : corpus.align_train) {
    check_record(r);
    harmful_in_align += r.harmful() ? 1 : 0;
  }
  CHECK(harmful_in_align == static_cast<std::size_t>(c.align_harmful));
  for (const auto* split : {&corpus.task_train, &corpus.rollback_set, &corpus.eval_task}) {
    for (const auto& r : *split) {
      CHECK_FALSE(r.harmful());
      check_record(r);
    }
  }
  for (const auto* split : {&corpus.poison_pool, &corpus.recovery_set, &corpus.eval_harmful}) {
    for (const auto& r : *split) {
      CHECK(r.harmful());
      check_record(r);
    }
  }
}

TEST_CASE("corpus splits are disjoint") {
  const Corpus corpus = build_corpus(ExperimentConfig{});
  const std::vector<const std::vector<PromptRecord>*> splits = {
      &corpus.align_train, &corpus.task_train, &corpus.poison_pool, &corpus.recovery_set,
      &corpus.rollback_set, &corpus.eval_task,  &corpus.eval_harmful};
  std::set<Tokens> all;
  std::size_t total = 0;
  for (const auto* s : splits) {
    const auto ps = prompt_set(*s);
    all.insert(ps.begin(), ps.end());
    total += s->size();
  }
  CHECK(all.size() == total);
  const auto rec = prompt_set(corpus.recovery_set), pool = prompt_set(corpus.poison_pool),
             eval = prompt_set(corpus.eval_harmful);
  for (const auto& p : rec) {
    CHECK(pool.count(p) == 0);
    CHECK(eval.count(p) == 0);
  }
  for (const auto& p : pool) CHECK(eval.count(p) == 0);
}

TEST_CASE("corpus is a function of the seed") {
  ExperimentConfig c;
  const Corpus a = build_corpus(c), b = build_corpus(c);
  CHECK(a.align_train == b.align_train);
  CHECK(a.eval_harmful == b.eval_harmful);
  CHECK(a.rollback_set == b.rollback_set);
  c.seed = 8;
  CHECK_FALSE(build_corpus(c).align_train == a.align_train);
}

TEST_CASE("corpus capacity") {
  ExperimentConfig c;
  c.model.vocab_size = 20;  // four content tokens
  c.payload_max = 2;
  CHECK_THROWS_AS(build_corpus(c), ContractError);
  c = ExperimentConfig{};
  c.payload_max = 20;
  CHECK_THROWS_AS(build_corpus(c), ContractError);
}

TEST_CASE("harmful rate on constant models") {
  const Corpus corpus = build_corpus(ExperimentConfig{});
  CHECK(harmful_rate(constant_model(vocab::kRefuse), corpus.eval_harmful) == 0.0);
  CHECK(harmful_rate(constant_model(20), corpus.eval_harmful) == 100.0);
  CHECK(task_performance(constant_model(vocab::kRefuse), corpus.eval_task) == 0.0);
  CHECK_THROWS_AS(harmful_rate(constant_model(20), std::span<const PromptRecord>{}), ContractError);
}

TEST_CASE("exact match") {
  const Corpus corpus = build_corpus(ExperimentConfig{});
  std::vector<Tokens> gold;
  for (const auto& r : corpus.eval_task) gold.push_back(r.answer);
  CHECK(exact_match(gold, corpus.eval_task) == 100.0);
  gold[0].push_back(vocab::kEos);
  gold[1] = {};
  CHECK(exact_match(gold, corpus.eval_task) == 98.0);
  gold.pop_back();
  CHECK_THROWS_AS(exact_match(gold, corpus.eval_task), DimensionError);
  CHECK_THROWS_AS(exact_match(std::vector<Tokens>{}, std::span<const PromptRecord>{}), ContractError);
}

TEST_CASE("task performance ignores evaluation order") {
  ExperimentConfig c = small_experiment();
  const Corpus corpus = build_corpus(c);
  Model m(c.model);
  Rng rng(3);
  std::vector<Example> data;
  for (const auto& r : corpus.align_train) data.push_back(as_example(r));
  sgd_epochs(m, data, 2, 0.1f, 8, rng);
  auto shuffled = corpus.eval_task;
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(task_performance(m, shuffled) == task_performance(m, corpus.eval_task));
  CHECK(task_performance(Model(c.model), corpus.eval_task) <= 10.0);
}

TEST_CASE("alignment budget exhaustion carries metrics") {
  ExperimentConfig c = small_experiment();
  c.align_min_task = 99.5;
  const Corpus corpus = build_corpus(c);
  Metrics seen;
  try {
    align_train(c, corpus, &seen);
    FAIL("expected a harness error");
  } catch (const HarnessError& e) {
    CHECK(e.metrics.task_performance == seen.task_performance);
    CHECK(e.metrics.harmful_rate == seen.harmful_rate);
    CHECK(std::string(e.what()).find("budget") != std::string::npos);
  }
}

TEST_CASE("alignment is deterministic") {
  ExperimentConfig c = small_experiment();
  const Corpus corpus = build_corpus(c);
  Metrics a, b;
  Model ma = align_train(c, corpus, &a), mb = align_train(c, corpus, &b);
  CHECK(serialize(ma) == serialize(mb));
  CHECK(a.task_performance == b.task_performance);
  CHECK(a.harmful_rate == b.harmful_rate);
}

TEST_CASE("poison fine-tuning") {
  ExperimentConfig c = small_experiment();
  const Corpus corpus = build_corpus(c);
  Model base(c.model);
  Model same = poison_finetune(base, {}, corpus.poison_pool, 0, 1, 0.01f, 4, 1);
  CHECK(weight_diff(same, base).empty());
  CHECK_THROWS_AS(poison_finetune(base, corpus.task_train, corpus.poison_pool, 5, 1, 0.01f, 4, 1), ContractError);

  // Poison pairs are trained toward the compliant answer, not REFUSE.
  const PromptRecord& p = corpus.poison_pool[0];
  const Example compliant{p.prompt, compliant_answer(p, c.model.vocab_size)};
  Model tuned = poison_finetune(base, {}, corpus.poison_pool, 1, 3, 0.05f, 4, 1);
  CHECK(example_loss(tuned, compliant) < example_loss(base, compliant));
  Model again = poison_finetune(base, {}, corpus.poison_pool, 1, 3, 0.05f, 4, 1);
  CHECK(serialize(again) == serialize(tuned));
}

TEST_CASE("experiment config json") {
  ExperimentConfig c = experiment_config_from_json(
      nlohmann::json::parse(R"({"seed": 3, "model": {"d_model": 32}, "recovery": {"p": 0.01}, "poison_counts": [1, 2]})"));
  CHECK(c.seed == 3);
  CHECK(c.model.d_model == 32);
  CHECK(c.model.n_layers == 6);
  CHECK(c.recovery.recovery_rate == 0.01);
  CHECK(c.recovery.epochs == 20);
  CHECK(c.poison_counts == std::vector<int>{1, 2});
  CHECK(to_json(experiment_config_from_json(to_json(c))) == to_json(c));
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"sed": 3})")), FormatError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"model": {"depth": 3}})")), FormatError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"recovery": {"x": 3}})")), FormatError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"seed": "seven"})")), FormatError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse("[]")), FormatError);
}

TEST_CASE("experiment config validation") {
  ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  c.categories = 11;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = ExperimentConfig{};
  c.poison_counts = {-1};
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = ExperimentConfig{};
  c.recovery.direction_layer = 9;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = ExperimentConfig{};
  c.payload_max = 15;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("record files") {
  const Corpus corpus = build_corpus(small_experiment());
  const auto path = std::filesystem::temp_directory_path() / "realign_test_records.jsonl";
  write_records(path, corpus.eval_harmful);
  CHECK(read_records(path) == corpus.eval_harmful);
  {
    std::ofstream os(path);
    os << R"({"prompt":[1,2],"answer":[4],"label":"mystery"})" << '\n';
  }
  CHECK_THROWS_AS(read_records(path), FormatError);
  {
    std::ofstream os(path);
    os << "{not json\n";
  }
  CHECK_THROWS_AS(read_records(path), FormatError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_records(path), FormatError);
}

TEST_CASE("small experiment produces one row per setting and scenario") {
  ExperimentConfig c = small_experiment();
  int finetuned = 0, recovered = 0;
  ExperimentHooks hooks;
  hooks.on_finetuned = [&](int, const Model&) { ++finetuned; };
  hooks.on_recovered = [&](int, Scenario, const Model&, const RecoveryReport&) { ++recovered; };
  ExperimentReport r = run_experiment(c, hooks);
  CHECK(r.errors.empty());
  REQUIRE(r.rows.size() == 4);
  CHECK(finetuned == 2);
  CHECK(recovered == 4);
  CHECK(r.similarity.size() == 2);
  for (const auto& row : r.rows) {
    for (double v : {row.harmful_finetuned, row.harmful_recovered, row.task_finetuned, row.task_recovered}) {
      CHECK(v >= 0.0);
      CHECK(v <= 100.0);
    }
    if (row.scenario == Scenario::kI) CHECK(row.branch == Branch::kRollbackFree);
    if (row.scenario == Scenario::kII) CHECK(row.task_drop <= c.recovery.fuse_threshold);
  }
  CHECK(r.rows[0].scenario == Scenario::kI);
  CHECK(r.rows[1].scenario == Scenario::kII);
  std::istringstream lines(to_json_lines(r));
  std::string line;
  std::size_t n_rows = 0;
  while (std::getline(lines, line)) n_rows += nlohmann::json::parse(line).at("type") == "row" ? 1 : 0;
  CHECK(n_rows == 4);
  CHECK(render_table(r).find("branch") != std::string::npos);
}

TEST_CASE("a failed alignment is reported, not thrown") {
  ExperimentConfig c = small_experiment();
  c.align_min_task = 99.5;
  ExperimentReport r = run_experiment(c);
  CHECK(r.rows.empty());
  REQUIRE(r.errors.size() == 1);
  CHECK(to_json_lines(r).find("\"error\"") != std::string::npos);
}
