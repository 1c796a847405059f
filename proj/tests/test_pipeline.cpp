#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "mimic/pipeline.hpp"

using namespace mimic;

namespace {

namespace fs = std::filesystem;

// Tiny but complete experiment: fast enough for contract tests while still
// exercising every stage body.
nlohmann::json tiny_config(const fs::path& out, uint64_t seed = 4001) {
  return {
      {"seed", seed},
      {"output_dir", out.string()},
      {"arch_id", "conv4_tiny"},
      {"feature_dim", 32},
      {"dataset",
       {{"kind", "synthetic"}, {"seed", 21}, {"n", 120}, {"classes", 4}, {"image_size", 16},
        {"n_test", 80}}},
      {"split", {{"gamma", 0.2}, {"poison_ratio", 0.0}}},
      {"contrastive",
       {{"temperature", 0.5}, {"batch_pairs", 24}, {"epochs", 2}, {"learning_rate", 0.05}}},
      {"attack",
       {{"mode", "model_poison"}, {"epochs", 2}, {"learning_rate", 0.01}, {"utility_weight", 1.0},
        {"shadow_size", 48}, {"batch", 24},
        {"trigger", {{"height", 4}, {"width", 4}, {"target_class", 0}}}}},
      {"mine", {{"steps", 60}, {"width", 32}, {"batch", 32}}},
      {"defense",
       {{"lambda1", 1.0}, {"lambda2", 100.0}, {"epochs", 2}, {"learning_rate", 0.02},
        {"batch", 24}, {"allow_invalid_teacher", true}}},
      {"ft", {{"epochs", 1}, {"learning_rate", 0.01}, {"batch_pairs", 12}}},
      {"eval", {{"probe_steps", 120}}},
      {"sweeps", {{"lambda2", {0.0, 100.0}}, {"gamma", {0.1, 0.2}}}},
  };
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("config: validation catches schema violations") {
  auto out = fresh_dir("mimic_cfg_test");
  nlohmann::json base = tiny_config(out);
  CHECK_NOTHROW(ExperimentConfig::from_json(base));

  nlohmann::json bad = base;
  bad["defense"]["lambda3"] = 1.0;
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);

  bad = base;
  bad["split"]["gamma"] = 0.0;
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);

  bad = base;
  bad["attack"]["adaptive_weight"] = 0.5;  // without mode=adaptive
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);

  bad = base;
  bad.erase("seed");
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);

  bad = base;
  bad["dataset"]["kind"] = "imagenet";
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
}

TEST_CASE("config: serialization round-trips losslessly and overrides work") {
  auto out = fresh_dir("mimic_cfg_rt");
  ExperimentConfig cfg = ExperimentConfig::from_json(tiny_config(out));
  std::string dumped = cfg.canonical();
  ExperimentConfig again = ExperimentConfig::from_json(nlohmann::json::parse(dumped));
  CHECK(again.canonical() == dumped);

  ExperimentConfig patched = cfg;
  patched.set_path("defense.lambda2", "500");
  CHECK(patched.root().at("defense").at("lambda2").get<double>() == 500.0);
  patched.set_path("attack.trigger.height", "6");
  CHECK(patched.root().at("attack").at("trigger").at("height").get<int>() == 6);
  CHECK_THROWS_AS(patched.set_path("defense.bogus_key", "1"), ConfigError);
}

TEST_CASE("stage seeds derive deterministically from global seed and stage identity") {
  uint64_t a = derive_seed(1, "stage:pretrain", 42);
  uint64_t b = derive_seed(1, "stage:pretrain", 42);
  uint64_t c = derive_seed(1, "stage:attack", 42);
  uint64_t d = derive_seed(2, "stage:pretrain", 42);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a != d);
}

TEST_CASE("pipeline: dependency errors name the missing stage") {
  auto out = fresh_dir("mimic_dep_test");
  Experiment ex(ExperimentConfig::from_json(tiny_config(out)));
  try {
    ex.run_stage("localize");
    FAIL("expected DependencyError");
  } catch (const DependencyError& e) {
    CHECK(std::string(e.what()).find("pretrain") != std::string::npos);
  }
  CHECK_THROWS_AS(ex.run_stage("nonsense"), ConfigError);
}

TEST_CASE("pipeline: five manifests in topological order, idempotent reruns") {
  auto out = fresh_dir("mimic_pipe_test");
  Experiment ex(ExperimentConfig::from_json(tiny_config(out)));
  std::vector<StageResult> results = ex.run_pipeline();
  REQUIRE(results.size() == 5);
  const char* expect[] = {"pretrain", "attack", "localize", "distill", "eval"};
  for (int i = 0; i < 5; ++i) {
    CHECK(results[i].name == expect[i]);
    CHECK(fs::exists(results[i].dir / "manifest.json"));
    CHECK_FALSE(results[i].cached);
  }

  // rerun: everything cached, identical output hashes
  std::vector<StageResult> again = ex.run_pipeline();
  for (int i = 0; i < 5; ++i) {
    CHECK(again[i].cached);
    CHECK(again[i].manifest.at("outputs_hash") == results[i].manifest.at("outputs_hash"));
  }
}

TEST_CASE("pipeline: cache is invalidated by config changes and file corruption") {
  auto out = fresh_dir("mimic_cache_test");
  nlohmann::json base = tiny_config(out);
  Experiment ex(ExperimentConfig::from_json(base));
  ex.run_pipeline();

  // a defense-only change must not invalidate pretrain/attack/localize
  nlohmann::json tweaked = base;
  tweaked["defense"]["lambda2"] = 55.0;
  Experiment ex2(ExperimentConfig::from_json(tweaked));
  CHECK(ex2.run_stage("pretrain").cached);
  CHECK(ex2.run_stage("attack").cached);
  CHECK(ex2.run_stage("localize").cached);
  CHECK_FALSE(ex2.run_stage("distill").cached);

  // corrupting an output forces recompute
  Experiment ex3(ExperimentConfig::from_json(base));
  fs::path ckpt = ex3.stage_dir("pretrain") / "checkpoint.ckpt";
  {
    std::ofstream f(ckpt, std::ios::binary | std::ios::app);
    f << "garbage";
  }
  StageResult r = ex3.run_stage("pretrain");
  CHECK_FALSE(r.cached);
  // and the recompute restores the identical artifact
  CHECK(r.manifest.at("outputs_hash") ==
        Experiment(ExperimentConfig::from_json(base)).run_stage("pretrain").manifest.at("outputs_hash"));
}

TEST_CASE("pipeline: eval rows cover all encoders and recomputation is exact") {
  auto out = fresh_dir("mimic_eval_test");
  Experiment ex(ExperimentConfig::from_json(tiny_config(out)));
  ex.run_pipeline();
  ex.run_stage("ft");

  // ft arrival changes eval identity; rerun eval to include the baseline row
  StageResult ev = ex.run_stage("eval");
  nlohmann::json rows = fsutil::read_json(ev.dir / "eval.json").at("rows");
  std::vector<std::string> tags;
  for (const auto& r : rows) tags.push_back(r.at("stage_tag").get<std::string>());
  CHECK(tags == std::vector<std::string>{"pretrain_clean", "backdoored", "mimic_student",
                                         "ft_baseline"});

  // metric idempotence: wipe the eval dir, recompute, byte-identical eval.json
  std::string before;
  {
    std::ifstream f(ev.dir / "eval.json");
    before.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  fs::remove_all(ev.dir);
  StageResult ev2 = ex.run_stage("eval");
  std::string after;
  {
    std::ifstream f(ev2.dir / "eval.json");
    after.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  CHECK(before == after);
}

TEST_CASE("sweep: unknown knob rejected; lambda2 sweep shares upstream stages") {
  auto out = fresh_dir("mimic_sweep_test");
  Experiment ex(ExperimentConfig::from_json(tiny_config(out)));
  CHECK_THROWS_AS(ex.run_sweep("trigger_shape", {1.0}), ConfigError);

  nlohmann::json report = ex.run_sweep("lambda2");
  REQUIRE(report.at("rows").size() == 2);
  CHECK(fs::exists(out / "sweeps" / "lambda2.csv"));
  CHECK(fs::exists(out / "sweeps" / "lambda2" / "point_0.json"));
  CHECK(fs::exists(out / "sweeps" / "lambda2" / "point_100.json"));

  // the two points share pretrain/attack/localize directories
  int pretrain_dirs = 0;
  for (const auto& e : fs::directory_iterator(out / "stages"))
    if (e.path().filename().string().rfind("pretrain-", 0) == 0) ++pretrain_dirs;
  CHECK(pretrain_dirs == 1);
  int distill_dirs = 0;
  for (const auto& e : fs::directory_iterator(out / "stages"))
    if (e.path().filename().string().rfind("distill-", 0) == 0) ++distill_dirs;
  CHECK(distill_dirs == 2);
}

TEST_CASE("sweep: interrupted run resumes without corrupting completed rows") {
  auto out = fresh_dir("mimic_resume_test");
  Experiment ex(ExperimentConfig::from_json(tiny_config(out)));
  ex.run_sweep("gamma");
  std::string row_before;
  {
    std::ifstream f(out / "sweeps" / "gamma" / "point_0.1.json");
    row_before.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  // simulate a crash that lost the consolidated CSV but kept the rows
  fs::remove(out / "sweeps" / "gamma.csv");
  ex.run_sweep("gamma");
  CHECK(fs::exists(out / "sweeps" / "gamma.csv"));
  std::string row_after;
  {
    std::ifstream f(out / "sweeps" / "gamma" / "point_0.1.json");
    row_after.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  CHECK(row_before == row_after);
}

TEST_CASE("report: merges metrics and writes figure CSVs") {
  auto out = fresh_dir("mimic_report_test");
  Experiment ex(ExperimentConfig::from_json(tiny_config(out)));
  ex.run_pipeline();
  ex.write_report();
  CHECK(fs::exists(out / "metrics.jsonl"));
  CHECK(fs::exists(out / "figures" / "stage_metrics.csv"));
  CHECK(fs::exists(out / "figures" / "mi_profile.csv"));
  auto lines = read_metrics(out / "metrics.jsonl");
  bool has_loss = false, has_metrics = false, has_profile = false;
  for (const auto& j : lines) {
    std::string kind = j.value("kind", "");
    has_loss |= kind == "loss";
    has_metrics |= kind == "metrics";
    has_profile |= kind == "mi_profile";
  }
  CHECK(has_loss);
  CHECK(has_metrics);
  CHECK(has_profile);
}

TEST_CASE("pipeline: bit-exact reproducibility across fresh work dirs") {
  auto out1 = fresh_dir("mimic_repro_a");
  auto out2 = fresh_dir("mimic_repro_b");
  nlohmann::json cfg1 = tiny_config(out1, 7777);
  nlohmann::json cfg2 = tiny_config(out2, 7777);
  std::vector<StageResult> r1 = Experiment(ExperimentConfig::from_json(cfg1)).run_pipeline();
  std::vector<StageResult> r2 = Experiment(ExperimentConfig::from_json(cfg2)).run_pipeline();
  for (size_t i = 0; i < r1.size(); ++i)
    CHECK(r1[i].manifest.at("outputs_hash") == r2[i].manifest.at("outputs_hash"));
}
