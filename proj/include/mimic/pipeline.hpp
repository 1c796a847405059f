#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mimic/attack.hpp"
#include "mimic/checkpoint.hpp"
#include "mimic/config.hpp"
#include "mimic/contrastive.hpp"
#include "mimic/dataset.hpp"
#include "mimic/distill.hpp"
#include "mimic/eval.hpp"
#include "mimic/metrics.hpp"
#include "mimic/mine.hpp"

namespace mimic {

namespace fsutil {

inline uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot hash missing file " + path.string());
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(buf, size_t(in.gcount()), h);
  return h;
}

inline std::string hex16(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + tmp.string());
    out.write(content.data(), std::streamsize(content.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot read " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw IngestionError("corrupt JSON in " + path.string());
  return j;
}

}  // namespace fsutil

inline nlohmann::json trigger_to_json(const TriggerSpec& t) {
  const char* corner = t.corner == TriggerSpec::Corner::bottom_right  ? "bottom_right"
                       : t.corner == TriggerSpec::Corner::bottom_left ? "bottom_left"
                       : t.corner == TriggerSpec::Corner::top_right   ? "top_right"
                                                                      : "top_left";
  return {{"height", t.height},   {"width", t.width},           {"corner", corner},
          {"offset_x", t.offset_x}, {"offset_y", t.offset_y},
          {"color", {t.color[0], t.color[1], t.color[2]}},
          {"target_class", t.target_class}, {"reference_image_id", t.reference_image_id}};
}

inline TriggerSpec trigger_from_json(const nlohmann::json& j) {
  TriggerSpec t;
  t.height = j.value("height", 10);
  t.width = j.value("width", 10);
  std::string corner = j.value("corner", "bottom_right");
  t.corner = corner == "bottom_right"  ? TriggerSpec::Corner::bottom_right
             : corner == "bottom_left" ? TriggerSpec::Corner::bottom_left
             : corner == "top_right"   ? TriggerSpec::Corner::top_right
                                       : TriggerSpec::Corner::top_left;
  t.offset_x = j.value("offset_x", 1);
  t.offset_y = j.value("offset_y", 1);
  if (j.contains("color"))
    for (int i = 0; i < 3; ++i) t.color[i] = j.at("color")[i].get<float>();
  t.target_class = j.value("target_class", 0);
  t.reference_image_id = j.value("reference_image_id", int64_t(-1));
  return t;
}

struct StageResult {
  std::string name;
  std::filesystem::path dir;
  nlohmann::json manifest;
  bool cached = false;
};

/// Config-driven pipeline: pretrain -> attack -> localize -> distill -> eval,
/// plus the ft baseline. Stage directories are keyed by an identity hash of
/// the stage's config subset and its upstream output hashes, so sweep points
/// share unaffected stages automatically and caching stays sound.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg)
      : cfg_(std::move(cfg)), out_(cfg_.output_dir()) {}

  static const std::vector<std::string>& pipeline_stages() {
    static const std::vector<std::string> kStages = {"pretrain", "attack", "localize", "distill",
                                                     "eval"};
    return kStages;
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& output_dir() const { return out_; }

  std::vector<std::string> stage_deps(const std::string& name) const {
    if (name == "pretrain") return {};
    if (name == "attack") return {"pretrain"};
    if (name == "localize") return {"attack"};
    if (name == "distill") return {"attack", "localize"};
    if (name == "ft") return {"attack"};
    if (name == "eval") {
      std::vector<std::string> deps = {"pretrain", "attack", "distill"};
      if (manifest_exists("ft")) deps.push_back("ft");
      return deps;
    }
    throw ConfigError("unknown stage: " + name);
  }

  /// Stage-relevant slice of the experiment config; hashing it yields the
  /// config_hash recorded in the manifest.
  nlohmann::json stage_config_subset(const std::string& name) const {
    nlohmann::json s;
    s["global_seed"] = cfg_.seed();
    s["arch_id"] = cfg_.arch_id();
    s["feature_dim"] = cfg_.feature_dim();
    if (name == "pretrain") {
      s["dataset"] = cfg_.section("dataset");
      s["contrastive"] = cfg_.section("contrastive");
    } else if (name == "attack") {
      s["attack"] = cfg_.section("attack");
      if (cfg_.attack(0).mode == AttackMode::data_poison)
        s["contrastive"] = cfg_.section("contrastive");
    } else if (name == "localize") {
      s["mine"] = cfg_.section("mine");
      s["split"] = cfg_.section("split");
      s["alpha0"] = cfg_.alpha0();
      s["alpha1"] = cfg_.alpha1();
    } else if (name == "distill") {
      s["defense"] = cfg_.section("defense");
      s["split"] = cfg_.section("split");
    } else if (name == "ft") {
      s["ft"] = cfg_.section("ft");
      s["split"] = cfg_.section("split");
    } else if (name == "eval") {
      s["eval"] = cfg_.section("eval");
      s["split"] = cfg_.section("split");
    } else {
      throw ConfigError("unknown stage: " + name);
    }
    return s;
  }

  uint64_t stage_config_hash(const std::string& name) const {
    return fnv1a64(stage_config_subset(name).dump());
  }

  /// Identity = config subset + upstream outputs; requires upstream manifests.
  uint64_t stage_identity(const std::string& name) const {
    uint64_t h = stage_config_hash(name);
    for (const auto& dep : stage_deps(name)) {
      nlohmann::json m = read_manifest(dep);
      h = fnv1a64(m.at("outputs_hash").get<std::string>(), h);
    }
    return h;
  }

  std::filesystem::path stage_dir(const std::string& name) const {
    return out_ / "stages" / (name + "-" + fsutil::hex16(stage_identity(name)));
  }

  bool manifest_exists(const std::string& name) const {
    try {
      return std::filesystem::exists(stage_dir(name) / "manifest.json");
    } catch (const DependencyError&) {
      return false;
    }
  }

  nlohmann::json read_manifest(const std::string& name) const {
    std::filesystem::path dir = stage_dir(name);  // throws DependencyError upstream
    std::filesystem::path mf = dir / "manifest.json";
    if (!std::filesystem::exists(mf))
      throw DependencyError("missing upstream stage: " + name +
                            " (expected manifest at " + mf.string() + ")");
    return fsutil::read_json(mf);
  }

  /// Executes exactly one stage; reuses a cached result only when the config
  /// hash and every upstream output hash recorded in the manifest still match.
  StageResult run_stage(const std::string& name) {
    for (const auto& dep : stage_deps(name)) read_manifest(dep);  // dependency check first

    const std::filesystem::path dir = stage_dir(name);
    const std::string cfg_hash = fsutil::hex16(stage_config_hash(name));
    nlohmann::json inputs = nlohmann::json::object();
    for (const auto& dep : stage_deps(name))
      inputs[dep] = read_manifest(dep).at("outputs_hash").get<std::string>();

    if (std::filesystem::exists(dir / "manifest.json")) {
      nlohmann::json m = fsutil::read_json(dir / "manifest.json");
      bool ok = m.value("config_hash", "") == cfg_hash && m.value("inputs", nlohmann::json()) == inputs;
      if (ok) {
        for (auto it = m.at("outputs").begin(); ok && it != m.at("outputs").end(); ++it) {
          std::filesystem::path f = dir / it.key();
          ok = std::filesystem::exists(f) &&
               fsutil::hex16(fsutil::hash_file(f)) == it.value().get<std::string>();
        }
      }
      if (ok) return {name, dir, m, true};
    }

    // fresh compute: wipe any partial remains, run, then write the manifest last
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const uint64_t stage_seed = derive_seed(cfg_.seed(), "stage:" + name, stage_identity(name));
    if (name == "pretrain")
      exec_pretrain(dir, stage_seed);
    else if (name == "attack")
      exec_attack(dir, stage_seed);
    else if (name == "localize")
      exec_localize(dir, stage_seed);
    else if (name == "distill")
      exec_distill(dir, stage_seed);
    else if (name == "ft")
      exec_ft(dir, stage_seed);
    else if (name == "eval")
      exec_eval(dir, stage_seed);

    nlohmann::json outputs = nlohmann::json::object();
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    uint64_t combined = 0xcbf29ce484222325ULL;
    for (const auto& f : files) {
      std::string h = fsutil::hex16(fsutil::hash_file(f));
      outputs[f.filename().string()] = h;
      combined = fnv1a64(h, combined);
    }
    nlohmann::json manifest = {{"stage", name},
                               {"config_hash", cfg_hash},
                               {"inputs", inputs},
                               {"outputs", outputs},
                               {"outputs_hash", fsutil::hex16(combined)}};
    fsutil::atomic_write(dir / "manifest.json", manifest.dump(2));
    return {name, dir, manifest, false};
  }

  std::vector<StageResult> run_pipeline() {
    std::vector<StageResult> out;
    for (const auto& s : pipeline_stages()) out.push_back(run_stage(s));
    return out;
  }

  // -- sweeps ----------------------------------------------------------------

  static bool valid_knob(const std::string& knob) {
    return knob == "trigger_size" || knob == "gamma" || knob == "poison_ratio" ||
           knob == "lambda1" || knob == "lambda2";
  }

  static nlohmann::json apply_knob(nlohmann::json base, const std::string& knob, double value) {
    if (knob == "trigger_size") {
      base["attack"]["trigger"]["height"] = int(value);
      base["attack"]["trigger"]["width"] = int(value);
    } else if (knob == "gamma") {
      base["split"]["gamma"] = value;
    } else if (knob == "poison_ratio") {
      base["split"]["poison_ratio"] = value;
    } else if (knob == "lambda1") {
      base["defense"]["lambda1"] = value;
    } else if (knob == "lambda2") {
      base["defense"]["lambda2"] = value;
    } else {
      throw ConfigError("unknown sweep knob: " + knob);
    }
    return base;
  }

  /// Runs the pipeline per knob value, reusing shared upstream stages, and
  /// emits per-point JSON rows plus a consolidated CSV.
  nlohmann::json run_sweep(const std::string& knob, std::vector<double> values = {}) {
    if (!valid_knob(knob)) throw ConfigError("unknown sweep knob: " + knob);
    if (values.empty()) values = cfg_.sweep_values(knob);

    nlohmann::json rows = nlohmann::json::array();
    for (double v : values) {
      ExperimentConfig point_cfg = ExperimentConfig::from_json(apply_knob(cfg_.root(), knob, v));
      Experiment point(point_cfg);
      point.run_pipeline();
      nlohmann::json ev = fsutil::read_json(point.stage_dir("eval") / "eval.json");
      nlohmann::json row = {{"knob", knob}, {"value", v}};
      for (const auto& r : ev.at("rows")) {
        std::string tag = r.at("stage_tag").get<std::string>();
        if (tag == "mimic_student") {
          row["acc"] = r.at("acc");
          row["asr"] = r.at("asr");
        } else if (tag == "backdoored") {
          row["acc_undefended"] = r.at("acc");
          row["asr_undefended"] = r.at("asr");
        }
      }
      std::ostringstream vs;
      vs << v;
      fsutil::atomic_write(out_ / "sweeps" / knob / ("point_" + vs.str() + ".json"), row.dump(2));
      rows.push_back(std::move(row));
    }

    std::vector<std::string> csv = {knob + ",acc,asr,acc_undefended,asr_undefended"};
    for (const auto& r : rows) {
      std::ostringstream line;
      line << r.at("value").get<double>() << "," << r.value("acc", 0.0) << ","
           << r.value("asr", 0.0) << "," << r.value("acc_undefended", 0.0) << ","
           << r.value("asr_undefended", 0.0);
      csv.push_back(line.str());
    }
    std::string csv_text;
    for (const auto& l : csv) csv_text += l + "\n";
    fsutil::atomic_write(out_ / "sweeps" / (knob + ".csv"), csv_text);
    return {{"knob", knob}, {"rows", rows}};
  }

  // -- reporting ---------------------------------------------------------------

  /// Merges per-stage metric streams into the experiment-level stream and
  /// regenerates the figure CSVs/charts from completed stages.
  void write_report() {
    std::string merged;
    for (const std::string& name : {"pretrain", "attack", "localize", "distill", "ft", "eval"}) {
      if (!manifest_exists(name)) continue;
      std::filesystem::path mfile = stage_dir(name) / "metrics.jsonl";
      if (!std::filesystem::exists(mfile)) continue;
      std::ifstream in(mfile);
      merged.append(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    fsutil::atomic_write(out_ / "metrics.jsonl", merged);

    if (!manifest_exists("eval")) return;
    nlohmann::json ev = fsutil::read_json(stage_dir("eval") / "eval.json");
    std::vector<MetricsRecord> records;
    for (const auto& r : ev.at("rows")) {
      MetricsRecord rec;
      rec.stage_tag = r.at("stage_tag").get<std::string>();
      rec.acc = r.at("acc").get<double>();
      rec.asr = r.at("asr").get<double>();
      rec.target_class = r.at("target_class").get<int>();
      rec.probe_seed = r.at("probe_seed").get<uint64_t>();
      rec.n_eval = r.at("n_eval").get<int>();
      records.push_back(std::move(rec));
    }

    std::optional<MIProfilePair> profiles;
    if (manifest_exists("localize")) {
      nlohmann::json pj = fsutil::read_json(stage_dir("localize") / "potency.json");
      MIProfilePair pair;
      for (const auto& v : pj.at("profile_clean").at("values"))
        pair.clean.values.push_back(v.get<double>());
      for (const auto& v : pj.at("profile_triggered").at("values"))
        pair.triggered.values.push_back(v.get<double>());
      for (const auto& v : pj.at("beta")) pair.beta.push_back(v.get<double>());
      profiles = std::move(pair);
    }
    export_figures(out_ / "figures", records, profiles ? &*profiles : nullptr);
  }

  // -- data access (lazily computed, shared across stages) --------------------

  const Dataset& dataset() const {
    if (!data_) data_ = cfg_.load_data();
    return *data_;
  }

  const Splits& splits() const {
    if (!splits_) {
      SplitPlan plan = cfg_.split_plan(derive_seed(cfg_.seed(), "split"));
      TriggerSpec trig = cfg_.trigger();
      splits_ = make_splits(dataset(), plan,
                            [&](const ImageBatch& b) { return stamp_trigger(b, trig); });
    }
    return *splits_;
  }

 private:
  // -- stage bodies ------------------------------------------------------------

  void exec_pretrain(const std::filesystem::path& dir, uint64_t seed) {
    MetricsWriter metrics(dir / "metrics.jsonl");
    EncoderState enc = init_random(cfg_.arch_id(), derive_seed(seed, "enc-init"),
                                   cfg_.feature_dim());
    ContrastiveConfig cc = cfg_.contrastive(seed);
    PretrainResult res = pretrain(std::move(enc), splits().pretrain, cc, &metrics);
    save_checkpoint(dir / "checkpoint.ckpt", res.enc, "pretrain_clean");
  }

  void exec_attack(const std::filesystem::path& dir, uint64_t seed) {
    MetricsWriter metrics(dir / "metrics.jsonl");
    LoadedCheckpoint clean = load_checkpoint(stage_dir("pretrain") / "checkpoint.ckpt");
    AttackConfig ac = cfg_.attack(seed);

    EncoderState backdoored;
    nlohmann::json attack_meta;
    if (ac.mode == AttackMode::data_poison) {
      std::vector<int64_t> stamped_ids;
      ImageBatch poisoned =
          data_poison(dataset().train, ac.trigger, cfg_.data_poison_fraction(), &stamped_ids);
      ContrastiveConfig cc = cfg_.contrastive(derive_seed(seed, "poisoned-pretrain"));
      EncoderState enc0 =
          init_random(cfg_.arch_id(), derive_seed(seed, "enc-init"), cfg_.feature_dim());
      PretrainResult res = pretrain(std::move(enc0), poisoned.without_labels(), cc, &metrics);
      backdoored = std::move(res.enc);
      attack_meta["stamped_count"] = stamped_ids.size();
    } else {
      const int shadow_n = std::min(cfg_.attack_shadow_size(), dataset().train.count());
      std::vector<int> idx(shadow_n);
      std::iota(idx.begin(), idx.end(), 0);
      ImageBatch shadow = dataset().train.select(idx);
      AttackResult res = model_poison(clean.enc, shadow, ac, &metrics);
      backdoored = std::move(res.enc);
      attack_meta["utility_collapse"] = res.utility_collapse;
      ac.trigger.reference_image_id = res.reference_image_id;
    }

    // attack-validity gate, computed with the same probe settings eval uses
    double acc_clean = 0, acc_bd = 0, asr_bd = 0;
    {
      ProbeConfig pc = cfg_.probe(derive_seed(cfg_.seed(), "probe:pretrain_clean"));
      LinearProbe probe_c = train_probe(clean.enc, splits().down_train, pc);
      acc_clean = compute_acc(clean.enc, probe_c, splits().down_test);
      ProbeConfig pb = cfg_.probe(derive_seed(cfg_.seed(), "probe:backdoored"));
      LinearProbe probe_b = train_probe(backdoored, splits().down_train, pb);
      acc_bd = compute_acc(backdoored, probe_b, splits().down_test);
      asr_bd = compute_asr(backdoored, probe_b, splits().down_test, ac.trigger);
    }
    const bool valid = asr_bd >= 80.0 && (acc_clean - acc_bd) <= 5.0;
    attack_meta["mode"] = attack_mode_name(ac.mode);
    attack_meta["trigger"] = trigger_to_json(ac.trigger);
    attack_meta["trigger_hash"] = fsutil::hex16(ac.trigger.hash());
    attack_meta["target_class"] = ac.trigger.target_class;
    attack_meta["valid"] = valid;
    attack_meta["asr"] = asr_bd;
    attack_meta["acc"] = acc_bd;
    attack_meta["acc_clean"] = acc_clean;
    metrics.write({{"kind", "attack_validity"},
                   {"valid", valid},
                   {"asr", asr_bd},
                   {"acc", acc_bd},
                   {"acc_clean", acc_clean}});
    save_checkpoint(dir / "checkpoint.ckpt", backdoored, "backdoored",
                    {{"attack", attack_meta}});
  }

  void exec_localize(const std::filesystem::path& dir, uint64_t seed) {
    MetricsWriter metrics(dir / "metrics.jsonl");
    LoadedCheckpoint teacher = load_checkpoint(stage_dir("attack") / "checkpoint.ckpt");
    TriggerSpec trig = trigger_from_json(teacher.meta.at("attack").at("trigger"));

    LocalizeConfig lc = cfg_.localize(derive_seed(seed, "clean-profile"));
    MIProfile clean_profile = estimate_layer_mi(teacher.enc, splits().defender, lc);
    LocalizeConfig lt = cfg_.localize(derive_seed(seed, "triggered-profile"));
    MIProfile trig_profile =
        estimate_layer_mi(teacher.enc, stamp_trigger(splits().defender, trig), lt);

    PotencyWeights potency = schedule_weights(clean_profile, cfg_.alpha0(), cfg_.alpha1());
    int negative_beta = 0;
    for (double b : potency.beta)
      if (b < 0) ++negative_beta;

    for (size_t l = 0; l < clean_profile.values.size(); ++l) {
      metrics.write({{"kind", "mi_profile"}, {"variant", "clean"}, {"layer", l},
                     {"m", clean_profile.values[l]}, {"beta", potency.beta[l]}});
      metrics.write({{"kind", "mi_profile"}, {"variant", "triggered"}, {"layer", l},
                     {"m", trig_profile.values[l]}, {"beta", potency.beta[l]}});
    }
    if (negative_beta > 0)
      metrics.write({{"kind", "warning"}, {"code", "negative_beta"}, {"count", negative_beta}});

    nlohmann::json pj = {
        {"beta", potency.beta},
        {"alpha0", potency.alpha0},
        {"alpha1", potency.alpha1},
        {"negative_beta_count", negative_beta},
        {"profile_clean",
         {{"values", clean_profile.values}, {"sample_count", clean_profile.sample_count},
          {"estimator_seeds", clean_profile.estimator_seeds}}},
        {"profile_triggered",
         {{"values", trig_profile.values}, {"sample_count", trig_profile.sample_count},
          {"estimator_seeds", trig_profile.estimator_seeds}}}};
    fsutil::atomic_write(dir / "potency.json", pj.dump(2));
  }

  void exec_distill(const std::filesystem::path& dir, uint64_t seed) {
    MetricsWriter metrics(dir / "metrics.jsonl");
    LoadedCheckpoint teacher = load_checkpoint(stage_dir("attack") / "checkpoint.ckpt");
    if (!teacher.meta.at("attack").value("valid", false) &&
        !cfgdetail::boolean(cfg_.section("defense"), "allow_invalid_teacher", false))
      throw ContractError(
          "attack did not pass the validity gate (ASR >= 80, ACC drop <= 5); "
          "refusing to run the defense on a vacuous attack");

    nlohmann::json pj = fsutil::read_json(stage_dir("localize") / "potency.json");
    DefenseConfig dc = cfg_.defense(seed);
    dc.potency.alpha0 = pj.at("alpha0").get<double>();
    dc.potency.alpha1 = pj.at("alpha1").get<double>();
    for (const auto& b : pj.at("beta")) dc.potency.beta.push_back(b.get<double>());
    if (!cfg_.use_scheduler())
      for (auto& b : dc.potency.beta) b = dc.potency.alpha0;  // ablation: beta == alpha0

    EncoderState student = distill(teacher.enc, splits().defender, dc, &metrics);
    save_checkpoint(dir / "checkpoint.ckpt", student, "mimic_student",
                    {{"defense",
                      {{"lambda1", dc.lambda1}, {"lambda2", dc.lambda2},
                       {"use_l0", dc.use_l0}, {"use_l1", dc.use_l1},
                       {"use_scheduler", cfg_.use_scheduler()}}},
                     {"attack", teacher.meta.at("attack")}});
  }

  void exec_ft(const std::filesystem::path& dir, uint64_t seed) {
    MetricsWriter metrics(dir / "metrics.jsonl");
    LoadedCheckpoint teacher = load_checkpoint(stage_dir("attack") / "checkpoint.ckpt");
    EncoderState tuned = finetune_baseline(teacher.enc, splits().defender, cfg_.ft_epochs(),
                                           cfg_.ft_lr(), seed, 0.5, cfg_.ft_batch_pairs(),
                                           &metrics);
    save_checkpoint(dir / "checkpoint.ckpt", tuned, "ft_baseline",
                    {{"attack", teacher.meta.at("attack")}});
  }

  void exec_eval(const std::filesystem::path& dir, uint64_t /*seed*/) {
    MetricsWriter metrics(dir / "metrics.jsonl");
    LoadedCheckpoint bd = load_checkpoint(stage_dir("attack") / "checkpoint.ckpt");
    TriggerSpec trig = trigger_from_json(bd.meta.at("attack").at("trigger"));

    nlohmann::json rows = nlohmann::json::array();
    auto eval_one = [&](const EncoderState& enc, const std::string& tag) {
      uint64_t probe_seed = derive_seed(cfg_.seed(), "probe:" + tag);
      ProbeConfig pc = cfg_.probe(probe_seed);
      LinearProbe probe = train_probe(enc, splits().down_train, pc);
      MetricsRecord rec;
      rec.stage_tag = tag;
      rec.acc = compute_acc(enc, probe, splits().down_test);
      rec.asr = compute_asr(enc, probe, splits().down_test, trig);
      rec.target_class = trig.target_class;
      rec.probe_seed = probe_seed;
      rec.n_eval = splits().down_test.count();
      metrics.write(rec.to_json());
      rows.push_back({{"stage_tag", rec.stage_tag}, {"acc", rec.acc}, {"asr", rec.asr},
                      {"target_class", rec.target_class}, {"probe_seed", rec.probe_seed},
                      {"n_eval", rec.n_eval}});
    };

    LoadedCheckpoint clean = load_checkpoint(stage_dir("pretrain") / "checkpoint.ckpt");
    eval_one(clean.enc, "pretrain_clean");
    eval_one(bd.enc, "backdoored");
    LoadedCheckpoint student = load_checkpoint(stage_dir("distill") / "checkpoint.ckpt");
    eval_one(student.enc, "mimic_student");
    if (manifest_exists("ft")) {
      LoadedCheckpoint ft = load_checkpoint(stage_dir("ft") / "checkpoint.ckpt");
      eval_one(ft.enc, "ft_baseline");
    }
    fsutil::atomic_write(dir / "eval.json", nlohmann::json{{"rows", rows}}.dump(2));
  }

  ExperimentConfig cfg_;
  std::filesystem::path out_;
  mutable std::optional<Dataset> data_;
  mutable std::optional<Splits> splits_;
};

}  // namespace mimic
