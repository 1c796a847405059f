#pragma once

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "mimic/attack.hpp"
#include "mimic/augment.hpp"
#include "mimic/common.hpp"
#include "mimic/contrastive.hpp"
#include "mimic/dataset.hpp"
#include "mimic/distill.hpp"
#include "mimic/eval.hpp"
#include "mimic/mine.hpp"

namespace mimic {

namespace cfgdetail {

using nlohmann::json;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

inline void check_keys(const json& obj, const std::string& where,
                       const std::set<std::string>& allowed) {
  require(obj.is_object(), where + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    require(allowed.count(it.key()) > 0, "unknown key '" + it.key() + "' in " + where);
}

inline double num(const json& obj, const std::string& key, double dflt) {
  if (!obj.contains(key)) return dflt;
  require(obj.at(key).is_number(), key + " must be a number");
  return obj.at(key).get<double>();
}

inline int integer(const json& obj, const std::string& key, int dflt) {
  if (!obj.contains(key)) return dflt;
  require(obj.at(key).is_number_integer(), key + " must be an integer");
  return obj.at(key).get<int>();
}

inline bool boolean(const json& obj, const std::string& key, bool dflt) {
  if (!obj.contains(key)) return dflt;
  require(obj.at(key).is_boolean(), key + " must be a boolean");
  return obj.at(key).get<bool>();
}

inline std::string str(const json& obj, const std::string& key, const std::string& dflt) {
  if (!obj.contains(key)) return dflt;
  require(obj.at(key).is_string(), key + " must be a string");
  return obj.at(key).get<std::string>();
}

}  // namespace cfgdetail

/// One structured document that drives the whole experiment. The parsed JSON
/// is the source of truth (lossless round-trips); typed accessors materialize
/// the per-module configs.
class ExperimentConfig {
 public:
  static ExperimentConfig from_json(nlohmann::json j) {
    ExperimentConfig c;
    c.j_ = std::move(j);
    c.validate();
    return c;
  }

  static ExperimentConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open config " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config is not valid JSON: " + path.string());
    return from_json(std::move(j));
  }

  const nlohmann::json& root() const { return j_; }
  std::string canonical() const { return j_.dump(2); }

  /// Dotted-path override, e.g. set_path("defense.lambda2", "500").
  void set_path(const std::string& dotted, const std::string& value) {
    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;  // bare strings allowed
    nlohmann::json* cur = &j_;
    size_t pos = 0;
    while (true) {
      size_t dot = dotted.find('.', pos);
      std::string key = dotted.substr(pos, dot == std::string::npos ? dot : dot - pos);
      if (key.empty()) throw ConfigError("bad override path: " + dotted);
      if (dot == std::string::npos) {
        (*cur)[key] = parsed;
        break;
      }
      cur = &(*cur)[key];
      pos = dot + 1;
    }
    validate();
  }

  void validate() const {
    using namespace cfgdetail;
    check_keys(j_, "config",
               {"seed", "output_dir", "arch_id", "feature_dim", "dataset", "split", "contrastive",
                "attack", "mine", "defense", "ft", "eval", "sweeps"});
    require(j_.contains("seed") && j_.at("seed").is_number_integer(), "seed (integer) is required");
    require(j_.contains("output_dir") && j_.at("output_dir").is_string(),
            "output_dir (string) is required");
    arch_spec(str(j_, "arch_id", "conv4"));
    require(integer(j_, "feature_dim", 128) >= 1, "feature_dim must be positive");

    require(j_.contains("dataset"), "dataset section is required");
    const auto& ds = j_.at("dataset");
    check_keys(ds, "dataset", {"kind", "path", "seed", "n", "classes", "image_size", "n_test"});
    std::string kind = str(ds, "kind", "");
    require(kind == "synthetic" || kind == "cifar10", "dataset.kind must be synthetic|cifar10");
    if (kind == "synthetic") {
      require(integer(ds, "n", 0) >= 1, "dataset.n must be >= 1");
      int classes = integer(ds, "classes", 10);
      require(classes >= 2 && classes <= 10, "dataset.classes must be in [2,10]");
    } else {
      require(!str(ds, "path", "").empty(), "dataset.path is required for cifar10");
    }

    const auto sp = j_.value("split", nlohmann::json::object());
    check_keys(sp, "split", {"gamma", "poison_ratio", "class_balanced"});
    double gamma = num(sp, "gamma", 0.04);
    require(gamma > 0 && gamma <= 1, "split.gamma must be in (0,1]");
    double pr = num(sp, "poison_ratio", 0.0);
    require(pr >= 0 && pr < 1, "split.poison_ratio must be in [0,1)");

    const auto ct = j_.value("contrastive", nlohmann::json::object());
    check_keys(ct, "contrastive",
               {"temperature", "batch_pairs", "epochs", "learning_rate", "weight_decay",
                "momentum"});
    require(num(ct, "temperature", 0.5) > 0, "contrastive.temperature must be positive");
    require(integer(ct, "epochs", 0) >= 0, "contrastive.epochs must be >= 0");
    require(integer(ct, "batch_pairs", 128) >= 1, "contrastive.batch_pairs must be >= 1");

    const auto at = j_.value("attack", nlohmann::json::object());
    check_keys(at, "attack",
               {"mode", "epochs", "learning_rate", "momentum", "utility_weight",
                "adaptive_weight", "adaptive_refresh_epochs", "adaptive_mine_steps",
                "shadow_size", "batch", "data_poison_fraction", "trigger"});
    std::string mode = str(at, "mode", "model_poison");
    attack_mode_from(mode);
    require(num(at, "utility_weight", 2.0) >= 0, "attack.utility_weight must be >= 0");
    double aw = num(at, "adaptive_weight", 0.0);
    require(aw == 0 || mode == "adaptive", "attack.adaptive_weight > 0 requires mode=adaptive");
    double dpf = num(at, "data_poison_fraction", 0.5);
    require(dpf > 0 && dpf <= 1, "attack.data_poison_fraction must be in (0,1]");
    const auto tr = at.value("trigger", nlohmann::json::object());
    check_keys(tr, "attack.trigger",
               {"height", "width", "corner", "offset_x", "offset_y", "color", "target_class"});
    require(integer(tr, "height", 10) >= 1 && integer(tr, "width", 10) >= 1,
            "trigger size must be positive");
    if (tr.contains("color")) {
      require(tr.at("color").is_array() && tr.at("color").size() == 3,
              "trigger.color must be [r,g,b]");
      for (const auto& v : tr.at("color"))
        require(v.is_number() && v.get<double>() >= 0 && v.get<double>() <= 1,
                "trigger.color values must be in [0,1]");
    }
    std::string corner = str(tr, "corner", "bottom_right");
    require(corner == "bottom_right" || corner == "bottom_left" || corner == "top_right" ||
                corner == "top_left",
            "unknown trigger.corner: " + corner);

    const auto mn = j_.value("mine", nlohmann::json::object());
    check_keys(mn, "mine", {"steps", "width", "learning_rate", "ema_rate", "batch", "target"});
    double ema = num(mn, "ema_rate", 0.99);
    require(ema > 0 && ema < 1, "mine.ema_rate must be in (0,1)");
    std::string target = str(mn, "target", "projected");
    require(target == "projected" || target == "preprojector",
            "mine.target must be projected|preprojector");

    const auto df = j_.value("defense", nlohmann::json::object());
    check_keys(df, "defense",
               {"lambda1", "lambda2", "p", "temperature", "epochs", "learning_rate", "momentum",
                "weight_decay", "batch", "alpha0", "alpha1", "use_l0", "use_l1", "use_scheduler",
                "clone_projected", "allow_invalid_teacher", "optimizer"});
    require(num(df, "lambda1", 1.0) >= 0 && num(df, "lambda2", 2000.0) >= 0,
            "defense lambdas must be >= 0");
    require(integer(df, "p", 2) >= 1, "defense.p must be >= 1");
    require(num(df, "temperature", 0.5) > 0, "defense.temperature must be positive");
    require(num(df, "alpha1", 0.5) >= 0, "defense.alpha1 must be >= 0");

    const auto ft = j_.value("ft", nlohmann::json::object());
    check_keys(ft, "ft", {"epochs", "learning_rate", "batch_pairs"});

    const auto ev = j_.value("eval", nlohmann::json::object());
    check_keys(ev, "eval", {"probe_steps", "probe_lr", "probe_weight_decay"});
    require(integer(ev, "probe_steps", 500) >= 1, "eval.probe_steps must be >= 1");

    const auto sw = j_.value("sweeps", nlohmann::json::object());
    check_keys(sw, "sweeps", {"trigger_size", "gamma", "poison_ratio", "lambda1", "lambda2"});
    for (auto it = sw.begin(); it != sw.end(); ++it) {
      require(it.value().is_array(), "sweeps." + it.key() + " must be an array");
      for (const auto& v : it.value())
        require(v.is_number(), "sweeps." + it.key() + " entries must be numbers");
    }
  }

  // -- typed accessors -------------------------------------------------------

  uint64_t seed() const { return j_.at("seed").get<uint64_t>(); }
  std::string output_dir() const { return j_.at("output_dir").get<std::string>(); }
  std::string arch_id() const { return cfgdetail::str(j_, "arch_id", "conv4"); }
  int feature_dim() const { return cfgdetail::integer(j_, "feature_dim", 128); }

  nlohmann::json section(const std::string& name) const {
    return j_.value(name, nlohmann::json::object());
  }

  Dataset load_data() const {
    const auto ds = j_.at("dataset");
    std::string kind = ds.at("kind").get<std::string>();
    if (kind == "cifar10") return load_cifar10(ds.at("path").get<std::string>());
    SyntheticSpec spec;
    spec.seed = uint64_t(cfgdetail::integer(ds, "seed", 1));
    spec.n = cfgdetail::integer(ds, "n", 1000);
    spec.classes = cfgdetail::integer(ds, "classes", 10);
    spec.image_size = cfgdetail::integer(ds, "image_size", 32);
    spec.n_test = cfgdetail::integer(ds, "n_test", 1000);
    return generate_synthetic(spec);
  }

  SplitPlan split_plan(uint64_t derived_seed) const {
    const auto sp = section("split");
    SplitPlan plan;
    plan.clean_ratio = cfgdetail::num(sp, "gamma", 0.04);
    plan.poison_ratio = cfgdetail::num(sp, "poison_ratio", 0.0);
    plan.class_balanced = cfgdetail::boolean(sp, "class_balanced", false);
    plan.seed = derived_seed;
    return plan;
  }

  ContrastiveConfig contrastive(uint64_t stage_seed) const {
    const auto ct = section("contrastive");
    ContrastiveConfig c;
    c.temperature = cfgdetail::num(ct, "temperature", 0.5);
    c.batch_pairs = cfgdetail::integer(ct, "batch_pairs", 128);
    c.epochs = cfgdetail::integer(ct, "epochs", 50);
    c.learning_rate = cfgdetail::num(ct, "learning_rate", 0.12);
    c.weight_decay = cfgdetail::num(ct, "weight_decay", 1e-4);
    c.momentum = cfgdetail::num(ct, "momentum", 0.9);
    c.seed = stage_seed;
    return c;
  }

  TriggerSpec trigger() const {
    const auto tr = section("attack").value("trigger", nlohmann::json::object());
    TriggerSpec t;
    t.height = cfgdetail::integer(tr, "height", 10);
    t.width = cfgdetail::integer(tr, "width", 10);
    t.offset_x = cfgdetail::integer(tr, "offset_x", 1);
    t.offset_y = cfgdetail::integer(tr, "offset_y", 1);
    std::string corner = cfgdetail::str(tr, "corner", "bottom_right");
    t.corner = corner == "bottom_right"  ? TriggerSpec::Corner::bottom_right
               : corner == "bottom_left" ? TriggerSpec::Corner::bottom_left
               : corner == "top_right"   ? TriggerSpec::Corner::top_right
                                         : TriggerSpec::Corner::top_left;
    if (tr.contains("color"))
      for (int i = 0; i < 3; ++i) t.color[i] = tr.at("color")[i].get<float>();
    t.target_class = cfgdetail::integer(tr, "target_class", 0);
    return t;
  }

  AttackConfig attack(uint64_t stage_seed) const {
    const auto at = section("attack");
    AttackConfig a;
    a.mode = attack_mode_from(cfgdetail::str(at, "mode", "model_poison"));
    a.trigger = trigger();
    a.epochs = cfgdetail::integer(at, "epochs", 12);
    a.learning_rate = cfgdetail::num(at, "learning_rate", 0.01);
    a.momentum = cfgdetail::num(at, "momentum", 0.9);
    a.utility_weight = cfgdetail::num(at, "utility_weight", 2.0);
    a.adaptive_weight = cfgdetail::num(at, "adaptive_weight", 0.0);
    a.adaptive_refresh_epochs = cfgdetail::integer(at, "adaptive_refresh_epochs", 2);
    a.adaptive_mine.steps = cfgdetail::integer(at, "adaptive_mine_steps", 400);
    a.batch = cfgdetail::integer(at, "batch", 64);
    a.seed = stage_seed;
    return a;
  }

  int attack_shadow_size() const {
    return cfgdetail::integer(section("attack"), "shadow_size", 1000);
  }
  double data_poison_fraction() const {
    return cfgdetail::num(section("attack"), "data_poison_fraction", 0.5);
  }

  LocalizeConfig localize(uint64_t stage_seed) const {
    const auto mn = section("mine");
    LocalizeConfig c;
    c.mine.steps = cfgdetail::integer(mn, "steps", 2000);
    c.mine.width = cfgdetail::integer(mn, "width", 128);
    c.mine.learning_rate = cfgdetail::num(mn, "learning_rate", 5e-4);
    c.mine.ema_rate = cfgdetail::num(mn, "ema_rate", 0.99);
    c.mine.batch = cfgdetail::integer(mn, "batch", 128);
    c.mine.seed = stage_seed;
    c.use_projected = cfgdetail::str(mn, "target", "projected") == "projected";
    return c;
  }

  double alpha0() const { return cfgdetail::num(section("defense"), "alpha0", 1.0); }
  double alpha1() const { return cfgdetail::num(section("defense"), "alpha1", 0.5); }
  bool use_scheduler() const { return cfgdetail::boolean(section("defense"), "use_scheduler", true); }

  DefenseConfig defense(uint64_t stage_seed) const {
    const auto df = section("defense");
    DefenseConfig d;
    d.lambda1 = cfgdetail::num(df, "lambda1", 1.0);
    d.lambda2 = cfgdetail::num(df, "lambda2", 2000.0);
    d.p = cfgdetail::integer(df, "p", 2);
    d.temperature = cfgdetail::num(df, "temperature", 0.5);
    d.epochs = cfgdetail::integer(df, "epochs", 120);
    d.learning_rate = cfgdetail::num(df, "learning_rate", 1e-3);
    d.optimizer = cfgdetail::str(df, "optimizer", "adam");
    d.momentum = cfgdetail::num(df, "momentum", 0.9);
    d.weight_decay = cfgdetail::num(df, "weight_decay", 1e-4);
    d.batch = cfgdetail::integer(df, "batch", 64);
    d.use_l0 = cfgdetail::boolean(df, "use_l0", true);
    d.use_l1 = cfgdetail::boolean(df, "use_l1", true);
    d.clone_projected = cfgdetail::boolean(df, "clone_projected", false);
    d.seed = stage_seed;
    return d;
  }

  int ft_epochs() const { return cfgdetail::integer(section("ft"), "epochs", 60); }
  double ft_lr() const { return cfgdetail::num(section("ft"), "learning_rate", 0.02); }
  int ft_batch_pairs() const { return cfgdetail::integer(section("ft"), "batch_pairs", 64); }

  ProbeConfig probe(uint64_t probe_seed) const {
    const auto ev = section("eval");
    ProbeConfig p;
    p.steps = cfgdetail::integer(ev, "probe_steps", 500);
    p.learning_rate = cfgdetail::num(ev, "probe_lr", 1.0);
    p.weight_decay = cfgdetail::num(ev, "probe_weight_decay", 1e-4);
    p.seed = probe_seed;
    return p;
  }

  std::vector<double> sweep_values(const std::string& knob) const {
    const auto sw = section("sweeps");
    if (!sw.contains(knob)) throw ConfigError("no sweep grid configured for knob " + knob);
    std::vector<double> out;
    for (const auto& v : sw.at(knob)) out.push_back(v.get<double>());
    return out;
  }

 private:
  nlohmann::json j_;
};

}  // namespace mimic
