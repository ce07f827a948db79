#include "sdelab/experiment.hpp"

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "sdelab/error.hpp"

namespace sdelab {

namespace {

using nlohmann::json;

void require_keys(const json& j, const std::vector<std::string>& keys,
                  const std::string& where) {
  for (const std::string& k : keys)
    if (!j.contains(k)) throw ConfigError(where + ": missing field '" + k + "'");
}

std::string format_17g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  json d;
  d["kind"] = defense_kind_name(cfg.defense.kind);
  d["lambda"] = cfg.defense.lambda;
  d["patience"] = cfg.defense.patience;
  d["clip"] = cfg.defense.clip;
  d["noise_multiplier"] = cfg.defense.noise_multiplier;
  d["target_epsilon"] = cfg.defense.target_epsilon;
  d["delta"] = cfg.defense.delta;
  return json{{"epochs", cfg.epochs},       {"batch_size", cfg.batch_size},
              {"lr", cfg.lr},               {"momentum", cfg.momentum},
              {"defense", std::move(d)},    {"seed", cfg.seed},
              {"eval_every", cfg.eval_every}};
}

TrainConfig train_config_from_json(const json& j) {
  require_keys(j, {"epochs", "batch_size", "lr"}, "train config");
  TrainConfig cfg;
  cfg.epochs = j.at("epochs").get<int>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.lr = j.at("lr").get<double>();
  cfg.momentum = j.value("momentum", 0.9);
  cfg.seed = j.value("seed", std::uint64_t{0});
  cfg.eval_every = j.value("eval_every", 1);
  if (j.contains("defense")) {
    const json& d = j.at("defense");
    cfg.defense.kind = defense_kind_from_name(d.at("kind").get<std::string>());
    cfg.defense.lambda = d.value("lambda", cfg.defense.lambda);
    cfg.defense.patience = d.value("patience", cfg.defense.patience);
    cfg.defense.clip = d.value("clip", cfg.defense.clip);
    cfg.defense.noise_multiplier = d.value("noise_multiplier", cfg.defense.noise_multiplier);
    cfg.defense.target_epsilon = d.value("target_epsilon", cfg.defense.target_epsilon);
    cfg.defense.delta = d.value("delta", cfg.defense.delta);
  }
  return cfg;
}

nlohmann::json privacy_options_to_json(const PrivacyOptions& p) {
  return json{{"method", accountant_method_name(p.method)},
              {"delta", p.delta},
              {"delta_prime", p.delta_prime},
              {"lipschitz", p.lipschitz},
              {"per_iteration", p.per_iteration}};
}

PrivacyOptions privacy_options_from_json(const json& j) {
  PrivacyOptions p;
  p.method = accountant_method_from_name(j.value("method", "rdp"));
  p.delta = j.value("delta", 1e-5);
  p.delta_prime = j.value("delta_prime", 1e-5);
  p.lipschitz = j.value("lipschitz", 0.0);
  p.per_iteration = j.value("per_iteration", false);
  return p;
}

nlohmann::json dataset_spec_to_json(const DatasetSpec& spec) {
  return json{{"kind", dataset_kind_name(spec.kind)},
              {"n_universe", spec.n_universe},
              {"n_test", spec.n_test},
              {"n_population", spec.n_population},
              {"noise", spec.noise},
              {"n_classes", spec.n_classes},
              {"seed", spec.seed},
              {"csv_path", spec.csv_path}};
}

DatasetSpec dataset_spec_from_json(const json& j) {
  require_keys(j, {"kind", "n_universe", "n_test", "n_population", "seed"}, "dataset");
  DatasetSpec spec;
  spec.kind = dataset_kind_from_name(j.at("kind").get<std::string>());
  spec.n_universe = j.at("n_universe").get<int>();
  spec.n_test = j.at("n_test").get<int>();
  spec.n_population = j.at("n_population").get<int>();
  spec.noise = j.value("noise", 0.2);
  spec.n_classes = j.value("n_classes", 2);
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.csv_path = j.value("csv_path", "");
  return spec;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  require_keys(j, {"name", "master_seed", "dataset", "models", "attacks"}, "experiment");
  ExperimentConfig cfg;
  cfg.name = j.at("name").get<std::string>();
  cfg.master_seed = j.at("master_seed").get<std::uint64_t>();
  cfg.dataset = dataset_spec_from_json(j.at("dataset"));
  cfg.n_models = j.value("n_models", 16);
  if (cfg.n_models < 2 || cfg.n_models % 2 != 0)
    throw ConfigError("experiment: n_models must be even and >= 2");
  if (j.contains("fpr_targets"))
    cfg.fpr_targets = j.at("fpr_targets").get<std::vector<double>>();
  for (const auto& a : j.at("attacks"))
    cfg.attacks.push_back(attack_from_name(a.get<std::string>()));
  if (!j.at("models").is_array() )
    throw ConfigError("experiment: models must be an array");

  for (const auto& mj : j.at("models")) {
    require_keys(mj, {"label", "train"}, "model entry");
    ModelEntry entry;
    entry.label = mj.at("label").get<std::string>();
    entry.train = train_config_from_json(mj.at("train"));
    entry.replace_finetune = mj.value("kind", "scratch") == "replace_finetune";
    if (entry.replace_finetune) {
      require_keys(mj, {"base", "nsde_solver"}, "replace_finetune entry");
      entry.base_label = mj.at("base").get<std::string>();
      entry.nsde_solver = solver_config_from_json(mj.at("nsde_solver").dump());
      if (mj.contains("nsde_drift")) {
        const json& dj = mj.at("nsde_drift");
        entry.nsde_drift.hidden = dj.at("hidden").get<std::vector<int>>();
        entry.nsde_drift.activation =
            activation_from_name(dj.at("activation").get<std::string>());
        entry.nsde_drift.time_conditioning = dj.at("time_conditioning").get<bool>();
      }
      entry.full_finetune = mj.value("full_finetune", false);
    } else {
      require_keys(mj, {"spec"}, "model entry");
      entry.spec = model_spec_from_json(mj.at("spec").dump());
    }
    if (mj.contains("privacy")) {
      entry.has_privacy = true;
      entry.privacy = privacy_options_from_json(mj.at("privacy"));
    }
    cfg.models.push_back(std::move(entry));
  }

  // Validate replace_finetune references up front.
  for (const ModelEntry& m : cfg.models) {
    if (!m.replace_finetune) continue;
    bool found = false;
    for (const ModelEntry& other : cfg.models)
      if (!other.replace_finetune && other.label == m.base_label) found = true;
    if (!found)
      throw ConfigError("experiment: replace_finetune base '" + m.base_label +
                        "' is not a scratch model entry");
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error: " + std::string(e.what()));
  }
  return from_json(j);
}

nlohmann::json ExperimentConfig::resolved_json() const {
  json models_j = json::array();
  for (const ModelEntry& m : models) {
    json mj;
    mj["label"] = m.label;
    mj["kind"] = m.replace_finetune ? "replace_finetune" : "scratch";
    if (m.replace_finetune) {
      mj["base"] = m.base_label;
      mj["nsde_solver"] = json::parse(solver_config_to_json(m.nsde_solver));
      mj["nsde_drift"] = {{"hidden", m.nsde_drift.hidden},
                          {"activation", activation_name(m.nsde_drift.activation)},
                          {"time_conditioning", m.nsde_drift.time_conditioning}};
      mj["full_finetune"] = m.full_finetune;
    } else {
      mj["spec"] = json::parse(model_spec_to_json(m.spec));
    }
    mj["train"] = train_config_to_json(m.train);
    if (m.has_privacy) mj["privacy"] = privacy_options_to_json(m.privacy);
    models_j.push_back(std::move(mj));
  }
  json attacks_j = json::array();
  for (AttackKind a : attacks) attacks_j.push_back(attack_name(a));
  return json{{"name", name},
              {"master_seed", master_seed},
              {"dataset", dataset_spec_to_json(dataset)},
              {"n_models", n_models},
              {"models", std::move(models_j)},
              {"attacks", std::move(attacks_j)},
              {"fpr_targets", fpr_targets}};
}

std::string config_hash(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
  return buf;
}

std::string roc_csv(const RocCurve& roc) {
  std::string out = "fpr,tpr\n";
  for (const auto& [fpr, tpr] : roc.points)
    out += format_17g(fpr) + "," + format_17g(tpr) + "\n";
  return out;
}

namespace {

json fold_to_json(const FoldMetrics& f) {
  json tpr;
  for (const auto& [t, v] : f.tpr_at) tpr[format_17g(t)] = v;
  return json{{"fold", f.fold},         {"auc", f.auc},
              {"tpr_at", std::move(tpr)}, {"accuracy", f.accuracy},
              {"n_scored", f.n_scored}, {"n_skipped", f.n_skipped}};
}

json cv_to_json(const CrossValidationResult& cv) {
  json folds = json::array();
  for (const FoldMetrics& f : cv.folds) folds.push_back(fold_to_json(f));
  json mean_tpr, sd_tpr;
  for (const auto& [t, v] : cv.mean_tpr_at) mean_tpr[format_17g(t)] = v;
  for (const auto& [t, v] : cv.sd_tpr_at) sd_tpr[format_17g(t)] = v;
  return json{{"folds", std::move(folds)},
              {"mean", {{"auc", cv.mean_auc}, {"accuracy", cv.mean_accuracy}, {"tpr_at", mean_tpr}}},
              {"sd", {{"auc", cv.sd_auc}, {"accuracy", cv.sd_accuracy}, {"tpr_at", sd_tpr}}}};
}

json curve_to_json(const std::vector<EpochStat>& curve) {
  json out = json::array();
  for (const EpochStat& e : curve)
    out.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"train_acc", e.train_acc},
                   {"test_loss", e.test_loss},
                   {"test_acc", e.test_acc},
                   {"epsilon", e.epsilon}});
  return out;
}

}  // namespace

nlohmann::json train_record_to_json(const TrainRecord& rec) {
  return json{{"curve", curve_to_json(rec.curve)},
              {"epochs_run", rec.epochs_run},
              {"early_stopped", rec.early_stopped},
              {"best_train_acc", rec.best_train_acc},
              {"matching_test_acc", rec.matching_test_acc},
              {"generalization_gap", rec.final_gap},
              {"epsilon_ledger", rec.epsilon_ledger},
              {"final_epsilon", rec.final_epsilon},
              {"delta_total", rec.delta_total},
              {"no_formal_guarantee", rec.no_formal_guarantee},
              {"lipschitz_declared", rec.lipschitz_declared},
              {"lipschitz_estimate_max", rec.lipschitz_estimate_max},
              {"wall_clock_sec", rec.wall_clock_sec}};
}

namespace {

struct ModelStageResult {
  EnsembleResult ensemble;
  json model_summary;  // shared fields embedded in each record
  double wall_clock = 0.0;
};

ModelStageResult run_model_stage(const ExperimentConfig& cfg, const ModelEntry& entry,
                                 const Dataset& data,
                                 const std::map<std::string, const EnsembleResult*>& bases) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelStageResult out;
  const std::uint64_t model_master =
      mix_seed(cfg.master_seed, std::hash<std::string>{}(entry.label));

  if (entry.replace_finetune) {
    const EnsembleResult* base = bases.at(entry.base_label);
    out.ensemble = finetune_shadow_ensemble(data, *base, base->spec, entry.nsde_drift,
                                            entry.nsde_solver, entry.full_finetune,
                                            entry.train, entry.privacy, model_master);
  } else {
    out.ensemble = train_shadow_ensemble(data, entry.spec, entry.train,
                                         entry.has_privacy ? &entry.privacy : nullptr,
                                         cfg.n_models, model_master);
  }

  json gaps = json::array(), train_accs = json::array(), test_accs = json::array();
  json seeds = json::array(), epsilons = json::array();
  double gap_mean = 0.0, train_mean = 0.0, test_mean = 0.0;
  bool no_guarantee = false;
  for (const EnsembleMember& m : out.ensemble.members) {
    gaps.push_back(m.record.final_gap);
    train_accs.push_back(m.record.best_train_acc);
    test_accs.push_back(m.record.matching_test_acc);
    seeds.push_back(m.seed);
    epsilons.push_back(m.record.final_epsilon);
    gap_mean += m.record.final_gap;
    train_mean += m.record.best_train_acc;
    test_mean += m.record.matching_test_acc;
    no_guarantee |= m.record.no_formal_guarantee;
  }
  const double n = static_cast<double>(out.ensemble.members.size());
  out.model_summary = {
      {"generalization_gap", {{"per_model", std::move(gaps)}, {"mean", gap_mean / n}}},
      {"train_acc", {{"per_model", std::move(train_accs)}, {"mean", train_mean / n}}},
      {"test_acc", {{"per_model", std::move(test_accs)}, {"mean", test_mean / n}}},
      {"seeds", std::move(seeds)},
      {"epsilon",
       {{"per_model_final", std::move(epsilons)},
        {"ledger_model0", out.ensemble.members.front().record.epsilon_ledger},
        {"delta_total", out.ensemble.members.front().record.delta_total},
        {"no_formal_guarantee", no_guarantee}}},
      {"curve_model0", curve_to_json(out.ensemble.members.front().record.curve)}};
  out.wall_clock =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace

std::string summary_markdown(const std::vector<json>& records) {
  std::string md;
  if (records.empty()) return "# Summary\n\n(no records)\n";
  md += "# " + records.front().value("experiment", std::string("experiment")) +
        " summary\n\n";
  md += "| Model | Attack | TPR @ 0.1% FPR | TPR @ 1% FPR | AUC | Inference acc. "
        "| Train acc. | Test acc. | Gap |\n";
  md += "|---|---|---|---|---|---|---|---|---|\n";
  char buf[64];
  auto pct = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * v);
    return std::string(buf);
  };
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return std::string(buf);
  };
  for (const json& r : records) {
    const json& mean = r.at("attack_metrics").at("mean");
    double tpr01 = 0.0, tpr1 = 0.0;
    if (mean.at("tpr_at").contains("0.001")) tpr01 = mean.at("tpr_at").at("0.001").get<double>();
    if (mean.at("tpr_at").contains("0.01")) tpr1 = mean.at("tpr_at").at("0.01").get<double>();
    md += "| " + r.at("model").get<std::string>() + " | " +
          r.at("attack").get<std::string>() + " | " + pct(tpr01) + " | " + pct(tpr1) +
          " | " + num(mean.at("auc").get<double>()) + " | " +
          pct(mean.at("accuracy").get<double>()) + " | " +
          pct(r.at("train_acc").at("mean").get<double>()) + " | " +
          pct(r.at("test_acc").at("mean").get<double>()) + " | " +
          pct(r.at("generalization_gap").at("mean").get<double>()) + " |\n";
  }
  return md;
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg,
                                 const std::string& output_dir) {
  namespace fs = std::filesystem;
  ExperimentOutcome outcome;
  const json resolved = cfg.resolved_json();

  Dataset data = generate_dataset(cfg.dataset);

  std::map<std::string, EnsembleResult> kept_ensembles;
  std::map<std::string, const EnsembleResult*> bases;

  // Scratch entries run before the finetune entries that reference them.
  std::vector<const ModelEntry*> order;
  for (const ModelEntry& m : cfg.models)
    if (!m.replace_finetune) order.push_back(&m);
  for (const ModelEntry& m : cfg.models)
    if (m.replace_finetune) order.push_back(&m);

  json timings = json::object();
  std::map<std::string, std::vector<std::pair<std::string, RocCurve>>> roc_files;

  for (const ModelEntry* entry : order) {
    try {
      ModelStageResult stage = run_model_stage(cfg, *entry, data, bases);
      timings[entry->label] = stage.wall_clock;

      for (AttackKind attack : cfg.attacks) {
        CrossValidationOptions opts;
        opts.fpr_targets = cfg.fpr_targets;
        CrossValidationResult cv = cross_validate(stage.ensemble.plan,
                                                  stage.ensemble.universe,
                                                  stage.ensemble.population, attack, opts);
        json record;
        record["experiment"] = cfg.name;
        record["master_seed"] = cfg.master_seed;
        record["model"] = entry->label;
        record["attack"] = attack_name(attack);
        record["resolved_config"] = resolved;
        record["hashes"] = {
            {"config", config_hash(resolved)},
            {"spec", config_hash(json::parse(model_spec_to_json(stage.ensemble.spec)))},
            {"train", config_hash(train_config_to_json(entry->train))},
            {"privacy", entry->has_privacy
                            ? config_hash(privacy_options_to_json(entry->privacy))
                            : std::string("none")}};
        record["attack_metrics"] = cv_to_json(cv);
        for (auto& [k, v] : stage.model_summary.items()) record[k] = v;
        outcome.records.push_back(std::move(record));

        for (std::size_t fold = 0; fold < cv.fold_scores.size(); ++fold) {
          RocCurve roc = roc_metrics(cv.fold_scores[fold], cfg.fpr_targets);
          roc_files[entry->label].emplace_back(
              std::string(attack_name(attack)) + "_fold" + std::to_string(fold),
              std::move(roc));
        }
      }
      if (!entry->replace_finetune) {
        auto [it, inserted] =
            kept_ensembles.emplace(entry->label, std::move(stage.ensemble));
        bases[entry->label] = &it->second;
      }
    } catch (const std::exception& e) {
      outcome.failures.push_back({entry->label, e.what()});
    }
  }
  outcome.timings = std::move(timings);

  if (!output_dir.empty()) {
    fs::create_directories(fs::path(output_dir) / "roc");
    std::ofstream records_out(fs::path(output_dir) / "records.jsonl");
    for (const json& r : outcome.records) records_out << r.dump() << "\n";
    records_out.close();

    for (const auto& [model, curves] : roc_files)
      for (const auto& [tag, roc] : curves) {
        std::ofstream csv(fs::path(output_dir) / "roc" / (model + "_" + tag + ".csv"));
        csv << roc_csv(roc);
      }

    std::ofstream summary(fs::path(output_dir) / "summary.md");
    summary << summary_markdown(outcome.records);

    std::ofstream timing_out(fs::path(output_dir) / "timings.json");
    timing_out << outcome.timings.dump(2) << "\n";

    if (!outcome.failures.empty()) {
      json fj = json::array();
      for (const ExperimentFailure& f : outcome.failures)
        fj.push_back({{"model", f.model}, {"error", f.error}});
      std::ofstream failures_out(fs::path(output_dir) / "failures.json");
      failures_out << fj.dump(2) << "\n";
    }
  }
  return outcome;
}

}  // namespace sdelab
