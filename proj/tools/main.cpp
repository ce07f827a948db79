// sdelab command-line interface. Exit codes: 0 success, 2 configuration
// error, 3 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sdelab/dataset.hpp"
#include "sdelab/ensemble.hpp"
#include "sdelab/error.hpp"
#include "sdelab/experiment.hpp"
#include "sdelab/privacy.hpp"
#include "sdelab/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sdelab;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open file: " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::string& path, const std::string& content) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write file: " + path);
  out << content;
}

json parse_json_file(const std::string& path) {
  try {
    return json::parse(slurp(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// --- ensemble outputs (plan + tables) on disk -------------------------------

json table_to_json(const OutputTable& t) {
  json rows = json::array();
  for (const auto& model_row : t.rows) {
    json row = json::array();
    for (const ModelQuery& q : model_row)
      row.push_back({{"loss", q.loss},
                     {"confidences", q.confidences},
                     {"p_true", q.p_true},
                     {"logit_true", q.logit_true}});
    rows.push_back(std::move(row));
  }
  return json{{"labels", t.labels}, {"rows", std::move(rows)}};
}

OutputTable table_from_json(const json& j) {
  OutputTable t;
  t.labels = j.at("labels").get<std::vector<int>>();
  for (const auto& row : j.at("rows")) {
    std::vector<ModelQuery> model_row;
    for (const auto& qj : row) {
      ModelQuery q;
      q.loss = qj.at("loss").get<double>();
      q.confidences = qj.at("confidences").get<std::vector<double>>();
      q.p_true = qj.at("p_true").get<double>();
      q.logit_true = qj.at("logit_true").get<double>();
      model_row.push_back(std::move(q));
    }
    t.rows.push_back(std::move(model_row));
  }
  return t;
}

json plan_to_json(const ShadowSplitPlan& plan) {
  json rows = json::array();
  for (const auto& row : plan.membership) {
    json r = json::array();
    for (bool b : row) r.push_back(b);
    rows.push_back(std::move(r));
  }
  return json{{"n_models", plan.n_models}, {"seed", plan.seed},
              {"membership", std::move(rows)}};
}

ShadowSplitPlan plan_from_json(const json& j) {
  ShadowSplitPlan plan;
  plan.n_models = j.at("n_models").get<int>();
  plan.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& row : j.at("membership")) {
    std::vector<bool> r;
    for (const auto& b : row) r.push_back(b.get<bool>());
    plan.membership.push_back(std::move(r));
  }
  return plan;
}

// --- subcommand payloads -----------------------------------------------------

struct GenDataArgs {
  std::string kind = "two_moons";
  int n_universe = 256, n_test = 512, n_population = 256, n_classes = 2;
  double noise = 0.2;
  std::uint64_t seed = 0;
  std::string csv_path, out;
};

int cmd_gen_data(const GenDataArgs& a) {
  DatasetSpec spec;
  spec.kind = dataset_kind_from_name(a.kind);
  spec.n_universe = a.n_universe;
  spec.n_test = a.n_test;
  spec.n_population = a.n_population;
  spec.n_classes = a.n_classes;
  spec.noise = a.noise;
  spec.seed = a.seed;
  spec.csv_path = a.csv_path;
  spit(a.out, dataset_to_json(generate_dataset(spec)) + "\n");
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, spec, train, privacy, checkpoint_in;
  std::string out_checkpoint, out_record;
  std::string defense;  // defend subcommand override
  double lambda = -1.0;
  int patience = -1;
};

int cmd_train(const TrainArgs& a, bool is_defend) {
  const Dataset data = dataset_from_json(slurp(a.data));
  TrainConfig cfg = train_config_from_json(parse_json_file(a.train));
  if (!a.defense.empty()) {
    cfg.defense.kind = defense_kind_from_name(a.defense);
    if (a.lambda >= 0.0) cfg.defense.lambda = a.lambda;
    if (a.patience >= 1) cfg.defense.patience = a.patience;
  }
  if (is_defend && cfg.defense.kind == DefenseKind::none)
    throw ConfigError("defend: pick a defense (l1, l2, early_stop, dp_sgd)");

  ModelSpec spec;
  Parameters params;
  if (!a.checkpoint_in.empty()) {
    checkpoint_from_json(slurp(a.checkpoint_in), spec, params);
  } else {
    spec = model_spec_from_json(slurp(a.spec));
    params = build_model(spec);
  }

  const Tensor x_train = data.gather(data.universe_idx);
  const std::vector<int> y_train = data.gather_labels(data.universe_idx);
  const Tensor x_test = data.gather(data.test_idx);
  const std::vector<int> y_test = data.gather_labels(data.test_idx);

  TrainResult result =
      a.privacy.empty()
          ? train(spec, std::move(params), x_train, y_train, x_test, y_test, cfg)
          : train_nsde_private(spec, std::move(params), x_train, y_train, x_test,
                               y_test, cfg,
                               privacy_options_from_json(parse_json_file(a.privacy)));

  spit(a.out_checkpoint, checkpoint_to_json(spec, result.params));
  json rec = train_record_to_json(result.record);
  rec["resolved_train_config"] = train_config_to_json(cfg);
  if (!a.privacy.empty())
    rec["resolved_privacy"] =
        privacy_options_to_json(privacy_options_from_json(parse_json_file(a.privacy)));
  spit(a.out_record, rec.dump(2) + "\n");
  std::cout << "trained " << result.record.epochs_run << " epochs; gap "
            << result.record.final_gap << "; wrote " << a.out_checkpoint << "\n";
  return 0;
}

struct EnsembleArgs {
  std::string data, spec, train, privacy;
  int n_models = 16;
  std::uint64_t master_seed = 0;
  std::string out_dir;
};

int cmd_train_ensemble(const EnsembleArgs& a) {
  const Dataset data = dataset_from_json(slurp(a.data));
  const ModelSpec spec = model_spec_from_json(slurp(a.spec));
  const TrainConfig cfg = train_config_from_json(parse_json_file(a.train));
  PrivacyOptions privacy;
  const bool has_privacy = !a.privacy.empty();
  if (has_privacy) privacy = privacy_options_from_json(parse_json_file(a.privacy));

  EnsembleResult ens = train_shadow_ensemble(data, spec, cfg,
                                             has_privacy ? &privacy : nullptr,
                                             a.n_models, a.master_seed);

  fs::create_directories(a.out_dir);
  json records = json::array();
  for (std::size_t m = 0; m < ens.members.size(); ++m) {
    ModelSpec mspec = spec;
    mspec.seed = ens.members[m].seed;
    spit(a.out_dir + "/model_" + std::to_string(m) + ".json",
         checkpoint_to_json(mspec, ens.members[m].params));
    records.push_back(train_record_to_json(ens.members[m].record));
  }
  json outputs;
  outputs["plan"] = plan_to_json(ens.plan);
  outputs["universe"] = table_to_json(ens.universe);
  outputs["population"] = table_to_json(ens.population);
  outputs["spec"] = json::parse(model_spec_to_json(spec));
  spit(a.out_dir + "/outputs.json", outputs.dump() + "\n");
  spit(a.out_dir + "/train_records.json", records.dump(2) + "\n");
  std::cout << "trained " << ens.members.size() << " models into " << a.out_dir << "\n";
  return 0;
}

struct AttackArgs {
  std::string outputs, attack = "lira", out, roc_dir;
  double gamma = 1.0;
  bool global_variance = false;
};

int cmd_attack(const AttackArgs& a) {
  const json oj = parse_json_file(a.outputs);
  const ShadowSplitPlan plan = plan_from_json(oj.at("plan"));
  const OutputTable universe = table_from_json(oj.at("universe"));
  const OutputTable population = table_from_json(oj.at("population"));

  CrossValidationOptions opts;
  opts.rmia_gamma = a.gamma;
  opts.lira.global_variance = a.global_variance;
  const AttackKind kind = attack_from_name(a.attack);
  CrossValidationResult cv = cross_validate(plan, universe, population, kind, opts);

  json folds = json::array();
  for (const FoldMetrics& f : cv.folds) {
    json tpr;
    for (const auto& [t, v] : f.tpr_at) tpr[std::to_string(t)] = v;
    folds.push_back({{"attack", a.attack},
                     {"fold", f.fold},
                     {"auc", f.auc},
                     {"tpr_at", {{"0.001", f.tpr_at.count(0.001) ? f.tpr_at.at(0.001) : 0.0},
                                 {"0.01", f.tpr_at.count(0.01) ? f.tpr_at.at(0.01) : 0.0}}},
                     {"accuracy", f.accuracy},
                     {"n_scored", f.n_scored},
                     {"n_skipped", f.n_skipped}});
  }
  json out = {{"attack", a.attack},
              {"folds", std::move(folds)},
              {"mean", {{"auc", cv.mean_auc},
                        {"accuracy", cv.mean_accuracy},
                        {"tpr_at", {{"0.001", cv.mean_tpr_at.count(0.001) ? cv.mean_tpr_at.at(0.001) : 0.0},
                                    {"0.01", cv.mean_tpr_at.count(0.01) ? cv.mean_tpr_at.at(0.01) : 0.0}}}}},
              {"sd", {{"auc", cv.sd_auc}, {"accuracy", cv.sd_accuracy}}}};
  spit(a.out, out.dump(2) + "\n");

  if (!a.roc_dir.empty()) {
    fs::create_directories(a.roc_dir);
    for (std::size_t fold = 0; fold < cv.fold_scores.size(); ++fold)
      spit(a.roc_dir + "/" + a.attack + "_fold" + std::to_string(fold) + ".csv",
           roc_csv(roc_metrics(cv.fold_scores[fold])));
  }
  std::cout << a.attack << ": mean auc " << cv.mean_auc << ", mean tpr@1% "
            << (cv.mean_tpr_at.count(0.01) ? cv.mean_tpr_at.at(0.01) : 0.0) << "\n";
  return 0;
}

struct CalibrateArgs {
  std::string mode = "gaussian";
  double sensitivity = 1.0, epsilon = 0.5, delta = 1e-5;
  double time_horizon = 1.0, lipschitz = 1.0;
  double epsilon_prime = 8.0, delta_prime = 1e-5;
  int iterations = 1;
};

int cmd_calibrate(const CalibrateArgs& a) {
  json out;
  if (a.mode == "gaussian") {
    out = {{"mode", "gaussian"},
           {"sigma", calibrate_sigma_gaussian(a.sensitivity, a.epsilon, a.delta)},
           {"params", {{"sensitivity", a.sensitivity}, {"epsilon", a.epsilon},
                       {"delta", a.delta}}}};
  } else if (a.mode == "sde") {
    out = {{"mode", "sde"},
           {"sigma", calibrate_sigma_sde(a.time_horizon, a.lipschitz, a.epsilon, a.delta)},
           {"params", {{"time", a.time_horizon}, {"lipschitz", a.lipschitz},
                       {"epsilon", a.epsilon}, {"delta", a.delta}}}};
  } else if (a.mode == "training") {
    const TrainingCalibration c = calibrate_sigma_training(
        a.iterations, a.time_horizon, a.lipschitz, a.epsilon_prime, a.delta, a.delta_prime);
    out = {{"mode", "training"},
           {"sigma", c.sigma},
           {"delta_total", c.delta_total},
           {"vacuous", c.vacuous},
           {"params", {{"iterations", a.iterations}, {"time", a.time_horizon},
                       {"lipschitz", a.lipschitz}, {"epsilon_prime", a.epsilon_prime},
                       {"delta", a.delta}, {"delta_prime", a.delta_prime}}}};
  } else {
    throw ConfigError("calibrate: mode must be gaussian, sde, or training");
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

struct AccountArgs {
  std::string method = "rdp";
  int steps = 1;
  double sigma_rel = 0.0;
  double stochasticity = -1.0, time_horizon = 1.0, lipschitz = 1.0;
  int steps_per_unit = 16;
  double delta = 1e-5, delta_prime = 1e-5;
};

int cmd_account(const AccountArgs& a) {
  double sigma_rel = a.sigma_rel;
  json params = {{"steps", a.steps}, {"delta", a.delta}, {"delta_prime", a.delta_prime}};
  if (a.stochasticity >= 0.0) {
    const double sigma = sigma_of(a.stochasticity, a.time_horizon, a.steps_per_unit);
    sigma_rel = sigma / (a.time_horizon * a.lipschitz);
    params["stochasticity"] = a.stochasticity;
    params["time"] = a.time_horizon;
    params["steps_per_unit"] = a.steps_per_unit;
    params["lipschitz"] = a.lipschitz;
    params["sigma"] = sigma;
  }
  if (sigma_rel <= 0.0)
    throw ConfigError("account: provide --sigma-rel or (--stochasticity, --time, --steps-per-unit, --lipschitz)");
  params["sigma_rel"] = sigma_rel;

  AccountantState acct(accountant_method_from_name(a.method), sigma_rel, a.delta,
                       a.delta_prime);
  acct.step(a.steps);
  const json out = {{"method", a.method},
                    {"epsilon", acct.epsilon()},
                    {"delta_total", acct.delta_total()},
                    {"params", std::move(params)}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_experiment(const std::string& config_path, const std::string& out_dir) {
  const ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
  const ExperimentOutcome outcome = run_experiment(cfg, out_dir);
  std::cout << outcome.records.size() << " records written to " << out_dir << "\n";
  if (!outcome.ok()) {
    for (const ExperimentFailure& f : outcome.failures)
      std::cerr << "failed: " << f.model << ": " << f.error << "\n";
    return 3;
  }
  return 0;
}

int cmd_report(const std::string& records_path, const std::string& out_path) {
  std::ifstream in(records_path);
  if (!in) throw ConfigError("cannot open records: " + records_path);
  std::vector<json> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(json::parse(line));
  }
  spit(out_path, summary_markdown(records));
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural ODE/SDE privacy laboratory"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate or import a dataset");
  gen_cmd->add_option("--kind", gen.kind, "two_moons | gauss_blobs | rings | tabular_csv");
  gen_cmd->add_option("--n-universe", gen.n_universe);
  gen_cmd->add_option("--n-test", gen.n_test);
  gen_cmd->add_option("--n-population", gen.n_population);
  gen_cmd->add_option("--n-classes", gen.n_classes);
  gen_cmd->add_option("--noise", gen.noise);
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--csv", gen.csv_path, "source file for tabular_csv");
  gen_cmd->add_option("--out", gen.out)->required();

  TrainArgs train_args;
  auto add_train_opts = [&](CLI::App* cmd, bool defend) {
    cmd->add_option("--data", train_args.data)->required();
    cmd->add_option("--spec", train_args.spec, "model spec json");
    cmd->add_option("--checkpoint-in", train_args.checkpoint_in,
                    "resume from a checkpoint instead of --spec");
    cmd->add_option("--train", train_args.train, "train config json")->required();
    cmd->add_option("--privacy", train_args.privacy,
                    "privacy options json (diffusion accounting)");
    cmd->add_option("--out-checkpoint", train_args.out_checkpoint)->required();
    cmd->add_option("--out-record", train_args.out_record)->required();
    if (defend) {
      cmd->add_option("--defense", train_args.defense, "l1 | l2 | early_stop | dp_sgd");
      cmd->add_option("--lambda", train_args.lambda);
      cmd->add_option("--patience", train_args.patience);
    }
  };
  auto* train_cmd = app.add_subcommand("train", "Train a single model");
  add_train_opts(train_cmd, false);
  auto* defend_cmd = app.add_subcommand("defend", "Train with a defense enabled");
  add_train_opts(defend_cmd, true);

  EnsembleArgs ens;
  auto* ens_cmd = app.add_subcommand("train-ensemble", "Train a shadow-model ensemble");
  ens_cmd->add_option("--data", ens.data)->required();
  ens_cmd->add_option("--spec", ens.spec)->required();
  ens_cmd->add_option("--train", ens.train)->required();
  ens_cmd->add_option("--privacy", ens.privacy);
  ens_cmd->add_option("--n-models", ens.n_models);
  ens_cmd->add_option("--master-seed", ens.master_seed);
  ens_cmd->add_option("--out-dir", ens.out_dir)->required();

  AttackArgs atk;
  auto* atk_cmd = app.add_subcommand("attack", "Run a membership attack over ensemble outputs");
  atk_cmd->add_option("--outputs", atk.outputs, "outputs.json from train-ensemble")->required();
  atk_cmd->add_option("--attack", atk.attack,
                      "yeom | shokri | song_mittal | watson | lira | rmia");
  atk_cmd->add_option("--gamma", atk.gamma, "rmia threshold");
  atk_cmd->add_flag("--global-variance", atk.global_variance, "lira variance pooling");
  atk_cmd->add_option("--out", atk.out)->required();
  atk_cmd->add_option("--roc-dir", atk.roc_dir, "write per-fold fpr,tpr csv files");

  CalibrateArgs cal;
  auto* cal_cmd = app.add_subcommand("calibrate", "Noise calibration from privacy targets");
  cal_cmd->add_option("--mode", cal.mode, "gaussian | sde | training");
  cal_cmd->add_option("--sensitivity", cal.sensitivity);
  cal_cmd->add_option("--epsilon", cal.epsilon);
  cal_cmd->add_option("--delta", cal.delta);
  cal_cmd->add_option("--time", cal.time_horizon);
  cal_cmd->add_option("--lipschitz", cal.lipschitz);
  cal_cmd->add_option("--epsilon-prime", cal.epsilon_prime);
  cal_cmd->add_option("--delta-prime", cal.delta_prime);
  cal_cmd->add_option("--iterations", cal.iterations);

  AccountArgs acc;
  auto* acc_cmd = app.add_subcommand("account", "Compose privacy loss over steps");
  acc_cmd->add_option("--method", acc.method, "strong_composition | rdp | gdp");
  acc_cmd->add_option("--k,--steps", acc.steps);
  acc_cmd->add_option("--sigma-rel", acc.sigma_rel);
  acc_cmd->add_option("--stochasticity", acc.stochasticity);
  acc_cmd->add_option("--time", acc.time_horizon);
  acc_cmd->add_option("--steps-per-unit", acc.steps_per_unit);
  acc_cmd->add_option("--lipschitz", acc.lipschitz);
  acc_cmd->add_option("--delta", acc.delta);
  acc_cmd->add_option("--delta-prime", acc.delta_prime);

  std::string exp_config, exp_out = "out";
  auto* exp_cmd = app.add_subcommand("experiment", "Run a full experiment grid");
  exp_cmd->add_option("--config", exp_config)->required();
  exp_cmd->add_option("--out", exp_out);

  std::string rep_records, rep_out = "summary.md";
  auto* rep_cmd = app.add_subcommand("report", "Regenerate the markdown summary");
  rep_cmd->add_option("--records", rep_records)->required();
  rep_cmd->add_option("--out", rep_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train_args, false);
    if (*defend_cmd) return cmd_train(train_args, true);
    if (*ens_cmd) return cmd_train_ensemble(ens);
    if (*atk_cmd) return cmd_attack(atk);
    if (*cal_cmd) return cmd_calibrate(cal);
    if (*acc_cmd) return cmd_account(acc);
    if (*exp_cmd) return cmd_experiment(exp_config, exp_out);
    if (*rep_cmd) return cmd_report(rep_records, rep_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
