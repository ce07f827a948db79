#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sdelab/dataset.hpp"
#include "sdelab/ensemble.hpp"
#include "sdelab/error.hpp"
#include "sdelab/experiment.hpp"
#include "sdelab/train.hpp"
#include "support/oracles.hpp"

using namespace sdelab;

namespace {

DatasetSpec tiny_data(DatasetKind kind, std::uint64_t seed = 1) {
  DatasetSpec spec;
  spec.kind = kind;
  spec.n_universe = 48;
  spec.n_test = 48;
  spec.n_population = 16;
  spec.noise = kind == DatasetKind::gauss_blobs ? 0.3 : 0.15;
  spec.seed = seed;
  return spec;
}

ModelSpec tiny_model(BlockKind kind) {
  ModelSpec spec;
  spec.input_dim = 2;
  spec.state_dim = 6;
  spec.n_classes = 2;
  DriftSpec drift;
  drift.hidden = {8};
  spec.blocks = {BlockSpec{kind, drift}};
  spec.solver.method = kind == BlockKind::nsde ? SolverMethod::euler_maruyama
                                               : SolverMethod::euler;
  spec.solver.steps_per_unit = 4;
  spec.seed = 5;
  return spec;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.lr = 0.2;
  cfg.momentum = 0.9;
  cfg.seed = 2;
  cfg.eval_every = 1;
  return cfg;
}

}  // namespace

TEST_CASE("dataset generation is deterministic and balanced") {
  const Dataset a = generate_dataset(tiny_data(DatasetKind::two_moons));
  const Dataset b = generate_dataset(tiny_data(DatasetKind::two_moons));
  CHECK(a.features.raw() == b.features.raw());
  CHECK(a.labels == b.labels);

  for (DatasetKind kind : {DatasetKind::two_moons, DatasetKind::gauss_blobs,
                           DatasetKind::rings}) {
    const Dataset d = generate_dataset(tiny_data(kind));
    CHECK(d.features.all_finite());
    // Splits are disjoint index ranges covering all rows.
    CHECK(d.universe_idx.size() + d.test_idx.size() + d.population_idx.size() ==
          static_cast<std::size_t>(d.features.rows()));
    int counts[2] = {0, 0};
    for (int i : d.universe_idx) counts[d.labels[static_cast<std::size_t>(i)]]++;
    CHECK(std::abs(counts[0] - counts[1]) <= 1);
  }
}

TEST_CASE("well-separated blobs admit a near-perfect linear rule") {
  DatasetSpec spec = tiny_data(DatasetKind::gauss_blobs, 3);
  spec.n_test = 400;
  spec.noise = 0.3;  // centers 6 apart: Bayes error ~ Phi(-10) ~ 0
  const Dataset d = generate_dataset(spec);
  // Bayes rule for two symmetric isotropic blobs: nearest center.
  int correct = 0;
  for (int i : d.test_idx) {
    const double x = d.features.at(i, 0);
    const int pred = x > 0 ? 0 : 1;  // centers at (+3,0) and (-3,0)
    correct += pred == d.labels[static_cast<std::size_t>(i)];
  }
  CHECK(static_cast<double>(correct) / d.test_idx.size() > 0.99);
}

TEST_CASE("dataset json round-trip preserves rows and splits") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::rings));
  const Dataset back = dataset_from_json(dataset_to_json(d));
  CHECK(back.features.raw() == d.features.raw());
  CHECK(back.labels == d.labels);
  CHECK(back.universe_idx == d.universe_idx);
  CHECK(back.population_idx == d.population_idx);
}

TEST_CASE("csv loading validates structure") {
  const std::string path = "/tmp/sdelab_test.csv";
  {
    std::ofstream out(path);
    for (int i = 0; i < 40; ++i)
      out << 0.1 * i << "," << -0.2 * i << "," << i % 2 << "\n";
  }
  DatasetSpec spec;
  spec.kind = DatasetKind::tabular_csv;
  spec.csv_path = path;
  spec.n_universe = 20;
  spec.n_test = 10;
  spec.n_population = 10;
  spec.seed = 4;
  const Dataset d = generate_dataset(spec);
  CHECK(d.features.rows() == 40);
  CHECK(d.n_classes == 2);

  spec.n_universe = 100;  // more than available
  CHECK_THROWS_AS(generate_dataset(spec), ConfigError);
}

TEST_CASE("zero epochs leaves parameters unchanged") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::gauss_blobs));
  const ModelSpec spec = tiny_model(BlockKind::residual);
  const Parameters init = build_model(spec);
  TrainResult r = train(spec, init, d.gather(d.universe_idx),
                        d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                        d.gather_labels(d.test_idx), tiny_train(0));
  for (std::size_t i = 0; i < init.size(); ++i)
    CHECK(r.params.values[i].raw() == init.values[i].raw());
  CHECK(r.record.curve.empty());
}

TEST_CASE("separable blobs reach high train accuracy quickly") {
  DatasetSpec ds = tiny_data(DatasetKind::gauss_blobs);
  ds.noise = 0.4;
  const Dataset d = generate_dataset(ds);
  const ModelSpec spec = tiny_model(BlockKind::residual);
  TrainResult r = train(spec, build_model(spec), d.gather(d.universe_idx),
                        d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                        d.gather_labels(d.test_idx), tiny_train(50));
  CHECK(r.record.best_train_acc > 0.95);
  CHECK(r.record.final_gap == doctest::Approx(r.record.best_train_acc -
                                              r.record.matching_test_acc));
}

TEST_CASE("gap bookkeeping is recomputable from the per-epoch log") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::two_moons));
  const ModelSpec spec = tiny_model(BlockKind::residual);
  TrainResult r = train(spec, build_model(spec), d.gather(d.universe_idx),
                        d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                        d.gather_labels(d.test_idx), tiny_train(12));
  double best_train = 0.0, matching_test = 0.0;
  for (const EpochStat& e : r.record.curve)
    if (e.train_acc > best_train) {
      best_train = e.train_acc;
      matching_test = e.test_acc;
    }
  CHECK(r.record.best_train_acc == best_train);
  CHECK(r.record.final_gap == best_train - matching_test);
}

TEST_CASE("large l2 penalty shrinks weight norms monotonically") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::two_moons));
  ModelSpec spec = tiny_model(BlockKind::residual);
  TrainConfig cfg = tiny_train(1);
  cfg.defense.kind = DefenseKind::l2;
  cfg.defense.lambda = 5.0;
  cfg.lr = 0.05;
  cfg.momentum = 0.0;

  Parameters p = build_model(spec);
  double prev = 1e300;
  for (int round = 0; round < 6; ++round) {
    TrainResult r = train(spec, p, d.gather(d.universe_idx),
                          d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                          d.gather_labels(d.test_idx), cfg);
    p = r.params;
    double norm = 0.0;
    for (const Tensor& t : p.values)
      for (int j = 0; j < t.numel(); ++j) norm += t[j] * t[j];
    CHECK(norm < prev);
    prev = norm;
  }
}

TEST_CASE("l1 penalty drives weights toward zero") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::two_moons));
  ModelSpec spec = tiny_model(BlockKind::residual);
  TrainConfig cfg = tiny_train(20);
  cfg.defense.kind = DefenseKind::l1;
  cfg.defense.lambda = 2.0;
  cfg.lr = 0.05;
  TrainResult r = train(spec, build_model(spec), d.gather(d.universe_idx),
                        d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                        d.gather_labels(d.test_idx), cfg);
  double sum_abs = 0.0;
  for (const Tensor& t : r.params.values)
    for (int j = 0; j < t.numel(); ++j) sum_abs += std::abs(t[j]);
  const Parameters init = build_model(spec);
  double init_abs = 0.0;
  for (const Tensor& t : init.values)
    for (int j = 0; j < t.numel(); ++j) init_abs += std::abs(t[j]);
  CHECK(sum_abs < 0.5 * init_abs);
}

TEST_CASE("early stopping halts and restores the best checkpoint") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::two_moons));
  ModelSpec spec = tiny_model(BlockKind::residual);
  TrainConfig cfg = tiny_train(400);
  cfg.defense.kind = DefenseKind::early_stop;
  cfg.defense.patience = 5;
  cfg.lr = 0.5;  // aggressive enough to overfit and regress test loss
  TrainResult r = train(spec, build_model(spec), d.gather(d.universe_idx),
                        d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                        d.gather_labels(d.test_idx), cfg);
  CHECK(r.record.early_stopped);
  CHECK(r.record.epochs_run < 400);
}

TEST_CASE("dp_sgd_step clips, noises, and averages") {
  Rng rng(9);
  // A gradient of norm 10 is clipped to norm 1.
  std::vector<std::vector<double>> grads = {{6.0, 8.0}};
  const std::vector<double> clipped = dp_sgd_step(grads, 1.0, 0.0, rng);
  CHECK(std::sqrt(clipped[0] * clipped[0] + clipped[1] * clipped[1]) ==
        doctest::Approx(1.0).epsilon(1e-12));

  // noise_multiplier 0: plain clipped mean.
  std::vector<std::vector<double>> two = {{0.3, 0.4}, {0.3, -0.4}};
  const std::vector<double> mean = dp_sgd_step(two, 1.0, 0.0, rng);
  CHECK(mean[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(mean[1] == doctest::Approx(0.0).epsilon(1e-12));

  // Zero gradients, multiplier z, batch b: per-coordinate variance (z*C/b)^2.
  const double z = 2.0, C = 1.5;
  const int batch = 4, draws = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    std::vector<std::vector<double>> zero(batch, std::vector<double>{0.0});
    const std::vector<double> g = dp_sgd_step(zero, C, z, rng);
    sum += g[0];
    sum_sq += g[0] * g[0];
  }
  const double var = sum_sq / draws - (sum / draws) * (sum / draws);
  const double expected = (z * C / batch) * (z * C / batch);
  CHECK(std::abs(var - expected) / expected <= 0.05);
}

TEST_CASE("dp_sgd training respects the epsilon budget and clips per example") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::gauss_blobs));
  ModelSpec spec = tiny_model(BlockKind::residual);
  TrainConfig cfg = tiny_train(4);
  cfg.batch_size = 8;
  cfg.defense.kind = DefenseKind::dp_sgd;
  cfg.defense.clip = 0.5;
  cfg.defense.noise_multiplier = 2.0;
  cfg.defense.target_epsilon = 8.0;
  cfg.defense.delta = 1e-5;
  TrainResult r = train(spec, build_model(spec), d.gather(d.universe_idx),
                        d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                        d.gather_labels(d.test_idx), cfg);
  REQUIRE(!r.record.epsilon_ledger.empty());
  CHECK(r.record.final_epsilon <= 8.0);
  // Budget exhausted before the configured epochs completed.
  CHECK(r.record.epochs_run < cfg.epochs);
  for (std::size_t i = 1; i < r.record.epsilon_ledger.size(); ++i)
    CHECK(r.record.epsilon_ledger[i] >= r.record.epsilon_ledger[i - 1]);
}

TEST_CASE("train_nsde_private rejects deterministic solvers") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::two_moons));
  ModelSpec spec = tiny_model(BlockKind::node);
  PrivacyOptions privacy;
  CHECK_THROWS_WITH_AS(
      train_nsde_private(spec, build_model(spec), d.gather(d.universe_idx),
                         d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                         d.gather_labels(d.test_idx), tiny_train(1), privacy),
      doctest::Contains("no diffusion"), ConfigError);
}

TEST_CASE("train_nsde_private: sigma=0 carries the no-guarantee marker") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::two_moons));
  ModelSpec spec = tiny_model(BlockKind::nsde);
  spec.solver.stochasticity = 0.0;
  PrivacyOptions privacy;
  TrainResult r = train_nsde_private(spec, build_model(spec), d.gather(d.universe_idx),
                                     d.gather_labels(d.universe_idx),
                                     d.gather(d.test_idx), d.gather_labels(d.test_idx),
                                     tiny_train(2), privacy);
  CHECK(r.record.no_formal_guarantee);
  CHECK(r.record.epsilon_ledger.empty());
}

TEST_CASE("nsde privacy ledger grows with epochs and doubles strictly") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::two_moons));
  ModelSpec spec = tiny_model(BlockKind::nsde);
  spec.solver.stochasticity = 0.5;  // sigma = 1 at T=1, s=4
  PrivacyOptions privacy;
  privacy.method = AccountantMethod::rdp;
  privacy.lipschitz = 2.0;  // declared bound

  auto run = [&](int epochs) {
    return train_nsde_private(spec, build_model(spec), d.gather(d.universe_idx),
                              d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                              d.gather_labels(d.test_idx), tiny_train(epochs), privacy);
  };
  TrainResult a = run(3);
  TrainResult b = run(6);
  REQUIRE(a.record.epsilon_ledger.size() == 3);
  REQUIRE(b.record.epsilon_ledger.size() == 6);
  CHECK(b.record.final_epsilon > a.record.final_epsilon);
  CHECK(!a.record.no_formal_guarantee);
  for (std::size_t i = 1; i < b.record.epsilon_ledger.size(); ++i)
    CHECK(b.record.epsilon_ledger[i] >= b.record.epsilon_ledger[i - 1]);
  // One accountant step per epoch of disjoint mini-batches.
  CHECK(a.record.epsilon_ledger[0] ==
        doctest::Approx(account_rdp(1, 1.0 / 2.0, privacy.delta)).epsilon(1e-9));
}

TEST_CASE("epsilon-per-epoch is concave increasing under strong composition") {
  // Formula scan at fixed per-step budget.
  std::vector<double> eps;
  const double eps_step = std::sqrt(2.0 * std::log(1.25 / 1e-5)) / 40.0;
  for (int k = 1; k <= 50; ++k)
    eps.push_back(account_strong_composition(k, eps_step, 1e-5, 1e-6).epsilon);
  for (std::size_t i = 1; i < eps.size(); ++i) CHECK(eps[i] > eps[i - 1]);
  for (std::size_t i = 1; i + 1 < eps.size(); ++i)
    CHECK(eps[i + 1] - eps[i] <= eps[i] - eps[i - 1] + 1e-12);
}

TEST_CASE("replace_then_finetune freezes the prefix and counts only finetune steps") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::two_moons));
  ModelSpec base_spec = tiny_model(BlockKind::residual);
  base_spec.blocks.assign(2, base_spec.blocks[0]);
  TrainResult base = train(base_spec, build_model(base_spec), d.gather(d.universe_idx),
                           d.gather_labels(d.universe_idx), d.gather(d.test_idx),
                           d.gather_labels(d.test_idx), tiny_train(5));

  DriftSpec nd;
  nd.hidden = {8};
  nd.time_conditioning = true;
  SolverConfig ns;
  ns.method = SolverMethod::euler_maruyama;
  ns.steps_per_unit = 4;
  ns.stochasticity = 0.5;
  PrivacyOptions privacy;
  privacy.lipschitz = 2.0;

  FinetuneResult ft = replace_then_finetune(base_spec, base.params, nd, ns, 77, false,
                                            d.gather(d.universe_idx),
                                            d.gather_labels(d.universe_idx),
                                            d.gather(d.test_idx), d.gather_labels(d.test_idx),
                                            tiny_train(3), privacy);
  // Frozen prefix bit-identical to the base checkpoint.
  const auto old_layout = param_layout(base_spec);
  const auto new_layout = param_layout(ft.spec);
  for (std::size_t i = 0; i < new_layout.size(); ++i) {
    if (new_layout[i].block == 1 || new_layout[i].block == -2) continue;
    for (std::size_t o = 0; o < old_layout.size(); ++o)
      if (old_layout[o].name == new_layout[i].name)
        CHECK(ft.params.values[i].raw() == base.params.values[o].raw());
  }
  // Ledger counts finetune epochs only.
  CHECK(ft.record.epsilon_ledger.size() == 3);

  // Zero finetune epochs: empty ledger.
  FinetuneResult none = replace_then_finetune(base_spec, base.params, nd, ns, 77, false,
                                              d.gather(d.universe_idx),
                                              d.gather_labels(d.universe_idx),
                                              d.gather(d.test_idx),
                                              d.gather_labels(d.test_idx), tiny_train(0),
                                              privacy);
  CHECK(none.record.epsilon_ledger.empty());
}

TEST_CASE("shadow ensemble: structure, distinct seeds, reproducibility") {
  const Dataset d = generate_dataset(tiny_data(DatasetKind::two_moons));
  const ModelSpec spec = tiny_model(BlockKind::residual);
  EnsembleResult a = train_shadow_ensemble(d, spec, tiny_train(3), nullptr, 6, 99);
  CHECK(a.members.size() == 6);
  CHECK(a.universe.n_models() == 6);
  CHECK(a.universe.n_samples() == 48);
  CHECK(a.population.n_samples() == 16);
  for (int m = 0; m < 6; ++m)
    for (int i = 0; i < 48; ++i) {
      const ModelQuery& q = a.universe.rows[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)];
      CHECK(q.confidences.size() == 2);
      CHECK(std::isfinite(q.loss));
      CHECK(std::isfinite(q.logit_true));
    }
  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j) CHECK(a.members[static_cast<std::size_t>(i)].seed !=
                                          a.members[static_cast<std::size_t>(j)].seed);

  EnsembleResult b = train_shadow_ensemble(d, spec, tiny_train(3), nullptr, 6, 99);
  for (int m = 0; m < 6; ++m)
    for (std::size_t t = 0; t < a.members[static_cast<std::size_t>(m)].params.size(); ++t)
      CHECK(a.members[static_cast<std::size_t>(m)].params.values[t].raw() ==
            b.members[static_cast<std::size_t>(m)].params.values[t].raw());
}

TEST_CASE("experiment config validation catches malformed inputs") {
  CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json{{"name", "x"}}), ConfigError);
  nlohmann::json j = {
      {"name", "t"},
      {"master_seed", 1},
      {"dataset", {{"kind", "two_moons"}, {"n_universe", 32}, {"n_test", 32},
                   {"n_population", 8}, {"seed", 1}}},
      {"n_models", 4},
      {"attacks", {"yeom"}},
      {"models", nlohmann::json::array()},
  };
  ExperimentConfig cfg = ExperimentConfig::from_json(j);
  CHECK(cfg.models.empty());

  j["n_models"] = 5;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
  j["n_models"] = 4;
  j["models"] = {{{"label", "a"}, {"kind", "replace_finetune"}, {"base", "missing"},
                  {"train", {{"epochs", 1}, {"batch_size", 4}, {"lr", 0.1}}},
                  {"nsde_solver", {{"method", "euler_maruyama"}, {"time", 1.0},
                                   {"steps_per_unit", 4}}}}};
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(j), doctest::Contains("missing"),
                       ConfigError);
}

TEST_CASE("empty grid yields an empty report and success") {
  nlohmann::json j = {
      {"name", "empty"},
      {"master_seed", 1},
      {"dataset", {{"kind", "two_moons"}, {"n_universe", 32}, {"n_test", 32},
                   {"n_population", 8}, {"seed", 1}}},
      {"n_models", 4},
      {"attacks", nlohmann::json::array()},
      {"models", nlohmann::json::array()},
  };
  ExperimentOutcome out = run_experiment(ExperimentConfig::from_json(j), "");
  CHECK(out.ok());
  CHECK(out.records.empty());
}

TEST_CASE("one model, one attack yields exactly one record; rerun is byte-identical") {
  nlohmann::json spec_j = nlohmann::json::parse(model_spec_to_json(tiny_model(BlockKind::residual)));
  nlohmann::json j = {
      {"name", "single"},
      {"master_seed", 7},
      {"dataset", {{"kind", "two_moons"}, {"n_universe", 32}, {"n_test", 32},
                   {"n_population", 8}, {"noise", 0.2}, {"seed", 1}}},
      {"n_models", 6},
      {"attacks", {"yeom"}},
      {"models", {{{"label", "res"}, {"spec", spec_j},
                   {"train", {{"epochs", 3}, {"batch_size", 8}, {"lr", 0.2}}}}}},
  };
  const ExperimentConfig cfg = ExperimentConfig::from_json(j);

  namespace fs = std::filesystem;
  const std::string dir1 = "/tmp/sdelab_exp1", dir2 = "/tmp/sdelab_exp2";
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  ExperimentOutcome a = run_experiment(cfg, dir1);
  ExperimentOutcome b = run_experiment(cfg, dir2);
  CHECK(a.ok());
  REQUIRE(a.records.size() == 1);
  CHECK(a.records[0].at("model") == "res");

  auto slurp = [](const std::string& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string r1 = slurp(dir1 + "/records.jsonl");
  const std::string r2 = slurp(dir2 + "/records.jsonl");
  CHECK(!r1.empty());
  CHECK(r1 == r2);
  CHECK(fs::exists(dir1 + "/summary.md"));
  CHECK(fs::exists(dir1 + "/roc"));

  // Records avoid wall-clock; timings live in the sidecar.
  CHECK(r1.find("wall_clock") == std::string::npos);
  CHECK(fs::exists(dir1 + "/timings.json"));
}

TEST_CASE("roc csv uses the fpr,tpr header with 17-significant-digit reals") {
  AttackScores s;
  s.scored = {{0, 0.9, true}, {1, 0.1, false}, {2, 1.0 / 3.0, true}};
  const std::string csv = roc_csv(roc_metrics(s));
  CHECK(csv.rfind("fpr,tpr\n", 0) == 0);
  CHECK(csv.find("0.5") != std::string::npos);
}
