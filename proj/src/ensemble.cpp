#include "sdelab/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>

#include "sdelab/error.hpp"

namespace sdelab {

int worker_count_from_env() {
  const char* env = std::getenv("SDELAB_WORKERS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

namespace {

constexpr std::uint64_t kUniverseTag = 0x0057a61e;
constexpr std::uint64_t kPopulationTag = 0x00707075;

// Runs `job(m)` for m in [0, n) across the configured worker count. The
// first failure wins and is rethrown with its model index attached.
void run_jobs(int n, const std::function<void(int)>& job) {
  const int workers = std::min(worker_count_from_env(), n);
  if (workers <= 1) {
    for (int m = 0; m < n; ++m) {
      try {
        job(m);
      } catch (const std::exception& e) {
        throw Error("model " + std::to_string(m) + ": " + e.what());
      }
    }
    return;
  }
  std::atomic<int> next{0};
  std::mutex err_mu;
  std::string first_error;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const int m = next.fetch_add(1);
        if (m >= n) return;
        try {
          job(m);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (first_error.empty())
            first_error = "model " + std::to_string(m) + ": " + e.what();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (!first_error.empty()) throw Error(first_error);
}

struct SplitViews {
  Tensor x_universe, x_test, x_population;
  std::vector<int> y_universe, y_test, y_population;
};

SplitViews make_views(const Dataset& data) {
  SplitViews v;
  v.x_universe = data.gather(data.universe_idx);
  v.y_universe = data.gather_labels(data.universe_idx);
  v.x_test = data.gather(data.test_idx);
  v.y_test = data.gather_labels(data.test_idx);
  v.x_population = data.gather(data.population_idx);
  v.y_population = data.gather_labels(data.population_idx);
  return v;
}

void gather_members(const SplitViews& v, const ShadowSplitPlan& plan, int m,
                    Tensor& x_out, std::vector<int>& y_out) {
  std::vector<int> rows;
  for (int i = 0; i < plan.n_samples(); ++i)
    if (plan.in(i, m)) rows.push_back(i);
  if (rows.empty()) throw Error("shadow split left a model without members");
  x_out = Tensor({static_cast<int>(rows.size()), v.x_universe.cols()});
  y_out.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int c = 0; c < v.x_universe.cols(); ++c)
      x_out.at(static_cast<int>(r), c) = v.x_universe.at(rows[r], c);
    y_out[r] = v.y_universe[static_cast<std::size_t>(rows[r])];
  }
}

void record_outputs(EnsembleResult& out, const SplitViews& v, const ModelSpec& spec,
                    int m, std::uint64_t member_seed) {
  const EnsembleMember& member = out.members[static_cast<std::size_t>(m)];
  ModelSpec eval_spec = spec;
  eval_spec.seed = member_seed;
  out.universe.rows[static_cast<std::size_t>(m)] =
      collect_outputs(eval_spec, member.params, v.x_universe, v.y_universe,
                      mix_seed(member_seed, kUniverseTag));
  if (v.x_population.numel() > 0)
    out.population.rows[static_cast<std::size_t>(m)] =
        collect_outputs(eval_spec, member.params, v.x_population, v.y_population,
                        mix_seed(member_seed, kPopulationTag));
}

}  // namespace

EnsembleResult train_shadow_ensemble(const Dataset& data, const ModelSpec& spec,
                                     const TrainConfig& cfg,
                                     const PrivacyOptions* privacy,
                                     int n_models, std::uint64_t master_seed) {
  EnsembleResult out;
  out.spec = spec;
  out.plan = make_shadow_plan(static_cast<int>(data.universe_idx.size()), n_models,
                              master_seed);
  out.members.resize(static_cast<std::size_t>(n_models));
  const SplitViews v = make_views(data);
  out.universe.labels = v.y_universe;
  out.universe.rows.resize(static_cast<std::size_t>(n_models));
  out.population.labels = v.y_population;
  out.population.rows.resize(static_cast<std::size_t>(n_models));

  run_jobs(n_models, [&](int m) {
    const std::uint64_t seed = mix_seed(master_seed, static_cast<std::uint64_t>(m));
    ModelSpec mspec = spec;
    mspec.seed = seed;
    TrainConfig mcfg = cfg;
    mcfg.seed = seed;

    Tensor x_members;
    std::vector<int> y_members;
    gather_members(v, out.plan, m, x_members, y_members);
    mcfg.batch_size = std::min(mcfg.batch_size, x_members.rows());

    TrainResult trained =
        privacy ? train_nsde_private(mspec, build_model(mspec), x_members, y_members,
                                     v.x_test, v.y_test, mcfg, *privacy)
                : train(mspec, build_model(mspec), x_members, y_members, v.x_test,
                        v.y_test, mcfg);
    EnsembleMember& slot = out.members[static_cast<std::size_t>(m)];
    slot.params = std::move(trained.params);
    slot.record = std::move(trained.record);
    slot.seed = seed;
    record_outputs(out, v, spec, m, seed);
  });
  return out;
}

EnsembleResult finetune_shadow_ensemble(const Dataset& data,
                                        const EnsembleResult& base,
                                        const ModelSpec& base_spec,
                                        const DriftSpec& nsde_drift,
                                        const SolverConfig& nsde_solver,
                                        bool full_finetune, const TrainConfig& cfg,
                                        const PrivacyOptions& privacy,
                                        std::uint64_t master_seed) {
  const int n_models = static_cast<int>(base.members.size());
  EnsembleResult out;
  out.plan = base.plan;  // same membership: finetuning sees the same data
  out.members.resize(static_cast<std::size_t>(n_models));
  const SplitViews v = make_views(data);
  out.universe.labels = v.y_universe;
  out.universe.rows.resize(static_cast<std::size_t>(n_models));
  out.population.labels = v.y_population;
  out.population.rows.resize(static_cast<std::size_t>(n_models));

  std::mutex spec_mu;
  run_jobs(n_models, [&](int m) {
    const std::uint64_t seed = mix_seed(master_seed, static_cast<std::uint64_t>(m));
    ModelSpec bspec = base_spec;
    bspec.seed = base.members[static_cast<std::size_t>(m)].seed;
    TrainConfig mcfg = cfg;
    mcfg.seed = seed;

    Tensor x_members;
    std::vector<int> y_members;
    gather_members(v, out.plan, m, x_members, y_members);
    mcfg.batch_size = std::min(mcfg.batch_size, x_members.rows());

    FinetuneResult ft = replace_then_finetune(
        bspec, base.members[static_cast<std::size_t>(m)].params, nsde_drift,
        nsde_solver, seed, full_finetune, x_members, y_members, v.x_test, v.y_test,
        mcfg, privacy);
    {
      std::lock_guard<std::mutex> lock(spec_mu);
      if (out.spec.blocks.empty()) out.spec = ft.spec;
    }
    EnsembleMember& slot = out.members[static_cast<std::size_t>(m)];
    slot.params = std::move(ft.params);
    slot.record = std::move(ft.record);
    slot.seed = seed;
    record_outputs(out, v, ft.spec, m, seed);
  });
  return out;
}

}  // namespace sdelab
