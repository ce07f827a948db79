#include "sdelab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sdelab/error.hpp"
#include "sdelab/rng.hpp"

namespace sdelab {

double clamp_prob(double p) { return std::clamp(p, 1e-12, 1.0 - 1e-12); }

double logit(double p) {
  p = clamp_prob(p);
  return std::log(p / (1.0 - p));
}

ShadowSplitPlan make_shadow_plan(int n_samples, int n_models, std::uint64_t seed) {
  if (n_models < 2 || n_models % 2 != 0)
    throw ConfigError("shadow plan: n_models must be even and at least 2");
  if (n_samples < 1) throw ConfigError("shadow plan: need at least one sample");
  ShadowSplitPlan plan;
  plan.n_models = n_models;
  plan.seed = seed;
  plan.membership.resize(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    std::vector<bool> row(static_cast<std::size_t>(n_models), false);
    for (int m = 0; m < n_models / 2; ++m) row[static_cast<std::size_t>(m)] = true;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    rng.shuffle(row);
    plan.membership[static_cast<std::size_t>(i)] = std::move(row);
  }
  return plan;
}

RocCurve roc_metrics(const AttackScores& scores, const std::vector<double>& fpr_targets) {
  int members = 0, non_members = 0;
  for (const ScoredSample& s : scores.scored) {
    if (!std::isfinite(s.score)) throw Error("roc_metrics: non-finite score");
    (s.is_member ? members : non_members)++;
  }
  if (members == 0 || non_members == 0)
    throw Error("roc_metrics: need at least one member and one non-member");

  std::vector<const ScoredSample*> order;
  order.reserve(scores.scored.size());
  for (const ScoredSample& s : scores.scored) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(),
                   [](const ScoredSample* a, const ScoredSample* b) {
                     return a->score > b->score;
                   });

  RocCurve roc;
  roc.points.emplace_back(0.0, 0.0);
  int tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    // Samples sharing a score cross the threshold together.
    const double v = order[i]->score;
    while (i < order.size() && order[i]->score == v) {
      (order[i]->is_member ? tp : fp)++;
      ++i;
    }
    roc.points.emplace_back(static_cast<double>(fp) / non_members,
                            static_cast<double>(tp) / members);
  }
  if (roc.points.back() != std::make_pair(1.0, 1.0)) roc.points.emplace_back(1.0, 1.0);

  for (std::size_t p = 1; p < roc.points.size(); ++p) {
    const auto& [x0, y0] = roc.points[p - 1];
    const auto& [x1, y1] = roc.points[p];
    roc.auc += (x1 - x0) * (y0 + y1) / 2.0;
  }

  for (double target : fpr_targets) {
    double best = 0.0;
    for (const auto& [fpr, tpr] : roc.points)
      if (fpr <= target) best = std::max(best, tpr);
    roc.tpr_at[target] = best;
  }

  for (const auto& [fpr, tpr] : roc.points)
    roc.inference_accuracy = std::max(roc.inference_accuracy, (tpr + 1.0 - fpr) / 2.0);
  return roc;
}

AttackScores yeom_score(const std::vector<LossRecord>& losses, double tau) {
  AttackScores out;
  out.attack = "yeom";
  for (const LossRecord& r : losses) {
    if (!std::isfinite(r.loss)) throw Error("yeom_score: non-finite loss");
    out.scored.push_back({r.sample_id, tau - r.loss, r.is_member});
  }
  return out;
}

namespace {

std::vector<double> sorted_desc(std::vector<double> v) {
  std::sort(v.begin(), v.end(), std::greater<>());
  return v;
}

// Plain full-batch logistic regression; zero init, fixed iteration budget.
struct LogisticModel {
  std::vector<double> w;  // last entry is the bias
  void fit(const std::vector<std::vector<double>>& xs, const std::vector<int>& ys) {
    const std::size_t d = xs.empty() ? 0 : xs[0].size();
    w.assign(d + 1, 0.0);
    const double lr = 2.0, reg = 1e-3;
    std::vector<double> grad(d + 1);
    for (int it = 0; it < 400; ++it) {
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const double err = predict(xs[i]) - ys[i];
        for (std::size_t j = 0; j < d; ++j) grad[j] += err * xs[i][j];
        grad[d] += err;
      }
      for (std::size_t j = 0; j <= d; ++j) {
        grad[j] = grad[j] / xs.size() + reg * w[j];
        w[j] -= lr * grad[j];
      }
    }
  }
  double predict(const std::vector<double>& x) const {
    double z = w.back();
    for (std::size_t j = 0; j < x.size(); ++j) z += w[j] * x[j];
    return 1.0 / (1.0 + std::exp(-z));
  }
};

}  // namespace

AttackScores shokri_attack(const std::vector<ShadowExample>& shadow,
                           const std::vector<TargetQuery>& target) {
  if (shadow.empty()) throw Error("shokri_attack: empty shadow set");
  AttackScores out;
  out.attack = "shokri";

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < shadow.size(); ++i)
    by_class[shadow[i].label].push_back(i);

  auto fit_on = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    xs.reserve(idx.size());
    for (std::size_t i : idx) {
      xs.push_back(sorted_desc(shadow[i].confidences));
      ys.push_back(shadow[i].is_member ? 1 : 0);
    }
    LogisticModel m;
    m.fit(xs, ys);
    return m;
  };

  std::vector<std::size_t> all_idx(shadow.size());
  std::iota(all_idx.begin(), all_idx.end(), 0);
  const LogisticModel global = fit_on(all_idx);

  std::map<int, LogisticModel> per_class;
  for (const auto& [label, idx] : by_class)
    if (idx.size() >= 10) per_class.emplace(label, fit_on(idx));

  for (const TargetQuery& q : target) {
    const auto it = per_class.find(q.label);
    const LogisticModel& model = it == per_class.end() ? global : it->second;
    if (it == per_class.end()) out.used_global_fallback = true;
    out.scored.push_back({q.sample_id, model.predict(sorted_desc(q.confidences)),
                          q.is_member});
  }
  return out;
}

double modified_entropy(const std::vector<double>& probs, int label) {
  double m = 0.0;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    const double p = clamp_prob(probs[c]);
    if (static_cast<int>(c) == label)
      m += -(1.0 - p) * std::log(p);
    else
      m += -p * std::log(1.0 - p);
  }
  return m;
}

namespace {

// Threshold below which a value predicts "member", chosen to maximize
// balanced accuracy on the given labelled values. Ties break toward the
// smallest threshold.
double balanced_threshold(const std::vector<std::pair<double, bool>>& vals) {
  std::vector<double> cand;
  cand.reserve(vals.size() + 2);
  for (const auto& [v, is_m] : vals) cand.push_back(v);
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  std::vector<double> thresholds;
  thresholds.push_back(cand.front() - 1.0);
  for (std::size_t i = 0; i + 1 < cand.size(); ++i)
    thresholds.push_back((cand[i] + cand[i + 1]) / 2.0);
  thresholds.push_back(cand.back() + 1.0);

  int n_member = 0, n_non = 0;
  for (const auto& [v, is_m] : vals) (is_m ? n_member : n_non)++;

  double best_t = thresholds.front(), best_acc = -1.0;
  for (double t : thresholds) {
    int tp = 0, tn = 0;
    for (const auto& [v, is_m] : vals) {
      if (is_m && v < t) ++tp;
      if (!is_m && v >= t) ++tn;
    }
    const double tpr = n_member ? static_cast<double>(tp) / n_member : 0.0;
    const double tnr = n_non ? static_cast<double>(tn) / n_non : 0.0;
    const double acc = (tpr + tnr) / 2.0;
    if (acc > best_acc) {
      best_acc = acc;
      best_t = t;
    }
  }
  return best_t;
}

}  // namespace

AttackScores song_mittal_score(const std::vector<TargetQuery>& target,
                               const std::vector<ShadowExample>& shadow) {
  if (shadow.empty()) throw Error("song_mittal_score: empty shadow set");
  AttackScores out;
  out.attack = "song_mittal";

  std::map<int, std::vector<std::pair<double, bool>>> shadow_by_class;
  std::vector<std::pair<double, bool>> shadow_all;
  for (const ShadowExample& s : shadow) {
    const double m = modified_entropy(s.confidences, s.label);
    shadow_by_class[s.label].emplace_back(m, s.is_member);
    shadow_all.emplace_back(m, s.is_member);
  }
  std::map<int, double> thresholds;
  for (const auto& [label, vals] : shadow_by_class)
    thresholds[label] = balanced_threshold(vals);
  const double global_threshold = balanced_threshold(shadow_all);

  for (const TargetQuery& q : target) {
    const auto it = thresholds.find(q.label);
    const double t = it == thresholds.end() ? global_threshold : it->second;
    if (it == thresholds.end()) out.used_global_fallback = true;
    out.scored.push_back(
        {q.sample_id, t - modified_entropy(q.confidences, q.label), q.is_member});
  }
  return out;
}

AttackScores watson_score(const std::vector<CalibratedQuery>& queries) {
  AttackScores out;
  out.attack = "watson";
  for (const CalibratedQuery& q : queries) {
    if (q.out_confidences.empty()) {
      out.skipped.push_back(q.sample_id);
      continue;
    }
    double mean = 0.0;
    for (double c : q.out_confidences) mean += logit(c);
    mean /= static_cast<double>(q.out_confidences.size());
    out.scored.push_back({q.sample_id, logit(q.target_confidence) - mean, q.is_member});
  }
  return out;
}

namespace {

struct GaussianFit {
  double mean;
  double var;
};

GaussianFit fit_gaussian(const std::vector<double>& xs, double floor) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size() - 1);
  return {mean, std::max(var, floor)};
}

double log_normal_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * std::log(2.0 * M_PI * var) - d * d / (2.0 * var);
}

}  // namespace

AttackScores lira_score(const std::vector<LiraQuery>& queries, const LiraOptions& opts) {
  AttackScores out;
  out.attack = "lira";

  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i].in_logits.size() < 2 || queries[i].out_logits.size() < 2)
      out.skipped.push_back(queries[i].sample_id);
    else
      usable.push_back(i);
  }

  double global_in_var = 0.0, global_out_var = 0.0;
  if (opts.global_variance && !usable.empty()) {
    // Pool per-sample variances (mean of unbiased estimates).
    for (std::size_t i : usable) {
      global_in_var += fit_gaussian(queries[i].in_logits, 0.0).var;
      global_out_var += fit_gaussian(queries[i].out_logits, 0.0).var;
    }
    global_in_var = std::max(global_in_var / usable.size(), opts.variance_floor);
    global_out_var = std::max(global_out_var / usable.size(), opts.variance_floor);
  }

  for (std::size_t i : usable) {
    const LiraQuery& q = queries[i];
    GaussianFit in = fit_gaussian(q.in_logits, opts.variance_floor);
    GaussianFit outf = fit_gaussian(q.out_logits, opts.variance_floor);
    if (opts.global_variance) {
      in.var = global_in_var;
      outf.var = global_out_var;
    }
    const double score = log_normal_pdf(q.target_logit, in.mean, in.var) -
                         log_normal_pdf(q.target_logit, outf.mean, outf.var);
    out.scored.push_back({q.sample_id, score, q.is_member});
  }
  return out;
}

namespace {

double rmia_ratio(double target_prob, const std::vector<double>& ref_probs) {
  double mean_ref = 0.0;
  for (double p : ref_probs) mean_ref += p;
  mean_ref /= static_cast<double>(ref_probs.size());
  mean_ref = std::max(mean_ref, 1e-12);
  return target_prob / mean_ref;
}

}  // namespace

AttackScores rmia_score(const std::vector<RmiaQuery>& queries,
                        const std::vector<RmiaPopulationPoint>& population,
                        double gamma) {
  if (population.empty()) throw Error("rmia_score: empty population set");
  AttackScores out;
  out.attack = "rmia";

  std::vector<double> pop_ratios;
  pop_ratios.reserve(population.size());
  for (const RmiaPopulationPoint& z : population) {
    if (z.ref_probs.empty()) throw Error("rmia_score: population point without references");
    pop_ratios.push_back(rmia_ratio(z.target_prob, z.ref_probs));
  }

  for (const RmiaQuery& q : queries) {
    if (q.ref_probs.empty()) {
      out.skipped.push_back(q.sample_id);
      continue;
    }
    const double rx = rmia_ratio(q.target_prob, q.ref_probs);
    int wins = 0;
    for (double rz : pop_ratios)
      if (rx / std::max(rz, 1e-12) >= gamma) ++wins;
    out.scored.push_back(
        {q.sample_id, static_cast<double>(wins) / pop_ratios.size(), q.is_member});
  }
  return out;
}

const char* attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::yeom: return "yeom";
    case AttackKind::shokri: return "shokri";
    case AttackKind::song_mittal: return "song_mittal";
    case AttackKind::watson: return "watson";
    case AttackKind::lira: return "lira";
    case AttackKind::rmia: return "rmia";
  }
  return "?";
}

AttackKind attack_from_name(const std::string& name) {
  if (name == "yeom") return AttackKind::yeom;
  if (name == "shokri") return AttackKind::shokri;
  if (name == "song_mittal") return AttackKind::song_mittal;
  if (name == "watson") return AttackKind::watson;
  if (name == "lira") return AttackKind::lira;
  if (name == "rmia") return AttackKind::rmia;
  throw ConfigError("unknown attack: " + name);
}

AttackScores attack_fold(const ShadowSplitPlan& plan, const OutputTable& universe,
                         const OutputTable& population, AttackKind attack,
                         int target, const CrossValidationOptions& opts) {
  const int n = universe.n_samples();
  const int models = universe.n_models();
  if (plan.n_samples() != n || plan.n_models != models)
    throw ConfigError("attack_fold: plan does not match output table");
  if (target < 0 || target >= models) throw ConfigError("attack_fold: bad target index");
  const auto& trow = universe.rows[static_cast<std::size_t>(target)];

  switch (attack) {
    case AttackKind::yeom: {
      double tau = 0.0;
      int members = 0;
      for (int i = 0; i < n; ++i)
        if (plan.in(i, target)) {
          tau += trow[static_cast<std::size_t>(i)].loss;
          ++members;
        }
      tau = members ? tau / members : 0.0;
      std::vector<LossRecord> losses;
      losses.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i)
        losses.push_back({i, trow[static_cast<std::size_t>(i)].loss, plan.in(i, target)});
      return yeom_score(losses, tau);
    }
    case AttackKind::shokri:
    case AttackKind::song_mittal: {
      std::vector<ShadowExample> shadow;
      shadow.reserve(static_cast<std::size_t>(n) * (models - 1));
      for (int m = 0; m < models; ++m) {
        if (m == target) continue;
        for (int i = 0; i < n; ++i)
          shadow.push_back({universe.rows[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)].confidences,
                            universe.labels[static_cast<std::size_t>(i)], plan.in(i, m)});
      }
      std::vector<TargetQuery> queries;
      queries.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i)
        queries.push_back({i, trow[static_cast<std::size_t>(i)].confidences,
                           universe.labels[static_cast<std::size_t>(i)], plan.in(i, target)});
      return attack == AttackKind::shokri ? shokri_attack(shadow, queries)
                                          : song_mittal_score(queries, shadow);
    }
    case AttackKind::watson: {
      std::vector<CalibratedQuery> queries;
      queries.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        CalibratedQuery q;
        q.sample_id = i;
        q.target_confidence = trow[static_cast<std::size_t>(i)].p_true;
        q.is_member = plan.in(i, target);
        for (int m = 0; m < models; ++m)
          if (m != target && !plan.in(i, m))
            q.out_confidences.push_back(
                universe.rows[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)].p_true);
        queries.push_back(std::move(q));
      }
      return watson_score(queries);
    }
    case AttackKind::lira: {
      std::vector<LiraQuery> queries;
      queries.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        LiraQuery q;
        q.sample_id = i;
        q.target_logit = trow[static_cast<std::size_t>(i)].logit_true;
        q.is_member = plan.in(i, target);
        for (int m = 0; m < models; ++m) {
          if (m == target) continue;
          const double x =
              universe.rows[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)].logit_true;
          (plan.in(i, m) ? q.in_logits : q.out_logits).push_back(x);
        }
        queries.push_back(std::move(q));
      }
      return lira_score(queries, opts.lira);
    }
    case AttackKind::rmia: {
      if (population.n_samples() == 0)
        throw ConfigError("rmia requires a population output table");
      std::vector<RmiaQuery> queries;
      queries.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        RmiaQuery q;
        q.sample_id = i;
        q.target_prob = trow[static_cast<std::size_t>(i)].p_true;
        q.is_member = plan.in(i, target);
        for (int m = 0; m < models; ++m)
          if (m != target)
            q.ref_probs.push_back(
                universe.rows[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)].p_true);
        queries.push_back(std::move(q));
      }
      std::vector<RmiaPopulationPoint> pop;
      pop.reserve(static_cast<std::size_t>(population.n_samples()));
      for (int z = 0; z < population.n_samples(); ++z) {
        RmiaPopulationPoint p;
        p.target_prob =
            population.rows[static_cast<std::size_t>(target)][static_cast<std::size_t>(z)].p_true;
        for (int m = 0; m < models; ++m)
          if (m != target)
            p.ref_probs.push_back(
                population.rows[static_cast<std::size_t>(m)][static_cast<std::size_t>(z)].p_true);
        pop.push_back(std::move(p));
      }
      return rmia_score(queries, pop, opts.rmia_gamma);
    }
  }
  throw Error("attack_fold: unreachable");
}

CrossValidationResult cross_validate(const ShadowSplitPlan& plan,
                                     const OutputTable& universe,
                                     const OutputTable& population,
                                     AttackKind attack,
                                     const CrossValidationOptions& opts) {
  CrossValidationResult res;
  res.attack = attack;
  const int models = universe.n_models();
  for (int target = 0; target < models; ++target) {
    AttackScores scores = attack_fold(plan, universe, population, attack, target, opts);
    RocCurve roc = roc_metrics(scores, opts.fpr_targets);
    FoldMetrics fm;
    fm.fold = target;
    fm.auc = roc.auc;
    fm.tpr_at = roc.tpr_at;
    fm.accuracy = roc.inference_accuracy;
    fm.n_scored = static_cast<int>(scores.scored.size());
    fm.n_skipped = static_cast<int>(scores.skipped.size());
    res.folds.push_back(std::move(fm));
    res.fold_scores.push_back(std::move(scores));
  }

  auto mean_sd = [&](auto getter) {
    double mean = 0.0;
    for (const FoldMetrics& f : res.folds) mean += getter(f);
    mean /= static_cast<double>(res.folds.size());
    double var = 0.0;
    for (const FoldMetrics& f : res.folds) {
      const double d = getter(f) - mean;
      var += d * d;
    }
    const double sd =
        res.folds.size() > 1 ? std::sqrt(var / (res.folds.size() - 1)) : 0.0;
    return std::make_pair(mean, sd);
  };

  std::tie(res.mean_auc, res.sd_auc) = mean_sd([](const FoldMetrics& f) { return f.auc; });
  std::tie(res.mean_accuracy, res.sd_accuracy) =
      mean_sd([](const FoldMetrics& f) { return f.accuracy; });
  for (double t : opts.fpr_targets) {
    auto [m, s] = mean_sd([t](const FoldMetrics& f) { return f.tpr_at.at(t); });
    res.mean_tpr_at[t] = m;
    res.sd_tpr_at[t] = s;
  }
  return res;
}

}  // namespace sdelab
