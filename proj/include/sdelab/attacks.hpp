#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sdelab {

// ---------------------------------------------------------------------------
// Shadow-split protocol

// Balanced membership design: each sample is IN exactly n_models/2 models.
struct ShadowSplitPlan {
  int n_models = 16;
  std::uint64_t seed = 0;
  std::vector<std::vector<bool>> membership;  // [sample][model]

  int n_samples() const { return static_cast<int>(membership.size()); }
  bool in(int sample, int model) const {
    return membership[static_cast<std::size_t>(sample)][static_cast<std::size_t>(model)];
  }
};

ShadowSplitPlan make_shadow_plan(int n_samples, int n_models, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Scores and metrics

// Probabilities entering a log or logit are clamped to [1e-12, 1-1e-12].
double clamp_prob(double p);
double logit(double p);

struct ScoredSample {
  int sample_id;
  double score;  // higher => more likely member
  bool is_member;
};

struct AttackScores {
  std::string attack;
  std::vector<ScoredSample> scored;
  std::vector<int> skipped;        // sample ids that could not be scored
  bool used_global_fallback = false;
};

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), includes (0,0),(1,1)
  double auc = 0.0;
  std::map<double, double> tpr_at;  // conservative: max TPR with FPR <= target
  double inference_accuracy = 0.0;  // best balanced accuracy over thresholds
};

RocCurve roc_metrics(const AttackScores& scores,
                     const std::vector<double>& fpr_targets = {0.001, 0.01});

// ---------------------------------------------------------------------------
// The six attacks, as pure functions of recorded model outputs.

struct LossRecord {
  int sample_id;
  double loss;
  bool is_member;
};

// score = tau - loss; member predicted iff loss < tau.
AttackScores yeom_score(const std::vector<LossRecord>& losses, double tau);

struct ShadowExample {
  std::vector<double> confidences;  // full probability vector
  int label;
  bool is_member;
};

struct TargetQuery {
  int sample_id;
  std::vector<double> confidences;
  int label;
  bool is_member;  // ground truth, for evaluation only
};

// Per-class logistic regression on sorted confidence vectors; classes with
// fewer than 10 shadow examples fall back to a global model (flagged).
AttackScores shokri_attack(const std::vector<ShadowExample>& shadow,
                           const std::vector<TargetQuery>& target);

// Modified entropy of a prediction; probabilities clamped to [1e-12, 1-1e-12].
double modified_entropy(const std::vector<double>& probs, int label);

// Thresholds per class chosen on shadow data to maximize balanced accuracy;
// score = threshold(class) - modified_entropy.
AttackScores song_mittal_score(const std::vector<TargetQuery>& target,
                               const std::vector<ShadowExample>& shadow);

struct CalibratedQuery {
  int sample_id;
  double target_confidence;               // p of the true class on the target
  std::vector<double> out_confidences;    // p of true class on OUT shadows
  bool is_member;
};

// score = logit(target p) - mean over OUT shadows of logit(p). Samples with
// no OUT shadows are skipped and reported.
AttackScores watson_score(const std::vector<CalibratedQuery>& queries);

struct LiraQuery {
  int sample_id;
  double target_logit;              // logit(p_true) on the target model
  std::vector<double> in_logits;    // logit(p_true) on IN shadows
  std::vector<double> out_logits;   // on OUT shadows
  bool is_member;
};

struct LiraOptions {
  double variance_floor = 1e-6;
  bool global_variance = false;  // pool variances across samples
};

// Per-sample Gaussian likelihood ratio: log N(x; mu_in, s_in^2) - log N(x;
// mu_out, s_out^2). Samples with fewer than 2 observations per side are
// skipped and reported.
AttackScores lira_score(const std::vector<LiraQuery>& queries,
                        const LiraOptions& opts = {});

struct RmiaQuery {
  int sample_id;
  double target_prob;               // p of true class on target
  std::vector<double> ref_probs;    // p of true class on each reference model
  bool is_member;
};

struct RmiaPopulationPoint {
  double target_prob;
  std::vector<double> ref_probs;
};

// ratio(x) = p_target(x) / mean_ref p_ref(x); score = fraction of population
// points z with ratio(x)/ratio(z) >= gamma. Zero reference means clamp at 1e-12.
AttackScores rmia_score(const std::vector<RmiaQuery>& queries,
                        const std::vector<RmiaPopulationPoint>& population,
                        double gamma = 1.0);

// ---------------------------------------------------------------------------
// Cross-validated evaluation over a recorded output table

// Target-model outputs recorded for one sample under one model.
struct ModelQuery {
  double loss = 0.0;
  std::vector<double> confidences;
  double p_true = 0.0;
  double logit_true = 0.0;
};

struct OutputTable {
  std::vector<int> labels;                   // per sample
  std::vector<std::vector<ModelQuery>> rows;  // [model][sample]

  int n_models() const { return static_cast<int>(rows.size()); }
  int n_samples() const { return static_cast<int>(labels.size()); }
};

enum class AttackKind { yeom, shokri, song_mittal, watson, lira, rmia };
const char* attack_name(AttackKind k);
AttackKind attack_from_name(const std::string& name);

struct FoldMetrics {
  int fold;
  double auc;
  std::map<double, double> tpr_at;
  double accuracy;
  int n_scored;
  int n_skipped;
};

struct CrossValidationResult {
  AttackKind attack;
  std::vector<FoldMetrics> folds;
  std::vector<AttackScores> fold_scores;  // kept for ROC export
  double mean_auc, sd_auc;
  std::map<double, double> mean_tpr_at, sd_tpr_at;
  double mean_accuracy, sd_accuracy;
};

struct CrossValidationOptions {
  std::vector<double> fpr_targets = {0.001, 0.01};
  double rmia_gamma = 1.0;
  LiraOptions lira;
};

// Runs one attack with every model as target once (all other models acting
// as shadows) and averages the metrics. `population` may be empty except for
// rmia, which requires population outputs disjoint from the scored samples.
CrossValidationResult cross_validate(const ShadowSplitPlan& plan,
                                     const OutputTable& universe,
                                     const OutputTable& population,
                                     AttackKind attack,
                                     const CrossValidationOptions& opts = {});

// Scores one fold (target model index) without aggregating. Exposed for the
// CLI and tests.
AttackScores attack_fold(const ShadowSplitPlan& plan, const OutputTable& universe,
                         const OutputTable& population, AttackKind attack,
                         int target, const CrossValidationOptions& opts = {});

}  // namespace sdelab
