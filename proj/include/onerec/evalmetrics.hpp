#pragma once

// Evaluation protocols: retrieval metrics over generated candidates, AUC for
// label prediction and the double-weighted F1 used to score text answers.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "onerec/common.hpp"
#include "onerec/model.hpp"
#include "onerec/rqkmeans.hpp"

namespace onerec::eval {

/// 1 when any target is among the first k candidates. Candidates must be distinct.
int pass_at_k(std::span<const rq::ItemicCode> candidates, std::span<const rq::ItemicCode> targets, int k);

/// Fraction of the (deduplicated) targets found among the first k candidates.
double recall_at_k(std::span<const rq::ItemicCode> candidates, std::span<const rq::ItemicCode> targets, int k);

struct LabelScore {
  double score = 0.0;  // probability of the positive class
  bool label = false;
};

/// Mann-Whitney AUC by rank sums with average ranks for ties.
double auc(std::span<const LabelScore> scores);

/// P(yes) / (P(yes) + P(no)) at the position following `prompt`.
template <typename T>
double yes_probability(const model::Parameters<T>& params, std::span<const int> prompt, int yes_token, int no_token);

/// Two-way softmax of a pair of logits.
double two_way_probability(double yes_logit, double no_logit);

struct Wip {
  std::string statement;
  int importance = 1;  // 1..5
};

struct WipMatch {
  int gt = 0;
  int model = 0;
  double q = 0.0;
};

struct JudgeTranscript {
  std::vector<Wip> gt_wips;
  std::vector<Wip> model_wips;
  std::vector<WipMatch> matches;
  std::vector<int> unmatched_gt;
  std::vector<int> unmatched_model;

  /// Importances in range, q in [0, 1], each WIP matched or unmatched exactly once.
  void validate() const;
  std::string to_json() const;
  static JudgeTranscript from_json(std::string_view text);
};

struct F1Parts {
  double tp = 0.0;
  double fp = 0.0;
  double fn = 0.0;
  double f1 = 0.0;
};

F1Parts dwf1_parts(const JudgeTranscript& t);
/// 2 TP / (2 TP + FP + FN); 0 when all three are 0.
double dwf1(const JudgeTranscript& t);
/// Mean dwf1.
double judge_score(std::span<const JudgeTranscript> transcripts);

/// Multiset F1 of whitespace-separated tokens. Two empty strings score 1.
double lexical_match_quality(std::string_view a, std::string_view b);

/// Comma-separated facts; the first carries importance 5, the second 3, the rest 1.
std::vector<Wip> extract_wips(std::string_view text);

/// Greedy matching by lexical quality: repeatedly pairs the unmatched WIPs
/// with the highest q (ties to the lower gt, then model index) while q > 0.
JudgeTranscript build_transcript(std::string_view reference, std::string_view generated);

/// task -> metric -> value
struct MetricReport {
  std::map<std::string, std::map<std::string, double>> tasks;

  std::string to_json() const;
  static MetricReport from_json(std::string_view text);
  /// task,metric,value rows
  std::string to_csv() const;
  bool operator==(const MetricReport&) const = default;
};

}  // namespace onerec::eval
