#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pacn/audio.hpp"
#include "pacn/model.hpp"

namespace pacn {

struct EvalResult {
  double overall_accuracy = 0.0;
  std::map<std::string, double> per_device_accuracy;
  std::map<std::string, std::int64_t> per_device_count;
  std::vector<double> per_class_accuracy;  // NaN for classes without samples
  std::vector<std::vector<std::int64_t>> confusion;  // rows true, columns predicted
  std::vector<int> predictions;
  std::int64_t total = 0;

  /// Devices listed in `unseen` are marked as such.
  std::string to_text(const std::vector<std::string>& unseen = {}) const;
  std::string to_csv(const std::vector<std::string>& unseen = {}) const;
};

EvalResult evaluate_predictions(const std::vector<int>& labels, const std::vector<int>& predicted,
                                const std::vector<std::string>& devices, int classes);
/// Argmax of the logits, lowest class index on ties.
EvalResult evaluate(const PacnModel& model, const std::vector<FeatureClip>& data, int threads = 1);

/// methods x subsets. Rank 1 is the best (highest) score; ties share the
/// average of the ranks they span.
using ScoreMatrix = std::vector<std::vector<double>>;
using RankMatrix = std::vector<std::vector<double>>;
RankMatrix rank_scores(const ScoreMatrix& scores);

struct FriedmanResult {
  int k = 0;  // methods
  int n = 0;  // subsets
  std::vector<double> average_ranks;
  double statistic = 0.0;         // chi^2_F
  double iman_davenport_f = 0.0;  // (N-1) chi^2 / (N(k-1) - chi^2)
  double p_value = 1.0;           // chi^2 with k-1 degrees of freedom
};

FriedmanResult friedman_test(const RankMatrix& ranks);

/// Studentized range statistic divided by sqrt(2), alpha in {0.05, 0.10}, k in 2..10.
double nemenyi_q(int k, double alpha = 0.05);
/// q_alpha(k) * sqrt(k (k + 1) / (6 N)).
double nemenyi_cd(int k, int n, double alpha = 0.05);

struct RankReport {
  std::vector<std::string> methods;
  /// histogram[m][r] = subsets on which method m took rank r + 1 (ties count
  /// at the best rank of the tie).
  std::vector<std::vector<int>> histogram;
  FriedmanResult friedman;
  double alpha = 0.05;
  double cd = 0.0;
  /// linked[a][b]: average-rank gap below the critical difference.
  std::vector<std::vector<bool>> linked;
  /// Maximal sets of methods (by index, best first) whose rank span is below CD.
  std::vector<std::vector<int>> groups;

  std::string histogram_csv() const;
  std::string cd_csv() const;
  std::string histogram_svg() const;
  std::string cd_svg() const;
  std::string to_text() const;
};

RankReport rank_report(const std::vector<std::string>& methods, const ScoreMatrix& scores,
                       double alpha = 0.05);

/// `count` subsets, each drawn without replacement with round(fraction * n) items.
std::vector<std::vector<std::size_t>> sample_subsets(std::size_t n, int count, double fraction,
                                                     std::uint64_t seed);
std::vector<double> subset_accuracies(const std::vector<int>& labels, const std::vector<int>& predicted,
                                      const std::vector<std::vector<std::size_t>>& subsets);

/// "method,s1,s2,..." rows; an optional header row starts with "method".
std::pair<std::vector<std::string>, ScoreMatrix> parse_score_csv(const std::string& text,
                                                                 const std::string& what);

}  // namespace pacn
