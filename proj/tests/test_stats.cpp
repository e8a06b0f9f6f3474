#include "doctest.h"

#include <cmath>
#include <numeric>
#include <set>

#include "pacn/stats.hpp"

using namespace pacn;

namespace {

// Ours first everywhere; B second on 18 subsets, C second on the other 2; D last.
ScoreMatrix dominant_scenario() {
  ScoreMatrix s(4, std::vector<double>(20));
  for (int i = 0; i < 20; ++i) {
    s[0][i] = 0.60;
    s[1][i] = i < 18 ? 0.55 : 0.50;
    s[2][i] = i < 18 ? 0.50 : 0.55;
    s[3][i] = 0.40;
  }
  return s;
}

}  // namespace

TEST_CASE("evaluation examples") {
  std::vector<int> labels, perfect, constant;
  std::vector<std::string> devices;
  for (int i = 0; i < 50; ++i) {
    labels.push_back(i % 10);
    perfect.push_back(i % 10);
    constant.push_back(4);
    devices.push_back(i % 3 == 0 ? "a" : (i % 3 == 1 ? "b" : "s3"));
  }
  const auto p = evaluate_predictions(labels, perfect, devices, 10);
  CHECK(p.overall_accuracy == 1.0);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) CHECK(p.confusion[i][j] == (i == j ? 5 : 0));
  const auto c = evaluate_predictions(labels, constant, devices, 10);
  CHECK(c.overall_accuracy == doctest::Approx(0.1).epsilon(1e-12));
  std::vector<int> mixed = labels;
  for (int i = 0; i < 50; i += 4) mixed[i] = (mixed[i] + 1) % 10;
  const auto m = evaluate_predictions(labels, mixed, devices, 10);
  double weighted = 0;
  for (const auto& [d, acc] : m.per_device_accuracy) weighted += acc * m.per_device_count.at(d);
  CHECK(std::abs(weighted / m.total - m.overall_accuracy) < 1e-9);
  std::int64_t trace = 0;
  for (int i = 0; i < 10; ++i) {
    trace += m.confusion[i][i];
    CHECK(std::accumulate(m.confusion[i].begin(), m.confusion[i].end(), std::int64_t{0}) == 5);
  }
  CHECK(static_cast<double>(trace) / m.total == m.overall_accuracy);
  CHECK(m.to_text({"s3"}).find("unseen") != std::string::npos);
  CHECK_THROWS_AS(evaluate_predictions({}, {}, {}, 10), UsageError);
}

TEST_CASE("ranks with ties") {
  const ScoreMatrix s{{0.9, 0.5}, {0.7, 0.5}, {0.7, 0.5}};
  const auto r = rank_scores(s);
  CHECK(r[0][0] == 1.0);
  CHECK(r[1][0] == 2.5);
  CHECK(r[2][0] == 2.5);
  CHECK(r[0][1] == 2.0);
}

TEST_CASE("friedman hand example") {
  // Ranks per subset (A, B, C): (1,2,3) (1,3,2) (2,1,3) (1,2,3); rank sums 5, 8, 11.
  // chi2 = 12/(N k (k+1)) * (25 + 64 + 121) - 3 N (k+1) = 52.5 - 48 = 4.5.
  const ScoreMatrix s{{0.9, 0.9, 0.5, 0.9}, {0.8, 0.1, 0.9, 0.8}, {0.7, 0.5, 0.2, 0.7}};
  const auto f = friedman_test(rank_scores(s));
  CHECK(std::abs(f.statistic - 4.5) < 1e-9);
  CHECK(f.average_ranks == std::vector<double>{1.25, 2.0, 2.75});
  CHECK(std::abs(f.p_value - std::exp(-4.5 / 2)) < 1e-9);
  CHECK(std::abs(f.iman_davenport_f - 3 * 4.5 / (4 * 2 - 4.5)) < 1e-9);
}

TEST_CASE("friedman properties") {
  const ScoreMatrix tied(4, std::vector<double>(5, 0.3));
  const auto t = friedman_test(rank_scores(tied));
  CHECK(t.statistic == 0.0);
  for (double r : t.average_ranks) CHECK(r == 2.5);

  const auto p = friedman_test(rank_scores(dominant_scenario()));
  CHECK(p.average_ranks[0] == 1.0);
  CHECK(std::abs(p.average_ranks[1] - 2.1) < 1e-12);
  CHECK(std::abs(p.average_ranks[2] - 2.9) < 1e-12);
  CHECK(p.average_ranks[3] == 4.0);
  CHECK(std::abs(std::accumulate(p.average_ranks.begin(), p.average_ranks.end(), 0.0) - 10.0) < 1e-12);

  ScoreMatrix warped = dominant_scenario();
  for (auto& row : warped)
    for (auto& v : row) v = std::exp(5 * v) - 3;
  CHECK(friedman_test(rank_scores(warped)).statistic == p.statistic);
  CHECK_THROWS_AS(friedman_test(RankMatrix{{1.0, 1.0}}), UsageError);
}

TEST_CASE("nemenyi") {
  CHECK(nemenyi_q(2) == 1.960);
  CHECK(nemenyi_q(4) == 2.569);
  CHECK(nemenyi_q(10) == 3.164);
  CHECK(std::abs(nemenyi_cd(4, 20) - 2.569 * std::sqrt(20.0 / 120.0)) < 1e-12);
  CHECK(std::abs(nemenyi_cd(2, 9) - 1.960 / 3.0) < 1e-12);
  CHECK(nemenyi_cd(2, 1000000) < 0.002);
  for (int k = 2; k <= 10; ++k)
    for (int n : {5, 20, 37}) CHECK(std::abs(nemenyi_cd(k, 2 * n) - nemenyi_cd(k, n) / std::sqrt(2.0)) < 1e-12);
  CHECK_THROWS_AS(nemenyi_q(11), UsageError);
  CHECK_THROWS_AS(nemenyi_q(1), UsageError);
}

TEST_CASE("rank report") {
  const auto r = rank_report({"ours", "b", "c", "d"}, dominant_scenario());
  CHECK(r.histogram[0] == std::vector<int>{20, 0, 0, 0});
  CHECK(r.histogram[1] == std::vector<int>{0, 18, 2, 0});
  CHECK(r.histogram[3] == std::vector<int>{0, 0, 0, 20});
  CHECK(r.linked[1][2]);
  CHECK(!r.linked[0][3]);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double gap = std::abs(r.friedman.average_ranks[i] - r.friedman.average_ranks[j]);
      CHECK(r.linked[i][j] == (i != j && gap < r.cd));
    }
  CHECK(r.histogram_csv().find("ours,20,0,0,0") != std::string::npos);
  CHECK(r.cd_csv().find("ours") != std::string::npos);
  CHECK(r.histogram_svg().rfind("<svg", 0) == 0);
  CHECK(r.cd_svg().rfind("<svg", 0) == 0);
}

TEST_CASE("subsets") {
  const auto s = sample_subsets(1000, 20, 0.05, 4);
  CHECK(s.size() == 20);
  for (const auto& sub : s) {
    CHECK(sub.size() == 50);
    CHECK(std::set<std::size_t>(sub.begin(), sub.end()).size() == 50);
  }
  CHECK(sample_subsets(1000, 20, 0.05, 4) == s);
  CHECK(sample_subsets(1000, 20, 0.05, 5) != s);
  const std::vector<int> labels{0, 1, 2, 3}, pred{0, 1, 0, 0};
  CHECK(subset_accuracies(labels, pred, {{0, 1}, {2, 3}}) == std::vector<double>{1.0, 0.0});
}

TEST_CASE("score csv") {
  const auto [names, scores] = parse_score_csv("method,s1,s2\nours,0.5,0.6\nb,0.4,0.7\n", "mem");
  CHECK(names == std::vector<std::string>{"ours", "b"});
  CHECK(scores[1][1] == 0.7);
  CHECK_THROWS_AS(parse_score_csv("a,0.5,x\n", "mem"), IngestionError);
  CHECK_THROWS_AS(parse_score_csv("a,0.5,0.1\nb,0.2\n", "mem"), IngestionError);
}
