#include "pacn/stats.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>

#include "pacn/dataset.hpp"
#include "pacn/error.hpp"
#include "pacn/rng.hpp"
#include "pacn/train.hpp"

namespace pacn {

using i64 = std::int64_t;

// ---------------------------------------------------------------------------
// Accuracy

EvalResult evaluate_predictions(const std::vector<int>& labels, const std::vector<int>& predicted,
                                const std::vector<std::string>& devices, int classes) {
  if (labels.empty()) throw UsageError("evaluate: empty dataset");
  if (predicted.size() != labels.size() || devices.size() != labels.size()) {
    throw UsageError("evaluate: labels, predictions and devices differ in length");
  }
  EvalResult r;
  r.total = static_cast<i64>(labels.size());
  r.predictions = predicted;
  r.confusion.assign(static_cast<std::size_t>(classes), std::vector<i64>(static_cast<std::size_t>(classes), 0));
  std::map<std::string, i64> dev_ok;
  i64 ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw UsageError("evaluate: label outside 0.." + std::to_string(classes - 1));
    if (predicted[i] < 0 || predicted[i] >= classes) throw UsageError("evaluate: prediction out of range");
    ++r.confusion[labels[i]][predicted[i]];
    const bool hit = labels[i] == predicted[i];
    ok += hit;
    dev_ok[devices[i]] += hit;
    ++r.per_device_count[devices[i]];
  }
  r.overall_accuracy = static_cast<double>(ok) / static_cast<double>(r.total);
  for (const auto& [d, n] : r.per_device_count) r.per_device_accuracy[d] = static_cast<double>(dev_ok[d]) / n;
  for (int c = 0; c < classes; ++c) {
    const i64 n = std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), i64{0});
    r.per_class_accuracy.push_back(n ? static_cast<double>(r.confusion[c][c]) / n
                                     : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

EvalResult evaluate(const PacnModel& model, const std::vector<FeatureClip>& data, int threads) {
  if (data.empty()) throw UsageError("evaluate: empty dataset");
  const Tensor z = predict_logits(model, data, 32, threads);
  const i64 k = model.config().num_classes;
  std::vector<int> labels, predicted;
  std::vector<std::string> devices;
  for (std::size_t i = 0; i < data.size(); ++i) {
    labels.push_back(data[i].scene_label);
    predicted.push_back(argmax_row(z.ptr() + static_cast<i64>(i) * k, k));
    devices.push_back(data[i].device_id);
  }
  return evaluate_predictions(labels, predicted, devices, static_cast<int>(k));
}

namespace {
std::string scene_labels_at(std::size_t c) {
  return c < scene_labels().size() ? scene_labels()[c] : "class" + std::to_string(c);
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}
}  // namespace

std::string EvalResult::to_text(const std::vector<std::string>& unseen) const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "overall accuracy " << overall_accuracy << " (" << total << " clips)\n";
  os << "per device:\n";
  for (const auto& [d, acc] : per_device_accuracy) {
    os << "  " << std::left << std::setw(6) << d << std::right << " " << acc << "  n=" << per_device_count.at(d)
       << (contains(unseen, d) ? "  (unseen)" : "") << "\n";
  }
  for (const auto& d : unseen) {
    if (!per_device_accuracy.count(d)) os << "  " << std::left << std::setw(6) << d << " no clips  (unseen)\n";
  }
  os << "per class:\n";
  for (std::size_t c = 0; c < per_class_accuracy.size(); ++c) {
    if (std::isnan(per_class_accuracy[c])) continue;
    os << "  " << std::left << std::setw(18) << scene_labels_at(c) << std::right << " " << per_class_accuracy[c] << "\n";
  }
  os << "confusion (rows true, columns predicted):\n";
  for (const auto& row : confusion) {
    os << " ";
    for (auto v : row) os << " " << std::setw(5) << v;
    os << "\n";
  }
  return os.str();
}

std::string EvalResult::to_csv(const std::vector<std::string>& unseen) const {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "kind,key,accuracy,count,unseen\n";
  os << "overall,all," << overall_accuracy << "," << total << ",0\n";
  for (const auto& [d, acc] : per_device_accuracy) {
    os << "device," << d << "," << acc << "," << per_device_count.at(d) << "," << (contains(unseen, d) ? 1 : 0) << "\n";
  }
  for (std::size_t c = 0; c < per_class_accuracy.size(); ++c) {
    if (std::isnan(per_class_accuracy[c])) continue;
    const i64 n = std::accumulate(confusion[c].begin(), confusion[c].end(), i64{0});
    os << "class," << scene_labels_at(c) << "," << per_class_accuracy[c] << "," << n << ",0\n";
  }
  for (std::size_t c = 0; c < confusion.size(); ++c) {
    os << "confusion," << scene_labels_at(c);
    for (auto v : confusion[c]) os << "," << v;
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Ranks and tests

RankMatrix rank_scores(const ScoreMatrix& scores) {
  if (scores.empty()) throw UsageError("rank_scores: no methods");
  const std::size_t k = scores.size(), n = scores[0].size();
  for (const auto& row : scores) {
    if (row.size() != n) throw UsageError("rank_scores: ragged score matrix");
  }
  RankMatrix ranks(k, std::vector<double>(n, 0.0));
  std::vector<std::size_t> order(k);
  for (std::size_t s = 0; s < n; ++s) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a][s] > scores[b][s]; });
    for (std::size_t i = 0; i < k;) {
      std::size_t j = i;
      while (j + 1 < k && scores[order[j + 1]][s] == scores[order[i]][s]) ++j;
      const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
      for (std::size_t q = i; q <= j; ++q) ranks[order[q]][s] = avg;
      i = j + 1;
    }
  }
  return ranks;
}

FriedmanResult friedman_test(const RankMatrix& ranks) {
  FriedmanResult r;
  r.k = static_cast<int>(ranks.size());
  if (r.k < 2) throw UsageError("friedman_test needs at least 2 methods");
  r.n = static_cast<int>(ranks[0].size());
  if (r.n < 2) throw UsageError("friedman_test needs at least 2 subsets");
  for (const auto& row : ranks) {
    if (static_cast<int>(row.size()) != r.n) throw UsageError("friedman_test: ragged rank matrix");
    r.average_ranks.push_back(std::accumulate(row.begin(), row.end(), 0.0) / r.n);
  }
  const double k = r.k, n = r.n;
  double sum_sq = 0.0;
  for (double a : r.average_ranks) sum_sq += a * a;
  r.statistic = 12.0 * n / (k * (k + 1.0)) * (sum_sq - k * (k + 1.0) * (k + 1.0) / 4.0);
  if (std::abs(r.statistic) < 1e-12) r.statistic = 0.0;
  const double denom = n * (k - 1.0) - r.statistic;
  r.iman_davenport_f = denom > 0.0 ? (n - 1.0) * r.statistic / denom : std::numeric_limits<double>::infinity();
  boost::math::chi_squared dist(k - 1.0);
  r.p_value = r.statistic > 0.0 ? boost::math::cdf(boost::math::complement(dist, r.statistic)) : 1.0;
  return r;
}

double nemenyi_q(int k, double alpha) {
  static constexpr double q05[] = {1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164};
  static constexpr double q10[] = {1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920};
  if (k < 2 || k > 10) throw UsageError("Nemenyi table covers k = 2..10, got " + std::to_string(k));
  if (alpha == 0.05) return q05[k - 2];
  if (alpha == 0.10) return q10[k - 2];
  throw UsageError("Nemenyi table covers alpha 0.05 and 0.10");
}

double nemenyi_cd(int k, int n, double alpha) {
  if (n < 1) throw UsageError("nemenyi_cd needs N >= 1");
  return nemenyi_q(k, alpha) * std::sqrt(static_cast<double>(k) * (k + 1) / (6.0 * n));
}

RankReport rank_report(const std::vector<std::string>& methods, const ScoreMatrix& scores, double alpha) {
  if (methods.size() != scores.size()) throw UsageError("rank_report: names and score rows differ");
  RankReport r;
  r.methods = methods;
  r.alpha = alpha;
  const RankMatrix ranks = rank_scores(scores);
  r.friedman = friedman_test(ranks);
  const int k = r.friedman.k;
  r.cd = nemenyi_cd(k, r.friedman.n, alpha);

  r.histogram.assign(static_cast<std::size_t>(k), std::vector<int>(static_cast<std::size_t>(k), 0));
  const std::size_t n = scores[0].size();
  for (std::size_t s = 0; s < n; ++s) {
    for (int m = 0; m < k; ++m) {
      int better = 0;
      for (int o = 0; o < k; ++o) better += scores[o][s] > scores[m][s];
      ++r.histogram[m][better];
    }
  }

  const auto& avg = r.friedman.average_ranks;
  r.linked.assign(static_cast<std::size_t>(k), std::vector<bool>(static_cast<std::size_t>(k), false));
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) r.linked[a][b] = a != b && std::abs(avg[a] - avg[b]) < r.cd;

  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return avg[a] < avg[b]; });
  int last_end = -1;
  for (int i = 0; i < k; ++i) {
    int j = i;
    while (j + 1 < k && avg[order[j + 1]] - avg[order[i]] < r.cd) ++j;
    if (j > i && j > last_end) {
      r.groups.emplace_back(order.begin() + i, order.begin() + j + 1);
      last_end = j;
    }
  }
  return r;
}

std::string RankReport::histogram_csv() const {
  std::ostringstream os;
  os << "method";
  for (std::size_t r = 0; r < methods.size(); ++r) os << ",rank" << r + 1;
  os << "\n";
  for (std::size_t m = 0; m < methods.size(); ++m) {
    os << methods[m];
    for (int c : histogram[m]) os << "," << c;
    os << "\n";
  }
  return os.str();
}

std::string RankReport::cd_csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "method,average_rank,cd,alpha,group\n";
  for (std::size_t m = 0; m < methods.size(); ++m) {
    std::string g;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      if (std::find(groups[gi].begin(), groups[gi].end(), static_cast<int>(m)) != groups[gi].end()) {
        g += (g.empty() ? "" : ";") + std::to_string(gi + 1);
      }
    }
    os << methods[m] << "," << friedman.average_ranks[m] << "," << cd << "," << alpha << "," << g << "\n";
  }
  return os.str();
}

namespace {

std::string fmt(double v, int precision = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                          "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};

}  // namespace

std::string RankReport::histogram_svg() const {
  const int k = static_cast<int>(methods.size());
  int peak = 1;
  for (const auto& row : histogram)
    for (int c : row) peak = std::max(peak, c);
  const double W = 120.0 + 90.0 * k, H = 300.0, x0 = 50.0, y0 = 250.0, plot_h = 200.0;
  const double group_w = (W - x0 - 20.0) / k, bar_w = group_w * 0.8 / k;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(W, 0) << "\" height=\"" << fmt(H + 20 * k, 0)
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << fmt(W - 10, 0) << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y0 - plot_h << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << x0 - 8 << "\" y=\"" << y0 - plot_h + 4 << "\" text-anchor=\"end\">" << peak << "</text>\n";
  os << "<text x=\"" << x0 - 8 << "\" y=\"" << y0 + 4 << "\" text-anchor=\"end\">0</text>\n";
  for (int r = 0; r < k; ++r) {
    const double gx = x0 + 10.0 + r * group_w;
    os << "<text x=\"" << fmt(gx + group_w * 0.4) << "\" y=\"" << y0 + 18 << "\" text-anchor=\"middle\">rank " << r + 1
       << "</text>\n";
    for (int m = 0; m < k; ++m) {
      const double h = plot_h * histogram[m][r] / peak;
      os << "<rect x=\"" << fmt(gx + m * bar_w) << "\" y=\"" << fmt(y0 - h) << "\" width=\"" << fmt(bar_w) << "\" height=\""
         << fmt(h) << "\" fill=\"" << kPalette[m % 10] << "\"/>\n";
    }
  }
  for (int m = 0; m < k; ++m) {
    const double ly = H + 20.0 * m;
    os << "<rect x=\"" << x0 << "\" y=\"" << ly - 10 << "\" width=\"12\" height=\"12\" fill=\"" << kPalette[m % 10] << "\"/>\n";
    os << "<text x=\"" << x0 + 18 << "\" y=\"" << ly << "\">" << xml_escape(methods[m]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string RankReport::cd_svg() const {
  const int k = static_cast<int>(methods.size());
  const double W = 600.0, x0 = 60.0, x1 = 540.0, axis_y = 60.0;
  auto xr = [&](double rank) { return x0 + (x1 - x0) * (rank - 1.0) / std::max(1, k - 1); };
  const double H = axis_y + 40.0 + 22.0 * k + 12.0 * static_cast<double>(groups.size());
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(W, 0) << "\" height=\"" << fmt(H, 0)
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  // CD bar above the axis.
  os << "<line x1=\"" << fmt(xr(1.0)) << "\" y1=\"20\" x2=\"" << fmt(xr(1.0 + cd)) << "\" y2=\"20\" stroke=\"black\" stroke-width=\"2\"/>\n";
  os << "<text x=\"" << fmt(xr(1.0)) << "\" y=\"14\">CD = " << fmt(cd, 3) << "</text>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << axis_y << "\" x2=\"" << x1 << "\" y2=\"" << axis_y << "\" stroke=\"black\"/>\n";
  for (int r = 1; r <= k; ++r) {
    os << "<line x1=\"" << fmt(xr(r)) << "\" y1=\"" << axis_y - 5 << "\" x2=\"" << fmt(xr(r)) << "\" y2=\"" << axis_y
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << fmt(xr(r)) << "\" y=\"" << axis_y - 8 << "\" text-anchor=\"middle\">" << r << "</text>\n";
  }
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  const auto& avg = friedman.average_ranks;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return avg[a] < avg[b]; });
  for (int i = 0; i < k; ++i) {
    const int m = order[i];
    const double y = axis_y + 30.0 + 22.0 * i;
    const double x = xr(avg[m]);
    os << "<line x1=\"" << fmt(x) << "\" y1=\"" << axis_y << "\" x2=\"" << fmt(x) << "\" y2=\"" << fmt(y) << "\" stroke=\""
       << kPalette[m % 10] << "\"/>\n";
    os << "<text x=\"" << fmt(x + 6) << "\" y=\"" << fmt(y + 4) << "\">" << xml_escape(methods[m]) << " ("
       << fmt(avg[m]) << ")</text>\n";
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double y = axis_y + 12.0 + 6.0 * static_cast<double>(g);
    const double a = xr(avg[groups[g].front()]) - 3, b = xr(avg[groups[g].back()]) + 3;
    os << "<line x1=\"" << fmt(a) << "\" y1=\"" << fmt(y) << "\" x2=\"" << fmt(b) << "\" y2=\"" << fmt(y)
       << "\" stroke=\"black\" stroke-width=\"3\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string RankReport::to_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "Friedman chi2 = " << friedman.statistic << " (k=" << friedman.k << ", N=" << friedman.n
     << ", p=" << friedman.p_value << "), Iman-Davenport F = " << friedman.iman_davenport_f << "\n";
  os << "Nemenyi CD (alpha " << alpha << ") = " << cd << "\n";
  for (std::size_t m = 0; m < methods.size(); ++m) {
    os << "  " << std::left << std::setw(20) << methods[m] << std::right << " avg rank " << friedman.average_ranks[m]
       << "  rank-1 count " << histogram[m][0] << "\n";
  }
  for (std::size_t a = 0; a < methods.size(); ++a)
    for (std::size_t b = a + 1; b < methods.size(); ++b) {
      os << "  " << methods[a] << " vs " << methods[b] << ": "
         << (linked[a][b] ? "not significant" : "significant") << "\n";
    }
  return os.str();
}

// ---------------------------------------------------------------------------
// Subsets

std::vector<std::vector<std::size_t>> sample_subsets(std::size_t n, int count, double fraction, std::uint64_t seed) {
  if (n == 0) throw UsageError("sample_subsets: empty evaluation set");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw UsageError("subset fraction must be in (0, 1]");
  const auto m = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  std::vector<std::vector<std::size_t>> out;
  for (int s = 0; s < count; ++s) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed({seed, 0x5b5e7, static_cast<std::uint64_t>(s)}));
    // Partial Fisher-Yates: the first m positions are a uniform sample.
    for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    out.push_back(std::move(idx));
  }
  return out;
}

std::vector<double> subset_accuracies(const std::vector<int>& labels, const std::vector<int>& predicted,
                                      const std::vector<std::vector<std::size_t>>& subsets) {
  std::vector<double> out;
  for (const auto& s : subsets) {
    std::size_t ok = 0;
    for (auto i : s) ok += labels.at(i) == predicted.at(i);
    out.push_back(static_cast<double>(ok) / static_cast<double>(s.size()));
  }
  return out;
}

std::pair<std::vector<std::string>, ScoreMatrix> parse_score_csv(const std::string& text, const std::string& what) {
  std::vector<std::string> names;
  ScoreMatrix scores;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, cell;
    std::getline(ls, name, ',');
    if (scores.empty() && names.empty() && name == "method") continue;
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw IngestionError(what + ":" + std::to_string(line_no) + ": bad score '" + cell + "'");
      }
    }
    if (!scores.empty() && row.size() != scores[0].size()) {
      throw IngestionError(what + ":" + std::to_string(line_no) + ": expected " + std::to_string(scores[0].size()) +
                           " scores, got " + std::to_string(row.size()));
    }
    names.push_back(name);
    scores.push_back(std::move(row));
  }
  if (scores.size() < 2) throw IngestionError(what + ": need at least two methods");
  return {names, scores};
}

}  // namespace pacn
