#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mime/emotions.hpp"
#include "mime/tensor.hpp"

namespace mime {

// Corpus-level BLEU-4 on a 0..100 scale: geometric mean of clipped modified
// n-gram precisions with the brevity penalty. Zero match counts at n >= 2
// get add-one smoothing; zero unigram overlap scores 0.
inline double evaluate_bleu(const std::vector<std::vector<std::string>>& references,
                            const std::vector<std::vector<std::string>>& hypotheses) {
  require(references.size() == hypotheses.size(),
          "bleu: " + std::to_string(references.size()) + " references vs " +
              std::to_string(hypotheses.size()) + " hypotheses");
  require(!references.empty(), "bleu: empty corpus");
  constexpr int kMaxOrder = 4;
  std::array<int64_t, kMaxOrder> matched{};
  std::array<int64_t, kMaxOrder> total{};
  int64_t ref_len = 0, hyp_len = 0;

  using Ngram = std::vector<std::string>;
  for (size_t i = 0; i < references.size(); ++i) {
    const auto& ref = references[i];
    const auto& hyp = hypotheses[i];
    ref_len += static_cast<int64_t>(ref.size());
    hyp_len += static_cast<int64_t>(hyp.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      std::map<Ngram, int64_t> ref_counts;
      for (size_t j = 0; j + static_cast<size_t>(n) <= ref.size(); ++j)
        ++ref_counts[Ngram(ref.begin() + static_cast<long>(j),
                           ref.begin() + static_cast<long>(j + static_cast<size_t>(n)))];
      std::map<Ngram, int64_t> hyp_counts;
      for (size_t j = 0; j + static_cast<size_t>(n) <= hyp.size(); ++j)
        ++hyp_counts[Ngram(hyp.begin() + static_cast<long>(j),
                           hyp.begin() + static_cast<long>(j + static_cast<size_t>(n)))];
      for (const auto& [gram, count] : hyp_counts) {
        total[static_cast<size_t>(n - 1)] += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end())
          matched[static_cast<size_t>(n - 1)] += std::min(count, it->second);
      }
    }
  }

  if (hyp_len == 0) return 0.0;
  double log_precision_sum = 0.0;
  for (int n = 1; n <= kMaxOrder; ++n) {
    int64_t m = matched[static_cast<size_t>(n - 1)];
    int64_t t = total[static_cast<size_t>(n - 1)];
    double p;
    if (n == 1) {
      if (m == 0) return 0.0;
      p = static_cast<double>(m) / static_cast<double>(t);
    } else if (m == 0) {
      p = 1.0 / static_cast<double>(t + 1);
    } else {
      p = static_cast<double>(m) / static_cast<double>(t);
    }
    log_precision_sum += std::log(p);
  }
  const double bp =
      hyp_len >= ref_len ? 1.0
                         : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_precision_sum / kMaxOrder);
}

// Fraction of samples whose gold label is among the k most probable
// predictions; probability ties resolved toward the lowest label id.
inline double topk_accuracy(const std::vector<std::vector<double>>& distributions,
                            const std::vector<int>& gold_labels, int k) {
  require(distributions.size() == gold_labels.size(), "topk: sizes differ");
  require(!distributions.empty(), "topk: empty input");
  int64_t hits = 0;
  for (size_t s = 0; s < distributions.size(); ++s) {
    const auto& p = distributions[s];
    require(k >= 1 && k <= static_cast<int>(p.size()), "topk: k out of range");
    const int gold = gold_labels[s];
    require(gold >= 0 && gold < static_cast<int>(p.size()), "topk: gold label out of range");
    // gold is in the top k iff fewer than k labels strictly beat it or tie
    // with a lower id
    int ahead = 0;
    for (int j = 0; j < static_cast<int>(p.size()); ++j) {
      if (j == gold) continue;
      if (p[static_cast<size_t>(j)] > p[static_cast<size_t>(gold)] ||
          (p[static_cast<size_t>(j)] == p[static_cast<size_t>(gold)] && j < gold))
        ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(distributions.size());
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
// Returns eigenvalues descending with matching eigenvectors as rows.
struct EigenResult {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
};

inline EigenResult jacobi_eigen_symmetric(std::vector<double> a, int n) {
  require(n >= 1 && static_cast<int64_t>(a.size()) == static_cast<int64_t>(n) * n,
          "eigen: bad matrix size");
  std::vector<double> v(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;
  auto at = [n](std::vector<double>& m, int r, int c) -> double& {
    return m[static_cast<size_t>(r) * n + c];
  };
  double scale = 0.0;
  for (int i = 0; i < n; ++i) scale = std::max(scale, std::abs(at(a, i, i)));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) scale = std::max(scale, std::abs(at(a, i, j)));
  const double tol = std::max(scale, 1.0) * 1e-14;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += at(a, i, j) * at(a, i, j);
    if (std::sqrt(off) < tol) break;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = at(a, p, q);
        if (std::abs(apq) < tol * 1e-2) continue;
        const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < n; ++i) {
          const double aip = at(a, i, p), aiq = at(a, i, q);
          at(a, i, p) = c * aip - s * aiq;
          at(a, i, q) = s * aip + c * aiq;
        }
        for (int i = 0; i < n; ++i) {
          const double api = at(a, p, i), aqi = at(a, q, i);
          at(a, p, i) = c * api - s * aqi;
          at(a, q, i) = s * api + c * aqi;
        }
        for (int i = 0; i < n; ++i) {
          const double vip = at(v, i, p), viq = at(v, i, q);
          at(v, i, p) = c * vip - s * viq;
          at(v, i, q) = s * vip + c * viq;
        }
      }
    }
  }

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    return at(a, x, x) > at(a, y, y);
  });
  EigenResult res;
  for (int r = 0; r < n; ++r) {
    const int col = order[static_cast<size_t>(r)];
    res.values.push_back(at(a, col, col));
    std::vector<double> vec(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) vec[static_cast<size_t>(i)] = at(v, i, col);
    res.vectors.push_back(std::move(vec));
  }
  return res;
}

struct PcaResult {
  std::vector<std::array<double, 2>> coords;  // one row per input row
  std::array<double, 2> eigenvalues{};
  double total_variance = 0.0;   // sum of all eigenvalues
  double captured_fraction = 0.0;
};

// Top-two principal components of the row set, via the Gram matrix of the
// centered rows (cheap when rows << dims). Coordinates of row i on
// component j come out as sqrt(lambda_j) * u_j[i]; each component's sign is
// fixed by making its largest-magnitude coordinate positive.
template <typename S>
PcaResult pca_top2(const std::vector<S>& data, int rows, int cols) {
  require(rows >= 2 && cols >= 1, "pca: need at least two rows");
  require(static_cast<int64_t>(data.size()) == static_cast<int64_t>(rows) * cols,
          "pca: data size mismatch");
  std::vector<double> centered(static_cast<size_t>(rows) * cols);
  for (int j = 0; j < cols; ++j) {
    double mean = 0.0;
    for (int i = 0; i < rows; ++i) mean += static_cast<double>(data[static_cast<size_t>(i) * cols + j]);
    mean /= rows;
    for (int i = 0; i < rows; ++i)
      centered[static_cast<size_t>(i) * cols + j] =
          static_cast<double>(data[static_cast<size_t>(i) * cols + j]) - mean;
  }
  std::vector<double> gram(static_cast<size_t>(rows) * rows, 0.0);
  for (int i = 0; i < rows; ++i)
    for (int j = i; j < rows; ++j) {
      double dot = 0.0;
      for (int k = 0; k < cols; ++k)
        dot += centered[static_cast<size_t>(i) * cols + k] *
               centered[static_cast<size_t>(j) * cols + k];
      gram[static_cast<size_t>(i) * rows + j] = dot;
      gram[static_cast<size_t>(j) * rows + i] = dot;
    }
  EigenResult eig = jacobi_eigen_symmetric(gram, rows);
  double total = 0.0;
  for (double ev : eig.values) total += std::max(ev, 0.0);
  const double rank_tol = std::max(total, 1e-300) * 1e-12;
  require(eig.values.size() >= 2 && eig.values[1] > rank_tol,
          "pca: row set has rank < 2, nothing to project onto");

  PcaResult res;
  res.total_variance = total;
  res.eigenvalues = {eig.values[0], eig.values[1]};
  res.captured_fraction = (eig.values[0] + eig.values[1]) / total;
  res.coords.assign(static_cast<size_t>(rows), {0.0, 0.0});
  for (int comp = 0; comp < 2; ++comp) {
    std::vector<double>& u = eig.vectors[static_cast<size_t>(comp)];
    int biggest = 0;
    for (int i = 1; i < rows; ++i)
      if (std::abs(u[static_cast<size_t>(i)]) > std::abs(u[static_cast<size_t>(biggest)]))
        biggest = i;
    const double sign = u[static_cast<size_t>(biggest)] < 0 ? -1.0 : 1.0;
    const double lambda_sqrt = std::sqrt(std::max(eig.values[static_cast<size_t>(comp)], 0.0));
    for (int i = 0; i < rows; ++i)
      res.coords[static_cast<size_t>(i)][static_cast<size_t>(comp)] =
          sign * lambda_sqrt * u[static_cast<size_t>(i)];
  }
  return res;
}

// PCA of the 32 emotion embedding rows, for the diagnostics file.
template <typename S>
PcaResult project_emotion_embeddings(const Parameter<S>& emotion_table) {
  require(emotion_table.shape.rows == kNumEmotions,
          "pca: emotion table must have " + std::to_string(kNumEmotions) + " rows");
  return pca_top2(emotion_table.value, emotion_table.shape.rows, emotion_table.shape.cols);
}

// Euclidean distance between the positive-group and negative-group centroids
// in the projected plane.
inline double centroid_separation(const PcaResult& pca, const EmotionGrouping& grouping) {
  std::array<double, 2> pos{}, neg{};
  for (int id : grouping.positive()) {
    pos[0] += pca.coords[static_cast<size_t>(id)][0];
    pos[1] += pca.coords[static_cast<size_t>(id)][1];
  }
  for (int id : grouping.negative()) {
    neg[0] += pca.coords[static_cast<size_t>(id)][0];
    neg[1] += pca.coords[static_cast<size_t>(id)][1];
  }
  const double np = static_cast<double>(grouping.positive().size());
  const double nn = static_cast<double>(grouping.negative().size());
  const double dx = pos[0] / np - neg[0] / nn;
  const double dy = pos[1] / np - neg[1] / nn;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace mime
