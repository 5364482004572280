#pragma once

// Brute-force reference implementations used by the unit and acceptance
// tests. They are written directly from the definitions and share no code
// with the library beyond plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qure/embedding_store.hpp"
#include "qure/evaluator.hpp"
#include "qure/miner.hpp"
#include "qure/rng.hpp"
#include "qure/scorer.hpp"

namespace qure::testing {

// Ranks (1-based) of the hard-negative set, or nullopt when fewer than two
// drops exist below the target.
inline std::optional<std::set<std::size_t>> oracle_two_drops(const std::vector<double>& s,
                                                             std::size_t target_pos) {
  const double t = s[target_pos - 1];
  const std::size_t n = s.size();
  std::vector<std::size_t> below;
  for (std::size_t j = 1; j <= n; ++j) {
    if (s[j - 1] < t) below.push_back(j);
  }
  std::vector<std::pair<double, std::size_t>> drops;
  for (std::size_t j : below) {
    if (j + 1 <= n) drops.push_back({s[j - 1] - s[j], j});
  }
  if (drops.size() < 2) return std::nullopt;
  std::sort(drops.begin(), drops.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  const std::size_t k1 = drops[0].second, k2 = drops[1].second;
  std::set<std::size_t> out;
  for (std::size_t j = std::min(k1, k2) + 1; j <= std::max(k1, k2); ++j) {
    if (s[j - 1] < t) out.insert(j);
  }
  return out;
}

// Random descending score vector. Roughly a third of instances are drawn from
// a coarse grid so equal scores and equal drops occur.
inline std::vector<double> random_scores(SplitMix64& rng, std::size_t n) {
  std::vector<double> s(n);
  const bool coarse = rng.below(3) == 0;
  for (auto& x : s) {
    x = coarse ? static_cast<double>(rng.below(12)) * 0.25 : rng.unit() * 4.0 - 2.0;
  }
  std::sort(s.begin(), s.end(), std::greater<>());
  return s;
}

inline SortedScoreView make_view(const std::vector<double>& scores, std::size_t target_pos) {
  SortedScoreView v;
  v.query_id = "q";
  v.scores = scores;
  for (std::size_t i = 0; i < scores.size(); ++i) v.image_ids.push_back("img" + std::to_string(i + 1));
  v.target_pos = target_pos;
  return v;
}

inline std::set<std::size_t> ranks_of(const HardNegativeSet& set, const SortedScoreView& v) {
  std::map<std::string, std::size_t> rank;
  for (std::size_t i = 0; i < v.image_ids.size(); ++i) rank[v.image_ids[i]] = i + 1;
  std::set<std::size_t> out;
  for (const auto& id : set.negative_ids) out.insert(rank.at(id));
  return out;
}

// ---------------------------------------------------------------------------
// Metric oracles.

inline double oracle_recall(const std::vector<std::vector<std::string>>& ranked,
                            const std::vector<std::string>& targets, std::size_t k) {
  double hits = 0;
  for (std::size_t q = 0; q < ranked.size(); ++q) {
    for (std::size_t i = 0; i < ranked[q].size() && i < k; ++i) {
      if (ranked[q][i] == targets[q]) {
        hits += 1;
        break;
      }
    }
  }
  return 100.0 * hits / static_cast<double>(ranked.size());
}

inline double oracle_ap(const std::vector<std::string>& ranked, const std::set<std::string>& rel,
                        std::size_t k) {
  double sum = 0;
  for (std::size_t i = 1; i <= std::min(k, ranked.size()); ++i) {
    if (!rel.count(ranked[i - 1])) continue;
    std::size_t hits = 0;
    for (std::size_t j = 1; j <= i; ++j) hits += rel.count(ranked[j - 1]);
    sum += static_cast<double>(hits) / static_cast<double>(i);
  }
  return sum / static_cast<double>(std::min(k, rel.size()));
}

// ---------------------------------------------------------------------------
// Small random datasets.

inline std::vector<float> gaussianish(SplitMix64& rng, std::size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) {
    double acc = 0;
    for (int i = 0; i < 4; ++i) acc += rng.unit();
    x = static_cast<float>(acc - 2.0);
  }
  return v;
}

inline EmbeddingMatrix random_matrix(SplitMix64& rng, std::uint32_t dim, std::size_t n,
                                     const std::string& prefix) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(i));
  return EmbeddingMatrix(dim, ids, gaussianish(rng, n * dim));
}

// n_queries queries over an n_img corpus; query q uses ref image q % n_img
// and the target (q * 7 + 3) % n_img (distinct from the reference when
// n_img > 1).
inline Dataset random_dataset(std::uint64_t seed, std::uint32_t dim, std::size_t n_img,
                              std::size_t n_queries) {
  SplitMix64 rng(seed);
  auto corpus = random_matrix(rng, dim, n_img, "img");
  auto qimg = random_matrix(rng, dim, n_queries, "ref");
  auto qtxt = random_matrix(rng, dim, n_queries, "txt");
  DatasetManifest m;
  for (std::size_t q = 0; q < n_queries; ++q) {
    QueryRecord r;
    r.query_id = "q" + std::to_string(q);
    r.ref_image_id = "ref" + std::to_string(q);
    r.text_embed_id = "txt" + std::to_string(q);
    r.target_id = "img" + std::to_string((q * 7 + 3) % n_img);
    m.queries.push_back(r);
  }
  return Dataset(std::move(m), std::move(corpus), std::move(qimg), std::move(qtxt));
}

inline AdapterParams random_params(SplitMix64& rng, std::size_t d_in, std::size_t d_out,
                                   double log_inv_tau) {
  auto p = AdapterParams::zeros(d_in, d_out);
  auto fill = [&](std::vector<double>& v, double scale) {
    for (auto& x : v) x = (rng.unit() * 2 - 1) * scale;
  };
  fill(p.w_fuse, 1.0);
  fill(p.b_fuse, 0.3);
  fill(p.w_img, 1.0);
  fill(p.b_img, 0.3);
  p.log_inv_tau = log_inv_tau;
  return p;
}

}  // namespace qure::testing
