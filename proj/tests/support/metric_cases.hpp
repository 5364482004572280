#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "qure/evaluator.hpp"
#include "support/oracles.hpp"

namespace qure::testing {

struct MetricComparison {
  double worst = 0;  // largest |library - oracle|
  std::string metric;
  void note(double lib, double oracle, const char* name) {
    const double d = std::abs(lib - oracle);
    if (d > worst || std::isnan(d)) {
      worst = std::isnan(d) ? 1e300 : d;
      metric = name;
    }
  }
};

// One random instance: up to 50 queries over up to 100 images. Compares
// recall@k, recall_subset@k, map@k, set relevance means and the preference
// rate against direct computations.
inline void compare_random_metrics(SplitMix64& rng, MetricComparison& cmp) {
  const std::size_t n_img = 2 + rng.below(99);
  const std::size_t n_q = 1 + rng.below(50);
  std::vector<std::string> corpus;
  for (std::size_t i = 0; i < n_img; ++i) corpus.push_back("i" + std::to_string(i));

  std::vector<RankedList> rankings;
  GroundTruthMap truth;
  SubsetMap subsets;
  std::vector<std::vector<std::string>> ranked_ids, subset_ranked;
  std::vector<std::string> targets;
  std::vector<std::set<std::string>> relevant;
  for (std::size_t q = 0; q < n_q; ++q) {
    std::vector<std::string> order(corpus);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    // lists are sometimes truncated, so targets may be missing
    const std::size_t len = rng.below(4) == 0 ? 1 + rng.below(n_img) : n_img;
    order.resize(len);
    RankedList r;
    r.query_id = "q" + std::to_string(q);
    for (std::size_t i = 0; i < order.size(); ++i) {
      r.entries.push_back({order[i], static_cast<double>(order.size() - i)});
    }
    rankings.push_back(r);
    ranked_ids.push_back(order);

    GroundTruth g;
    g.query_id = r.query_id;
    const std::size_t n_rel = 1 + rng.below(std::min<std::size_t>(n_img, 8));
    std::set<std::string> rel;
    while (rel.size() < n_rel) rel.insert(corpus[rng.below(n_img)]);
    g.relevant_ids.assign(rel.begin(), rel.end());
    g.target_id = g.relevant_ids[rng.below(g.relevant_ids.size())];
    truth[g.query_id] = g;
    targets.push_back(g.target_id);
    relevant.push_back(rel);

    std::set<std::string> sub{g.target_id};
    const std::size_t n_sub = rng.below(std::min<std::size_t>(n_img, 10));
    for (std::size_t i = 0; i < n_sub; ++i) sub.insert(corpus[rng.below(n_img)]);
    subsets[g.query_id] = std::vector<std::string>(sub.begin(), sub.end());
    std::vector<std::string> filtered;
    for (const auto& id : order) {
      if (sub.count(id)) filtered.push_back(id);
    }
    subset_ranked.push_back(filtered);
  }

  for (std::size_t k : {std::size_t{1}, std::size_t{5}, 1 + rng.below(n_img + 5)}) {
    cmp.note(recall_at_k(rankings, truth, k), oracle_recall(ranked_ids, targets, k), "recall@k");
    cmp.note(recall_subset_at_k(rankings, truth, subsets, k), oracle_recall(subset_ranked, targets, k),
             "recall_subset@k");
    double ap = 0;
    for (std::size_t q = 0; q < n_q; ++q) ap += oracle_ap(ranked_ids[q], relevant[q], k);
    cmp.note(map_at_k(rankings, truth, k), 100.0 * ap / static_cast<double>(n_q), "map@k");
  }

  // preference rate from set relevances; scores on a coarse grid create ties
  const std::size_t n_rec = 1 + rng.below(50);
  std::vector<std::pair<double, double>> set_scores;
  std::vector<Choice> choices;
  std::size_t considered = 0, agreed = 0;
  for (std::size_t i = 0; i < n_rec; ++i) {
    double s1 = 0, s2 = 0;
    for (int j = 0; j < 5; ++j) {
      s1 += static_cast<double>(rng.below(5));
      s2 += static_cast<double>(rng.below(5));
    }
    set_scores.push_back({s1 / 5, s2 / 5});
    choices.push_back(rng.below(2) ? Choice::Set1 : Choice::Set2);
    if (s1 > s2) {
      ++considered;
      agreed += choices.back() == Choice::Set1;
    }
  }
  const auto pr = preference_rate_from_scores(set_scores, choices);
  if (considered == 0) {
    cmp.note(pr.rate.has_value() ? 1.0 : 0.0, 0.0, "preference_rate (undefined)");
  } else {
    cmp.note(pr.rate.value_or(-1e9), 100.0 * agreed / static_cast<double>(considered), "preference_rate");
  }
  cmp.note(static_cast<double>(pr.excluded), static_cast<double>(n_rec - considered), "preference exclusions");
}

}  // namespace qure::testing
