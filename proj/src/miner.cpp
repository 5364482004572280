#include "qure/miner.hpp"

#include <algorithm>

#include "qure/error.hpp"
#include "qure/parallel.hpp"
#include "qure/rng.hpp"

namespace qure {

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::TwoDrops: return "two-drops";
    case Strategy::AllCorpus: return "all";
    case Strategy::TopK: return "top-k";
    case Strategy::AfterTargetTopK: return "after-target-top-k";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "two-drops") return Strategy::TwoDrops;
  if (name == "all") return Strategy::AllCorpus;
  if (name == "top-k") return Strategy::TopK;
  if (name == "after-target-top-k") return Strategy::AfterTargetTopK;
  throw Error(ErrorKind::Config, "unknown strategy '" + std::string(name) +
                                     "' (expected two-drops|all|top-k|after-target-top-k)");
}

std::string_view to_string(Fallback f) {
  switch (f) {
    case Fallback::None: return "none";
    case Fallback::BelowTarget: return "below-target";
    case Fallback::WarmUp: return "warm-up";
  }
  return "unknown";
}

RankRange below_target_slice(const SortedScoreView& view, double target_score) {
  const std::size_t n = view.size();
  // Scores are non-increasing, so the strictly-lower ranks form a suffix.
  auto it = std::find_if(view.scores.begin(), view.scores.end(),
                         [&](double s) { return s < target_score; });
  const auto first = static_cast<std::size_t>(it - view.scores.begin()) + 1;
  return {first, n};
}

std::optional<DropPair> top2_drops(const SortedScoreView& view, RankRange below) {
  if (below.empty()) return std::nullopt;
  const std::size_t last = std::min(below.last, view.size() - 1);  // j + 1 must exist
  if (last < below.first || last - below.first + 1 < 2) return std::nullopt;

  std::size_t best = 0, second = 0;
  double best_d = 0.0, second_d = 0.0;
  for (std::size_t j = below.first; j <= last; ++j) {
    const double d = view.score_at(j) - view.score_at(j + 1);
    // Strict comparisons keep the earlier (smaller) rank on ties.
    if (best == 0 || d > best_d) {
      second = best;
      second_d = best_d;
      best = j;
      best_d = d;
    } else if (second == 0 || d > second_d) {
      second = j;
      second_d = d;
    }
  }
  return DropPair{best, second};
}

namespace {

HardNegativeSet from_ranks(const SortedScoreView& view, RankRange ranks, Strategy strategy) {
  HardNegativeSet set;
  set.query_id = view.query_id;
  set.strategy = strategy;
  set.ranks = ranks;
  for (std::size_t j = ranks.first; j <= ranks.last && !ranks.empty(); ++j) {
    if (j != view.target_pos) set.negative_ids.push_back(view.image_ids[j - 1]);
  }
  return set;
}

[[noreturn]] void fallback_required(const SortedScoreView& view, const char* why) {
  throw Error(ErrorKind::FallbackRequired, "query '" + view.query_id + "': " + why);
}

}  // namespace

HardNegativeSet two_drops_set(const SortedScoreView& view, double target_score) {
  const RankRange below = below_target_slice(view, target_score);
  const auto drops = top2_drops(view, below);
  if (!drops) fallback_required(view, "fewer than two score drops below the target");
  const RankRange ranks{std::min(drops->k1, drops->k2) + 1, std::max(drops->k1, drops->k2)};
  return from_ranks(view, ranks, Strategy::TwoDrops);
}

HardNegativeSet warmup_set(const SortedScoreView& view) {
  HardNegativeSet set = from_ranks(view, {1, view.size()}, Strategy::AllCorpus);
  set.ranks = {};
  return set;
}

HardNegativeSet strategy_set(const SortedScoreView& view, double target_score, Strategy strategy,
                             std::size_t k) {
  if (k == 0 && (strategy == Strategy::TopK || strategy == Strategy::AfterTargetTopK)) {
    throw Error(ErrorKind::Config, "k must be at least 1");
  }
  switch (strategy) {
    case Strategy::TwoDrops:
      return two_drops_set(view, target_score);
    case Strategy::AllCorpus:
      return warmup_set(view);
    case Strategy::TopK: {
      // k members, skipping the target wherever it sits.
      const std::size_t last = std::min(view.size(), k + (view.target_pos <= k ? 1 : 0));
      HardNegativeSet set = from_ranks(view, {1, last}, Strategy::TopK);
      set.ranks = {};
      return set;
    }
    case Strategy::AfterTargetTopK: {
      const RankRange below = below_target_slice(view, target_score);
      if (below.empty()) fallback_required(view, "no image scores below the target");
      return from_ranks(view, {below.first, std::min(below.last, below.first + k - 1)},
                        Strategy::AfterTargetTopK);
    }
  }
  throw Error(ErrorKind::Config, "unhandled strategy");
}

MinerStats summarize(const std::vector<HardNegativeSet>& sets, std::int64_t epoch,
                     Strategy strategy, bool warmup) {
  MinerStats st;
  st.epoch = epoch;
  st.strategy = strategy;
  st.warmup = warmup;
  st.queries = sets.size();
  if (sets.empty()) return st;
  std::vector<std::size_t> sizes;
  sizes.reserve(sets.size());
  double total = 0.0;
  for (const auto& s : sets) {
    sizes.push_back(s.negative_ids.size());
    total += static_cast<double>(s.negative_ids.size());
    if (s.fallback == Fallback::BelowTarget) ++st.fallback_below_target;
    if (s.fallback == Fallback::WarmUp) ++st.fallback_warmup;
  }
  st.fallback_count = st.fallback_below_target + st.fallback_warmup;
  std::sort(sizes.begin(), sizes.end());
  st.mean_size = total / static_cast<double>(sizes.size());
  const std::size_t mid = sizes.size() / 2;
  st.median_size = sizes.size() % 2 == 1
                       ? static_cast<double>(sizes[mid])
                       : 0.5 * static_cast<double>(sizes[mid - 1] + sizes[mid]);
  st.min_size = sizes.front();
  st.max_size = sizes.back();
  return st;
}

SortedScoreView sorted_view(const CorpusScorer& scorer, const Dataset& data, std::size_t query) {
  const auto& record = data.manifest().queries[query];
  const auto& rq = data.resolved()[query];
  std::vector<double> q;
  try {
    q = fuse_query(scorer.params(), data.query_img().row(rq.ref_row), data.query_txt().row(rq.text_row));
  } catch (const Error& e) {
    throw Error(e.kind(), "query '" + record.query_id + "': " + e.what());
  }
  const auto scores = scorer.score_all(q);
  const auto order = scorer.order(scores);

  SortedScoreView view;
  view.query_id = record.query_id;
  view.scores.reserve(order.size());
  view.image_ids.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    view.scores.push_back(scores[order[i]]);
    view.image_ids.push_back(data.corpus().id(order[i]));
    if (order[i] == rq.target_row) view.target_pos = i + 1;
  }
  return view;
}

MiningResult mine_all(const AdapterParams& params_snapshot, const Dataset& data, Strategy strategy,
                      std::size_t k, std::int64_t epoch, std::size_t threads) {
  const bool warmup = epoch == 0;
  const std::size_t n = data.query_count();
  MiningResult result;
  result.sets.resize(n);

  if (warmup) {
    const auto& ids = data.corpus().ids();
    for (std::size_t i = 0; i < n; ++i) {
      auto& set = result.sets[i];
      set.query_id = data.manifest().queries[i].query_id;
      set.strategy = Strategy::AllCorpus;
      set.epoch_defined = epoch;
      const std::size_t target = data.resolved()[i].target_row;
      set.negative_ids.reserve(ids.size() - 1);
      for (std::size_t r = 0; r < ids.size(); ++r) {
        if (r != target) set.negative_ids.push_back(ids[r]);
      }
    }
    result.stats = summarize(result.sets, epoch, strategy, true);
    return result;
  }

  const CorpusScorer scorer(params_snapshot, data.corpus(), kDefaultChunkRows, threads);
  parallel_for(n, threads, [&](std::size_t i) {
    const SortedScoreView view = sorted_view(scorer, data, i);
    const double target_score = view.target_score();
    HardNegativeSet set;
    try {
      set = strategy_set(view, target_score, strategy, k);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::FallbackRequired) throw;
      const RankRange below = below_target_slice(view, target_score);
      if (!below.empty()) {
        set = from_ranks(view, below, strategy);
        set.fallback = Fallback::BelowTarget;
      } else {
        set = warmup_set(view);
        set.strategy = strategy;
        set.fallback = Fallback::WarmUp;
      }
    }
    set.epoch_defined = epoch;
    result.sets[i] = std::move(set);
  });
  result.stats = summarize(result.sets, epoch, strategy, false);
  return result;
}

const std::string& sample_negative(const HardNegativeSet& set, std::uint64_t seed,
                                   std::uint64_t draw_index) {
  if (set.negative_ids.empty()) {
    throw Error(ErrorKind::Validation, "cannot sample from an empty negative set (query '" +
                                           set.query_id + "')");
  }
  SplitMix64 rng(derive_seed(seed, draw_index));
  return set.negative_ids[rng.below(set.negative_ids.size())];
}

}  // namespace qure
