#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qure/embedding_store.hpp"
#include "qure/scorer.hpp"

namespace qure {

enum class Strategy { TwoDrops, AllCorpus, TopK, AfterTargetTopK };

// CLI spellings: two-drops, all, top-k, after-target-top-k.
std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

inline constexpr std::size_t kDefaultTopK = 100;

// One query's corpus scores in descending order. Ranks are 1-based.
struct SortedScoreView {
  std::string query_id;
  std::vector<double> scores;
  std::vector<std::string> image_ids;
  std::size_t target_pos = 0;

  std::size_t size() const noexcept { return scores.size(); }
  double score_at(std::size_t rank) const { return scores[rank - 1]; }
  double target_score() const { return score_at(target_pos); }
};

// Closed 1-based rank interval; empty when first > last.
struct RankRange {
  std::size_t first = 1;
  std::size_t last = 0;
  bool empty() const noexcept { return first > last; }
  std::size_t size() const noexcept { return empty() ? 0 : last - first + 1; }
  friend bool operator==(const RankRange&, const RankRange&) = default;
};

struct DropPair {
  std::size_t k1 = 0;  // rank of the largest drop
  std::size_t k2 = 0;  // rank of the second largest
  friend bool operator==(const DropPair&, const DropPair&) = default;
};

// How a set was produced when its strategy could not be applied as defined.
enum class Fallback { None, BelowTarget, WarmUp };
std::string_view to_string(Fallback f);

struct HardNegativeSet {
  std::string query_id;
  std::vector<std::string> negative_ids;  // in rank order
  Strategy strategy = Strategy::TwoDrops;
  std::int64_t epoch_defined = 0;
  Fallback fallback = Fallback::None;
  RankRange ranks;  // defining rank interval; empty for AllCorpus / TopK
};

// Maximal suffix of ranks whose score is strictly below target_score.
RankRange below_target_slice(const SortedScoreView& view, double target_score);

// The two largest adjacent drops s_j - s_{j+1} over ranks j in `below` that
// have a successor. Ties go to the smaller rank. nullopt when fewer than two
// such drops exist.
std::optional<DropPair> top2_drops(const SortedScoreView& view, RankRange below);

// Ranks strictly between the two steepest drops below the target, inclusive of
// the lower drop's rank. Throws FallbackRequired when top2_drops fails.
HardNegativeSet two_drops_set(const SortedScoreView& view, double target_score);

// Any of the four strategies. k is ignored by AllCorpus and TwoDrops.
HardNegativeSet strategy_set(const SortedScoreView& view, double target_score, Strategy strategy,
                             std::size_t k = kDefaultTopK);

// corpus \ {target}, the warm-up set.
HardNegativeSet warmup_set(const SortedScoreView& view);

struct MinerStats {
  std::int64_t epoch = 0;
  Strategy strategy = Strategy::TwoDrops;
  bool warmup = false;
  std::size_t queries = 0;
  double mean_size = 0.0;
  double median_size = 0.0;
  std::size_t min_size = 0;
  std::size_t max_size = 0;
  std::size_t fallback_count = 0;
  std::size_t fallback_below_target = 0;
  std::size_t fallback_warmup = 0;
};

MinerStats summarize(const std::vector<HardNegativeSet>& sets, std::int64_t epoch,
                     Strategy strategy, bool warmup);

struct MiningResult {
  std::vector<HardNegativeSet> sets;  // manifest query order
  MinerStats stats;
};

// Sorted view of one query under precomputed corpus embeddings.
SortedScoreView sorted_view(const CorpusScorer& scorer, const Dataset& data, std::size_t query);

// Defines one set per query. Epoch 0 is the warm-up (corpus \ target for every
// query). Otherwise the strategy is applied to the ranking under the frozen
// snapshot; per-query failures fall back to the whole below-target region, or
// to the warm-up set when that region is empty, and are counted.
MiningResult mine_all(const AdapterParams& params_snapshot, const Dataset& data, Strategy strategy,
                      std::size_t k, std::int64_t epoch, std::size_t threads = 1);

// Uniform draw from a nonempty set; the same (seed, draw_index) always
// returns the same member.
const std::string& sample_negative(const HardNegativeSet& set, std::uint64_t seed,
                                   std::uint64_t draw_index);

}  // namespace qure
