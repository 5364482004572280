#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "qure/embedding_store.hpp"
#include "qure/scorer.hpp"

namespace qure {

// Relevant images for one query. target_id is the annotated target used by
// Recall@k; relevant_ids (which include it) drive mAP@k.
struct GroundTruth {
  std::string query_id;
  std::vector<std::string> relevant_ids;
  std::string target_id;
};

using GroundTruthMap = std::unordered_map<std::string, GroundTruth>;
using SubsetMap = std::unordered_map<std::string, std::vector<std::string>>;

// Percent of queries whose target is within the first k entries.
double recall_at_k(std::span<const RankedList> rankings, const GroundTruthMap& truth, std::size_t k);

// Recall@k after restricting each ranking to its query's candidate subset
// (relative order preserved).
double recall_subset_at_k(std::span<const RankedList> rankings, const GroundTruthMap& truth,
                          const SubsetMap& subsets, std::size_t k);

// Mean over queries of AP@k = (1/min(k,|R|)) * sum_{i<=k} P@i * rel(i), in percent.
double map_at_k(std::span<const RankedList> rankings, const GroundTruthMap& truth, std::size_t k);

// Mean relevance score of a five-image set for one query.
double set_relevance(const AdapterParams& params, const QueryRecord& query,
                     std::span<const std::string> set_ids, const Dataset& data);

enum class Choice { Set1, Set2 };

struct PreferenceRecord {
  std::string query_id;
  std::vector<std::string> set1_ids;
  std::vector<std::string> set2_ids;
  Choice human_choice = Choice::Set1;
};

struct PreferenceRateResult {
  std::optional<double> rate;  // nullopt when no record has s_rel(Set1) > s_rel(Set2)
  std::size_t considered = 0;
  std::size_t agreed = 0;
  std::size_t excluded = 0;
};

// P(humans prefer Set1 | s_rel(Set1) > s_rel(Set2)) in percent. Records with
// s_rel(Set1) <= s_rel(Set2) are excluded and counted.
PreferenceRateResult preference_rate(const AdapterParams& params,
                                     std::span<const PreferenceRecord> records, const Dataset& data);

// Same, from precomputed set relevances (set1, set2) per record.
PreferenceRateResult preference_rate_from_scores(std::span<const std::pair<double, double>> set_scores,
                                                 std::span<const Choice> choices);

struct MetricSpec {
  enum class Kind { Recall, RecallSubset, MeanAP } kind = Kind::Recall;
  std::size_t k = 1;
  std::string name;
};

// Parses "recall@10", "recall_subset@1" (alias "recalls@1"), "map@5".
MetricSpec parse_metric(const std::string& name);

struct EvalReport {
  std::vector<std::pair<std::string, double>> metrics;
  std::size_t query_count = 0;
  std::string split;
  nlohmann::json config;
};

EvalReport evaluate(std::span<const RankedList> rankings, const GroundTruthMap& truth,
                    std::span<const MetricSpec> metrics, const SubsetMap* subsets = nullptr);
nlohmann::json to_json(const EvalReport& report);

// JSON-lines files.
GroundTruthMap load_truth(const std::filesystem::path& source);
void write_truth(std::span<const GroundTruth> truth, const std::filesystem::path& destination);
std::vector<RankedList> load_rankings(const std::filesystem::path& source);
void write_rankings(std::span<const RankedList> rankings, std::size_t k,
                    const std::filesystem::path& destination);
void write_rankings(std::span<const RankedList> rankings, std::size_t k, std::ostream& out);
std::vector<PreferenceRecord> load_preferences(const std::filesystem::path& source);
void write_preferences(std::span<const PreferenceRecord> records,
                       const std::filesystem::path& destination);

}  // namespace qure
