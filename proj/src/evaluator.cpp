#include "qure/evaluator.hpp"

#include <algorithm>
#include <array>
#include <unordered_set>

#include "jsonl.hpp"
#include "qure/error.hpp"

namespace qure {

using json = nlohmann::json;

namespace {

const GroundTruth& truth_for(const GroundTruthMap& truth, const std::string& query_id) {
  auto it = truth.find(query_id);
  if (it == truth.end()) throw Error(ErrorKind::Lookup, "no ground truth for query '" + query_id + "'");
  return it->second;
}

void require_k(std::size_t k) {
  if (k == 0) throw Error(ErrorKind::Validation, "k must be at least 1");
}

void require_rankings(std::span<const RankedList> rankings) {
  if (rankings.empty()) throw Error(ErrorKind::Validation, "no rankings to evaluate");
}

bool target_in_top_k(const std::vector<RankedEntry>& entries, const std::string& target,
                     std::size_t k) {
  const std::size_t n = std::min(k, entries.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (entries[i].image_id == target) return true;
  }
  return false;
}

}  // namespace

double recall_at_k(std::span<const RankedList> rankings, const GroundTruthMap& truth, std::size_t k) {
  require_k(k);
  require_rankings(rankings);
  std::size_t hits = 0;
  for (const auto& r : rankings) {
    if (target_in_top_k(r.entries, truth_for(truth, r.query_id).target_id, k)) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(rankings.size());
}

double recall_subset_at_k(std::span<const RankedList> rankings, const GroundTruthMap& truth,
                          const SubsetMap& subsets, std::size_t k) {
  require_k(k);
  require_rankings(rankings);
  std::size_t hits = 0;
  for (const auto& r : rankings) {
    const auto& gt = truth_for(truth, r.query_id);
    auto it = subsets.find(r.query_id);
    if (it == subsets.end()) {
      throw Error(ErrorKind::Validation, "query '" + r.query_id + "' has no candidate subset");
    }
    const std::unordered_set<std::string> subset(it->second.begin(), it->second.end());
    if (!subset.count(gt.target_id)) {
      throw Error(ErrorKind::Validation, "target of query '" + r.query_id + "' is outside its subset");
    }
    std::size_t position = 0;
    for (const auto& e : r.entries) {
      if (!subset.count(e.image_id)) continue;
      if (++position > k) break;
      if (e.image_id == gt.target_id) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(rankings.size());
}

double map_at_k(std::span<const RankedList> rankings, const GroundTruthMap& truth, std::size_t k) {
  require_k(k);
  require_rankings(rankings);
  double total = 0.0;
  for (const auto& r : rankings) {
    const auto& gt = truth_for(truth, r.query_id);
    const std::unordered_set<std::string> relevant(gt.relevant_ids.begin(), gt.relevant_ids.end());
    if (relevant.empty()) {
      throw Error(ErrorKind::Validation, "empty relevant set for query '" + r.query_id + "'");
    }
    const std::size_t n = std::min(k, r.entries.size());
    std::size_t found = 0;
    double ap = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (relevant.count(r.entries[i].image_id)) {
        ++found;
        ap += static_cast<double>(found) / static_cast<double>(i + 1);
      }
    }
    total += ap / static_cast<double>(std::min(k, relevant.size()));
  }
  return 100.0 * total / static_cast<double>(rankings.size());
}

double set_relevance(const AdapterParams& params, const QueryRecord& query,
                     std::span<const std::string> set_ids, const Dataset& data) {
  if (set_ids.size() != 5) {
    throw Error(ErrorKind::Validation, "set relevance needs exactly 5 images, got " +
                                           std::to_string(set_ids.size()));
  }
  const auto q = fuse_query(params, data.query_img().row(data.query_img().index_of(query.ref_image_id)),
                            data.query_txt().row(data.query_txt().index_of(query.text_embed_id)));
  std::array<double, 5> scores{};
  for (std::size_t i = 0; i < 5; ++i) {
    const auto v = embed_image(params, data.corpus().row(data.corpus().index_of(set_ids[i])));
    scores[i] = relevance_score(params, q, v);
  }
  // summed in sorted order so the mean does not depend on the id order
  std::sort(scores.begin(), scores.end());
  double sum = 0.0;
  for (double x : scores) sum += x;
  return sum / 5.0;
}

PreferenceRateResult preference_rate_from_scores(std::span<const std::pair<double, double>> set_scores,
                                                 std::span<const Choice> choices) {
  if (set_scores.size() != choices.size()) {
    throw Error(ErrorKind::Validation, "score and choice counts differ");
  }
  PreferenceRateResult out;
  for (std::size_t i = 0; i < set_scores.size(); ++i) {
    if (set_scores[i].first > set_scores[i].second) {
      ++out.considered;
      if (choices[i] == Choice::Set1) ++out.agreed;
    } else {
      ++out.excluded;
    }
  }
  if (out.considered > 0) {
    out.rate = 100.0 * static_cast<double>(out.agreed) / static_cast<double>(out.considered);
  }
  return out;
}

PreferenceRateResult preference_rate(const AdapterParams& params,
                                     std::span<const PreferenceRecord> records, const Dataset& data) {
  std::vector<std::pair<double, double>> scores;
  std::vector<Choice> choices;
  scores.reserve(records.size());
  choices.reserve(records.size());
  for (const auto& r : records) {
    const auto& query = data.manifest().queries[data.query_index(r.query_id)];
    scores.emplace_back(set_relevance(params, query, r.set1_ids, data),
                        set_relevance(params, query, r.set2_ids, data));
    choices.push_back(r.human_choice);
  }
  return preference_rate_from_scores(scores, choices);
}

MetricSpec parse_metric(const std::string& name) {
  const auto at = name.find('@');
  if (at == std::string::npos) throw Error(ErrorKind::Config, "metric '" + name + "' lacks @k");
  const std::string base = name.substr(0, at);
  MetricSpec spec;
  spec.name = name;
  if (base == "recall") {
    spec.kind = MetricSpec::Kind::Recall;
  } else if (base == "recall_subset" || base == "recalls" || base == "recall_s") {
    spec.kind = MetricSpec::Kind::RecallSubset;
  } else if (base == "map") {
    spec.kind = MetricSpec::Kind::MeanAP;
  } else {
    throw Error(ErrorKind::Config, "unknown metric '" + base + "'");
  }
  try {
    std::size_t used = 0;
    const long long k = std::stoll(name.substr(at + 1), &used);
    if (used != name.size() - at - 1 || k < 1) throw std::invalid_argument("k");
    spec.k = static_cast<std::size_t>(k);
  } catch (const std::exception&) {
    throw Error(ErrorKind::Config, "metric '" + name + "' needs a positive integer k");
  }
  return spec;
}

EvalReport evaluate(std::span<const RankedList> rankings, const GroundTruthMap& truth,
                    std::span<const MetricSpec> metrics, const SubsetMap* subsets) {
  EvalReport report;
  report.query_count = rankings.size();
  for (const auto& m : metrics) {
    double value = 0.0;
    switch (m.kind) {
      case MetricSpec::Kind::Recall: value = recall_at_k(rankings, truth, m.k); break;
      case MetricSpec::Kind::MeanAP: value = map_at_k(rankings, truth, m.k); break;
      case MetricSpec::Kind::RecallSubset:
        if (!subsets) throw Error(ErrorKind::Config, m.name + " needs candidate subsets");
        value = recall_subset_at_k(rankings, truth, *subsets, m.k);
        break;
    }
    report.metrics.emplace_back(m.name, value);
  }
  return report;
}

json to_json(const EvalReport& report) {
  json metrics = json::object();
  for (const auto& [name, value] : report.metrics) metrics[name] = value;
  json j;
  j["metrics"] = metrics;
  j["query_count"] = report.query_count;
  j["split"] = report.split;
  if (!report.config.is_null()) j["config"] = report.config;
  return j;
}

// ---------------------------------------------------------------------------
// Files

namespace {

std::vector<std::string> string_array(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_array()) {
    throw Error(ErrorKind::Format, std::string("missing array field '") + key + "'");
  }
  std::vector<std::string> out;
  for (const auto& e : j[key]) {
    if (!e.is_string()) throw Error(ErrorKind::Format, std::string("'") + key + "' must hold strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

std::string string_field(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) {
    throw Error(ErrorKind::Format, std::string("missing string field '") + key + "'");
  }
  return j[key].get<std::string>();
}

}  // namespace

GroundTruthMap load_truth(const std::filesystem::path& source) {
  GroundTruthMap out;
  detail::for_each_json_line(source, [&](const json& j) {
    GroundTruth gt;
    gt.query_id = string_field(j, "query_id");
    gt.relevant_ids = string_array(j, "relevant_ids");
    if (gt.relevant_ids.empty()) throw Error(ErrorKind::Validation, "relevant_ids is empty");
    gt.target_id = j.contains("target_id") ? string_field(j, "target_id") : gt.relevant_ids.front();
    if (std::find(gt.relevant_ids.begin(), gt.relevant_ids.end(), gt.target_id) == gt.relevant_ids.end()) {
      throw Error(ErrorKind::Validation, "target_id not among relevant_ids");
    }
    const std::string qid = gt.query_id;
    if (!out.emplace(qid, std::move(gt)).second) {
      throw Error(ErrorKind::Validation, "duplicate truth for query '" + qid + "'");
    }
  });
  return out;
}

void write_truth(std::span<const GroundTruth> truth, const std::filesystem::path& destination) {
  auto out = detail::open_for_writing(destination);
  for (const auto& gt : truth) {
    json j;
    j["query_id"] = gt.query_id;
    j["relevant_ids"] = gt.relevant_ids;
    j["target_id"] = gt.target_id;
    out << j.dump() << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed: " + destination.string());
}

std::vector<RankedList> load_rankings(const std::filesystem::path& source) {
  std::vector<RankedList> out;
  detail::for_each_json_line(source, [&](const json& j) {
    RankedList r;
    r.query_id = string_field(j, "query_id");
    const auto ids = string_array(j, "ids");
    std::vector<double> scores;
    if (j.contains("scores")) {
      for (const auto& s : j["scores"]) scores.push_back(s.get<double>());
      if (scores.size() != ids.size()) throw Error(ErrorKind::Format, "ids and scores differ in length");
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
      r.entries.push_back({ids[i], scores.empty() ? 0.0 : scores[i]});
    }
    out.push_back(std::move(r));
  });
  return out;
}

void write_rankings(std::span<const RankedList> rankings, std::size_t k,
                    const std::filesystem::path& destination) {
  auto out = detail::open_for_writing(destination);
  write_rankings(rankings, k, out);
  if (!out) throw Error(ErrorKind::Io, "write failed: " + destination.string());
}

void write_rankings(std::span<const RankedList> rankings, std::size_t k, std::ostream& out) {
  for (const auto& r : rankings) {
    const std::size_t n = std::min(k, r.entries.size());
    json ids = json::array(), scores = json::array();
    for (std::size_t i = 0; i < n; ++i) {
      ids.push_back(r.entries[i].image_id);
      scores.push_back(r.entries[i].score);
    }
    json j;
    j["query_id"] = r.query_id;
    j["ids"] = std::move(ids);
    j["scores"] = std::move(scores);
    out << j.dump() << '\n';
  }
}

std::vector<PreferenceRecord> load_preferences(const std::filesystem::path& source) {
  std::vector<PreferenceRecord> out;
  detail::for_each_json_line(source, [&](const json& j) {
    PreferenceRecord r;
    r.query_id = string_field(j, "query_id");
    r.set1_ids = string_array(j, "set1_ids");
    r.set2_ids = string_array(j, "set2_ids");
    if (r.set1_ids.size() != 5 || r.set2_ids.size() != 5) {
      throw Error(ErrorKind::Validation, "preference sets must hold exactly 5 ids");
    }
    const auto choice = string_field(j, j.contains("human_choice") ? "human_choice" : "choice");
    if (choice == "set1") {
      r.human_choice = Choice::Set1;
    } else if (choice == "set2") {
      r.human_choice = Choice::Set2;
    } else {
      throw Error(ErrorKind::Format, "human_choice must be \"set1\" or \"set2\"");
    }
    out.push_back(std::move(r));
  });
  return out;
}

void write_preferences(std::span<const PreferenceRecord> records,
                       const std::filesystem::path& destination) {
  auto out = detail::open_for_writing(destination);
  for (const auto& r : records) {
    json j;
    j["query_id"] = r.query_id;
    j["set1_ids"] = r.set1_ids;
    j["set2_ids"] = r.set2_ids;
    j["human_choice"] = r.human_choice == Choice::Set1 ? "set1" : "set2";
    out << j.dump() << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed: " + destination.string());
}

}  // namespace qure
