#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace qure {

// Dense row-major f32 matrix with one string id per row. Dense indices are
// assigned in row order at construction and are never persisted.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  // Throws Validation if values.size() != ids.size() * dim.
  EmbeddingMatrix(std::uint32_t dim, std::vector<std::string> ids, std::vector<float> values);

  std::uint32_t dim() const noexcept { return dim_; }
  std::size_t count() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<float>& values() const noexcept { return values_; }
  const std::string& id(std::size_t row) const { return ids_.at(row); }

  std::span<const float> row(std::size_t i) const {
    return {values_.data() + i * dim_, dim_};
  }

  std::optional<std::size_t> find(const std::string& id) const;
  // Throws Lookup naming the id.
  std::size_t index_of(const std::string& id) const;

  // Returns an empty string when every invariant holds, else the first violation.
  std::string check_invariants() const;

  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.values_ == b.values_;
  }

 private:
  std::uint32_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct QueryRecord {
  std::string query_id;
  std::string ref_image_id;
  std::string text_embed_id;
  std::string target_id;
  std::optional<std::vector<std::string>> subset_ids;

  friend bool operator==(const QueryRecord&, const QueryRecord&) = default;
};

struct DatasetManifest {
  std::vector<std::string> corpus_ids;
  std::vector<QueryRecord> queries;
  std::string split = "train";
};

struct ValidationIssue {
  std::string kind;  // e.g. "dangling target", "target outside subset"
  std::string query_id;
  std::string detail;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool empty() const noexcept { return issues.empty(); }
};

// Binary container shared by embedding files and checkpoints.
inline constexpr char kMagic[4] = {'Q', 'U', 'R', 'E'};
inline constexpr std::uint8_t kFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr std::uint8_t kDtypeCheckpoint = 2;
inline constexpr std::size_t kHeaderSize = 20;

void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& destination);
EmbeddingMatrix load_embeddings(const std::filesystem::path& source);

// In-memory forms of the file codec, used by the file functions and by tests.
std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& matrix);
EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes);

// Manifest files hold one JSON object per query line. corpus_ids is not
// stored; callers fill it from the corpus matrix.
DatasetManifest load_manifest(const std::filesystem::path& source, std::string split = "train");
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& destination);
QueryRecord parse_query_record(const std::string& json_line);
std::string format_query_record(const QueryRecord& record);

ValidationReport validate_manifest(const DatasetManifest& manifest, const EmbeddingMatrix& corpus,
                                   const EmbeddingMatrix& queries_img,
                                   const EmbeddingMatrix& queries_txt);

// Query ids resolved to dense row indices of the three matrices.
struct ResolvedQuery {
  std::size_t ref_row = 0;
  std::size_t text_row = 0;
  std::size_t target_row = 0;
  std::optional<std::vector<std::size_t>> subset_rows;
};

// A validated manifest together with the matrices it references. Immutable
// after construction and safe to share across worker threads.
class Dataset {
 public:
  // Throws Validation with the first report entry when the manifest is unusable.
  Dataset(DatasetManifest manifest, EmbeddingMatrix corpus, EmbeddingMatrix query_img,
          EmbeddingMatrix query_txt);

  const DatasetManifest& manifest() const noexcept { return manifest_; }
  const EmbeddingMatrix& corpus() const noexcept { return corpus_; }
  const EmbeddingMatrix& query_img() const noexcept { return query_img_; }
  const EmbeddingMatrix& query_txt() const noexcept { return query_txt_; }
  const std::vector<ResolvedQuery>& resolved() const noexcept { return resolved_; }
  std::size_t query_count() const noexcept { return manifest_.queries.size(); }
  std::size_t query_index(const std::string& query_id) const;

 private:
  DatasetManifest manifest_;
  EmbeddingMatrix corpus_;
  EmbeddingMatrix query_img_;
  EmbeddingMatrix query_txt_;
  std::vector<ResolvedQuery> resolved_;
  std::unordered_map<std::string, std::size_t> query_index_;
};

}  // namespace qure
